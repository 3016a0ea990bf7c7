//! Latent-manifold traversal: decode a grid over two latent features with the
//! others held at zero and tile one slice of each decoded volume.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cvae::Cvae;
use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldParams {
    /// Grid points per axis.
    pub grid: usize,
    pub range: [f64; 2],
    /// Latent features on the grid rows and columns; chosen by the caller when absent.
    pub feat_a: Option<usize>,
    pub feat_b: Option<usize>,
    pub slice_axis: SliceAxis,
    /// Slice index; defaults to the striatal centroid.
    pub slice_index: Option<usize>,
}

impl Default for ManifoldParams {
    fn default() -> Self {
        Self {
            grid: 7,
            range: [-3.0, 3.0],
            feat_a: None,
            feat_b: None,
            slice_axis: SliceAxis::Z,
            slice_index: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

impl SliceAxis {
    pub fn index(self) -> usize {
        match self {
            SliceAxis::X => 0,
            SliceAxis::Y => 1,
            SliceAxis::Z => 2,
        }
    }
}

/// `g` evenly spaced values over `[lo, hi]`.
pub fn grid_values(g: usize, range: [f64; 2]) -> Vec<f64> {
    (0..g)
        .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (g - 1) as f64)
        .collect()
}

/// Latent vector of grid tile `(row, col)`: `z[feat_a]` follows the row,
/// `z[feat_b]` the column, all other entries are zero.
pub fn grid_latents(d: usize, feat_a: usize, feat_b: usize, g: usize, range: [f64; 2]) -> Result<Vec<Vec<f64>>> {
    if feat_a >= d || feat_b >= d || feat_a == feat_b {
        return Err(Error::Config(format!(
            "grid features {feat_a} and {feat_b} must be distinct and below D = {d}"
        )));
    }
    if g < 2 || !(range[0] < range[1]) {
        return Err(Error::Config(format!("grid needs g >= 2 and lo < hi, got {g} over {range:?}")));
    }
    let vals = grid_values(g, range);
    let mut out = Vec::with_capacity(g * g);
    for &a in &vals {
        for &b in &vals {
            let mut z = vec![0.0; d];
            z[feat_a] = a;
            z[feat_b] = b;
            out.push(z);
        }
    }
    Ok(out)
}

/// Decode the `g x g` grid, row-major.
pub fn decode_grid(model: &Cvae<f32>, feat_a: usize, feat_b: usize, g: usize, range: [f64; 2], spacing: [f32; 3]) -> Result<Vec<Volume>> {
    let zs = grid_latents(model.latent_dim(), feat_a, feat_b, g, range)?;
    let mut out = Vec::with_capacity(zs.len());
    for chunk in zs.chunks(8) {
        out.extend(model.decode_batch(chunk, spacing)?);
    }
    Ok(out)
}

/// 2-D slice as `(width, height, values)`, row-major from the top row.
/// The second in-plane axis runs upward, so its last index is the top row.
pub fn slice(v: &Volume, axis: SliceAxis, index: usize) -> Result<(usize, usize, Vec<f32>)> {
    let dims = v.dims();
    let a = axis.index();
    if index >= dims[a] {
        return Err(Error::Shape(format!("slice {index} out of bounds for axis {a} of extent {}", dims[a])));
    }
    let (u, w) = match axis {
        SliceAxis::X => (1, 2),
        SliceAxis::Y => (0, 2),
        SliceAxis::Z => (0, 1),
    };
    let (width, height) = (dims[u], dims[w]);
    let mut out = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let mut p = [0; 3];
            p[a] = index;
            p[u] = col;
            p[w] = height - 1 - row;
            out.push(v.get(p[0], p[1], p[2]));
        }
    }
    Ok((width, height, out))
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| match e {
            png::EncodingError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        };
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(&self.pixels).map_err(fail)?;
        w.finish().map_err(fail)
    }
}

/// Linear window over the global `[min, max]` of the slices; a flat input is black.
pub fn window(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                (255.0 * ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Tile one slice of each of the `g x g` volumes, row-major, into one image.
pub fn montage(volumes: &[Volume], g: usize, axis: SliceAxis, index: usize) -> Result<GrayImage> {
    if g == 0 || volumes.len() != g * g {
        return Err(Error::Shape(format!("{} volumes for a {g} x {g} grid", volumes.len())));
    }
    if volumes.iter().any(|v| v.dims() != volumes[0].dims()) {
        return Err(Error::Shape("montage volumes differ in dims".into()));
    }
    let slices = volumes.iter().map(|v| slice(v, axis, index)).collect::<Result<Vec<_>>>()?;
    let (w, h) = (slices[0].0, slices[0].1);
    let all = slices.iter().flat_map(|s| s.2.iter().copied());
    let (lo, hi) = all.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let mut pixels = vec![0u8; g * w * g * h];
    for (t, s) in slices.iter().enumerate() {
        let (tr, tc) = (t / g, t % g);
        let tile = window(&s.2, lo, hi);
        for row in 0..h {
            let dst = (tr * h + row) * g * w + tc * w;
            pixels[dst..dst + w].copy_from_slice(&tile[row * w..(row + 1) * w]);
        }
    }
    Ok(GrayImage {
        width: g * w,
        height: g * h,
        pixels,
    })
}

/// Voxels set in more than half of the masks.
pub fn consensus_mask(masks: &[&Mask]) -> Result<Mask> {
    let first = masks.first().ok_or_else(|| Error::Parameter("no masks to combine".into()))?;
    let dims = first.dims();
    let mut votes = vec![0usize; first.data().len()];
    for m in masks {
        if m.dims() != dims {
            return Err(Error::Shape("masks differ in dims".into()));
        }
        for (v, &b) in votes.iter_mut().zip(m.data()) {
            *v += b as usize;
        }
    }
    Mask::new(dims, votes.iter().map(|&v| 2 * v > masks.len()).collect())
}

/// Masked mean of every tile.
pub fn tile_means(volumes: &[Volume], mask: &Mask) -> Result<Vec<f64>> {
    volumes
        .iter()
        .map(|v| v.masked_mean(mask)?.ok_or_else(|| Error::Parameter("striatal mask is empty".into())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    /// Along a grid row: `z[feat_b]` varies.
    Columns,
    /// Down a grid column: `z[feat_a]` varies.
    Rows,
}

fn line(values: &[f64], g: usize, axis: GridAxis, k: usize) -> Vec<f64> {
    (0..g)
        .map(|i| match axis {
            GridAxis::Columns => values[k * g + i],
            GridAxis::Rows => values[i * g + k],
        })
        .collect()
}

/// Axis with the larger mean absolute step between neighbouring tiles.
pub fn dominant_axis(values: &[f64], g: usize) -> GridAxis {
    let step = |axis| {
        (0..g)
            .map(|k| line(values, g, axis, k).windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>())
            .sum::<f64>()
    };
    if step(GridAxis::Rows) >= step(GridAxis::Columns) {
        GridAxis::Rows
    } else {
        GridAxis::Columns
    }
}

/// Fraction of the `g` lines along `axis` that are monotone (either direction).
pub fn monotone_fraction(values: &[f64], g: usize, axis: GridAxis) -> f64 {
    let monotone = (0..g)
        .filter(|&k| {
            let l = line(values, g, axis, k);
            l.windows(2).all(|w| w[1] >= w[0]) || l.windows(2).all(|w| w[1] <= w[0])
        })
        .count();
    monotone as f64 / g as f64
}

/// `row, col, z_a, z_b, striatal_mean`.
pub fn write_tile_means_csv(path: &Path, means: &[f64], g: usize, range: [f64; 2]) -> Result<()> {
    let vals = grid_values(g, range);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["row", "col", "z_a", "z_b", "striatal_mean"]).map_err(|e| Error::csv(path, e))?;
    for (t, m) in means.iter().enumerate() {
        let (r, c) = (t / g, t % g);
        w.write_record([r.to_string(), c.to_string(), vals[r].to_string(), vals[c].to_string(), m.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
