use serde::{Deserialize, Serialize};

use super::{linear_index, voxel_count, Dims, Mask, Volume};
use crate::error::{Error, Result};

const DEGENERATE_EPS: f64 = 1e-9;

/// Subtract the background mean, then divide by the (background-corrected)
/// mean over the reference region. Negative values are not clamped.
pub fn normalize_intensity(v: &Volume, background: &Mask, reference: &Mask) -> Result<Volume> {
    let bg = v
        .masked_mean(background)?
        .ok_or_else(|| Error::Parameter("background mask is empty".into()))?;
    let rf = v
        .masked_mean(reference)?
        .ok_or_else(|| Error::Parameter("reference mask is empty".into()))?;
    let denom = rf - bg;
    if denom.abs() <= DEGENERATE_EPS {
        return Err(Error::DegenerateReference { mean: denom });
    }
    v.map(|x| ((x as f64 - bg) / denom) as f32)
}

/// Sigmoid compression of values above `tau`; the output never exceeds `tau + w`.
pub fn compress_upper_tail(v: &Volume, tau: f32, w: f32) -> Result<Volume> {
    if !(w > 0.0) || !tau.is_finite() || !w.is_finite() {
        return Err(Error::Parameter(format!("compression needs finite tau and w > 0, got tau={tau}, w={w}")));
    }
    let (tau, w) = (tau as f64, w as f64);
    v.map(|x| {
        let x = x as f64;
        if x <= tau {
            x as f32
        } else {
            let logistic = 1.0 / (1.0 + (-(x - tau) / w).exp());
            (tau + 2.0 * w * (logistic - 0.5)) as f32
        }
    })
}

/// Linearly interpolated percentile (`p` in [0, 100]) over all voxels.
pub fn percentile(v: &Volume, p: f64) -> Result<f32> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Parameter(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = v.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok((sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac) as f32)
}

/// Per-axis (source start, destination start, copied length) for a centred crop/pad.
fn centred_ranges(from: Dims, to: Dims) -> [(usize, usize, usize); 3] {
    std::array::from_fn(|a| {
        if to[a] >= from[a] {
            (0, (to[a] - from[a]) / 2, from[a])
        } else {
            ((from[a] - to[a]) / 2, 0, to[a])
        }
    })
}

fn crop_pad_generic<T: Copy>(src: &[T], from: Dims, to: Dims, fill: T) -> Vec<T> {
    let r = centred_ranges(from, to);
    let mut out = vec![fill; voxel_count(to)];
    for z in 0..r[2].2 {
        for y in 0..r[1].2 {
            let s = linear_index(from, r[0].0, y + r[1].0, z + r[2].0);
            let d = linear_index(to, r[0].1, y + r[1].1, z + r[2].1);
            out[d..d + r[0].2].copy_from_slice(&src[s..s + r[0].2]);
        }
    }
    out
}

/// Centred crop and/or zero-pad to `target`.
pub fn crop_pad(v: &Volume, target: Dims) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::Parameter(format!("target dims must be positive, got {target:?}")));
    }
    Volume::new(target, v.spacing(), crop_pad_generic(v.data(), v.dims(), target, 0.0))
}

pub fn crop_pad_mask(m: &Mask, target: Dims) -> Result<Mask> {
    if target.contains(&0) {
        return Err(Error::Parameter(format!("target dims must be positive, got {target:?}")));
    }
    Mask::new(target, crop_pad_generic(m.data(), m.dims(), target, false))
}

/// Block-mean pooling over `factor`^3 blocks. Edge blocks that hang over the
/// border average only the voxels they contain.
pub fn downsample(v: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::Parameter("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(v.clone());
    }
    let (out_dims, sums, counts) = block_sums(v.dims(), factor, |i| v.data()[i] as f64);
    let data = sums.iter().zip(&counts).map(|(s, &c)| (s / c as f64) as f32).collect();
    Volume::new(out_dims, v.spacing().map(|s| s * factor as f32), data)
}

/// A block is selected when at least half of its voxels are.
pub fn downsample_mask(m: &Mask, factor: usize) -> Result<Mask> {
    if factor == 0 {
        return Err(Error::Parameter("downsample factor must be >= 1".into()));
    }
    let (out_dims, sums, counts) = block_sums(m.dims(), factor, |i| m.data()[i] as u8 as f64);
    Mask::new(out_dims, sums.iter().zip(&counts).map(|(s, &c)| 2.0 * s >= c as f64).collect())
}

fn block_sums(dims: Dims, factor: usize, value: impl Fn(usize) -> f64) -> (Dims, Vec<f64>, Vec<usize>) {
    let out_dims = dims.map(|d| d.div_ceil(factor));
    let mut sums = vec![0.0f64; voxel_count(out_dims)];
    let mut counts = vec![0usize; sums.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let o = linear_index(out_dims, x / factor, y / factor, z / factor);
                sums[o] += value(linear_index(dims, x, y, z));
                counts[o] += 1;
            }
        }
    }
    (out_dims, sums, counts)
}

/// Fallback masks for scans that come without region masks.
///
/// Background is the outer border shell (thickness `max(1, n/16)` per axis).
/// Reference is the inferior-posterior block (posterior quarter along y,
/// lower 40% along z) restricted to voxels above the volume median, which
/// keeps it on tissue rather than air.
pub fn heuristic_masks(v: &Volume) -> Result<(Mask, Mask)> {
    let d = v.dims();
    let shell = d.map(|n| (n / 16).max(1));
    let background = Mask::from_fn(d, |x, y, z| {
        let p = [x, y, z];
        (0..3).any(|a| p[a] < shell[a] || p[a] >= d[a].saturating_sub(shell[a]))
    })?;
    let median = percentile(v, 50.0)?;
    let y_max = (d[1] / 4).max(1);
    let z_max = ((d[2] * 2) / 5).max(1);
    let reference =
        Mask::from_fn(d, |x, y, z| y < y_max && z < z_max && v.get(x, y, z) > median)?;
    if reference.count() == 0 {
        return Err(Error::Parameter("heuristic reference region is empty".into()));
    }
    Ok((background, reference))
}

/// Settings for the full preprocessing chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    /// Percentile of the normalised volume used as the compression threshold.
    pub tau_percentile: f64,
    /// Explicit threshold, overriding `tau_percentile`.
    pub tau: Option<f32>,
    /// Explicit sigmoid width; defaults to `tau / 2`.
    pub width: Option<f32>,
    pub target_dims: Option<Dims>,
    pub downsample: usize,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            tau_percentile: 97.5,
            tau: None,
            width: None,
            target_dims: None,
            downsample: 1,
        }
    }
}

/// normalize -> compress -> crop/pad -> downsample.
pub fn preprocess(v: &Volume, background: &Mask, reference: &Mask, p: &PreprocessParams) -> Result<Volume> {
    let norm = normalize_intensity(v, background, reference)?;
    let tau = match p.tau {
        Some(t) => t,
        None => percentile(&norm, p.tau_percentile)?,
    };
    let w = p.width.unwrap_or(tau / 2.0);
    let mut out = compress_upper_tail(&norm, tau, w)?;
    if let Some(t) = p.target_dims {
        out = crop_pad(&out, t)?;
    }
    downsample(&out, p.downsample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(dims: Dims, data: Vec<f32>) -> Volume {
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn normalize_two_step_formula() {
        // voxel 0,1: background = 2; voxel 2,3: reference = 6; voxel 4: striatal 10
        let v = vol([5, 1, 1], vec![2.0, 2.0, 6.0, 6.0, 10.0]);
        let bg = Mask::new([5, 1, 1], vec![true, true, false, false, false]).unwrap();
        let rf = Mask::new([5, 1, 1], vec![false, false, true, true, false]).unwrap();
        let n = normalize_intensity(&v, &bg, &rf).unwrap();
        assert_eq!(n.data()[4], 2.0);
        assert_eq!(n.masked_mean(&rf).unwrap(), Some(1.0));
        assert_eq!(n.masked_mean(&bg).unwrap(), Some(0.0));
    }

    #[test]
    fn normalize_degenerate_reference() {
        let v = vol([4, 1, 1], vec![3.0; 4]);
        let bg = Mask::new([4, 1, 1], vec![true, true, false, false]).unwrap();
        let rf = Mask::new([4, 1, 1], vec![false, false, true, true]).unwrap();
        assert!(matches!(normalize_intensity(&v, &bg, &rf), Err(Error::DegenerateReference { .. })));
    }

    #[test]
    fn compression_values() {
        let v = vol([4, 1, 1], vec![3.0, 5.0, 1.0, 1e30]);
        let c = compress_upper_tail(&v, 3.0, 2.0).unwrap();
        assert_eq!(c.data()[0], 3.0);
        assert!((c.data()[1] - 3.924_234).abs() < 1e-5, "{}", c.data()[1]);
        assert_eq!(c.data()[2], 1.0);
        assert!((c.data()[3] - 5.0).abs() < 1e-6);
        assert!(compress_upper_tail(&v, 3.0, 0.0).is_err());
        assert!(compress_upper_tail(&v, 3.0, -1.0).is_err());
    }

    #[test]
    fn crop_pad_cases() {
        let v = Volume::filled([91, 109, 91], [2.0; 3], 1.0).unwrap();
        let p = crop_pad(&v, [96, 112, 96]).unwrap();
        assert_eq!(p.dims(), [96, 112, 96]);
        assert_eq!(p.data().iter().map(|&x| x as f64).sum::<f64>(), (91 * 109 * 91) as f64);
        // offsets (2, 1, 2): the interior reproduces the original
        assert_eq!(p.get(2, 1, 2), 1.0);
        assert_eq!(p.get(1, 1, 2), 0.0);
        assert_eq!(p.get(92, 109, 92), 1.0);
        assert_eq!(p.get(93, 109, 92), 0.0);

        let r = vol([2, 3, 1], (0..6).map(|i| i as f32).collect());
        assert_eq!(crop_pad(&r, [2, 3, 1]).unwrap(), r);
        let c = crop_pad(&r, [2, 1, 1]).unwrap();
        assert_eq!(c.data(), &[2.0, 3.0]);
    }

    #[test]
    fn downsample_cases() {
        let ones = Volume::filled([4, 4, 4], [1.0; 3], 1.0).unwrap();
        let d = downsample(&ones, 2).unwrap();
        assert_eq!(d.dims(), [2, 2, 2]);
        assert!(d.data().iter().all(|&x| x == 1.0));
        assert_eq!(d.spacing(), [2.0; 3]);
        assert_eq!(downsample(&ones, 1).unwrap(), ones);

        let r = vol([2, 2, 2], (0..8).map(|i| i as f32).collect());
        assert_eq!(downsample(&r, 2).unwrap().data(), &[3.5]);
        assert_eq!(downsample(&vol([3, 1, 1], vec![1.0, 2.0, 6.0]), 2).unwrap().data(), &[1.5, 6.0]);
    }

    #[test]
    fn heuristic_masks_are_nonempty() {
        let v = vol([16, 16, 16], (0..4096).map(|i| (i % 7) as f32).collect());
        let (bg, rf) = heuristic_masks(&v).unwrap();
        assert!(bg.count() > 0 && rf.count() > 0);
        assert!(bg.get(0, 5, 5) && !bg.get(5, 5, 5));
    }

    #[test]
    fn percentile_interpolates() {
        let v = vol([5, 1, 1], vec![4.0, 0.0, 1.0, 3.0, 2.0]);
        assert_eq!(percentile(&v, 50.0).unwrap(), 2.0);
        assert_eq!(percentile(&v, 87.5).unwrap(), 3.5);
        assert_eq!(percentile(&v, 100.0).unwrap(), 4.0);
    }

    proptest! {
        #[test]
        fn normalize_is_affine_invariant(
            data in proptest::collection::vec(-5.0f32..5.0, 8),
            a in 0.1f32..10.0,
            b in -10.0f32..10.0,
        ) {
            let mut data = data;
            data[0] = -3.0; data[1] = -3.5; // background
            data[2] = 4.0; data[3] = 4.5;   // reference
            let v = vol([8, 1, 1], data);
            let bg = Mask::new([8, 1, 1], vec![true, true, false, false, false, false, false, false]).unwrap();
            let rf = Mask::new([8, 1, 1], vec![false, false, true, true, false, false, false, false]).unwrap();
            let n1 = normalize_intensity(&v, &bg, &rf).unwrap();
            let n2 = normalize_intensity(&v.map(|x| a * x + b).unwrap(), &bg, &rf).unwrap();
            for (x, y) in n1.data().iter().zip(n2.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{} vs {}", x, y);
            }
        }

        #[test]
        fn compression_is_monotone_and_identity_below(
            mut xs in proptest::collection::vec(-20.0f32..20.0, 2..40),
            tau in -5.0f32..5.0,
            w in 0.1f32..5.0,
        ) {
            xs.sort_by(f32::total_cmp);
            let n = xs.len();
            let c = compress_upper_tail(&vol([n, 1, 1], xs.clone()), tau, w).unwrap();
            for i in 0..n {
                if xs[i] <= tau { prop_assert_eq!(c.data()[i], xs[i]); }
                prop_assert!(c.data()[i] <= tau + w + 1e-5);
                if i > 0 { prop_assert!(c.data()[i] >= c.data()[i - 1]); }
            }
        }

        #[test]
        fn downsample_preserves_mean_for_divisible_dims(
            data in proptest::collection::vec(-3.0f32..3.0, 64),
        ) {
            let v = vol([4, 4, 4], data);
            let d = downsample(&v, 2).unwrap();
            prop_assert!((d.mean() - v.mean()).abs() < 1e-6);
        }
    }
}
