//! Dense 3D scalar volumes, masks, file I/O and intensity preprocessing.

mod io;
mod preprocess;

pub use io::{load_mask, load_volume, save_mask, save_volume, VolumeFormat, RAW_MAGIC};
pub use preprocess::{
    compress_upper_tail, crop_pad, downsample, downsample_mask, crop_pad_mask, heuristic_masks,
    normalize_intensity, percentile, preprocess, PreprocessParams,
};

use crate::error::{Error, Result};

/// Voxel grid extent along x, y, z.
pub type Dims = [usize; 3];

/// A dense 3D grid of `f32` samples stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        let n = voxel_count(dims);
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite voxel at index {i}")));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: [f32; 3]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            dims,
            spacing,
            data: vec![0.0; voxel_count(dims)],
        })
    }

    pub fn filled(dims: Dims, spacing: [f32; 3], value: f32) -> Result<Self> {
        let mut v = Self::zeros(dims, spacing)?;
        v.data.fill(value);
        Ok(v)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Voxelwise map; fails if the map produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Volume::new(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Mean over the voxels selected by `mask`, or `None` if the mask is empty.
    pub fn masked_mean(&self, mask: &Mask) -> Result<Option<f64>> {
        mask.check_matches(self.dims)?;
        let (sum, count) = self
            .data
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m)
            .fold((0.0f64, 0usize), |(s, c), (&v, _)| (s + v as f64, c + 1));
        Ok((count > 0).then(|| sum / count as f64))
    }
}

/// A boolean voxel selection sharing a volume's grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "mask {dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![false; voxel_count(dims)])
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> bool) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        other.check_matches(self.dims)?;
        Mask::new(
            self.dims,
            self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        )
    }

    /// Centroid in voxel coordinates, `None` for an empty mask.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    if self.get(x, y, z) {
                        acc[0] += x as f64;
                        acc[1] += y as f64;
                        acc[2] += z as f64;
                        n += 1;
                    }
                }
            }
        }
        (n > 0).then(|| acc.map(|a| a / n as f64))
    }

    pub(crate) fn check_matches(&self, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Shape(format!(
                "mask dims {:?} differ from volume dims {dims:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Parameter(format!("volume dims must be positive, got {dims:?}")));
    }
    Ok(())
}
