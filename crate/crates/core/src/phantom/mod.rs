//! Synthetic striatal phantoms with known generative factors.
//!
//! Each hemisphere holds a caudate-like anterior ellipsoid and a putamen-like
//! posterior ellipsoid inside a unit-uptake brain ellipsoid on a zero
//! background. Both ellipsoids are stamped from one partial-volume template
//! shifted by a whole number of voxels, and the left body is the voxel mirror
//! of the right one, so the masks of fully covered voxels are balanced exactly.

mod cohort;

pub use cohort::{
    generate_cohort, read_manifest, subject_id, write_cohort, CohortParams, FactorRanges, ManifestRow, ScoreCoefficients,
    ScoreModel, Scores, SyntheticSubject, Target, MANIFEST_FILE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, Dims, Mask, Volume};

/// Fixed shape constants, in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    /// Brain semi-axes as fractions of the field of view.
    pub brain_fraction: [f64; 3],
    /// Semi-axes of each striatal ellipsoid.
    pub semi_axes: [f64; 3],
    /// Anterior ellipsoid centre in y and z; x follows from the separation.
    pub anchor_yz: [f64; 2],
    /// Posterior ellipsoid centre relative to the anterior one (x lateral).
    pub posterior_offset: [f64; 3],
    /// Reference region: brain voxels with y below this fraction of the
    /// brain's negative y semi-axis and z at or below the centre.
    pub reference_y_fraction: f64,
    /// Subsamples per axis for partial-volume occupancy.
    pub supersample: usize,
    /// Width of the smooth tissue-to-background ramp at the brain surface;
    /// 0 gives a hard edge.
    pub brain_edge: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            brain_fraction: [0.42, 0.42, 0.40],
            semi_axes: [8.0, 10.0, 10.0],
            anchor_yz: [10.0, 4.0],
            posterior_offset: [8.0, -24.0, 0.0],
            reference_y_fraction: 0.5,
            supersample: 6,
            brain_edge: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    /// Mean striatal uptake as a multiple of the reference uptake.
    pub amplitude: f64,
    /// Distance between left and right striatal centroids (mm).
    pub separation: f64,
    /// Anterior to posterior uptake ratio.
    pub ap_ratio: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub dims: Dims,
    pub spacing: [f32; 3],
    #[serde(default)]
    pub geometry: Geometry,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            amplitude: 2.5,
            separation: 36.0,
            ap_ratio: 1.0,
            noise_sigma: 0.05,
            seed: 0,
            dims: [32, 40, 32],
            spacing: [4.0; 3],
            geometry: Geometry::default(),
        }
    }
}

impl PhantomParams {
    /// Desk-scale defaults: `(32, 40, 32)` at 4 mm.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-scale defaults: `(91, 109, 91)` at 2 mm.
    pub fn full() -> Self {
        Self {
            dims: [91, 109, 91],
            spacing: [2.0; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |c: bool, m: &str| if c { Ok(()) } else { Err(Error::Parameter(m.into())) };
        ok(self.amplitude.is_finite() && self.amplitude >= 0.0, "amplitude must be >= 0")?;
        ok(self.separation.is_finite() && self.separation > 0.0, "separation must be > 0")?;
        ok(self.ap_ratio.is_finite() && self.ap_ratio > 0.0, "ap_ratio must be > 0")?;
        ok(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0, "noise_sigma must be >= 0")?;
        ok(self.dims.iter().all(|&n| n > 0), "dims must be positive")?;
        ok(self.spacing.iter().all(|&s| s.is_finite() && s > 0.0), "spacing must be positive")?;
        ok(self.geometry.supersample > 0, "supersample must be positive")?;
        ok(
            self.geometry.brain_edge.is_finite() && self.geometry.brain_edge >= 0.0,
            "brain_edge must be >= 0",
        )
    }

    /// Uptake of the anterior and posterior ellipsoids.
    pub fn uptakes(&self) -> (f64, f64) {
        let half = (self.ap_ratio + 1.0) / 2.0;
        (self.amplitude * self.ap_ratio / half, self.amplitude / half)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomMasks {
    /// Voxels outside the brain.
    pub background: Mask,
    pub reference: Mask,
    /// Voxels fully inside a striatal ellipsoid.
    pub striatal: Mask,
    pub anterior: Mask,
    pub posterior: Mask,
    /// The mirrored body, at low x indices.
    pub left: Mask,
    pub right: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub masks: PhantomMasks,
}

/// Sparse partial-volume occupancy of an ellipsoid.
fn ellipsoid_template(dims: Dims, spacing: [f64; 3], centre: [f64; 3], semi: [f64; 3], ss: usize) -> Result<Vec<([usize; 3], f64)>> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let mid = (dims[a] as f64 - 1.0) / 2.0;
        let first = ((centre[a] - semi[a]) / spacing[a] + mid - 0.5).floor();
        let last = ((centre[a] + semi[a]) / spacing[a] + mid + 0.5).ceil();
        if first < 0.0 || last > dims[a] as f64 - 1.0 {
            return Err(Error::Geometry(format!(
                "striatal ellipsoid at {centre:?} mm leaves the volume along axis {a}"
            )));
        }
        lo[a] = first as usize;
        hi[a] = last as usize;
    }
    let sub: Vec<f64> = (0..ss).map(|k| (k as f64 + 0.5) / ss as f64 - 0.5).collect();
    let total = (ss * ss * ss) as f64;
    let mut out = Vec::new();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let idx = [x, y, z];
                let mut inside = 0usize;
                for &dz in &sub {
                    for &dy in &sub {
                        for &dx in &sub {
                            let d = [dx, dy, dz];
                            let r: f64 = (0..3)
                                .map(|a| {
                                    let mm = (idx[a] as f64 - (dims[a] as f64 - 1.0) / 2.0 + d[a]) * spacing[a];
                                    ((mm - centre[a]) / semi[a]).powi(2)
                                })
                                .sum();
                            inside += (r <= 1.0) as usize;
                        }
                    }
                }
                if inside > 0 {
                    out.push((idx, inside as f64 / total));
                }
            }
        }
    }
    Ok(out)
}

/// Tissue level at normalised brain radius `rho`: 1 inside, 0 outside, a
/// smoothstep ramp of half-width `h` around the surface.
fn brain_tissue(rho: f64, h: f64) -> f64 {
    if h <= 0.0 {
        return if rho <= 1.0 { 1.0 } else { 0.0 };
    }
    let t = ((1.0 + h - rho) / (2.0 * h)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic phantom volume and masks for `p`.
pub fn generate_phantom(p: &PhantomParams) -> Result<Phantom> {
    p.validate()?;
    let g = &p.geometry;
    let dims = p.dims;
    let sp = p.spacing.map(|s| s as f64);
    let n = voxel_count(dims);
    let mm = |i: usize, a: usize| (i as f64 - (dims[a] as f64 - 1.0) / 2.0) * sp[a];

    let shift: [i64; 3] = std::array::from_fn(|a| (g.posterior_offset[a] / sp[a]).round() as i64);
    // body centroid sits at separation / 2
    let ax = p.separation / 2.0 - shift[0] as f64 * sp[0] / 2.0;
    let template = ellipsoid_template(dims, sp, [ax, g.anchor_yz[0], g.anchor_yz[1]], g.semi_axes, g.supersample)?;

    // occupancy per voxel: anterior, posterior
    let mut occ = vec![[0.0f64; 2]; n];
    let mut body = vec![None::<bool>; n]; // Some(true) = right
    let mut place = |idx: [i64; 3], part: usize, o: f64, right: bool| -> Result<()> {
        if (0..3).any(|a| idx[a] < 0 || idx[a] >= dims[a] as i64) {
            return Err(Error::Geometry("posterior striatal ellipsoid leaves the volume".into()));
        }
        let i = linear_index(dims, idx[0] as usize, idx[1] as usize, idx[2] as usize);
        if body[i].is_some_and(|b| b != right) || occ[i][part] > 0.0 || occ[i][0] + occ[i][1] + o > 1.0 + 1e-12 {
            return Err(Error::Geometry(format!(
                "striatal ellipsoids overlap at separation {} mm",
                p.separation
            )));
        }
        occ[i][part] = o;
        body[i] = Some(right);
        Ok(())
    };
    for &(idx, o) in &template {
        let base = idx.map(|v| v as i64);
        let post: [i64; 3] = std::array::from_fn(|a| base[a] + shift[a]);
        for (part, at) in [(0, base), (1, post)] {
            place(at, part, o, true)?;
            let mirrored = [dims[0] as i64 - 1 - at[0], at[1], at[2]];
            place(mirrored, part, o, false)?;
        }
    }

    let semi_brain: [f64; 3] = std::array::from_fn(|a| g.brain_fraction[a] * dims[a] as f64 * sp[a]);
    // ramp half-width in units of the normalised brain radius
    let edge = g.brain_edge / (2.0 * semi_brain.iter().product::<f64>().cbrt());
    let (ant, post) = p.uptakes();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut data = vec![0f32; n];
    let mut bg = vec![false; n];
    let mut reference = vec![false; n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = linear_index(dims, x, y, z);
                let pos = [mm(x, 0), mm(y, 1), mm(z, 2)];
                let rho = (0..3).map(|a| (pos[a] / semi_brain[a]).powi(2)).sum::<f64>().sqrt();
                let tissue = brain_tissue(rho, edge);
                let in_brain = tissue >= 1.0;
                let [oa, op] = occ[i];
                let mut v = oa * ant + op * post + (1.0 - oa - op) * tissue;
                if p.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data[i] = v as f32;
                bg[i] = tissue == 0.0 && oa + op == 0.0;
                reference[i] = in_brain
                    && oa + op == 0.0
                    && pos[1] < -g.reference_y_fraction * semi_brain[1]
                    && pos[2] <= 0.0;
            }
        }
    }
    let full = |part: Option<usize>, side: Option<bool>| {
        let data = (0..n)
            .map(|i| {
                let o = match part {
                    Some(k) => occ[i][k],
                    None => occ[i][0] + occ[i][1],
                };
                o >= 1.0 && side.is_none_or(|s| body[i] == Some(s))
            })
            .collect();
        Mask::new(dims, data)
    };
    let masks = PhantomMasks {
        background: Mask::new(dims, bg)?,
        reference: Mask::new(dims, reference)?,
        striatal: full(None, None)?,
        anterior: full(Some(0), None)?,
        posterior: full(Some(1), None)?,
        left: full(None, Some(false))?,
        right: full(None, Some(true))?,
    };
    if masks.striatal.count() == 0 || masks.reference.count() == 0 {
        return Err(Error::Geometry("phantom grid too coarse for its striatal or reference region".into()));
    }
    Ok(Phantom {
        volume: Volume::new(dims, p.spacing, data)?,
        masks,
    })
}
