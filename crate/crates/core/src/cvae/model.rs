use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CvaeConfig, LatentCode};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, CheckpointManifest, ParamEntry};
use crate::nn::{LayerSpec, Real, Tape, Tensor, Var};
use crate::volume::Volume;

const ENC_CONVS: std::ops::Range<usize> = 0..4;
const ENC_HIDDEN: usize = 4;
const MU_HEAD: usize = 5;
const LOGVAR_HEAD: usize = 6;
const DEC_LINEAR: usize = 7;
const DEC_CONVS: std::ops::Range<usize> = 8..12;

/// Layer stack and feature-map shapes derived from a [`CvaeConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    /// Spatial `[d, h, w]` of the input and after each encoder conv.
    pub feature_dims: [[usize; 3]; 5],
    /// Length of the flattened last encoder feature map.
    pub flatten: usize,
}

impl Architecture {
    pub fn new(config: &CvaeConfig) -> Result<Self> {
        config.validate()?;
        let [nx, ny, nz] = config.input_dims;
        let mut feature_dims = [[nz, ny, nx]; 5];
        let mut layers = Vec::with_capacity(12);
        let mut cin = 1;
        for (i, &cout) in config.channels.iter().enumerate() {
            let spec = LayerSpec::conv3d(cin, cout, 3, 2, 1);
            for a in 0..3 {
                feature_dims[i + 1][a] = spec.output_size(feature_dims[i][a], a)?;
            }
            layers.push(spec);
            cin = cout;
        }
        let c4 = config.channels[3];
        let flatten = c4 * feature_dims[4].iter().product::<usize>();
        let d = config.latent_dim;
        layers.push(LayerSpec::linear(flatten, config.hidden));
        layers.push(LayerSpec::linear(config.hidden, d));
        layers.push(LayerSpec::linear(config.hidden, d));
        layers.push(LayerSpec::linear(d, flatten));
        // mirror the encoder; per-axis output padding recovers odd extents
        for stage in (0..4).rev() {
            let (from, to) = (feature_dims[stage + 1], feature_dims[stage]);
            let mut op = [0; 3];
            for a in 0..3 {
                let base = (from[a] - 1) * 2 + 3 - 2;
                op[a] = to[a]
                    .checked_sub(base)
                    .filter(|&p| p < 2)
                    .ok_or_else(|| Error::Shape(format!("cannot mirror extent {} -> {}", from[a], to[a])))?;
            }
            let cin = config.channels[stage];
            let cout = if stage == 0 { 1 } else { config.channels[stage - 1] };
            layers.push(LayerSpec::conv_transpose3d(cin, cout, 3, 2, 1, op));
        }
        Ok(Self {
            layers,
            feature_dims,
            flatten,
        })
    }

    /// `(layer index, role, shape)` for every parameter, in storage order.
    pub fn param_layout(&self) -> Vec<(usize, &'static str, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(i, "weight", l.weight_shape()), (i, "bias", vec![l.out_channels])])
            .collect()
    }
}

/// A 3D convolutional VAE with parameters of element type `T`.
#[derive(Debug, Clone)]
pub struct Cvae<T> {
    config: CvaeConfig,
    arch: Architecture,
    params: Vec<Tensor<T>>,
}

/// Parameter handles of one forward pass.
pub(crate) struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn w(&self, layer: usize) -> Var {
        self.vars[2 * layer]
    }

    fn b(&self, layer: usize) -> Var {
        self.vars[2 * layer + 1]
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> Cvae<T> {
    /// Fresh model; layer `i` is initialised from `seed + i` with
    /// `U(-sqrt(1/fan_in), sqrt(1/fan_in))` for weights and biases.
    pub fn new(config: &CvaeConfig) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let mut params = Vec::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
            let bound = (1.0 / layer.fan_in() as f64).sqrt();
            for shape in [layer.weight_shape(), vec![layer.out_channels]] {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
                params.push(Tensor::new(shape, data)?);
            }
        }
        Ok(Self {
            config: config.clone(),
            arch,
            params,
        })
    }

    pub fn from_params(config: &CvaeConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let layout = arch.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Shape(format!("expected {} parameter tensors, got {}", layout.len(), params.len())));
        }
        for ((_, _, shape), p) in layout.iter().zip(&params) {
            p.expect_shape(shape)?;
        }
        Ok(Self {
            config: config.clone(),
            arch,
            params,
        })
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Zero the weights and biases of the two posterior heads.
    pub fn zero_heads(&mut self) {
        for layer in [MU_HEAD, LOGVAR_HEAD] {
            for p in &mut self.params[2 * layer..2 * layer + 2] {
                p.data_mut().fill(T::zero());
            }
        }
    }

    /// Zero every decoder parameter.
    pub fn zero_decoder(&mut self) {
        for p in &mut self.params[2 * DEC_LINEAR..] {
            p.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> Cvae<U> {
        Cvae {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Put parameters on `tape`, as differentiable leaves or as constants.
    pub(crate) fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.input(p.clone()) })
            .collect();
        Bound { vars }
    }

    /// Stack volumes into a `[N, 1, nz, ny, nx]` tensor.
    pub fn batch_tensor(&self, volumes: &[&Volume]) -> Result<Tensor<T>> {
        if volumes.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let dims = self.config.input_dims;
        let mut data = Vec::with_capacity(volumes.len() * volumes[0].len());
        for v in volumes {
            if v.dims() != dims {
                return Err(Error::Shape(format!("volume dims {:?} differ from model input {dims:?}", v.dims())));
            }
            data.extend(v.data().iter().map(|&x| T::of(x as f64)));
        }
        Tensor::new(vec![volumes.len(), 1, dims[2], dims[1], dims[0]], data)
    }

    /// Encoder on the tape; returns `(mu, logvar)`, each `[N, D]`.
    pub(crate) fn encode_on(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for i in ENC_CONVS {
            h = tape.conv(h, &self.arch.layers[i], p.w(i), p.b(i))?;
            h = tape.relu(h);
        }
        let n = tape.value(h).shape()[0];
        h = tape.reshape(h, &[n, self.arch.flatten])?;
        h = tape.linear(h, p.w(ENC_HIDDEN), p.b(ENC_HIDDEN))?;
        h = tape.relu(h);
        let mu = tape.linear(h, p.w(MU_HEAD), p.b(MU_HEAD))?;
        let logvar = tape.linear(h, p.w(LOGVAR_HEAD), p.b(LOGVAR_HEAD))?;
        Ok((mu, logvar))
    }

    /// Decoder on the tape; `z` is `[N, D]`, the output `[N, 1, nz, ny, nx]`.
    pub(crate) fn decode_on(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let zs = tape.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent batch {zs:?} does not match D = {}",
                self.config.latent_dim
            )));
        }
        let mut h = tape.linear(z, p.w(DEC_LINEAR), p.b(DEC_LINEAR))?;
        h = tape.relu(h);
        let [d, hh, w] = self.arch.feature_dims[4];
        h = tape.reshape(h, &[zs[0], self.config.channels[3], d, hh, w])?;
        for i in DEC_CONVS {
            h = tape.conv(h, &self.arch.layers[i], p.w(i), p.b(i))?;
            if i + 1 < DEC_CONVS.end {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Posterior parameters for each volume.
    pub fn encode(&self, volumes: &[&Volume]) -> Result<Vec<LatentCode>> {
        let x = self.batch_tensor(volumes)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.input(x);
        let (mu, logvar) = self.encode_on(&mut tape, &p, xv)?;
        let d = self.config.latent_dim;
        let (mu, logvar) = (tape.value(mu).data(), tape.value(logvar).data());
        (0..volumes.len())
            .map(|i| {
                LatentCode::new(
                    mu[i * d..(i + 1) * d].iter().map(|v| v.f64()).collect(),
                    logvar[i * d..(i + 1) * d].iter().map(|v| v.f64()).collect(),
                )
            })
            .collect()
    }

    /// Encode in chunks of `batch` volumes to bound memory.
    pub fn encode_all(&self, volumes: &[&Volume], batch: usize) -> Result<Vec<LatentCode>> {
        let mut out = Vec::with_capacity(volumes.len());
        for chunk in volumes.chunks(batch.max(1)) {
            out.extend(self.encode(chunk)?);
        }
        Ok(out)
    }

    /// Decode a batch of latent vectors into volumes with the model's spacing-free grid.
    pub fn decode_batch(&self, zs: &[Vec<f64>], spacing: [f32; 3]) -> Result<Vec<Volume>> {
        let d = self.config.latent_dim;
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = zs.iter().find(|z| z.len() != d) {
            return Err(Error::Shape(format!("latent vector of length {} for D = {d}", bad.len())));
        }
        let flat: Vec<f64> = zs.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let z = tape.input(Tensor::from_f64(&[zs.len(), d], &flat)?);
        let out = self.decode_on(&mut tape, &p, z)?;
        let vox = self.config.input_dims.iter().product::<usize>();
        tape.value(out)
            .data()
            .chunks(vox)
            .map(|c| Volume::new(self.config.input_dims, spacing, c.iter().map(|v| v.f64() as f32).collect()))
            .collect()
    }

    pub fn decode(&self, z: &[f64], spacing: [f32; 3]) -> Result<Volume> {
        Ok(self.decode_batch(&[z.to_vec()], spacing)?.remove(0))
    }
}

impl Cvae<f32> {
    pub fn save(&self, dir: &Path, epoch: usize) -> Result<()> {
        let layout = self.arch.param_layout();
        let manifest = CheckpointManifest {
            format: "striavae-cvae/1".into(),
            layers: self.arch.layers.clone(),
            params: layout
                .into_iter()
                .map(|(layer, role, shape)| ParamEntry {
                    layer,
                    role: role.into(),
                    shape,
                    file: checkpoint::blob_name(layer, role),
                })
                .collect(),
            seed: self.config.seed,
            epoch,
            model: serde_json::to_value(&self.config).expect("config serializes"),
        };
        checkpoint::save_checkpoint(dir, &manifest, &self.params)
    }

    /// Returns the model and the epoch it was saved at.
    pub fn load(dir: &Path) -> Result<(Self, usize)> {
        let (manifest, params) = checkpoint::load_checkpoint(dir)?;
        let config: CvaeConfig = serde_json::from_value(manifest.model)
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let model = Self::from_params(&config, params)?;
        if model.arch.layers != manifest.layers {
            return Err(Error::Corrupt("checkpoint layer specs differ from the rebuilt architecture".into()));
        }
        Ok((model, manifest.epoch))
    }
}
