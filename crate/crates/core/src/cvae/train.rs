use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{tape_kld, tape_recon};
use super::model::Bound;
use super::{Cvae, CvaeConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Real, Tape, Tensor, Var};
use crate::volume::Volume;

/// Per-item mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub recon: f64,
    pub kld: f64,
    pub total: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLoss>,
}

impl TrainLog {
    pub fn first(&self) -> Option<&EpochLoss> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochLoss> {
        self.epochs.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for e in &self.epochs {
            w.serialize(e).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Graph of one minibatch loss.
pub(crate) struct Forward {
    pub bound: Bound,
    pub recon: Var,
    pub kld: Var,
    pub total: Var,
}

/// Build `recon + beta * kld` for batch `x` with noise `eps` (`[N, D]`).
pub(crate) fn forward_loss<T: Real>(
    model: &Cvae<T>,
    tape: &mut Tape<T>,
    x: Tensor<T>,
    eps: Tensor<T>,
) -> Result<Forward> {
    let bound = model.bind(tape, true);
    let xv = tape.input(x);
    let (mu, logvar) = model.encode_on(tape, &bound, xv)?;
    let half = tape.scale(logvar, T::of(0.5));
    let sigma = tape.exp(half);
    let e = tape.input(eps);
    let noise = tape.mul(sigma, e)?;
    let z = tape.add(mu, noise)?;
    let xhat = model.decode_on(tape, &bound, z)?;
    let recon = tape_recon(tape, xv, xhat)?;
    let kld = tape_kld(tape, mu, logvar)?;
    let weighted = tape.scale(kld, T::of(model.config().beta));
    let total = tape.add(recon, weighted)?;
    Ok(Forward {
        bound,
        recon,
        kld,
        total,
    })
}

/// Losses of one minibatch, summed over its items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub recon: f64,
    pub kld: f64,
    pub total: f64,
}

/// Loss of batch `x` (`[N, 1, nz, ny, nx]`) under noise `eps` (`[N, D]`) and
/// its gradient with respect to every parameter, in parameter order.
pub fn loss_gradients<T: Real>(model: &Cvae<T>, x: &Tensor<T>, eps: &Tensor<T>) -> Result<(BatchLoss, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let f = forward_loss(model, &mut tape, x.clone(), eps.clone())?;
    let loss = BatchLoss {
        recon: tape.value(f.recon).sum(),
        kld: tape.value(f.kld).sum(),
        total: tape.value(f.total).sum(),
    };
    let mut g = tape.backward(f.total)?;
    let grads = f.bound.vars().iter().map(|&v| g.take(v).expect("parameter gradient")).collect();
    Ok((loss, grads))
}

/// Train a fresh model; see [`train_with`].
pub fn train(config: &CvaeConfig, dataset: &[Volume], checkpoint: Option<&Path>) -> Result<(Cvae<f32>, TrainLog)> {
    train_with(config, dataset, checkpoint, |_| {})
}

/// Adam on shuffled minibatches, one noise draw per item and pass.
/// `on_epoch` sees each epoch's log entry as it completes.
pub fn train_with(
    config: &CvaeConfig,
    dataset: &[Volume],
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<(Cvae<f32>, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut model = Cvae::<f32>::new(config)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let d = config.latent_dim;
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut recon_sum, mut kld_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let vols: Vec<&Volume> = idx.iter().map(|&i| &dataset[i]).collect();
            let x = model.batch_tensor(&vols)?;
            let eps: Vec<f32> = (0..idx.len() * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps = Tensor::new(vec![idx.len(), d], eps)?;
            let mut tape = Tape::new();
            let f = forward_loss(&model, &mut tape, x, eps)?;
            let recon = tape.value(f.recon).sum();
            let kld = tape.value(f.kld).sum();
            let total = tape.value(f.total).sum();
            if !(recon.is_finite() && kld.is_finite() && total.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    recon,
                    kld,
                });
            }
            let mut grads = tape.backward(f.total)?;
            let grads: Vec<Tensor<f32>> = f
                .bound
                .vars()
                .iter()
                .map(|&v| grads.take(v).expect("parameter gradient"))
                .collect();
            drop(tape);
            adam.step(model.params_mut(), &grads)?;
            recon_sum += recon;
            kld_sum += kld;
            total_sum += total;
        }
        let n = dataset.len() as f64;
        let entry = EpochLoss {
            epoch,
            recon: recon_sum / n,
            kld: kld_sum / n,
            total: total_sum / n,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    if let Some(dir) = checkpoint {
        model.save(dir, config.epochs)?;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn tiny(dims: Dims, d: usize) -> CvaeConfig {
        CvaeConfig {
            latent_dim: d,
            input_dims: dims,
            channels: [2, 2, 3, 3],
            hidden: 4,
            epochs: 3,
            batch_size: 2,
            seed: 11,
            ..CvaeConfig::default()
        }
    }

    fn data(dims: Dims, n: usize) -> Vec<Volume> {
        let len: usize = dims.iter().product();
        (0..n)
            .map(|k| {
                let v = (0..len).map(|i| (((i * (k + 3)) % 17) as f32) / 17.0).collect();
                Volume::new(dims, [1.0; 3], v).unwrap()
            })
            .collect()
    }

    #[test]
    fn epochs_zero_is_config_error() {
        let c = CvaeConfig { epochs: 0, ..tiny([16; 3], 2) };
        assert!(matches!(train(&c, &data([16; 3], 2), None), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let c = tiny([16; 3], 2);
        let ds = data([16; 3], 5);
        let (m1, l1) = train(&c, &ds, None).unwrap();
        let (m2, l2) = train(&c, &ds, None).unwrap();
        assert_eq!(l1.epochs.len(), 3);
        for (a, b) in l1.epochs.iter().zip(&l2.epochs) {
            assert!((a.total - b.total).abs() < 1e-6);
            assert!((a.total - (a.recon + c.beta * a.kld)).abs() < 1e-6 * a.total.abs().max(1.0));
        }
        assert_eq!(m1.params(), m2.params());
    }

    #[test]
    fn mismatched_volume_is_shape_error() {
        let c = tiny([16; 3], 2);
        let mut ds = data([16; 3], 2);
        ds.push(Volume::zeros([16, 16, 8], [1.0; 3]).unwrap());
        assert!(matches!(train(&c, &ds, None), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_loss_reports_position() {
        let c = tiny([16; 3], 2);
        let mut ds = data([16; 3], 2);
        let mut v = ds[0].data().to_vec();
        v[0] = 1e30;
        ds[0] = Volume::new([16; 3], [1.0; 3], v).unwrap();
        ds[1] = ds[0].clone();
        match train(&c, &ds, None) {
            Err(Error::NonFiniteLoss { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let log = TrainLog {
            epochs: vec![EpochLoss { epoch: 1, recon: 2.0, kld: 0.5, total: 2.5, wall_ms: 3 }],
        };
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("epoch,recon,kld,total,wall_ms\n1,2.0,0.5,2.5,3"));
    }

    fn loss_and_grads<T: Real>(model: &Cvae<T>, x: &Tensor<f64>, eps: &Tensor<f64>) -> (f64, Vec<Vec<f64>>) {
        let (loss, g) = loss_gradients(model, &x.cast(), &eps.cast()).unwrap();
        (loss.total, g.iter().map(|t| t.data().iter().map(|v| v.f64()).collect()).collect())
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
    }

    /// `samples = None` checks every entry, otherwise about that many per tensor.
    fn check(config: &CvaeConfig, n: usize, samples: Option<usize>, x_scale: f64, max_kinked: f64) {
        let model = Cvae::<f64>::new(config).unwrap();
        let [nx, ny, nz] = config.input_dims;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let xs: Vec<f64> = (0..n * nx * ny * nz)
            .map(|_| { let v: f64 = StandardNormal.sample(&mut rng); x_scale * v })
            .collect();
        let h = 1e-3;
        let es: Vec<f64> = (0..n * config.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::from_f64(&[n, 1, nz, ny, nx], &xs).unwrap();
        let eps = Tensor::from_f64(&[n, config.latent_dim], &es).unwrap();
        let (_, g64) = loss_and_grads(&model, &x, &eps);
        let (_, g32) = loss_and_grads(&model.cast::<f32>(), &x, &eps);
        let (mut worst64, mut worst32, mut checked, mut kinked) = (0f64, 0f64, 0usize, 0usize);
        for p in 0..model.params().len() {
            let numel = model.params()[p].numel();
            let stride = samples.map_or(1, |k| (numel / k).max(1));
            for i in (0..numel).step_by(stride) {
                let probe = |delta: f64| {
                    let mut m = model.clone();
                    m.params_mut()[p].data_mut()[i] += delta;
                    loss_and_grads(&m, &x, &eps).0
                };
                let d1 = (probe(h) - probe(-h)) / (2.0 * h);
                let d2 = (probe(h / 2.0) - probe(-h / 2.0)) / h;
                // a ReLU kink inside the probe window makes the two widths disagree
                if rel_err(d1, d2) > 1e-6 {
                    kinked += 1;
                    continue;
                }
                let numeric = (4.0 * d2 - d1) / 3.0;
                worst64 = worst64.max(rel_err(g64[p][i], numeric));
                worst32 = worst32.max(rel_err(g32[p][i], numeric));
                checked += 1;
            }
        }
        assert!(checked > 0, "no entry was kink free");
        let frac = kinked as f64 / (kinked + checked) as f64;
        assert!(frac < max_kinked, "{kinked} of {} entries straddle a kink", kinked + checked);
        assert!(worst64 < 1e-6, "f64 rel err {worst64}");
        assert!(worst32 < 1e-3, "f32 rel err {worst32}");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let c = CvaeConfig { beta: 1.5, ..tiny([8; 3], 2) };
        check(&c, 2, None, 1.0, 0.05);
    }

    #[test]
    fn full_width_gradients_match_finite_differences_on_sampled_entries() {
        let c = CvaeConfig {
            channels: [32, 64, 128, 256],
            hidden: 512,
            ..tiny([16; 3], 3)
        };
        // small inputs keep the constant part of the loss from swamping the differences
        // wide layers put many ReLU kinks within a probe width of the sampled entries
        check(&c, 1, Some(3), 0.05, 0.5);
    }
}
