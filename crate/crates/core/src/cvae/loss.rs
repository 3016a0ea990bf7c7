use super::LatentCode;
use crate::error::{Error, Result};
use crate::nn::{Real, Tape, Var};

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(code: &LatentCode, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != code.dim() {
        return Err(Error::Shape(format!("{} noise draws for D = {}", eps.len(), code.dim())));
    }
    Ok(code
        .mu
        .iter()
        .zip(&code.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect())
}

/// Summed squared error over every voxel of every item.
pub fn loss_recon(x: &[Vec<f64>], xhat: &[Vec<f64>]) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::Shape(format!("batch sizes {} and {}", x.len(), xhat.len())));
    }
    let mut total = 0.0;
    for (a, b) in x.iter().zip(xhat) {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("item lengths {} and {}", a.len(), b.len())));
        }
        total += a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(total)
}

/// KL divergence to a standard normal, summed over latent dims and items.
pub fn loss_kld(codes: &[LatentCode]) -> f64 {
    codes
        .iter()
        .map(|c| {
            -0.5 * c
                .mu
                .iter()
                .zip(&c.logvar)
                .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
                .sum::<f64>()
        })
        .sum()
}

pub fn loss_total(recon: f64, kld: f64, beta: f64) -> f64 {
    recon + beta * kld
}

/// Tape version of [`loss_recon`].
pub fn tape_recon<T: Real>(tape: &mut Tape<T>, x: Var, xhat: Var) -> Result<Var> {
    let d = tape.sub(x, xhat)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Tape version of [`loss_kld`] on `[N, D]` heads.
pub fn tape_kld<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let a = tape.add_scalar(logvar, T::one());
    let b = tape.sub(a, mu2)?;
    let c = tape.sub(b, var)?;
    let s = tape.sum(c);
    Ok(tape.scale(s, T::of(-0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use proptest::prelude::*;

    fn code(mu: &[f64], lv: &[f64]) -> LatentCode {
        LatentCode::new(mu.to_vec(), lv.to_vec()).unwrap()
    }

    #[test]
    fn reparameterize_examples() {
        let c = code(&[1.0, -2.0], &[0.3, 0.1]);
        assert_eq!(reparameterize(&c, &[0.0, 0.0]).unwrap(), c.mu);
        assert_eq!(reparameterize(&code(&[0.0], &[0.0]), &[0.7]).unwrap(), vec![0.7]);
        let z = reparameterize(&code(&[1.0], &[4f64.ln()]), &[0.5]).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-12);
        assert!(matches!(reparameterize(&c, &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn recon_examples() {
        let x = vec![vec![1.0, 2.0]];
        assert_eq!(loss_recon(&x, &x).unwrap(), 0.0);
        assert_eq!(loss_recon(&x, &[vec![0.0, 0.0]]).unwrap(), 5.0);
        let xx = vec![x[0].clone(), x[0].clone()];
        let zz = vec![vec![0.0, 0.0]; 2];
        assert_eq!(loss_recon(&xx, &zz).unwrap(), 10.0);
        assert!(matches!(loss_recon(&x, &[vec![0.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn kld_examples() {
        assert_eq!(loss_kld(&[code(&[0.0], &[0.0])]), 0.0);
        assert!((loss_kld(&[code(&[1.0], &[0.0])]) - 0.5).abs() < 1e-9);
        let v = loss_kld(&[code(&[0.0], &[4f64.ln()])]);
        assert!((v - (3.0 - 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((v - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn total_examples() {
        assert_eq!(loss_total(5.0, 0.5, 1.0), 5.5);
        assert_eq!(loss_total(5.0, 0.5, 0.0), 5.0);
        assert_eq!(loss_total(5.0, 0.0, 4.0), 5.0);
    }

    #[test]
    fn tape_losses_match_plain() {
        let mu = [0.3, -1.0, 0.0, 2.0];
        let lv = [0.1, 0.0, -0.5, 1.2];
        let mut t = Tape::<f64>::new();
        let m = t.input(Tensor::from_f64(&[2, 2], &mu).unwrap());
        let l = t.input(Tensor::from_f64(&[2, 2], &lv).unwrap());
        let k = tape_kld(&mut t, m, l).unwrap();
        let want = loss_kld(&[code(&mu[..2], &lv[..2]), code(&mu[2..], &lv[2..])]);
        assert!((t.value(k).data()[0] - want).abs() < 1e-12);
        let r = tape_recon(&mut t, m, l).unwrap();
        let want = loss_recon(&[mu.to_vec()], &[lv.to_vec()]).unwrap();
        assert!((t.value(r).data()[0] - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kld_nonnegative(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..16)) {
            let (mu, lv): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(loss_kld(&[code(&mu, &lv)]) >= -1e-9);
        }

        #[test]
        fn recon_is_permutation_invariant(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            let x = vec![a[..3].to_vec(), a[3..].to_vec()];
            let y = vec![b[..3].to_vec(), b[3..].to_vec()];
            let xr: Vec<_> = x.iter().rev().cloned().collect();
            let yr: Vec<_> = y.iter().rev().cloned().collect();
            prop_assert!((loss_recon(&x, &y).unwrap() - loss_recon(&xr, &yr).unwrap()).abs() < 1e-9);
        }
    }
}
