//! Batch normalization over axis 1 of `(B, C, ...)` tensors.

use crate::error::{contract, Result};
use crate::tensor::DenseTensor;

pub const BN_EPS: f64 = 1e-5;

/// Per-forward values needed by [`batch_norm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache {
    pub x_hat: DenseTensor,
    pub inv_std: Vec<f64>,
}

/// Batch statistics of one forward pass: biased variance is used for
/// normalization, unbiased variance feeds the running estimate.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

fn layout(x: &DenseTensor, channels: usize) -> Result<(usize, usize)> {
    if x.order() < 2 || x.shape()[1] != channels {
        contract!("batch norm over {channels} channels got input {:?}", x.shape());
    }
    Ok((x.shape()[0], x.len() / (x.shape()[0] * channels)))
}

pub fn batch_norm_train(
    x: &DenseTensor,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(DenseTensor, BnCache, BnBatchStats)> {
    let c = gamma.len();
    let (batch, spatial) = layout(x, c)?;
    let count = (batch * spatial) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..batch {
        for ch in 0..c {
            let s = &d[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
            mean[ch] += s.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..batch {
        for ch in 0..c {
            let s = &d[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
            var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let unbiased_var: Vec<f64> = var
        .iter()
        .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
        .collect();
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let range = (b * c + ch) * spatial..(b * c + ch + 1) * spatial;
            for i in range {
                let xh = (d[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        DenseTensor::from_parts(shape.clone(), y),
        BnCache {
            x_hat: DenseTensor::from_parts(shape, x_hat),
            inv_std,
        },
        BnBatchStats { mean, unbiased_var },
    ))
}

pub fn batch_norm_eval(
    x: &DenseTensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<DenseTensor> {
    let c = gamma.len();
    let (batch, spatial) = layout(x, c)?;
    let mut y = x.clone();
    for b in 0..batch {
        for ch in 0..c {
            let inv = 1.0 / (running_var[ch] + BN_EPS).sqrt();
            for v in &mut y.data_mut()[(b * c + ch) * spatial..(b * c + ch + 1) * spatial] {
                *v = gamma[ch] * (*v - running_mean[ch]) * inv + beta[ch];
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    grad: &DenseTensor,
    cache: &BnCache,
    gamma: &[f64],
) -> Result<(DenseTensor, Vec<f64>, Vec<f64>)> {
    let c = gamma.len();
    let (batch, spatial) = layout(grad, c)?;
    if grad.shape() != cache.x_hat.shape() {
        contract!("gradient {:?} vs cached {:?}", grad.shape(), cache.x_hat.shape());
    }
    let count = (batch * spatial) as f64;
    let (g, xh) = (grad.data(), cache.x_hat.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..batch {
        for ch in 0..c {
            for i in (b * c + ch) * spatial..(b * c + ch + 1) * spatial {
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; grad.len()];
    for b in 0..batch {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / count;
            for i in (b * c + ch) * spatial..(b * c + ch + 1) * spatial {
                dx[i] = k * (count * g[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    Ok((DenseTensor::from_parts(grad.shape().to_vec(), dx), dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardized_input_passes_through() {
        // per channel: values +-1 exactly -> mean 0, biased variance 1
        let x = DenseTensor::from_fn(&[2, 2, 2, 2], |i| if (i[0] + i[2] + i[3]) % 2 == 0 { 1.0 } else { -1.0 });
        let (y, _, _) = batch_norm_train(&x, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = DenseTensor::filled(&[3, 1, 2, 2], 7.0);
        let (y, _, stats) = batch_norm_train(&x, &[2.0], &[0.25]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
        assert_eq!(stats.unbiased_var, vec![0.0]);
    }

    #[test]
    fn eval_uses_running_statistics() {
        let x = DenseTensor::filled(&[1, 1, 1, 2], 3.0);
        let y = batch_norm_eval(&x, &[2.0], &[1.0], &[1.0], &[4.0 - BN_EPS]).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DenseTensor::from_fn(&[3, 2, 2, 3], |_| rng.random_range(-2.0..2.0));
        let gamma = [1.3, -0.7];
        let beta = [0.1, 0.4];
        let probe = DenseTensor::from_fn(x.shape(), |_| rng.random_range(-1.0..1.0));
        let loss = |x: &DenseTensor, g: &[f64], b: &[f64]| -> f64 {
            let (y, _, _) = batch_norm_train(x, g, b).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        let (_, cache, _) = batch_norm_train(&x, &gamma, &beta).unwrap();
        let (dx, dg, db) = batch_norm_backward(&probe, &cache, &gamma).unwrap();
        let h = 1e-6;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3);
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (loss(&p, &gamma, &beta) - loss(&m, &gamma, &beta)) / (2.0 * h);
            assert!(close(fd, dx.data()[i]), "dx[{i}]: {fd} vs {}", dx.data()[i]);
        }
        for ch in 0..2 {
            let (mut gp, mut gm) = (gamma, gamma);
            gp[ch] += h;
            gm[ch] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!(close(fd, dg[ch]));
            let (mut bp, mut bm) = (beta, beta);
            bp[ch] += h;
            bm[ch] -= h;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!(close(fd, db[ch]));
        }
    }
}
