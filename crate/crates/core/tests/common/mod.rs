#![allow(dead_code)]

use bnn_core::binarize::ScaleMode;
use bnn_core::latent::Decomposition;
use bnn_core::tensor::DenseTensor;
use bnn_core::train::{anchored_loss, compute_gradients, Batch, Network, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DECOMPOSITIONS: [Decomposition; 4] = [
    Decomposition::None,
    Decomposition::Svd { rank: None },
    Decomposition::Tucker,
    Decomposition::Holistic,
];

pub const SCALES: [ScaleMode; 2] = [ScaleMode::AnalyticPerFilter, ScaleMode::LearnedPerFilter];

pub fn random_batch(net: &Network, batch: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![batch];
    shape.extend_from_slice(net.input_shape());
    let images = DenseTensor::from_fn(&shape, |_| rng.random_range(-2.0..2.0));
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Batch { images, labels }
}

/// Worst relative error between backprop and central differences (mask held
/// at the unperturbed point) over every trainable scalar.
pub fn max_gradient_error(net: &Network, params: &ParamSet, batch: &Batch) -> (f64, usize) {
    let report = compute_gradients(net, params, batch).unwrap();
    let analytic: Vec<Vec<f64>> = report.grads.trainables().iter().map(|s| s.to_vec()).collect();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut probe = params.clone();
    for (t, grads) in analytic.iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            let orig = probe.trainables_mut()[t].data[j];
            probe.trainables_mut()[t].data[j] = orig + h;
            let up = anchored_loss(net, &probe, batch, &report.anchor).unwrap();
            probe.trainables_mut()[t].data[j] = orig - h;
            let down = anchored_loss(net, &probe, batch, &report.anchor).unwrap();
            probe.trainables_mut()[t].data[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            if rel > worst && std::env::var("GRAD_DEBUG").is_ok() {
                eprintln!("t={t} j={j} analytic={g:e} fd={fd:e}");
            }
            worst = worst.max(rel);
            count += 1;
        }
    }
    (worst, count)
}
