mod common;

use bnn_core::binarize::ScaleMode;
use bnn_core::harness::experiment::median;
use bnn_core::latent::Decomposition;
use bnn_core::tensor::DenseTensor;
use bnn_core::train::{
    compute_gradients, train_step, Batch, Network, Optimizer, Schedule, TrainConfig, TrainState,
};
use bnn_core::Error;
use common::{DECOMPOSITIONS, SCALES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two classes: `x = +-v + noise` for a fixed random pattern `v`.
fn separable(net: &Network, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = net.input_shape().iter().product();
    let pattern: Vec<f64> = (0..per).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(n * per);
    for &y in &labels {
        let s = if y == 1 { 1.0 } else { -1.0 };
        data.extend(pattern.iter().map(|&p| s * p + rng.random_range(-0.3..0.3)));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(net.input_shape());
    Batch {
        images: DenseTensor::new(shape, data).unwrap(),
        labels,
    }
}

fn config(lr: f64) -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::adam(),
        schedule: Schedule::constant(lr),
        steps_per_epoch: 1,
        weight_decay: 0.0,
        bn_momentum: 0.1,
    }
}

#[test]
fn loss_halves_on_separable_data_for_every_variant() {
    for decomposition in DECOMPOSITIONS {
        for scale in SCALES {
            let net = Network::toy(4, 6, 2, decomposition, scale).unwrap();
            let ratios: Vec<f64> = (0..3)
                .map(|seed| {
                    let batch = separable(&net, 32, 100 + seed);
                    let mut state = TrainState::init(&net, seed, 0.01).unwrap();
                    let before = compute_gradients(&net, &state.params, &batch).unwrap().loss;
                    for _ in 0..200 {
                        train_step(&net, &mut state, &config(0.01), &batch).unwrap();
                    }
                    compute_gradients(&net, &state.params, &batch).unwrap().loss / before
                })
                .collect();
            let m = median(&ratios);
            println!("{} {}: loss ratio {m:.3}", decomposition.name(), scale.name());
            assert!(m <= 0.5, "{} {}: {ratios:?}", decomposition.name(), scale.name());
        }
    }
}

#[test]
fn identical_seeds_give_identical_states() {
    let net = Network::reference(Decomposition::Holistic, ScaleMode::LearnedPerFilter, 10).unwrap();
    let run = || {
        let mut state = TrainState::init(&net, 4, 0.01).unwrap();
        for s in 0..3 {
            let batch = common::random_batch(&net, 8, 10, s);
            train_step(&net, &mut state, &config(0.01), &batch).unwrap();
        }
        state
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let bits = |s: &TrainState| -> Vec<u64> {
        s.params.trainables().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.step, 3);
}

#[test]
fn learning_rate_follows_the_schedule() {
    let net = Network::toy(2, 4, 2, Decomposition::None, ScaleMode::AnalyticPerFilter).unwrap();
    let batch = separable(&net, 8, 1);
    let cfg = TrainConfig {
        schedule: Schedule::new(0.1, vec![(1, 0.5)]).unwrap(),
        steps_per_epoch: 2,
        ..config(0.1)
    };
    let mut state = TrainState::init(&net, 0, 0.1).unwrap();
    let used: Vec<f64> = (0..4).map(|_| train_step(&net, &mut state, &cfg, &batch).unwrap().lr).collect();
    assert_eq!(used, vec![0.1, 0.1, 0.05, 0.05]);
    assert_eq!(state.lr, 0.05);
}

#[test]
fn divergence_is_reported() {
    let net = Network::toy(2, 4, 2, Decomposition::None, ScaleMode::LearnedPerFilter).unwrap();
    let batch = separable(&net, 8, 2);
    let mut state = TrainState::init(&net, 0, 1e300).unwrap();
    let mut err = None;
    for _ in 0..5 {
        if let Err(e) = train_step(&net, &mut state, &config(1e300), &batch) {
            err = Some(e);
            break;
        }
    }
    assert!(matches!(err, Some(Error::Diverged { .. })), "{err:?}");
}

#[test]
fn decomposed_layers_persist_only_factors() {
    // layer 3 is the 32x16x3x3 binary convolution
    let cases = [
        (Decomposition::Svd { rank: Some(4) }, (32 * 4 + 4 * 144) * 8),
        (Decomposition::Tucker, (32 * 16 * 9 + 32 * 32 + 16 * 16 + 9 + 9) * 8),
    ];
    for (d, want) in cases {
        let net = Network::reference(d, ScaleMode::AnalyticPerFilter, 10).unwrap();
        let mut state = TrainState::init(&net, 1, 0.01).unwrap();
        let batch = common::random_batch(&net, 4, 10, 1);
        train_step(&net, &mut state, &config(0.01), &batch).unwrap();
        assert_eq!(state.params.binary_param_bytes(3).unwrap(), want, "{}", d.name());
    }
}

#[test]
fn batch_norm_running_statistics_move_toward_batch_statistics() {
    let net = Network::toy(2, 4, 2, Decomposition::None, ScaleMode::AnalyticPerFilter).unwrap();
    let batch = separable(&net, 8, 3);
    let mut state = TrainState::init(&net, 0, 0.01).unwrap();
    let before = state.params.clone();
    train_step(&net, &mut state, &config(0.01), &batch).unwrap();
    let (bnn_core::train::NodeParams::BatchNorm { running_var: v0, .. }, bnn_core::train::NodeParams::BatchNorm { running_var: v1, .. }) =
        (&before.nodes[0], &state.params.nodes[0])
    else {
        panic!("layer 0 is batch norm")
    };
    assert_ne!(v0, v1);
}
