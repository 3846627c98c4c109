//! A minimal reverse-mode engine for small binary CNNs.

pub mod bn;
pub mod conv;
pub mod engine;
pub mod graph;
pub mod loss;
pub mod optim;
pub mod state;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use engine::{
    anchored_loss, backward, compute_gradients, evaluate, forward, predict, prepare_weights, train_step, Anchor,
    Batch, GradientReport, Phase, PreparedBinary, StepReport, Trace, TrainConfig, BINARY_PAD,
};
pub use graph::{LayerSpec, Network};
pub use loss::{accuracy, argmax_rows, cross_entropy};
pub use optim::{Moments, Optimizer, Schedule};
pub use state::{NodeParams, ParamSet, TrainState, Trainable, WeightSource};
