//! Layer specifications and the network graph.
//!
//! Activations live in numbered slots: slot 0 is the network input and slot
//! `i + 1` is the output of layer `i`. Every layer reads slot `i`;
//! [`LayerSpec::ResidualAdd`] additionally reads an earlier `skip` slot.

use crate::binarize::ScaleMode;
use crate::error::{contract, Result};
use crate::latent::Decomposition;

pub use super::conv::ConvGeometry;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Real-valued convolution, zero padding, no bias.
    RealConv(ConvGeometry),
    /// Convolution with `alpha * sign(W)` weights; padding value is -1.
    BinaryConv {
        geometry: ConvGeometry,
        decomposition: Decomposition,
        scale: ScaleMode,
    },
    BatchNorm { channels: usize },
    SignActivation,
    /// Adds slot `skip`, subsampled by `stride` and zero-padded in channels.
    ResidualAdd { skip: usize, stride: usize },
    /// Global average over spatial positions: `(B, C, H, W) -> (B, C)`.
    AvgPool,
    FullyConnected { inputs: usize, outputs: usize },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::RealConv(_) => "real_conv",
            LayerSpec::BinaryConv { .. } => "binary_conv",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::SignActivation => "sign",
            LayerSpec::ResidualAdd { .. } => "residual_add",
            LayerSpec::AvgPool => "avg_pool",
            LayerSpec::FullyConnected { .. } => "fully_connected",
        }
    }
}

/// A validated feed-forward graph over `(C, H, W)` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    slot_shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            contract!("invalid input shape {input_shape:?}");
        }
        let mut slots = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let x = &slots[i];
            let out = match layer {
                LayerSpec::RealConv(g) | LayerSpec::BinaryConv { geometry: g, .. } => {
                    let &[c, h, w] = x.as_slice() else {
                        contract!("layer {i}: convolution needs a (C, H, W) input, got {x:?}");
                    };
                    if c != g.in_channels {
                        contract!("layer {i}: {c} input channels, geometry expects {}", g.in_channels);
                    }
                    let (oh, ow) = g.output_hw(h, w)?;
                    vec![g.out_channels, oh, ow]
                }
                LayerSpec::BatchNorm { channels } => {
                    if x[0] != *channels {
                        contract!("layer {i}: batch norm over {channels} channels, input {x:?}");
                    }
                    x.clone()
                }
                LayerSpec::SignActivation => x.clone(),
                LayerSpec::ResidualAdd { skip, stride } => {
                    if *skip > i {
                        contract!("layer {i}: skip slot {skip} is not computed yet");
                    }
                    let s = &slots[*skip];
                    if s.len() != 3 || x.len() != 3 || *stride == 0 {
                        contract!("layer {i}: residual add needs (C, H, W) tensors");
                    }
                    let sub = [(s[1] + stride - 1) / stride, (s[2] + stride - 1) / stride];
                    if s[0] > x[0] || sub != [x[1], x[2]] {
                        contract!(
                            "layer {i}: skip {s:?} with stride {stride} cannot be added to {x:?}"
                        );
                    }
                    x.clone()
                }
                LayerSpec::AvgPool => {
                    if x.len() != 3 {
                        contract!("layer {i}: average pool needs (C, H, W), got {x:?}");
                    }
                    vec![x[0]]
                }
                LayerSpec::FullyConnected { inputs, outputs } => {
                    if x.iter().product::<usize>() != *inputs || *outputs == 0 {
                        contract!("layer {i}: fully connected {inputs}->{outputs} cannot take {x:?}");
                    }
                    vec![*outputs]
                }
            };
            slots.push(out);
        }
        Ok(Self {
            input_shape,
            layers,
            slot_shapes: slots,
        })
    }

    /// Stem `RealConv(1 -> 16)`, two pre-activation binary basic blocks
    /// (16 -> 32 with stride 2, then 32 -> 32), BN, global average pool and a
    /// real classifier, for `1 x 28 x 28` inputs.
    pub fn reference(decomposition: Decomposition, scale: ScaleMode, classes: usize) -> Result<Self> {
        let mut layers = vec![LayerSpec::RealConv(ConvGeometry::new(1, 16, 3, 1, 1))];
        push_basic_block(&mut layers, 16, 32, 2, decomposition, scale);
        push_basic_block(&mut layers, 32, 32, 1, decomposition, scale);
        layers.push(LayerSpec::BatchNorm { channels: 32 });
        layers.push(LayerSpec::AvgPool);
        layers.push(LayerSpec::FullyConnected {
            inputs: 32,
            outputs: classes,
        });
        Self::new(vec![1, 28, 28], layers)
    }

    /// Two identically shaped binary convolutions between BN/sign pairs, then
    /// pooling and a classifier. Small enough for exhaustive gradient checks.
    pub fn toy(
        channels: usize,
        size: usize,
        classes: usize,
        decomposition: Decomposition,
        scale: ScaleMode,
    ) -> Result<Self> {
        let conv = LayerSpec::BinaryConv {
            geometry: ConvGeometry::new(channels, channels, 3, 1, 1),
            decomposition,
            scale,
        };
        let layers = vec![
            LayerSpec::BatchNorm { channels },
            LayerSpec::SignActivation,
            conv.clone(),
            LayerSpec::BatchNorm { channels },
            LayerSpec::SignActivation,
            conv,
            LayerSpec::AvgPool,
            LayerSpec::FullyConnected {
                inputs: channels,
                outputs: classes,
            },
        ];
        Self::new(vec![channels, size, size], layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample shape of slot `s`.
    pub fn slot_shape(&self, s: usize) -> &[usize] {
        &self.slot_shapes[s]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.slot_shapes.last().expect("at least the input slot")
    }

    /// Indices of binary convolution layers.
    pub fn binary_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::BinaryConv { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Appends `BN -> sign -> BinaryConv -> BN -> sign -> BinaryConv -> +skip`.
pub fn push_basic_block(
    layers: &mut Vec<LayerSpec>,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    decomposition: Decomposition,
    scale: ScaleMode,
) {
    let skip = layers.len();
    layers.extend([
        LayerSpec::BatchNorm { channels: in_channels },
        LayerSpec::SignActivation,
        LayerSpec::BinaryConv {
            geometry: ConvGeometry::new(in_channels, out_channels, 3, stride, 1),
            decomposition,
            scale,
        },
        LayerSpec::BatchNorm { channels: out_channels },
        LayerSpec::SignActivation,
        LayerSpec::BinaryConv {
            geometry: ConvGeometry::new(out_channels, out_channels, 3, 1, 1),
            decomposition,
            scale,
        },
        LayerSpec::ResidualAdd { skip, stride },
    ]);
}
