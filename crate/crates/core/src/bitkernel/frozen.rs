//! Inference artifact: packed binary filters, scaling factors and real layers.
//!
//! File layout (little-endian):
//!
//! ```text
//! "BNCV" | version u16 | layer count u16
//! per layer:
//!   kind u8 | geometry 5 x u32
//!   alpha count u32 | alpha f32...
//!   valid bits per row u32 | rows u32 | word count u32 | words u64...
//!   real count u32 | reals f64...
//! ```
//!
//! Kinds: 0 real conv, 1 binary conv, 2 batch norm, 3 sign, 4 residual add,
//! 5 average pool, 6 fully connected. Geometry is `[in, out, kernel, stride,
//! padding]` for convolutions, `[channels, 0, 0, 0, 0]` for batch norm, `[skip
//! slot, stride, 0, 0, 0]` for residual adds and `[inputs, outputs, 0, 0, 0]`
//! for fully connected layers. Packed filter rows are stored back to back as one
//! bit stream (row `i` at bits `[i n, (i + 1) n)`, bit `j` of word `k` is stream
//! position `64 k + j`). Reals are conv weights; `gamma, beta, mean, var` for
//! batch norm; weight then bias for fully connected layers.

use std::path::Path;

use super::{binary_conv, pack_filters, words_for, PackedBinaryTensor};
use crate::binarize::sign;
use crate::codec::{Reader, Writer};
use crate::error::{contract, Error, Result};
use crate::tensor::{DenseTensor, Matrix};
use crate::train::bn::batch_norm_eval;
use crate::train::engine::{avg_pool_forward, linear_forward, prepare_weights, residual_forward};
use crate::train::{conv2d_forward, ConvGeometry, LayerSpec, Network, NodeParams, ParamSet};

pub const MAGIC: &[u8; 4] = b"BNCV";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum FrozenLayer {
    RealConv {
        geometry: ConvGeometry,
        weight: DenseTensor,
    },
    BinaryConv {
        geometry: ConvGeometry,
        alpha: Vec<f32>,
        weights: PackedBinaryTensor,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Sign,
    ResidualAdd {
        skip: usize,
        stride: usize,
    },
    AvgPool,
    Linear {
        weight: Matrix,
        bias: Vec<f64>,
    },
}

impl FrozenLayer {
    fn kind(&self) -> u8 {
        match self {
            FrozenLayer::RealConv { .. } => 0,
            FrozenLayer::BinaryConv { .. } => 1,
            FrozenLayer::BatchNorm { .. } => 2,
            FrozenLayer::Sign => 3,
            FrozenLayer::ResidualAdd { .. } => 4,
            FrozenLayer::AvgPool => 5,
            FrozenLayer::Linear { .. } => 6,
        }
    }
}

/// Layers in graph order; batch norm is kept unfolded.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBinaryModel {
    pub layers: Vec<FrozenLayer>,
}

/// Freezes trained parameters: decomposed weights are reconstructed once,
/// binarized and packed; the factors are dropped.
pub fn export_model(net: &Network, params: &ParamSet) -> Result<FrozenBinaryModel> {
    let prepared = prepare_weights(net, params, None)?;
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, (spec, node)) in net.layers().iter().zip(&params.nodes).enumerate() {
        let layer = match (spec, node) {
            (LayerSpec::RealConv(g), NodeParams::RealConv { weight }) => FrozenLayer::RealConv {
                geometry: *g,
                weight: weight.clone(),
            },
            (LayerSpec::BinaryConv { geometry, .. }, _) => {
                let p = prepared[i].as_ref().expect("binary layers are prepared");
                FrozenLayer::BinaryConv {
                    geometry: *geometry,
                    alpha: p.scaled.alpha.iter().map(|&a| a as f32).collect(),
                    weights: pack_filters(&p.scaled.b)?,
                }
            }
            (
                LayerSpec::BatchNorm { .. },
                NodeParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => FrozenLayer::BatchNorm {
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: running_mean.clone(),
                var: running_var.clone(),
            },
            (LayerSpec::SignActivation, _) => FrozenLayer::Sign,
            (LayerSpec::ResidualAdd { skip, stride }, _) => FrozenLayer::ResidualAdd {
                skip: *skip,
                stride: *stride,
            },
            (LayerSpec::AvgPool, _) => FrozenLayer::AvgPool,
            (LayerSpec::FullyConnected { .. }, NodeParams::Linear { weight, bias }) => FrozenLayer::Linear {
                weight: weight.clone(),
                bias: bias.clone(),
            },
            (l, _) => contract!("layer {i} ({}) has mismatched parameters", l.kind_name()),
        };
        layers.push(layer);
    }
    Ok(FrozenBinaryModel { layers })
}

fn to_u32(v: usize) -> u32 {
    u32::try_from(v).expect("geometry fits in u32")
}

fn encode_layer(w: &mut Writer, layer: &FrozenLayer) {
    let conv_geom = |g: &ConvGeometry| [g.in_channels, g.out_channels, g.kernel, g.stride, g.padding];
    let geometry = match layer {
        FrozenLayer::RealConv { geometry, .. } | FrozenLayer::BinaryConv { geometry, .. } => conv_geom(geometry),
        FrozenLayer::BatchNorm { gamma, .. } => [gamma.len(), 0, 0, 0, 0],
        FrozenLayer::ResidualAdd { skip, stride } => [*skip, *stride, 0, 0, 0],
        FrozenLayer::Linear { weight, .. } => [weight.cols(), weight.rows(), 0, 0, 0],
        FrozenLayer::Sign | FrozenLayer::AvgPool => [0; 5],
    };
    w.u8(layer.kind());
    geometry.iter().for_each(|&g| w.u32(to_u32(g)));
    match layer {
        FrozenLayer::BinaryConv { alpha, weights, .. } => {
            w.len(alpha.len());
            alpha.iter().for_each(|&a| w.f32(a));
            let stream = weights.dense_bits();
            w.len(weights.row_bits());
            w.len(weights.rows());
            w.len(stream.len());
            stream.iter().for_each(|&x| w.u64(x));
        }
        _ => {
            w.len(0);
            w.len(0);
            w.len(0);
            w.len(0);
        }
    }
    let reals: Vec<f64> = match layer {
        FrozenLayer::RealConv { weight, .. } => weight.data().to_vec(),
        FrozenLayer::BatchNorm { gamma, beta, mean, var } => [gamma.as_slice(), beta, mean, var].concat(),
        FrozenLayer::Linear { weight, bias } => [weight.data(), bias.as_slice()].concat(),
        _ => Vec::new(),
    };
    w.f64s(&reals);
}

fn decode_layer(r: &mut Reader<'_>) -> Result<FrozenLayer> {
    let start = r.pos();
    let kind = r.u8()?;
    let mut geom = [0usize; 5];
    for g in &mut geom {
        *g = r.u32()? as usize;
    }
    let n_alpha = r.count(4)?;
    let alpha: Vec<f32> = (0..n_alpha).map(|_| r.f32()).collect::<Result<_>>()?;
    let bits_at = r.pos();
    let row_bits = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let n_words = r.count(8)?;
    let words: Vec<u64> = (0..n_words).map(|_| r.u64()).collect::<Result<_>>()?;
    let reals_at = r.pos();
    let reals = r.f64s()?;
    let bad = |at: usize, msg: String| Err(r.error_at(at, msg));
    let conv = || ConvGeometry::new(geom[0], geom[1], geom[2], geom[3], geom[4]);
    let expect_reals = |n: usize| -> Result<()> {
        if reals.len() != n {
            return Err(r.error_at(reals_at, format!("expected {n} real parameters, found {}", reals.len())));
        }
        Ok(())
    };
    if kind != 1 && (n_alpha != 0 || n_words != 0) {
        return bad(bits_at, format!("layer kind {kind} must not carry binary payload"));
    }
    Ok(match kind {
        0 => {
            let g = conv();
            let shape = g.weight_shape().to_vec();
            expect_reals(shape.iter().product())?;
            FrozenLayer::RealConv {
                geometry: g,
                weight: DenseTensor::new(shape, reals).map_err(|e| r.error_at(reals_at, e.to_string()))?,
            }
        }
        1 => {
            let g = conv();
            let n = g.fan_in();
            if alpha.len() != g.out_channels {
                return bad(start, format!("{} scaling factors for {} filters", alpha.len(), g.out_channels));
            }
            if row_bits != n || rows != g.out_channels || n_words != words_for(rows * n) {
                return bad(bits_at, format!("binary payload {rows}x{row_bits} in {n_words} words does not match geometry"));
            }
            expect_reals(0)?;
            let weights = PackedBinaryTensor::from_dense_bits(g.weight_shape().to_vec(), n, &words)
                .map_err(|e| r.error_at(bits_at, e.to_string()))?;
            FrozenLayer::BinaryConv {
                geometry: g,
                alpha,
                weights,
            }
        }
        2 => {
            let c = geom[0];
            expect_reals(4 * c)?;
            FrozenLayer::BatchNorm {
                gamma: reals[..c].to_vec(),
                beta: reals[c..2 * c].to_vec(),
                mean: reals[2 * c..3 * c].to_vec(),
                var: reals[3 * c..].to_vec(),
            }
        }
        3 => FrozenLayer::Sign,
        4 => FrozenLayer::ResidualAdd {
            skip: geom[0],
            stride: geom[1],
        },
        5 => FrozenLayer::AvgPool,
        6 => {
            let (inputs, outputs) = (geom[0], geom[1]);
            expect_reals(outputs * inputs + outputs)?;
            FrozenLayer::Linear {
                weight: Matrix::new(outputs, inputs, reals[..outputs * inputs].to_vec())
                    .map_err(|e| r.error_at(reals_at, e.to_string()))?,
                bias: reals[outputs * inputs..].to_vec(),
            }
        }
        k => return bad(start, format!("unknown layer kind {k}")),
    })
}

impl FrozenBinaryModel {
    pub fn layer_bytes(layer: &FrozenLayer) -> Vec<u8> {
        let mut w = Writer::default();
        encode_layer(&mut w, layer);
        w.buf
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(FORMAT_VERSION);
        w.u16(u16::try_from(self.layers.len()).expect("fewer than 65536 layers"));
        for l in &self.layers {
            encode_layer(&mut w, l);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "frozen model");
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, expected \"BNCV\""));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u16()? as usize;
        let layers = (0..count).map(|_| decode_layer(&mut r)).collect::<Result<_>>()?;
        r.finish()?;
        Ok(Self { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Logits for a batch `(B, C, H, W)`; binary convolutions run on packed bits.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        if x.order() != 4 {
            contract!("frozen model expects (B, C, H, W) input, got {:?}", x.shape());
        }
        let mut slots = vec![x.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let input = &slots[i];
            let out = match layer {
                FrozenLayer::RealConv { geometry, weight } => conv2d_forward(input, weight, geometry, 0.0)?,
                FrozenLayer::BinaryConv {
                    geometry,
                    alpha,
                    weights,
                } => binary_conv(input, weights, alpha, geometry)?,
                FrozenLayer::BatchNorm { gamma, beta, mean, var } => batch_norm_eval(input, gamma, beta, mean, var)?,
                FrozenLayer::Sign => input.map(sign),
                FrozenLayer::ResidualAdd { skip, stride } => {
                    if *skip > i {
                        contract!("layer {i} reads slot {skip} before it exists");
                    }
                    let s = &slots[*skip];
                    let fits = s.order() == 4
                        && *stride > 0
                        && s.shape()[0] == input.shape()[0]
                        && s.shape()[1] <= input.shape()[1]
                        && s.shape()[2].div_ceil(*stride) == input.shape()[2]
                        && s.shape()[3].div_ceil(*stride) == input.shape()[3];
                    if !fits {
                        contract!("layer {i}: cannot add {:?} onto {:?}", s.shape(), input.shape());
                    }
                    residual_forward(input, s, *stride)
                }
                FrozenLayer::AvgPool => avg_pool_forward(input),
                FrozenLayer::Linear { weight, bias } => {
                    if input.len() != input.shape()[0] * weight.cols() {
                        contract!("layer {i}: {:?} does not flatten to {} inputs", input.shape(), weight.cols());
                    }
                    linear_forward(input, weight, bias)
                }
            };
            slots.push(out);
        }
        Ok(slots.pop().expect("at least the input slot"))
    }
}
