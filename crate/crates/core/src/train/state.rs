//! Trainable parameters, optimizer moments and the step counter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{LayerSpec, Network};
use super::optim::Moments;
use crate::binarize::{analytic_alpha, ScaleMode};
use crate::error::{contract, Result};
use crate::latent::{
    group_by_shape, init_direct, init_holistic, init_svd, init_tucker, reconstruct, reconstruct_layer,
    Decomposition, LayerGroup, WeightParam,
};
use crate::tensor::{DenseTensor, Matrix};

/// Where a binary layer's pre-binarization weight comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightSource {
    Own(WeightParam),
    /// Slice `slice` of holistic group `group`.
    Group { group: usize, slice: usize },
}

/// Parameters of one layer. Gradients reuse this type with the same layout
/// (batch-norm running statistics are left empty there).
#[derive(Clone, Debug, PartialEq)]
pub enum NodeParams {
    None,
    RealConv {
        weight: DenseTensor,
    },
    Binary {
        source: WeightSource,
        /// Present only for [`ScaleMode::LearnedPerFilter`].
        alpha: Option<Vec<f64>>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Linear {
        /// `outputs x inputs`
        weight: Matrix,
        bias: Vec<f64>,
    },
}

/// All parameters of a network: one entry per layer plus the holistic groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub nodes: Vec<NodeParams>,
    pub groups: Vec<WeightParam>,
    pub group_members: Vec<LayerGroup>,
}

/// One trainable slice, as visited by the optimizer.
pub struct Trainable<'a> {
    pub data: &'a mut [f64],
    pub decay: bool,
}

impl ParamSet {
    /// Fresh parameters for `net`. Each layer (and each group) draws its own
    /// seed from a stream seeded by `seed`, in layer order.
    pub fn init(net: &Network, seed: u64) -> Result<Self> {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let seeds: Vec<u64> = (0..net.layers().len()).map(|_| master.random()).collect();

        let holistic: Vec<(usize, [usize; 4])> = net
            .layers()
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                LayerSpec::BinaryConv {
                    geometry,
                    decomposition: Decomposition::Holistic,
                    ..
                } => Some((i, geometry.weight_shape())),
                _ => None,
            })
            .collect();
        let (group_members, _) = group_by_shape(&holistic);
        let mut groups = Vec::with_capacity(group_members.len());
        for g in &group_members {
            let s = g.shape;
            groups.push(init_holistic([g.members.len(), s[0], s[1], s[2], s[3]], master.random())?);
        }

        let mut nodes = Vec::with_capacity(net.layers().len());
        for (i, layer) in net.layers().iter().enumerate() {
            let seed = seeds[i];
            let node = match layer {
                LayerSpec::RealConv(g) => {
                    let WeightParam::Direct { w } = init_direct(g.weight_shape(), seed)? else {
                        unreachable!()
                    };
                    NodeParams::RealConv { weight: w }
                }
                LayerSpec::BinaryConv {
                    geometry,
                    decomposition,
                    scale,
                } => {
                    let shape = geometry.weight_shape();
                    let source = match decomposition {
                        Decomposition::None => WeightSource::Own(init_direct(shape, seed)?),
                        Decomposition::Svd { rank } => WeightSource::Own(init_svd(shape, *rank, seed)?),
                        Decomposition::Tucker => WeightSource::Own(init_tucker(shape, seed)?),
                        Decomposition::Holistic => {
                            match group_members.iter().position(|g| g.members.contains(&i)) {
                                Some(group) => WeightSource::Group {
                                    group,
                                    slice: group_members[group].members.iter().position(|&m| m == i).unwrap(),
                                },
                                // layers without an identically shaped partner
                                None => WeightSource::Own(init_tucker(shape, seed)?),
                            }
                        }
                    };
                    let alpha = match scale {
                        ScaleMode::AnalyticPerFilter => None,
                        ScaleMode::LearnedPerFilter => {
                            let w = match &source {
                                WeightSource::Own(p) => reconstruct(p)?,
                                WeightSource::Group { group, slice } => reconstruct_layer(&groups[*group], *slice)?,
                            };
                            Some(analytic_alpha(&w)?)
                        }
                    };
                    NodeParams::Binary { source, alpha }
                }
                LayerSpec::BatchNorm { channels } => NodeParams::BatchNorm {
                    gamma: vec![1.0; *channels],
                    beta: vec![0.0; *channels],
                    running_mean: vec![0.0; *channels],
                    running_var: vec![1.0; *channels],
                },
                LayerSpec::FullyConnected { inputs, outputs } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let bound = 1.0 / (*inputs as f64).sqrt();
                    NodeParams::Linear {
                        weight: Matrix::from_fn(*outputs, *inputs, |_, _| bound * (2.0 * rng.random::<f64>() - 1.0)),
                        bias: vec![0.0; *outputs],
                    }
                }
                LayerSpec::SignActivation | LayerSpec::ResidualAdd { .. } | LayerSpec::AvgPool => NodeParams::None,
            };
            nodes.push(node);
        }
        Ok(Self {
            nodes,
            groups,
            group_members,
        })
    }

    /// Zero gradients laid out like `self`.
    pub fn zeros_like(&self) -> Self {
        let nodes = self
            .nodes
            .iter()
            .map(|n| match n {
                NodeParams::None => NodeParams::None,
                NodeParams::RealConv { weight } => NodeParams::RealConv {
                    weight: DenseTensor::zeros(weight.shape()),
                },
                NodeParams::Binary { source, alpha } => NodeParams::Binary {
                    source: match source {
                        WeightSource::Own(p) => WeightSource::Own(p.zeros_like()),
                        WeightSource::Group { group, slice } => WeightSource::Group {
                            group: *group,
                            slice: *slice,
                        },
                    },
                    alpha: alpha.as_ref().map(|a| vec![0.0; a.len()]),
                },
                NodeParams::BatchNorm { gamma, .. } => NodeParams::BatchNorm {
                    gamma: vec![0.0; gamma.len()],
                    beta: vec![0.0; gamma.len()],
                    running_mean: Vec::new(),
                    running_var: Vec::new(),
                },
                NodeParams::Linear { weight, bias } => NodeParams::Linear {
                    weight: Matrix::zeros(weight.rows(), weight.cols()),
                    bias: vec![0.0; bias.len()],
                },
            })
            .collect();
        Self {
            nodes,
            groups: self.groups.iter().map(WeightParam::zeros_like).collect(),
            group_members: self.group_members.clone(),
        }
    }

    /// Every trainable slice in a fixed order: layers first, then groups.
    pub fn trainables_mut(&mut self) -> Vec<Trainable<'_>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match node {
                NodeParams::None => {}
                NodeParams::RealConv { weight } => out.push(Trainable {
                    data: weight.data_mut(),
                    decay: true,
                }),
                NodeParams::Binary { source, alpha } => {
                    if let WeightSource::Own(p) = source {
                        out.extend(p.factors_mut().into_iter().map(|data| Trainable { data, decay: false }));
                    }
                    if let Some(a) = alpha {
                        out.push(Trainable { data: a, decay: false });
                    }
                }
                NodeParams::BatchNorm { gamma, beta, .. } => {
                    out.push(Trainable { data: gamma, decay: false });
                    out.push(Trainable { data: beta, decay: false });
                }
                NodeParams::Linear { weight, bias } => {
                    out.push(Trainable {
                        data: weight.data_mut(),
                        decay: true,
                    });
                    out.push(Trainable { data: bias, decay: true });
                }
            }
        }
        for g in &mut self.groups {
            out.extend(g.factors_mut().into_iter().map(|data| Trainable { data, decay: false }));
        }
        out
    }

    /// Read-only view in the order of [`Self::trainables_mut`].
    pub fn trainables(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for node in &self.nodes {
            match node {
                NodeParams::None => {}
                NodeParams::RealConv { weight } => out.push(weight.data()),
                NodeParams::Binary { source, alpha } => {
                    if let WeightSource::Own(p) = source {
                        out.extend(p.factors());
                    }
                    if let Some(a) = alpha {
                        out.push(a);
                    }
                }
                NodeParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                NodeParams::Linear { weight, bias } => {
                    out.push(weight.data());
                    out.push(bias);
                }
            }
        }
        for g in &self.groups {
            out.extend(g.factors());
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainables().iter().map(|s| s.len()).sum()
    }

    /// Parameter bytes (f64) owned by binary layer `layer`'s own parametrization.
    pub fn binary_param_bytes(&self, layer: usize) -> Result<usize> {
        match &self.nodes[layer] {
            NodeParams::Binary {
                source: WeightSource::Own(p),
                ..
            } => Ok(p.param_bytes()),
            NodeParams::Binary {
                source: WeightSource::Group { group, .. },
                ..
            } => Ok(self.groups[*group].param_bytes()),
            _ => contract!("layer {layer} is not a binary layer"),
        }
    }
}

/// Everything a training run carries from step to step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    /// Aligned with [`ParamSet::trainables`].
    pub moments: Vec<Moments>,
    pub lr: f64,
    /// Number of completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamSet, lr: f64) -> Self {
        let moments = params.trainables().iter().map(|s| Moments::zeros(s.len())).collect();
        Self {
            params,
            moments,
            lr,
            step: 0,
        }
    }

    pub fn init(net: &Network, seed: u64, lr: f64) -> Result<Self> {
        Ok(Self::new(ParamSet::init(net, seed)?, lr))
    }

    pub fn is_finite(&self) -> bool {
        self.lr.is_finite()
            && self.params.trainables().iter().all(|s| s.iter().all(|v| v.is_finite()))
            && self
                .moments
                .iter()
                .all(|m| m.first.iter().chain(&m.second).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holistic_reference_groups_identical_shapes() {
        let net = Network::reference(Decomposition::Holistic, ScaleMode::LearnedPerFilter, 10).unwrap();
        let p = ParamSet::init(&net, 1).unwrap();
        assert_eq!(p.group_members.len(), 1);
        assert_eq!(p.group_members[0].members, vec![6, 10, 13]);
        assert!(matches!(
            &p.nodes[3],
            NodeParams::Binary { source: WeightSource::Own(WeightParam::Tucker { .. }), alpha: Some(_) }
        ));
        assert_eq!(p.groups[0].layer_count(), 3);
    }

    #[test]
    fn trainable_views_agree() {
        for d in [Decomposition::None, Decomposition::Svd { rank: None }, Decomposition::Tucker, Decomposition::Holistic] {
            let net = Network::reference(d, ScaleMode::LearnedPerFilter, 10).unwrap();
            let mut p = ParamSet::init(&net, 3).unwrap();
            let lens: Vec<usize> = p.trainables().iter().map(|s| s.len()).collect();
            let lens_mut: Vec<usize> = p.trainables_mut().iter().map(|t| t.data.len()).collect();
            assert_eq!(lens, lens_mut);
            let g = p.zeros_like();
            let glens: Vec<usize> = g.trainables().iter().map(|s| s.len()).collect();
            assert_eq!(lens, glens);
        }
    }

    #[test]
    fn decomposed_layers_store_factors_only() {
        let net = Network::reference(Decomposition::Tucker, ScaleMode::AnalyticPerFilter, 10).unwrap();
        let p = ParamSet::init(&net, 3).unwrap();
        // core (O C 3 3) plus four square factors
        let want = (32 * 16 * 9 + 32 * 32 + 16 * 16 + 9 + 9) * 8;
        assert_eq!(p.binary_param_bytes(3).unwrap(), want);
    }
}
