//! Reconstruct -> binarize -> forward -> backward -> update.

use super::bn::{batch_norm_backward, batch_norm_eval, batch_norm_train, BnBatchStats, BnCache};
use super::conv::{conv2d_backward, conv2d_forward};
use super::graph::{LayerSpec, Network};
use super::loss::{accuracy, cross_entropy};
use super::optim::{Optimizer, Schedule};
use super::state::{NodeParams, ParamSet, TrainState, WeightSource};
use crate::binarize::{
    alpha_gradient, analytic_alpha, broadcast_scale, scale_binary, sign, ste_mask, ScaleMode,
    ScaledBinaryWeights,
};
use crate::error::{contract, Error, Result};
use crate::latent::{backward_to_factors, reconstruct};
use crate::tensor::{DenseTensor, Matrix};

/// Padding value of binary convolutions: `sign(0) = -1` applied to a zero pad.
pub const BINARY_PAD: f64 = -1.0;

/// A labelled minibatch; `images` is `(B, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: DenseTensor,
    pub labels: Vec<usize>,
}

/// One binary layer's weights for the current step. Dropped after the step.
#[derive(Clone, Debug)]
pub struct PreparedBinary {
    /// Reconstructed real weight.
    pub pre: DenseTensor,
    /// Point at which the straight-through mask is evaluated.
    pub reference: DenseTensor,
    pub scaled: ScaledBinaryWeights,
    pub effective: DenseTensor,
    pub scale: ScaleMode,
}

/// Linearization points for every binarization site. With an anchor, `sign(x)`
/// is replaced by `sign(r) + 1{|r| <= 1} (x - r)`: equal to `sign` at `x = r`,
/// with the straight-through mask as its exact derivative. Used to check
/// gradients by finite differences with the mask held fixed.
#[derive(Clone, Debug, Default)]
pub struct Anchor {
    weights: Vec<Option<DenseTensor>>,
    activations: Vec<Option<DenseTensor>>,
}

impl Anchor {
    pub fn capture(net: &Network, prepared: &[Option<PreparedBinary>], trace: &Trace) -> Self {
        let weights = prepared.iter().map(|p| p.as_ref().map(|p| p.pre.clone())).collect();
        let activations = net
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| matches!(l, LayerSpec::SignActivation).then(|| trace.slots[i].clone()))
            .collect();
        Self { weights, activations }
    }
}

fn anchored_sign(x: f64, r: f64) -> f64 {
    sign(r) + ste_mask(r) * (x - r)
}

/// Reconstructs and binarizes every binary layer's weight.
pub fn prepare_weights(
    net: &Network,
    params: &ParamSet,
    anchor: Option<&Anchor>,
) -> Result<Vec<Option<PreparedBinary>>> {
    let group_weights: Vec<DenseTensor> = params.groups.iter().map(reconstruct).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let LayerSpec::BinaryConv { scale, .. } = layer else {
            out.push(None);
            continue;
        };
        let NodeParams::Binary { source, alpha } = &params.nodes[i] else {
            contract!("layer {i} is binary but its parameters are not");
        };
        let pre = match source {
            WeightSource::Own(p) => reconstruct(p)?,
            WeightSource::Group { group, slice } => group_weights[*group].slice_first(*slice)?,
        };
        let learned = match scale {
            ScaleMode::LearnedPerFilter => Some(alpha.as_deref().ok_or_else(|| {
                Error::Contract(format!("layer {i} uses learned scaling but has no alpha"))
            })?),
            ScaleMode::AnalyticPerFilter => None,
        };
        let (scaled, reference) = match anchor.and_then(|a| a.weights.get(i)).and_then(Option::as_ref) {
            None => (scale_binary(&pre, *scale, learned)?, pre.clone()),
            Some(r) => {
                let b = pre.zip_map(r, anchored_sign)?;
                let alpha = match learned {
                    Some(a) => a.to_vec(),
                    None => analytic_alpha(&pre)?,
                };
                (ScaledBinaryWeights { b, alpha }, r.clone())
            }
        };
        let effective = scaled.effective();
        out.push(Some(PreparedBinary {
            pre,
            reference,
            scaled,
            effective,
            scale: *scale,
        }));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Activations and caches of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub slots: Vec<DenseTensor>,
    bn: Vec<Option<BnCache>>,
    pub bn_stats: Vec<Option<BnBatchStats>>,
}

impl Trace {
    pub fn output(&self) -> &DenseTensor {
        self.slots.last().expect("input slot")
    }
}

pub(crate) fn residual_forward(x: &DenseTensor, skip: &DenseTensor, stride: usize) -> DenseTensor {
    let mut out = x.clone();
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (sc, sh, sw) = (skip.shape()[1], skip.shape()[2], skip.shape()[3]);
    let (o, s) = (out.data_mut(), skip.data());
    for n in 0..b {
        for ch in 0..sc {
            for y in 0..h {
                for xx in 0..w {
                    o[((n * c + ch) * h + y) * w + xx] += s[((n * sc + ch) * sh + y * stride) * sw + xx * stride];
                }
            }
        }
    }
    out
}

fn residual_backward_skip(grad: &DenseTensor, skip_shape: &[usize], stride: usize) -> DenseTensor {
    let mut out = DenseTensor::zeros(skip_shape);
    let (b, c, h, w) = (grad.shape()[0], grad.shape()[1], grad.shape()[2], grad.shape()[3]);
    let (sc, sh, sw) = (skip_shape[1], skip_shape[2], skip_shape[3]);
    let (o, g) = (out.data_mut(), grad.data());
    for n in 0..b {
        for ch in 0..sc {
            for y in 0..h {
                for xx in 0..w {
                    o[((n * sc + ch) * sh + y * stride) * sw + xx * stride] += g[((n * c + ch) * h + y) * w + xx];
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_forward(x: &DenseTensor) -> DenseTensor {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let spatial = x.len() / (b * c);
    let data = x
        .data()
        .chunks(spatial)
        .map(|s| s.iter().sum::<f64>() / spatial as f64)
        .collect();
    DenseTensor::from_parts(vec![b, c], data)
}

fn avg_pool_backward(grad: &DenseTensor, input_shape: &[usize]) -> DenseTensor {
    let spatial: usize = input_shape[2..].iter().product();
    let mut out = Vec::with_capacity(grad.len() * spatial);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g / spatial as f64, spatial));
    }
    DenseTensor::from_parts(input_shape.to_vec(), out)
}

pub(crate) fn linear_forward(x: &DenseTensor, w: &Matrix, bias: &[f64]) -> DenseTensor {
    let b = x.shape()[0];
    let inputs = x.len() / b;
    let mut out = Vec::with_capacity(b * w.rows());
    for row in x.data().chunks(inputs) {
        for o in 0..w.rows() {
            out.push(bias[o] + w.row(o).iter().zip(row).map(|(a, v)| a * v).sum::<f64>());
        }
    }
    DenseTensor::from_parts(vec![b, w.rows()], out)
}

/// Runs the graph on `x` (`(B, ...)` with the network's per-sample input shape).
pub fn forward(
    net: &Network,
    params: &ParamSet,
    prepared: &[Option<PreparedBinary>],
    x: &DenseTensor,
    phase: Phase,
    anchor: Option<&Anchor>,
) -> Result<Trace> {
    if x.order() < 2 || &x.shape()[1..] != net.input_shape() {
        contract!("input {:?} does not match network input (B, {:?})", x.shape(), net.input_shape());
    }
    let n = net.layers().len();
    let mut slots = Vec::with_capacity(n + 1);
    slots.push(x.clone());
    let mut bn = vec![None; n];
    let mut bn_stats = vec![None; n];
    for (i, layer) in net.layers().iter().enumerate() {
        let input = &slots[i];
        let out = match (layer, &params.nodes[i]) {
            (LayerSpec::RealConv(g), NodeParams::RealConv { weight }) => conv2d_forward(input, weight, g, 0.0)?,
            (LayerSpec::BinaryConv { geometry, .. }, _) => {
                let p = prepared[i].as_ref().ok_or_else(|| Error::Contract(format!("layer {i} not prepared")))?;
                conv2d_forward(input, &p.effective, geometry, BINARY_PAD)?
            }
            (
                LayerSpec::BatchNorm { .. },
                NodeParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => match phase {
                Phase::Train => {
                    let (y, cache, stats) = batch_norm_train(input, gamma, beta)?;
                    bn[i] = Some(cache);
                    bn_stats[i] = Some(stats);
                    y
                }
                Phase::Eval => batch_norm_eval(input, gamma, beta, running_mean, running_var)?,
            },
            (LayerSpec::SignActivation, _) => {
                match anchor.and_then(|a| a.activations.get(i)).and_then(Option::as_ref) {
                    Some(r) => input.zip_map(r, anchored_sign)?,
                    None => input.map(sign),
                }
            }
            (LayerSpec::ResidualAdd { skip, stride }, _) => residual_forward(input, &slots[*skip], *stride),
            (LayerSpec::AvgPool, _) => avg_pool_forward(input),
            (LayerSpec::FullyConnected { .. }, NodeParams::Linear { weight, bias }) => {
                linear_forward(input, weight, bias)
            }
            (l, _) => contract!("layer {i} ({}) has mismatched parameters", l.kind_name()),
        };
        slots.push(out);
    }
    Ok(Trace { slots, bn, bn_stats })
}

fn add_grad(slot: &mut Option<DenseTensor>, g: DenseTensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of every trainable parameter given `dC/d(output)`.
pub fn backward(
    net: &Network,
    params: &ParamSet,
    prepared: &[Option<PreparedBinary>],
    trace: &Trace,
    grad_output: DenseTensor,
) -> Result<ParamSet> {
    let n = net.layers().len();
    let mut grads = params.zeros_like();
    let mut slot_grads: Vec<Option<DenseTensor>> = vec![None; n + 1];
    slot_grads[n] = Some(grad_output);
    let mut group_grads: Vec<Vec<Option<DenseTensor>>> = params
        .group_members
        .iter()
        .map(|g| vec![None; g.members.len()])
        .collect();

    for i in (0..n).rev() {
        let Some(g) = slot_grads[i + 1].take() else {
            continue;
        };
        let input = &trace.slots[i];
        let need_dx = i > 0;
        match (&net.layers()[i], &params.nodes[i]) {
            (LayerSpec::RealConv(geom), NodeParams::RealConv { weight }) => {
                let (dx, dw) = conv2d_backward(input, weight, &g, geom, 0.0, need_dx)?;
                if let NodeParams::RealConv { weight } = &mut grads.nodes[i] {
                    *weight = dw;
                }
                if let Some(dx) = dx {
                    add_grad(&mut slot_grads[i], dx)?;
                }
            }
            (LayerSpec::BinaryConv { geometry, .. }, NodeParams::Binary { source, .. }) => {
                let p = prepared[i].as_ref().expect("prepared in forward");
                let (dx, d_eff) = conv2d_backward(input, &p.effective, &g, geometry, BINARY_PAD, need_dx)?;
                if let Some(dx) = dx {
                    add_grad(&mut slot_grads[i], dx)?;
                }
                let d_alpha = alpha_gradient(&d_eff, &p.scaled.b)?;
                // through b: alpha_i * dW~ masked by the straight-through estimator
                let mut d_pre = broadcast_scale(&d_eff, &p.scaled.alpha)
                    .zip_map(&p.reference, |gv, r| gv * ste_mask(r))?;
                match p.scale {
                    ScaleMode::AnalyticPerFilter => {
                        // through alpha_i = mean |W_i|: d alpha_i / d W_ij = sign(W_ij) / n
                        let per = d_pre.len() / d_pre.shape()[0];
                        let pre = p.pre.data();
                        for (f, chunk) in d_pre.data_mut().chunks_mut(per).enumerate() {
                            for (j, v) in chunk.iter_mut().enumerate() {
                                *v += d_alpha[f] * sign(pre[f * per + j]) / per as f64;
                            }
                        }
                    }
                    ScaleMode::LearnedPerFilter => {
                        if let NodeParams::Binary { alpha: Some(a), .. } = &mut grads.nodes[i] {
                            *a = d_alpha;
                        }
                    }
                }
                match source {
                    WeightSource::Own(wp) => {
                        let gp = backward_to_factors(wp, &d_pre)?;
                        if let NodeParams::Binary { source: WeightSource::Own(dst), .. } = &mut grads.nodes[i] {
                            *dst = gp;
                        }
                    }
                    WeightSource::Group { group, slice } => group_grads[*group][*slice] = Some(d_pre),
                }
            }
            (LayerSpec::BatchNorm { .. }, NodeParams::BatchNorm { gamma, .. }) => {
                let cache = trace.bn[i]
                    .as_ref()
                    .ok_or_else(|| Error::Contract("backward needs a training-phase forward".into()))?;
                let (dx, dg, db) = batch_norm_backward(&g, cache, gamma)?;
                if let NodeParams::BatchNorm { gamma, beta, .. } = &mut grads.nodes[i] {
                    *gamma = dg;
                    *beta = db;
                }
                if need_dx {
                    add_grad(&mut slot_grads[i], dx)?;
                }
            }
            (LayerSpec::SignActivation, _) => {
                if need_dx {
                    add_grad(&mut slot_grads[i], g.zip_map(input, |gv, x| gv * ste_mask(x))?)?;
                }
            }
            (LayerSpec::ResidualAdd { skip, stride }, _) => {
                let ds = residual_backward_skip(&g, trace.slots[*skip].shape(), *stride);
                add_grad(&mut slot_grads[i], g)?;
                if *skip > 0 {
                    add_grad(&mut slot_grads[*skip], ds)?;
                }
            }
            (LayerSpec::AvgPool, _) => {
                if need_dx {
                    add_grad(&mut slot_grads[i], avg_pool_backward(&g, input.shape()))?;
                }
            }
            (LayerSpec::FullyConnected { .. }, NodeParams::Linear { weight, .. }) => {
                let b = g.shape()[0];
                let inputs = weight.cols();
                let outputs = weight.rows();
                let mut dw = vec![0.0; outputs * inputs];
                let mut db = vec![0.0; outputs];
                let mut dx = vec![0.0; b * inputs];
                for s in 0..b {
                    let xrow = &input.data()[s * inputs..(s + 1) * inputs];
                    let grow = &g.data()[s * outputs..(s + 1) * outputs];
                    for o in 0..outputs {
                        db[o] += grow[o];
                        for k in 0..inputs {
                            dw[o * inputs + k] += grow[o] * xrow[k];
                            dx[s * inputs + k] += grow[o] * weight.get(o, k);
                        }
                    }
                }
                if let NodeParams::Linear { weight, bias } = &mut grads.nodes[i] {
                    *weight = Matrix::from_parts(outputs, inputs, dw);
                    *bias = db;
                }
                if need_dx {
                    add_grad(&mut slot_grads[i], DenseTensor::from_parts(input.shape().to_vec(), dx))?;
                }
            }
            (l, _) => contract!("layer {i} ({}) has mismatched parameters", l.kind_name()),
        }
    }

    for (gi, slices) in group_grads.into_iter().enumerate() {
        let shape = params.groups[gi].weight_shape();
        let parts: Vec<DenseTensor> = slices
            .into_iter()
            .map(|s| s.unwrap_or_else(|| DenseTensor::zeros(&shape[1..])))
            .collect();
        grads.groups[gi] = backward_to_factors(&params.groups[gi], &DenseTensor::stack(&parts)?)?;
    }
    Ok(grads)
}

/// Loss, accuracy and gradients at `params` for one batch.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: ParamSet,
    pub bn_stats: Vec<Option<BnBatchStats>>,
    /// Linearization point of this evaluation, for finite-difference checks.
    pub anchor: Anchor,
}

pub fn compute_gradients(net: &Network, params: &ParamSet, batch: &Batch) -> Result<GradientReport> {
    let prepared = prepare_weights(net, params, None)?;
    let trace = forward(net, params, &prepared, &batch.images, Phase::Train, None)?;
    let (loss, dlogits) = cross_entropy(trace.output(), &batch.labels)?;
    let acc = accuracy(trace.output(), &batch.labels);
    let grads = backward(net, params, &prepared, &trace, dlogits)?;
    let anchor = Anchor::capture(net, &prepared, &trace);
    Ok(GradientReport {
        loss,
        accuracy: acc,
        grads,
        bn_stats: trace.bn_stats,
        anchor,
    })
}

/// Training-phase loss with every binarization linearized at `anchor`.
pub fn anchored_loss(net: &Network, params: &ParamSet, batch: &Batch, anchor: &Anchor) -> Result<f64> {
    let prepared = prepare_weights(net, params, Some(anchor))?;
    let trace = forward(net, params, &prepared, &batch.images, Phase::Train, Some(anchor))?;
    Ok(cross_entropy(trace.output(), &batch.labels)?.0)
}

/// Static settings of the update rule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub steps_per_epoch: u64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub accuracy: f64,
    /// Rate used for this step.
    pub lr: f64,
}

/// One full iteration on `state`.
pub fn train_step(net: &Network, state: &mut TrainState, cfg: &TrainConfig, batch: &Batch) -> Result<StepReport> {
    if batch.labels.is_empty() {
        contract!("empty minibatch");
    }
    let report = compute_gradients(net, &state.params, batch)?;
    if !report.loss.is_finite() {
        return Err(Error::Diverged {
            step: state.step,
            loss: report.loss,
        });
    }
    let m = cfg.bn_momentum;
    for (node, stats) in state.params.nodes.iter_mut().zip(&report.bn_stats) {
        if let (
            NodeParams::BatchNorm {
                running_mean,
                running_var,
                ..
            },
            Some(s),
        ) = (node, stats)
        {
            for c in 0..running_mean.len() {
                running_mean[c] = (1.0 - m) * running_mean[c] + m * s.mean[c];
                running_var[c] = (1.0 - m) * running_var[c] + m * s.unbiased_var[c];
            }
        }
    }
    let lr = state.lr;
    let t = state.step + 1;
    let grads = report.grads.trainables();
    for ((param, grad), moments) in state.params.trainables_mut().into_iter().zip(grads).zip(&mut state.moments) {
        let decay = if param.decay { cfg.weight_decay } else { 0.0 };
        cfg.optimizer.update(param.data, grad, moments, lr, t, decay)?;
    }
    state.step = t;
    state.lr = cfg.schedule.lr_at_step(t, cfg.steps_per_epoch);
    if !state.is_finite() {
        return Err(Error::Diverged {
            step: state.step,
            loss: report.loss,
        });
    }
    Ok(StepReport {
        loss: report.loss,
        accuracy: report.accuracy,
        lr,
    })
}

/// Eval-phase logits.
pub fn predict(net: &Network, params: &ParamSet, images: &DenseTensor) -> Result<DenseTensor> {
    let prepared = prepare_weights(net, params, None)?;
    Ok(forward(net, params, &prepared, images, Phase::Eval, None)?.output().clone())
}

/// Eval-phase mean loss and accuracy over a dataset, in batches.
pub fn evaluate(
    net: &Network,
    params: &ParamSet,
    images: &DenseTensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let prepared = prepare_weights(net, params, None)?;
    let n = labels.len();
    if n == 0 {
        contract!("cannot evaluate on an empty set");
    }
    let per: usize = images.shape()[1..].iter().product();
    let (mut loss, mut hits) = (0.0, 0.0);
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let x = DenseTensor::from_parts(shape, images.data()[start * per..end * per].to_vec());
        let trace = forward(net, params, &prepared, &x, Phase::Eval, None)?;
        let (l, _) = cross_entropy(trace.output(), &labels[start..end])?;
        loss += l * (end - start) as f64;
        hits += accuracy(trace.output(), &labels[start..end]) * (end - start) as f64;
    }
    Ok((loss / n as f64, hits / n as f64))
}
