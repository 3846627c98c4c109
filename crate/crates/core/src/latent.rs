//! Real-valued latent parametrizations of convolution weights.
//!
//! A [`WeightParam`] stores only factors. The `O x C x w x h` weight tensor is
//! produced on demand by [`reconstruct`] (or [`reconstruct_layer`] for one slice
//! of a holistic group) and is never kept between training steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::tensor::{
    mode_product, orthonormal_completion, svd, tucker_reconstruct, unfold, DenseTensor, Matrix,
};

/// Which parametrization a binary layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decomposition {
    None,
    /// Layer-wise SVD; `rank = None` keeps every component.
    Svd { rank: Option<usize> },
    Tucker,
    /// One Tucker decomposition per group of identically shaped layers.
    Holistic,
}

impl Decomposition {
    pub fn name(self) -> &'static str {
        match self {
            Decomposition::None => "none",
            Decomposition::Svd { .. } => "svd",
            Decomposition::Tucker => "tucker",
            Decomposition::Holistic => "holistic",
        }
    }
}

/// The four weight parametrizations. Gradients use the same type: the output of
/// [`backward_to_factors`] mirrors its parameter field by field.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightParam {
    /// The weight tensor itself.
    Direct { w: DenseTensor },
    /// `reshape(u * v)` with `Sigma` absorbed into `u` (`O x K` and `K x Cwh`).
    Svd {
        u: Matrix,
        v: Matrix,
        shape: [usize; 4],
    },
    /// Full-rank Tucker: an `O x C x w x h` core and four square factors.
    Tucker {
        core: DenseTensor,
        factors: Vec<Matrix>,
    },
    /// Tucker over `N` stacked, identically shaped layers: `N x O x C x w x h`
    /// core and five square factors.
    HolisticGroup {
        core: DenseTensor,
        factors: Vec<Matrix>,
    },
}

/// Layers bound to one [`WeightParam::HolisticGroup`]; `members[l]` is the
/// graph node that uses slice `l`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGroup {
    pub shape: [usize; 4],
    pub members: Vec<usize>,
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        contract!("weight shape {shape:?} has a zero extent");
    }
    Ok(())
}

/// Kaiming-style fan-in uniform bound, `sqrt(6 / (C w h))`.
pub fn kaiming_bound(shape: [usize; 4]) -> f64 {
    (6.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt()
}

fn draw_kaiming(rng: &mut ChaCha8Rng, shape: [usize; 4], out: &mut Vec<f64>) {
    let bound = kaiming_bound(shape);
    let n: usize = shape.iter().product();
    out.extend((0..n).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)));
}

/// Fan-in scaled uniform initialization `U(-b, b)`, `b = sqrt(6 / (C w h))`.
pub fn init_direct(shape: [usize; 4], seed: u64) -> Result<WeightParam> {
    check_shape(&shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    draw_kaiming(&mut rng, shape, &mut data);
    Ok(WeightParam::Direct {
        w: DenseTensor::from_parts(shape.to_vec(), data),
    })
}

/// Truncated SVD of a directly initialized weight, reshaped to `O x Cwh`.
/// `rank = None` keeps `min(O, Cwh)` components.
pub fn init_svd(shape: [usize; 4], rank: Option<usize>, seed: u64) -> Result<WeightParam> {
    let WeightParam::Direct { w } = init_direct(shape, seed)? else {
        unreachable!()
    };
    svd_param_from(&w, rank)
}

/// SVD parametrization of an explicit weight tensor.
pub fn svd_param_from(w: &DenseTensor, rank: Option<usize>) -> Result<WeightParam> {
    let shape = as_shape4(w.shape())?;
    let (o, n) = (shape[0], shape[1] * shape[2] * shape[3]);
    let full = o.min(n);
    let k = rank.unwrap_or(full);
    if k == 0 || k > full {
        contract!("svd rank {k} outside 1..={full} for shape {shape:?}");
    }
    let m = Matrix::from_parts(o, n, w.data().to_vec());
    let dec = svd(&m)?;
    let u = Matrix::from_fn(o, k, |r, c| dec.u.get(r, c) * dec.s[c]);
    let v = Matrix::from_fn(k, n, |r, c| dec.v.get(c, r));
    Ok(WeightParam::Svd { u, v, shape })
}

/// Full-rank HOSVD of a directly initialized weight.
pub fn init_tucker(shape: [usize; 4], seed: u64) -> Result<WeightParam> {
    let WeightParam::Direct { w } = init_direct(shape, seed)? else {
        unreachable!()
    };
    let (core, factors) = hosvd(&w)?;
    Ok(WeightParam::Tucker { core, factors })
}

/// Full-rank HOSVD over `N` directly initialized layers drawn in order from one
/// seeded stream (layer 0 equals `init_direct(shape, seed)`).
pub fn init_holistic(group_shape: [usize; 5], seed: u64) -> Result<WeightParam> {
    check_shape(&group_shape)?;
    let layer = [group_shape[1], group_shape[2], group_shape[3], group_shape[4]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    for _ in 0..group_shape[0] {
        draw_kaiming(&mut rng, layer, &mut data);
    }
    let w = DenseTensor::from_parts(group_shape.to_vec(), data);
    let (core, factors) = hosvd(&w)?;
    Ok(WeightParam::HolisticGroup { core, factors })
}

/// Higher-order SVD with square factors: factor `k` holds the left singular
/// vectors of `unfold(w, k)` completed to an orthogonal basis, and the core is
/// `w` contracted by every factor transpose.
pub fn hosvd(w: &DenseTensor) -> Result<(DenseTensor, Vec<Matrix>)> {
    let mut factors = Vec::with_capacity(w.order());
    for k in 0..w.order() {
        let dec = svd(&unfold(w, k)?)?;
        factors.push(orthonormal_completion(&dec.u)?);
    }
    let mut core = w.clone();
    for (k, f) in factors.iter().enumerate() {
        core = mode_product(&core, &f.transpose(), k)?;
    }
    Ok((core, factors))
}

fn as_shape4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[o, c, w, h] => Ok([o, c, w, h]),
        _ => contract!("expected an order-4 weight shape, got {shape:?}"),
    }
}

impl WeightParam {
    /// Shape of [`reconstruct`]'s output.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self {
            WeightParam::Direct { w } => w.shape().to_vec(),
            WeightParam::Svd { shape, .. } => shape.to_vec(),
            WeightParam::Tucker { factors, .. } | WeightParam::HolisticGroup { factors, .. } => {
                factors.iter().map(Matrix::rows).collect()
            }
        }
    }

    /// Number of stacked layers (1 for layer-wise variants).
    pub fn layer_count(&self) -> usize {
        match self {
            WeightParam::HolisticGroup { core, .. } => core.shape()[0],
            _ => 1,
        }
    }

    pub fn is_decomposed(&self) -> bool {
        !matches!(self, WeightParam::Direct { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            WeightParam::Direct { .. } => "direct",
            WeightParam::Svd { .. } => "svd",
            WeightParam::Tucker { .. } => "tucker",
            WeightParam::HolisticGroup { .. } => "holistic",
        }
    }

    /// Every factor as a flat slice, in a fixed order shared with [`Self::factors_mut`].
    pub fn factors(&self) -> Vec<&[f64]> {
        match self {
            WeightParam::Direct { w } => vec![w.data()],
            WeightParam::Svd { u, v, .. } => vec![u.data(), v.data()],
            WeightParam::Tucker { core, factors } | WeightParam::HolisticGroup { core, factors } => {
                std::iter::once(core.data())
                    .chain(factors.iter().map(Matrix::data))
                    .collect()
            }
        }
    }

    pub fn factors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            WeightParam::Direct { w } => vec![w.data_mut()],
            WeightParam::Svd { u, v, .. } => vec![u.data_mut(), v.data_mut()],
            WeightParam::Tucker { core, factors } | WeightParam::HolisticGroup { core, factors } => {
                std::iter::once(core.data_mut())
                    .chain(factors.iter_mut().map(Matrix::data_mut))
                    .collect()
            }
        }
    }

    /// Bytes held by the factors (f64 storage).
    pub fn param_bytes(&self) -> usize {
        self.factors().iter().map(|f| f.len() * 8).sum()
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> WeightParam {
        let mut z = self.clone();
        for f in z.factors_mut() {
            f.fill(0.0);
        }
        z
    }
}

/// Real-valued weights from the factors.
pub fn reconstruct(p: &WeightParam) -> Result<DenseTensor> {
    match p {
        WeightParam::Direct { w } => Ok(w.clone()),
        WeightParam::Svd { u, v, shape } => {
            let m = u.matmul(v)?;
            DenseTensor::new(shape.to_vec(), m.into_data())
        }
        WeightParam::Tucker { core, factors } | WeightParam::HolisticGroup { core, factors } => {
            tucker_reconstruct(core, factors)
        }
    }
}

/// Weights of layer `l` of a holistic group, `W'(l, :, :, :, :)`, computed
/// without the full group: row `l` of the mode-0 factor is applied first.
pub fn reconstruct_layer(p: &WeightParam, l: usize) -> Result<DenseTensor> {
    let WeightParam::HolisticGroup { core, factors } = p else {
        contract!("reconstruct_layer needs a holistic group, got {}", p.kind_name());
    };
    let n = factors[0].rows();
    if l >= n {
        contract!("layer {l} out of range for a group of {n}");
    }
    let mut t = mode_product(core, &factors[0].row_range(l, l + 1)?, 0)?;
    for (k, f) in factors.iter().enumerate().skip(1) {
        t = mode_product(&t, f, k)?;
    }
    let shape = t.shape()[1..].to_vec();
    t.reshape(shape)
}

/// Chain rule from `dC/dW` (shape of [`reconstruct`]'s output) to `dC/dTheta`
/// for every factor.
pub fn backward_to_factors(p: &WeightParam, grad_w: &DenseTensor) -> Result<WeightParam> {
    let expected = p.weight_shape();
    if grad_w.shape() != expected.as_slice() {
        contract!(
            "gradient shape {:?} does not match weight shape {expected:?}",
            grad_w.shape()
        );
    }
    match p {
        WeightParam::Direct { .. } => Ok(WeightParam::Direct { w: grad_w.clone() }),
        WeightParam::Svd { u, v, shape } => {
            let g = Matrix::from_parts(u.rows(), v.cols(), grad_w.data().to_vec());
            Ok(WeightParam::Svd {
                u: g.matmul(&v.transpose())?,
                v: u.transpose().matmul(&g)?,
                shape: *shape,
            })
        }
        WeightParam::Tucker { core, factors } => {
            let (core, factors) = tucker_adjoint(core, factors, grad_w)?;
            Ok(WeightParam::Tucker { core, factors })
        }
        WeightParam::HolisticGroup { core, factors } => {
            let (core, factors) = tucker_adjoint(core, factors, grad_w)?;
            Ok(WeightParam::HolisticGroup { core, factors })
        }
    }
}

/// Adjoint of `W = G x_0 U0 ... x_N UN`:
/// `dG = dW x_k Uk^T (all k)`, `dUk = unfold(dW, k) * unfold(G x_{j != k} Uj, k)^T`.
fn tucker_adjoint(
    core: &DenseTensor,
    factors: &[Matrix],
    grad: &DenseTensor,
) -> Result<(DenseTensor, Vec<Matrix>)> {
    let mut dcore = grad.clone();
    for (k, f) in factors.iter().enumerate() {
        dcore = mode_product(&dcore, &f.transpose(), k)?;
    }
    let mut dfactors = Vec::with_capacity(factors.len());
    for k in 0..factors.len() {
        let mut partial = core.clone();
        for (j, f) in factors.iter().enumerate() {
            if j != k {
                partial = mode_product(&partial, f, j)?;
            }
        }
        let g = unfold(grad, k)?;
        let p = unfold(&partial, k)?;
        dfactors.push(g.matmul(&p.transpose())?);
    }
    Ok((dcore, dfactors))
}

/// Groups binary layers by identical weight shape. Each group of two or more
/// becomes one holistic parametrization; singletons are returned separately and
/// fall back to layer-wise Tucker.
pub fn group_by_shape(layers: &[(usize, [usize; 4])]) -> (Vec<LayerGroup>, Vec<usize>) {
    let mut groups: Vec<LayerGroup> = Vec::new();
    for &(id, shape) in layers {
        match groups.iter_mut().find(|g| g.shape == shape) {
            Some(g) => g.members.push(id),
            None => groups.push(LayerGroup {
                shape,
                members: vec![id],
            }),
        }
    }
    let (multi, single): (Vec<_>, Vec<_>) = groups.into_iter().partition(|g| g.members.len() > 1);
    (multi, single.into_iter().map(|g| g.members[0]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: &DenseTensor, b: &DenseTensor) -> f64 {
        a.zip_map(b, |x, y| x - y).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    fn direct_w(shape: [usize; 4], seed: u64) -> DenseTensor {
        match init_direct(shape, seed).unwrap() {
            WeightParam::Direct { w } => w,
            _ => unreachable!(),
        }
    }

    #[test]
    fn direct_init_bound_and_determinism() {
        let w = direct_w([1, 1, 1, 1], 99);
        assert!(w.data()[0].abs() <= 6f64.sqrt());
        assert_eq!(direct_w([4, 3, 3, 3], 5), direct_w([4, 3, 3, 3], 5));
        assert_ne!(direct_w([4, 3, 3, 3], 5), direct_w([4, 3, 3, 3], 6));
    }

    #[test]
    fn direct_init_variance_matches_rule() {
        // 10^5 draws; U(-b, b) has variance b^2 / 3 = 2 / fan_in
        let shape = [1000, 4, 5, 5];
        let w = direct_w(shape, 3);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / 100.0;
        assert!((var - want).abs() / want < 0.1, "var {var} vs {want}");
    }

    #[test]
    fn svd_full_rank_is_exact() {
        let shape = [4, 2, 2, 2];
        let p = init_svd(shape, None, 1).unwrap();
        let w = direct_w(shape, 1);
        assert!(rel(&reconstruct(&p).unwrap(), &w) < 1e-10);
        assert!(init_svd(shape, Some(5), 1).is_err());
        assert!(init_svd(shape, Some(0), 1).is_err());
    }

    #[test]
    fn svd_rank1_exact_on_outer_product() {
        let w = DenseTensor::from_fn(&[3, 2, 1, 2], |i| {
            (i[0] as f64 + 1.0) * ((i[1] * 2 + i[3]) as f64 - 1.3)
        });
        let p = svd_param_from(&w, Some(1)).unwrap();
        assert!(rel(&reconstruct(&p).unwrap(), &w) < 1e-10);
    }

    #[test]
    fn svd_truncation_error_follows_eckart_young() {
        let shape = [4, 2, 2, 2];
        let w = direct_w(shape, 8);
        let p = svd_param_from(&w, Some(2)).unwrap();
        let err = reconstruct(&p)
            .unwrap()
            .zip_map(&w, |a, b| a - b)
            .unwrap()
            .frobenius_norm();
        let s = svd(&Matrix::from_parts(4, 8, w.data().to_vec())).unwrap().s;
        let tail = (s[2] * s[2] + s[3] * s[3]).sqrt();
        assert!((err - tail).abs() < 1e-9, "{err} vs {tail}");
    }

    #[test]
    fn reconstruct_rank1_svd_literal() {
        let p = WeightParam::Svd {
            u: Matrix::new(2, 1, vec![2.0, 0.0]).unwrap(),
            v: Matrix::new(1, 2, vec![1.0, -1.0]).unwrap(),
            shape: [2, 1, 1, 2],
        };
        assert_eq!(reconstruct(&p).unwrap().data(), &[2.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn tucker_init_reproduces_seed_weight() {
        let shape = [6, 4, 3, 3];
        let p = init_tucker(shape, 21).unwrap();
        let w = direct_w(shape, 21);
        assert!(rel(&reconstruct(&p).unwrap(), &w) < 1e-8);
        let WeightParam::Tucker { core, factors } = &p else { unreachable!() };
        assert!((core.frobenius_norm() - w.frobenius_norm()).abs() < 1e-9);
        for f in factors {
            assert_eq!(f.rows(), f.cols());
        }
    }

    #[test]
    fn tucker_unit_extent_factor_is_plus_minus_one() {
        let p = init_tucker([3, 2, 1, 1], 4).unwrap();
        let WeightParam::Tucker { factors, .. } = &p else { unreachable!() };
        for f in &factors[2..] {
            assert_eq!((f.rows(), f.cols()), (1, 1));
            assert_eq!(f.get(0, 0).abs(), 1.0);
        }
    }

    #[test]
    fn holistic_single_layer_matches_tucker() {
        let shape = [4, 3, 3, 3];
        let h = init_holistic([1, 4, 3, 3, 3], 12).unwrap();
        let t = init_tucker(shape, 12).unwrap();
        let a = reconstruct_layer(&h, 0).unwrap();
        let b = reconstruct(&t).unwrap();
        assert!(rel(&a, &b) < 1e-8);
    }

    #[test]
    fn holistic_norm_and_slices() {
        let h = init_holistic([3, 4, 2, 3, 3], 13).unwrap();
        let full = reconstruct(&h).unwrap();
        let WeightParam::HolisticGroup { core, .. } = &h else { unreachable!() };
        assert!((core.frobenius_norm() - full.frobenius_norm()).abs() < 1e-9);
        for l in 0..3 {
            let slice = reconstruct_layer(&h, l).unwrap();
            assert_eq!(slice, full.slice_first(l).unwrap());
            // layer l of the stacked init is the l-th layer of the seeded stream
        }
        assert!(reconstruct_layer(&h, 3).is_err());
        assert!(reconstruct_layer(&init_tucker([2, 2, 1, 1], 0).unwrap(), 0).is_err());
    }

    #[test]
    fn zeroed_row_gives_zero_layer() {
        let mut h = init_holistic([3, 2, 2, 3, 3], 14).unwrap();
        if let WeightParam::HolisticGroup { factors, .. } = &mut h {
            for c in 0..3 {
                factors[0].set(1, c, 0.0);
            }
        }
        let slice = reconstruct_layer(&h, 1).unwrap();
        assert!(slice.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn direct_and_zero_gradients() {
        let p = init_direct([2, 2, 3, 3], 0).unwrap();
        let g = DenseTensor::filled(&[2, 2, 3, 3], 0.5);
        assert_eq!(backward_to_factors(&p, &g).unwrap(), WeightParam::Direct { w: g.clone() });
        let s = init_svd([2, 2, 3, 3], None, 0).unwrap();
        let zero = backward_to_factors(&s, &DenseTensor::zeros(&[2, 2, 3, 3])).unwrap();
        assert!(zero.factors().iter().all(|f| f.iter().all(|&v| v == 0.0)));
        assert!(backward_to_factors(&s, &DenseTensor::zeros(&[2, 2, 3, 2])).is_err());
    }

    #[test]
    fn grouping_by_shape() {
        let layers = [
            (3, [32, 16, 3, 3]),
            (6, [32, 32, 3, 3]),
            (10, [32, 32, 3, 3]),
            (13, [32, 32, 3, 3]),
        ];
        let (groups, singles) = group_by_shape(&layers);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members, vec![6, 10, 13]);
        assert_eq!(singles, vec![3]);
    }
}
