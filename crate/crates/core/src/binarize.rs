//! Sign binarization, per-filter scaling factors and straight-through gradients.

use crate::error::{contract, Result};
use crate::tensor::DenseTensor;

/// How the per-output-channel scale of a binary layer is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleMode {
    /// `alpha_i = mean |W(i, :, :, :)|`, recomputed every step.
    AnalyticPerFilter,
    /// `alpha` is a trainable vector, initialised to the analytic value.
    LearnedPerFilter,
}

impl ScaleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScaleMode::AnalyticPerFilter => "analytic",
            ScaleMode::LearnedPerFilter => "learned",
        }
    }
}

/// Binarized weights `b` in {-1, +1} and one scale per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledBinaryWeights {
    pub b: DenseTensor,
    pub alpha: Vec<f64>,
}

impl ScaledBinaryWeights {
    /// `alpha_i * b(i, ...)`, the weight the convolution actually sees.
    pub fn effective(&self) -> DenseTensor {
        broadcast_scale(&self.b, &self.alpha)
    }
}

/// `sign(x) = -1 if x <= 0, +1 otherwise`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn sign_binarize(w: &DenseTensor) -> Result<DenseTensor> {
    if let Some(v) = w.data().iter().find(|v| !v.is_finite()) {
        contract!("cannot binarize non-finite value {v}");
    }
    Ok(w.map(sign))
}

/// Activations use the same rule; there is no input-side scaling.
pub fn binarize_activations(x: &DenseTensor) -> Result<DenseTensor> {
    sign_binarize(x)
}

fn filter_len(w: &DenseTensor) -> Result<usize> {
    if w.order() < 2 {
        contract!("per-filter operations need order >= 2, got shape {:?}", w.shape());
    }
    Ok(w.len() / w.shape()[0])
}

/// Mean absolute value of each filter (leading index).
pub fn analytic_alpha(w: &DenseTensor) -> Result<Vec<f64>> {
    let n = filter_len(w)?;
    Ok(w.data()
        .chunks(n)
        .map(|f| f.iter().map(|v| v.abs()).sum::<f64>() / n as f64)
        .collect())
}

/// Binarizes `w` and attaches scales. `learned_alpha` must be given exactly in
/// learned mode.
pub fn scale_binary(
    w: &DenseTensor,
    mode: ScaleMode,
    learned_alpha: Option<&[f64]>,
) -> Result<ScaledBinaryWeights> {
    let b = sign_binarize(w)?;
    let alpha = match (mode, learned_alpha) {
        (ScaleMode::AnalyticPerFilter, None) => analytic_alpha(w)?,
        (ScaleMode::LearnedPerFilter, Some(a)) => {
            if a.len() != w.shape()[0] {
                contract!("{} learned scales given for {} filters", a.len(), w.shape()[0]);
            }
            a.to_vec()
        }
        (ScaleMode::AnalyticPerFilter, Some(_)) => {
            contract!("analytic scaling takes no learned alpha")
        }
        (ScaleMode::LearnedPerFilter, None) => contract!("learned scaling requires alpha"),
    };
    Ok(ScaledBinaryWeights { b, alpha })
}

/// `1{|x| <= 1}`, the clipped straight-through mask (boundary inclusive).
#[inline]
pub fn ste_mask(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

pub fn ste_backward(grad_out: &DenseTensor, pre_binarization: &DenseTensor) -> Result<DenseTensor> {
    grad_out.zip_map(pre_binarization, |g, x| g * ste_mask(x))
}

/// `dC/dalpha_i = sum over filter i of grad (.) b`.
pub fn alpha_gradient(grad_w_effective: &DenseTensor, b: &DenseTensor) -> Result<Vec<f64>> {
    if grad_w_effective.shape() != b.shape() {
        contract!(
            "shape mismatch: {:?} vs {:?}",
            grad_w_effective.shape(),
            b.shape()
        );
    }
    let n = filter_len(b)?;
    Ok(grad_w_effective
        .data()
        .chunks(n)
        .zip(b.data().chunks(n))
        .map(|(g, s)| g.iter().zip(s).map(|(x, y)| x * y).sum())
        .collect())
}

/// Multiplies filter `i` of `t` by `scale[i]`.
pub fn broadcast_scale(t: &DenseTensor, scale: &[f64]) -> DenseTensor {
    let n = t.len() / t.shape()[0];
    let mut out = t.clone();
    for (f, &a) in out.data_mut().chunks_mut(n).zip(scale) {
        for v in f {
            *v *= a;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> DenseTensor {
        DenseTensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn sign_rule() {
        assert_eq!(sign(0.0), -1.0);
        assert_eq!(sign(-0.0), -1.0);
        let b = sign_binarize(&t(&[3], &[-3.2, 0.0, 4.1])).unwrap();
        assert_eq!(b.data(), &[-1.0, -1.0, 1.0]);
        assert_eq!(sign_binarize(&b).unwrap(), b);
        let a = binarize_activations(&t(&[3], &[-3.2, 0.0, 4.1])).unwrap();
        assert_eq!(a, b);
        assert_eq!(binarize_activations(&a).unwrap(), a);
        assert_eq!(binarize_activations(&t(&[1], &[0.0])).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let bad = DenseTensor::zeros(&[2]).map(|_| f64::INFINITY);
        assert!(sign_binarize(&bad).is_err());
    }

    #[test]
    fn analytic_alpha_values() {
        let w = t(&[1, 4, 1, 1], &[1.0, -1.0, 2.0, -2.0]);
        assert_eq!(analytic_alpha(&w).unwrap(), vec![1.5]);
        assert_eq!(analytic_alpha(&DenseTensor::zeros(&[2, 1, 2, 2])).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn scale_binary_modes() {
        let w = t(&[1, 4, 1, 1], &[1.0, -1.0, 2.0, -2.0]);
        let s = scale_binary(&w, ScaleMode::AnalyticPerFilter, None).unwrap();
        assert_eq!(s.b.data(), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(s.alpha, vec![1.5]);
        let l = scale_binary(&w, ScaleMode::LearnedPerFilter, Some(&[-0.5])).unwrap();
        assert_eq!(l.effective().data(), &[-0.5, 0.5, -0.5, 0.5]);
        assert!(scale_binary(&w, ScaleMode::LearnedPerFilter, None).is_err());
        assert!(scale_binary(&w, ScaleMode::LearnedPerFilter, Some(&[1.0, 2.0])).is_err());
        assert!(scale_binary(&w, ScaleMode::AnalyticPerFilter, Some(&[1.0])).is_err());
    }

    #[test]
    fn ste_clip_region() {
        let g = t(&[3], &[1.0, 1.0, 1.0]);
        let x = t(&[3], &[0.5, 2.0, 1.0]);
        assert_eq!(ste_backward(&g, &x).unwrap().data(), &[1.0, 0.0, 1.0]);
        assert!(ste_backward(&g, &t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn alpha_gradient_cases() {
        let b = t(&[1, 4, 1, 1], &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(alpha_gradient(&b, &b).unwrap(), vec![4.0]);
        assert_eq!(
            alpha_gradient(&DenseTensor::zeros(&[1, 4, 1, 1]), &b).unwrap(),
            vec![0.0]
        );
    }
}
