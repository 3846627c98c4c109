use super::{DenseTensor, Matrix};
use crate::error::{contract, Result};

/// Splits `shape` around `mode` into (prod of extents before, extent, prod after).
fn split_at_mode(shape: &[usize], mode: usize) -> (usize, usize, usize) {
    let outer = shape[..mode].iter().product();
    let inner = shape[mode + 1..].iter().product();
    (outer, shape[mode], inner)
}

/// Mode-`mode` unfolding: a `D_mode x prod(D_j, j != mode)` matrix whose columns
/// enumerate the remaining indices in their original row-major order.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<Matrix> {
    if mode >= t.order() {
        contract!("mode {mode} out of range for an order-{} tensor", t.order());
    }
    let (outer, extent, inner) = split_at_mode(t.shape(), mode);
    let cols = outer * inner;
    let src = t.data();
    let mut data = vec![0.0; extent * cols];
    for o in 0..outer {
        for r in 0..extent {
            let from = &src[(o * extent + r) * inner..(o * extent + r + 1) * inner];
            data[r * cols + o * inner..r * cols + (o + 1) * inner].copy_from_slice(from);
        }
    }
    Ok(Matrix::from_parts(extent, cols, data))
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    if mode >= shape.len() {
        contract!("mode {mode} out of range for shape {shape:?}");
    }
    if shape.contains(&0) {
        contract!("shape {shape:?} has a zero extent");
    }
    let (outer, extent, inner) = split_at_mode(shape, mode);
    if m.rows() != extent || m.cols() != outer * inner {
        contract!(
            "a {}x{} matrix cannot fold into {shape:?} at mode {mode}",
            m.rows(),
            m.cols()
        );
    }
    let cols = m.cols();
    let src = m.data();
    let mut data = vec![0.0; extent * cols];
    for o in 0..outer {
        for r in 0..extent {
            data[(o * extent + r) * inner..(o * extent + r + 1) * inner]
                .copy_from_slice(&src[r * cols + o * inner..r * cols + (o + 1) * inner]);
        }
    }
    Ok(DenseTensor::from_parts(shape.to_vec(), data))
}

/// n-mode product: `out(.., r, ..) = sum_k m(r, k) * t(.., k, ..)`.
///
/// Every output element accumulates over `k` in ascending order, independently
/// of the other extents, so slicing before or after the product gives the same bits.
pub fn mode_product(t: &DenseTensor, m: &Matrix, mode: usize) -> Result<DenseTensor> {
    if mode >= t.order() {
        contract!("mode {mode} out of range for an order-{} tensor", t.order());
    }
    let (outer, extent, inner) = split_at_mode(t.shape(), mode);
    if m.cols() != extent {
        contract!(
            "matrix with {} columns cannot contract mode {mode} of extent {extent}",
            m.cols()
        );
    }
    let rows = m.rows();
    let src = t.data();
    let mut out = vec![0.0; outer * rows * inner];
    for o in 0..outer {
        for r in 0..rows {
            let dst = &mut out[(o * rows + r) * inner..(o * rows + r + 1) * inner];
            for (k, &a) in m.row(r).iter().enumerate() {
                let from = &src[(o * extent + k) * inner..(o * extent + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(from) {
                    *d += a * s;
                }
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape[mode] = rows;
    Ok(DenseTensor::from_parts(shape, out))
}

/// `core x_0 U0 x_1 U1 ... x_{N-1} U_{N-1}`, applied in mode order.
pub fn tucker_reconstruct(core: &DenseTensor, factors: &[Matrix]) -> Result<DenseTensor> {
    if factors.len() != core.order() {
        contract!(
            "{} factors given for an order-{} core",
            factors.len(),
            core.order()
        );
    }
    for (k, f) in factors.iter().enumerate() {
        if f.cols() != core.shape()[k] {
            contract!(
                "factor {k} has {} columns but core extent {k} is {}",
                f.cols(),
                core.shape()[k]
            );
        }
    }
    let mut t = core.clone();
    for (k, f) in factors.iter().enumerate() {
        t = mode_product(&t, f, k)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
        DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Index-formula oracle: t(i0,i1,i2) sits at row i1, column i0*D2 + i2.
    fn unfold_mode1_oracle(t: &DenseTensor) -> Matrix {
        let s = t.shape();
        let mut m = Matrix::zeros(s[1], s[0] * s[2]);
        for i0 in 0..s[0] {
            for i1 in 0..s[1] {
                for i2 in 0..s[2] {
                    m.set(i1, i0 * s[2] + i2, t.get(&[i0, i1, i2]));
                }
            }
        }
        m
    }

    #[test]
    fn unfold_of_matrix_mode0_is_identity() {
        let t = DenseTensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let m = unfold(&t, 0).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m.data(), t.data());
    }

    #[test]
    fn unfold_mode1_matches_index_oracle() {
        let t = DenseTensor::from_fn(&[2, 3, 2], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let m = unfold(&t, 1).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 4));
        assert_eq!(m, unfold_mode1_oracle(&t));
        // row 1 = t(0,1,0), t(0,1,1), t(1,1,0), t(1,1,1)
        assert_eq!(m.row(1), &[10., 11., 110., 111.]);
    }

    #[test]
    fn fold_inverts_the_oracle_mapping() {
        let m = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 1.0);
        let t = fold(&m, 1, &[2, 3, 2]).unwrap();
        for i0 in 0..2 {
            for i1 in 0..3 {
                for i2 in 0..2 {
                    assert_eq!(t.get(&[i0, i1, i2]), m.get(i1, i0 * 2 + i2));
                }
            }
        }
    }

    #[test]
    fn fold_scalar() {
        let m = Matrix::new(1, 1, vec![4.25]).unwrap();
        let t = fold(&m, 0, &[1, 1]).unwrap();
        assert_eq!(t.shape(), &[1, 1]);
        assert_eq!(t.data(), &[4.25]);
    }

    #[test]
    fn fold_unfold_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = random_tensor(&[3, 4, 5], &mut rng);
            for mode in 0..3 {
                let back = fold(&unfold(&t, mode).unwrap(), mode, t.shape()).unwrap();
                assert_eq!(back, t);
            }
        }
    }

    #[test]
    fn unfold_rejects_bad_mode() {
        let t = DenseTensor::zeros(&[2, 2]);
        assert!(unfold(&t, 2).is_err());
        assert!(fold(&Matrix::zeros(2, 3), 0, &[2, 2]).is_err());
    }

    #[test]
    fn mode_product_identity_and_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&[3, 4, 2], &mut rng);
        for mode in 0..3 {
            let id = Matrix::identity(t.shape()[mode]);
            assert_eq!(mode_product(&t, &id, mode).unwrap(), t);
        }
        let ones = DenseTensor::filled(&[2, 2, 2], 1.0);
        let m = Matrix::new(2, 2, vec![1., 1., 1., 1.]).unwrap();
        let out = mode_product(&ones, &m, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn mode_product_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&[3, 4, 2], &mut rng);
        let m = random_matrix(5, 4, &mut rng);
        let out = mode_product(&t, &m, 1).unwrap();
        assert_eq!(out.shape(), &[3, 5, 2]);
        for i0 in 0..3 {
            for r in 0..5 {
                for i2 in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += m.get(r, k) * t.get(&[i0, k, i2]);
                    }
                    assert!((out.get(&[i0, r, i2]) - acc).abs() < 1e-14);
                }
            }
        }
        assert!(mode_product(&t, &random_matrix(2, 3, &mut rng), 1).is_err());
    }

    #[test]
    fn mode_products_commute_across_distinct_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tensor(&[3, 4, 5], &mut rng);
        let a = random_matrix(2, 3, &mut rng);
        let b = random_matrix(6, 5, &mut rng);
        let ab = mode_product(&mode_product(&t, &a, 0).unwrap(), &b, 2).unwrap();
        let ba = mode_product(&mode_product(&t, &b, 2).unwrap(), &a, 0).unwrap();
        assert_eq!(ab.shape(), ba.shape());
        let diff = ab.zip_map(&ba, |x, y| x - y).unwrap().frobenius_norm();
        assert!(diff / ab.frobenius_norm() < 1e-12);
    }

    #[test]
    fn tucker_identity_factors_return_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let core = random_tensor(&[2, 3, 2, 2], &mut rng);
        let ids: Vec<_> = core.shape().iter().map(|&d| Matrix::identity(d)).collect();
        assert_eq!(tucker_reconstruct(&core, &ids).unwrap(), core);
    }

    #[test]
    fn tucker_order2_is_a_core_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let core = random_matrix(3, 2, &mut rng);
        let a = random_matrix(4, 3, &mut rng);
        let b = random_matrix(5, 2, &mut rng);
        let got = tucker_reconstruct(&core.clone().into_tensor(), &[a.clone(), b.clone()]).unwrap();
        let want = a.matmul(&core).unwrap().matmul(&b.transpose()).unwrap();
        assert_eq!(got.shape(), &[4, 5]);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-13);
        }
    }

    /// Gauss-Jordan inverse for the contraction oracle.
    fn invert(m: &Matrix) -> Matrix {
        let n = m.rows();
        let mut a = m.clone();
        let mut inv = Matrix::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs()))
                .unwrap();
            for c in 0..n {
                let (x, y) = (a.get(col, c), a.get(pivot, c));
                a.set(col, c, y);
                a.set(pivot, c, x);
                let (x, y) = (inv.get(col, c), inv.get(pivot, c));
                inv.set(col, c, y);
                inv.set(pivot, c, x);
            }
            let p = a.get(col, col);
            for c in 0..n {
                a.set(col, c, a.get(col, c) / p);
                inv.set(col, c, inv.get(col, c) / p);
            }
            for r in 0..n {
                if r != col {
                    let f = a.get(r, col);
                    for c in 0..n {
                        a.set(r, c, a.get(r, c) - f * a.get(col, c));
                        inv.set(r, c, inv.get(r, c) - f * inv.get(col, c));
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn tucker_inverse_contraction_recovers_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let core = random_tensor(&[2, 3, 2, 2], &mut rng);
        let factors: Vec<_> = core
            .shape()
            .iter()
            .map(|&d| {
                // diagonally dominant, hence full rank
                let mut m = random_matrix(d, d, &mut rng);
                for i in 0..d {
                    m.set(i, i, m.get(i, i) + 3.0);
                }
                m
            })
            .collect();
        let w = tucker_reconstruct(&core, &factors).unwrap();
        let inverses: Vec<_> = factors.iter().map(invert).collect();
        let back = tucker_reconstruct(&w, &inverses).unwrap();
        let err = back.zip_map(&core, |a, b| a - b).unwrap().frobenius_norm();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn tucker_rejects_mismatched_factors() {
        let core = DenseTensor::zeros(&[2, 2]);
        assert!(tucker_reconstruct(&core, &[Matrix::identity(2)]).is_err());
        assert!(tucker_reconstruct(&core, &[Matrix::identity(2), Matrix::identity(3)]).is_err());
    }
}
