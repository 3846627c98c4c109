use super::Matrix;
use crate::error::{contract, Result};

/// Thin SVD `m = u * diag(s) * v^T` with `k = min(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// `rows x k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `cols x k`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let us = Matrix::from_fn(self.u.rows(), k, |r, c| self.u.get(r, c) * self.s[c]);
        us.matmul(&self.v.transpose()).expect("consistent svd factors")
    }
}

const MAX_SWEEPS: usize = 80;

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Signs are pinned: the largest-magnitude entry of every column of `u` is positive.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if let Some(v) = m.data().iter().find(|v| !v.is_finite()) {
        contract!("svd input contains non-finite value {v}");
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Jacobi on a matrix with `rows >= cols`; columns are rotated until mutually orthogonal.
fn jacobi_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, n) = (m.rows(), m.cols());
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let smax = norms[order[0]];
    let tiny = smax * f64::EPSILON * (rows.max(n) as f64);
    let mut s = Vec::with_capacity(n);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut vcols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut rank = 0;
    for &j in &order {
        let sigma = norms[j];
        if sigma > tiny && sigma > 0.0 {
            ucols.push(a[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
            rank += 1;
        } else {
            s.push(0.0);
        }
        vcols.push(v[j].clone());
    }
    // left vectors of (numerically) zero singular values: any orthonormal completion
    let u_partial = columns_to_matrix(rows, &ucols);
    let u = match u_partial {
        Some(u) => extend_orthonormal(&u, n)?,
        None => Matrix::identity(rows).first_columns(n)?,
    };
    debug_assert!(rank <= n);

    let mut out = SvdResult {
        u,
        s,
        v: columns_to_matrix(n, &vcols).expect("n >= 1"),
    };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn columns_to_matrix(rows: usize, cols: &[Vec<f64>]) -> Option<Matrix> {
    if cols.is_empty() {
        return None;
    }
    Some(Matrix::from_fn(rows, cols.len(), |r, c| cols[c][r]))
}

fn fix_signs(out: &mut SvdResult) {
    for c in 0..out.s.len() {
        let col = out.u.column(c);
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            for r in 0..out.u.rows() {
                out.u.set(r, c, -out.u.get(r, c));
            }
            for r in 0..out.v.rows() {
                out.v.set(r, c, -out.v.get(r, c));
            }
        }
    }
}

/// Extends a matrix with orthonormal columns to a square orthogonal matrix,
/// keeping the given columns first. Extra columns come from Gram-Schmidt on the
/// standard basis (two passes).
pub fn orthonormal_completion(u: &Matrix) -> Result<Matrix> {
    extend_orthonormal(u, u.rows())
}

/// Extends `u` (orthonormal columns) to `target` orthonormal columns.
fn extend_orthonormal(u: &Matrix, target: usize) -> Result<Matrix> {
    let (n, k) = (u.rows(), u.cols());
    if k > target || target > n {
        contract!("cannot complete {k} columns to {target} in dimension {n}");
    }
    let mut basis: Vec<Vec<f64>> = (0..k).map(|c| u.column(c)).collect();
    let mut e = 0;
    while basis.len() < target && e < n {
        let mut cand: Vec<f64> = (0..n).map(|r| if r == e { 1.0 } else { 0.0 }).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = b.iter().zip(&cand).map(|(x, y)| x * y).sum();
                for (c, x) in cand.iter_mut().zip(b) {
                    *c -= d * x;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(cand.into_iter().map(|x| x / norm).collect());
        }
        e += 1;
    }
    if basis.len() != target {
        contract!("input columns are not linearly independent");
    }
    Ok(Matrix::from_fn(n, target, |r, c| basis[c][r]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orthonormality_defect(m: &Matrix) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        let id = Matrix::identity(g.rows());
        g.data()
            .iter()
            .zip(id.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn rel_residual(m: &Matrix, r: &SvdResult) -> f64 {
        let rec = r.reconstruct();
        let diff: f64 = rec
            .data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        diff / m.frobenius_norm()
    }

    #[test]
    fn diagonal_matrix() {
        let r = svd(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(r.s, vec![3.0, 1.0]);
    }

    #[test]
    fn zero_matrix_has_zero_singular_values() {
        let r = svd(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0]);
        assert!(orthonormality_defect(&r.u) < 1e-12);
        assert!(orthonormality_defect(&r.v) < 1e-12);
    }

    #[test]
    fn random_wide_and_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(rows, cols) in &[(4, 6), (6, 4), (5, 5), (1, 7), (7, 1), (32, 288)] {
            let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
            let r = svd(&m).unwrap();
            assert!(rel_residual(&m, &r) < 1e-10, "{rows}x{cols}");
            assert!(orthonormality_defect(&r.u) < 1e-8);
            assert!(orthonormality_defect(&r.v) < 1e-8);
            assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(r.s.iter().all(|&s| s >= 0.0));
            for c in 0..r.s.len() {
                let col = r.u.column(c);
                let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs()));
                assert!(pivot.unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn rank_deficient_input_keeps_orthonormal_u() {
        // rank-1 outer product
        let m = Matrix::from_fn(4, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
        let r = svd(&m).unwrap();
        assert!(r.s[1] < 1e-12 && r.s[2] < 1e-12);
        assert!(orthonormality_defect(&r.u) < 1e-8);
        assert!(rel_residual(&m, &r) < 1e-10);
    }

    #[test]
    fn rejects_non_finite() {
        let m = Matrix::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(svd(&m).is_err());
    }

    #[test]
    fn completion_is_orthogonal() {
        let u = Matrix::new(3, 1, vec![0.6, 0.8, 0.0]).unwrap();
        let q = orthonormal_completion(&u).unwrap();
        assert_eq!(q.column(0), vec![0.6, 0.8, 0.0]);
        assert!(orthonormality_defect(&q) < 1e-12);
    }
}
