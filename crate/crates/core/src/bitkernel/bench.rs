use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{xnor_gemm, PackedBinaryTensor};
use crate::error::Result;

/// Timing of one inner dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub inner: usize,
    pub rows: usize,
    pub cols: usize,
    /// Multiply-accumulates per second.
    pub xnor_ops_per_sec: f64,
    pub float_ops_per_sec: f64,
    pub ratio: f64,
    /// Both paths produced identical results.
    pub agree: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>5} {:>5} {:>14} {:>14} {:>8} {:>6}\n",
            "K", "M", "N", "xnor MAC/s", "f32 MAC/s", "ratio", "agree"
        );
        for r in &self.rows {
            s += &format!(
                "{:>6} {:>5} {:>5} {:>14.3e} {:>14.3e} {:>8.2} {:>6}\n",
                r.inner, r.rows, r.cols, r.xnor_ops_per_sec, r.float_ops_per_sec, r.ratio, r.agree
            );
        }
        s
    }
}

/// Textbook triple loop, `a` is `m x k` and `b` is `k x n`, both row-major.
pub fn naive_gemm_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let r = std::hint::black_box(f());
        best = best.min(t.elapsed().as_secs_f64());
        out = Some(r);
    }
    (best.max(1e-9), out.expect("at least one repeat"))
}

/// Single-threaded `m x k` by `k x n` products of random ±1 matrices, packed
/// XNOR/popcount against a naive `f32` loop. Reports the best of `repeats`.
pub fn benchmark_kernel(inner: &[usize], m: usize, n: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(inner.len());
    for &k in inner {
        let a: Vec<f64> = (0..m * k).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        // b^T, so both operands pack along k
        let bt: Vec<f64> = (0..n * k).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let pa = PackedBinaryTensor::from_rows(vec![m, k], m, k, &a)?;
        let pb = PackedBinaryTensor::from_rows(vec![n, k], n, k, &bt)?;
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let mut bf = vec![0.0f32; k * n];
        for j in 0..n {
            for p in 0..k {
                bf[p * n + j] = bt[j * k + p] as f32;
            }
        }
        let (tx, cx) = best_of(repeats, || xnor_gemm(&pa, &pb));
        let cx = cx?;
        let (tf, cf) = best_of(repeats, || naive_gemm_f32(&af, &bf, m, k, n));
        let macs = (m * n * k) as f64;
        rows.push(BenchRow {
            inner: k,
            rows: m,
            cols: n,
            xnor_ops_per_sec: macs / tx,
            float_ops_per_sec: macs / tf,
            ratio: tf / tx,
            agree: cx.iter().zip(&cf).all(|(&x, &f)| x as f32 == f),
        });
    }
    Ok(BenchReport { rows })
}
