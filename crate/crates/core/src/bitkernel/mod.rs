//! Bit-packed ±1 tensors and XNOR/popcount kernels for inference.

mod bench;
mod conv;
mod frozen;

pub use bench::{benchmark_kernel, naive_gemm_f32, BenchReport, BenchRow};
pub use conv::{binary_conv, pack_filters};
pub use frozen::{export_model, FrozenBinaryModel, FrozenLayer, FORMAT_VERSION, MAGIC};

use crate::error::{contract, Result};
use crate::tensor::DenseTensor;

/// Rows of ±1 values, one bit each (`+1 -> 1`, `-1 -> 0`), little-endian within
/// each `u64`. Every row starts on a word boundary; unused tail bits are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBinaryTensor {
    shape: Vec<usize>,
    row_bits: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

/// One packed row together with its valid-bit count.
#[derive(Clone, Copy, Debug)]
pub struct PackedRow<'a> {
    pub words: &'a [u64],
    pub bits: usize,
}

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

fn tail_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

fn pack_row(values: &[f64], out: &mut [u64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if v == 1.0 {
            out[i / 64] |= 1 << (i % 64);
        } else if v != -1.0 {
            contract!("cannot pack {v}: values must be -1 or +1");
        }
    }
    Ok(())
}

/// Packs the innermost axis of a ±1 tensor.
pub fn pack(t: &DenseTensor) -> Result<PackedBinaryTensor> {
    let row_bits = *t.shape().last().unwrap_or(&1);
    let rows = if row_bits == 0 { 0 } else { t.len() / row_bits };
    PackedBinaryTensor::from_rows(t.shape().to_vec(), rows, row_bits, t.data())
}

pub fn unpack(p: &PackedBinaryTensor) -> DenseTensor {
    let mut data = Vec::with_capacity(p.rows() * p.row_bits);
    for r in 0..p.rows() {
        let row = p.row(r);
        data.extend((0..p.row_bits).map(|i| if row.words[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 }));
    }
    DenseTensor::from_parts(p.shape.clone(), data)
}

impl PackedBinaryTensor {
    fn from_rows(shape: Vec<usize>, rows: usize, row_bits: usize, values: &[f64]) -> Result<Self> {
        let words_per_row = words_for(row_bits);
        let mut words = vec![0u64; rows * words_per_row];
        for r in 0..rows {
            pack_row(
                &values[r * row_bits..(r + 1) * row_bits],
                &mut words[r * words_per_row..(r + 1) * words_per_row],
            )?;
        }
        Ok(Self {
            shape,
            row_bits,
            words_per_row,
            words,
        })
    }

    /// Rebuilds from a dense bit stream (row `i` at bits `[i n, (i + 1) n)`).
    pub fn from_dense_bits(shape: Vec<usize>, row_bits: usize, stream: &[u64]) -> Result<Self> {
        let rows = if row_bits == 0 { 0 } else { shape.iter().product::<usize>() / row_bits };
        if stream.len() != words_for(rows * row_bits) {
            contract!("bit stream has {} words, expected {}", stream.len(), words_for(rows * row_bits));
        }
        let words_per_row = words_for(row_bits);
        let mut words = vec![0u64; rows * words_per_row];
        for r in 0..rows {
            for i in 0..row_bits {
                let bit = r * row_bits + i;
                if stream[bit / 64] >> (bit % 64) & 1 == 1 {
                    words[r * words_per_row + i / 64] |= 1 << (i % 64);
                }
            }
        }
        Ok(Self {
            shape,
            row_bits,
            words_per_row,
            words,
        })
    }

    /// Rows concatenated without padding; the tail of the last word is zero.
    pub fn dense_bits(&self) -> Vec<u64> {
        let total = self.rows() * self.row_bits;
        let mut out = vec![0u64; words_for(total)];
        for r in 0..self.rows() {
            let row = self.row(r);
            for i in 0..self.row_bits {
                if row.words[i / 64] >> (i % 64) & 1 == 1 {
                    let bit = r * self.row_bits + i;
                    out[bit / 64] |= 1 << (bit % 64);
                }
            }
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.words.len().checked_div(self.words_per_row).unwrap_or(0)
    }

    pub fn row_bits(&self) -> usize {
        self.row_bits
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Raw word access, for tests of tail hygiene.
    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    pub fn row(&self, r: usize) -> PackedRow<'_> {
        PackedRow {
            words: &self.words[r * self.words_per_row..(r + 1) * self.words_per_row],
            bits: self.row_bits,
        }
    }

    /// Clears any set bits beyond the valid count of each row.
    pub fn remask(&mut self) {
        if self.words_per_row == 0 {
            return;
        }
        let mask = tail_mask(self.row_bits);
        for last in self.words.iter_mut().skip(self.words_per_row - 1).step_by(self.words_per_row) {
            *last &= mask;
        }
    }
}

#[inline(always)]
fn mismatches_generic(a: &[u64], b: &[u64], bits: usize) -> u32 {
    let n = a.len();
    if n == 0 {
        return 0;
    }
    let mut count = 0;
    for i in 0..n - 1 {
        count += (a[i] ^ b[i]).count_ones();
    }
    count + ((a[n - 1] ^ b[n - 1]) & tail_mask(bits)).count_ones()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn mismatches_popcnt(a: &[u64], b: &[u64], bits: usize) -> u32 {
    mismatches_generic(a, b, bits)
}

fn has_popcnt() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("popcnt")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[inline]
fn mismatches(a: &[u64], b: &[u64], bits: usize, popcnt: bool) -> u32 {
    #[cfg(target_arch = "x86_64")]
    if popcnt {
        // SAFETY: only reached when the CPU reports the popcnt feature.
        return unsafe { mismatches_popcnt(a, b, bits) };
    }
    let _ = popcnt;
    mismatches_generic(a, b, bits)
}

/// `sum a_i b_i` over the ±1 values, as `n - 2 popcount(a xor b)`.
pub fn xnor_dot(a: PackedRow<'_>, b: PackedRow<'_>) -> Result<i64> {
    if a.bits != b.bits || a.words.len() != b.words.len() || a.words.len() != words_for(a.bits) {
        contract!("xnor_dot on rows of {} and {} bits", a.bits, b.bits);
    }
    Ok(a.bits as i64 - 2 * i64::from(mismatches(a.words, b.words, a.bits, has_popcnt())))
}

/// `C[i][j] = <row i of a, row j of b>` over ±1 values, row-major `a.rows() x b.rows()`.
pub fn xnor_gemm(a: &PackedBinaryTensor, b: &PackedBinaryTensor) -> Result<Vec<i64>> {
    if a.row_bits != b.row_bits {
        contract!("xnor_gemm inner dimensions differ: {} vs {}", a.row_bits, b.row_bits);
    }
    let popcnt = has_popcnt();
    let n = a.row_bits as i64;
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i).words;
        for j in 0..b.rows() {
            out.push(n - 2 * i64::from(mismatches(ra, b.row(j).words, a.row_bits, popcnt)));
        }
    }
    Ok(out)
}
