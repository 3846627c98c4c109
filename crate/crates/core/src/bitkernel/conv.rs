use super::{words_for, PackedBinaryTensor};
use crate::error::{contract, Result};
use crate::tensor::DenseTensor;
use crate::train::ConvGeometry;

/// Packs `(O, C, kh, kw)` ±1 filters as `O` rows of `C kh kw` bits.
pub fn pack_filters(b: &DenseTensor) -> Result<PackedBinaryTensor> {
    if b.order() != 4 {
        contract!("filters must be order 4, got {:?}", b.shape());
    }
    let rows = b.shape()[0];
    PackedBinaryTensor::from_rows(b.shape().to_vec(), rows, b.len() / rows.max(1), b.data())
}

/// XNOR convolution of ±1 activations `(B, C, H, W)` with packed filters,
/// output channel `o` scaled by `alpha[o]`. Padding reads as -1.
pub fn binary_conv(
    x: &DenseTensor,
    weights: &PackedBinaryTensor,
    alpha: &[f32],
    geometry: &ConvGeometry,
) -> Result<DenseTensor> {
    let g = geometry;
    if x.order() != 4 || x.shape()[1] != g.in_channels {
        contract!("input {:?} does not match {} input channels", x.shape(), g.in_channels);
    }
    let n = g.in_channels * g.kernel * g.kernel;
    if weights.rows() != g.out_channels || weights.row_bits() != n {
        contract!(
            "packed filters ({} x {} bits) do not match geometry {}x{}",
            weights.rows(),
            weights.row_bits(),
            g.out_channels,
            n
        );
    }
    if alpha.len() != g.out_channels {
        contract!("{} scaling factors for {} output channels", alpha.len(), g.out_channels);
    }
    if let Some(v) = x.data().iter().find(|&&v| v != 1.0 && v != -1.0) {
        contract!("binary_conv input must be ±1, found {v}");
    }
    let (batch, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (oh, ow) = g.output_hw(h, w)?;
    let wpr = words_for(n);
    let mut patch = vec![0u64; wpr];
    let mut out = vec![0.0; batch * g.out_channels * oh * ow];
    let xd = x.data();
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                patch.iter_mut().for_each(|p| *p = 0);
                let mut bit = 0;
                for c in 0..g.in_channels {
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            if inside && xd[((b * g.in_channels + c) * h + iy as usize) * w + ix as usize] > 0.0 {
                                patch[bit / 64] |= 1 << (bit % 64);
                            }
                            bit += 1;
                        }
                    }
                }
                let row = super::PackedRow { words: &patch, bits: n };
                for o in 0..g.out_channels {
                    let dot = super::xnor_dot(row, weights.row(o))?;
                    out[((b * g.out_channels + o) * oh + oy) * ow + ox] = dot as f64 * f64::from(alpha[o]);
                }
            }
        }
    }
    Ok(DenseTensor::from_parts(vec![batch, g.out_channels, oh, ow], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = DenseTensor::new(vec![1, 1, 2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let w = pack_filters(&DenseTensor::filled(&[1, 1, 1, 1], 1.0)).unwrap();
        let y = binary_conv(&x, &w, &[1.0], &ConvGeometry::new(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_alpha_silences_a_channel() {
        let x = DenseTensor::filled(&[1, 2, 3, 3], 1.0);
        let w = pack_filters(&DenseTensor::filled(&[2, 2, 3, 3], 1.0)).unwrap();
        let y = binary_conv(&x, &w, &[0.0, 1.0], &ConvGeometry::new(2, 2, 3, 1, 1)).unwrap();
        assert!(y.data()[..9].iter().all(|&v| v == 0.0));
        // centre sees 18 agreeing bits; a corner sees 8 and 10 padded (-1) mismatches
        assert_eq!(y.data()[9 + 4], 18.0);
        assert_eq!(y.data()[9], -2.0);
    }

    #[test]
    fn rejects_real_inputs() {
        let x = DenseTensor::filled(&[1, 1, 2, 2], 0.5);
        let w = pack_filters(&DenseTensor::filled(&[1, 1, 1, 1], 1.0)).unwrap();
        assert!(binary_conv(&x, &w, &[1.0], &ConvGeometry::new(1, 1, 1, 1, 0)).is_err());
    }
}
