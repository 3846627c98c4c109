//! Dense 2-D cross-correlation through im2col + GEMM.

use crate::error::{contract, Result};
use crate::tensor::DenseTensor;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            contract!("degenerate convolution geometry {self:?}");
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            contract!("kernel {} larger than padded input {ph}x{pw}", self.kernel);
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// Entries per filter, `C k k`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn check_inputs(x: &DenseTensor, w: &DenseTensor, geom: &ConvGeometry) -> Result<(usize, usize, usize, usize, usize)> {
    let &[batch, c, h, wd] = x.shape() else {
        contract!("convolution input must be (B, C, H, W), got {:?}", x.shape());
    };
    if c != geom.in_channels {
        contract!("input has {c} channels, geometry expects {}", geom.in_channels);
    }
    if w.shape() != geom.weight_shape() {
        contract!("weight shape {:?} does not match geometry {:?}", w.shape(), geom.weight_shape());
    }
    let (oh, ow) = geom.output_hw(h, wd)?;
    Ok((batch, h, wd, oh, ow))
}

/// Receptive fields of one sample as a `(C k k) x (OH OW)` row-major matrix;
/// out-of-bounds taps read `pad_value`.
pub(crate) fn im2col(
    x: &[f64],
    geom: &ConvGeometry,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_value: f64,
    cols: &mut [f64],
) {
    let k = geom.kernel;
    let p = oh * ow;
    for c in 0..geom.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..((c * k + ky) * k + kx + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(pad_value);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            pad_value
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back to the input; padding taps are dropped.
fn col2im(
    cols: &[f64],
    geom: &ConvGeometry,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let k = geom.kernel;
    let p = oh * ow;
    for c in 0..geom.in_channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..((c * k + ky) * k + kx + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a * b` (or `+=` when `accumulate`), all row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every strided access, checked above in debug builds
    // and guaranteed by construction at every call site.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of `x (B, C, H, W)` with `w (O, C, k, k)`.
pub fn conv2d_forward(
    x: &DenseTensor,
    w: &DenseTensor,
    geom: &ConvGeometry,
    pad_value: f64,
) -> Result<DenseTensor> {
    let (batch, h, wd, oh, ow) = check_inputs(x, w, geom)?;
    let (o, ckk, p) = (geom.out_channels, geom.fan_in(), oh * ow);
    let in_len = geom.in_channels * h * wd;
    let mut cols = vec![0.0; ckk * p];
    let mut out = vec![0.0; batch * o * p];
    for b in 0..batch {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], geom, h, wd, oh, ow, pad_value, &mut cols);
        gemm(o, ckk, p, w.data(), (ckk, 1), &cols, (p, 1), &mut out[b * o * p..(b + 1) * o * p], false);
    }
    Ok(DenseTensor::from_parts(vec![batch, o, oh, ow], out))
}

/// Gradients of [`conv2d_forward`] with respect to the input (if requested) and the weight.
pub fn conv2d_backward(
    x: &DenseTensor,
    w: &DenseTensor,
    grad_out: &DenseTensor,
    geom: &ConvGeometry,
    pad_value: f64,
    need_input_grad: bool,
) -> Result<(Option<DenseTensor>, DenseTensor)> {
    let (batch, h, wd, oh, ow) = check_inputs(x, w, geom)?;
    let (o, ckk, p) = (geom.out_channels, geom.fan_in(), oh * ow);
    if grad_out.shape() != [batch, o, oh, ow] {
        contract!("output gradient shape {:?} does not match ({batch}, {o}, {oh}, {ow})", grad_out.shape());
    }
    let in_len = geom.in_channels * h * wd;
    let mut cols = vec![0.0; ckk * p];
    let mut dcols = vec![0.0; ckk * p];
    let mut dw = vec![0.0; o * ckk];
    let mut dx = need_input_grad.then(|| vec![0.0; batch * in_len]);
    for b in 0..batch {
        let g = &grad_out.data()[b * o * p..(b + 1) * o * p];
        im2col(&x.data()[b * in_len..(b + 1) * in_len], geom, h, wd, oh, ow, pad_value, &mut cols);
        // dW += G (O x P) * cols^T (P x Ckk)
        gemm(o, p, ckk, g, (p, 1), &cols, (1, p), &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T (Ckk x O) * G (O x P)
            gemm(ckk, o, p, w.data(), (1, ckk), g, (p, 1), &mut dcols, false);
            col2im(&dcols, geom, h, wd, oh, ow, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    Ok((
        dx.map(|d| DenseTensor::from_parts(x.shape().to_vec(), d)),
        DenseTensor::from_parts(w.shape().to_vec(), dw),
    ))
}
