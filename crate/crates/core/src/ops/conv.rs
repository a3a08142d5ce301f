//! 2-D cross-correlation via im2col lowering.
//!
//! Forward and both backward products are per-sample GEMMs with a fixed
//! summation order, so results are reproducible run to run. The batch loop is
//! sequential and `dW` accumulates sample by sample in index order.

use crate::error::{Error, Result};
use crate::tensor::{dims4, Elem, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (batch, in_ch, in_h, in_w) = dims4(x_shape, "conv2d")?;
    let (out_ch, w_in_ch, kh, kw) = dims4(w_shape, "conv2d")?;
    if kh != kw {
        return Err(Error::BadDimension {
            op: "conv2d",
            detail: format!("kernel must be square, got {kh}x{kw}"),
        });
    }
    if w_in_ch != in_ch {
        return Err(Error::ShapeMismatch {
            op: "conv2d input channels",
            expected: vec![in_ch],
            got: vec![w_in_ch],
        });
    }
    if stride == 0 {
        return Err(Error::BadDimension { op: "conv2d", detail: "stride must be >= 1".into() });
    }
    let span_h = in_h + 2 * pad;
    let span_w = in_w + 2 * pad;
    if span_h < kh || (span_h - kh) % stride != 0 || span_w < kw || (span_w - kw) % stride != 0 {
        return Err(Error::BadDimension {
            op: "conv2d",
            detail: format!(
                "input {in_h}x{in_w} with pad {pad} stride {stride} does not tile kernel {kh}"
            ),
        });
    }
    Ok(ConvGeom {
        batch,
        in_ch,
        out_ch,
        in_h,
        in_w,
        out_h: (span_h - kh) / stride + 1,
        out_w: (span_w - kw) / stride + 1,
        kernel: kh,
        stride,
        pad,
    })
}

/// Write the im2col matrix `[in_ch*K*K, out_h*out_w]` for one sample.
fn im2col<E: Elem>(x: &[E], g: &ConvGeom, col: &mut [E]) {
    let k = g.kernel;
    let ow = g.out_w;
    let mut row = 0usize;
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let dst_row = &mut col[row * g.out_h * ow..(row + 1) * g.out_h * ow];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut dst_row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    // ix = ox*stride + kx - pad sweeps a strided window of src.
                    if g.stride == 1 {
                        let off = kx as isize - g.pad as isize;
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *d = if ix < 0 || ix >= g.in_w as isize {
                                E::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.in_w as isize {
                                E::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column matrix back onto an input-shaped gradient buffer.
fn col2im_add<E: Elem>(col: &[E], g: &ConvGeom, dx: &mut [E]) {
    let k = g.kernel;
    let ow = g.out_w;
    let mut row = 0usize;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let src_row = &col[row * g.out_h * ow..(row + 1) * g.out_h * ow];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src = &src_row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let g = conv_geometry(x.shape(), w.shape(), stride, pad)?;
    let ksize = g.in_ch * g.kernel * g.kernel;
    let osize = g.out_h * g.out_w;
    let mut col = vec![E::zero(); ksize * osize];
    let mut out = vec![E::zero(); g.batch * g.out_ch * osize];
    let xd = x.data();
    let wd = w.data();
    for b in 0..g.batch {
        im2col(&xd[b * g.in_ch * g.in_h * g.in_w..], &g, &mut col);
        let y = &mut out[b * g.out_ch * osize..(b + 1) * g.out_ch * osize];
        // y[Cout, OHW] = w[Cout, K] @ col[K, OHW]
        unsafe {
            E::gemm(
                g.out_ch,
                ksize,
                osize,
                E::one(),
                wd.as_ptr(),
                ksize as isize,
                1,
                col.as_ptr(),
                osize as isize,
                1,
                E::zero(),
                y.as_mut_ptr(),
                osize as isize,
                1,
            );
        }
    }
    Tensor::new(vec![g.batch, g.out_ch, g.out_h, g.out_w], out)
}

/// Gradients w.r.t. input and weights. `dy` is `[B, Cout, OH, OW]`.
pub fn conv2d_backward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &[E],
    stride: usize,
    pad: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let g = conv_geometry(x.shape(), w.shape(), stride, pad)?;
    let ksize = g.in_ch * g.kernel * g.kernel;
    let osize = g.out_h * g.out_w;
    let mut col = vec![E::zero(); ksize * osize];
    let mut dcol = vec![E::zero(); ksize * osize];
    let mut dx = vec![E::zero(); x.len()];
    let mut dw = vec![E::zero(); w.len()];
    let xd = x.data();
    let wd = w.data();
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_ch * osize..(b + 1) * g.out_ch * osize];
        im2col(&xd[b * g.in_ch * g.in_h * g.in_w..], &g, &mut col);
        unsafe {
            // dW[Cout, K] += dY_b[Cout, OHW] @ col_b^T[OHW, K]
            E::gemm(
                g.out_ch,
                osize,
                ksize,
                E::one(),
                dyb.as_ptr(),
                osize as isize,
                1,
                col.as_ptr(),
                1,
                osize as isize,
                E::one(),
                dw.as_mut_ptr(),
                ksize as isize,
                1,
            );
            // dcol[K, OHW] = W^T[K, Cout] @ dY_b[Cout, OHW]
            E::gemm(
                ksize,
                g.out_ch,
                osize,
                E::one(),
                wd.as_ptr(),
                1,
                ksize as isize,
                dyb.as_ptr(),
                osize as isize,
                1,
                E::zero(),
                dcol.as_mut_ptr(),
                osize as isize,
                1,
            );
        }
        col2im_add(&dcol, &g, &mut dx[b * g.in_ch * g.in_h * g.in_w..]);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-nested-loop convolution, the independent oracle.
    pub fn conv2d_naive(
        x: &Tensor<f32>,
        w: &Tensor<f32>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f32> {
        let g = conv_geometry(x.shape(), w.shape(), stride, pad).unwrap();
        let xd = x.data();
        let wd = w.data();
        let mut out = vec![0.0f32; g.batch * g.out_ch * g.out_h * g.out_w];
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0f32;
                        for c in 0..g.in_ch {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.in_h as isize
                                        || ix >= g.in_w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((b * g.in_ch + c) * g.in_h + iy as usize) * g.in_w
                                        + ix as usize;
                                    let wi = ((o * g.in_ch + c) * g.kernel + ky) * g.kernel + kx;
                                    acc += xd[xi] * wd[wi];
                                }
                            }
                        }
                        out[((b * g.out_ch + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![g.batch, g.out_ch, g.out_h, g.out_w], out).unwrap()
    }

    #[test]
    fn all_ones_3x3_gives_nine() {
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let y = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0f32]).unwrap();
        let y = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn matches_nested_loop_oracle_on_random_input() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        };
        let x = Tensor::new(vec![2, 3, 8, 8], (0..2 * 3 * 64).map(|_| next()).collect()).unwrap();
        let w = Tensor::new(vec![4, 3, 3, 3], (0..4 * 3 * 9).map(|_| next()).collect()).unwrap();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let fast = conv2d_forward(&x, &w, stride, pad).unwrap();
            let slow = conv2d_naive(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-6, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_errors_name_offending_axes() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "got: {msg}");
    }

    #[test]
    fn non_integral_output_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 5, 5]);
        let w = Tensor::<f32>::zeros(vec![1, 1, 2, 2]);
        assert!(conv2d_forward(&x, &w, 2, 0).is_err());
    }
}
