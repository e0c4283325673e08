use crate::error::{Error, Result};
use crate::tensor::ops::matmul::mm_acc;
use crate::tensor::{Scalar, Tape, Tensor};

/// Lay out every kernel window of `x` as a column: `[C*kh*kw, oh*ow]`,
/// zero-padded by `pad` on each side.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
) -> (usize, usize, Vec<S>) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cols = oh * ow;
    let mut out = vec![S::zero(); c * kh * kw * cols];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * cols;
                for oy in 0..oh {
                    let sy = oy * stride + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for ox in 0..ow {
                        let sx = ox * stride + kx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        out[row + oy * ow + ox] = x[(ch * h + sy) * w + sx - pad];
                    }
                }
            }
        }
    }
    (oh, ow, out)
}

/// Scatter a column matrix back onto the image grid (adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols_mat: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
) -> Vec<S> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cols = oh * ow;
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * cols;
                for oy in 0..oh {
                    let sy = oy * stride + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for ox in 0..ow {
                        let sx = ox * stride + kx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        out[(ch * h + sy) * w + sx - pad] += cols_mat[row + oy * ow + ox];
                    }
                }
            }
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    /// 2-D convolution (cross-correlation) with symmetric zero padding.
    ///
    /// `x` is `[C_in, H, W]`, `weight` is `[C_out, C_in, kh, kw]`, `bias` is
    /// `[C_out]`. Output is `[C_out, H', W']` with
    /// `H' = (H + 2*pad - kh)/stride + 1`.
    pub fn conv2d(
        &self,
        x: &Tensor<S>,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
        pad: usize,
        stride: usize,
    ) -> Result<Tensor<S>> {
        if x.rank() != 3 || weight.rank() != 4 {
            return Err(Error::dimension(format!(
                "conv2d expects [C,H,W] x [O,C,kh,kw], got {:?} x {:?}",
                x.shape(),
                weight.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, ci, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if ci != c || bias.shape() != [co] {
            return Err(Error::dimension(format!(
                "conv2d: weight {:?} / bias {:?} incompatible with input {:?}",
                weight.shape(),
                bias.shape(),
                x.shape()
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dimension(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} invalid for padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let (oh, ow, col) = im2col(x.data(), c, h, w, kh, kw, pad, stride);
        let cols = oh * ow;
        let k = c * kh * kw;
        let mut out = vec![S::zero(); co * cols];
        mm_acc(weight.data(), &col, co, k, cols, &mut out);
        for o in 0..co {
            let b = bias.data()[o];
            for v in &mut out[o * cols..(o + 1) * cols] {
                *v += b;
            }
        }
        let result = Tensor::new(&[co, oh, ow], out)?;
        let col = std::sync::Arc::new(col);
        let wdat = weight.data_arc();
        let col_w = col.clone();
        Ok(self.record(
            &[x, weight, bias],
            vec![
                Box::new(move |g: &[S]| {
                    // dX = col2im(W^T @ g); build W^T rows on the fly.
                    let mut wt = vec![S::zero(); k * co];
                    for o in 0..co {
                        for i in 0..k {
                            wt[i * co + o] = wdat[o * k + i];
                        }
                    }
                    let mut dcol = vec![S::zero(); k * cols];
                    mm_acc(&wt, g, k, co, cols, &mut dcol);
                    col2im(&dcol, c, h, w, kh, kw, pad, stride)
                }),
                Box::new(move |g: &[S]| {
                    // dW[o,i] = sum_p g[o,p] * col[i,p].
                    let mut dw = vec![S::zero(); co * k];
                    for o in 0..co {
                        let grow = &g[o * cols..(o + 1) * cols];
                        for i in 0..k {
                            let crow = &col_w[i * cols..(i + 1) * cols];
                            let mut acc = S::zero();
                            for (&gv, &cv) in grow.iter().zip(crow) {
                                acc += gv * cv;
                            }
                            dw[o * k + i] = acc;
                        }
                    }
                    dw
                }),
                Box::new(move |g: &[S]| {
                    let mut db = vec![S::zero(); co];
                    for o in 0..co {
                        for &gv in &g[o * cols..(o + 1) * cols] {
                            db[o] += gv;
                        }
                    }
                    db
                }),
            ],
            result,
        ))
    }

    /// 2x2 average pooling with stride 2 on `[C, H, W]`; extents must be even.
    pub fn avg_pool2(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 3 {
            return Err(Error::dimension(format!(
                "avg_pool2 expects [C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dimension(format!(
                "avg_pool2 requires even extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![S::zero(); c * oh * ow];
        let q = S::c(0.25);
        for ch in 0..c {
            for y in 0..oh {
                for u in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * u;
                    out[(ch * oh + y) * ow + u] =
                        (x.data()[base] + x.data()[base + 1] + x.data()[base + w] + x.data()[base + w + 1]) * q;
                }
            }
        }
        let result = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                let mut gx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for u in 0..ow {
                            let gv = g[(ch * oh + y) * ow + u] * q;
                            let base = (ch * h + 2 * y) * w + 2 * u;
                            gx[base] += gv;
                            gx[base + 1] += gv;
                            gx[base + w] += gv;
                            gx[base + w + 1] += gv;
                        }
                    }
                }
                gx
            })],
            result,
        ))
    }

    /// Per-channel 3x3 box mean over valid windows: `[C,H,W] -> [C,H-2,W-2]`.
    pub fn mean_filter3(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 3 || x.shape()[1] < 3 || x.shape()[2] < 3 {
            return Err(Error::dimension(format!(
                "mean_filter3 needs [C,H>=3,W>=3], got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (h - 2, w - 2);
        let ninth = S::c(1.0 / 9.0);
        let mut out = vec![S::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for u in 0..ow {
                    let mut acc = S::zero();
                    for ky in 0..3 {
                        let row = (ch * h + y + ky) * w + u;
                        acc += x.data()[row] + x.data()[row + 1] + x.data()[row + 2];
                    }
                    out[(ch * oh + y) * ow + u] = acc * ninth;
                }
            }
        }
        let result = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                let mut gx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for u in 0..ow {
                            let gv = g[(ch * oh + y) * ow + u] * ninth;
                            for ky in 0..3 {
                                let row = (ch * h + y + ky) * w + u;
                                gx[row] += gv;
                                gx[row + 1] += gv;
                                gx[row + 2] += gv;
                            }
                        }
                    }
                }
                gx
            })],
            result,
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0;
        let w = Tensor::new(&[1, 1, 3, 3], k).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = tape.conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_sums_channels_and_adds_bias() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
        let w = Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.5]).unwrap();
        let b = Tensor::new(&[1], vec![100.0]).unwrap();
        let y = tape.conv2d(&x, &w, &b, 0, 1).unwrap();
        assert_eq!(y.data(), &[106.0, 112.0, 118.0, 124.0]);
    }

    #[test]
    fn conv2d_valid_output_shrinks() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 4, 5], vec![1.0; 20]).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = tape.conv2d(&x, &w, &b, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3]);
        assert_eq!(y.data(), &[9.0; 6]);
    }

    #[test]
    fn conv2d_wide_kernel_sums_whole_input() {
        // Ones 5x5 input under an 11x11 ones kernel with pad 5: every window
        // covers the full input, so each output value is the input sum.
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 5, 5], vec![1.0; 25]).unwrap();
        let w = Tensor::new(&[1, 1, 11, 11], vec![1.0; 121]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = tape.conv2d(&x, &w, &b, 5, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        for &v in y.data() {
            assert_eq!(v, 25.0);
        }
    }

    #[test]
    fn conv2d_stride_two_subsamples() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::new(&[1, 1, 2, 2], vec![0.25; 4]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = tape.conv2d(&x, &w, &b, 0, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn avg_pool2_means_quads() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0]).unwrap();
        let y = tape.avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[6.0, 10.0]);
    }

    #[test]
    fn mean_filter3_on_constant_is_identity() {
        let tape = Tape::<f32>::new();
        let x = Tensor::full(&[1, 4, 4], 2.5).unwrap();
        let y = tape.mean_filter3(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        for &v in y.data() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }
}
