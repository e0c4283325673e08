use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Sample one point of a `[C, H, W]` image at continuous pixel-index
/// coordinates, returning the interpolated channel vector. Coordinates clamp
/// to `[0, W-1] x [0, H-1]`; in-range points blend the four neighbors by
/// their fractional parts.
pub fn bilinear_sample<S: Scalar>(img: &Tensor<S>, x: f64, y: f64) -> Result<Vec<S>> {
    if img.rank() != 3 {
        return Err(Error::dimension(format!(
            "bilinear_sample expects [C,H,W], got {:?}",
            img.shape()
        )));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (x0, x1, fx) = split_coord(S::c(x), w);
    let (y0, y1, fy) = split_coord(S::c(y), h);
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let r0 = (ch * h + y0) * w;
        let r1 = (ch * h + y1) * w;
        let top = img.data()[r0 + x0] * (S::one() - fx) + img.data()[r0 + x1] * fx;
        let bot = img.data()[r1 + x0] * (S::one() - fx) + img.data()[r1 + x1] * fx;
        out.push(top * (S::one() - fy) + bot * fy);
    }
    Ok(out)
}

/// Decompose a pixel-index coordinate into (left index, right index, frac),
/// replicating the border outside `[0, n-1]`.
#[inline]
fn split_coord<S: Scalar>(x: S, n: usize) -> (usize, usize, S) {
    let last = S::c((n - 1) as f64);
    let x = if x < S::zero() {
        S::zero()
    } else if x > last {
        last
    } else {
        x
    };
    let i0 = x.floor();
    let f = x - i0;
    let i0 = i0.to_f64() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f)
}

impl<S: Scalar> Tape<S> {
    /// Sample `x` (`[C, H, W]`) horizontally at pixel-index coordinates `xs`.
    ///
    /// `xs` of shape `[W']` samples every row at the same column coordinate
    /// (column-consistent warp); `[H, W']` gives each row its own
    /// coordinates (disparity warp). Output is `[C, H, W']`. Coordinates
    /// clamp to the image border; interpolation is linear, and gradients
    /// flow to both the image and the coordinates.
    pub fn bilinear_sample(&self, x: &Tensor<S>, xs: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 3 {
            return Err(Error::dimension(format!(
                "bilinear_sample expects [C,H,W] input, got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (per_row, wo) = match xs.shape() {
            [wo] => (false, *wo),
            [hh, wo] if *hh == h => (true, *wo),
            _ => {
                return Err(Error::dimension(format!(
                    "bilinear_sample coords must be [W'] or [{h}, W'], got {:?}",
                    xs.shape()
                )))
            }
        };
        if !xs.all_finite() {
            return Err(Error::numeric("bilinear_sample: non-finite coordinate"));
        }
        let coord = |y: usize, u: usize| -> S {
            if per_row {
                xs.data()[y * wo + u]
            } else {
                xs.data()[u]
            }
        };
        let mut out = vec![S::zero(); c * h * wo];
        for y in 0..h {
            for u in 0..wo {
                let (i0, i1, f) = split_coord(coord(y, u), w);
                for ch in 0..c {
                    let row = (ch * h + y) * w;
                    out[(ch * h + y) * wo + u] =
                        x.data()[row + i0] * (S::one() - f) + x.data()[row + i1] * f;
                }
            }
        }
        let result = Tensor::new(&[c, h, wo], out)?;
        let xdat = x.data_arc();
        let xsdat = xs.data_arc();
        let xsdat2 = xs.data_arc();
        Ok(self.record(
            &[x, xs],
            vec![
                Box::new(move |g: &[S]| {
                    let mut gx = vec![S::zero(); c * h * w];
                    for y in 0..h {
                        for u in 0..wo {
                            let cv = if per_row { xsdat[y * wo + u] } else { xsdat[u] };
                            let (i0, i1, f) = split_coord(cv, w);
                            for ch in 0..c {
                                let gv = g[(ch * h + y) * wo + u];
                                let row = (ch * h + y) * w;
                                gx[row + i0] += gv * (S::one() - f);
                                gx[row + i1] += gv * f;
                            }
                        }
                    }
                    gx
                }),
                Box::new(move |g: &[S]| {
                    let mut gc = vec![S::zero(); xsdat2.len()];
                    for y in 0..h {
                        for u in 0..wo {
                            let ci = if per_row { y * wo + u } else { u };
                            let cv = xsdat2[ci];
                            // Clamped samples have zero coordinate gradient.
                            if cv < S::zero() || cv > S::c((w - 1) as f64) {
                                continue;
                            }
                            let (i0, i1, _) = split_coord(cv, w);
                            let mut acc = S::zero();
                            for ch in 0..c {
                                let row = (ch * h + y) * w;
                                acc += g[(ch * h + y) * wo + u] * (xdat[row + i1] - xdat[row + i0]);
                            }
                            gc[ci] += acc;
                        }
                    }
                    gc
                }),
            ],
            result,
        ))
    }

    /// Bilinear resize of `[C, H, W]` to `[C, oh, ow]` with half-pixel
    /// centers. Gradients flow to the image only.
    pub fn resize_bilinear(&self, x: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
        if x.rank() != 3 {
            return Err(Error::dimension(format!(
                "resize_bilinear expects [C,H,W], got {:?}",
                x.shape()
            )));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::dimension("resize_bilinear: zero output extent"));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let sy = h as f64 / oh as f64;
        let sx = w as f64 / ow as f64;
        // Precompute per-axis taps; the kernel is separable.
        let ytaps: Vec<(usize, usize, S)> = (0..oh)
            .map(|y| split_coord(S::c((y as f64 + 0.5) * sy - 0.5), h))
            .collect();
        let xtaps: Vec<(usize, usize, S)> = (0..ow)
            .map(|u| split_coord(S::c((u as f64 + 0.5) * sx - 0.5), w))
            .collect();
        let mut out = vec![S::zero(); c * oh * ow];
        for ch in 0..c {
            for (y, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                let r0 = (ch * h + y0) * w;
                let r1 = (ch * h + y1) * w;
                for (u, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    let top = x.data()[r0 + x0] * (S::one() - fx) + x.data()[r0 + x1] * fx;
                    let bot = x.data()[r1 + x0] * (S::one() - fx) + x.data()[r1 + x1] * fx;
                    out[(ch * oh + y) * ow + u] = top * (S::one() - fy) + bot * fy;
                }
            }
        }
        let result = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                let mut gx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for (y, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                        let r0 = (ch * h + y0) * w;
                        let r1 = (ch * h + y1) * w;
                        for (u, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                            let gv = g[(ch * oh + y) * ow + u];
                            gx[r0 + x0] += gv * (S::one() - fy) * (S::one() - fx);
                            gx[r0 + x1] += gv * (S::one() - fy) * fx;
                            gx[r1 + x0] += gv * fy * (S::one() - fx);
                            gx[r1 + x1] += gv * fy * fx;
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
    use super::bilinear_sample;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn point_sample_integer_coords_exact() {
        let x = Tensor::new(&[2, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(bilinear_sample(&x, 1.0, 0.0).unwrap(), vec![2.0, 20.0]);
    }

    #[test]
    fn point_sample_midway_blends() {
        let x = Tensor::new(&[1, 1, 2], vec![0.0f64, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&x, 0.5, 0.0).unwrap(), vec![0.5]);
    }

    #[test]
    fn point_sample_clamps_left_of_frame() {
        let x = Tensor::new(&[1, 2, 3], vec![7.0f32, 8.0, 9.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            bilinear_sample(&x, -3.7, 0.0).unwrap(),
            bilinear_sample(&x, 0.0, 0.0).unwrap()
        );
    }

    #[test]
    fn sample_at_integer_coords_is_gather() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 1, 4], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let xs = Tensor::new(&[3], vec![0.0, 2.0, 3.0]).unwrap();
        let y = tape.bilinear_sample(&x, &xs).unwrap();
        assert_eq!(y.data(), &[10.0, 30.0, 40.0]);
    }

    #[test]
    fn sample_interpolates_and_clamps() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 1, 3], vec![0.0, 10.0, 20.0]).unwrap();
        let xs = Tensor::new(&[3], vec![0.5, -4.0, 9.0]).unwrap();
        let y = tape.bilinear_sample(&x, &xs).unwrap();
        assert_eq!(y.data(), &[5.0, 0.0, 20.0]);
    }

    #[test]
    fn per_row_coords_shift_rows_independently() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let xs = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 1.0]).unwrap();
        let y = tape.bilinear_sample(&x, &xs).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 6.0, 5.0]);
    }

    #[test]
    fn coordinate_gradient_is_image_slope() {
        let tape = Tape::<f64>::new();
        let x = Tensor::new(&[1, 1, 3], vec![0.0, 4.0, 8.0]).unwrap();
        let xs = tape.leaf(&Tensor::new(&[1], vec![0.75]).unwrap());
        let y = tape.bilinear_sample(&x, &xs).unwrap();
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&xs).unwrap(), &[4.0]);
    }

    #[test]
    fn resize_identity_when_sizes_match() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.resize_bilinear(&x, 2, 2).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn resize_doubles_with_interpolation() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 1, 2], vec![0.0, 4.0]).unwrap();
        let y = tape.resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
