use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Forward single-level orthonormal Haar transform of one plane.
/// Each 2x2 block (a b / c d) maps to (LL, LH, HL, HH) with weight 1/2,
/// so the transform preserves the Euclidean norm.
fn haar_plane<S: Scalar>(x: &[S], h: usize, w: usize, ll: &mut [S], lh: &mut [S], hl: &mut [S], hh: &mut [S]) {
    let (oh, ow) = (h / 2, w / 2);
    let half = S::c(0.5);
    for y in 0..oh {
        for u in 0..ow {
            let a = x[(2 * y) * w + 2 * u];
            let b = x[(2 * y) * w + 2 * u + 1];
            let c = x[(2 * y + 1) * w + 2 * u];
            let d = x[(2 * y + 1) * w + 2 * u + 1];
            ll[y * ow + u] = (a + b + c + d) * half;
            lh[y * ow + u] = (a - b + c - d) * half;
            hl[y * ow + u] = (a + b - c - d) * half;
            hh[y * ow + u] = (a - b - c + d) * half;
        }
    }
}

/// Inverse of [`haar_plane`]; because the transform is orthonormal this is
/// also its adjoint, which is what the gradient needs.
fn ihaar_plane<S: Scalar>(ll: &[S], lh: &[S], hl: &[S], hh: &[S], h: usize, w: usize, out: &mut [S]) {
    let (oh, ow) = (h / 2, w / 2);
    let half = S::c(0.5);
    for y in 0..oh {
        for u in 0..ow {
            let (l, m, n, o) = (ll[y * ow + u], lh[y * ow + u], hl[y * ow + u], hh[y * ow + u]);
            out[(2 * y) * w + 2 * u] = (l + m + n + o) * half;
            out[(2 * y) * w + 2 * u + 1] = (l - m + n - o) * half;
            out[(2 * y + 1) * w + 2 * u] = (l + m - n - o) * half;
            out[(2 * y + 1) * w + 2 * u + 1] = (l - m - n + o) * half;
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// Single-level 2-D orthonormal Haar transform of `[C, H, W]` (even
    /// extents). Output is `[4C, H/2, W/2]`; channel `4c..4c+4` holds the
    /// LL, LH, HL, HH subbands of input channel `c`. A constant plane of
    /// value `v` yields LL identically `2v` and zero detail bands.
    pub fn haar2(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 3 {
            return Err(Error::dimension(format!(
                "haar2 expects [C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dimension(format!(
                "haar2 requires even extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let plane = oh * ow;
        let mut out = vec![S::zero(); 4 * c * plane];
        for ch in 0..c {
            let (head, rest) = out[4 * ch * plane..(4 * ch + 4) * plane].split_at_mut(plane);
            let (lh, rest) = rest.split_at_mut(plane);
            let (hl, hh) = rest.split_at_mut(plane);
            haar_plane(&x.data()[ch * h * w..(ch + 1) * h * w], h, w, head, lh, hl, hh);
        }
        let result = Tensor::new(&[4 * c, oh, ow], out)?;
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                let mut gx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    let base = 4 * ch * plane;
                    ihaar_plane(
                        &g[base..base + plane],
                        &g[base + plane..base + 2 * plane],
                        &g[base + 2 * plane..base + 3 * plane],
                        &g[base + 3 * plane..base + 4 * plane],
                        h,
                        w,
                        &mut gx[ch * h * w..(ch + 1) * h * w],
                    );
                }
                gx
            })],
            result,
        ))
    }

    /// Inverse single-level Haar transform: `[4C, H/2, W/2] -> [C, H, W]`.
    pub fn haar2_inverse(&self, x: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
        if x.rank() != 3 || x.shape()[0] % 4 != 0 {
            return Err(Error::dimension(format!(
                "haar2_inverse expects [4C,H/2,W/2], got {:?}",
                x.shape()
            )));
        }
        let c = x.shape()[0] / 4;
        if h % 2 != 0 || w % 2 != 0 || x.shape()[1] != h / 2 || x.shape()[2] != w / 2 {
            return Err(Error::dimension(format!(
                "haar2_inverse: target {h}x{w} does not match bands {:?}",
                x.shape()
            )));
        }
        let plane = (h / 2) * (w / 2);
        let mut out = vec![S::zero(); c * h * w];
        for ch in 0..c {
            let base = 4 * ch * plane;
            ihaar_plane(
                &x.data()[base..base + plane],
                &x.data()[base + plane..base + 2 * plane],
                &x.data()[base + 2 * plane..base + 3 * plane],
                &x.data()[base + 3 * plane..base + 4 * plane],
                h,
                w,
                &mut out[ch * h * w..(ch + 1) * h * w],
            );
        }
        let result = Tensor::new(&[c, h, w], out)?;
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                let mut gx = vec![S::zero(); 4 * c * plane];
                for ch in 0..c {
                    let (head, rest) = gx[4 * ch * plane..(4 * ch + 4) * plane].split_at_mut(plane);
                    let (lh, rest) = rest.split_at_mut(plane);
                    let (hl, hh) = rest.split_at_mut(plane);
                    haar_plane(&g[ch * h * w..(ch + 1) * h * w], h, w, head, lh, hl, hh);
                }
                gx
            })],
            result,
        ))
    }
}
