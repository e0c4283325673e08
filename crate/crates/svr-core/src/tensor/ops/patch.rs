use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Apply a precomputed permutation: `out[i] = x[perm[i]]`. The adjoint
/// scatters gradients back through the inverse permutation.
fn gather<S: Scalar>(tape: &Tape<S>, x: &Tensor<S>, shape: &[usize], perm: Vec<usize>) -> Result<Tensor<S>> {
    debug_assert_eq!(perm.len(), x.numel());
    let data = x.data();
    let out: Vec<S> = perm.iter().map(|&i| data[i]).collect();
    let result = Tensor::new(shape, out)?;
    let perm = Arc::new(perm);
    Ok(tape.record(
        &[x],
        vec![Box::new(move |g: &[S]| {
            let mut gx = vec![S::zero(); g.len()];
            for (i, &p) in perm.iter().enumerate() {
                gx[p] = g[i];
            }
            gx
        })],
        result,
    ))
}

impl<S: Scalar> Tape<S> {
    /// Cut a clip `[T, C, H, W]` into non-overlapping `pt x ph x pw`
    /// spatio-temporal patches and flatten each into a token row.
    ///
    /// Output is `[(T/pt) * (H/ph) * (W/pw), pt*C*ph*pw]`; tokens are ordered
    /// temporal-slice first, then spatial row-major. Every patch extent must
    /// divide its axis.
    pub fn patchify_st(
        &self,
        x: &Tensor<S>,
        pt: usize,
        ph: usize,
        pw: usize,
    ) -> Result<Tensor<S>> {
        if x.rank() != 4 {
            return Err(Error::dimension(format!(
                "patchify_st expects [T,C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (t, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if pt == 0 || ph == 0 || pw == 0 || t % pt != 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::dimension(format!(
                "patch {pt}x{ph}x{pw} does not tile clip {t}x{h}x{w}"
            )));
        }
        let (nt, nh, nw) = (t / pt, h / ph, w / pw);
        let dim = pt * c * ph * pw;
        let mut perm = Vec::with_capacity(x.numel());
        for ti in 0..nt {
            for gy in 0..nh {
                for gx in 0..nw {
                    for dt in 0..pt {
                        for ch in 0..c {
                            for py in 0..ph {
                                for px in 0..pw {
                                    let tt = ti * pt + dt;
                                    let yy = gy * ph + py;
                                    let xx = gx * pw + px;
                                    perm.push(((tt * c + ch) * h + yy) * w + xx);
                                }
                            }
                        }
                    }
                }
            }
        }
        gather(self, x, &[nt * nh * nw, dim], perm)
    }

    /// Cut `[C, H, W]` into non-overlapping `ph x pw` patches, one token row
    /// per patch: output `[(H/ph) * (W/pw), C*ph*pw]`, row-major patch order.
    pub fn patchify2(&self, x: &Tensor<S>, ph: usize, pw: usize) -> Result<Tensor<S>> {
        if x.rank() != 3 {
            return Err(Error::dimension(format!(
                "patchify2 expects [C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::dimension(format!(
                "patch {ph}x{pw} does not tile plane {h}x{w}"
            )));
        }
        let (nh, nw) = (h / ph, w / pw);
        let mut perm = Vec::with_capacity(x.numel());
        for gy in 0..nh {
            for gx in 0..nw {
                for ch in 0..c {
                    for py in 0..ph {
                        for px in 0..pw {
                            perm.push((ch * h + gy * ph + py) * w + gx * pw + px);
                        }
                    }
                }
            }
        }
        gather(self, x, &[nh * nw, c * ph * pw], perm)
    }

    /// Inverse of [`Tape::patchify2`]: reassemble `[(H/ph)*(W/pw), C*ph*pw]`
    /// token rows into the `[C, H, W]` plane they came from.
    pub fn unpatchify2(
        &self,
        tokens: &Tensor<S>,
        c: usize,
        h: usize,
        w: usize,
        ph: usize,
        pw: usize,
    ) -> Result<Tensor<S>> {
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::dimension(format!(
                "patch {ph}x{pw} does not tile plane {h}x{w}"
            )));
        }
        let (nh, nw) = (h / ph, w / pw);
        if tokens.shape() != [nh * nw, c * ph * pw] {
            return Err(Error::dimension(format!(
                "unpatchify2: tokens {:?} do not match [{}, {}]",
                tokens.shape(),
                nh * nw,
                c * ph * pw
            )));
        }
        // perm[dst] = src index in the token matrix.
        let mut perm = vec![0usize; tokens.numel()];
        let dim = c * ph * pw;
        for gy in 0..nh {
            for gx in 0..nw {
                let tok = gy * nw + gx;
                for ch in 0..c {
                    for py in 0..ph {
                        for px in 0..pw {
                            let dst = (ch * h + gy * ph + py) * w + gx * pw + px;
                            let src = tok * dim + ((ch * ph + py) * pw + px);
                            perm[dst] = src;
                        }
                    }
                }
            }
        }
        gather(self, tokens, &[c, h, w], perm)
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn patchify2_roundtrips_through_unpatchify2() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[2, 4, 6], (0..48).map(|v| v as f32).collect()).unwrap();
        let toks = tape.patchify2(&x, 2, 3).unwrap();
        assert_eq!(toks.shape(), &[4, 12]);
        let back = tape.unpatchify2(&toks, 2, 4, 6, 2, 3).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn patchify2_first_token_is_top_left_patch() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 2, 4], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let toks = tape.patchify2(&x, 2, 2).unwrap();
        assert_eq!(&toks.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn patchify_st_orders_temporal_slices_first() {
        let tape = Tape::<f32>::new();
        // Two frames, one channel, 2x2 each; 1x2x2 patches.
        let x = Tensor::new(&[2, 1, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let toks = tape.patchify_st(&x, 1, 2, 2).unwrap();
        assert_eq!(toks.shape(), &[2, 4]);
        assert_eq!(&toks.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&toks.data()[4..], &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn patchify_st_rejects_non_tiling_patch() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[2, 1, 4, 4], vec![0.0; 32]).unwrap();
        assert!(tape.patchify_st(&x, 1, 3, 2).is_err());
    }
}
