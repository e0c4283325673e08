use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tape, Tensor};

/// Materialize an axis permutation of a flat row-major buffer.
fn permute_data<S: Scalar>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<S>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![S::zero(); data.len()];
    // Walk output positions in order; compute the matching input offset.
    let numel = data.len();
    let mut idx = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate().take(numel) {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..rank {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            idx[d] = c;
            src += c * in_strides[axes[d]];
        }
        *slot = data[src];
    }
    (out_shape, out)
}

impl<S: Scalar> Tape<S> {
    /// Reinterpret the flat buffer under a new shape (element count must be
    /// unchanged). Zero-copy; gradients flow through unchanged.
    pub fn reshape(&self, x: &Tensor<S>, new_shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = new_shape.iter().product();
        if numel != x.numel() {
            return Err(Error::dimension(format!(
                "reshape: {:?} has {} elements, target {:?} has {}",
                x.shape(),
                x.numel(),
                new_shape,
                numel
            )));
        }
        let rebuilt = Tensor::from_shared(new_shape, x.data_arc())?;
        Ok(self.alias(x, rebuilt))
    }

    /// Permute the axes of a tensor; `axes` must be a permutation of
    /// `0..rank`.
    pub fn permute(&self, x: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dimension(format!(
                "permute: {axes:?} is not a permutation of 0..{rank}"
            )));
        }
        let (out_shape, out_data) = permute_data(x.data(), x.shape(), axes);
        let out = Tensor::new(&out_shape, out_data)?;
        // Inverse permutation maps the output gradient back.
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| permute_data(g, &grad_shape, &inverse).1)],
            out,
        ))
    }

    /// Concatenate tensors along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat: no operands"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dimension(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut total = 0usize;
        for p in parts {
            if p.rank() != rank
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::dimension(format!(
                    "concat: shape {:?} incompatible with {:?} along axis {axis}",
                    p.shape(),
                    first.shape()
                )));
            }
            total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out_data = vec![S::zero(); outer * total * inner];
        let mut offset = 0usize;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let e = p.shape()[axis];
            for o in 0..outer {
                let src = &p.data()[o * e * inner..(o + 1) * e * inner];
                let dst_base = (o * total + offset) * inner;
                out_data[dst_base..dst_base + e * inner].copy_from_slice(src);
            }
            spans.push((offset, e));
            offset += e;
        }
        let out = Tensor::new(&out_shape, out_data)?;
        let vjps = spans
            .iter()
            .map(|&(off, e)| {
                let b: Box<dyn Fn(&[S]) -> Vec<S>> = Box::new(move |g: &[S]| {
                    let mut gi = vec![S::zero(); outer * e * inner];
                    for o in 0..outer {
                        let src_base = (o * total + off) * inner;
                        gi[o * e * inner..(o + 1) * e * inner]
                            .copy_from_slice(&g[src_base..src_base + e * inner]);
                    }
                    gi
                });
                b
            })
            .collect();
        Ok(self.record(parts, vjps, out))
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn narrow(&self, x: &Tensor<S>, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        if axis >= x.rank() {
            return Err(Error::dimension(format!(
                "narrow axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let extent = x.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::dimension(format!(
                "narrow: range {start}..{} exceeds extent {extent}",
                start + len
            )));
        }
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out_data = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * extent + start) * inner;
            out_data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&x.data()[src_base..src_base + len * inner]);
        }
        let out = Tensor::new(&out_shape, out_data)?;
        let numel = x.numel();
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                let mut gi = vec![S::zero(); numel];
                for o in 0..outer {
                    let dst_base = (o * extent + start) * inner;
                    gi[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                gi
            })],
            out,
        ))
    }

    /// Pad a `[C, H, W]` tensor to even height/width by repeating the last
    /// row/column (symmetric padding); identity when both are even.
    pub fn pad_even(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 3 {
            return Err(Error::dimension(format!(
                "pad_even expects [C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (h + h % 2, w + w % 2);
        if (oh, ow) == (h, w) {
            return Ok(x.clone());
        }
        let mut out_data = vec![S::zero(); c * oh * ow];
        let data = x.data();
        for ch in 0..c {
            for y in 0..oh {
                let sy = y.min(h - 1);
                for u in 0..ow {
                    let sx = u.min(w - 1);
                    out_data[(ch * oh + y) * ow + u] = data[(ch * h + sy) * w + sx];
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out_data)?;
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                let mut gi = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        let sy = y.min(h - 1);
                        for u in 0..ow {
                            let sx = u.min(w - 1);
                            gi[(ch * h + sy) * w + sx] += g[(ch * oh + y) * ow + u];
                        }
                    }
                }
                gi
            })],
            out,
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn permute_transposes_matrix() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = tape.permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_then_narrow_roundtrip() {
        let tape = Tape::<f32>::new();
        let a = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2, 2], vec![5.0; 8]).unwrap();
        let c = tape.concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        let a2 = tape.narrow(&c, 0, 0, 1).unwrap();
        assert_eq!(a2.data(), a.data());
    }

    #[test]
    fn pad_even_repeats_last_row_and_column() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let y = tape.pad_even(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.data()[15], 9.0);
        assert_eq!(y.data()[3], 3.0);
    }

    #[test]
    fn reshape_shares_data_and_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.reshape(&x, &[4]).unwrap();
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[1.0; 4]);
    }
}
