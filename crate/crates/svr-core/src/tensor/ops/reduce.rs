use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

impl<S: Scalar> Tape<S> {
    /// Sum of all elements, as a one-element tensor.
    pub fn sum_all(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut acc = S::zero();
        for &v in x.data() {
            acc += v;
        }
        let n = x.numel();
        let out = Tensor::scalar(acc);
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| vec![g[0]; n])],
            out,
        ))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean_all(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let n = x.numel();
        let inv = S::one() / S::c(n as f64);
        let mut acc = S::zero();
        for &v in x.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc * inv);
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| vec![g[0] * inv; n])],
            out,
        ))
    }

    /// Sum along one axis; the axis is removed from the shape (a rank-1
    /// input reduces to shape `[1]`).
    pub fn sum_axis(&self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&self, x: &Tensor<S>, axis: usize, mean: bool) -> Result<Tensor<S>> {
        if axis >= x.rank() {
            return Err(Error::dimension(format!(
                "reduce axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let shape = x.shape().to_vec();
        let extent = shape[axis];
        let inv = if mean {
            S::one() / S::c(extent as f64)
        } else {
            S::one()
        };
        // Split the flat index as outer * extent * inner.
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_data = vec![S::zero(); outer * inner];
        let data = x.data();
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                let row = &data[base..base + inner];
                let dst = &mut out_data[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if mean {
            for v in &mut out_data {
                *v *= inv;
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, out_data)?;
        let numel = x.numel();
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                let mut gi = vec![S::zero(); numel];
                for o in 0..outer {
                    for a in 0..extent {
                        let base = (o * extent + a) * inner;
                        let src = &g[o * inner..(o + 1) * inner];
                        for (d, &v) in gi[base..base + inner].iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                gi
            })],
            out,
        ))
    }
}
