use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

fn check_same_shape<S: Scalar>(op: &str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.record(
            &[a, b],
            vec![Box::new(|g: &[S]| g.to_vec()), Box::new(|g: &[S]| g.to_vec())],
            out,
        ))
    }

    /// Add a vector to every row: `b`'s extent must equal `a`'s last extent.
    pub fn add_rowvec(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let d = *a.shape().last().expect("rank >= 1");
        if b.shape() != [d] {
            return Err(Error::dimension(format!(
                "add_rowvec: vector {:?} does not match last extent of {:?}",
                b.shape(),
                a.shape()
            )));
        }
        let rows = a.numel() / d;
        let mut data = a.data().to_vec();
        for r in 0..rows {
            for i in 0..d {
                data[r * d + i] += b.data()[i];
            }
        }
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.record(
            &[a, b],
            vec![
                Box::new(|g: &[S]| g.to_vec()),
                Box::new(move |g: &[S]| {
                    let mut gb = vec![S::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            gb[i] += g[r * d + i];
                        }
                    }
                    gb
                }),
            ],
            out,
        ))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.record(
            &[a, b],
            vec![
                Box::new(|g: &[S]| g.to_vec()),
                Box::new(|g: &[S]| g.iter().map(|&v| -v).collect()),
            ],
            out,
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.shape(), data)?;
        let (ad, bd) = (a.data_arc(), b.data_arc());
        Ok(self.record(
            &[a, b],
            vec![
                Box::new(move |g: &[S]| g.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect()),
                Box::new(move |g: &[S]| g.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect()),
            ],
            out,
        ))
    }

    /// Elementwise quotient `a / b`.
    pub fn div(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("div", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
        let out = Tensor::new(a.shape(), data)?;
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let bd2 = Arc::clone(&bd);
        Ok(self.record(
            &[a, b],
            vec![
                Box::new(move |g: &[S]| g.iter().zip(bd.iter()).map(|(&g, &y)| g / y).collect()),
                Box::new(move |g: &[S]| {
                    g.iter()
                        .zip(ad.iter().zip(bd2.iter()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect()
                }),
            ],
            out,
        ))
    }

    /// Rectified linear unit, `max(x, 0)`.
    pub fn relu(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let data = x
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        let xd = x.data_arc();
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                g.iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                    .collect()
            })],
            out,
        ))
    }

    /// Elementwise absolute value. The subgradient at 0 is taken as 0.
    pub fn abs(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let data = x.data().iter().map(|&v| v.abs()).collect();
        let out = Tensor::new(x.shape(), data)?;
        let xd = x.data_arc();
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                g.iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| {
                        if v > S::zero() {
                            g
                        } else if v < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    })
                    .collect()
            })],
            out,
        ))
    }

    /// Elementwise exponential.
    pub fn exp(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let data: Vec<S> = x.data().iter().map(|&v| v.exp()).collect();
        let out = Tensor::new(x.shape(), data)?;
        let yd = out.data_arc();
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                g.iter().zip(yd.iter()).map(|(&g, &y)| g * y).collect()
            })],
            out,
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, x: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let data = x.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| g.iter().map(|&v| v * c).collect())],
            out,
        ))
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, x: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let data = x.data().iter().map(|&v| v + c).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.record(&[x], vec![Box::new(|g: &[S]| g.to_vec())], out))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn add_shape_mismatch_is_dimension_error() {
        let tape = Tape::<f32>::new();
        let a = Tensor::zeros(&[2, 2]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        assert!(tape.add(&a, &b).is_err());
    }

    #[test]
    fn mul_square_gradient_is_two_x() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.mul(&x, &x).unwrap();
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn relu_zeroes_negatives() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 0.0]);
    }
}
