use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// `c[m,n] += a[m,k] * b[k,n]`, ikj order so the inner loop vectorizes.
pub(crate) fn mm_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T` (rows of `g` dotted with rows of `b`).
fn mm_bt_acc<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`.
fn mm_at_acc<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// Batched matrix product. The last two axes multiply as `[M,K] x [K,N]`;
    /// any leading axes are a shared batch and must match exactly.
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.rank() < 2 || b.rank() != a.rank() || a.shape()[..a.rank() - 2] != b.shape()[..b.rank() - 2]
        {
            return Err(Error::dimension(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let r = a.rank();
        let (m, ka) = (a.shape()[r - 2], a.shape()[r - 1]);
        let (kb, n) = (b.shape()[r - 2], b.shape()[r - 1]);
        if ka != kb {
            return Err(Error::dimension(format!(
                "matmul: inner extents differ, {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let k = ka;
        let batch: usize = a.shape()[..r - 2].iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            mm_acc(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut out_shape = a.shape()[..r - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let result = Tensor::new(&out_shape, out)?;
        let (ad, bd) = (a.data_arc(), b.data_arc());
        Ok(self.record(
            &[a, b],
            vec![
                Box::new(move |g: &[S]| {
                    let mut da = vec![S::zero(); batch * m * k];
                    for bi in 0..batch {
                        mm_bt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    da
                }),
                Box::new(move |g: &[S]| {
                    let mut db = vec![S::zero(); batch * k * n];
                    for bi in 0..batch {
                        mm_at_acc(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    db
                }),
            ],
            result,
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn matmul_matches_hand_product() {
        let tape = Tape::<f32>::new();
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_gradients_are_transposed_products() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(&Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(&a, &b).unwrap();
        let s = tape.sum_all(&c).unwrap();
        let g = tape.backward(&s).unwrap();
        // dA = 1 * B^T, dB = A^T * 1.
        assert_eq!(g.wrt(&a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.wrt(&b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::<f32>::new();
        let a = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn batched_matmul_per_slice() {
        let tape = Tape::<f32>::new();
        let a = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2, 1], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 6.0]);
    }
}
