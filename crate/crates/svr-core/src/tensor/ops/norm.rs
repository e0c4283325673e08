use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    /// Softmax over the last axis, numerically stabilized by subtracting the
    /// row maximum. Rejects non-finite inputs so attention logits that have
    /// overflowed surface as an error instead of NaN weights.
    pub fn softmax_lastdim(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if !x.all_finite() {
            return Err(Error::numeric("softmax input contains non-finite values"));
        }
        let d = *x.shape().last().expect("rank >= 1");
        let rows = x.numel() / d;
        let mut out = vec![S::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let orow = &mut out[r * d..(r + 1) * d];
            let mut sum = S::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let result = Tensor::new(x.shape(), out)?;
        let y = result.data_arc();
        Ok(self.record(
            &[x],
            vec![Box::new(move |g: &[S]| {
                let mut gx = vec![S::zero(); g.len()];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = S::zero();
                    for (&yv, &gv) in yr.iter().zip(gr) {
                        dot += yv * gv;
                    }
                    for ((gx, &yv), &gv) in gx[r * d..(r + 1) * d].iter_mut().zip(yr).zip(gr) {
                        *gx = yv * (gv - dot);
                    }
                }
                gx
            })],
            result,
        ))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    /// `gamma` and `beta` are one-dimensional of that axis's extent.
    pub fn layer_norm(
        &self,
        x: &Tensor<S>,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let d = *x.shape().last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dimension(format!(
                "layer_norm: scale/shift must be [{d}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = x.numel() / d;
        let eps = S::c(LN_EPS);
        let mut out = vec![S::zero(); x.numel()];
        let mut xhat = vec![S::zero(); x.numel()];
        let mut inv_std = vec![S::zero(); rows];
        let nd = S::c(d as f64);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mut mu = S::zero();
            for &v in row {
                mu += v;
            }
            mu /= nd;
            let mut var = S::zero();
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var /= nd;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mu) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gamma.data()[i] + beta.data()[i];
            }
        }
        let result = Tensor::new(x.shape(), out)?;
        let gdat = gamma.data_arc();
        let xhat = std::sync::Arc::new(xhat);
        let inv_std = std::sync::Arc::new(inv_std);
        let (xh_x, is_x) = (xhat.clone(), inv_std.clone());
        let xh_g = xhat.clone();
        Ok(self.record(
            &[x, gamma, beta],
            vec![
                Box::new(move |g: &[S]| {
                    let mut gx = vec![S::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xh_x[r * d..(r + 1) * d];
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for i in 0..d {
                            let gg = gr[i] * gdat[i];
                            m1 += gg;
                            m2 += gg * xr[i];
                        }
                        m1 /= nd;
                        m2 /= nd;
                        for i in 0..d {
                            gx[r * d + i] = (gr[i] * gdat[i] - m1 - xr[i] * m2) * is_x[r];
                        }
                    }
                    gx
                }),
                Box::new(move |g: &[S]| {
                    let mut gg = vec![S::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] += g[r * d + i] * xh_g[r * d + i];
                        }
                    }
                    gg
                }),
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
            result,
        ))
    }

    /// Per-channel batch normalization of a `[C, H, W]` feature map.
    ///
    /// In training mode the map is normalized with batch statistics and the
    /// returned pair holds running statistics updated with the given
    /// momentum (biased variance, matching the normalization). In inference
    /// mode the stored running statistics normalize the map and `None` is
    /// returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        x: &Tensor<S>,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        training: bool,
        momentum: f64,
    ) -> Result<(Tensor<S>, Option<(Tensor<S>, Tensor<S>)>)> {
        if x.rank() != 3 {
            return Err(Error::dimension(format!(
                "batch_norm expects [C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        for (name, t) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::dimension(format!(
                    "batch_norm: {name} must be [{c}], got {:?}",
                    t.shape()
                )));
            }
        }
        let plane = h * w;
        let eps = S::c(BN_EPS);
        let (mean, var) = if training {
            let np = S::c(plane as f64);
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let sl = &x.data()[ch * plane..(ch + 1) * plane];
                let mut mu = S::zero();
                for &v in sl {
                    mu += v;
                }
                mu /= np;
                let mut vv = S::zero();
                for &v in sl {
                    let d = v - mu;
                    vv += d * d;
                }
                vv /= np;
                mean[ch] = mu;
                var[ch] = vv;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut out = vec![S::zero(); x.numel()];
        let mut xhat = vec![S::zero(); x.numel()];
        for ch in 0..c {
            let (g0, b0, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in 0..plane {
                let hh = (x.data()[ch * plane + i] - mu) * is;
                xhat[ch * plane + i] = hh;
                out[ch * plane + i] = hh * g0 + b0;
            }
        }
        let result = Tensor::new(x.shape(), out)?;
        let updated = if training {
            let m = S::c(momentum);
            let om = S::one() - m;
            let new_mean: Vec<S> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| om * r + m * b)
                .collect();
            let new_var: Vec<S> = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| om * r + m * b)
                .collect();
            Some((Tensor::new(&[c], new_mean)?, Tensor::new(&[c], new_var)?))
        } else {
            None
        };
        let xhat = std::sync::Arc::new(xhat);
        let inv_std = std::sync::Arc::new(inv_std);
        let gdat = gamma.data_arc();
        let (xh_x, is_x) = (xhat.clone(), inv_std.clone());
        let xh_g = xhat.clone();
        let np = S::c(plane as f64);
        let grad_x: Box<dyn Fn(&[S]) -> Vec<S>> = if training {
            Box::new(move |g: &[S]| {
                let mut gx = vec![S::zero(); g.len()];
                for ch in 0..c {
                    let gr = &g[ch * plane..(ch + 1) * plane];
                    let xr = &xh_x[ch * plane..(ch + 1) * plane];
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for i in 0..plane {
                        m1 += gr[i];
                        m2 += gr[i] * xr[i];
                    }
                    m1 /= np;
                    m2 /= np;
                    let scale = gdat[ch] * is_x[ch];
                    for i in 0..plane {
                        gx[ch * plane + i] = (gr[i] - m1 - xr[i] * m2) * scale;
                    }
                }
                gx
            })
        } else {
            let gdat = gamma.data_arc();
            let is_x = inv_std.clone();
            Box::new(move |g: &[S]| {
                let mut gx = vec![S::zero(); g.len()];
                for ch in 0..c {
                    let scale = gdat[ch] * is_x[ch];
                    for i in 0..plane {
                        gx[ch * plane + i] = g[ch * plane + i] * scale;
                    }
                }
                gx
            })
        };
        let out_t = self.record(
            &[x, gamma, beta],
            vec![
                grad_x,
                Box::new(move |g: &[S]| {
                    let mut gg = vec![S::zero(); c];
                    for ch in 0..c {
                        for i in 0..plane {
                            gg[ch] += g[ch * plane + i] * xh_g[ch * plane + i];
                        }
                    }
                    gg
                }),
                Box::new(move |g: &[S]| {
                    let mut gb = vec![S::zero(); c];
                    for ch in 0..c {
                        for i in 0..plane {
                            gb[ch] += g[ch * plane + i];
                        }
                    }
                    gb
                }),
            ],
            result,
        );
        Ok((out_t, updated))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let y = tape.softmax_lastdim(&x).unwrap();
        for r in 0..2 {
            let s: f32 = y.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // Shift invariance: both rows differ by a constant, so weights match.
        for i in 0..3 {
            assert!((y.data()[i] - y.data()[3 + i]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(&[1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(tape.softmax_lastdim(&x).is_err());
    }

    #[test]
    fn layer_norm_zero_mean_unit_scale() {
        let tape = Tape::<f64>::new();
        let x = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::full(&[4], 1.0).unwrap();
        let beta = Tensor::zeros(&[4]).unwrap();
        let y = tape.layer_norm(&x, &gamma, &beta).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let tape = Tape::<f64>::new();
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let ones = Tensor::full(&[1], 1.0).unwrap();
        let zeros = Tensor::zeros(&[1]).unwrap();
        let (y, upd) = tape
            .batch_norm(&x, &ones, &zeros, &zeros, &ones, true, 0.1)
            .unwrap();
        let (rm, rv) = upd.unwrap();
        // Batch mean 4, biased variance 5; momentum 0.1 from (0, 1).
        assert!((rm.data()[0] - 0.4).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 + 0.5)).abs() < 1e-12);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let tape = Tape::<f64>::new();
        let x = Tensor::new(&[1, 1, 2], vec![2.0, 4.0]).unwrap();
        let ones = Tensor::full(&[1], 1.0).unwrap();
        let zeros = Tensor::zeros(&[1]).unwrap();
        let rm = Tensor::new(&[1], vec![2.0]).unwrap();
        let rv = Tensor::new(&[1], vec![4.0]).unwrap();
        let (y, upd) = tape
            .batch_norm(&x, &ones, &zeros, &rm, &rv, false, 0.1)
            .unwrap();
        assert!(upd.is_none());
        assert!((y.data()[0] - 0.0).abs() < 1e-3);
        assert!((y.data()[1] - 1.0).abs() < 1e-3);
    }
}
