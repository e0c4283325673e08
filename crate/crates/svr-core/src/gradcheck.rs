//! Central finite-difference validation of every differentiable operation.
//!
//! Each check builds a scalar objective (a randomly weighted sum of the
//! operation's output), computes analytic gradients through the tape, and
//! compares against central differences in double precision. The same suite
//! backs the unit tests and the `gradcheck` CLI subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Finite-difference step. With double precision this keeps truncation and
/// roundoff error both far below the acceptance bound.
const FD_STEP: f64 = 1e-4;

/// Acceptance bound on the error metric.
pub const REL_TOL: f64 = 1e-4;

/// Outcome of a single gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, max_rel_err: f64) -> Self {
        CheckReport {
            name: name.to_string(),
            max_rel_err,
            passed: max_rel_err < REL_TOL,
        }
    }
}

/// Error metric: absolute difference over `max(|a|, |n|, 1)`, i.e. relative
/// for large gradients and absolute near zero (a pure ratio would amplify
/// finite-difference noise on exactly-zero gradients).
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Check the gradient of `f` (any output shape) w.r.t. every entry of
/// `inputs`. The objective is `sum(w ⊙ f(inputs))` with fixed random
/// weights, which exercises the whole Jacobian rather than its row sums.
pub fn check_op<F>(name: &str, seed: u64, inputs: &[Tensor<f64>], f: F) -> CheckReport
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let run = |inputs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let tape = Tape::disabled();
        f(&tape, inputs)
    };
    let probe = match run(inputs) {
        Ok(t) => t,
        Err(e) => panic!("gradcheck {name}: forward failed: {e}"),
    };
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x77ee_d00d);
    let weights: Vec<f64> = (0..probe.numel()).map(|_| wrng.gen_range(-1.0..1.0)).collect();

    let objective = |inputs: &[Tensor<f64>]| -> f64 {
        let out = run(inputs).expect("gradcheck forward");
        out.data().iter().zip(&weights).map(|(&v, &w)| v * w).sum()
    };

    // Analytic pass.
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &leaves).expect("gradcheck tracked forward");
    let w = Tensor::new(out.shape(), weights.clone()).expect("weight tensor");
    let weighted = tape.mul(&out, &w).expect("weighted objective");
    let scalar = tape.sum_all(&weighted).expect("objective sum");
    let grads = tape.backward(&scalar).expect("backward");

    let mut max_err = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf).expect("leaf gradient");
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut dp = inputs[i].data().to_vec();
            dp[j] += FD_STEP;
            plus[i] = Tensor::new(inputs[i].shape(), dp).unwrap();
            let mut dm = inputs[i].data().to_vec();
            dm[j] -= FD_STEP;
            minus[i] = Tensor::new(inputs[i].shape(), dm).unwrap();
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
            let err = rel_err(analytic[j], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    CheckReport::new(name, max_err)
}

/// Uniform random tensor on (lo, hi).
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("random tensor")
}

/// Random tensor kept away from zero (for kinked ops like relu/abs, where a
/// finite difference straddling the kink is meaningless).
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("random tensor")
}

/// Gradient checks for every differentiable tensor operation, three random
/// shapes each.
pub fn op_suite(seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let shapes3: [Vec<usize>; 3] = [vec![2, 3, 4], vec![1, 5, 2], vec![3, 1, 6]];

    for (k, shape) in shapes3.iter().enumerate() {
        let name = |op: &str| format!("{op}/{k}");
        let a = rand_tensor(&mut rng, shape, -1.0, 1.0);
        let b = rand_tensor(&mut rng, shape, -1.0, 1.0);
        let b_off = rand_tensor_off_zero(&mut rng, shape);
        out.push(check_op(&name("add"), seed, &[a.clone(), b.clone()], |t, x| {
            t.add(&x[0], &x[1])
        }));
        out.push(check_op(&name("sub"), seed, &[a.clone(), b.clone()], |t, x| {
            t.sub(&x[0], &x[1])
        }));
        out.push(check_op(&name("mul"), seed, &[a.clone(), b.clone()], |t, x| {
            t.mul(&x[0], &x[1])
        }));
        out.push(check_op(&name("div"), seed, &[a.clone(), b_off.clone()], |t, x| {
            t.div(&x[0], &x[1])
        }));
        let vec = rand_tensor(&mut rng, &[shape[2]], -1.0, 1.0);
        out.push(check_op(&name("add_rowvec"), seed, &[a.clone(), vec], |t, x| {
            t.add_rowvec(&x[0], &x[1])
        }));
        let off = rand_tensor_off_zero(&mut rng, shape);
        out.push(check_op(&name("relu"), seed, &[off.clone()], |t, x| t.relu(&x[0])));
        out.push(check_op(&name("abs"), seed, &[off.clone()], |t, x| t.abs(&x[0])));
        out.push(check_op(&name("exp"), seed, &[a.clone()], |t, x| t.exp(&x[0])));
        out.push(check_op(&name("scale"), seed, &[a.clone()], |t, x| {
            t.scale(&x[0], -1.7)
        }));
        out.push(check_op(&name("add_scalar"), seed, &[a.clone()], |t, x| {
            t.add_scalar(&x[0], 0.4)
        }));
        out.push(check_op(&name("sum_all"), seed, &[a.clone()], |t, x| t.sum_all(&x[0])));
        out.push(check_op(&name("mean_all"), seed, &[a.clone()], |t, x| t.mean_all(&x[0])));
        let axis = k % 3;
        out.push(check_op(&name("sum_axis"), seed, &[a.clone()], move |t, x| {
            t.sum_axis(&x[0], axis)
        }));
        out.push(check_op(&name("mean_axis"), seed, &[a.clone()], move |t, x| {
            t.mean_axis(&x[0], axis)
        }));
        let numel: usize = shape.iter().product();
        out.push(check_op(&name("reshape"), seed, &[a.clone()], move |t, x| {
            t.reshape(&x[0], &[numel])
        }));
        out.push(check_op(&name("permute"), seed, &[a.clone()], |t, x| {
            t.permute(&x[0], &[2, 0, 1])
        }));
        out.push(check_op(&name("concat"), seed, &[a.clone(), b.clone()], |t, x| {
            t.concat(&[&x[0], &x[1]], 1)
        }));
        let extent = shape[2];
        let len = extent.div_ceil(2);
        let start = extent - len;
        out.push(check_op(&name("narrow"), seed, &[a.clone()], move |t, x| {
            t.narrow(&x[0], 2, start, len)
        }));
        out.push(check_op(&name("pad_even"), seed, &[a.clone()], |t, x| t.pad_even(&x[0])));
        out.push(check_op(&name("softmax"), seed, &[a.clone()], |t, x| {
            t.softmax_lastdim(&x[0])
        }));
    }

    for (k, (m, kk, n)) in [(2usize, 3usize, 4usize), (1, 1, 5), (4, 2, 2)].iter().enumerate() {
        let a = rand_tensor(&mut rng, &[*m, *kk], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[*kk, *n], -1.0, 1.0);
        out.push(check_op(&format!("matmul/{k}"), seed, &[a, b], |t, x| {
            t.matmul(&x[0], &x[1])
        }));
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 2, 4], -1.0, 1.0);
        out.push(check_op("matmul/batched", seed, &[a, b], |t, x| {
            t.matmul(&x[0], &x[1])
        }));
    }

    for (k, d) in [3usize, 5, 8].iter().enumerate() {
        let x = rand_tensor(&mut rng, &[2, *d], -1.0, 1.0);
        let g = rand_tensor(&mut rng, &[*d], 0.5, 1.5);
        let b = rand_tensor(&mut rng, &[*d], -0.5, 0.5);
        out.push(check_op(&format!("layer_norm/{k}"), seed, &[x, g, b], |t, x| {
            t.layer_norm(&x[0], &x[1], &x[2])
        }));
    }

    for (k, (c, h, w)) in [(2usize, 3usize, 4usize), (1, 4, 4), (3, 2, 5)].iter().enumerate() {
        let x = rand_tensor(&mut rng, &[*c, *h, *w], -1.0, 1.0);
        let g = rand_tensor(&mut rng, &[*c], 0.5, 1.5);
        let b = rand_tensor(&mut rng, &[*c], -0.5, 0.5);
        let rm = rand_tensor(&mut rng, &[*c], -0.3, 0.3);
        let rv = rand_tensor(&mut rng, &[*c], 0.5, 1.5);
        let (rm2, rv2) = (rm.clone(), rv.clone());
        out.push(check_op(&format!("batch_norm_train/{k}"), seed, &[x.clone(), g.clone(), b.clone()], move |t, x| {
            Ok(t.batch_norm(&x[0], &x[1], &x[2], &rm, &rv, true, 0.1)?.0)
        }));
        out.push(check_op(&format!("batch_norm_eval/{k}"), seed, &[x, g, b], move |t, x| {
            Ok(t.batch_norm(&x[0], &x[1], &x[2], &rm2, &rv2, false, 0.1)?.0)
        }));
    }

    for (k, (ci, co, h, w, kh, kw, pad, stride)) in [
        (1usize, 1usize, 8usize, 8usize, 3usize, 3usize, 1usize, 1usize),
        (2, 3, 5, 6, 3, 3, 1, 1),
        (3, 2, 6, 4, 5, 1, 2, 1),
        (1, 2, 6, 6, 2, 2, 0, 2),
    ]
    .iter()
    .enumerate()
    {
        let x = rand_tensor(&mut rng, &[*ci, *h, *w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[*co, *ci, *kh, *kw], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[*co], -0.5, 0.5);
        let (pad, stride) = (*pad, *stride);
        out.push(check_op(&format!("conv2d/{k}"), seed, &[x, wt, b], move |t, x| {
            t.conv2d(&x[0], &x[1], &x[2], pad, stride)
        }));
    }
    {
        // Composite graph from the contract: conv2d -> relu -> sum.
        let x = rand_tensor(&mut rng, &[1, 8, 8], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[1, 1, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[1], 0.3, 0.6);
        out.push(check_op("conv_relu_sum", seed, &[x, wt, b], |t, x| {
            let y = t.conv2d(&x[0], &x[1], &x[2], 1, 1)?;
            let y = t.relu(&y)?;
            t.sum_all(&y)
        }));
    }

    for (k, (c, h, w)) in [(1usize, 4usize, 6usize), (2, 6, 4), (3, 2, 2)].iter().enumerate() {
        let x = rand_tensor(&mut rng, &[*c, *h, *w], -1.0, 1.0);
        out.push(check_op(&format!("avg_pool2/{k}"), seed, &[x], |t, x| {
            t.avg_pool2(&x[0])
        }));
    }
    for (k, (c, h, w)) in [(1usize, 3usize, 3usize), (2, 4, 5), (1, 5, 3)].iter().enumerate() {
        let x = rand_tensor(&mut rng, &[*c, *h, *w], -1.0, 1.0);
        out.push(check_op(&format!("mean_filter3/{k}"), seed, &[x], |t, x| {
            t.mean_filter3(&x[0])
        }));
    }

    for (k, (c, h, w, wo, per_row)) in [
        (1usize, 3usize, 6usize, 4usize, false),
        (2, 2, 5, 5, true),
        (3, 4, 7, 3, false),
    ]
    .iter()
    .enumerate()
    {
        let img = rand_tensor(&mut rng, &[*c, *h, *w], -1.0, 1.0);
        // Coordinates strictly inside cells: the interpolant is non-smooth
        // at integer coordinates and at the clamping boundary.
        let cshape: Vec<usize> = if *per_row { vec![*h, *wo] } else { vec![*wo] };
        let n: usize = cshape.iter().product();
        let coords: Vec<f64> = (0..n)
            .map(|_| {
                let cell = rng.gen_range(0..*w - 1) as f64;
                cell + rng.gen_range(0.2..0.8)
            })
            .collect();
        let coords = Tensor::new(&cshape, coords).unwrap();
        out.push(check_op(&format!("bilinear_sample/{k}"), seed, &[img, coords], |t, x| {
            t.bilinear_sample(&x[0], &x[1])
        }));
    }

    for (k, (c, h, w, oh, ow)) in [
        (1usize, 4usize, 6usize, 3usize, 8usize),
        (2, 3, 3, 6, 2),
        (1, 5, 2, 5, 7),
    ]
    .iter()
    .enumerate()
    {
        let x = rand_tensor(&mut rng, &[*c, *h, *w], -1.0, 1.0);
        let (oh, ow) = (*oh, *ow);
        out.push(check_op(&format!("resize_bilinear/{k}"), seed, &[x], move |t, x| {
            t.resize_bilinear(&x[0], oh, ow)
        }));
    }

    for (k, (t_, c, h, w, pt, ph, pw)) in [
        (2usize, 1usize, 4usize, 4usize, 1usize, 2usize, 2usize),
        (2, 2, 2, 4, 2, 2, 2),
        (4, 1, 6, 2, 2, 3, 1),
    ]
    .iter()
    .enumerate()
    {
        let x = rand_tensor(&mut rng, &[*t_, *c, *h, *w], -1.0, 1.0);
        let (pt, ph, pw) = (*pt, *ph, *pw);
        out.push(check_op(&format!("patchify_st/{k}"), seed, &[x], move |t, x| {
            t.patchify_st(&x[0], pt, ph, pw)
        }));
    }
    for (k, (c, h, w, ph, pw)) in [
        (1usize, 4usize, 4usize, 2usize, 2usize),
        (3, 2, 6, 2, 3),
        (2, 6, 2, 3, 1),
    ]
    .iter()
    .enumerate()
    {
        let x = rand_tensor(&mut rng, &[*c, *h, *w], -1.0, 1.0);
        let (c, h, w, ph, pw) = (*c, *h, *w, *ph, *pw);
        out.push(check_op(&format!("patchify2/{k}"), seed, &[x], move |t, x| {
            t.patchify2(&x[0], ph, pw)
        }));
        let toks = rand_tensor(&mut rng, &[(h / ph) * (w / pw), c * ph * pw], -1.0, 1.0);
        out.push(check_op(&format!("unpatchify2/{k}"), seed, &[toks], move |t, x| {
            t.unpatchify2(&x[0], c, h, w, ph, pw)
        }));
    }

    for (k, (c, h, w)) in [(1usize, 4usize, 4usize), (2, 2, 6), (3, 6, 2)].iter().enumerate() {
        let x = rand_tensor(&mut rng, &[*c, *h, *w], -1.0, 1.0);
        out.push(check_op(&format!("haar2/{k}"), seed, &[x], |t, x| t.haar2(&x[0])));
        let bands = rand_tensor(&mut rng, &[4 * c, h / 2, w / 2], -1.0, 1.0);
        let (h, w) = (*h, *w);
        out.push(check_op(&format!("haar2_inverse/{k}"), seed, &[bands], move |t, x| {
            t.haar2_inverse(&x[0], h, w)
        }));
    }

    out
}

/// Gradient checks through the composite model blocks and every loss term.
pub fn model_suite(seed: u64) -> Vec<CheckReport> {
    use crate::loss::{
        dwt_loss, perceptual_loss, photometric_loss, register_extractor_params, smoothness_loss,
    };
    use crate::pam::{pam_forward, ValidMask};
    use crate::recon::reconstruct;
    use crate::saliency::FusedMask;
    use crate::svt::{encoder_forward, SvtConfig, TokenGrid};
    use crate::warp::build_mapping;
    use crate::weights::ParamSet;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let cfg = SvtConfig {
            t: 2,
            h: 2,
            w: 2,
            d: 6,
            layers: 1,
            heads: 3,
            mlp_dim: 8,
        };
        let mut params = ParamSet::new();
        crate::svt::register_params(&mut params, &cfg, &mut rng, 3, 3, 4, 4, 4)
            .expect("svt params");
        let tokens = rand_tensor(&mut rng, &[2, 2, 2, 6], -0.8, 0.8);
        let disp = rand_tensor(&mut rng, &[2, 2, 6], -0.8, 0.8);
        out.push(check_op("svt_layer", seed, &[tokens, disp], move |tape, x| {
            let p = params.bind(tape);
            let grid = TokenGrid {
                tokens: x[0].clone(),
                disp: x[1].clone(),
            };
            Ok(encoder_forward(tape, &grid, &cfg, &p)?.tokens)
        }));
    }

    {
        let mut params = ParamSet::new();
        crate::pam::register_params(&mut params, &mut rng, 4).expect("pam params");
        let left = rand_tensor(&mut rng, &[4, 3, 5], -1.0, 1.0);
        let right = rand_tensor(&mut rng, &[4, 3, 5], -1.0, 1.0);
        out.push(check_op("pam_forward", seed, &[left, right], move |tape, x| {
            let p = params.bind(tape);
            let mut updates = Vec::new();
            let fwd = pam_forward(tape, &x[0], &x[1], &p, true, &mut updates)?;
            let fused = tape.sum_all(&fwd.fused)?;
            let disp = tape.sum_all(&fwd.disparity)?;
            tape.add(&fused, &disp)
        }));
    }

    {
        let mut params = ParamSet::new();
        crate::recon::register_params(&mut params, &mut rng, 2).expect("recon params");
        let mapping = build_mapping(&[1.0, 2.0, 1.0, 0.5, 1.0, 1.5], 4).expect("mapping");
        let pam = rand_tensor(&mut rng, &[64, 2, 4], -0.5, 0.5);
        let warped = rand_tensor(&mut rng, &[2, 2, 4], -0.5, 0.5);
        out.push(check_op("reconstruct", seed, &[pam, warped], move |tape, x| {
            let p = params.bind(tape);
            reconstruct(tape, &x[0], &x[1], &mapping, &p)
        }));
    }

    for (k, (h, w)) in [(6, 7), (8, 5), (5, 9)].into_iter().enumerate() {
        let mut params = ParamSet::new();
        register_extractor_params(&mut params, &mut rng).expect("extractor params");
        let src = rand_tensor(&mut rng, &[3, h, w], 0.1, 0.9);
        let ret = rand_tensor(&mut rng, &[3, h, w], 0.1, 0.9);
        let mask = FusedMask::new(
            Tensor::new(
                &[h, w],
                (0..h * w)
                    .map(|i| {
                        let (y, x) = (i / w, i % w);
                        if (1..h - 1).contains(&y) && (1..w - 1).contains(&x) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect::<Vec<f32>>(),
            )
            .expect("mask tensor"),
        )
        .expect("mask");
        let name = format!("perceptual_loss/{k}");
        out.push(check_op(&name, seed, &[src, ret], move |tape, x| {
            let p = params.bind(tape);
            Ok(perceptual_loss(tape, &x[0], &x[1], &mask, &p)?.2)
        }));
    }

    for (k, (h, w)) in [(5, 6), (4, 4), (6, 8)].into_iter().enumerate() {
        let sl = rand_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
        let sr = rand_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
        let rl = rand_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
        let rr = rand_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
        let name = format!("dwt_loss/{k}");
        out.push(check_op(&name, seed, &[sl, sr, rl, rr], |tape, x| {
            dwt_loss(tape, &x[0], &x[1], &x[2], &x[3])
        }));
    }

    for (k, (h, w)) in [(6, 6), (4, 8), (7, 5)].into_iter().enumerate() {
        // Separated intensity bands keep the MAE term away from its kink.
        let left = rand_tensor(&mut rng, &[3, h, w], 0.1, 0.45);
        let right = rand_tensor(&mut rng, &[3, h, w], 0.55, 0.9);
        let mask = ValidMask::all(h, w);
        let name = format!("photometric_loss/{k}");
        out.push(check_op(&name, seed, &[left, right], move |tape, x| {
            photometric_loss(tape, &x[0], &x[1], &mask, 0.85)
        }));
    }

    for (k, (h, w)) in [(5, 6), (4, 4), (6, 3)].into_iter().enumerate() {
        let disp = rand_tensor(&mut rng, &[h, w], -2.0, 2.0);
        let img = rand_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
        let name = format!("smoothness_loss/{k}");
        out.push(check_op(&name, seed, &[disp, img], |tape, x| {
            smoothness_loss(tape, &x[0], &x[1])
        }));
    }

    out
}

/// Every gradient check backing the `gradcheck` CLI subcommand.
pub fn full_suite(seed: u64) -> Vec<CheckReport> {
    let mut reports = op_suite(seed);
    reports.extend(model_suite(seed));
    reports
}
