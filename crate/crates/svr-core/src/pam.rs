//! Parallax attention: per-row left/right attention along the epipolar
//! line, cross-view feature fusion through three conv blocks, a disparity
//! estimate taken as the attention expectation, and a cycle-consistency
//! validity mask for the photometric loss.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::weights::{uniform_init, BoundParams, ParamSet};

/// View direction an attention volume maps from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Rows indexed by left-view columns, distributions over right-view columns.
    RightToLeft,
    /// Rows indexed by right-view columns, distributions over left-view columns.
    LeftToRight,
}

/// Row-stochastic `[H, W, W]` attention between rectified views.
#[derive(Debug, Clone)]
pub struct AttentionVolume<S: Scalar> {
    pub values: Tensor<S>,
    pub direction: Direction,
}

impl<S: Scalar> AttentionVolume<S> {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Per-pixel cycle-consistency flags.
#[derive(Debug, Clone)]
pub struct ValidMask {
    flags: Vec<bool>,
    height: usize,
    width: usize,
}

impl ValidMask {
    /// Mask accepting every pixel.
    pub fn all(height: usize, width: usize) -> Self {
        ValidMask {
            flags: vec![true; height * width],
            height,
            width,
        }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.flags[y * self.width + x]
    }

    /// Number of valid pixels.
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Fusion-conv output channel chain.
const FUSE_CHANNELS: [usize; 3] = [128, 128, 64];

/// Channel count of the fused output.
pub const PAM_OUT_CHANNELS: usize = 64;

/// Register query/key 1x1 convs and the three fusion conv blocks under
/// `pam.*`. `c_in` is the per-view feature channel count.
pub fn register_params(params: &mut ParamSet, rng: &mut ChaCha8Rng, c_in: usize) -> Result<()> {
    if c_in == 0 {
        return Err(Error::contract("pam feature channels must be positive"));
    }
    params.insert("pam.query.weight", uniform_init(rng, &[c_in, c_in, 1, 1], c_in), true);
    params.insert("pam.query.bias", Tensor::zeros(&[c_in])?, true);
    params.insert("pam.key.weight", uniform_init(rng, &[c_in, c_in, 1, 1], c_in), true);
    params.insert("pam.key.bias", Tensor::zeros(&[c_in])?, true);

    let mut prev = 2 * c_in;
    for (i, &out) in FUSE_CHANNELS.iter().enumerate() {
        let p = |s: &str| format!("pam.fuse{}.{s}", i + 1);
        params.insert(&p("conv.weight"), uniform_init(rng, &[out, prev, 3, 3], prev * 9), true);
        params.insert(&p("conv.bias"), Tensor::zeros(&[out])?, true);
        params.insert(&p("bn.gamma"), Tensor::full(&[out], 1.0)?, true);
        params.insert(&p("bn.beta"), Tensor::zeros(&[out])?, true);
        params.insert(&p("bn.running_mean"), Tensor::zeros(&[out])?, false);
        params.insert(&p("bn.running_var"), Tensor::full(&[out], 1.0)?, false);
        prev = out;
    }
    Ok(())
}

/// One direction of epipolar attention: `softmax_v(Q[.,y,u] . K[.,y,v] / sqrt(C))`.
fn epipolar_softmax<S: Scalar>(
    tape: &Tape<S>,
    query_feat: &Tensor<S>,
    key_feat: &Tensor<S>,
    p: &BoundParams<S>,
) -> Result<Tensor<S>> {
    let c = query_feat.shape()[0];
    let q = tape.conv2d(
        query_feat,
        p.get("pam.query.weight")?,
        p.get("pam.query.bias")?,
        0,
        1,
    )?;
    let k = tape.conv2d(key_feat, p.get("pam.key.weight")?, p.get("pam.key.bias")?, 0, 1)?;
    let qr = tape.permute(&q, &[1, 2, 0])?; // [H, W, C]
    let kr = tape.permute(&k, &[1, 0, 2])?; // [H, C, W]
    let logits = tape.matmul(&qr, &kr)?; // [H, W, W]
    let logits = tape.scale(&logits, S::c(1.0 / (c as f64).sqrt()))?;
    tape.softmax_lastdim(&logits)
}

/// Attention volumes in both directions from per-view features `[C, H, W]`.
pub fn pam_attention<S: Scalar>(
    tape: &Tape<S>,
    left_feat: &Tensor<S>,
    right_feat: &Tensor<S>,
    p: &BoundParams<S>,
) -> Result<(AttentionVolume<S>, AttentionVolume<S>)> {
    if left_feat.rank() != 3 || left_feat.shape() != right_feat.shape() {
        return Err(Error::dimension(format!(
            "pam_attention expects matching [C,H,W] features, got {:?} and {:?}",
            left_feat.shape(),
            right_feat.shape()
        )));
    }
    let a_rl = epipolar_softmax(tape, left_feat, right_feat, p)?;
    let a_lr = epipolar_softmax(tape, right_feat, left_feat, p)?;
    Ok((
        AttentionVolume {
            values: a_rl,
            direction: Direction::RightToLeft,
        },
        AttentionVolume {
            values: a_lr,
            direction: Direction::LeftToRight,
        },
    ))
}

/// Transport features through an attention volume:
/// `T[c,y,u] = sum_v A[y,u,v] * feat[c,y,v]`.
pub fn transport<S: Scalar>(
    tape: &Tape<S>,
    attention: &AttentionVolume<S>,
    feat: &Tensor<S>,
) -> Result<Tensor<S>> {
    let a = &attention.values;
    if feat.rank() != 3 || a.shape()[0] != feat.shape()[1] || a.shape()[2] != feat.shape()[2] {
        return Err(Error::dimension(format!(
            "transport: attention {:?} does not match features {:?}",
            a.shape(),
            feat.shape()
        )));
    }
    let fr = tape.permute(feat, &[1, 2, 0])?; // [H, W_v, C]
    let t = tape.matmul(a, &fr)?; // [H, W_u, C]
    tape.permute(&t, &[2, 0, 1])
}

/// conv(3x3, pad 1) -> ReLU -> BN with parameters under `prefix`. In
/// training mode the updated running statistics are appended to `updates`
/// for the caller to write back after the step.
fn fuse_block<S: Scalar>(
    tape: &Tape<S>,
    x: &Tensor<S>,
    p: &BoundParams<S>,
    prefix: &str,
    training: bool,
    updates: &mut Vec<(String, Tensor<f32>)>,
) -> Result<Tensor<S>> {
    let y = tape.conv2d(
        x,
        p.get(&format!("{prefix}.conv.weight"))?,
        p.get(&format!("{prefix}.conv.bias"))?,
        1,
        1,
    )?;
    let y = tape.relu(&y)?;
    let (y, stats) = tape.batch_norm(
        &y,
        p.get(&format!("{prefix}.bn.gamma"))?,
        p.get(&format!("{prefix}.bn.beta"))?,
        p.get(&format!("{prefix}.bn.running_mean"))?,
        p.get(&format!("{prefix}.bn.running_var"))?,
        training,
        0.1,
    )?;
    if let Some((rm, rv)) = stats {
        updates.push((format!("{prefix}.bn.running_mean"), rm.cast()));
        updates.push((format!("{prefix}.bn.running_var"), rv.cast()));
    }
    Ok(y)
}

/// Fuse left features with attention-transported right features: channel
/// concatenation followed by the three fusion conv blocks.
pub fn pam_fuse<S: Scalar>(
    tape: &Tape<S>,
    left_feat: &Tensor<S>,
    right_feat: &Tensor<S>,
    a_rl: &AttentionVolume<S>,
    p: &BoundParams<S>,
    training: bool,
    updates: &mut Vec<(String, Tensor<f32>)>,
) -> Result<Tensor<S>> {
    let transported = transport(tape, a_rl, right_feat)?;
    let mut x = tape.concat(&[left_feat, &transported], 0)?;
    for i in 1..=FUSE_CHANNELS.len() {
        x = fuse_block(tape, &x, p, &format!("pam.fuse{i}"), training, updates)?;
    }
    Ok(x)
}

/// Disparity as the attention expectation of the horizontal offset:
/// `d(y,u) = sum_v A[y,u,v] * (u - v)`. Differentiable; may be negative for
/// untrained weights, so the estimate stays a plain tensor rather than an
/// ingested disparity map.
pub fn pam_disparity<S: Scalar>(
    tape: &Tape<S>,
    a_rl: &AttentionVolume<S>,
) -> Result<Tensor<S>> {
    let shape = a_rl.values.shape();
    let (h, w) = (shape[0], shape[1]);
    let mut offsets = Vec::with_capacity(h * w * w);
    for _y in 0..h {
        for u in 0..w {
            for v in 0..w {
                offsets.push(S::c(u as f64 - v as f64));
            }
        }
    }
    let offsets = Tensor::new(&[h, w, w], offsets)?;
    let weighted = tape.mul(&a_rl.values, &offsets)?;
    tape.sum_axis(&weighted, 2)
}

/// Cycle-consistency validity: pixel (y, u) is valid when the argmax
/// round trip left -> right -> left lands within `tau` pixels of u.
pub fn valid_mask<S: Scalar>(
    a_rl: &AttentionVolume<S>,
    a_lr: &AttentionVolume<S>,
    tau: f64,
) -> Result<ValidMask> {
    if a_rl.values.shape() != a_lr.values.shape() {
        return Err(Error::dimension(format!(
            "valid_mask: volumes {:?} and {:?} differ",
            a_rl.values.shape(),
            a_lr.values.shape()
        )));
    }
    let (h, w) = (a_rl.height(), a_rl.width());
    let argmax = |row: &[S]| -> usize {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    };
    let rl = a_rl.values.data();
    let lr = a_lr.values.data();
    let mut flags = Vec::with_capacity(h * w);
    for y in 0..h {
        for u in 0..w {
            let v_star = argmax(&rl[(y * w + u) * w..(y * w + u + 1) * w]);
            let u_star = argmax(&lr[(y * w + v_star) * w..(y * w + v_star + 1) * w]);
            flags.push((u_star as f64 - u as f64).abs() <= tau);
        }
    }
    Ok(ValidMask {
        flags,
        height: h,
        width: w,
    })
}

/// Everything the downstream losses need from one PAM pass.
pub struct PamOutput<S: Scalar> {
    pub fused: Tensor<S>,
    pub a_rl: AttentionVolume<S>,
    pub a_lr: AttentionVolume<S>,
    pub disparity: Tensor<S>,
}

/// Full forward: attention both ways, fusion, and the disparity estimate.
pub fn pam_forward<S: Scalar>(
    tape: &Tape<S>,
    left_feat: &Tensor<S>,
    right_feat: &Tensor<S>,
    p: &BoundParams<S>,
    training: bool,
    updates: &mut Vec<(String, Tensor<f32>)>,
) -> Result<PamOutput<S>> {
    let (a_rl, a_lr) = pam_attention(tape, left_feat, right_feat, p)?;
    let fused = pam_fuse(tape, left_feat, right_feat, &a_rl, p, training, updates)?;
    let disparity = pam_disparity(tape, &a_rl)?;
    Ok(PamOutput {
        fused,
        a_rl,
        a_lr,
        disparity,
    })
}
