//! Training losses: perceptual feature distance (entire frame plus salient
//! crop), wavelet-domain loss, masked photometric loss, and edge-aware
//! disparity smoothness, combined with a fixed regularization weight on the
//! wavelet term.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pam::ValidMask;
use crate::saliency::FusedMask;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::weights::{uniform_init, BoundParams, ParamSet};

/// SSIM stabilizers on [0,1] intensities.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Blend weights for the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Weight on the wavelet term.
    pub alpha_reg: f64,
    /// SSIM/MAE balance inside the photometric term.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_reg: 0.05,
            gamma: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_reg < 0.0 || !self.alpha_reg.is_finite() {
            return Err(Error::contract("alpha_reg must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::contract("gamma must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Scalar value of every term for one step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub l_vgg_entire: f64,
    pub l_vgg_salient: f64,
    pub l_vgg_total: f64,
    pub l_dwt: f64,
    pub l_photo: f64,
    pub l_smooth: f64,
    pub total: f64,
}

/// The on-tape scalar for every term, pre-combination.
pub struct LossTerms<S: Scalar> {
    pub vgg_entire: Tensor<S>,
    pub vgg_salient: Tensor<S>,
    pub dwt: Tensor<S>,
    pub photo: Tensor<S>,
    pub smooth: Tensor<S>,
}

/// Feature-extractor stage output channels.
const STAGE_CHANNELS: [usize; 3] = [64, 128, 256];

/// Register the frozen three-stage feature extractor under `featex.*`.
/// Each stage is a 3x3 conv whose pre-activation output is the tap;
/// stages are joined by ReLU and 2x2 average pooling.
pub fn register_extractor_params(params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut prev = 3;
    for (i, &out) in STAGE_CHANNELS.iter().enumerate() {
        let p = |s: &str| format!("featex.conv{}.{s}", i + 1);
        params.insert(&p("weight"), uniform_init(rng, &[out, prev, 3, 3], prev * 9), false);
        params.insert(&p("bias"), Tensor::zeros(&[out])?, false);
        prev = out;
    }
    Ok(())
}

/// Pre-activation taps of the three extractor stages for an RGB frame.
pub fn extract_features<S: Scalar>(
    tape: &Tape<S>,
    image: &Tensor<S>,
    p: &BoundParams<S>,
) -> Result<[Tensor<S>; 3]> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::dimension(format!(
            "extractor expects [3,H,W], got {:?}",
            image.shape()
        )));
    }
    let mut taps = Vec::with_capacity(3);
    let mut x = image.clone();
    for i in 1..=STAGE_CHANNELS.len() {
        let tap = tape.conv2d(
            &x,
            p.get(&format!("featex.conv{i}.weight"))?,
            p.get(&format!("featex.conv{i}.bias"))?,
            1,
            1,
        )?;
        taps.push(tap.clone());
        if i < STAGE_CHANNELS.len() {
            let a = tape.relu(&tap)?;
            let a = tape.pad_even(&a)?;
            x = tape.avg_pool2(&a)?;
        }
    }
    Ok([taps[0].clone(), taps[1].clone(), taps[2].clone()])
}

/// Mean squared difference over all elements.
fn mse<S: Scalar>(tape: &Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(&d, &d)?;
    tape.mean_all(&sq)
}

/// Sum of per-stage feature MSEs between two same-extent frames.
fn staged_feature_mse<S: Scalar>(
    tape: &Tape<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    p: &BoundParams<S>,
) -> Result<Tensor<S>> {
    let fa = extract_features(tape, a, p)?;
    let fb = extract_features(tape, b, p)?;
    let mut acc = mse(tape, &fa[0], &fb[0])?;
    for s in 1..3 {
        let term = mse(tape, &fa[s], &fb[s])?;
        acc = tape.add(&acc, &term)?;
    }
    Ok(acc)
}

/// Tight bounding box of strictly positive mask values, `(y0, y1, x0, x1)`
/// half-open; `None` when the mask is identically zero.
fn mask_bbox(mask: &FusedMask) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let vals = mask.values().data();
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    for y in 0..h {
        for x in 0..w {
            if vals[y * w + x] > 0.0 {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 >= y1 {
        None
    } else {
        Some((y0, y1, x0, x1))
    }
}

/// Perceptual loss between a source frame and a retargeted frame. The
/// retargeted frame is first resized to the source extents; the salient
/// term repeats the comparison on the mask's bounding-box crop and is zero
/// for an empty mask. Returns (entire, salient, total).
pub fn perceptual_loss<S: Scalar>(
    tape: &Tape<S>,
    src: &Tensor<S>,
    ret: &Tensor<S>,
    src_mask: &FusedMask,
    p: &BoundParams<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    if src.rank() != 3 || src.shape()[0] != 3 || ret.rank() != 3 || ret.shape()[0] != 3 {
        return Err(Error::dimension("perceptual_loss expects [3,H,W] frames"));
    }
    let (h, w) = (src.shape()[1], src.shape()[2]);
    if src_mask.height() != h || src_mask.width() != w {
        return Err(Error::dimension(format!(
            "mask {}x{} does not match source {}x{}",
            src_mask.height(),
            src_mask.width(),
            h,
            w
        )));
    }
    let ret = if ret.shape()[1] == h && ret.shape()[2] == w {
        ret.clone()
    } else {
        tape.resize_bilinear(ret, h, w)?
    };
    let entire = staged_feature_mse(tape, src, &ret, p)?;
    let salient = match mask_bbox(src_mask) {
        None => Tensor::zeros(&[1])?,
        Some((y0, y1, x0, x1)) => {
            let crop = |t: &Tensor<S>| -> Result<Tensor<S>> {
                let c = tape.narrow(t, 1, y0, y1 - y0)?;
                tape.narrow(&c, 2, x0, x1 - x0)
            };
            staged_feature_mse(tape, &crop(src)?, &crop(&ret)?, p)?
        }
    };
    let total = tape.add(&entire, &salient)?;
    Ok((entire, salient, total))
}

/// Single-level orthonormal Haar analysis: `(LL, LH, HL, HH)`, each
/// `[C, ceil(H/2), ceil(W/2)]`. Odd extents are padded by edge replication
/// first.
pub fn dwt2<S: Scalar>(
    tape: &Tape<S>,
    frame: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>)> {
    let x = tape.pad_even(frame)?;
    let bands = tape.haar2(&x)?;
    let c = frame.shape()[0];
    let split = |band: usize| -> Result<Tensor<S>> {
        let parts: Result<Vec<Tensor<S>>> =
            (0..c).map(|ch| tape.narrow(&bands, 0, 4 * ch + band, 1)).collect();
        let parts = parts?;
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        tape.concat(&refs, 0)
    };
    Ok((split(0)?, split(1)?, split(2)?, split(3)?))
}

/// Inverse of [`dwt2`] back onto `h x w` (any padding added for odd extents
/// is cropped away).
pub fn idwt2<S: Scalar>(
    tape: &Tape<S>,
    subbands: &(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>),
    h: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let (ll, lh, hl, hh) = subbands;
    let c = ll.shape()[0];
    let mut parts = Vec::with_capacity(4 * c);
    for ch in 0..c {
        for band in [ll, lh, hl, hh] {
            parts.push(tape.narrow(band, 0, ch, 1)?);
        }
    }
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    let packed = tape.concat(&refs, 0)?;
    let (he, we) = (h + h % 2, w + w % 2);
    let full = tape.haar2_inverse(&packed, he, we)?;
    let out = tape.narrow(&full, 1, 0, h)?;
    tape.narrow(&out, 2, 0, w)
}

/// Wavelet loss for a stereo pair: per view, MSE between the forward
/// subbands plus MSE between the analysis-synthesis reconstructions, with
/// the retargeted frame resized to source extents first; averaged over the
/// two views.
pub fn dwt_loss<S: Scalar>(
    tape: &Tape<S>,
    src_l: &Tensor<S>,
    src_r: &Tensor<S>,
    ret_l: &Tensor<S>,
    ret_r: &Tensor<S>,
) -> Result<Tensor<S>> {
    let view = |src: &Tensor<S>, ret: &Tensor<S>| -> Result<Tensor<S>> {
        let (h, w) = (src.shape()[1], src.shape()[2]);
        let ret = if ret.shape()[1] == h && ret.shape()[2] == w {
            ret.clone()
        } else {
            tape.resize_bilinear(ret, h, w)?
        };
        let coeff_s = tape.haar2(&tape.pad_even(src)?)?;
        let coeff_r = tape.haar2(&tape.pad_even(&ret)?)?;
        let band_term = mse(tape, &coeff_s, &coeff_r)?;
        let rec_s = idwt2(tape, &dwt2(tape, src)?, h, w)?;
        let rec_r = idwt2(tape, &dwt2(tape, &ret)?, h, w)?;
        let rec_term = mse(tape, &rec_s, &rec_r)?;
        tape.add(&band_term, &rec_term)
    };
    let l = view(src_l, ret_l)?;
    let r = view(src_r, ret_r)?;
    let sum = tape.add(&l, &r)?;
    tape.scale(&sum, S::c(0.5))
}

/// Per-pixel local SSIM over valid 3x3 windows, averaged across channels:
/// `[H-2, W-2]`.
fn ssim_map<S: Scalar>(tape: &Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let mu_a = tape.mean_filter3(a)?;
    let mu_b = tape.mean_filter3(b)?;
    let aa = tape.mean_filter3(&tape.mul(a, a)?)?;
    let bb = tape.mean_filter3(&tape.mul(b, b)?)?;
    let ab = tape.mean_filter3(&tape.mul(a, b)?)?;
    let mu_ab = tape.mul(&mu_a, &mu_b)?;
    let var_a = tape.sub(&aa, &tape.mul(&mu_a, &mu_a)?)?;
    let var_b = tape.sub(&bb, &tape.mul(&mu_b, &mu_b)?)?;
    let cov = tape.sub(&ab, &mu_ab)?;

    let c1 = S::c(SSIM_C1);
    let c2 = S::c(SSIM_C2);
    let num1 = tape.add_scalar(&tape.scale(&mu_ab, S::c(2.0))?, c1)?;
    let num2 = tape.add_scalar(&tape.scale(&cov, S::c(2.0))?, c2)?;
    let den1 = tape.add_scalar(
        &tape.add(&tape.mul(&mu_a, &mu_a)?, &tape.mul(&mu_b, &mu_b)?)?,
        c1,
    )?;
    let den2 = tape.add_scalar(&tape.add(&var_a, &var_b)?, c2)?;
    let ssim = tape.div(&tape.mul(&num1, &num2)?, &tape.mul(&den1, &den2)?)?;
    tape.mean_axis(&ssim, 0)
}

/// Masked photometric loss between the left frame and the attention-warped
/// right frame: `gamma * (1 - SSIM)/2 + (1 - gamma) * MAE` per pixel,
/// averaged over valid pixels. SSIM uses 3x3 windows, so the comparison is
/// restricted to interior pixels; a mask with no valid interior pixel is a
/// contract error.
pub fn photometric_loss<S: Scalar>(
    tape: &Tape<S>,
    left: &Tensor<S>,
    warped_right: &Tensor<S>,
    mask: &ValidMask,
    gamma: f64,
) -> Result<Tensor<S>> {
    if left.rank() != 3 || left.shape() != warped_right.shape() {
        return Err(Error::dimension(format!(
            "photometric_loss: frames {:?} and {:?} differ",
            left.shape(),
            warped_right.shape()
        )));
    }
    let (h, w) = (left.shape()[1], left.shape()[2]);
    if mask.height() != h || mask.width() != w {
        return Err(Error::dimension("validity mask does not match frame extents"));
    }
    if h < 3 || w < 3 {
        return Err(Error::contract("photometric_loss needs at least 3x3 frames"));
    }
    let mut flags = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            flags.push(if mask.is_valid(y, x) { S::one() } else { S::zero() });
        }
    }
    let n = flags.iter().filter(|v| **v > S::zero()).count();
    if n == 0 {
        return Err(Error::contract("no valid pixel inside the SSIM interior"));
    }
    let flags = Tensor::new(&[h - 2, w - 2], flags)?;

    let ssim = ssim_map(tape, left, warped_right)?;
    let one_minus = tape.scale(&tape.add_scalar(&ssim, S::c(-1.0))?, S::c(-0.5))?;

    let diff = tape.abs(&tape.sub(left, warped_right)?)?;
    let mae_full = tape.mean_axis(&diff, 0)?; // [H, W]
    let mae = tape.narrow(&tape.narrow(&mae_full, 0, 1, h - 2)?, 1, 1, w - 2)?;

    let blend = tape.add(
        &tape.scale(&one_minus, S::c(gamma))?,
        &tape.scale(&mae, S::c(1.0 - gamma))?,
    )?;
    let masked = tape.mul(&blend, &flags)?;
    let total = tape.sum_all(&masked)?;
    tape.scale(&total, S::c(1.0 / n as f64))
}

/// Edge-aware disparity smoothness: mean of `|dD| * exp(-|dI|)` over forward
/// differences in x and y, with the image gradient magnitude summed over
/// channels.
pub fn smoothness_loss<S: Scalar>(
    tape: &Tape<S>,
    disparity: &Tensor<S>,
    image: &Tensor<S>,
) -> Result<Tensor<S>> {
    if disparity.rank() != 2 || image.rank() != 3 || disparity.shape() != &image.shape()[1..] {
        return Err(Error::dimension(format!(
            "smoothness_loss: disparity {:?} does not match image {:?}",
            disparity.shape(),
            image.shape()
        )));
    }
    let (h, w) = (disparity.shape()[0], disparity.shape()[1]);
    let term = |axis_d: usize, len: usize| -> Result<Tensor<S>> {
        let (d_hi, d_lo) = (
            tape.narrow(disparity, axis_d, 1, len)?,
            tape.narrow(disparity, axis_d, 0, len)?,
        );
        let dd = tape.abs(&tape.sub(&d_hi, &d_lo)?)?;
        let (i_hi, i_lo) = (
            tape.narrow(image, axis_d + 1, 1, len)?,
            tape.narrow(image, axis_d + 1, 0, len)?,
        );
        let di = tape.abs(&tape.sub(&i_hi, &i_lo)?)?;
        let di = tape.sum_axis(&di, 0)?;
        let damp = tape.exp(&tape.scale(&di, S::c(-1.0))?)?;
        tape.mean_all(&tape.mul(&dd, &damp)?)
    };
    let x_term = term(1, w - 1)?;
    let y_term = term(0, h - 1)?;
    tape.add(&x_term, &y_term)
}

/// Combine the terms per the objective
/// `total = vgg_entire + vgg_salient + alpha_reg * dwt + photo + smooth`
/// and read every scalar out into a report.
pub fn total_loss<S: Scalar>(
    tape: &Tape<S>,
    terms: &LossTerms<S>,
    weights: &LossWeights,
) -> Result<(Tensor<S>, LossReport)> {
    weights.validate()?;
    let vgg_total = tape.add(&terms.vgg_entire, &terms.vgg_salient)?;
    let dwt_scaled = tape.scale(&terms.dwt, S::c(weights.alpha_reg))?;
    let mut total = tape.add(&vgg_total, &dwt_scaled)?;
    total = tape.add(&total, &terms.photo)?;
    total = tape.add(&total, &terms.smooth)?;
    let scalar = |t: &Tensor<S>| t.data()[0].to_f64();
    let report = LossReport {
        l_vgg_entire: scalar(&terms.vgg_entire),
        l_vgg_salient: scalar(&terms.vgg_salient),
        l_vgg_total: scalar(&vgg_total),
        l_dwt: scalar(&terms.dwt),
        l_photo: scalar(&terms.photo),
        l_smooth: scalar(&terms.smooth),
        total: scalar(&total),
    };
    Ok((total, report))
}
