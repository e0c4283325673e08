//! Reconstruction head: fold the parallax-fused features back together with
//! the warped stream, restore the source width, and decode to an RGB frame
//! so the network can train against its own input.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::warp::{inverse_warp, ColumnMapping};
use crate::weights::{uniform_init, BoundParams, ParamSet};

/// Decoder conv chain: output channels, kernel size, ReLU flag. The first
/// kernel is 5x5, the rest 3x3; padding preserves extents; the final block
/// emits RGB without an activation.
const BLOCKS: [(usize, usize, bool); 5] = [
    (64, 5, true),
    (128, 3, true),
    (512, 3, true),
    (128, 3, true),
    (3, 3, false),
];

/// Channel count the fused streams are reconciled to before decoding.
pub const RECON_CHANNELS: usize = 64;

/// Register the 1x1 reconciliation projection and the five decoder conv
/// blocks under `recon.*`. `c_warped` is the channel count of the warped
/// stream joining the 64-channel parallax features.
pub fn register_params(params: &mut ParamSet, rng: &mut ChaCha8Rng, c_warped: usize) -> Result<()> {
    if c_warped == 0 {
        return Err(Error::contract("warped stream channels must be positive"));
    }
    params.insert(
        "recon.project.weight",
        uniform_init(rng, &[RECON_CHANNELS, c_warped, 1, 1], c_warped),
        true,
    );
    params.insert("recon.project.bias", Tensor::zeros(&[RECON_CHANNELS])?, true);
    let mut prev = RECON_CHANNELS;
    for (i, &(out, k, _)) in BLOCKS.iter().enumerate() {
        let p = |s: &str| format!("recon.conv{}.{s}", i + 1);
        params.insert(&p("weight"), uniform_init(rng, &[out, prev, k, k], prev * k * k), true);
        params.insert(&p("bias"), Tensor::zeros(&[out])?, true);
        prev = out;
    }
    Ok(())
}

/// Decode a reconstructed source-width frame.
///
/// `pam_out` is `[64, H, W']`, `warped` is `[C_w, H, W']`; the warped stream
/// is projected to 64 channels and added, the sum is mapped back onto the
/// source grid through `mapping`, and the conv chain decodes to `[3, H, W]`.
pub fn reconstruct<S: Scalar>(
    tape: &Tape<S>,
    pam_out: &Tensor<S>,
    warped: &Tensor<S>,
    mapping: &ColumnMapping,
    p: &BoundParams<S>,
) -> Result<Tensor<S>> {
    if pam_out.rank() != 3 || warped.rank() != 3 {
        return Err(Error::dimension("reconstruct expects [C,H,W'] inputs"));
    }
    if pam_out.shape()[0] != RECON_CHANNELS {
        return Err(Error::dimension(format!(
            "parallax stream has {} channels, expected {RECON_CHANNELS}",
            pam_out.shape()[0]
        )));
    }
    if pam_out.shape()[1..] != warped.shape()[1..] {
        return Err(Error::dimension(format!(
            "parallax {:?} and warped {:?} streams differ in extents",
            pam_out.shape(),
            warped.shape()
        )));
    }
    let proj = tape.conv2d(
        warped,
        p.get("recon.project.weight")?,
        p.get("recon.project.bias")?,
        0,
        1,
    )?;
    let x = tape.add(pam_out, &proj)?;
    let mut x = inverse_warp(tape, &x, mapping)?;
    for (i, &(_, k, relu)) in BLOCKS.iter().enumerate() {
        x = tape.conv2d(
            &x,
            p.get(&format!("recon.conv{}.weight", i + 1))?,
            p.get(&format!("recon.conv{}.bias", i + 1))?,
            k / 2,
            1,
        )?;
        if relu {
            x = tape.relu(&x)?;
        }
    }
    Ok(x)
}
