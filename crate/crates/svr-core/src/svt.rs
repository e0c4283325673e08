//! Stereo video transformer: stereo patch embedding over one view of a clip
//! plus its middle-frame disparity, followed by encoder layers whose
//! attention heads are factorized over the spatial, temporal, and disparity
//! token axes, and a de-patch projection back to a frame-aligned feature map.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::weights::{uniform_init, BoundParams, ParamSet};

/// Patch extents and encoder dimensions.
#[derive(Debug, Clone, Copy)]
pub struct SvtConfig {
    /// Temporal patch extent.
    pub t: usize,
    /// Spatial patch height.
    pub h: usize,
    /// Spatial patch width.
    pub w: usize,
    /// Token dimension.
    pub d: usize,
    /// Encoder layer count.
    pub layers: usize,
    /// Attention head count (d must divide evenly).
    pub heads: usize,
    /// Hidden width of the per-layer MLP.
    pub mlp_dim: usize,
}

impl Default for SvtConfig {
    fn default() -> Self {
        SvtConfig {
            t: 2,
            h: 16,
            w: 16,
            d: 96,
            layers: 2,
            heads: 3,
            mlp_dim: 192,
        }
    }
}

impl SvtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::contract("svt config extents must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::contract(format!(
                "token dimension {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Token grid extents for a clip of the given extents (floor division;
    /// remainder frames and pixels are cropped).
    pub fn grid(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        if frames < self.t || height < self.h || width < self.w {
            return Err(Error::dimension(format!(
                "clip {frames}x{height}x{width} smaller than patch {}x{}x{}",
                self.t, self.h, self.w
            )));
        }
        Ok((frames / self.t, height / self.h, width / self.w))
    }
}

/// Token axis an attention head is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadAxis {
    Spatial,
    Temporal,
    Disparity,
}

/// Default round-robin assignment of heads to axes.
pub fn head_axes(heads: usize) -> Vec<HeadAxis> {
    (0..heads)
        .map(|i| match i % 3 {
            0 => HeadAxis::Spatial,
            1 => HeadAxis::Temporal,
            _ => HeadAxis::Disparity,
        })
        .collect()
}

/// Encoder state: the fused spatio-temporal token grid and the disparity
/// token stream that disparity heads read from.
#[derive(Debug, Clone)]
pub struct TokenGrid<S: Scalar> {
    /// `[n_t, n_h, n_w, d]`.
    pub tokens: Tensor<S>,
    /// `[n_h, n_w, d]`, fixed across encoder layers.
    pub disp: Tensor<S>,
}

impl<S: Scalar> TokenGrid<S> {
    pub fn extents(&self) -> (usize, usize, usize, usize) {
        let s = self.tokens.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Register all encoder parameters under `svt.*`.
///
/// `c_in` is the clip channel count, `c_out` the feature-map channel count,
/// and the frame extents fix the positional-embedding grid.
#[allow(clippy::too_many_arguments)]
pub fn register_params(
    params: &mut ParamSet,
    cfg: &SvtConfig,
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<()> {
    cfg.validate()?;
    let (_, nh, nw) = cfg.grid(frames, height, width)?;
    let st_dim = cfg.t * c_in * cfg.h * cfg.w;
    let disp_dim = cfg.h * cfg.w;
    let dh = cfg.head_dim();

    params.insert("svt.embed.st.weight", uniform_init(rng, &[st_dim, cfg.d], st_dim), true);
    params.insert("svt.embed.st.bias", Tensor::zeros(&[cfg.d])?, true);
    params.insert(
        "svt.embed.disp.weight",
        uniform_init(rng, &[disp_dim, cfg.d], disp_dim),
        true,
    );
    params.insert("svt.embed.disp.bias", Tensor::zeros(&[cfg.d])?, true);
    params.insert("svt.pos", uniform_init(rng, &[nh, nw, cfg.d], cfg.d), true);

    for l in 0..cfg.layers {
        let p = |s: &str| format!("svt.layer{l}.{s}");
        params.insert(&p("ln1.gamma"), Tensor::full(&[cfg.d], 1.0)?, true);
        params.insert(&p("ln1.beta"), Tensor::zeros(&[cfg.d])?, true);
        for hd in 0..cfg.heads {
            params.insert(&p(&format!("head{hd}.wq")), uniform_init(rng, &[cfg.d, dh], cfg.d), true);
            params.insert(&p(&format!("head{hd}.wk")), uniform_init(rng, &[cfg.d, dh], cfg.d), true);
            params.insert(&p(&format!("head{hd}.wv")), uniform_init(rng, &[cfg.d, dh], cfg.d), true);
        }
        params.insert(&p("proj.weight"), uniform_init(rng, &[cfg.d, cfg.d], cfg.d), true);
        params.insert(&p("proj.bias"), Tensor::zeros(&[cfg.d])?, true);
        params.insert(&p("ln2.gamma"), Tensor::full(&[cfg.d], 1.0)?, true);
        params.insert(&p("ln2.beta"), Tensor::zeros(&[cfg.d])?, true);
        params.insert(&p("mlp.fc1.weight"), uniform_init(rng, &[cfg.d, cfg.mlp_dim], cfg.d), true);
        params.insert(&p("mlp.fc1.bias"), Tensor::zeros(&[cfg.mlp_dim])?, true);
        params.insert(
            &p("mlp.fc2.weight"),
            uniform_init(rng, &[cfg.mlp_dim, cfg.d], cfg.mlp_dim),
            true,
        );
        params.insert(&p("mlp.fc2.bias"), Tensor::zeros(&[cfg.d])?, true);
    }

    let out_dim = cfg.h * cfg.w * c_out;
    params.insert("svt.depatch.weight", uniform_init(rng, &[cfg.d, out_dim], cfg.d), true);
    params.insert("svt.depatch.bias", Tensor::zeros(&[out_dim])?, true);
    Ok(())
}

/// `x @ w + b` over the last axis.
fn linear<S: Scalar>(
    tape: &Tape<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let shape = x.shape().to_vec();
    let k = *shape.last().expect("rank >= 1");
    let rows = x.numel() / k;
    let flat = tape.reshape(x, &[rows, k])?;
    let y = tape.matmul(&flat, w)?;
    let y = tape.add_rowvec(&y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = w.shape()[1];
    tape.reshape(&y, &out_shape)
}

/// Concatenate `n` copies of `x` along a fresh leading axis.
fn repeat_leading<S: Scalar>(tape: &Tape<S>, x: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let one = tape.reshape(x, &shape)?;
    let parts: Vec<&Tensor<S>> = std::iter::repeat(&one).take(n).collect();
    tape.concat(&parts, 0)
}

/// Embed one view of a stereo clip (`[T, C, H, W]`) and its middle-frame
/// disparity (`[H, W]`) into a [`TokenGrid`].
///
/// Non-tiling remainders are cropped (floor semantics). Disparity tokens are
/// added into every temporal slice before the encoder; positional
/// embeddings, stored for one temporal slice, are repeated across the
/// temporal axis. A positional grid trained at different frame extents is
/// resized bilinearly.
pub fn stereo_patch_embed<S: Scalar>(
    tape: &Tape<S>,
    frames: &Tensor<S>,
    disparity: &Tensor<S>,
    cfg: &SvtConfig,
    p: &BoundParams<S>,
) -> Result<TokenGrid<S>> {
    if frames.rank() != 4 {
        return Err(Error::dimension(format!(
            "stereo_patch_embed expects [T,C,H,W], got {:?}",
            frames.shape()
        )));
    }
    let (t, _c, h, w) = (
        frames.shape()[0],
        frames.shape()[1],
        frames.shape()[2],
        frames.shape()[3],
    );
    if disparity.rank() != 2 || disparity.shape() != [h, w] {
        return Err(Error::dimension(format!(
            "disparity {:?} does not match frames {:?}",
            disparity.shape(),
            frames.shape()
        )));
    }
    let (nt, nh, nw) = cfg.grid(t, h, w)?;

    // Crop to exact tiling.
    let mut clip = frames.clone();
    if nt * cfg.t != t {
        clip = tape.narrow(&clip, 0, 0, nt * cfg.t)?;
    }
    if nh * cfg.h != h {
        clip = tape.narrow(&clip, 2, 0, nh * cfg.h)?;
    }
    if nw * cfg.w != w {
        clip = tape.narrow(&clip, 3, 0, nw * cfg.w)?;
    }
    let st_tokens = tape.patchify_st(&clip, cfg.t, cfg.h, cfg.w)?;
    let st = linear(
        tape,
        &st_tokens,
        p.get("svt.embed.st.weight")?,
        p.get("svt.embed.st.bias")?,
    )?;
    let st = tape.reshape(&st, &[nt, nh, nw, cfg.d])?;

    let mut disp_plane = tape.reshape(disparity, &[1, h, w])?;
    if nh * cfg.h != h {
        disp_plane = tape.narrow(&disp_plane, 1, 0, nh * cfg.h)?;
    }
    if nw * cfg.w != w {
        disp_plane = tape.narrow(&disp_plane, 2, 0, nw * cfg.w)?;
    }
    let disp_tokens = tape.patchify2(&disp_plane, cfg.h, cfg.w)?;
    let disp = linear(
        tape,
        &disp_tokens,
        p.get("svt.embed.disp.weight")?,
        p.get("svt.embed.disp.bias")?,
    )?;
    let disp = tape.reshape(&disp, &[nh, nw, cfg.d])?;

    // Fuse disparity into every temporal slice, then add positions.
    let disp_rep = repeat_leading(tape, &disp, nt)?;
    let mut tokens = tape.add(&st, &disp_rep)?;

    let pos = p.get("svt.pos")?;
    let pos = if pos.shape()[..2] != [nh, nw] {
        let chan_first = tape.permute(pos, &[2, 0, 1])?;
        let resized = tape.resize_bilinear(&chan_first, nh, nw)?;
        tape.permute(&resized, &[1, 2, 0])?
    } else {
        pos.clone()
    };
    let pos_rep = repeat_leading(tape, &pos, nt)?;
    tokens = tape.add(&tokens, &pos_rep)?;

    debug_assert_eq!(tokens.shape(), &[nt, nh, nw, cfg.d]);
    Ok(TokenGrid { tokens, disp })
}

/// One attention head restricted to `axis`, returning the pre-projection
/// output `[n_t, n_h, n_w, dh]` and the attention weights (grouped as
/// `[groups, queries, keys]`; `None` for disparity heads, whose key set is
/// the single disparity token at the query's spatial index, making every
/// attention weight identically 1).
pub fn attention_head<S: Scalar>(
    tape: &Tape<S>,
    grid: &TokenGrid<S>,
    axis: HeadAxis,
    wq: &Tensor<S>,
    wk: &Tensor<S>,
    wv: &Tensor<S>,
) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
    let (nt, nh, nw, d) = grid.extents();
    let ns = nh * nw;
    let dh = wq.shape()[1];
    let inv_sqrt = S::c(1.0 / (dh as f64).sqrt());
    let flat = tape.reshape(&grid.tokens, &[nt * ns, d])?;
    match axis {
        HeadAxis::Spatial => {
            let q = tape.reshape(&tape.matmul(&flat, wq)?, &[nt, ns, dh])?;
            let k = tape.reshape(&tape.matmul(&flat, wk)?, &[nt, ns, dh])?;
            let v = tape.reshape(&tape.matmul(&flat, wv)?, &[nt, ns, dh])?;
            let kt = tape.permute(&k, &[0, 2, 1])?;
            let logits = tape.scale(&tape.matmul(&q, &kt)?, inv_sqrt)?;
            let attn = tape.softmax_lastdim(&logits)?;
            let out = tape.matmul(&attn, &v)?;
            Ok((tape.reshape(&out, &[nt, nh, nw, dh])?, Some(attn)))
        }
        HeadAxis::Temporal => {
            let to_groups = |x: &Tensor<S>| -> Result<Tensor<S>> {
                let r = tape.reshape(x, &[nt, ns, dh])?;
                tape.permute(&r, &[1, 0, 2]) // [ns, nt, dh]
            };
            let q = to_groups(&tape.matmul(&flat, wq)?)?;
            let k = to_groups(&tape.matmul(&flat, wk)?)?;
            let v = to_groups(&tape.matmul(&flat, wv)?)?;
            let kt = tape.permute(&k, &[0, 2, 1])?;
            let logits = tape.scale(&tape.matmul(&q, &kt)?, inv_sqrt)?;
            let attn = tape.softmax_lastdim(&logits)?;
            let out = tape.matmul(&attn, &v)?; // [ns, nt, dh]
            let out = tape.permute(&out, &[1, 0, 2])?;
            Ok((tape.reshape(&out, &[nt, nh, nw, dh])?, Some(attn)))
        }
        HeadAxis::Disparity => {
            // Softmax over the singleton key group is identically 1, so the
            // head passes the disparity token's value through to every
            // temporal slice at its spatial index.
            let dflat = tape.reshape(&grid.disp, &[ns, d])?;
            let v = tape.matmul(&dflat, wv)?;
            let v = tape.reshape(&v, &[nh, nw, dh])?;
            let out = repeat_leading(tape, &v, nt)?;
            Ok((out, None))
        }
    }
}

/// Multi-head factorized attention: per-head outputs concatenated along the
/// token dimension, then linearly projected. The disparity stream passes
/// through unchanged.
pub fn factorized_attention<S: Scalar>(
    tape: &Tape<S>,
    grid: &TokenGrid<S>,
    axes: &[HeadAxis],
    p: &BoundParams<S>,
    prefix: &str,
) -> Result<TokenGrid<S>> {
    let (nt, nh, nw, d) = grid.extents();
    if axes.is_empty() || d % axes.len() != 0 {
        return Err(Error::contract(format!(
            "head assignment of {} heads does not cover token dimension {d}",
            axes.len()
        )));
    }
    let mut heads = Vec::with_capacity(axes.len());
    for (i, axis) in axes.iter().enumerate() {
        let wq = p.get(&format!("{prefix}.head{i}.wq"))?;
        let wk = p.get(&format!("{prefix}.head{i}.wk"))?;
        let wv = p.get(&format!("{prefix}.head{i}.wv"))?;
        let (out, _) = attention_head(tape, grid, *axis, wq, wk, wv)?;
        heads.push(tape.reshape(&out, &[nt * nh * nw, d / axes.len()])?);
    }
    let refs: Vec<&Tensor<S>> = heads.iter().collect();
    let cat = tape.concat(&refs, 1)?;
    let proj = linear(
        tape,
        &cat,
        p.get(&format!("{prefix}.proj.weight"))?,
        p.get(&format!("{prefix}.proj.bias"))?,
    )?;
    Ok(TokenGrid {
        tokens: tape.reshape(&proj, &[nt, nh, nw, d])?,
        disp: grid.disp.clone(),
    })
}

/// Run the encoder: L pre-norm residual blocks of factorized attention and
/// a two-layer MLP. The disparity stream is layer-normalized alongside the
/// tokens when feeding disparity heads but is never itself updated.
pub fn encoder_forward<S: Scalar>(
    tape: &Tape<S>,
    grid: &TokenGrid<S>,
    cfg: &SvtConfig,
    p: &BoundParams<S>,
) -> Result<TokenGrid<S>> {
    cfg.validate()?;
    let axes = head_axes(cfg.heads);
    let mut tokens = grid.tokens.clone();
    for l in 0..cfg.layers {
        let prefix = format!("svt.layer{l}");
        let g1 = p.get(&format!("{prefix}.ln1.gamma"))?;
        let b1 = p.get(&format!("{prefix}.ln1.beta"))?;
        let normed = TokenGrid {
            tokens: tape.layer_norm(&tokens, g1, b1)?,
            disp: tape.layer_norm(&grid.disp, g1, b1)?,
        };
        let attended = factorized_attention(tape, &normed, &axes, p, &prefix)?;
        tokens = tape.add(&tokens, &attended.tokens)?;

        let g2 = p.get(&format!("{prefix}.ln2.gamma"))?;
        let b2 = p.get(&format!("{prefix}.ln2.beta"))?;
        let normed = tape.layer_norm(&tokens, g2, b2)?;
        let hidden = linear(
            tape,
            &normed,
            p.get(&format!("{prefix}.mlp.fc1.weight"))?,
            p.get(&format!("{prefix}.mlp.fc1.bias"))?,
        )?;
        let hidden = tape.relu(&hidden)?;
        let mlp = linear(
            tape,
            &hidden,
            p.get(&format!("{prefix}.mlp.fc2.weight"))?,
            p.get(&format!("{prefix}.mlp.fc2.bias"))?,
        )?;
        tokens = tape.add(&tokens, &mlp)?;
    }
    Ok(TokenGrid {
        tokens,
        disp: grid.disp.clone(),
    })
}

/// Project the middle temporal slice back to a frame-aligned feature map
/// `[c_out, n_h*h, n_w*w]`.
pub fn svt_feature_map<S: Scalar>(
    tape: &Tape<S>,
    grid: &TokenGrid<S>,
    cfg: &SvtConfig,
    p: &BoundParams<S>,
    c_out: usize,
) -> Result<Tensor<S>> {
    let (nt, nh, nw, d) = grid.extents();
    let mid = tape.narrow(&grid.tokens, 0, nt / 2, 1)?;
    let flat = tape.reshape(&mid, &[nh * nw, d])?;
    let proj = linear(
        tape,
        &flat,
        p.get("svt.depatch.weight")?,
        p.get("svt.depatch.bias")?,
    )?;
    tape.unpatchify2(&proj, c_out, nh * cfg.h, nw * cfg.w, cfg.h, cfg.w)
}

/// Full forward: embed, encode, de-patch.
pub fn svt_forward<S: Scalar>(
    tape: &Tape<S>,
    frames: &Tensor<S>,
    disparity: &Tensor<S>,
    cfg: &SvtConfig,
    p: &BoundParams<S>,
    c_out: usize,
) -> Result<Tensor<S>> {
    let grid = stereo_patch_embed(tape, frames, disparity, cfg, p)?;
    let grid = encoder_forward(tape, &grid, cfg, p)?;
    svt_feature_map(tape, &grid, cfg, p, c_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_cfg() -> SvtConfig {
        SvtConfig {
            t: 2,
            h: 2,
            w: 2,
            d: 6,
            layers: 1,
            heads: 3,
            mlp_dim: 8,
        }
    }

    fn toy_params(cfg: &SvtConfig, frames: usize, h: usize, w: usize) -> ParamSet {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        register_params(&mut params, cfg, &mut rng, 3, 3, frames, h, w).unwrap();
        params
    }

    fn zero_pos(params: &mut ParamSet) {
        let shape = params.value("svt.pos").unwrap().shape().to_vec();
        params.set_value("svt.pos", Tensor::zeros(&shape).unwrap()).unwrap();
    }

    #[test]
    fn token_counts_follow_floor_formulas() {
        let cfg = SvtConfig::default();
        assert_eq!(cfg.grid(4, 224, 224).unwrap(), (2, 14, 14));
        assert_eq!(cfg.grid(5, 230, 225).unwrap(), (2, 14, 14));
        assert!(cfg.grid(1, 224, 224).is_err());
    }

    #[test]
    fn zero_clip_embeds_to_zero_tokens() {
        let cfg = toy_cfg();
        let mut params = toy_params(&cfg, 4, 4, 4);
        zero_pos(&mut params);
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape);
        let frames = Tensor::zeros(&[4, 3, 4, 4]).unwrap();
        let disp = Tensor::zeros(&[4, 4]).unwrap();
        let grid = stereo_patch_embed(&tape, &frames, &disp, &cfg, &p).unwrap();
        assert_eq!(grid.tokens.shape(), &[2, 2, 2, 6]);
        assert!(grid.tokens.data().iter().all(|&v| v == 0.0));
        assert!(grid.disp.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_change_is_local() {
        let cfg = toy_cfg();
        let mut params = toy_params(&cfg, 4, 4, 4);
        zero_pos(&mut params);
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape);
        let base = Tensor::zeros(&[4, 3, 4, 4]).unwrap();
        let disp = Tensor::zeros(&[4, 4]).unwrap();
        // Perturb one pixel inside patch (temporal slice 1, spatial (0, 1)).
        let mut v = base.data().to_vec();
        let (t0, y0, x0) = (2usize, 1usize, 3usize);
        v[((t0 * 3 + 1) * 4 + y0) * 4 + x0] = 1.0;
        let poked = Tensor::new(&[4, 3, 4, 4], v).unwrap();
        let a = stereo_patch_embed(&tape, &base, &disp, &cfg, &p).unwrap();
        let b = stereo_patch_embed(&tape, &poked, &disp, &cfg, &p).unwrap();
        for ti in 0..2 {
            for hy in 0..2 {
                for hx in 0..2 {
                    let base_off = (((ti * 2) + hy) * 2 + hx) * 6;
                    let same = (0..6).all(|i| {
                        (a.tokens.data()[base_off + i] - b.tokens.data()[base_off + i]).abs() < 1e-12
                    });
                    let expect_same = !(ti == 1 && hy == 0 && hx == 1);
                    assert_eq!(same, expect_same, "token ({ti},{hy},{hx})");
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        use rand::Rng;
        let tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f32>>())
                .unwrap()
        };
        let grid = TokenGrid {
            tokens: rand_t(&[2, 2, 2, 6]),
            disp: rand_t(&[2, 2, 6]),
        };
        let wq = rand_t(&[6, 2]);
        let wk = rand_t(&[6, 2]);
        let wv = rand_t(&[6, 2]);
        for axis in [HeadAxis::Spatial, HeadAxis::Temporal] {
            let (_, attn) = attention_head(&tape, &grid, axis, &wq, &wk, &wv).unwrap();
            let attn = attn.unwrap();
            let k = *attn.shape().last().unwrap();
            for row in attn.data().chunks(k) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "{axis:?} row sums to {s}");
            }
        }
    }

    #[test]
    fn uniform_value_groups_return_value() {
        // All tokens equal: every attention output is that token's value
        // projection regardless of the weights.
        let tape = Tape::<f32>::new();
        let tok = Tensor::full(&[3, 1, 2, 4], 0.5).unwrap();
        let disp = Tensor::full(&[1, 2, 4], 0.5).unwrap();
        let grid = TokenGrid {
            tokens: tok,
            disp,
        };
        let wq = Tensor::full(&[4, 2], 0.3).unwrap();
        let wk = Tensor::full(&[4, 2], -0.2).unwrap();
        let wv = Tensor::full(&[4, 2], 0.25).unwrap();
        let expect = 0.5 * 0.25 * 4.0;
        for axis in [HeadAxis::Spatial, HeadAxis::Temporal, HeadAxis::Disparity] {
            let (out, _) = attention_head(&tape, &grid, axis, &wq, &wk, &wv).unwrap();
            for &v in out.data() {
                assert!((v - expect).abs() < 1e-6, "{axis:?}");
            }
        }
    }

    #[test]
    fn single_temporal_group_is_value_identity() {
        use rand::Rng;
        let tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f32>>())
                .unwrap()
        };
        let grid = TokenGrid {
            tokens: rand_t(&[1, 2, 2, 4]),
            disp: rand_t(&[2, 2, 4]),
        };
        let wq = rand_t(&[4, 2]);
        let wk = rand_t(&[4, 2]);
        let wv = rand_t(&[4, 2]);
        let (out, _) = attention_head(&tape, &grid, HeadAxis::Temporal, &wq, &wk, &wv).unwrap();
        // n_t = 1: the only key is the query's own token.
        let flat = tape.reshape(&grid.tokens, &[4, 4]).unwrap();
        let v = tape.matmul(&flat, &wv).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn axis_restriction_localizes_influence() {
        use rand::Rng;
        let tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f32>>())
                .unwrap()
        };
        let tokens = rand_t(&[2, 2, 2, 4]);
        let disp = rand_t(&[2, 2, 4]);
        let wq = rand_t(&[4, 2]);
        let wk = rand_t(&[4, 2]);
        let wv = rand_t(&[4, 2]);

        // Spatial head, query in temporal slice 0: changing a slice-1 token
        // must not move any slice-0 output.
        let mut poked = tokens.data().to_vec();
        let off = ((1 * 2 + 1) * 2 + 1) * 4; // token (t=1, y=1, x=1)
        for i in 0..4 {
            poked[off + i] += 0.7;
        }
        let poked = Tensor::new(&[2, 2, 2, 4], poked).unwrap();
        let g0 = TokenGrid { tokens: tokens.clone(), disp: disp.clone() };
        let g1 = TokenGrid { tokens: poked, disp: disp.clone() };
        let (a, _) = attention_head(&tape, &g0, HeadAxis::Spatial, &wq, &wk, &wv).unwrap();
        let (b, _) = attention_head(&tape, &g1, HeadAxis::Spatial, &wq, &wk, &wv).unwrap();
        for s in 0..4 {
            for i in 0..2 {
                let idx = s * 2 + i;
                assert_eq!(a.data()[idx], b.data()[idx], "slice-0 spatial output moved");
            }
        }

        // Temporal head: changing spatial index (1,1) must not move outputs
        // at other spatial indices.
        let (c, _) = attention_head(&tape, &g0, HeadAxis::Temporal, &wq, &wk, &wv).unwrap();
        let (d, _) = attention_head(&tape, &g1, HeadAxis::Temporal, &wq, &wk, &wv).unwrap();
        for t in 0..2 {
            for s in 0..4 {
                if s == 3 {
                    continue; // the poked spatial index
                }
                for i in 0..2 {
                    let idx = (t * 4 + s) * 2 + i;
                    assert_eq!(c.data()[idx], d.data()[idx], "temporal output moved at s={s}");
                }
            }
        }

        // Disparity head ignores the token stream entirely.
        let (e, _) = attention_head(&tape, &g0, HeadAxis::Disparity, &wq, &wk, &wv).unwrap();
        let (f, _) = attention_head(&tape, &g1, HeadAxis::Disparity, &wq, &wk, &wv).unwrap();
        assert_eq!(e.data(), f.data());
    }

    #[test]
    fn spatial_heads_are_permutation_equivariant() {
        use rand::Rng;
        let tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f32>>())
                .unwrap()
        };
        let (nt, nh, nw, d) = (2usize, 1usize, 4usize, 4usize);
        let tokens = rand_t(&[nt, nh, nw, d]);
        let disp = rand_t(&[nh, nw, d]);
        let wq = rand_t(&[d, 2]);
        let wk = rand_t(&[d, 2]);
        let wv = rand_t(&[d, 2]);
        // Swap spatial indices 0 and 2 jointly in both streams.
        let perm = [2usize, 1, 0, 3];
        let permute_tokens = |t: &Tensor<f32>, lead: usize| {
            let feat = *t.shape().last().unwrap();
            let mut v = t.data().to_vec();
            for b in 0..lead {
                for (dst, &src) in perm.iter().enumerate() {
                    for i in 0..feat {
                        v[(b * nw + dst) * feat + i] = t.data()[(b * nw + src) * feat + i];
                    }
                }
            }
            Tensor::new(t.shape(), v).unwrap()
        };
        let g = TokenGrid { tokens: tokens.clone(), disp: disp.clone() };
        let gp = TokenGrid {
            tokens: permute_tokens(&tokens, nt),
            disp: permute_tokens(&disp, 1),
        };
        let (a, _) = attention_head(&tape, &g, HeadAxis::Spatial, &wq, &wk, &wv).unwrap();
        let (b, _) = attention_head(&tape, &gp, HeadAxis::Spatial, &wq, &wk, &wv).unwrap();
        let a_perm = permute_tokens(&a, nt);
        for (x, y) in a_perm.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut cfg = toy_cfg();
        cfg.layers = 0;
        let params = toy_params(&toy_cfg(), 4, 4, 4);
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape);
        let grid = TokenGrid {
            tokens: Tensor::full(&[2, 2, 2, 6], 0.3).unwrap(),
            disp: Tensor::zeros(&[2, 2, 6]).unwrap(),
        };
        let out = encoder_forward(&tape, &grid, &cfg, &p).unwrap();
        assert_eq!(out.tokens.data(), grid.tokens.data());
    }

    #[test]
    fn encoder_preserves_extents() {
        let cfg = toy_cfg();
        let params = toy_params(&cfg, 4, 4, 4);
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape);
        let grid = TokenGrid {
            tokens: Tensor::full(&[2, 2, 2, 6], 0.1).unwrap(),
            disp: Tensor::full(&[2, 2, 6], -0.2).unwrap(),
        };
        let out = encoder_forward(&tape, &grid, &cfg, &p).unwrap();
        assert_eq!(out.tokens.shape(), grid.tokens.shape());
    }

    #[test]
    fn feature_map_shape_and_block_locality() {
        let cfg = toy_cfg();
        let params = toy_params(&cfg, 4, 4, 4);
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape);
        let mut grid = TokenGrid {
            tokens: Tensor::zeros(&[2, 2, 2, 6]).unwrap(),
            disp: Tensor::zeros(&[2, 2, 6]).unwrap(),
        };
        let map = svt_feature_map(&tape, &grid, &cfg, &p, 3).unwrap();
        assert_eq!(map.shape(), &[3, 4, 4]);

        // Swapping two middle-slice spatial tokens swaps the output blocks.
        let mut v = grid.tokens.data().to_vec();
        for i in 0..6 {
            v[((1 * 2 + 0) * 2 + 0) * 6 + i] = (i + 1) as f32; // token (1,0,0)
            v[((1 * 2 + 1) * 2 + 1) * 6 + i] = -((i + 1) as f32); // token (1,1,1)
        }
        grid.tokens = Tensor::new(&[2, 2, 2, 6], v.clone()).unwrap();
        let m1 = svt_feature_map(&tape, &grid, &cfg, &p, 3).unwrap();
        for i in 0..6 {
            v.swap(((1 * 2 + 0) * 2 + 0) * 6 + i, ((1 * 2 + 1) * 2 + 1) * 6 + i);
        }
        grid.tokens = Tensor::new(&[2, 2, 2, 6], v).unwrap();
        let m2 = svt_feature_map(&tape, &grid, &cfg, &p, 3).unwrap();
        let block = |m: &Tensor<f32>, by: usize, bx: usize| -> Vec<f32> {
            let mut out = Vec::new();
            for c in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        out.push(m.data()[(c * 4 + by * 2 + y) * 4 + bx * 2 + x]);
                    }
                }
            }
            out
        };
        assert_eq!(block(&m1, 0, 0), block(&m2, 1, 1));
        assert_eq!(block(&m1, 1, 1), block(&m2, 0, 0));
    }

    #[test]
    fn full_layer_passes_gradient_check() {
        let cfg = toy_cfg();
        let params = toy_params(&cfg, 4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let tokens = crate::gradcheck::rand_tensor(&mut rng, &[2, 2, 2, 6], -0.8, 0.8);
        let disp = crate::gradcheck::rand_tensor(&mut rng, &[2, 2, 6], -0.8, 0.8);
        let report = crate::gradcheck::check_op("svt_layer", 3, &[tokens, disp], |tape, x| {
            let p = params.bind(tape);
            let grid = TokenGrid {
                tokens: x[0].clone(),
                disp: x[1].clone(),
            };
            let out = encoder_forward(tape, &grid, &cfg, &p)?;
            Ok(out.tokens)
        });
        assert!(report.passed, "svt layer gradcheck failed: {}", report.max_rel_err);
    }
}
