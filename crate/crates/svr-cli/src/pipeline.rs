//! End-to-end wiring: fused masks drive the column mapping and warp, the
//! transformer feature map rides the same warp, parallax attention matches
//! the warped views, and a reconstruction head closes the unsupervised
//! training loop.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svr_core::adam::Adam;
use svr_core::loss::{
    dwt_loss, perceptual_loss, photometric_loss, register_extractor_params, smoothness_loss,
    total_loss, LossReport, LossTerms,
};
use svr_core::pam::{pam_forward, transport, valid_mask, ValidMask};
use svr_core::recon::reconstruct;
use svr_core::saliency::{dilate, fuse, DetectionBoxSet, DisparityMap, FusedMask, SaliencyMap};
use svr_core::svt::{svt_forward, SvtConfig};
use svr_core::tensor::{Tape, Tensor};
use svr_core::warp::{build_mapping, raw_shift_field, shift_map, warp, ColumnMapping, ShiftMap};
use svr_core::weights::{uniform_init, BoundParams, ParamSet};
use svr_core::{Error, Result};

use crate::config::RunConfig;
use crate::dataset::StereoClip;

/// Mask dilation: blur radius and the ones-kernel extent.
pub const DILATE_SIGMA: f64 = 3.0;
pub const DILATE_KERNEL: usize = 11;
/// Cycle-consistency threshold for the photometric valid mask, in pixels.
pub const VALID_TAU: f64 = 1.0;

/// Fuse detection inputs into a dilated mask; absent inputs mean uniform
/// importance (every column equally protected).
pub fn prepare_mask(
    inputs: Option<(&SaliencyMap, &DetectionBoxSet)>,
    disparity: &DisparityMap,
    min_confidence: f64,
) -> Result<FusedMask> {
    match inputs {
        Some((saliency, boxes)) => {
            let fused = fuse(saliency, disparity, boxes, min_confidence)?;
            dilate(&fused, DILATE_SIGMA, DILATE_KERNEL)
        }
        None => Ok(FusedMask::uniform(disparity.height(), disparity.width())),
    }
}

/// Register every model parameter with a seeded initializer. The extents
/// size the transformer's positional grid.
pub fn init_params(cfg: &RunConfig, height: usize, width: usize) -> Result<ParamSet> {
    let svt_cfg = cfg.svt.to_core();
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    svr_core::svt::register_params(
        &mut params,
        &svt_cfg,
        &mut rng,
        3,
        cfg.svt.channels,
        cfg.window,
        height,
        width,
    )?;
    let join_in = 3 + cfg.svt.channels;
    params.insert(
        "pipe.join.weight",
        uniform_init(&mut rng, &[cfg.stream_channels, join_in, 1, 1], join_in),
        true,
    );
    params.insert("pipe.join.bias", Tensor::zeros(&[cfg.stream_channels])?, true);
    svr_core::pam::register_params(&mut params, &mut rng, cfg.stream_channels)?;
    svr_core::recon::register_params(&mut params, &mut rng, cfg.stream_channels)?;
    register_extractor_params(&mut params, &mut rng)?;
    Ok(params)
}

fn stack_frames(frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let shape = frames[0].shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::new(&[frames.len(), c, h, w], data)
}

/// One view through the front half of the model: mapping, warped middle
/// frame, and the joined feature stream on the target grid.
struct ViewForward {
    warped: Tensor<f32>,
    stream: Tensor<f32>,
    mapping: ColumnMapping,
    #[allow(dead_code)]
    shift: ShiftMap,
}

fn view_forward(
    tape: &Tape<f32>,
    frames: &[Tensor<f32>],
    center: usize,
    disparity: &Tensor<f32>,
    mask: &FusedMask,
    cfg: &RunConfig,
    svt_cfg: &SvtConfig,
    p: &BoundParams<f32>,
) -> Result<ViewForward> {
    let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
    if mask.height() != h || mask.width() != w {
        return Err(Error::dimension(format!(
            "mask {}x{} does not match frames {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let target_width = ((cfg.target_ratio * w as f64).floor() as usize).max(1);
    let importance = raw_shift_field(mask, &cfg.shift_params()?)?;
    let mapping = build_mapping(&importance, target_width)?;
    let shift = shift_map(&mapping);
    let warped = warp(tape, &frames[center], &shift)?;

    let stacked = stack_frames(frames)?;
    let feat = svt_forward(tape, &stacked, disparity, svt_cfg, p, cfg.svt.channels)?;
    let feat = if feat.shape()[1] == h && feat.shape()[2] == w {
        feat
    } else {
        tape.resize_bilinear(&feat, h, w)?
    };
    let warped_feat = warp(tape, &feat, &shift)?;
    let joined = tape.concat(&[&warped, &warped_feat], 0)?;
    let stream = tape.conv2d(
        &joined,
        p.get("pipe.join.weight")?,
        p.get("pipe.join.bias")?,
        0,
        1,
    )?;
    Ok(ViewForward {
        warped,
        stream,
        mapping,
        shift,
    })
}

/// Retargeted middle frames and the column mappings that produced them.
#[derive(Debug, Clone)]
pub struct RetargetResult {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub mapping_l: ColumnMapping,
    pub mapping_r: ColumnMapping,
}

/// Retarget a clip's middle frame pair under the given per-view masks.
pub fn retarget_clip(
    clip: &StereoClip,
    mask_l: &FusedMask,
    mask_r: &FusedMask,
    cfg: &RunConfig,
    params: &ParamSet,
) -> Result<RetargetResult> {
    let tape = Tape::<f32>::disabled();
    let p = params.bind(&tape);
    let svt_cfg = cfg.svt.to_core();
    let disp = clip.disparity[clip.center].values().clone();
    let left = view_forward(&tape, &clip.left, clip.center, &disp, mask_l, cfg, &svt_cfg, &p)?;
    let right = view_forward(&tape, &clip.right, clip.center, &disp, mask_r, cfg, &svt_cfg, &p)?;
    Ok(RetargetResult {
        left: left.warped,
        right: right.warped,
        mapping_l: left.mapping,
        mapping_r: right.mapping,
    })
}

fn check_finite(report: &LossReport) -> Result<()> {
    let terms = [
        ("l_vgg_entire", report.l_vgg_entire),
        ("l_vgg_salient", report.l_vgg_salient),
        ("l_dwt", report.l_dwt),
        ("l_photo", report.l_photo),
        ("l_smooth", report.l_smooth),
        ("total", report.total),
    ];
    for (term, value) in terms {
        if !value.is_finite() {
            return Err(Error::Training {
                term: term.to_string(),
                value,
            });
        }
    }
    Ok(())
}

/// One unsupervised training step: forward, losses against both the warped
/// and the reconstructed frames, backward, ADAM update.
pub fn train_step(
    clip: &StereoClip,
    mask_l: &FusedMask,
    mask_r: &FusedMask,
    cfg: &RunConfig,
    params: &mut ParamSet,
    opt: &mut Adam,
) -> Result<LossReport> {
    let tape = Tape::<f32>::new();
    let p = params.bind(&tape);
    let svt_cfg = cfg.svt.to_core();
    let mid = clip.center;
    let disp = clip.disparity[mid].values().clone();

    let left = view_forward(&tape, &clip.left, mid, &disp, mask_l, cfg, &svt_cfg, &p)?;
    let right = view_forward(&tape, &clip.right, mid, &disp, mask_r, cfg, &svt_cfg, &p)?;

    let mut bn_updates = Vec::new();
    let pam = pam_forward(&tape, &left.stream, &right.stream, &p, true, &mut bn_updates)?;
    let recon_l = reconstruct(&tape, &pam.fused, &left.stream, &left.mapping, &p)?;
    let recon_r = reconstruct(&tape, &pam.fused, &right.stream, &right.mapping, &p)?;

    let src_l = &clip.left[mid];
    let src_r = &clip.right[mid];
    let pairs: [(&Tensor<f32>, &Tensor<f32>, &FusedMask); 4] = [
        (src_l, &left.warped, mask_l),
        (src_r, &right.warped, mask_r),
        (src_l, &recon_l, mask_l),
        (src_r, &recon_r, mask_r),
    ];
    let mut entire_acc: Option<Tensor<f32>> = None;
    let mut salient_acc: Option<Tensor<f32>> = None;
    for (src, ret, mask) in pairs {
        let (e, s, _) = perceptual_loss(&tape, src, ret, mask, &p)?;
        entire_acc = Some(match entire_acc {
            Some(acc) => tape.add(&acc, &e)?,
            None => e,
        });
        salient_acc = Some(match salient_acc {
            Some(acc) => tape.add(&acc, &s)?,
            None => s,
        });
    }
    let vgg_entire = tape.scale(&entire_acc.expect("pairs non-empty"), 0.25)?;
    let vgg_salient = tape.scale(&salient_acc.expect("pairs non-empty"), 0.25)?;

    let dwt_warped = dwt_loss(&tape, src_l, src_r, &left.warped, &right.warped)?;
    let dwt_recon = dwt_loss(&tape, src_l, src_r, &recon_l, &recon_r)?;
    let dwt = tape.scale(&tape.add(&dwt_warped, &dwt_recon)?, 0.5)?;

    let transported = transport(&tape, &pam.a_rl, &right.warped)?;
    let mut vm = valid_mask(&pam.a_rl, &pam.a_lr, VALID_TAU)?;
    if vm.count() == 0 {
        // An untrained matcher can reject every pixel; fall back to the
        // dense photometric term so the loss stays defined.
        vm = ValidMask::all(vm.height(), vm.width());
    }
    let photo = photometric_loss(&tape, &left.warped, &transported, &vm, cfg.loss.gamma)?;
    let smooth = smoothness_loss(&tape, &pam.disparity, &left.warped)?;

    let terms = LossTerms {
        vgg_entire,
        vgg_salient,
        dwt,
        photo,
        smooth,
    };
    let (total, report) = total_loss(&tape, &terms, &cfg.loss.to_core())?;
    check_finite(&report)?;

    let grads = tape.backward(&total)?;
    let mut gmap: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for param in params.iter().filter(|q| q.trainable) {
        let bound = p.get(&param.name)?;
        if let Some(g) = grads.wrt(bound) {
            gmap.insert(param.name.clone(), g.to_vec());
        }
    }
    opt.step(params, &gmap)?;
    for (name, value) in bn_updates {
        params.set_value(&name, value)?;
    }
    Ok(report)
}

/// Train over the clips round-robin for the configured iteration count
/// with uniform masks, returning the final parameters and per-step reports.
pub fn run_training(clips: &[StereoClip], cfg: &RunConfig) -> Result<(ParamSet, Vec<LossReport>)> {
    if clips.is_empty() {
        return Err(Error::contract("training needs at least one clip"));
    }
    let (h, w) = clips[0].extents();
    let mut params = init_params(cfg, h, w)?;
    let mut opt = Adam::new(
        cfg.optim.lr as f32,
        cfg.optim.beta1 as f32,
        cfg.optim.beta2 as f32,
        cfg.optim.epsilon as f32,
    );
    let mut reports = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let clip = &clips[it % clips.len()];
        let (h, w) = clip.extents();
        let mask = FusedMask::uniform(h, w);
        reports.push(train_step(clip, &mask, &mask, cfg, &mut params, &mut opt)?);
    }
    Ok((params, reports))
}

/// Render loss reports as the loss-curve CSV (iteration plus the seven
/// loss fields; default float formatting is shortest-round-trip, so equal
/// runs produce byte-identical files).
pub fn loss_csv(reports: &[LossReport]) -> String {
    let mut out =
        String::from("iteration,l_vgg_entire,l_vgg_salient,l_vgg_total,l_dwt,l_photo,l_smooth,total\n");
    for (i, r) in reports.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            i,
            r.l_vgg_entire,
            r.l_vgg_salient,
            r.l_vgg_total,
            r.l_dwt,
            r.l_photo,
            r.l_smooth,
            r.total
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthetic_clip, SyntheticSpec};

    fn toy_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.svt.h = 8;
        cfg.svt.w = 8;
        cfg.svt.d = 24;
        cfg.svt.layers = 1;
        cfg.svt.mlp_dim = 48;
        cfg.svt.channels = 4;
        cfg.stream_channels = 8;
        cfg
    }

    fn clip() -> StereoClip {
        synthetic_clip(&SyntheticSpec::default()).unwrap()
    }

    #[test]
    fn identity_retarget_reproduces_sources_exactly() {
        let cfg = toy_config();
        let clip = clip();
        let (h, w) = clip.extents();
        let params = init_params(&cfg, h, w).unwrap();
        let mask = FusedMask::uniform(h, w);
        let out = retarget_clip(&clip, &mask, &mask, &cfg, &params).unwrap();
        assert_eq!(out.left.data(), clip.left[clip.center].data());
        assert_eq!(out.right.data(), clip.right[clip.center].data());
        let tgt = out.mapping_l.tgt();
        for (x, v) in tgt.iter().enumerate() {
            assert_eq!(*v, x as f64);
        }
    }

    #[test]
    fn output_width_follows_the_floor_contract() {
        let clip = clip();
        let (h, w) = clip.extents();
        let mask = FusedMask::uniform(h, w);
        for ratio in [0.5, 0.7, 0.8, 1.0, 1.5] {
            let mut cfg = toy_config();
            cfg.target_ratio = ratio;
            let params = init_params(&cfg, h, w).unwrap();
            let out = retarget_clip(&clip, &mask, &mask, &cfg, &params).unwrap();
            let want = (ratio * w as f64).floor() as usize;
            assert_eq!(out.left.shape(), &[3, h, want], "ratio {ratio}");
            assert_eq!(out.mapping_l.target_width(), want);
        }
    }

    #[test]
    fn view_masks_decouple_the_mappings() {
        let mut cfg = toy_config();
        cfg.target_ratio = 0.5;
        let clip = clip();
        let (h, w) = clip.extents();
        let params = init_params(&cfg, h, w).unwrap();
        let block = |x0: usize| {
            let mut v = vec![0.05f32; h * w];
            for y in 0..h {
                for x in x0..x0 + 8 {
                    v[y * w + x] = 1.0;
                }
            }
            FusedMask::new(Tensor::new(&[h, w], v).unwrap()).unwrap()
        };
        let out = retarget_clip(&clip, &block(2), &block(20), &cfg, &params).unwrap();
        assert_ne!(out.mapping_l.tgt(), out.mapping_r.tgt());
    }

    #[test]
    fn train_step_is_deterministic_and_reports_finite_losses() {
        let cfg = toy_config();
        let clip = clip();
        let (h, w) = clip.extents();
        let mask = FusedMask::uniform(h, w);

        let run = || {
            let mut params = init_params(&cfg, h, w).unwrap();
            let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
            let r1 = train_step(&clip, &mask, &mask, &cfg, &mut params, &mut opt).unwrap();
            let r2 = train_step(&clip, &mask, &mask, &cfg, &mut params, &mut opt).unwrap();
            (r1, r2, params)
        };
        let (a1, a2, pa) = run();
        let (b1, b2, pb) = run();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
        assert!(a1.total.is_finite() && a1.total > 0.0);
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.data(), y.value.data(), "{} diverged", x.name);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = toy_config();
        cfg.optim.lr = 0.0;
        let clip = clip();
        let (h, w) = clip.extents();
        let mask = FusedMask::uniform(h, w);
        let mut params = init_params(&cfg, h, w).unwrap();
        let before: Vec<(String, Vec<f32>)> = params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.value.data().to_vec()))
            .collect();
        let mut opt = Adam::new(0.0, 0.9, 0.999, 1e-8);
        train_step(&clip, &mask, &mask, &cfg, &mut params, &mut opt).unwrap();
        for (name, data) in before {
            assert_eq!(params.value(&name).unwrap().data(), &data[..], "{name} moved");
        }
    }

    #[test]
    fn training_loop_runs_and_losses_stay_finite() {
        let mut cfg = toy_config();
        cfg.iterations = 3;
        cfg.target_ratio = 0.75;
        let clips = vec![clip()];
        let (params, reports) = run_training(&clips, &cfg).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(reports.iter().all(|r| r.total.is_finite()));
        assert!(params.len() > 10);
        let csv = loss_csv(&reports);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("iteration,l_vgg_entire"));
    }
}
