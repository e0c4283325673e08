//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `[Cnn] PASS` line (run with `--nocapture` to see them); a failed
//! criterion fails its test.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svr_cli::config::RunConfig;
use svr_cli::pipeline;
use svr_cli::synthetic::{synthetic_clip, write_synthetic_dataset, SyntheticSpec};
use svr_core::gradcheck::{full_suite, rand_tensor};
use svr_core::metrics::{bds_image, bds_video, ddr_video, FramePair};
use svr_core::pam;
use svr_core::saliency::{DisparityMap, FusedMask};
use svr_core::svt::{attention_head, HeadAxis, SvtConfig, TokenGrid};
use svr_core::tensor::{Tape, Tensor};
use svr_core::warp::{build_mapping, raw_shift_field, shift_map, warp, ColumnMapping, ShiftParams};
use svr_core::weights::ParamSet;

fn pass(id: &str, detail: String) {
    println!("[{id}] PASS {detail}");
}

/// Small model configuration used wherever a criterion needs the full
/// pipeline but not the default model capacity.
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

fn uniform_importance(h: usize, w: usize, ratio: f64) -> Vec<f64> {
    let mask = FusedMask::uniform(h, w);
    let params = ShiftParams::new(1.9, 1.0, ratio).unwrap();
    raw_shift_field(&mask, &params).unwrap()
}

#[test]
fn c01_gradient_suite() {
    let start = Instant::now();
    let reports = full_suite(7);
    let elapsed = start.elapsed();
    let failures: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_err))
        .collect();
    assert!(failures.is_empty(), "gradient checks failed: {failures:?}");
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "gradient suite took {elapsed:?}, budget is 2 min"
    );
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    pass(
        "C01",
        format!(
            "{} gradient checks, worst relative error {worst:.3e}, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c02_warp_identities() {
    // Ratio 1 with a uniform mask must reproduce the middle frames bit for
    // bit, all the way through the pipeline.
    let cfg = toy_config();
    let clip = synthetic_clip(&SyntheticSpec::default()).unwrap();
    let (h, w) = clip.extents();
    let uniform = FusedMask::uniform(h, w);
    let params = pipeline::init_params(&cfg, h, w).unwrap();
    let result = pipeline::retarget_clip(&clip, &uniform, &uniform, &cfg, &params).unwrap();
    assert_eq!(result.left.data(), clip.left[clip.center].data());
    assert_eq!(result.right.data(), clip.right[clip.center].data());
    for (k, b) in result.mapping_l.tgt().iter().enumerate() {
        assert_eq!(*b, k as f64, "identity boundary {k} drifted");
    }

    // A 50% uniform reduction averages adjacent columns: on a linear ramp
    // the warped value has the closed form (2u + 0.5) / (W - 1).
    let (rh, rw) = (8usize, 64usize);
    let ramp: Vec<f32> = (0..3 * rh * rw)
        .map(|i| (i % rw) as f32 / (rw - 1) as f32)
        .collect();
    let frame = Tensor::new(&[3, rh, rw], ramp).unwrap();
    let mapping = build_mapping(&uniform_importance(rh, rw, 0.5), rw / 2).unwrap();
    let tape = Tape::<f32>::disabled();
    let warped = warp(&tape, &frame, &shift_map(&mapping)).unwrap();
    assert_eq!(warped.shape(), &[3, rh, rw / 2]);
    let mut worst = 0.0f64;
    for (i, v) in warped.data().iter().enumerate() {
        let u = i % (rw / 2);
        let want = (2.0 * u as f64 + 0.5) / (rw - 1) as f64;
        worst = worst.max((*v as f64 - want).abs());
    }
    assert!(worst < 1e-5, "ramp decimation off by {worst:.2e}");
    pass(
        "C02",
        format!("identity bit-exact; ramp decimation max error {worst:.2e}"),
    );
}

#[test]
fn c03_mapping_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (h, w) = (12usize, 30usize);
    let mut worst = 0.0f64;
    for ratio in [0.5, 0.7, 0.8, 1.5] {
        let target = (ratio * w as f64).floor() as usize;
        for _ in 0..100 {
            let values: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let mask = FusedMask::new(Tensor::new(&[h, w], values).unwrap()).unwrap();
            let params = ShiftParams::new(1.9, 1.0, ratio).unwrap();
            let imp = raw_shift_field(&mask, &params).unwrap();
            let mapping = build_mapping(&imp, target).unwrap();
            let tgt = mapping.tgt();
            assert_eq!(tgt.len(), w + 1);
            let err = (tgt[w] - target as f64).abs();
            assert!(err < 1e-4, "tgt[W] = {} vs {target}", tgt[w]);
            worst = worst.max(err);
            assert!(
                tgt.windows(2).all(|p| p[1] > p[0]),
                "boundaries not strictly increasing at ratio {ratio}"
            );
        }
    }
    pass(
        "C03",
        format!("4 ratios x 100 masks, worst total-width error {worst:.2e}"),
    );
}

#[test]
fn c04_salient_protection() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let (h, w, block_w, block_h) = (20usize, 40usize, 8usize, 12usize);
    for _ in 0..20 {
        let x0 = rng.gen_range(0..=w - block_w);
        let y0 = rng.gen_range(0..=h - block_h);
        let values: Vec<f32> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                if (y0..y0 + block_h).contains(&y) && (x0..x0 + block_w).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mask = FusedMask::new(Tensor::new(&[h, w], values).unwrap()).unwrap();
        for ratio in [0.5, 0.7, 0.8] {
            let params = ShiftParams::new(1.9, 1.0, ratio).unwrap();
            let imp = raw_shift_field(&mask, &params).unwrap();
            let target = (ratio * w as f64).floor() as usize;
            let mapping = build_mapping(&imp, target).unwrap();
            let mean = |range: Box<dyn Iterator<Item = usize>>| {
                let cols: Vec<usize> = range.collect();
                cols.iter().map(|&x| mapping.column_width(x)).sum::<f64>() / cols.len() as f64
            };
            let salient = mean(Box::new(x0..x0 + block_w));
            let plain = mean(Box::new((0..w).filter(move |x| !(x0..x0 + block_w).contains(x))));
            assert!(
                salient > plain,
                "ratio {ratio}, block at {x0}: salient {salient:.4} <= plain {plain:.4}"
            );
        }
    }
    pass("C04", "salient columns kept wider in 20/20 placements x 3 ratios".into());
}

#[test]
fn c05_attention_properties() {
    let tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let (nt, nh, nw, d, dh) = (2usize, 2usize, 3usize, 6usize, 3usize);
    let ns = nh * nw;
    let grid = TokenGrid {
        tokens: rand_tensor(&mut rng, &[nt, nh, nw, d], -1.0, 1.0),
        disp: rand_tensor(&mut rng, &[nh, nw, d], -1.0, 1.0),
    };
    let wq = rand_tensor(&mut rng, &[d, dh], -1.0, 1.0);
    let wk = rand_tensor(&mut rng, &[d, dh], -1.0, 1.0);
    let wv = rand_tensor(&mut rng, &[d, dh], -1.0, 1.0);

    // Row-stochastic attention for both factorized axes.
    let row_sums_ok = |attn: &Tensor<f64>| {
        let keys = *attn.shape().last().unwrap();
        attn.data()
            .chunks(keys)
            .all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-6)
    };
    let (_, sp_attn) = attention_head(&tape, &grid, HeadAxis::Spatial, &wq, &wk, &wv).unwrap();
    let (_, tm_attn) = attention_head(&tape, &grid, HeadAxis::Temporal, &wq, &wk, &wv).unwrap();
    assert!(row_sums_ok(&sp_attn.unwrap()), "spatial rows not stochastic");
    assert!(row_sums_ok(&tm_attn.unwrap()), "temporal rows not stochastic");

    // Locality: a poked token moves nothing outside its own axis group.
    let mut poked = grid.tokens.data().to_vec();
    let poke_site = (1, 1, 2); // (t, y, x)
    let off = ((poke_site.0 * nh + poke_site.1) * nw + poke_site.2) * d;
    for i in 0..d {
        poked[off + i] += 0.7;
    }
    let gp = TokenGrid {
        tokens: Tensor::new(&[nt, nh, nw, d], poked).unwrap(),
        disp: grid.disp.clone(),
    };
    let (a, _) = attention_head(&tape, &grid, HeadAxis::Spatial, &wq, &wk, &wv).unwrap();
    let (b, _) = attention_head(&tape, &gp, HeadAxis::Spatial, &wq, &wk, &wv).unwrap();
    for t in 0..nt {
        if t == poke_site.0 {
            continue;
        }
        for s in 0..ns {
            for i in 0..dh {
                let idx = (t * ns + s) * dh + i;
                assert_eq!(a.data()[idx], b.data()[idx], "spatial locality broke at t={t}");
            }
        }
    }
    let (c, _) = attention_head(&tape, &grid, HeadAxis::Temporal, &wq, &wk, &wv).unwrap();
    let (e, _) = attention_head(&tape, &gp, HeadAxis::Temporal, &wq, &wk, &wv).unwrap();
    let poked_s = poke_site.1 * nw + poke_site.2;
    for t in 0..nt {
        for s in 0..ns {
            if s == poked_s {
                continue;
            }
            for i in 0..dh {
                let idx = (t * ns + s) * dh + i;
                assert_eq!(c.data()[idx], e.data()[idx], "temporal locality broke at s={s}");
            }
        }
    }

    // No positional term inside the heads, so permuting whole groups along
    // the unattended axis permutes outputs exactly.
    let perm: Vec<usize> = vec![4, 2, 0, 5, 3, 1]; // spatial sites
    let permute_sites = |t: &Tensor<f64>, lead: usize, feat: usize| {
        let mut v = t.data().to_vec();
        for b in 0..lead {
            for (dst, &src) in perm.iter().enumerate() {
                for i in 0..feat {
                    v[(b * ns + dst) * feat + i] = t.data()[(b * ns + src) * feat + i];
                }
            }
        }
        Tensor::new(t.shape(), v).unwrap()
    };
    let g_sites = TokenGrid {
        tokens: permute_sites(&grid.tokens, nt, d),
        disp: permute_sites(&grid.disp, 1, d),
    };
    let (tm_out, _) = attention_head(&tape, &grid, HeadAxis::Temporal, &wq, &wk, &wv).unwrap();
    let (tm_perm, _) = attention_head(&tape, &g_sites, HeadAxis::Temporal, &wq, &wk, &wv).unwrap();
    assert_eq!(
        permute_sites(&tm_out, nt, dh).data(),
        tm_perm.data(),
        "temporal head not equivariant to site permutation"
    );
    let swap_frames = |t: &Tensor<f64>| {
        let half = t.numel() / nt;
        let mut v = t.data()[half..].to_vec();
        v.extend_from_slice(&t.data()[..half]);
        Tensor::new(t.shape(), v).unwrap()
    };
    let g_frames = TokenGrid {
        tokens: swap_frames(&grid.tokens),
        disp: grid.disp.clone(),
    };
    let (sp_out, _) = attention_head(&tape, &grid, HeadAxis::Spatial, &wq, &wk, &wv).unwrap();
    let (sp_perm, _) = attention_head(&tape, &g_frames, HeadAxis::Spatial, &wq, &wk, &wv).unwrap();
    assert_eq!(
        swap_frames(&sp_out).data(),
        sp_perm.data(),
        "spatial head not equivariant to frame permutation"
    );

    // Parallax attention rows are stochastic in both directions.
    let mut params = ParamSet::new();
    pam::register_params(&mut params, &mut rng, 4).unwrap();
    let left = rand_tensor(&mut rng, &[4, 3, 5], -1.0, 1.0);
    let right = rand_tensor(&mut rng, &[4, 3, 5], -1.0, 1.0);
    let p = params.bind(&tape);
    let mut updates = Vec::new();
    let out = pam::pam_forward(&tape, &left, &right, &p, false, &mut updates).unwrap();
    assert!(row_sums_ok(&out.a_rl.values), "pam right->left rows not stochastic");
    assert!(row_sums_ok(&out.a_lr.values), "pam left->right rows not stochastic");
    pass(
        "C05",
        "attention rows stochastic; locality and permutation equivariance exact".into(),
    );
}

#[test]
fn c06_token_counts() {
    let cfg = SvtConfig::default();
    assert_eq!((cfg.t, cfg.h, cfg.w), (2, 16, 16));
    let grid = cfg.grid(4, 224, 224).unwrap();
    assert_eq!(grid, (2, 14, 14));
    pass("C06", format!("grid(4, 224, 224) = {grid:?}"));
}

#[test]
fn c07_dwt_round_trip() {
    use svr_core::loss::{dwt2, dwt_loss, idwt2};
    let tape = Tape::<f64>::disabled();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut worst_pr = 0.0f64;
    let mut worst_energy = 0.0f64;
    for _ in 0..100 {
        let h = 2 * rng.gen_range(2..=6);
        let w = 2 * rng.gen_range(2..=6);
        let img = rand_tensor(&mut rng, &[3, h, w], -1.0, 1.0);
        let bands = dwt2(&tape, &img).unwrap();
        let back = idwt2(&tape, &bands, h, w).unwrap();
        for (x, y) in img.data().iter().zip(back.data()) {
            worst_pr = worst_pr.max((x - y).abs());
        }
        let energy = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        let img_e = energy(&img);
        let band_e = energy(&bands.0) + energy(&bands.1) + energy(&bands.2) + energy(&bands.3);
        worst_energy = worst_energy.max((band_e - img_e).abs() / img_e);
    }
    assert!(worst_pr < 1e-5, "reconstruction error {worst_pr:.2e}");
    assert!(worst_energy < 1e-4, "energy mismatch {worst_energy:.2e}");

    let a = rand_tensor(&mut rng, &[3, 6, 8], 0.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 6, 8], 0.0, 1.0);
    let zero = dwt_loss(&tape, &a, &b, &a, &b).unwrap();
    assert_eq!(zero.data(), &[0.0]);
    pass(
        "C07",
        format!(
            "100 images: reconstruction {worst_pr:.2e}, energy drift {worst_energy:.2e}, identical pairs 0"
        ),
    );
}

#[test]
fn c08_metric_oracles() {
    // Self-similarity is exactly zero.
    let clip = synthetic_clip(&SyntheticSpec::default()).unwrap();
    let pairs: Vec<FramePair> = clip
        .left
        .iter()
        .zip(&clip.right)
        .map(|(l, r)| FramePair::new(l.clone(), r.clone()).unwrap())
        .collect();
    let (self_bds, _) = bds_video(&pairs, &pairs, 7, 2).unwrap();
    assert_eq!(self_bds, 0.0);

    // A constant offset of delta on a single-patch image costs exactly
    // 2 * delta^2 (completeness + coherence).
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base: Vec<f32> = (0..3 * 7 * 7).map(|_| rng.gen_range(0.0..0.5)).collect();
    let delta = 0.25f32;
    let shifted: Vec<f32> = base.iter().map(|v| v + delta).collect();
    let a = Tensor::new(&[3, 7, 7], base).unwrap();
    let b = Tensor::new(&[3, 7, 7], shifted).unwrap();
    let got = bds_image(&a, &b, 7, 2).unwrap();
    let want = 2.0 * (delta as f64) * (delta as f64);
    assert!((got - want).abs() < 1e-6, "one-patch bds {got} vs {want}");

    // Identity mapping leaves every disparity untouched.
    let ident = ColumnMapping::identity(clip.extents().1);
    let (ddr0, _) = ddr_video(&clip.disparity, &ident, &ident).unwrap();
    assert_eq!(ddr0.signed, 0.0);
    assert_eq!(ddr0.abs, 0.0);

    // Constant disparity under a uniform 50% reduction halves: the ratio is
    // exactly 0.5 * d / d_max = 0.5.
    let (h, w, d) = (3usize, 16usize, 4.0f32);
    let map = DisparityMap::new(Tensor::full(&[h, w], d).unwrap(), vec![true; h * w]).unwrap();
    let half = build_mapping(&[1.0; 16], 8).unwrap();
    let (halved, _) = ddr_video(&[map], &half, &half).unwrap();
    assert!((halved.abs - 0.5).abs() < 1e-6, "half-reduction ddr {}", halved.abs);
    assert!((halved.signed - 0.5).abs() < 1e-6);
    pass(
        "C08",
        format!(
            "bds(V,V) = 0; one-patch = {got:.6}; ddr identity = 0; half reduction = {:.6}",
            halved.abs
        ),
    );
}

#[test]
fn c09_toy_training() {
    let spec = SyntheticSpec {
        height: 16,
        width: 24,
        square: 6,
        ..SyntheticSpec::default()
    };
    let clip = synthetic_clip(&spec).unwrap();
    let mut cfg = toy_config();
    cfg.target_ratio = 1.0;
    cfg.iterations = 200;
    cfg.seed = 7;
    cfg.window = clip.len();
    assert_eq!(cfg.optim.lr, 0.05);

    let start = Instant::now();
    let (_, reports) = pipeline::run_training(std::slice::from_ref(&clip), &cfg).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(reports.len(), 200);
    assert!(
        elapsed.as_secs_f64() < 600.0,
        "training took {elapsed:?}, budget is 10 min"
    );
    let early: f64 = reports[..5].iter().map(|r| r.total).sum::<f64>() / 5.0;
    let last = reports.last().unwrap().total;
    assert!(last.is_finite() && early.is_finite());
    assert!(
        last < 0.7 * early,
        "loss only moved from {early:.5} (first-5 mean) to {last:.5}"
    );

    let csv = pipeline::loss_csv(&reports);
    let (_, again) = pipeline::run_training(std::slice::from_ref(&clip), &cfg).unwrap();
    assert_eq!(
        csv.as_bytes(),
        pipeline::loss_csv(&again).as_bytes(),
        "loss curve not bitwise reproducible"
    );
    pass(
        "C09",
        format!(
            "200 steps in {:.0}s; total {early:.4} -> {last:.4} ({:.0}% drop); curve bitwise stable",
            elapsed.as_secs_f64(),
            100.0 * (1.0 - last / early)
        ),
    );
}

#[test]
fn c10_bds_performance_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut rand_frame = || {
        let data: Vec<f32> = (0..3 * 64 * 128).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(&[3, 64, 128], data).unwrap()
    };
    let a = rand_frame();
    let b = rand_frame();
    let start = Instant::now();
    let value = bds_image(&a, &b, 7, 2).unwrap();
    let elapsed = start.elapsed();
    assert!(value.is_finite() && value > 0.0);
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "bds on 64x128 took {elapsed:?}, budget is 10 s"
    );
    pass(
        "C10",
        format!("exhaustive bds on 64x128 in {:.2}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn c11_cli_identity_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    write_synthetic_dataset(&data, &SyntheticSpec::default()).unwrap();

    let config_path = dir.path().join("run.toml");
    let config = format!(
        "target_ratio = 1.0\nwindow = 4\nseed = 7\nstream_channels = 8\n\n\
         [svt]\nh = 8\nw = 8\nd = 24\nlayers = 1\nmlp_dim = 48\nchannels = 4\n\n\
         [paths]\nframes = {:?}\ndisparity = {:?}\noutput = {:?}\n",
        data, data.join("disparity"), out
    );
    std::fs::write(&config_path, config).unwrap();

    let exe = env!("CARGO_BIN_EXE_svr");
    let status = std::process::Command::new(exe)
        .args(["retarget", "--config"])
        .arg(&config_path)
        .status()
        .unwrap();
    assert!(status.success(), "retarget exited with {status}");

    // Every retargeted center frame must match its source bit for bit.
    let ids: Vec<String> = std::fs::read_dir(out.join("left"))
        .unwrap()
        .map(|e| e.unwrap().path().file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(!ids.is_empty());
    for id in &ids {
        for view in ["left", "right"] {
            let src = svr_cli::imageio::load_rgb(&data.join(view).join(id)).unwrap();
            let ret = svr_cli::imageio::load_rgb(&out.join(view).join(id)).unwrap();
            assert_eq!(src.data(), ret.data(), "{view}/{id} differs from source");
        }
    }

    let report_path = dir.path().join("report.json");
    let status = std::process::Command::new(exe)
        .arg("evaluate")
        .arg("--source")
        .arg(&data)
        .arg("--retargeted")
        .arg(&out)
        .arg("--mappings")
        .arg(out.join("mappings"))
        .args(["--metrics", "bds,featdist,ddr", "--out"])
        .arg(&report_path)
        .status()
        .unwrap();
    assert!(status.success(), "evaluate exited with {status}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["bds"].as_f64(), Some(0.0));
    assert_eq!(report["feature_distance"].as_f64(), Some(0.0));
    assert_eq!(report["ddr_signed"].as_f64(), Some(0.0));
    assert_eq!(report["ddr_abs"].as_f64(), Some(0.0));
    pass(
        "C11",
        format!(
            "retarget + evaluate over {} frames: frames bit-exact, bds = 0, featdist = 0, ddr = 0",
            ids.len()
        ),
    );
}
