//! `svr`: saliency fusion, retargeting, training, evaluation, and the
//! gradient-check suite behind one binary.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 ingestion, 3 numeric.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use svr_cli::config::RunConfig;
use svr_cli::dataset::load_dataset;
use svr_cli::{imageio, pipeline};
use svr_core::metrics::{
    bds_video, ddr_video_with, feature_distance_video, FrameBreakdown, FramePair, MetricsReport,
};
use svr_core::saliency::{DetectionBoxSet, SaliencyMap};
use svr_core::weights::ParamSet;
use svr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "svr", version, about = "Saliency-driven stereo video retargeting")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse saliency maps, detection boxes, and disparity into dilated masks
    FuseSaliency {
        /// Directory of 8-bit grayscale saliency PNGs
        #[arg(long)]
        saliency: PathBuf,
        /// Directory of per-frame detection JSON files
        #[arg(long)]
        boxes: PathBuf,
        /// Directory of 16-bit disparity PNGs
        #[arg(long)]
        disparity: PathBuf,
        /// Output directory for fused-mask PNGs
        #[arg(long)]
        out: PathBuf,
        /// Detection confidence floor
        #[arg(long = "min-conf", default_value_t = 0.25)]
        min_conf: f64,
    },
    /// Retarget every clip's middle frames to the target aspect ratio
    Retarget {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured target ratio
        #[arg(long)]
        ratio: Option<f64>,
        /// Load model weights from this file
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Override the configured output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the unsupervised training loop
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare a retargeted video against its source
    Evaluate {
        /// Source root containing left/ and right/ (and disparity/ for ddr)
        #[arg(long)]
        source: PathBuf,
        /// Retargeted root containing left/ and right/
        #[arg(long)]
        retargeted: PathBuf,
        /// Directory of column-mapping files written by retarget
        #[arg(long)]
        mappings: Option<PathBuf>,
        /// Comma-separated list from bds, featdist, ddr
        #[arg(long, default_value = "bds,featdist,ddr")]
        metrics: String,
        /// Report output path (JSON)
        #[arg(long)]
        out: PathBuf,
        /// Seed for the feature-distance extractor
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run every finite-difference gradient check
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) => 1,
        Error::Dimension(_) | Error::Ingestion(_) | Error::Io(_) => 2,
        Error::Numeric(_) | Error::Training { .. } => 3,
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::FuseSaliency {
            saliency,
            boxes,
            disparity,
            out,
            min_conf,
        } => fuse_saliency(&saliency, &boxes, &disparity, &out, min_conf),
        Command::Retarget {
            config,
            ratio,
            weights,
            out,
        } => retarget(&config, ratio, weights, out),
        Command::Train {
            config,
            iterations,
            lr,
            seed,
        } => train(&config, iterations, lr, seed),
        Command::Evaluate {
            source,
            retargeted,
            mappings,
            metrics,
            out,
            seed,
        } => evaluate(&source, &retargeted, mappings.as_deref(), &metrics, &out, seed),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

/// Sorted stems of the PNG files in a directory.
fn frame_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::ingestion(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    Ok(ids)
}

fn fuse_saliency(
    saliency_dir: &Path,
    boxes_dir: &Path,
    disparity_dir: &Path,
    out_dir: &Path,
    min_conf: f64,
) -> Result<u8> {
    let ids = frame_ids(saliency_dir)?;
    if ids.is_empty() {
        return Err(Error::ingestion(format!(
            "no saliency PNGs under {}",
            saliency_dir.display()
        )));
    }
    for id in &ids {
        let name = format!("{id}.png");
        let sal = SaliencyMap::new(imageio::load_gray(&saliency_dir.join(&name))?, id)?;
        let boxes_path = boxes_dir.join(format!("{id}.json"));
        let text = std::fs::read_to_string(&boxes_path)
            .map_err(|e| Error::ingestion(format!("{}: {e}", boxes_path.display())))?;
        let boxes = DetectionBoxSet::from_json_str(&text)?;
        let disp = imageio::load_disparity(&disparity_dir.join(&name))?;
        let mask = pipeline::prepare_mask(Some((&sal, &boxes)), &disp, min_conf)?;
        imageio::save_gray(&out_dir.join(&name), mask.values())?;
    }
    println!("fused {} mask(s) into {}", ids.len(), out_dir.display());
    Ok(0)
}

/// Per-view fused mask for a clip center, honoring the configured saliency
/// and box directories (uniform when unset).
fn clip_masks(
    clip: &svr_cli::dataset::StereoClip,
    cfg: &RunConfig,
) -> Result<(svr_core::saliency::FusedMask, svr_core::saliency::FusedMask)> {
    let disp = &clip.disparity[clip.center];
    match (&cfg.paths.saliency, &cfg.paths.boxes) {
        (None, _) => {
            let (h, w) = clip.extents();
            let uniform = svr_core::saliency::FusedMask::uniform(h, w);
            Ok((uniform.clone(), uniform))
        }
        (Some(_), None) => Err(Error::contract(
            "paths.boxes must be set when paths.saliency is set",
        )),
        (Some(sal_root), Some(box_root)) => {
            let mut masks = Vec::with_capacity(2);
            for view in ["left", "right"] {
                let id = clip.center_id();
                let sal_path = sal_root.join(view).join(format!("{id}.png"));
                let sal = SaliencyMap::new(imageio::load_gray(&sal_path)?, id)?;
                let box_path = box_root.join(view).join(format!("{id}.json"));
                let text = std::fs::read_to_string(&box_path)
                    .map_err(|e| Error::ingestion(format!("{}: {e}", box_path.display())))?;
                let boxes = DetectionBoxSet::from_json_str(&text)?;
                masks.push(pipeline::prepare_mask(
                    Some((&sal, &boxes)),
                    disp,
                    cfg.min_confidence,
                )?);
            }
            let right = masks.pop().expect("two views");
            let left = masks.pop().expect("two views");
            Ok((left, right))
        }
    }
}

fn retarget(
    config: &Path,
    ratio: Option<f64>,
    weights: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<u8> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(r) = ratio {
        cfg.target_ratio = r;
    }
    if let Some(w) = weights {
        cfg.paths.weights = Some(w);
    }
    if let Some(o) = out {
        cfg.paths.output = Some(o);
    }
    cfg.validate()?;

    let (clips, warnings) = load_dataset(
        cfg.frames_root()?,
        cfg.paths.disparity.as_deref(),
        cfg.window,
    )?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if clips.is_empty() {
        return Err(Error::ingestion("no clips to retarget (all scenes too short)"));
    }
    let (h, w) = clips[0].extents();
    let mut params = pipeline::init_params(&cfg, h, w)?;
    if let Some(path) = &cfg.paths.weights {
        params.load_into(path)?;
    }
    let out_dir = cfg.paths.output.clone().unwrap_or_else(|| PathBuf::from("out"));
    for clip in &clips {
        let (mask_l, mask_r) = clip_masks(clip, &cfg)?;
        let result = pipeline::retarget_clip(clip, &mask_l, &mask_r, &cfg, &params)?;
        let id = clip.center_id();
        let name = format!("{id}.png");
        imageio::save_rgb(&out_dir.join("left").join(&name), &result.left)?;
        imageio::save_rgb(&out_dir.join("right").join(&name), &result.right)?;
        let maps = out_dir.join("mappings");
        imageio::save_mapping(&maps.join(format!("{id}.left.txt")), &result.mapping_l)?;
        imageio::save_mapping(&maps.join(format!("{id}.right.txt")), &result.mapping_r)?;
    }
    println!(
        "retargeted {} clip(s) at ratio {} into {}",
        clips.len(),
        cfg.target_ratio,
        out_dir.display()
    );
    Ok(0)
}

fn train(
    config: &Path,
    iterations: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> Result<u8> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(r) = lr {
        cfg.optim.lr = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    let (clips, warnings) = load_dataset(
        cfg.frames_root()?,
        cfg.paths.disparity.as_deref(),
        cfg.window,
    )?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let (params, reports) = pipeline::run_training(&clips, &cfg)?;

    let out_dir = cfg.paths.output.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)?;
    let weight_path = cfg
        .paths
        .weights
        .clone()
        .unwrap_or_else(|| out_dir.join("weights.svr"));
    params.save(&weight_path)?;
    let csv_path = out_dir.join("loss_curve.csv");
    std::fs::write(&csv_path, pipeline::loss_csv(&reports))?;
    match reports.last() {
        Some(r) => println!(
            "trained {} step(s); final total loss {}; weights at {}",
            reports.len(),
            r.total,
            weight_path.display()
        ),
        None => println!("no steps run; wrote initial weights to {}", weight_path.display()),
    }
    Ok(0)
}

fn load_pairs(root: &Path, ids: &[String]) -> Result<Vec<FramePair>> {
    let mut pairs = Vec::with_capacity(ids.len());
    for id in ids {
        let name = format!("{id}.png");
        let left = imageio::load_rgb(&root.join("left").join(&name))?;
        let right = imageio::load_rgb(&root.join("right").join(&name))?;
        pairs.push(FramePair::new(left, right)?);
    }
    Ok(pairs)
}

fn evaluate(
    source: &Path,
    retargeted: &Path,
    mappings: Option<&Path>,
    metrics: &str,
    out: &Path,
    seed: u64,
) -> Result<u8> {
    let requested: BTreeSet<&str> = metrics.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    for m in &requested {
        if !matches!(*m, "bds" | "featdist" | "ddr") {
            return Err(Error::contract(format!(
                "unknown metric `{m}` (expected bds, featdist, ddr)"
            )));
        }
    }
    if requested.is_empty() {
        return Err(Error::contract("no metrics requested"));
    }

    // Evaluate the frames present in the retargeted directory; each must
    // exist in the source.
    let ids = frame_ids(&retargeted.join("left"))?;
    if ids.is_empty() {
        return Err(Error::ingestion(format!(
            "no retargeted frames under {}",
            retargeted.join("left").display()
        )));
    }
    let src_pairs = load_pairs(source, &ids)?;
    let ret_pairs = load_pairs(retargeted, &ids)?;

    let mut report = MetricsReport {
        per_frame: ids
            .iter()
            .enumerate()
            .map(|(i, _)| FrameBreakdown {
                frame: i,
                ..Default::default()
            })
            .collect(),
        ..Default::default()
    };

    if requested.contains("bds") {
        let (agg, per) = bds_video(&src_pairs, &ret_pairs, 7, 2)?;
        report.bds = Some(agg);
        for (slot, v) in report.per_frame.iter_mut().zip(per) {
            slot.bds = Some(v);
        }
    }
    if requested.contains("featdist") {
        let mut extractor = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        svr_core::loss::register_extractor_params(&mut extractor, &mut rng)?;
        let (agg, per) = feature_distance_video(&src_pairs, &ret_pairs, &extractor)?;
        report.feature_distance = Some(agg);
        for (slot, v) in report.per_frame.iter_mut().zip(per) {
            slot.feature_distance = Some(v);
        }
    }
    if requested.contains("ddr") {
        let map_dir = mappings.ok_or_else(|| {
            Error::contract("ddr requires --mappings pointing at the retarget mapping files")
        })?;
        let disp_dir = source.join("disparity");
        let mut disparity = Vec::with_capacity(ids.len());
        let mut mapping_pairs = Vec::with_capacity(ids.len());
        for id in &ids {
            disparity.push(imageio::load_disparity(&disp_dir.join(format!("{id}.png")))?);
            let l = imageio::load_mapping(&map_dir.join(format!("{id}.left.txt")))?;
            let r = imageio::load_mapping(&map_dir.join(format!("{id}.right.txt")))?;
            mapping_pairs.push((l, r));
        }
        let (agg, per) = ddr_video_with(&disparity, &mapping_pairs)?;
        report.ddr_signed = Some(agg.signed);
        report.ddr_abs = Some(agg.abs);
        for (slot, v) in report.per_frame.iter_mut().zip(per) {
            slot.ddr_signed = Some(v.signed);
            slot.ddr_abs = Some(v.abs);
        }
    }

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::contract(format!("report serialization: {e}")))?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, json)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    println!(
        "frames {}  bds {}  featdist {}  ddr_signed {}  ddr_abs {}",
        ids.len(),
        fmt(report.bds),
        fmt(report.feature_distance),
        fmt(report.ddr_signed),
        fmt(report.ddr_abs)
    );
    Ok(0)
}

fn gradcheck(seed: u64) -> Result<u8> {
    let reports = svr_core::gradcheck::full_suite(seed);
    let mut failures = 0usize;
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{:<24} {:>10.3e}  {status}", r.name, r.max_rel_err);
        if !r.passed {
            failures += 1;
        }
    }
    println!("{} checks, {} failure(s)", reports.len(), failures);
    if failures == 0 {
        Ok(0)
    } else {
        Err(Error::numeric(format!("{failures} gradient check(s) failed")))
    }
}
