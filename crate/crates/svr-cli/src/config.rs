//! Run configuration: a flat TOML file with sections mirroring every
//! runtime knob, loadable from disk and overridable from CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svr_core::loss::LossWeights;
use svr_core::svt::SvtConfig;
use svr_core::warp::ShiftParams;
use svr_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSection {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ShiftSection {
    fn default() -> Self {
        let p = ShiftParams::default();
        ShiftSection {
            alpha: p.alpha,
            beta: p.beta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvtSection {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Channels of the de-patched feature map joined with the warped frame.
    pub channels: usize,
}

impl Default for SvtSection {
    fn default() -> Self {
        let c = SvtConfig::default();
        SvtSection {
            t: c.t,
            h: c.h,
            w: c.w,
            d: c.d,
            layers: c.layers,
            heads: c.heads,
            mlp_dim: c.mlp_dim,
            channels: 8,
        }
    }
}

impl SvtSection {
    pub fn to_core(&self) -> SvtConfig {
        SvtConfig {
            t: self.t,
            h: self.h,
            w: self.w,
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            mlp_dim: self.mlp_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha_reg: f64,
    pub gamma: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            alpha_reg: w.alpha_reg,
            gamma: w.gamma,
        }
    }
}

impl LossSection {
    pub fn to_core(&self) -> LossWeights {
        LossWeights {
            alpha_reg: self.alpha_reg,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Root holding `left/` and `right/` frame directories.
    pub frames: Option<PathBuf>,
    /// Per-view saliency PNGs (mirrors the frames layout). Unset = uniform.
    pub saliency: Option<PathBuf>,
    /// Per-view detection-box JSON files (mirrors the frames layout).
    pub boxes: Option<PathBuf>,
    /// Flat directory of 16-bit disparity PNGs keyed by frame name.
    pub disparity: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Full runtime configuration; every field has a desk-scale default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub target_ratio: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Temporal window length T.
    pub window: usize,
    /// Detection-box confidence floor used when fusing saliency.
    pub min_confidence: f64,
    /// Channels of the joined stream fed to the parallax attention block.
    pub stream_channels: usize,
    pub shift: ShiftSection,
    pub svt: SvtSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            target_ratio: 1.0,
            iterations: 200,
            seed: 7,
            window: 4,
            min_confidence: 0.25,
            stream_channels: 16,
            shift: ShiftSection::default(),
            svt: SvtSection::default(),
            loss: LossSection::default(),
            optim: OptimSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::contract(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ingestion(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0) {
            return Err(Error::contract(format!(
                "target_ratio must be positive, got {}",
                self.target_ratio
            )));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                self.optim.lr
            )));
        }
        if self.window == 0 {
            return Err(Error::contract("window must be at least 1"));
        }
        if self.stream_channels == 0 || self.svt.channels == 0 {
            return Err(Error::contract("channel counts must be at least 1"));
        }
        self.svt.to_core().validate()?;
        self.loss.to_core().validate()?;
        ShiftParams::new(self.shift.alpha, self.shift.beta, self.target_ratio)?;
        Ok(())
    }

    pub fn shift_params(&self) -> Result<ShiftParams> {
        ShiftParams::new(self.shift.alpha, self.shift.beta, self.target_ratio)
    }

    /// Frames root, required for dataset-driven subcommands.
    pub fn frames_root(&self) -> Result<&Path> {
        self.paths
            .frames
            .as_deref()
            .ok_or_else(|| Error::contract("paths.frames is not set"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.target_ratio, cfg.target_ratio);
        assert_eq!(back.optim.lr, cfg.optim.lr);
        assert_eq!(back.svt.d, cfg.svt.d);
    }

    #[test]
    fn partial_files_keep_section_defaults() {
        let cfg = RunConfig::from_toml_str(
            "target_ratio = 0.5\n[optim]\nlr = 0.01\n[svt]\nd = 48\n",
        )
        .unwrap();
        assert_eq!(cfg.target_ratio, 0.5);
        assert_eq!(cfg.optim.lr, 0.01);
        assert_eq!(cfg.optim.beta1, 0.9);
        assert_eq!(cfg.svt.d, 48);
        assert_eq!(cfg.svt.heads, 3);
    }

    #[test]
    fn invalid_values_and_unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("target_ratio = 0.0").is_err());
        assert!(RunConfig::from_toml_str("[optim]\nlr = -1.0").is_err());
        assert!(RunConfig::from_toml_str("window = 0").is_err());
        assert!(RunConfig::from_toml_str("no_such_key = 1").is_err());
    }

    #[test]
    fn load_reports_missing_file_as_ingestion() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.to_string().contains("ingestion"), "{err}");
    }
}
