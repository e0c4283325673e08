//! Fusing co-saliency, detection boxes, and disparity into one salient-object
//! mask, plus the blur-and-dilate step that feeds the warping stage.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel visual importance in `[0,1]`.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    values: Tensor<f32>,
    pub frame_id: String,
}

impl SaliencyMap {
    pub fn new(values: Tensor<f32>, frame_id: &str) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dimension(format!(
                "saliency map must be [H,W], got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("saliency values must lie in [0,1]"));
        }
        Ok(SaliencyMap {
            values,
            frame_id: frame_id.to_string(),
        })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Left-referenced horizontal disparity in pixels with a validity flag per
/// pixel. Invalid pixels carry value 0.
#[derive(Debug, Clone)]
pub struct DisparityMap {
    values: Tensor<f32>,
    valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(values: Tensor<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dimension(format!(
                "disparity map must be [H,W], got {:?}",
                values.shape()
            )));
        }
        if values.numel() != valid.len() {
            return Err(Error::dimension(
                "disparity values and validity flags differ in length",
            ));
        }
        for (&v, &ok) in values.data().iter().zip(&valid) {
            if ok && v < 0.0 {
                return Err(Error::contract("valid disparities must be non-negative"));
            }
            if !ok && v != 0.0 {
                return Err(Error::contract("invalid disparity pixels must carry value 0"));
            }
        }
        Ok(DisparityMap { values, valid })
    }

    /// All-invalid map of the given extents.
    pub fn empty(h: usize, w: usize) -> Self {
        DisparityMap {
            values: Tensor::zeros(&[h, w]).expect("nonzero extents"),
            valid: vec![false; h * w],
        }
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Largest valid disparity magnitude, or None if nothing is valid.
    pub fn max_abs(&self) -> Option<f32> {
        let mut best: Option<f32> = None;
        for (&v, &ok) in self.values.data().iter().zip(&self.valid) {
            if ok {
                let a = v.abs();
                best = Some(best.map_or(a, |b| b.max(a)));
            }
        }
        best
    }
}

/// One detector box in pixel units.
#[derive(Debug, Clone, Deserialize)]
pub struct DetectionBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub label: String,
    pub conf: f64,
}

/// All detections for one frame.
#[derive(Debug, Clone, Default)]
pub struct DetectionBoxSet {
    pub boxes: Vec<DetectionBox>,
}

impl DetectionBoxSet {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let boxes: Vec<DetectionBox> = serde_json::from_str(s)
            .map_err(|e| Error::ingestion(format!("bad detection JSON: {e}")))?;
        Ok(DetectionBoxSet { boxes })
    }

    /// Check the box invariants against the frame extents.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for b in &self.boxes {
            if b.w <= 0.0 || b.h <= 0.0 {
                return Err(Error::contract(format!(
                    "box '{}' has non-positive extent {}x{}",
                    b.label, b.w, b.h
                )));
            }
            if b.x + b.w <= 0.0 || b.y + b.h <= 0.0 || b.x >= width as f64 || b.y >= height as f64 {
                return Err(Error::contract(format!(
                    "box '{}' lies outside the {width}x{height} frame",
                    b.label
                )));
            }
            if !(0.0..=1.0).contains(&b.conf) {
                return Err(Error::contract(format!(
                    "box '{}' confidence {} outside [0,1]",
                    b.label, b.conf
                )));
            }
        }
        Ok(())
    }
}

/// The fused salient-object mask, `[H,W]` values in `[0,1]`.
#[derive(Debug, Clone)]
pub struct FusedMask {
    values: Tensor<f32>,
}

impl FusedMask {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dimension(format!(
                "fused mask must be [H,W], got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("fused mask values must lie in [0,1]"));
        }
        Ok(FusedMask { values })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Mask that keeps every column equally important.
    pub fn uniform(h: usize, w: usize) -> Self {
        FusedMask {
            values: Tensor::full(&[h, w], 1.0).expect("nonzero extents"),
        }
    }
}

/// Combine saliency, disparity, and detections into a [`FusedMask`].
///
/// Disparity re-weights saliency multiplicatively (nearer content counts
/// more): with `ŵ` the min-max normalized disparity over valid pixels (0.5
/// where invalid or where the range is degenerate), the raw mask is
/// `saliency * (0.5 + 0.5 ŵ)`, zeroed outside the union of boxes at or above
/// `min_confidence`, then rescaled to peak 1 when any value is positive.
pub fn fuse(
    saliency: &SaliencyMap,
    disparity: &DisparityMap,
    boxes: &DetectionBoxSet,
    min_confidence: f64,
) -> Result<FusedMask> {
    let (h, w) = (saliency.height(), saliency.width());
    if disparity.height() != h || disparity.width() != w {
        return Err(Error::dimension(format!(
            "saliency {h}x{w} and disparity {}x{} extents differ",
            disparity.height(),
            disparity.width()
        )));
    }
    boxes.validate(w, h)?;

    let (mut dmin, mut dmax) = (f32::INFINITY, f32::NEG_INFINITY);
    for (&d, &ok) in disparity.values().data().iter().zip(disparity.valid()) {
        if ok {
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
    }
    let range = dmax - dmin;
    let weight = |i: usize| -> f32 {
        if disparity.valid()[i] && range > 0.0 {
            (disparity.values().data()[i] - dmin) / range
        } else {
            0.5
        }
    };

    let accepted: Vec<&DetectionBox> = boxes
        .boxes
        .iter()
        .filter(|b| b.conf >= min_confidence)
        .collect();
    let inside_union = |x: usize, y: usize| -> bool {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        accepted
            .iter()
            .any(|b| cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h)
    };

    let mut out = vec![0.0f32; h * w];
    let mut peak = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if inside_union(x, y) {
                let v = saliency.values().data()[i] * (0.5 + 0.5 * weight(i));
                out[i] = v;
                peak = peak.max(v);
            }
        }
    }
    if peak > 0.0 {
        for v in &mut out {
            *v /= peak;
        }
    }
    FusedMask::new(Tensor::new(&[h, w], out)?)
}

/// Symmetric 1-D Gaussian taps of odd length `k`, normalized to sum 1.
fn gaussian_taps(sigma: f64, k: usize) -> Vec<f32> {
    let c = (k / 2) as f64;
    let s2 = 2.0 * sigma * sigma;
    let raw: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / s2).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|&v| (v / sum) as f32).collect()
}

/// Horizontal-then-vertical separable pass with replicated borders.
fn separable<Fh, Fv>(h: usize, w: usize, src: &[f32], half: usize, fh: Fh, fv: Fv) -> Vec<f32>
where
    Fh: Fn(&[f32]) -> f32,
    Fv: Fn(&[f32]) -> f32,
{
    let k = 2 * half + 1;
    let mut tmp = vec![0.0f32; h * w];
    let mut window = vec![0.0f32; k];
    for y in 0..h {
        for x in 0..w {
            for (t, slot) in window.iter_mut().enumerate() {
                let sx = (x + t).saturating_sub(half).min(w - 1);
                *slot = src[y * w + sx];
            }
            tmp[y * w + x] = fh(&window);
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            for (t, slot) in window.iter_mut().enumerate() {
                let sy = (y + t).saturating_sub(half).min(h - 1);
                *slot = tmp[sy * w + x];
            }
            out[y * w + x] = fv(&window);
        }
    }
    out
}

/// Gaussian-blur then grow the mask: an all-ones `kernel x kernel`
/// convolution clamped to `[0,1]` serves as gray-scale dilation, so salient
/// support expands by `kernel/2` pixels in every direction.
pub fn dilate(mask: &FusedMask, blur_sigma: f64, kernel: usize) -> Result<FusedMask> {
    if kernel % 2 == 0 {
        return Err(Error::contract(format!("dilation kernel must be odd, got {kernel}")));
    }
    let (h, w) = (mask.height(), mask.width());
    let half = kernel / 2;
    let taps = gaussian_taps(blur_sigma, kernel);
    let taps2 = taps.clone();
    // Blur with replicated borders (a saturated mask must stay saturated).
    let blurred = separable(
        h,
        w,
        mask.values().data(),
        half,
        move |win| win.iter().zip(&taps).map(|(v, t)| v * t).sum(),
        move |win| win.iter().zip(&taps2).map(|(v, t)| v * t).sum(),
    );
    // Ones-kernel growth; borders replicate, and the clamp caps the sum.
    let grown = separable(
        h,
        w,
        &blurred,
        half,
        |win| win.iter().sum(),
        |win| win.iter().sum::<f32>().clamp(0.0, 1.0),
    );
    FusedMask::new(Tensor::new(&[h, w], grown)?)
}
