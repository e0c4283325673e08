//! Evaluation metrics: bidirectional patch similarity, deep-feature
//! distance, and the disparity distortion ratio, each reported as a video
//! aggregate plus per-frame breakdowns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::extract_features;
use crate::saliency::DisparityMap;
use crate::tensor::{Tape, Tensor};
use crate::warp::ColumnMapping;
use crate::weights::ParamSet;

/// One stereo frame: left and right RGB tensors `[3, H, W]`.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
}

impl FramePair {
    pub fn new(left: Tensor<f32>, right: Tensor<f32>) -> Result<Self> {
        for t in [&left, &right] {
            if t.rank() != 3 || t.shape()[0] != 3 {
                return Err(Error::dimension(format!(
                    "frame must be [3,H,W], got {:?}",
                    t.shape()
                )));
            }
        }
        if left.shape() != right.shape() {
            return Err(Error::dimension("stereo views differ in extents"));
        }
        Ok(FramePair { left, right })
    }
}

/// Signed and absolute disparity distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdrValue {
    pub signed: f64,
    pub abs: f64,
}

/// Per-frame metric values; a field is absent when that metric was not
/// requested or its inputs were unavailable.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FrameBreakdown {
    pub frame: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ddr_signed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ddr_abs: Option<f64>,
}

/// Video-level metric aggregates with per-frame breakdowns.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ddr_signed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ddr_abs: Option<f64>,
    pub per_frame: Vec<FrameBreakdown>,
}

/// Flatten every `patch x patch` window at the given stride into contiguous
/// channel-major rows.
fn extract_patches(img: &Tensor<f32>, patch: usize, stride: usize) -> Vec<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let data = img.data();
    let mut out = Vec::new();
    let mut y = 0;
    while y + patch <= h {
        let mut x = 0;
        while x + patch <= w {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + y + dy) * w + x;
                    out.extend_from_slice(&data[row..row + patch]);
                }
            }
            x += stride;
        }
        y += stride;
    }
    out
}

/// Mean over `from` patches of the minimum sum-of-squared-differences to any
/// `to` patch, normalized per pixel per channel.
fn directed_patch_distance(from: &[f32], to: &[f32], dim: usize) -> f64 {
    let n_from = from.len() / dim;
    let n_to = to.len() / dim;
    let mut acc = 0.0f64;
    for i in 0..n_from {
        let a = &from[i * dim..(i + 1) * dim];
        let mut best = f32::INFINITY;
        for j in 0..n_to {
            let b = &to[j * dim..(j + 1) * dim];
            let mut ssd = 0.0f32;
            for k in 0..dim {
                let d = a[k] - b[k];
                ssd += d * d;
            }
            if ssd < best {
                best = ssd;
            }
        }
        acc += best as f64;
    }
    acc / (n_from as f64 * dim as f64)
}

/// Bidirectional similarity between two images: completeness (source
/// patches explained by the retargeted image) plus coherence (the reverse).
pub fn bds_image(
    source: &Tensor<f32>,
    retargeted: &Tensor<f32>,
    patch: usize,
    stride: usize,
) -> Result<f64> {
    if patch == 0 || stride == 0 {
        return Err(Error::contract("patch and stride must be positive"));
    }
    for t in [source, retargeted] {
        if t.rank() != 3 {
            return Err(Error::dimension("bds expects [C,H,W] images"));
        }
        if t.shape()[1] < patch || t.shape()[2] < patch {
            return Err(Error::contract(format!(
                "patch {patch} exceeds image extents {:?}",
                t.shape()
            )));
        }
    }
    let dim = source.shape()[0] * patch * patch;
    let src = extract_patches(source, patch, stride);
    let ret = extract_patches(retargeted, patch, stride);
    let completeness = directed_patch_distance(&src, &ret, dim);
    let coherence = directed_patch_distance(&ret, &src, dim);
    Ok(completeness + coherence)
}

/// BDS for a frame sequence: per frame, the mean of the two views; the
/// aggregate is the mean over frames.
pub fn bds_video(
    source: &[FramePair],
    retargeted: &[FramePair],
    patch: usize,
    stride: usize,
) -> Result<(f64, Vec<f64>)> {
    if source.len() != retargeted.len() || source.is_empty() {
        return Err(Error::contract(
            "source and retargeted sequences must be non-empty and equal length",
        ));
    }
    let mut per_frame = Vec::with_capacity(source.len());
    for (s, r) in source.iter().zip(retargeted) {
        let l = bds_image(&s.left, &r.left, patch, stride)?;
        let rr = bds_image(&s.right, &r.right, patch, stride)?;
        per_frame.push((l + rr) / 2.0);
    }
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok((mean, per_frame))
}

/// Feature distance between one source and one retargeted image: mean of
/// the three extractor-stage MSEs, the retargeted image resized to source
/// extents first.
pub fn feature_distance_image(
    source: &Tensor<f32>,
    retargeted: &Tensor<f32>,
    extractor: &ParamSet,
) -> Result<f64> {
    let tape = Tape::<f32>::disabled();
    let p = extractor.bind(&tape);
    let (h, w) = (source.shape()[1], source.shape()[2]);
    let ret = if retargeted.shape()[1] == h && retargeted.shape()[2] == w {
        retargeted.clone()
    } else {
        tape.resize_bilinear(retargeted, h, w)?
    };
    let fs = extract_features(&tape, source, &p)?;
    let fr = extract_features(&tape, &ret, &p)?;
    let mut acc = 0.0f64;
    for (a, b) in fs.iter().zip(&fr) {
        let mut sum = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = (*x - *y) as f64;
            sum += d * d;
        }
        acc += sum / a.numel() as f64;
    }
    Ok(acc / 3.0)
}

/// Feature distance averaged over views and frames.
pub fn feature_distance_video(
    source: &[FramePair],
    retargeted: &[FramePair],
    extractor: &ParamSet,
) -> Result<(f64, Vec<f64>)> {
    if source.len() != retargeted.len() || source.is_empty() {
        return Err(Error::contract(
            "source and retargeted sequences must be non-empty and equal length",
        ));
    }
    let mut per_frame = Vec::with_capacity(source.len());
    for (s, r) in source.iter().zip(retargeted) {
        let l = feature_distance_image(&s.left, &r.left, extractor)?;
        let rr = feature_distance_image(&s.right, &r.right, extractor)?;
        per_frame.push((l + rr) / 2.0);
    }
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok((mean, per_frame))
}

/// Disparity distortion for a frame sequence.
///
/// For each valid source pixel on the retargeted grid: the source column is
/// `s = inverse_l(u)`, its match sits at `s + D(s, y)`, and the retargeted
/// disparity is `tgt_r(s + D) - u`. Distortion is the normalized difference
/// against `D` itself. Invalid disparity pixels, and pixels whose match
/// falls outside the source frame (unobservable, so transport is
/// undefined), contribute to neither the sum nor the count.
pub fn ddr_video(
    disparity: &[DisparityMap],
    mapping_l: &ColumnMapping,
    mapping_r: &ColumnMapping,
) -> Result<(DdrValue, Vec<DdrValue>)> {
    let pairs: Vec<(ColumnMapping, ColumnMapping)> = disparity
        .iter()
        .map(|_| (mapping_l.clone(), mapping_r.clone()))
        .collect();
    ddr_video_with(disparity, &pairs)
}

/// [`ddr_video`] with one mapping pair per frame; the disparity range is
/// still taken over the whole sequence.
pub fn ddr_video_with(
    disparity: &[DisparityMap],
    mappings: &[(ColumnMapping, ColumnMapping)],
) -> Result<(DdrValue, Vec<DdrValue>)> {
    if disparity.is_empty() {
        return Err(Error::contract("ddr needs at least one disparity map"));
    }
    if mappings.len() != disparity.len() {
        return Err(Error::contract(format!(
            "{} disparity maps but {} mapping pairs",
            disparity.len(),
            mappings.len()
        )));
    }
    let mut d_max = 0.0f64;
    for map in disparity {
        for (&v, &ok) in map.values().data().iter().zip(map.valid()) {
            if ok {
                d_max = d_max.max((v as f64).abs());
            }
        }
    }
    if d_max <= 0.0 {
        return Err(Error::contract(
            "disparity range is empty; ddr is undefined",
        ));
    }
    let mut per_frame = Vec::with_capacity(disparity.len());
    let mut total_signed = 0.0f64;
    let mut total_abs = 0.0f64;
    let mut total_n = 0usize;
    for (map, (mapping_l, mapping_r)) in disparity.iter().zip(mappings) {
        let w_src = map.width();
        if mapping_l.source_width() != w_src || mapping_r.source_width() != w_src {
            return Err(Error::dimension(format!(
                "mappings cover {} source columns, disparity has {w_src}",
                mapping_l.source_width()
            )));
        }
        let wt = mapping_l.target_width();
        let (mut signed, mut abs, mut n) = (0.0f64, 0.0f64, 0usize);
        for y in 0..map.height() {
            for u in 0..wt {
                let s = mapping_l.inverse(u as f64);
                let col = (s.round().max(0.0) as usize).min(w_src - 1);
                if !map.valid()[y * w_src + col] {
                    continue;
                }
                let d = map.values().data()[y * w_src + col] as f64;
                let matched = s + d;
                if !(0.0..=w_src as f64).contains(&matched) {
                    continue;
                }
                let transported = mapping_r.forward(matched) - u as f64;
                let diff = d - transported;
                signed += diff;
                abs += diff.abs();
                n += 1;
            }
        }
        total_signed += signed;
        total_abs += abs;
        total_n += n;
        let denom = d_max * n.max(1) as f64;
        per_frame.push(DdrValue {
            signed: signed / denom,
            abs: abs / denom,
        });
    }
    let denom = d_max * total_n.max(1) as f64;
    Ok((
        DdrValue {
            signed: total_signed / denom,
            abs: total_abs / denom,
        },
        per_frame,
    ))
}
