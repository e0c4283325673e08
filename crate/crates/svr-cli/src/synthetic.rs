//! Procedural stereo fixture: a bright square sliding over a gradient
//! background, with layered integer disparity. Deterministic by
//! construction, used by the training smoke tests and CLI round trips.

use std::path::Path;

use svr_core::saliency::DisparityMap;
use svr_core::tensor::Tensor;
use svr_core::Result;

use crate::dataset::StereoClip;
use crate::imageio;

/// Geometry of the synthetic scene.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Side of the moving square.
    pub square: usize,
    /// Background (far layer) disparity in whole pixels.
    pub disp_bg: usize,
    /// Square (near layer) disparity in whole pixels.
    pub disp_fg: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 24,
            width: 32,
            frames: 8,
            square: 8,
            disp_bg: 2,
            disp_fg: 4,
        }
    }
}

const CHANNEL_GAIN: [f32; 3] = [1.0, 0.92, 0.8];
const SQUARE_COLOR: [f32; 3] = [0.95, 0.9, 0.55];

fn background(x: f64, y: f64, w: usize, h: usize, c: usize) -> f32 {
    let g = 0.15 + 0.55 * (x + 2.0 * y) / (w as f64 + 2.0 * h as f64);
    (g as f32 * CHANNEL_GAIN[c]).clamp(0.0, 1.0)
}

/// Square top-left corner for frame `k`: slides one pixel right and wraps
/// inside the visible area.
fn square_origin(spec: &SyntheticSpec, k: usize) -> (usize, usize) {
    let span = spec.width.saturating_sub(spec.square + spec.disp_fg + 1).max(1);
    let x0 = 1 + k % span;
    let y0 = spec.height.saturating_sub(spec.square) / 2;
    (x0, y0)
}

/// Render one view. `view_shift` moves every layer right by its disparity,
/// so a left-image column `s` matches right-image column `s + d`.
fn render(spec: &SyntheticSpec, k: usize, right_view: bool) -> Tensor<f32> {
    let (h, w) = (spec.height, spec.width);
    let (x0, y0) = square_origin(spec, k);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (bg_shift, fg_shift) = if right_view {
                (spec.disp_bg as i64, spec.disp_fg as i64)
            } else {
                (0, 0)
            };
            let in_square = {
                let sx = x as i64 - fg_shift;
                let sy = y as i64;
                sx >= x0 as i64
                    && sx < (x0 + spec.square) as i64
                    && sy >= y0 as i64
                    && sy < (y0 + spec.square) as i64
            };
            for c in 0..3 {
                let v = if in_square {
                    SQUARE_COLOR[c]
                } else {
                    background((x as i64 - bg_shift) as f64, y as f64, w, h, c)
                };
                data[(c * h + y) * w + x] = v;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("synthetic frame")
}

fn disparity(spec: &SyntheticSpec, k: usize) -> DisparityMap {
    let (h, w) = (spec.height, spec.width);
    let (x0, y0) = square_origin(spec, k);
    let mut values = vec![spec.disp_bg as f32; h * w];
    for y in y0..(y0 + spec.square).min(h) {
        for x in x0..(x0 + spec.square).min(w) {
            values[y * w + x] = spec.disp_fg as f32;
        }
    }
    DisparityMap::new(Tensor::new(&[h, w], values).expect("disparity"), vec![true; h * w])
        .expect("synthetic disparity")
}

/// Build the full clip in memory.
pub fn synthetic_clip(spec: &SyntheticSpec) -> Result<StereoClip> {
    let ids = (0..spec.frames).map(|k| format!("clip_{k:02}")).collect();
    let left = (0..spec.frames).map(|k| render(spec, k, false)).collect();
    let right = (0..spec.frames).map(|k| render(spec, k, true)).collect();
    let disp = (0..spec.frames).map(|k| disparity(spec, k)).collect();
    StereoClip::new("clip".to_string(), ids, left, right, disp)
}

/// Write the clip as a dataset: `root/left`, `root/right`, and
/// `root/disparity` PNG files named `clip_NN.png`.
pub fn write_synthetic_dataset(root: &Path, spec: &SyntheticSpec) -> Result<()> {
    let clip = synthetic_clip(spec)?;
    for (k, id) in clip.frame_ids.iter().enumerate() {
        let name = format!("{id}.png");
        imageio::save_rgb(&root.join("left").join(&name), &clip.left[k])?;
        imageio::save_rgb(&root.join("right").join(&name), &clip.right[k])?;
        imageio::save_disparity(&root.join("disparity").join(&name), &clip.disparity[k])?;
    }
    Ok(())
}
