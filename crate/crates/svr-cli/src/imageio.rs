//! PNG and text-file codecs: 8-bit RGB frames, 8-bit grayscale masks,
//! 16-bit disparity maps (value/256, 0 = invalid), and column-mapping
//! boundary files.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use svr_core::saliency::DisparityMap;
use svr_core::tensor::Tensor;
use svr_core::warp::ColumnMapping;
use svr_core::{Error, Result};

fn file_err(path: &Path, what: impl Display) -> Error {
    Error::ingestion(format!("{}: {what}", path.display()))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| file_err(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    }
    Ok(())
}

/// Load an 8-bit RGB frame as `[3, H, W]` intensities in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[(c * h + y) * w + x] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Save a `[3, H, W]` frame as an 8-bit RGB PNG (values clamped to `[0, 1]`).
pub fn save_rgb(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    if frame.rank() != 3 || frame.shape()[0] != 3 {
        return Err(Error::dimension(format!(
            "expected [3,H,W] frame, got {:?}",
            frame.shape()
        )));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let data = frame.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let mut px = [0u8; 3];
        for c in 0..3 {
            px[c] = (data[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| file_err(path, e))
}

/// Load an 8-bit grayscale PNG as `[H, W]` values in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; h * w];
    for (x, y, px) in img.enumerate_pixels() {
        data[y as usize * w + x as usize] = px.0[0] as f32 / 255.0;
    }
    Tensor::new(&[h, w], data)
}

/// Save `[H, W]` values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, values: &Tensor<f32>) -> Result<()> {
    if values.rank() != 2 {
        return Err(Error::dimension(format!(
            "expected [H,W] values, got {:?}",
            values.shape()
        )));
    }
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let data = values.data();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(data[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| file_err(path, e))
}

/// Load a 16-bit disparity PNG: disparity = value / 256, value 0 = invalid.
pub fn load_disparity(path: &Path) -> Result<DisparityMap> {
    let img = open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut values = vec![0.0f32; h * w];
    let mut valid = vec![false; h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        if px.0[0] != 0 {
            values[i] = px.0[0] as f32 / 256.0;
            valid[i] = true;
        }
    }
    DisparityMap::new(Tensor::new(&[h, w], values)?, valid)
}

/// Save a disparity map as a 16-bit PNG (invalid pixels stored as 0).
pub fn save_disparity(path: &Path, map: &DisparityMap) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let data = map.values().data();
    let valid = map.valid();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if valid[i] {
            // Valid zero disparity would collide with the invalid code, so
            // it saturates to the smallest representable positive value.
            Luma([((data[i] * 256.0).round() as u32).clamp(1, u16::MAX as u32) as u16])
        } else {
            Luma([0u16])
        }
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| file_err(path, e))
}

/// Save a column mapping as text: one header line `source_width
/// target_width`, then one boundary coordinate per line.
pub fn save_mapping(path: &Path, mapping: &ColumnMapping) -> Result<()> {
    let mut out = format!("{} {}\n", mapping.source_width(), mapping.target_width());
    for v in mapping.tgt() {
        // Default f64 formatting is shortest-round-trip, so load_mapping
        // recovers the exact bits.
        out.push_str(&format!("{v}\n"));
    }
    ensure_parent(path)?;
    fs::write(path, out).map_err(|e| file_err(path, e))
}

/// Load a column mapping written by [`save_mapping`].
pub fn load_mapping(path: &Path) -> Result<ColumnMapping> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| file_err(path, "empty mapping file"))?;
    let mut parts = header.split_whitespace();
    let source_width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| file_err(path, "malformed mapping header"))?;
    let target_width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| file_err(path, "malformed mapping header"))?;
    let tgt: Vec<f64> = lines
        .map(|l| l.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| file_err(path, e))?;
    if tgt.len() != source_width + 1 {
        return Err(file_err(
            path,
            format!("expected {} boundaries, found {}", source_width + 1, tgt.len()),
        ));
    }
    ColumnMapping::from_boundaries(tgt, target_width)
}
