//! KITTI-style dataset ingestion: `left/` and `right/` frame directories
//! (plus an optional disparity directory), grouped into scenes by filename
//! prefix and cut into sliding temporal windows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use svr_core::saliency::DisparityMap;
use svr_core::tensor::Tensor;
use svr_core::{Error, Result};

use crate::imageio;

/// A temporal window of stereo frames with per-frame disparity.
#[derive(Debug, Clone)]
pub struct StereoClip {
    pub scene: String,
    pub frame_ids: Vec<String>,
    pub left: Vec<Tensor<f32>>,
    pub right: Vec<Tensor<f32>>,
    pub disparity: Vec<DisparityMap>,
    pub center: usize,
}

impl StereoClip {
    pub fn new(
        scene: String,
        frame_ids: Vec<String>,
        left: Vec<Tensor<f32>>,
        right: Vec<Tensor<f32>>,
        disparity: Vec<DisparityMap>,
    ) -> Result<Self> {
        let t = frame_ids.len();
        if t == 0 {
            return Err(Error::contract("clip needs at least one frame"));
        }
        if left.len() != t || right.len() != t || disparity.len() != t {
            return Err(Error::contract(format!(
                "clip streams disagree: {t} ids, {} left, {} right, {} disparity",
                left.len(),
                right.len(),
                disparity.len()
            )));
        }
        let shape = left[0].shape().to_vec();
        for f in left.iter().chain(&right) {
            if f.shape() != &shape[..] {
                return Err(Error::dimension(format!(
                    "clip frames differ in extents: {:?} vs {:?}",
                    f.shape(),
                    shape
                )));
            }
        }
        for d in &disparity {
            if [d.height(), d.width()] != shape[1..] {
                return Err(Error::dimension(format!(
                    "disparity {}x{} does not match frames {:?}",
                    d.height(),
                    d.width(),
                    shape
                )));
            }
        }
        Ok(StereoClip {
            scene,
            frame_ids,
            left,
            right,
            disparity,
            center: t / 2,
        })
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    /// Frame extents as `(height, width)`.
    pub fn extents(&self) -> (usize, usize) {
        (self.left[0].shape()[1], self.left[0].shape()[2])
    }

    pub fn center_id(&self) -> &str {
        &self.frame_ids[self.center]
    }
}

/// Scene id: the filename stem up to the last underscore, or the whole stem
/// when there is none.
fn scene_of(stem: &str) -> &str {
    match stem.rfind('_') {
        Some(i) => &stem[..i],
        None => stem,
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::ingestion(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Load every scene under `frames_root` (containing `left/` and `right/`)
/// as sliding windows of `window` frames. Returns the clips plus warnings
/// for scenes too short to window.
///
/// Frames pair by filename across the two directories; a frame's disparity
/// is read from `disparity_dir/<name>.png` when present, otherwise the map
/// is all-invalid.
pub fn load_dataset(
    frames_root: &Path,
    disparity_dir: Option<&Path>,
    window: usize,
) -> Result<(Vec<StereoClip>, Vec<String>)> {
    if window == 0 {
        return Err(Error::contract("window must be at least 1"));
    }
    let left_dir = frames_root.join("left");
    let right_dir = frames_root.join("right");
    let mut scenes: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for path in list_pngs(&left_dir)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::ingestion(format!("unreadable file name: {}", path.display())))?;
        scenes.entry(scene_of(stem).to_string()).or_default().push(path);
    }
    if scenes.is_empty() {
        return Err(Error::ingestion(format!(
            "no PNG frames under {}",
            left_dir.display()
        )));
    }

    let mut clips = Vec::new();
    let mut warnings = Vec::new();
    for (scene, files) in scenes {
        if files.len() < window {
            warnings.push(format!(
                "scene `{scene}` has {} frame(s), fewer than the window {window}; skipped",
                files.len()
            ));
            continue;
        }
        let mut ids = Vec::with_capacity(files.len());
        let mut left = Vec::with_capacity(files.len());
        let mut right = Vec::with_capacity(files.len());
        let mut disparity = Vec::with_capacity(files.len());
        for path in &files {
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            let counterpart = right_dir.join(name);
            if !counterpart.exists() {
                return Err(Error::ingestion(format!(
                    "missing right counterpart for {}: expected {}",
                    path.display(),
                    counterpart.display()
                )));
            }
            let l = imageio::load_rgb(path)?;
            let r = imageio::load_rgb(&counterpart)?;
            let (h, w) = (l.shape()[1], l.shape()[2]);
            let d = match disparity_dir {
                Some(dir) if dir.join(name).exists() => imageio::load_disparity(&dir.join(name))?,
                _ => DisparityMap::empty(h, w),
            };
            ids.push(path.file_stem().unwrap().to_string_lossy().into_owned());
            left.push(l);
            right.push(r);
            disparity.push(d);
        }
        for start in 0..=(files.len() - window) {
            let range = start..start + window;
            clips.push(StereoClip::new(
                scene.clone(),
                ids[range.clone()].to_vec(),
                left[range.clone()].to_vec(),
                right[range.clone()].to_vec(),
                disparity[range].to_vec(),
            )?);
        }
    }
    Ok((clips, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_frame(path: &Path, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..3 * 4 * 6).map(|_| rng.gen_range(0.0..1.0)).collect();
        imageio::save_rgb(path, &Tensor::new(&[3, 4, 6], data).unwrap()).unwrap();
    }

    fn make_scene(root: &Path, scene: &str, frames: usize) {
        for k in 0..frames {
            let name = format!("{scene}_{k:02}.png");
            write_frame(&root.join("left").join(&name), k as u64);
            write_frame(&root.join("right").join(&name), 100 + k as u64);
        }
    }

    #[test]
    fn window_counts_follow_the_sliding_formula() {
        let dir = tempfile::tempdir().unwrap();
        make_scene(dir.path(), "a", 4);
        let (clips, warnings) = load_dataset(dir.path(), None, 4).unwrap();
        assert_eq!(clips.len(), 1);
        assert!(warnings.is_empty());
        assert_eq!(clips[0].center, 2);

        let (clips, _) = load_dataset(dir.path(), None, 3).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].frame_ids, vec!["a_00", "a_01", "a_02"]);
        assert_eq!(clips[1].frame_ids, vec!["a_01", "a_02", "a_03"]);
        assert_eq!(clips[0].center_id(), "a_01");
    }

    #[test]
    fn scenes_split_on_prefix_and_order_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        make_scene(dir.path(), "b", 2);
        make_scene(dir.path(), "a", 2);
        let (clips, _) = load_dataset(dir.path(), None, 2).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].scene, "a");
        assert_eq!(clips[1].scene, "b");
    }

    #[test]
    fn short_scenes_warn_instead_of_panicking() {
        let dir = tempfile::tempdir().unwrap();
        make_scene(dir.path(), "tiny", 2);
        make_scene(dir.path(), "full", 4);
        let (clips, warnings) = load_dataset(dir.path(), None, 4).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].scene, "full");
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("tiny"), "{}", warnings[0]);
    }

    #[test]
    fn missing_counterpart_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        make_scene(dir.path(), "a", 2);
        std::fs::remove_file(dir.path().join("right").join("a_01.png")).unwrap();
        let err = load_dataset(dir.path(), None, 2).unwrap_err();
        assert!(err.to_string().contains("a_01.png"), "{err}");
    }

    #[test]
    fn corrupt_png_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        make_scene(dir.path(), "a", 2);
        std::fs::write(dir.path().join("left").join("a_00.png"), b"garbage").unwrap();
        assert!(load_dataset(dir.path(), None, 2).is_err());
    }

    #[test]
    fn disparity_files_attach_and_absent_maps_are_invalid() {
        let dir = tempfile::tempdir().unwrap();
        make_scene(dir.path(), "a", 2);
        let ddir = dir.path().join("disp");
        let map = DisparityMap::new(
            Tensor::full(&[4, 6], 100.0).unwrap(),
            vec![true; 24],
        )
        .unwrap();
        imageio::save_disparity(&ddir.join("a_00.png"), &map).unwrap();
        let (clips, _) = load_dataset(dir.path(), Some(&ddir), 2).unwrap();
        // 16-bit value 25600 decodes to 100 px.
        assert_eq!(clips[0].disparity[0].values().data()[0], 100.0);
        assert!(clips[0].disparity[0].valid().iter().all(|&v| v));
        assert!(clips[0].disparity[1].valid().iter().all(|&v| !v));
    }
}
