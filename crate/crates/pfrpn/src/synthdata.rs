//! Deterministic synthetic scenes: colored rectangles, ellipses, and
//! triangles on a dark noisy background, with tight normalized boxes.
//!
//! Generation is a pure function of (config, scene index). Images are stored
//! quantized to 8 bits and boxes rounded to 6 decimals at generation time, so
//! the on-disk dataset round-trips bit-exactly.

use crate::geometry::{iou, BoxXYXY};
use crate::imageio;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Canvas side length in pixels.
    pub canvas: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object extent as a fraction of the canvas side.
    pub size_min: f64,
    pub size_max: f64,
    /// Uniform background noise amplitude in normalized intensity.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas: 128,
            objects_min: 1,
            objects_max: 6,
            size_min: 0.06,
            size_max: 0.45,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 {
            return Err(Error::Config { field: "scene.canvas".into(), message: "must be positive".into() });
        }
        if self.objects_min < 1 {
            return Err(Error::Config { field: "scene.objects_min".into(), message: "must be ≥ 1".into() });
        }
        if self.objects_max < self.objects_min {
            return Err(Error::Config {
                field: "scene.objects_max".into(),
                message: "must be ≥ objects_min".into(),
            });
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max < 1.0) {
            return Err(Error::Config {
                field: "scene.size_min".into(),
                message: "size range must satisfy 0 < min ≤ max < 1".into(),
            });
        }
        if !(0.0..=0.3).contains(&self.noise) {
            return Err(Error::Config { field: "scene.noise".into(), message: "must be in [0, 0.3]".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<BoxXYXY>,
}

/// One rendered scene: 8-bit RGB pixels (row-major) plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub canvas: usize,
    pub pixels: Vec<u8>,
    pub annotation: Annotation,
}

impl Scene {
    /// Normalized intensities as a (canvas², 3) row-major matrix — the
    /// network's input layout (one row per pixel, one column per channel).
    pub fn normalized_pixels(&self) -> Vec<f64> {
        self.pixels.iter().map(|&b| b as f64 / 255.0).collect()
    }
}

/// Geometry of one rendered object, in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Rectangle { x1: f64, y1: f64, x2: f64, y2: f64, color: [u8; 3] },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, color: [u8; 3] },
    Triangle { v: [(f64, f64); 3], color: [u8; 3] },
}

impl Shape {
    pub fn color(&self) -> [u8; 3] {
        match self {
            Shape::Rectangle { color, .. } | Shape::Ellipse { color, .. } | Shape::Triangle { color, .. } => *color,
        }
    }

    /// Membership test at a normalized point (boundaries inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Rectangle { x1, y1, x2, y2, .. } => x >= *x1 && x <= *x2 && y >= *y1 && y <= *y2,
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Triangle { v, .. } => {
                let cross = |a: (f64, f64), b: (f64, f64)| -> f64 {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let d0 = cross(v[0], v[1]);
                let d1 = cross(v[1], v[2]);
                let d2 = cross(v[2], v[0]);
                let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    /// Full (occlusion-ignoring) raster mask at pixel centers.
    pub fn mask(&self, canvas: usize) -> Vec<bool> {
        let inv = 1.0 / canvas as f64;
        let mut mask = vec![false; canvas * canvas];
        for py in 0..canvas {
            let y = (py as f64 + 0.5) * inv;
            for px in 0..canvas {
                let x = (px as f64 + 0.5) * inv;
                mask[py * canvas + px] = self.contains(x, y);
            }
        }
        mask
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Tight normalized box of a raster mask: pixel-index extremes mapped to the
/// outer pixel edges. None when the mask is empty.
fn mask_bbox(mask: &[bool], canvas: usize) -> Option<BoxXYXY> {
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for py in 0..canvas {
        for px in 0..canvas {
            if mask[py * canvas + px] {
                any = true;
                min_x = min_x.min(px);
                min_y = min_y.min(py);
                max_x = max_x.max(px);
                max_y = max_y.max(py);
            }
        }
    }
    if !any {
        return None;
    }
    let c = canvas as f64;
    Some(BoxXYXY::new(
        round6(min_x as f64 / c),
        round6(min_y as f64 / c),
        round6((max_x + 1) as f64 / c),
        round6((max_y + 1) as f64 / c),
    ))
}

const MAX_OVERLAP_IOU: f64 = 0.7;
const PLACEMENT_ATTEMPTS: usize = 200;

fn sample_shape(rng: &mut ChaCha8Rng, config: &SceneConfig) -> Shape {
    let w = rng.gen_range(config.size_min..=config.size_max);
    let h = rng.gen_range(config.size_min..=config.size_max);
    let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
    let kind = rng.gen_range(0..3u32);
    // fills stay well above the dark background in every channel
    let color = [
        rng.gen_range(90..=255u32) as u8,
        rng.gen_range(90..=255u32) as u8,
        rng.gen_range(90..=255u32) as u8,
    ];
    match kind {
        0 => Shape::Rectangle { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0, color },
        1 => Shape::Ellipse { cx, cy, rx: w / 2.0, ry: h / 2.0, color },
        _ => {
            let (x1, y1) = (cx - w / 2.0, cy - h / 2.0);
            // resample thin triangles so the raster mask can't vanish
            loop {
                let mut v = [(0.0, 0.0); 3];
                for p in &mut v {
                    *p = (x1 + rng.gen::<f64>() * w, y1 + rng.gen::<f64>() * h);
                }
                let area2 = ((v[1].0 - v[0].0) * (v[2].1 - v[0].1)
                    - (v[2].0 - v[0].0) * (v[1].1 - v[0].1))
                    .abs();
                if area2 >= 0.4 * w * h {
                    return Shape::Triangle { v, color };
                }
            }
        }
    }
}

/// Generate one scene plus the shape geometry behind it (useful for
/// visualization and mask oracles).
pub fn generate_scene_detailed(config: &SceneConfig, index: usize) -> Result<(Scene, Vec<Shape>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let count = rng.gen_range(config.objects_min..=config.objects_max);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut boxes: Vec<BoxXYXY> = Vec::with_capacity(count);
    for _ in 0..count {
        // rejection-sample against heavy box overlap; a rare exhaustion
        // drops the object rather than emitting ambiguous ground truth
        for _attempt in 0..PLACEMENT_ATTEMPTS {
            let shape = sample_shape(&mut rng, config);
            let bbox = match mask_bbox(&shape.mask(config.canvas), config.canvas) {
                Some(b) => b,
                None => continue,
            };
            if boxes.iter().all(|prev| iou(prev, &bbox) <= MAX_OVERLAP_IOU) {
                shapes.push(shape);
                boxes.push(bbox);
                break;
            }
        }
    }

    // background first (noisy dark gray), then shapes back-to-front
    let canvas = config.canvas;
    let mut pixels = vec![0u8; canvas * canvas * 3];
    let base = 38.0 / 255.0;
    for px in pixels.iter_mut() {
        let v = base + config.noise * (rng.gen::<f64>() * 2.0 - 1.0);
        *px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    let inv = 1.0 / canvas as f64;
    for shape in &shapes {
        let color = shape.color();
        for py in 0..canvas {
            let y = (py as f64 + 0.5) * inv;
            for px in 0..canvas {
                let x = (px as f64 + 0.5) * inv;
                if shape.contains(x, y) {
                    let at = (py * canvas + px) * 3;
                    pixels[at..at + 3].copy_from_slice(&color);
                }
            }
        }
    }

    let scene = Scene { id: index, canvas, pixels, annotation: Annotation { boxes } };
    Ok((scene, shapes))
}

pub fn generate_scene(config: &SceneConfig, index: usize) -> Result<Scene> {
    generate_scene_detailed(config, index).map(|(scene, _)| scene)
}

pub fn generate_dataset(config: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count).map(|i| generate_scene(config, i)).collect()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    image: String,
    annotation: String,
    image_digest: String,
    annotation_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    canvas: usize,
    scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    id: usize,
    boxes: Vec<[f64; 4]>,
}

/// Write `manifest.json` plus `scenes/<id>.ppm` / `scenes/<id>.json`.
/// The manifest is written last so a crashed writer never leaves a manifest
/// pointing at missing files.
pub fn write_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    let mut canvas = 0;
    for scene in scenes {
        canvas = scene.canvas;
        let image_rel = format!("scenes/{}.ppm", scene.id);
        let ann_rel = format!("scenes/{}.json", scene.id);
        let image_bytes = imageio::encode_ppm(scene.canvas, scene.canvas, &scene.pixels);
        let record = SceneRecord {
            id: scene.id,
            boxes: scene
                .annotation
                .boxes
                .iter()
                .map(|b| [b.x1, b.y1, b.x2, b.y2])
                .collect(),
        };
        let ann_bytes = serde_json::to_vec_pretty(&record).expect("annotation serializes");
        fs::write(dir.join(&image_rel), &image_bytes)?;
        fs::write(dir.join(&ann_rel), &ann_bytes)?;
        entries.push(ManifestEntry {
            id: scene.id,
            image: image_rel,
            annotation: ann_rel,
            image_digest: format!("{:016x}", fnv1a64(&image_bytes)),
            annotation_digest: format!("{:016x}", fnv1a64(&ann_bytes)),
        });
    }
    let manifest = Manifest { canvas, scenes: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

fn scene_err(id: usize, message: impl Into<String>) -> Error {
    Error::Dataset { scene: Some(id), message: message.into() }
}

/// Read a dataset directory. A directory without `manifest.json` is an empty
/// dataset; anything inconsistent under a manifest names the broken scene.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Ok(Vec::new());
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| Error::Dataset { scene: None, message: format!("malformed manifest: {e}") })?;

    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let id = entry.id;
        let image_bytes = fs::read(dir.join(&entry.image))
            .map_err(|e| scene_err(id, format!("image unreadable: {e}")))?;
        if format!("{:016x}", fnv1a64(&image_bytes)) != entry.image_digest {
            return Err(scene_err(id, "image digest mismatch"));
        }
        let (w, h, pixels) =
            imageio::decode_ppm(&image_bytes).map_err(|e| scene_err(id, format!("bad image: {e}")))?;
        if w != manifest.canvas || h != manifest.canvas {
            return Err(scene_err(id, format!("image is {w}×{h}, manifest canvas {}", manifest.canvas)));
        }
        let ann_bytes = fs::read(dir.join(&entry.annotation))
            .map_err(|e| scene_err(id, format!("annotation unreadable: {e}")))?;
        if format!("{:016x}", fnv1a64(&ann_bytes)) != entry.annotation_digest {
            return Err(scene_err(id, "annotation digest mismatch"));
        }
        let record: SceneRecord = serde_json::from_slice(&ann_bytes)
            .map_err(|e| scene_err(id, format!("bad annotation: {e}")))?;
        if record.id != id {
            return Err(scene_err(id, format!("annotation carries id {}", record.id)));
        }
        let mut boxes = Vec::with_capacity(record.boxes.len());
        for b in &record.boxes {
            if !(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 1.0 && b[3] <= 1.0 && b[0] < b[2] && b[1] < b[3]) {
                return Err(scene_err(id, format!("box out of range: {b:?}")));
            }
            boxes.push(BoxXYXY::new(b[0], b[1], b[2], b[3]));
        }
        scenes.push(Scene {
            id,
            canvas: manifest.canvas,
            pixels,
            annotation: Annotation { boxes },
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn generation_is_deterministic() {
        let config = SceneConfig { seed: 7, ..SceneConfig::default() };
        for index in [0usize, 3, 11] {
            let a = generate_scene(&config, index).unwrap();
            let b = generate_scene(&config, index).unwrap();
            assert_eq!(a, b, "scene {index} must be bit-identical across runs");
        }
        let other = generate_scene(&SceneConfig { seed: 8, ..config.clone() }, 0).unwrap();
        assert_ne!(generate_scene(&config, 0).unwrap().pixels, other.pixels);
    }

    #[test]
    fn single_object_config_yields_one_box() {
        let config = SceneConfig { objects_min: 1, objects_max: 1, seed: 5, ..SceneConfig::default() };
        for index in 0..20 {
            let scene = generate_scene(&config, index).unwrap();
            assert_eq!(scene.annotation.boxes.len(), 1);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_min = SceneConfig { objects_min: 0, ..SceneConfig::default() };
        assert!(bad_min.validate().is_err());
        let bad_range = SceneConfig { size_min: 0.5, size_max: 0.2, ..SceneConfig::default() };
        assert!(bad_range.validate().is_err());
    }

    // Independent membership re-implementations for the oracle: different
    // algebra from Shape::contains (ellipse in squared-radius form without
    // per-axis division; triangle via explicit barycentric coordinates).
    fn oracle_inside(shape: &Shape, x: f64, y: f64) -> bool {
        match shape {
            Shape::Rectangle { x1, y1, x2, y2, .. } => {
                !(x < *x1 || x > *x2 || y < *y1 || y > *y2)
            }
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let dx = x - cx;
                let dy = y - cy;
                dx * dx * ry * ry + dy * dy * rx * rx <= rx * rx * ry * ry
            }
            Shape::Triangle { v, .. } => {
                let (ax, ay) = v[0];
                let (bx, by) = v[1];
                let (cx, cy) = v[2];
                let det = (by - ay) * (cx - ax) - (bx - ax) * (cy - ay);
                if det == 0.0 {
                    return false;
                }
                let l1 = ((by - ay) * (x - ax) - (bx - ax) * (y - ay)) / det;
                let l2 = ((ay - cy) * (x - ax) - (ax - cx) * (y - ay)) / det;
                let l0 = 1.0 - l1 - l2;
                let eps = 1e-12;
                l0 >= -eps && l1 >= -eps && l2 >= -eps
            }
        }
    }

    #[test]
    fn boxes_tightly_bound_shapes_against_pixel_scan_oracle() {
        let config = SceneConfig::default();
        let mut checked = 0usize;
        for index in 0..1000 {
            let (scene, shapes) = generate_scene_detailed(&config, index).unwrap();
            assert_eq!(scene.annotation.boxes.len(), shapes.len());
            let c = config.canvas as f64;
            let px_tol = 1.0 / c + 1e-9;
            for (shape, bbox) in shapes.iter().zip(&scene.annotation.boxes) {
                let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
                let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                let mut any = false;
                for py in 0..config.canvas {
                    for px in 0..config.canvas {
                        let x = (px as f64 + 0.5) / c;
                        let y = (py as f64 + 0.5) / c;
                        if oracle_inside(shape, x, y) {
                            any = true;
                            min_x = min_x.min(px as f64 / c);
                            min_y = min_y.min(py as f64 / c);
                            max_x = max_x.max((px + 1) as f64 / c);
                            max_y = max_y.max((py + 1) as f64 / c);
                        }
                    }
                }
                assert!(any, "scene {index}: rendered shape with empty oracle mask");
                // no foreground pixel outside the box, box edges touch within a pixel
                assert!(min_x >= bbox.x1 - 1e-6 && min_x <= bbox.x1 + px_tol);
                assert!(min_y >= bbox.y1 - 1e-6 && min_y <= bbox.y1 + px_tol);
                assert!(max_x <= bbox.x2 + 1e-6 && max_x >= bbox.x2 - px_tol);
                assert!(max_y <= bbox.y2 + 1e-6 && max_y >= bbox.y2 - px_tol);
                assert!(bbox.x1 >= 0.0 && bbox.y1 >= 0.0 && bbox.x2 <= 1.0 && bbox.y2 <= 1.0);
                checked += 1;
            }
        }
        assert!(checked >= 1000, "expected a substantial shape population, got {checked}");
    }

    #[test]
    fn gt_overlap_stays_below_rejection_threshold() {
        let config = SceneConfig { seed: 3, ..SceneConfig::default() };
        for index in 0..200 {
            let scene = generate_scene(&config, index).unwrap();
            let boxes = &scene.annotation.boxes;
            for i in 0..boxes.len() {
                for j in i + 1..boxes.len() {
                    assert!(
                        iou(&boxes[i], &boxes[j]) <= MAX_OVERLAP_IOU + 1e-9,
                        "scene {index}: boxes {i},{j} overlap too much"
                    );
                }
            }
        }
    }

    #[test]
    fn fills_stay_distinct_from_background() {
        let config = SceneConfig { seed: 9, ..SceneConfig::default() };
        for index in 0..50 {
            let (_, shapes) = generate_scene_detailed(&config, index).unwrap();
            for shape in &shapes {
                assert!(shape.color().iter().all(|&ch| ch >= 90));
            }
        }
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let config = SceneConfig { seed: 21, ..SceneConfig::default() };
        let scenes = generate_dataset(&config, 10).unwrap();
        let dir = TempDir::new().unwrap();
        write_dataset(&scenes, dir.path()).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(scenes, loaded);
    }

    #[test]
    fn truncated_image_names_the_scene() {
        let scenes = generate_dataset(&SceneConfig { seed: 2, ..SceneConfig::default() }, 3).unwrap();
        let dir = TempDir::new().unwrap();
        write_dataset(&scenes, dir.path()).unwrap();
        let victim = dir.path().join("scenes/1.ppm");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("scene 1"), "{err}");
    }

    #[test]
    fn corrupted_annotation_names_the_scene() {
        let scenes = generate_dataset(&SceneConfig { seed: 2, ..SceneConfig::default() }, 3).unwrap();
        let dir = TempDir::new().unwrap();
        write_dataset(&scenes, dir.path()).unwrap();
        let victim = dir.path().join("scenes/2.json");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x20;
        fs::write(&victim, &bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("scene 2"), "{err}");
    }

    #[test]
    fn empty_directory_is_an_empty_dataset() {
        let dir = TempDir::new().unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_survives_rewriting_loaded_scenes() {
        // digests are a function of content only: write(read(write(x))) == write(x)
        let scenes = generate_dataset(&SceneConfig { seed: 13, ..SceneConfig::default() }, 4).unwrap();
        let dir_a = TempDir::new().unwrap();
        write_dataset(&scenes, dir_a.path()).unwrap();
        let loaded = read_dataset(dir_a.path()).unwrap();
        let dir_b = TempDir::new().unwrap();
        write_dataset(&loaded, dir_b.path()).unwrap();
        let manifest_a = fs::read(dir_a.path().join("manifest.json")).unwrap();
        let manifest_b = fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(manifest_a, manifest_b);
    }
}
