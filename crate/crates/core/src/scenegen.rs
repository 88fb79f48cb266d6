//! Deterministic two-domain synthetic benchmark.
//!
//! Source scenes are clean renderings of one to three colored shapes on a
//! top-lit background with horizontal furrows and low-frequency noise.
//! Target scenes share the exact geometry of the source scene with the same
//! seed and are then fogged: blended toward light gray, box-blurred and
//! reduced in contrast.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::imaging::ImageBuffer;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["disk", "square", "triangle"];
pub const SCENE_SIZE: usize = 64;

const MIN_SHAPE: u32 = 8;
const MAX_SHAPE: u32 = 24;
const MAX_GT_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 100;
const FOG_GRAY: f64 = 0.8;
const FOG_CONTRAST: f64 = 0.7;
/// top-to-bottom background brightness drop is twice this
const SKY_GRADIENT: f64 = 0.12;
/// horizontal furrows: each band darkens linearly downward
const FURROW_AMPLITUDE: f64 = 0.12;
const FURROW_PERIOD: usize = 8;
/// shapes are lit from above: brightness factor `LIT_TOP - LIT_SPAN * t`
const LIT_TOP: f64 = 1.15;
const LIT_SPAN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub domain: Domain,
    pub image: ImageBuffer,
    pub annotations: Vec<Annotation>,
}

type Rgb = [f64; 3];

fn class_color(class_id: usize) -> Rgb {
    match class_id {
        0 => [0.85, 0.22, 0.18],
        1 => [0.18, 0.32, 0.85],
        _ => [0.92, 0.80, 0.15],
    }
}

fn background_base(domain: Domain) -> Rgb {
    match domain {
        Domain::Source => [0.40, 0.47, 0.38],
        Domain::Target => [0.44, 0.46, 0.50],
    }
}

/// Bilinearly upsampled coarse noise grid, one value per pixel.
fn low_frequency_noise(rng: &mut ChaCha8Rng, size: usize, amplitude: f64) -> Vec<f64> {
    const GRID: usize = 5;
    let coarse: Vec<f64> =
        (0..GRID * GRID).map(|_| rng.random_range(-amplitude..=amplitude)).collect();
    let scale = (GRID - 1) as f64 / (size - 1) as f64;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (gy, gx) = (r as f64 * scale, c as f64 * scale);
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let g = |y: usize, x: usize| coarse[y * GRID + x];
            let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
            let bottom = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Pixel-center coverage test for a shape inscribed in its box.
fn covers(class_id: usize, b: &BoundingBox, x: f64, y: f64) -> bool {
    if !(x >= b.x_min() && x < b.x_max() && y >= b.y_min() && y < b.y_max()) {
        return false;
    }
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    match class_id {
        0 => ((x - cx) / hw).powi(2) + ((y - cy) / hh).powi(2) <= 1.0,
        1 => true,
        _ => {
            // apex at top-center, base along the bottom edge
            let t = (y - b.y_min()) / b.height();
            (x - cx).abs() <= t * hw
        }
    }
}

fn sample_layout(rng: &mut ChaCha8Rng) -> Result<Vec<Annotation>> {
    let mut wanted = rng.random_range(1..=3usize);
    loop {
        let mut placed: Vec<Annotation> = Vec::with_capacity(wanted);
        let mut attempts = 0;
        while placed.len() < wanted && attempts < PLACEMENT_ATTEMPTS {
            attempts += 1;
            let class_id = rng.random_range(0..NUM_CLASSES);
            let size = rng.random_range(MIN_SHAPE..=MAX_SHAPE) as f64;
            let max_pos = SCENE_SIZE as u32 - size as u32;
            let x = rng.random_range(0..=max_pos) as f64;
            let y = rng.random_range(0..=max_pos) as f64;
            let bbox = BoundingBox::new(x, y, x + size, y + size)?;
            if placed.iter().all(|a| iou(&a.bbox, &bbox) < MAX_GT_IOU) {
                placed.push(Annotation { bbox, class_id });
            }
        }
        if placed.len() == wanted {
            return Ok(placed);
        }
        if wanted == 1 {
            return Err(Error::SceneGeneration(format!(
                "no placement found after {PLACEMENT_ATTEMPTS} attempts"
            )));
        }
        log::debug!("placement of {wanted} shapes failed, retrying with fewer");
        wanted -= 1;
    }
}

fn render(rng: &mut ChaCha8Rng, annotations: &[Annotation], domain: Domain) -> ImageBuffer {
    let n = SCENE_SIZE;
    let base = background_base(domain);
    let noise: Vec<Vec<f64>> = (0..3).map(|_| low_frequency_noise(rng, n, 0.08)).collect();
    let shade = low_frequency_noise(rng, n, 0.05);
    let colors: Vec<Rgb> = annotations
        .iter()
        .map(|a| class_color(a.class_id).map(|v| (v + rng.random_range(-0.08..=0.08)).clamp(0.0, 1.0)))
        .collect();

    let mut img = ImageBuffer::filled(n, n, [0.0; 3]);
    for r in 0..n {
        // the vertical cues give every scene a recognizable up direction
        let sky = SKY_GRADIENT - 2.0 * SKY_GRADIENT * r as f64 / (n - 1) as f64;
        let furrow = FURROW_AMPLITUDE * (0.5 - (r % FURROW_PERIOD) as f64 / FURROW_PERIOD as f64);
        for c in 0..n {
            let i = r * n + c;
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = base[ch] + sky + furrow + noise[ch][i] + shade[i];
            }
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            // later shapes are drawn on top
            for (a, color) in annotations.iter().zip(&colors) {
                if covers(a.class_id, &a.bbox, x, y) {
                    let t = (y - a.bbox.y_min()) / a.bbox.height();
                    px = color.map(|v| v * (LIT_TOP - LIT_SPAN * t));
                }
            }
            img.set_pixel(r, c, px);
        }
    }
    img
}

fn apply_fog(img: &ImageBuffer, alpha: f64) -> ImageBuffer {
    let blended = img.map_values(|v| (1.0 - alpha) * v + alpha * FOG_GRAY);
    let (h, w) = (blended.height(), blended.width());
    let mut blurred = blended.clone();
    for r in 0..h {
        for c in 0..w {
            let mut acc = [0.0; 3];
            let mut count = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        let p = blended.pixel(rr as usize, cc as usize);
                        for ch in 0..3 {
                            acc[ch] += p[ch];
                        }
                        count += 1.0;
                    }
                }
            }
            blurred.set_pixel(r, c, acc.map(|v| v / count));
        }
    }
    blurred.map_values(|v| 0.5 + FOG_CONTRAST * (v - 0.5))
}

/// Generates the scene for `seed`. Source and target scenes with the same
/// seed have identical annotations.
pub fn generate_scene(seed: u64, domain: Domain) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let annotations = sample_layout(&mut rng)?;
    let mut image = render(&mut rng, &annotations, domain);
    if domain == Domain::Target {
        let alpha = rng.random_range(0.4..=0.7);
        image = apply_fog(&image, alpha);
    }
    Ok(Scene { id: seed, domain, image, annotations })
}

/// Seed of scene `id` in a split generated from `master_seed`.
pub fn scene_seed(master_seed: u64, id: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = master_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: u64,
    pub image_path: String,
    pub domain: Domain,
    pub annotations: Vec<Annotation>,
}

/// One split's index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub split: String,
    pub domain: Domain,
    pub entries: Vec<IndexEntry>,
}

pub const TRAIN_INDEX: &str = "train.json";
pub const TEST_INDEX: &str = "test.json";

/// Writes `n_train` and `n_test` scenes under `out_dir`, plus `train.json`
/// and `test.json`. Train ids are `0..n_train`, test ids follow them.
pub fn generate_split(
    out_dir: &Path,
    seed: u64,
    n_train: usize,
    n_test: usize,
    domain: Domain,
) -> Result<(PathBuf, PathBuf)> {
    if n_train == 0 && n_test == 0 {
        return Err(Error::Dataset("split counts must not both be zero".into()));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut paths = Vec::new();
    for (split, ids, file) in [
        ("train", 0..n_train as u64, TRAIN_INDEX),
        ("test", n_train as u64..(n_train + n_test) as u64, TEST_INDEX),
    ] {
        let mut entries = Vec::new();
        for id in ids {
            let scene = generate_scene(scene_seed(seed, id), domain)?;
            let rel = format!("images/{id:06}.png");
            scene.image.save_png(&out_dir.join(&rel))?;
            entries.push(IndexEntry { id, image_path: rel, domain, annotations: scene.annotations });
        }
        let index = DatasetIndex { split: split.into(), domain, entries };
        let path = out_dir.join(file);
        let json = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    let test = paths.pop().unwrap();
    Ok((paths.pop().unwrap(), test))
}

pub fn load_index(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// A labeled scene read from disk.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: u64,
    pub image: ImageBuffer,
    pub annotations: Vec<Annotation>,
}

fn resolve(index_path: &Path, entry: &IndexEntry) -> PathBuf {
    index_path.parent().unwrap_or(Path::new(".")).join(&entry.image_path)
}

/// Loads a labeled split (source training data or evaluation ground truth).
pub fn load_labeled(index_path: &Path) -> Result<Vec<LabeledImage>> {
    let index = load_index(index_path)?;
    index
        .entries
        .iter()
        .map(|e| {
            Ok(LabeledImage {
                id: e.id,
                image: ImageBuffer::load_png(&resolve(index_path, e))?,
                annotations: e.annotations.clone(),
            })
        })
        .collect()
}

/// Loads an unlabeled training split. Annotations in the index are dropped.
pub fn load_unlabeled(index_path: &Path) -> Result<Vec<ImageBuffer>> {
    let index = load_index(index_path)?;
    index.entries.iter().map(|e| ImageBuffer::load_png(&resolve(index_path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        for seed in [0, 1, 99] {
            for domain in [Domain::Source, Domain::Target] {
                assert_eq!(generate_scene(seed, domain).unwrap(), generate_scene(seed, domain).unwrap());
            }
        }
    }

    #[test]
    fn paired_domains_share_annotations() {
        for seed in 0..30 {
            let s = generate_scene(seed, Domain::Source).unwrap();
            let t = generate_scene(seed, Domain::Target).unwrap();
            assert_eq!(s.annotations, t.annotations);
            assert_ne!(s.image, t.image);
        }
    }

    #[test]
    fn annotation_invariants() {
        for seed in 0..300 {
            let s = generate_scene(scene_seed(5, seed), Domain::Source).unwrap();
            assert!((1..=3).contains(&s.annotations.len()));
            for (i, a) in s.annotations.iter().enumerate() {
                assert!(a.bbox.is_within(64.0, 64.0));
                assert!(a.bbox.area() >= 16.0);
                assert!(a.class_id < NUM_CLASSES);
                for b in &s.annotations[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) < 0.3);
                }
            }
        }
    }

    #[test]
    fn class_balance() {
        let mut counts = [0usize; NUM_CLASSES];
        for seed in 0..1000 {
            for a in generate_scene(scene_seed(11, seed), Domain::Source).unwrap().annotations {
                counts[a.class_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((0.25..=0.42).contains(&f), "class frequency {f}");
        }
    }

    #[test]
    fn fog_shift_is_nontrivial() {
        let mut acc = 0.0;
        let mut n = 0usize;
        for seed in 0..50 {
            let s = generate_scene(seed, Domain::Source).unwrap();
            let t = generate_scene(seed, Domain::Target).unwrap();
            for (a, b) in s.image.data().iter().zip(t.image.data()) {
                acc += (a - b).abs();
                n += 1;
            }
        }
        assert!(acc / n as f64 > 0.05);
    }

    #[test]
    fn split_counts_and_disjoint_ids() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = generate_split(dir.path(), 1, 10, 5, Domain::Source).unwrap();
        let train = load_index(&train).unwrap();
        let test = load_index(&test).unwrap();
        assert_eq!(train.entries.len(), 10);
        assert_eq!(test.entries.len(), 5);
        let pngs = fs::read_dir(dir.path().join("images")).unwrap().count();
        assert_eq!(pngs, 15);
        for e in &test.entries {
            assert!(train.entries.iter().all(|t| t.id != e.id));
        }
    }
}
