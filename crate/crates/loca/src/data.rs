//! Synthetic scene generation, dataset I/O (binary PPM images plus
//! line-oriented JSON annotations), and density-map export.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use loca_tensor::{Scalar, Tensor};

use crate::config::fnv1a;
use crate::density::DensityMap;
use crate::error::LocaError;
use crate::ope::ExemplarBox;

// ── Images ──────────────────────────────────────────────────────────

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRgb { width, height, data: vec![0; width * height * 3] }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| {
            T::from_f64(self.data[i] as f64 / 255.0)
        })
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut out = ImageRgb::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * 3;
                let dst = (y * self.width + (self.width - 1 - x)) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, path: &Path) -> Result<(), LocaError> {
        let file = std::fs::File::create(path)
            .map_err(|e| LocaError::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| LocaError::io(path.display().to_string(), e);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height).map_err(io_err)?;
        w.write_all(&self.data).map_err(io_err)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self, LocaError> {
        let bytes = std::fs::read(path).map_err(|e| LocaError::io(path.display().to_string(), e))?;
        Self::parse_ppm(&bytes).map_err(|msg| LocaError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        })
    }

    pub fn parse_ppm(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String, String> {
            // Skip whitespace and '#' comments.
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token(bytes)? != "P6" {
            return Err("not a binary PPM (expected P6)".into());
        }
        let width: usize = token(bytes)?.parse().map_err(|_| "bad width")?;
        let height: usize = token(bytes)?.parse().map_err(|_| "bad height")?;
        let maxval: usize = token(bytes)?.parse().map_err(|_| "bad maxval")?;
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(format!("pixel data truncated: need {need} bytes"));
        }
        Ok(ImageRgb { width, height, data: bytes[pos..pos + need].to_vec() })
    }
}

/// 8-bit PGM visualization of a density map, min-max scaled; the scale is
/// recorded in a sidecar text file next to the image.
pub fn write_density_pgm<T: Scalar>(map: &DensityMap<T>, path: &Path) -> Result<(), LocaError> {
    let (h, w) = (map.height(), map.width());
    let values: Vec<f64> = map.values.data().iter().map(|v| v.as_f64()).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let file =
        std::fs::File::create(path).map_err(|e| LocaError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| LocaError::io(path.display().to_string(), e);
    write!(out, "P5\n{w} {h}\n255\n").map_err(io_err)?;
    let pixels: Vec<u8> = values
        .iter()
        .map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&pixels).map_err(io_err)?;
    drop(out);

    let sidecar = path.with_extension("scale.txt");
    let text = format!("min={lo}\nmax={hi}\ncount={}\n", map.count());
    std::fs::write(&sidecar, text).map_err(|e| LocaError::io(sidecar.display().to_string(), e))?;
    Ok(())
}

// ── Scenes and datasets ─────────────────────────────────────────────

/// One annotated scene. Distractor category ids are generation metadata
/// and are not persisted by the annotation format.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: u64,
    pub image: ImageRgb,
    /// Normalized centers of every target-category instance.
    pub points: Vec<(f64, f64)>,
    /// Exemplar boxes, in annotation order.
    pub boxes: Vec<ExemplarBox>,
    pub category: u32,
    pub distractors: Vec<u32>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), LocaError> {
        let fail = |msg: String| Err(LocaError::InvalidScene { id: self.id, msg });
        if self.points.len() < self.boxes.len() {
            return fail(format!(
                "{} exemplars but only {} points",
                self.boxes.len(),
                self.points.len()
            ));
        }
        for &(x, y) in &self.points {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return fail(format!("point ({x}, {y}) outside [0,1]^2"));
            }
        }
        for b in &self.boxes {
            b.validate().map_err(|e| LocaError::InvalidScene {
                id: self.id,
                msg: e.to_string(),
            })?;
            let enclosed = self
                .points
                .iter()
                .filter(|&&(x, y)| b.contains(x, y))
                .count();
            if enclosed != 1 {
                return fail(format!(
                    "exemplar box [{}, {}, {}, {}] encloses {enclosed} points, expected exactly 1",
                    b.x1, b.y1, b.x2, b.y2
                ));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Mirror image, points and boxes around the vertical axis.
    pub fn flipped_horizontal(&self) -> Scene {
        Scene {
            id: self.id,
            image: self.image.flipped_horizontal(),
            points: self.points.iter().map(|&(x, y)| (1.0 - x, y)).collect(),
            boxes: self.boxes.iter().map(|b| b.flipped_horizontal()).collect(),
            category: self.category,
            distractors: self.distractors.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: u64,
    image: String,
    category: u32,
    points: Vec<[f64; 2]>,
    boxes: Vec<[f64; 4]>,
}

pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<(), LocaError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| LocaError::io(images.display().to_string(), e))?;
    let ann_path = dir.join("annotations.jsonl");
    let file = std::fs::File::create(&ann_path)
        .map_err(|e| LocaError::io(ann_path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    for scene in scenes {
        let rel = format!("images/{:06}.ppm", scene.id);
        scene.image.write_ppm(&dir.join(&rel))?;
        let record = SceneRecord {
            id: scene.id,
            image: rel,
            category: scene.category,
            points: scene.points.iter().map(|&(x, y)| [x, y]).collect(),
            boxes: scene
                .boxes
                .iter()
                .map(|b| [b.x1, b.y1, b.x2, b.y2])
                .collect(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| LocaError::Config(format!("annotation encode: {e}")))?;
        writeln!(out, "{line}").map_err(|e| LocaError::io(ann_path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>, LocaError> {
    let ann_path = dir.join("annotations.jsonl");
    let file = std::fs::File::open(&ann_path)
        .map_err(|e| LocaError::io(ann_path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut scenes = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LocaError::io(ann_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| LocaError::Parse {
            path: ann_path.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let mut boxes = Vec::with_capacity(record.boxes.len());
        for [x1, y1, x2, y2] in record.boxes {
            boxes.push(ExemplarBox::new(x1, y1, x2, y2).map_err(|e| LocaError::Parse {
                path: ann_path.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })?);
        }
        let scene = Scene {
            id: record.id,
            image: ImageRgb::read_ppm(&dir.join(&record.image))?,
            points: record.points.iter().map(|&[x, y]| (x, y)).collect(),
            boxes,
            category: record.category,
            distractors: Vec::new(),
        };
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

// ── Synthetic generator ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityRegime {
    Sparse,
    Dense,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub image_size: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub categories_per_split: usize,
    pub count_min: usize,
    pub count_max: usize,
    /// Exemplar annotations per scene.
    pub exemplars: usize,
    /// Distractor instances per scene are drawn from 0..=this.
    pub distractors_max: usize,
    pub density: DensityRegime,
    /// Base instance radius range, as a fraction of the image side.
    pub size_min: f64,
    pub size_max: f64,
    /// Aspect (width/height) range instances are sampled from.
    pub aspect_min: f64,
    pub aspect_max: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 128,
            train_scenes: 800,
            val_scenes: 100,
            test_scenes: 100,
            categories_per_split: 4,
            count_min: 3,
            count_max: 40,
            exemplars: 3,
            distractors_max: 4,
            density: DensityRegime::Sparse,
            size_min: 0.035,
            size_max: 0.085,
            aspect_min: 0.6,
            aspect_max: 1.7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), LocaError> {
        if self.count_min == 0 || self.count_max < self.count_min {
            return Err(LocaError::config("count range must satisfy 1 <= min <= max"));
        }
        if self.count_min < self.exemplars {
            return Err(LocaError::config(format!(
                "count_min {} must cover the {} exemplars",
                self.count_min, self.exemplars
            )));
        }
        if self.size_min <= 0.0 || self.size_max < self.size_min || self.size_max > 0.25 {
            return Err(LocaError::config("instance size range must be in (0, 0.25]"));
        }
        if self.aspect_min <= 0.0 || self.aspect_max < self.aspect_min {
            return Err(LocaError::config("aspect range must be positive and ordered"));
        }
        if self.categories_per_split == 0 {
            return Err(LocaError::config("need at least one category per split"));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, LocaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LocaError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, LocaError> {
        let mut cfg = GenConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(LocaError::config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = || LocaError::config(format!("key {key}: cannot parse {value:?}"));
            match key {
                "image_size" => cfg.image_size = value.parse().map_err(|_| bad())?,
                "train_scenes" => cfg.train_scenes = value.parse().map_err(|_| bad())?,
                "val_scenes" => cfg.val_scenes = value.parse().map_err(|_| bad())?,
                "test_scenes" => cfg.test_scenes = value.parse().map_err(|_| bad())?,
                "categories_per_split" => {
                    cfg.categories_per_split = value.parse().map_err(|_| bad())?
                }
                "count_min" => cfg.count_min = value.parse().map_err(|_| bad())?,
                "count_max" => cfg.count_max = value.parse().map_err(|_| bad())?,
                "exemplars" => cfg.exemplars = value.parse().map_err(|_| bad())?,
                "distractors_max" => cfg.distractors_max = value.parse().map_err(|_| bad())?,
                "density" => {
                    cfg.density = match value {
                        "sparse" => DensityRegime::Sparse,
                        "dense" => DensityRegime::Dense,
                        _ => return Err(bad()),
                    }
                }
                "size_min" => cfg.size_min = value.parse().map_err(|_| bad())?,
                "size_max" => cfg.size_max = value.parse().map_err(|_| bad())?,
                "aspect_min" => cfg.aspect_min = value.parse().map_err(|_| bad())?,
                "aspect_max" => cfg.aspect_max = value.parse().map_err(|_| bad())?,
                other => return Err(LocaError::config(format!("unknown generator key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Ring,
}

const SHAPE_KINDS: [ShapeKind; 4] =
    [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring];

#[derive(Debug, Clone)]
struct Category {
    id: u32,
    kind: ShapeKind,
    color: [f64; 3],
    size_range: (f64, f64),
    aspect_range: (f64, f64),
}

/// One placed instance, in normalized coordinates.
#[derive(Debug, Clone, Copy)]
struct Instance {
    cx: f64,
    cy: f64,
    /// Half extents.
    rx: f64,
    ry: f64,
    kind: ShapeKind,
    color: [f64; 3],
    is_target: bool,
}

impl Instance {
    fn bbox(&self) -> ExemplarBox {
        ExemplarBox {
            x1: (self.cx - self.rx).max(0.0),
            y1: (self.cy - self.ry).max(0.0),
            x2: (self.cx + self.rx).min(1.0),
            y2: (self.cy + self.ry).min(1.0),
        }
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= 1.0,
            ShapeKind::Square => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Triangle => {
                // Upward isoceles triangle inscribed in the box.
                dy.abs() <= 1.0 && dx.abs() <= (dy + 1.0) / 2.0
            }
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= 1.0 && r2 >= 0.3
            }
        }
    }
}

/// Per-scene generation metadata kept out of the persisted annotations.
#[derive(Debug, Clone)]
pub struct SceneMeta {
    /// Sampled width/height aspect of every target instance.
    pub target_aspects: Vec<f64>,
}

pub struct GeneratedData {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    pub train_meta: Vec<SceneMeta>,
}

fn make_categories(split: usize, count: usize, seed: u64, cfg: &GenConfig) -> Vec<Category> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(format!("categories{split}").as_bytes()));
    (0..count)
        .map(|i| {
            let id = (split * 1000 + i) as u32;
            let kind = SHAPE_KINDS[rng.gen_range(0..SHAPE_KINDS.len())];
            // Saturated colors keep figure/ground contrast against the
            // muted backgrounds.
            let hue = rng.gen_range(0.0..1.0);
            let color = hue_to_rgb(hue, rng.gen_range(0.6..1.0));
            let lo = rng.gen_range(cfg.size_min..=cfg.size_max);
            let hi = (lo * rng.gen_range(1.2..1.6)).clamp(lo, cfg.size_max);
            let a_lo = rng.gen_range(cfg.aspect_min..=cfg.aspect_max);
            let a_hi = rng.gen_range(a_lo..=cfg.aspect_max);
            Category {
                id,
                kind,
                color,
                size_range: (lo, hi),
                aspect_range: (a_lo, a_hi),
            }
        })
        .collect()
}

fn hue_to_rgb(h: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0) % 6.0;
    let f = h6 - h6.floor();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [r * v, g * v, b * v]
}

fn place_instances(
    rng: &mut ChaCha8Rng,
    existing: &mut Vec<Instance>,
    category: &Category,
    how_many: usize,
    is_target: bool,
    cfg: &GenConfig,
) -> Result<(), LocaError> {
    let sep = match cfg.density {
        DensityRegime::Sparse => 0.9,
        DensityRegime::Dense => 0.5,
    };
    for _ in 0..how_many {
        let mut placed = false;
        for _attempt in 0..200 {
            let size = rng.gen_range(category.size_range.0..=category.size_range.1);
            let aspect = rng.gen_range(category.aspect_range.0..=category.aspect_range.1);
            let rx = size * aspect.sqrt();
            let ry = size / aspect.sqrt();
            if 2.0 * rx >= 1.0 || 2.0 * ry >= 1.0 {
                return Err(LocaError::Infeasible(format!(
                    "instance of category {} cannot fit inside the image",
                    category.id
                )));
            }
            let cx = rng.gen_range(rx..1.0 - rx);
            let cy = rng.gen_range(ry..1.0 - ry);
            let candidate_r = rx.max(ry);
            let ok = existing.iter().all(|other| {
                let dist = ((cx - other.cx).powi(2) + (cy - other.cy).powi(2)).sqrt();
                dist >= sep * (candidate_r + other.rx.max(other.ry))
            });
            if ok {
                let jitter = 1.0 + rng.gen_range(-0.15..0.15);
                let color = [
                    (category.color[0] * jitter).clamp(0.0, 1.0),
                    (category.color[1] * jitter).clamp(0.0, 1.0),
                    (category.color[2] * jitter).clamp(0.0, 1.0),
                ];
                existing.push(Instance { cx, cy, rx, ry, kind: category.kind, color, is_target });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(LocaError::Infeasible(format!(
                "cannot place instance {} of category {} without exceeding the overlap limit",
                existing.len() + 1,
                category.id
            )));
        }
    }
    Ok(())
}

fn render(instances: &[Instance], size: usize, rng: &mut ChaCha8Rng) -> ImageRgb {
    let mut img = ImageRgb::new(size, size);
    let base = [
        rng.gen_range(0.55..0.8),
        rng.gen_range(0.55..0.8),
        rng.gen_range(0.55..0.8),
    ];
    let noise_seed: u64 = rng.gen();
    let mut buf = vec![0.0f64; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let n = (fnv1a(&[(x as u64 ^ noise_seed) as u8, (y ^ 101) as u8, (x >> 8) as u8, (y >> 8) as u8])
                % 1000) as f64
                / 1000.0
                - 0.5;
            let o = (y * size + x) * 3;
            for c in 0..3 {
                buf[o + c] = (base[c] + 0.04 * n).clamp(0.0, 1.0);
            }
        }
    }
    // 2x2 supersampled coverage per pixel, painters order.
    for inst in instances {
        let x_lo = ((inst.cx - inst.rx) * size as f64).floor().max(0.0) as usize;
        let x_hi = ((inst.cx + inst.rx) * size as f64).ceil().min(size as f64) as usize;
        let y_lo = ((inst.cy - inst.ry) * size as f64).floor().max(0.0) as usize;
        let y_hi = ((inst.cy + inst.ry) * size as f64).ceil().min(size as f64) as usize;
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let mut cover = 0.0;
                for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let nx = (px as f64 + sx) / size as f64;
                    let ny = (py as f64 + sy) / size as f64;
                    if inst.covers(nx, ny) {
                        cover += 0.25;
                    }
                }
                if cover > 0.0 {
                    let o = (py * size + px) * 3;
                    for c in 0..3 {
                        buf[o + c] = buf[o + c] * (1.0 - cover) + inst.color[c] * cover;
                    }
                }
            }
        }
    }
    for (dst, v) in img.data.iter_mut().zip(buf.iter()) {
        *dst = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    img
}

fn generate_scene(
    id: u64,
    categories: &[Category],
    cfg: &GenConfig,
    seed: u64,
) -> Result<(Scene, SceneMeta), LocaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_error: Option<LocaError> = None;
    // A few relayout retries: placement or exemplar selection can fail on
    // unlucky layouts; a genuinely infeasible spec fails every retry.
    for relayout in 0..8 {
        let mut rng_try = ChaCha8Rng::seed_from_u64(rng.gen::<u64>() ^ relayout);
        let category = &categories[rng_try.gen_range(0..categories.len())];
        let count = rng_try.gen_range(cfg.count_min..=cfg.count_max);

        // Crowded scenes hold smaller instances, so the full count range
        // stays placeable under the overlap limit.
        let crowd_scale = (12.0 / count as f64).sqrt().clamp(0.5, 1.0);
        let shrink = |c: &Category| {
            let mut c = c.clone();
            c.size_range = (c.size_range.0 * crowd_scale, c.size_range.1 * crowd_scale);
            c
        };
        let category = &shrink(category);

        let mut instances = Vec::new();
        if place_instances(&mut rng_try, &mut instances, category, count, true, cfg).is_err() {
            last_error = Some(LocaError::Infeasible(format!(
                "scene {id}: cannot place {count} instances of category {} within the overlap limit",
                category.id
            )));
            continue; // relayout
        }
        let distractor_count = rng_try.gen_range(0..=cfg.distractors_max);
        let mut distractors = Vec::new();
        let mut distractors_ok = true;
        for _ in 0..distractor_count {
            let mut pick = categories[rng_try.gen_range(0..categories.len())].clone();
            while pick.id == category.id && categories.len() > 1 {
                pick = categories[rng_try.gen_range(0..categories.len())].clone();
            }
            if pick.id == category.id {
                break; // single-category split: no distractors possible
            }
            let scaled = shrink(&pick);
            if place_instances(&mut rng_try, &mut instances, &scaled, 1, false, cfg).is_err() {
                distractors_ok = false;
                break;
            }
            distractors.push(pick.id);
        }
        if !distractors_ok {
            last_error = Some(LocaError::Infeasible(format!(
                "scene {id}: cannot place distractors within the overlap limit"
            )));
            continue;
        }

        let points: Vec<(f64, f64)> = instances
            .iter()
            .filter(|i| i.is_target)
            .map(|i| (i.cx, i.cy))
            .collect();

        // Exemplars: target instances whose tight box encloses no other
        // target center.
        let target_idx: Vec<usize> = (0..instances.len())
            .filter(|&i| instances[i].is_target)
            .collect();
        let mut order = target_idx.clone();
        for i in (1..order.len()).rev() {
            let j = rng_try.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut boxes = Vec::new();
        for &idx in &order {
            if boxes.len() == cfg.exemplars {
                break;
            }
            let b = instances[idx].bbox();
            let enclosed = points.iter().filter(|&&(x, y)| b.contains(x, y)).count();
            if enclosed == 1 {
                boxes.push(b);
            }
        }
        if boxes.len() < cfg.exemplars {
            continue; // relayout
        }

        let image = render(&instances, cfg.image_size, &mut rng_try);
        let meta = SceneMeta {
            target_aspects: instances
                .iter()
                .filter(|i| i.is_target)
                .map(|i| i.rx / i.ry)
                .collect(),
        };
        let scene = Scene {
            id,
            image,
            points,
            boxes,
            category: category.id,
            distractors,
        };
        scene.validate()?;
        return Ok((scene, meta));
    }
    Err(last_error.unwrap_or_else(|| {
        LocaError::Infeasible(format!(
            "scene {id}: no exemplar selection satisfies the one-point-per-box rule"
        ))
    }))
}

fn generate_split(
    split: usize,
    scene_count: usize,
    categories: &[Category],
    cfg: &GenConfig,
    seed: u64,
) -> Result<(Vec<Scene>, Vec<SceneMeta>), LocaError> {
    let mut scenes = Vec::with_capacity(scene_count);
    let mut metas = Vec::with_capacity(scene_count);
    for i in 0..scene_count {
        let id = (split * 1_000_000 + i) as u64;
        let scene_seed = seed
            ^ fnv1a(format!("scene{split}/{i}").as_bytes());
        let (scene, meta) = generate_scene(id, categories, cfg, scene_seed)?;
        scenes.push(scene);
        metas.push(meta);
    }
    Ok((scenes, metas))
}

/// Generate category-disjoint train/val/test splits, deterministic per seed.
pub fn synth_generate(cfg: &GenConfig, seed: u64) -> Result<GeneratedData, LocaError> {
    cfg.validate()?;
    let counts = [cfg.train_scenes, cfg.val_scenes, cfg.test_scenes];
    let mut splits = Vec::with_capacity(3);
    let mut train_meta = Vec::new();
    for (split, &scene_count) in counts.iter().enumerate() {
        let categories = make_categories(split, cfg.categories_per_split, seed, cfg);
        let (scenes, metas) = generate_split(split, scene_count, &categories, cfg, seed)?;
        if split == 0 {
            train_meta = metas;
        }
        splits.push(scenes);
    }
    let mut it = splits.into_iter();
    Ok(GeneratedData {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        train_meta,
    })
}

/// Category ids appearing anywhere in a split (targets and distractors).
pub fn split_categories(scenes: &[Scene]) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for s in scenes {
        out.insert(s.category);
        out.extend(s.distractors.iter().copied());
    }
    out
}

/// Read the whole annotation file without images, for format checks.
pub fn count_annotation_lines(dir: &Path) -> Result<usize, LocaError> {
    let path = dir.join("annotations.jsonl");
    let file =
        std::fs::File::open(&path).map_err(|e| LocaError::io(path.display().to_string(), e))?;
    let mut text = String::new();
    BufReader::new(file)
        .read_to_string(&mut text)
        .map_err(|e| LocaError::io(path.display().to_string(), e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
}

pub fn dataset_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}
