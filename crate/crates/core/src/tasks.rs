//! Task specifications, the prompt template, a seeded procedural texture
//! generator for patch and bag (slide) tasks, and the on-disk dataset format.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, seeded_rng, SeededRng};
use crate::vocab::normalize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Patch,
    Slide,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Patch => "patch",
            Level::Slide => "slide",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub organ: String,
    pub category: String,
    pub prompt: String,
    pub labels: Vec<String>,
    pub level: Level,
    #[serde(default)]
    pub cancer_labels: Vec<String>,
}

pub fn make_prompt(organ: &str, category: &str) -> String {
    format!("The {category} of this {organ} tissue is")
}

/// Prompt with the task category removed.
pub fn organ_only_prompt(organ: &str) -> String {
    format!("This {organ} tissue is")
}

/// Prompt with the organ removed.
pub fn task_only_prompt(category: &str) -> String {
    format!("The {category} of this tissue is")
}

fn valid_task_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl TaskSpec {
    pub fn new(task_id: &str, organ: &str, category: &str, labels: &[&str], level: Level) -> Self {
        TaskSpec {
            task_id: task_id.to_string(),
            organ: organ.to_string(),
            category: category.to_string(),
            prompt: make_prompt(organ, category),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            level,
            cancer_labels: Vec::new(),
        }
    }

    pub fn with_cancer_labels(mut self, cancer: &[&str]) -> Self {
        self.cancer_labels = cancer.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !valid_task_id(&self.task_id) {
            return Err(Error::InvalidTask(format!(
                "task id {:?} must be non-empty [A-Za-z0-9_-]",
                self.task_id
            )));
        }
        if self.prompt.trim().is_empty() {
            return Err(Error::InvalidTask(format!("{}: empty prompt", self.task_id)));
        }
        if self.labels.is_empty() {
            return Err(Error::InvalidTask(format!("{}: no labels", self.task_id)));
        }
        let mut seen = BTreeSet::new();
        for l in &self.labels {
            let n = normalize(l);
            if n.is_empty() {
                return Err(Error::InvalidTask(format!("{}: empty label", self.task_id)));
            }
            if !seen.insert(n) {
                return Err(Error::InvalidTask(format!("{}: duplicate label {l:?}", self.task_id)));
            }
        }
        for c in &self.cancer_labels {
            if !self.labels.contains(c) {
                return Err(Error::InvalidTask(format!(
                    "{}: cancer label {c:?} is not a class label",
                    self.task_id
                )));
            }
        }
        Ok(())
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn cancer_class_indices(&self) -> Vec<usize> {
        self.cancer_labels
            .iter()
            .filter_map(|c| self.label_index(c))
            .collect()
    }
}

/// 8-bit RGB image, row-major, channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width}x3 image",
                values.len()
            )));
        }
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = png::Decoder::new(BufReader::new(file))
            .read_info()
            .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!("{}: expected 8-bit samples", path.display())));
        }
        let (h, w) = (info.height as usize, info.width as usize);
        let pixels = match info.color_type {
            png::ColorType::Rgb => buf[..h * w * 3].to_vec(),
            png::ColorType::Rgba => buf[..h * w * 4]
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            other => {
                return Err(Error::Png(format!("{}: unsupported color type {other:?}", path.display())))
            }
        };
        Ok(Image {
            height: h,
            width: w,
            pixels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    Patch(Image),
    Bag(Vec<Image>),
}

impl Input {
    pub fn level(&self) -> Level {
        match self {
            Input::Patch(_) => Level::Patch,
            Input::Bag(_) => Level::Slide,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub id: String,
    pub input: Input,
    pub label: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub seed: u64,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// `(label, split) -> count`, in label order then split order.
    pub fn class_counts(&self) -> Vec<(String, Split, usize)> {
        let mut out = Vec::new();
        for l in &self.spec.labels {
            for s in [Split::Train, Split::Val, Split::Test] {
                let n = self.items.iter().filter(|i| &i.label == l && i.split == s).count();
                out.push((l.clone(), s, n));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let mut ids = BTreeSet::new();
        for (row, item) in self.items.iter().enumerate() {
            if !self.spec.labels.contains(&item.label) {
                return Err(Error::Schema {
                    row,
                    msg: format!("unknown label {:?}", item.label),
                });
            }
            if !ids.insert(item.id.as_str()) {
                return Err(Error::Schema {
                    row,
                    msg: format!("duplicate item id {:?}", item.id),
                });
            }
            let level_ok = matches!(
                (&item.input, self.spec.level),
                (Input::Patch(_), Level::Patch) | (Input::Bag(_), Level::Slide)
            );
            if !level_ok {
                return Err(Error::Schema {
                    row,
                    msg: format!("input kind does not match {} level", self.spec.level),
                });
            }
            if let Input::Bag(b) = &item.input {
                if b.is_empty() {
                    return Err(Error::EmptyBag);
                }
            }
        }
        for s in [Split::Train, Split::Val, Split::Test] {
            if self.split_len(s) == 0 {
                return Err(Error::InvalidData(format!(
                    "{}: empty {} split",
                    self.spec.task_id,
                    s.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// `(train, val, test)` sizes for `n` items: 15% each to val and test
/// (rounded down), the remainder to train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = n * 15 / 100;
    (n - 2 * held, held, held)
}

fn split_for(k: usize, n: usize) -> Split {
    let (train, val, _) = split_sizes(n);
    if k < train {
        Split::Train
    } else if k < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

// ---------------------------------------------------------------------------
// Procedural textures
// ---------------------------------------------------------------------------

pub const IMAGE_SIDE: usize = 32;

fn organ_palette(organ: &str) -> [f64; 3] {
    match organ {
        "colon" => [0.92, 0.50, 0.70],
        "prostate" => [0.62, 0.55, 0.95],
        "gastric" => [0.95, 0.85, 0.40],
        "breast" => [0.45, 0.85, 0.92],
        "lung" => [0.98, 0.60, 0.30],
        "kidney" => [0.55, 0.92, 0.50],
        "bladder" => [0.80, 0.80, 0.80],
        "liver" => [0.70, 0.42, 0.35],
        "skin" => [0.98, 0.88, 0.82],
        "thyroid" => [0.45, 0.60, 0.80],
        "pancreas" => [0.82, 0.62, 0.88],
        "ovary" => [0.70, 0.78, 0.42],
        other => {
            let h = derive_seed(0, other);
            let c = |shift: u32| 0.5 + 0.45 * (((h >> shift) & 0xff) as f64 / 255.0);
            [c(0), c(8), c(16)]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Orientation {
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
    Rings,
}

fn category_orientation(category: &str) -> Orientation {
    match category {
        "cancer grade" => Orientation::Horizontal,
        "tissue type" => Orientation::Vertical,
        "metastasis screening" => Orientation::Diagonal,
        "cancer sub-type" => Orientation::AntiDiagonal,
        "polyp type" => Orientation::Rings,
        other => match derive_seed(1, other) % 5 {
            0 => Orientation::Horizontal,
            1 => Orientation::Vertical,
            2 => Orientation::Diagonal,
            3 => Orientation::AntiDiagonal,
            _ => Orientation::Rings,
        },
    }
}

/// Stripe stain per category: different protocols stain differently, which
/// gives tasks sharing an organ a visual signature of their own.
fn category_stain(category: &str) -> [f64; 3] {
    match category {
        "cancer grade" => [0.36, 0.20, 0.55],
        "tissue type" => [0.20, 0.45, 0.30],
        "metastasis screening" => [0.55, 0.32, 0.15],
        "cancer sub-type" => [0.18, 0.30, 0.62],
        "polyp type" => [0.55, 0.16, 0.28],
        other => {
            let h = derive_seed(2, other);
            let c = |shift: u32| 0.15 + 0.45 * (((h >> shift) & 0xff) as f64 / 255.0);
            [c(0), c(8), c(16)]
        }
    }
}
const NUCLEUS: [f64; 3] = [0.22, 0.10, 0.32];

/// One texture patch of class `class` (of `n_classes`) for `spec`'s organ
/// and category.
fn render_patch(spec: &TaskSpec, class: usize, n_classes: usize, rng: &mut SeededRng) -> Image {
    let side = IMAGE_SIDE;
    let orient = category_orientation(&spec.category);
    let stain = category_stain(&spec.category);
    // background: organ palette tinted by the category stain
    let palette = organ_palette(&spec.organ);
    let base: [f64; 3] = std::array::from_fn(|c| 0.65 * palette[c] + 0.35 * stain[c]);
    let rel = if n_classes > 1 {
        class as f64 / (n_classes - 1) as f64
    } else {
        0.0
    };
    let shade = 1.0 - 0.08 * rel;
    let freq = (class + 1) as f64;
    let phase = rng.random_range(-0.3..0.3);
    let noise = Normal::new(0.0, 0.03).expect("std");
    let blobs: Vec<(f64, f64, f64)> = (0..=class)
        .map(|_| {
            (
                rng.random_range(3.0..(side as f64 - 3.0)),
                rng.random_range(3.0..(side as f64 - 3.0)),
                rng.random_range(1.8..3.0),
            )
        })
        .collect();
    let mut values = Vec::with_capacity(side * side * 3);
    let s = side as f64;
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let u = match orient {
                Orientation::Horizontal => fy / s,
                Orientation::Vertical => fx / s,
                Orientation::Diagonal => (fx + fy) / (2.0 * s),
                Orientation::AntiDiagonal => (fx - fy + s) / (2.0 * s),
                Orientation::Rings => ((fx - s / 2.0).powi(2) + (fy - s / 2.0).powi(2)).sqrt() / s,
            };
            let stripe = 0.5 + 0.5 * (std::f64::consts::TAU * freq * u + phase).sin();
            let a = 0.55 * stripe;
            let blob = blobs
                .iter()
                .map(|&(bx, by, r)| {
                    let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                    (-d2 / (r * r)).exp()
                })
                .fold(0.0, f64::max);
            for c in 0..3 {
                let mut v = base[c] * shade * (1.0 - a) + stain[c] * a;
                v = v * (1.0 - 0.6 * blob) + NUCLEUS[c] * 0.6 * blob;
                v += noise.sample(rng);
                values.push(v);
            }
        }
    }
    Image::from_unit(side, side, &values).expect("sized")
}

pub fn generate_patch_task(spec: &TaskSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if spec.level != Level::Patch {
        return Err(Error::InvalidTask(format!("{} is not a patch-level task", spec.task_id)));
    }
    if n_per_class < 10 {
        return Err(Error::TooSmall(format!("n_per_class = {n_per_class} < 10")));
    }
    let mut rng = seeded_rng(derive_seed(seed, &spec.task_id));
    let n_classes = spec.labels.len();
    let mut items = Vec::with_capacity(n_per_class * n_classes);
    for (class, label) in spec.labels.iter().enumerate() {
        for k in 0..n_per_class {
            items.push(Item {
                id: format!("c{class}_{k:04}"),
                input: Input::Patch(render_patch(spec, class, n_classes, &mut rng)),
                label: label.clone(),
                split: split_for(k, n_per_class),
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        items,
    })
}

/// How a bag's label follows from the classes of its patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BagRule {
    /// Label = highest grade present; non-top patches drawn from lower grades.
    MaxGrade,
    /// Label = the positive class present (class 0 is negative); others are negative.
    AnyPositive,
}

pub fn bag_rule(spec: &TaskSpec) -> BagRule {
    if spec.category.contains("grade") {
        BagRule::MaxGrade
    } else {
        BagRule::AnyPositive
    }
}

/// Bag label index given the class of every patch in it.
pub fn bag_label(rule: BagRule, patch_classes: &[usize]) -> usize {
    match rule {
        BagRule::MaxGrade => patch_classes.iter().copied().max().unwrap_or(0),
        BagRule::AnyPositive => patch_classes.iter().copied().find(|&c| c > 0).unwrap_or(0),
    }
}

pub fn generate_slide_task(
    spec: &TaskSpec,
    n_bags_per_class: usize,
    bag_size_range: (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if spec.level != Level::Slide {
        return Err(Error::InvalidTask(format!("{} is not a slide-level task", spec.task_id)));
    }
    if n_bags_per_class < 10 {
        return Err(Error::TooSmall(format!("n_bags_per_class = {n_bags_per_class} < 10")));
    }
    let (lo, hi) = bag_size_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidInput(format!("bad bag size range {lo}..={hi}")));
    }
    let rule = bag_rule(spec);
    let n_classes = spec.labels.len();
    let mut rng = seeded_rng(derive_seed(seed, &spec.task_id));
    let mut items = Vec::with_capacity(n_bags_per_class * n_classes);
    for (class, label) in spec.labels.iter().enumerate() {
        for k in 0..n_bags_per_class {
            let size = rng.random_range(lo..=hi);
            let mut classes = vec![0usize; size];
            if class > 0 {
                let frac: f64 = rng.random_range(0.1..=0.5);
                let n_pos = ((frac * size as f64).round() as usize).clamp(1, size);
                for (i, c) in classes.iter_mut().enumerate() {
                    *c = if i < n_pos {
                        class
                    } else {
                        match rule {
                            BagRule::MaxGrade => rng.random_range(0..class),
                            BagRule::AnyPositive => 0,
                        }
                    };
                }
                classes.shuffle(&mut rng);
            }
            debug_assert_eq!(bag_label(rule, &classes), class);
            let patches = classes
                .iter()
                .map(|&c| render_patch(spec, c, n_classes, &mut rng))
                .collect();
            items.push(Item {
                id: format!("bag{class}_{k:04}"),
                input: Input::Bag(patches),
                label: label.clone(),
                split: split_for(k, n_bags_per_class),
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        items,
    })
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    seed: u64,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let spec_path = dir.join("task_spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(&ds.spec)?).map_err(|e| Error::io(&spec_path, e))?;
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string(&DatasetMeta { seed: ds.seed })?)
        .map_err(|e| Error::io(&meta_path, e))?;
    let csv_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["filename", "label", "split"])?;
    for item in &ds.items {
        let filename = match &item.input {
            Input::Patch(img) => {
                let name = format!("{}.png", item.id);
                img.write_png(&images.join(&name))?;
                name
            }
            Input::Bag(patches) => {
                let bag_dir = images.join(&item.id);
                fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
                for (i, p) in patches.iter().enumerate() {
                    p.write_png(&bag_dir.join(format!("{i}.png")))?;
                }
                item.id.clone()
            }
        };
        w.write_record([filename.as_str(), item.label.as_str(), item.split.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

fn read_bag(dir: &Path) -> Result<Vec<Image>> {
    let mut files: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let idx = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok());
        if let (Some(idx), Some("png")) = (idx, path.extension().and_then(|e| e.to_str())) {
            files.push((idx, path));
        }
    }
    files.sort();
    for (expect, (idx, _)) in files.iter().enumerate() {
        if *idx != expect {
            return Err(Error::MissingFile(dir.join(format!("{expect}.png"))));
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyBag);
    }
    files.iter().map(|(_, p)| Image::read_png(p)).collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec_path = dir.join("task_spec.json");
    if !spec_path.is_file() {
        return Err(Error::MissingFile(spec_path));
    }
    let spec_text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: TaskSpec = serde_json::from_str(&spec_text)?;
    spec.validate()?;
    let meta_path = dir.join("meta.json");
    let seed = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str::<DatasetMeta>(&text)?.seed
    } else {
        0
    };
    let csv_path = dir.join("labels.csv");
    if !csv_path.is_file() {
        return Err(Error::MissingFile(csv_path));
    }
    let mut reader = csv::Reader::from_path(&csv_path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["filename", "label", "split"] {
        return Err(Error::Schema {
            row: 0,
            msg: "header must be filename,label,split".into(),
        });
    }
    let images = dir.join("images");
    let mut items = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != 3 {
            return Err(Error::Schema {
                row,
                msg: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let (filename, label, split) = (&record[0], &record[1], &record[2]);
        if !spec.labels.iter().any(|l| l == label) {
            return Err(Error::Schema {
                row,
                msg: format!("unknown label {label:?}"),
            });
        }
        let split = Split::parse(split).ok_or_else(|| Error::Schema {
            row,
            msg: format!("unknown split {split:?}"),
        })?;
        let (id, input) = match spec.level {
            Level::Patch => {
                let id = filename.strip_suffix(".png").ok_or_else(|| Error::Schema {
                    row,
                    msg: format!("patch filename {filename:?} must end in .png"),
                })?;
                (id.to_string(), Input::Patch(Image::read_png(&images.join(filename))?))
            }
            Level::Slide => {
                let bag_dir = images.join(filename);
                if !bag_dir.is_dir() {
                    return Err(Error::MissingFile(bag_dir));
                }
                (filename.to_string(), Input::Bag(read_bag(&bag_dir)?))
            }
        };
        items.push(Item {
            id,
            input,
            label: label.to_string(),
            split,
        });
    }
    let ds = Dataset { spec, seed, items };
    ds.validate()?;
    Ok(ds)
}
