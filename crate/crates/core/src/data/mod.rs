//! Dataset records, ingestion, splitting, class weights and image loading.

mod augment;
mod synth;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::imaging::{self, bilinear_resize};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig};
pub use synth::{synthesize_dataset, SyntheticSpec};

/// Name of the index sidecar written next to a dataset root.
pub const INDEX_FILE: &str = "index.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    Normal = 0,
    Bacterial = 1,
    Viral = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Normal, ClassLabel::Bacterial, ClassLabel::Viral];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or(Error::LabelOutOfRange { label: i, classes: Self::COUNT })
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::Bacterial => "bacterial",
            ClassLabel::Viral => "viral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pneumonia subtype from a file name: `bacteria` or `virus`, case
/// insensitive. Names with both tokens or neither give `None`.
pub fn derive_subtype_from_filename(name: &str) -> Option<ClassLabel> {
    let lower = name.to_ascii_lowercase();
    match (lower.contains("bacteria"), lower.contains("virus")) {
        (true, false) => Some(ClassLabel::Bacterial),
        (false, true) => Some(ClassLabel::Viral),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|v| v.name() == s)
    }
}

/// Axis-aligned box in fractions of image width and height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    /// Whether the centre of pixel (row, col) of a side×side grid lies inside.
    pub fn contains_pixel(&self, row: usize, col: usize, side: usize) -> bool {
        let x = (col as f64 + 0.5) / side as f64;
        let y = (row as f64 + 0.5) / side as f64;
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub path: PathBuf,
    pub label: ClassLabel,
    pub split: Split,
    pub bbox: Option<BoundingBox>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts(pub [usize; ClassLabel::COUNT]);

impl ClassCounts {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a DatasetRecord>) -> Self {
        let mut c = [0; ClassLabel::COUNT];
        for r in records {
            c[r.label.index()] += 1;
        }
        ClassCounts(c)
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    pub records: Vec<DatasetRecord>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> Vec<DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    pub fn counts(&self, split: Split) -> ClassCounts {
        ClassCounts::of(self.records.iter().filter(|r| r.split == split))
    }

    /// Writes the sidecar: one `path  label  split  box` line per record,
    /// tab separated, paths relative to `root`, box as `x0,y0,x1,y1` or `-`.
    pub fn write_sidecar(&self, root: &Path, path: &Path) -> Result<()> {
        let mut out = String::from("path\tlabel\tsplit\tbox\n");
        for r in &self.records {
            let rel = r.path.strip_prefix(root).unwrap_or(&r.path);
            let bbox = r
                .bbox
                .map_or("-".into(), |b| format!("{:?},{:?},{:?},{:?}", b.x0, b.y0, b.x1, b.y1));
            out += &format!("{}\t{}\t{}\t{}\n", rel.display(), r.label, r.split.name(), bbox);
        }
        fsutil::write_atomic(path, out.as_bytes())
    }

    /// Reads a sidecar written by [`DatasetIndex::write_sidecar`]; relative
    /// paths are resolved against `root`.
    pub fn read_sidecar(root: &Path, path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("{}:{}: malformed index line `{line}`", path.display(), n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let [p, label, split, bbox] = f[..] else { return Err(bad()) };
            let bbox = match bbox {
                "-" => None,
                s => {
                    let v: Vec<f64> = s.split(',').map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                    let [x0, y0, x1, y1] = v[..] else { return Err(bad()) };
                    Some(BoundingBox { x0, y0, x1, y1 })
                }
            };
            records.push(DatasetRecord {
                path: root.join(p),
                label: ClassLabel::parse(label).ok_or_else(bad)?,
                split: Split::parse(split).ok_or_else(bad)?,
                bbox,
            });
        }
        Ok(DatasetIndex { records })
    }
}

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image_file(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Indexes a `train/{NORMAL,PNEUMONIA}`, `test/{NORMAL,PNEUMONIA}` tree.
///
/// Pneumonia subtypes come from file names. Every pneumonia file without a
/// recognizable subtype is listed in a single error. Bounding boxes are
/// merged from an `index.tsv` sidecar in `root` when present.
pub fn ingest_kermany_layout(root: &Path) -> Result<DatasetIndex> {
    let mut missing = Vec::new();
    for split in ["train", "test"] {
        for class in ["NORMAL", "PNEUMONIA"] {
            let d = root.join(split).join(class);
            if !d.is_dir() {
                missing.push(d.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("dataset layout incomplete, missing: {}", missing.join(", "))));
    }
    let mut records = Vec::new();
    let mut unrecognized = Vec::new();
    for (dir, split) in [("train", Split::Train), ("test", Split::Test)] {
        for path in sorted_files(&root.join(dir).join("NORMAL"))? {
            records.push(DatasetRecord { path, label: ClassLabel::Normal, split, bbox: None });
        }
        for path in sorted_files(&root.join(dir).join("PNEUMONIA"))? {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            match derive_subtype_from_filename(&name) {
                Some(label) => records.push(DatasetRecord { path, label, split, bbox: None }),
                None => unrecognized.push(path.display().to_string()),
            }
        }
    }
    if !unrecognized.is_empty() {
        return Err(Error::Data(format!(
            "{} pneumonia file(s) without a bacteria/virus subtype token: {}",
            unrecognized.len(),
            unrecognized.join(", ")
        )));
    }
    let sidecar = root.join(INDEX_FILE);
    if sidecar.is_file() {
        let known = DatasetIndex::read_sidecar(root, &sidecar)?;
        for r in &mut records {
            if let Some(k) = known.records.iter().find(|k| k.path == r.path) {
                r.bbox = k.bbox;
            }
        }
    }
    Ok(DatasetIndex { records })
}

/// Validation count for a class of `n` records, `⌊n·(1 − train_fraction)⌋`.
/// A small guard absorbs the representation error of `1 − 0.8`.
pub fn validation_count(n: usize, train_fraction: f64) -> usize {
    ((n as f64 * (1.0 - train_fraction)) + 1e-9).floor() as usize
}

/// Stratified split of the `Train` records. Each class is shuffled with one
/// seeded stream (classes in label order) and its first
/// [`validation_count`] records become validation.
pub fn stratified_split(
    records: &[DatasetRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in ClassLabel::ALL {
        let mut members: Vec<&DatasetRecord> = records.iter().filter(|r| r.label == class).collect();
        if members.is_empty() {
            return Err(Error::Data(format!("class `{class}` has no records to split")));
        }
        members.shuffle(&mut rng);
        let nv = validation_count(members.len(), train_fraction);
        for (i, r) in members.into_iter().enumerate() {
            let mut r = r.clone();
            if i < nv {
                r.split = Split::Val;
                val.push(r);
            } else {
                r.split = Split::Train;
                train.push(r);
            }
        }
    }
    Ok((train, val))
}

/// Inverse-frequency weights `N / (K·n_c)`.
pub fn compute_class_weights(counts: &ClassCounts) -> Result<Vec<f64>> {
    if let Some(c) = counts.0.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class `{}` has no samples, cannot weight it", ClassLabel::ALL[c])));
    }
    let n = counts.total() as f64;
    let k = counts.0.len() as f64;
    Ok(counts.0.iter().map(|&c| n / (k * c as f64)).collect())
}

/// `x / 255`.
pub fn normalize(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&v| f64::from(v) / 255.0).collect()
}

/// Loads an 8-bit PNG as a side×side×3 tensor in `[0, 1]`. Grayscale is
/// replicated to three channels; other sizes are resampled bilinearly.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor> {
    let img = imaging::read_png(path)?;
    let values: Vec<f64> = img.pixels.iter().map(|&v| f64::from(v)).collect();
    let resized = bilinear_resize(&values, img.height, img.width, img.channels, side, side);
    let mut data = Vec::with_capacity(side * side * 3);
    for px in resized.chunks_exact(img.channels) {
        if img.channels == 1 {
            data.extend([px[0] / 255.0; 3]);
        } else {
            data.extend(px.iter().map(|v| v / 255.0));
        }
    }
    Tensor::new([side, side, 3], data)
}

/// Images and labels of one split held in memory.
#[derive(Clone, Debug, Default)]
pub struct LoadedSplit {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub records: Vec<DatasetRecord>,
}

impl LoadedSplit {
    pub fn load(records: &[DatasetRecord], side: usize) -> Result<Self> {
        let images = records.iter().map(|r| load_image(&r.path, side)).collect::<Result<Vec<_>>>()?;
        Ok(LoadedSplit {
            images,
            labels: records.iter().map(|r| r.label.index()).collect(),
            records: records.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the given items into a B×H×W×3 batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        stack_images(indices.iter().map(|&i| &self.images[i]))
            .map(|t| (t, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Stacks H×W×C images into a B×H×W×C batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut b = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(Error::shape("stack_images", format!("{:?} vs {s:?}", img.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        b += 1;
    }
    let mut full = vec![b];
    full.extend(shape.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?);
    Tensor::new(full, data)
}
