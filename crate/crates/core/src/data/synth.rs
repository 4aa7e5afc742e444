//! Synthetic three-class radiograph stand-ins.
//!
//! Every image is a dark, nearly clean field. Bacterial images add one
//! bright dome-shaped ellipse whose bounding box is recorded; viral images
//! add diffuse speckle over the whole field.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{validation_count, BoundingBox, ClassLabel, DatasetIndex, DatasetRecord, Split, INDEX_FILE};
use crate::error::{Error, Result};
use crate::imaging::{to_u8, write_png, RawImage};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Images per class, split between `train/` and `test/`.
    pub per_class: usize,
    pub side: usize,
    /// Fraction of each class kept for `train/`; the rest (floored) is test.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { per_class: 200, side: 64, train_fraction: 0.8, seed: 0 }
    }
}

fn render(label: ClassLabel, side: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Option<BoundingBox>) {
    let s = side as f64;
    let level = rng.random_range(0.0..0.01);
    let noise = Normal::new(0.0, 0.004).unwrap();
    let mut px: Vec<f64> = (0..side * side).map(|_| level + noise.sample(rng)).collect();
    let mut bbox = None;
    match label {
        ClassLabel::Normal => {}
        ClassLabel::Bacterial => {
            let cx = rng.random_range(0.3..0.7) * s;
            let cy = rng.random_range(0.3..0.7) * s;
            let a = rng.random_range(0.20..0.30) * s;
            let b = rng.random_range(0.20..0.30) * s;
            let phi = rng.random_range(0.0..PI);
            let amp = rng.random_range(0.6..0.8);
            let (c, sn) = (phi.cos(), phi.sin());
            for i in 0..side {
                for j in 0..side {
                    let (x, y) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
                    let (u, v) = (c * x + sn * y, -sn * x + c * y);
                    let q = (u / a).powi(2) + (v / b).powi(2);
                    if q <= 1.0 {
                        px[i * side + j] += amp * (1.0 - q);
                    }
                }
            }
            let hw = ((a * c).powi(2) + (b * sn).powi(2)).sqrt();
            let hh = ((a * sn).powi(2) + (b * c).powi(2)).sqrt();
            bbox = Some(BoundingBox {
                x0: ((cx - hw) / s).max(0.0),
                y0: ((cy - hh) / s).max(0.0),
                x1: ((cx + hw) / s).min(1.0),
                y1: ((cy + hh) / s).min(1.0),
            });
        }
        ClassLabel::Viral => {
            let dots = side * side / 40;
            for _ in 0..dots {
                let cx = rng.random_range(0.0..s);
                let cy = rng.random_range(0.0..s);
                let amp = rng.random_range(0.15..0.3);
                let (i0, i1) = ((cy - 3.0).max(0.0) as usize, ((cy + 3.0) as usize).min(side - 1));
                let (j0, j1) = ((cx - 3.0).max(0.0) as usize, ((cx + 3.0) as usize).min(side - 1));
                for i in i0..=i1 {
                    for j in j0..=j1 {
                        let d2 = (j as f64 + 0.5 - cx).powi(2) + (i as f64 + 0.5 - cy).powi(2);
                        px[i * side + j] += amp * (-d2 / 2.0).exp();
                    }
                }
            }
        }
    }
    (px, bbox)
}

fn file_name(label: ClassLabel, i: usize) -> String {
    match label {
        ClassLabel::Normal => format!("normal_{i:04}.png"),
        ClassLabel::Bacterial => format!("person{i}_bacteria_{i}.png"),
        ClassLabel::Viral => format!("person{i}_virus_{i}.png"),
    }
}

fn folder(label: ClassLabel) -> &'static str {
    match label {
        ClassLabel::Normal => "NORMAL",
        _ => "PNEUMONIA",
    }
}

/// Writes the corpus under `root` in the `train/` + `test/` layout and an
/// `index.tsv` sidecar carrying the bacterial bounding boxes. Output bytes
/// depend only on `spec`.
pub fn synthesize_dataset(spec: &SyntheticSpec, root: &Path) -> Result<DatasetIndex> {
    if spec.side < 16 {
        return Err(Error::InvalidArgument(format!("synthetic side {} below 16", spec.side)));
    }
    if spec.per_class == 0 || !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::InvalidArgument("synthetic spec needs per_class ≥ 1 and a fraction in [0, 1]".into()));
    }
    let n_test = validation_count(spec.per_class, spec.train_fraction);
    let mut records = Vec::new();
    for label in ClassLabel::ALL {
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((label.index() as u64) << 32) | i as u64);
            let (px, bbox) = render(label, spec.side, &mut rng);
            let split = if i < n_test { Split::Test } else { Split::Train };
            let path: PathBuf = root.join(split.name()).join(folder(label)).join(file_name(label, i));
            let image = RawImage {
                width: spec.side,
                height: spec.side,
                channels: 1,
                pixels: px.into_iter().map(to_u8).collect(),
            };
            write_png(&path, &image)?;
            records.push(DatasetRecord { path, label, split, bbox });
        }
    }
    let index = DatasetIndex { records };
    index.write_sidecar(root, &root.join(INDEX_FILE))?;
    Ok(index)
}
