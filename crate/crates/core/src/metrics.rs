//! Classification metrics, ROC analysis, multi-run aggregation and report
//! files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ClassLabel;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn column_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if let Some(&bad) = [t, p].iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_auc: Option<f64>,
    pub accuracy: f64,
    pub warnings: Vec<String>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Per-class precision, recall and F1 with unweighted macro means.
/// Precision of a class that was never predicted is reported as 0 and
/// flagged in `warnings`; recall of a class with no samples likewise.
pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassReport> {
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("classification report of an empty confusion matrix".into()));
    }
    let mut warnings = Vec::new();
    let name = |c: usize| ClassLabel::from_index(c).map_or(format!("class {c}"), |l| l.name().to_owned());
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| {
            let tp = cm.counts[c][c];
            let (col, row) = (cm.column_sum(c), cm.row_sum(c));
            if col == 0 {
                warnings.push(format!("precision of `{}` is undefined (never predicted); reported as 0", name(c)));
            }
            if row == 0 {
                warnings.push(format!("recall of `{}` is undefined (no samples); reported as 0", name(c)));
            }
            let (precision, recall) = (ratio(tp, col), ratio(tp, row));
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { precision, recall, f1, support: row, auc: None }
        })
        .collect();
    Ok(ClassReport {
        macro_precision: mean(per_class.iter().map(|m| m.precision)),
        macro_recall: mean(per_class.iter().map(|m| m.recall)),
        macro_f1: mean(per_class.iter().map(|m| m.f1)),
        macro_auc: None,
        accuracy: ratio(cm.trace(), cm.total()),
        per_class,
        warnings,
    })
}

/// (false-positive rate, true-positive rate) vertices from (0,0) to (1,1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

/// One-vs-rest ROC for `class`, one vertex per distinct score.
pub fn roc_curve_ovr(scores: &Tensor, labels: &[usize], class: usize) -> Result<RocCurve> {
    let (n, k) = match scores.shape() {
        &[n, k] => (n, k),
        s => return Err(Error::shape("roc_curve_ovr", format!("scores must be N×K, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape("roc_curve_ovr", format!("{n} score rows, {} labels", labels.len())));
    }
    if class >= k {
        return Err(Error::LabelOutOfRange { label: class, classes: k });
    }
    for (row, &y) in scores.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("score row sums to {s}, not 1")));
        }
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &y)| (row[class], y == class))
        .collect();
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "ROC for class {class} needs both positives and negatives ({pos} / {neg})"
        )));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc_trapezoid(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Mean and sample standard deviation of one metric across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
}

pub fn aggregate_runs(values: &[f64], seeds: &[u64]) -> Result<RunAggregate> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!("aggregation needs ≥ 2 runs, got {}", values.len())));
    }
    if seeds.len() != values.len() {
        return Err(Error::InvalidArgument(format!("{} values for {} seeds", values.len(), seeds.len())));
    }
    let m = mean(values.iter().copied());
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    let std = if values.iter().all(|&v| v == values[0]) { 0.0 } else { (ss / (values.len() - 1) as f64).sqrt() };
    Ok(RunAggregate { mean: m, std, runs: values.len(), seeds: seeds.to_vec() })
}

/// `84.29% ± 1.14%`.
pub fn format_percent(mean: f64, std: f64) -> String {
    format!("{:.2}% ± {:.2}%", 100.0 * mean, 100.0 * std)
}

/// `0.9565 ± 0.0010`.
pub fn format_ratio(mean: f64, std: f64) -> String {
    format!("{mean:.4} ± {std:.4}")
}

/// Test-split results of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub confusion: ConfusionMatrix,
    pub metrics: ClassReport,
    /// One curve per class, in label order.
    pub roc: Vec<RocCurve>,
    pub test_loss: f64,
}

/// Evaluates class probabilities against labels.
pub fn seed_report(seed: u64, probabilities: &Tensor, labels: &[usize], test_loss: f64) -> Result<SeedReport> {
    let k = probabilities.shape()[1];
    let predicted: Vec<usize> = probabilities.data().chunks_exact(k).map(crate::train::argmax).collect();
    let confusion = confusion_matrix(labels, &predicted, k)?;
    let mut metrics = classification_report(&confusion)?;
    let mut roc = Vec::with_capacity(k);
    for c in 0..k {
        let curve = roc_curve_ovr(probabilities, labels, c)?;
        metrics.per_class[c].auc = Some(auc_trapezoid(&curve));
        roc.push(curve);
    }
    metrics.macro_auc = Some(mean(metrics.per_class.iter().map(|m| m.auc.unwrap())));
    Ok(SeedReport { seed, confusion, metrics, roc, test_loss })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedReport>,
    /// Metric name → aggregate; present with two or more runs.
    pub aggregate: Option<BTreeMap<String, RunAggregate>>,
}

fn class_name(c: usize) -> String {
    ClassLabel::from_index(c).map_or(format!("class{c}"), |l| l.name().to_owned())
}

/// Flat metric name → value view of one run.
pub fn metric_values(r: &SeedReport) -> Vec<(String, f64)> {
    let m = &r.metrics;
    let mut out = vec![("accuracy".to_owned(), m.accuracy)];
    for (c, cm) in m.per_class.iter().enumerate() {
        let n = class_name(c);
        out.push((format!("{n}.precision"), cm.precision));
        out.push((format!("{n}.recall"), cm.recall));
        out.push((format!("{n}.f1"), cm.f1));
        if let Some(a) = cm.auc {
            out.push((format!("{n}.auc"), a));
        }
    }
    out.push(("macro.precision".into(), m.macro_precision));
    out.push(("macro.recall".into(), m.macro_recall));
    out.push(("macro.f1".into(), m.macro_f1));
    if let Some(a) = m.macro_auc {
        out.push(("macro.auc".into(), a));
    }
    out
}

impl Report {
    pub fn new(config_digest: String, runs: Vec<SeedReport>) -> Result<Self> {
        let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        let aggregate = if runs.len() >= 2 {
            let mut agg = BTreeMap::new();
            for (name, _) in metric_values(&runs[0]) {
                let vals: Vec<f64> = runs
                    .iter()
                    .map(|r| metric_values(r).into_iter().find(|(n, _)| *n == name).map(|(_, v)| v))
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::InvalidArgument(format!("metric `{name}` missing from a run")))?;
                agg.insert(name, aggregate_runs(&vals, &seeds)?);
            }
            Some(agg)
        } else {
            None
        };
        Ok(Report { version: REPORT_VERSION, config_digest, seeds, runs, aggregate })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("unreadable report: {e}")))
    }

    /// Value of `metric` as `mean ± std` across runs, or the single run's
    /// value with std 0.
    fn cell(&self, metric: &str) -> Option<(f64, f64)> {
        match &self.aggregate {
            Some(agg) => agg.get(metric).map(|a| (a.mean, a.std)),
            None => self
                .runs
                .first()
                .and_then(|r| metric_values(r).into_iter().find(|(n, _)| n == metric))
                .map(|(_, v)| (v, 0.0)),
        }
    }

    /// Plain-text table: one row per class plus the macro average, with
    /// precision, recall, F1 and AUC, then overall accuracy.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "runs: {} (seeds {})\nconfig digest: {}\n\n",
            self.runs.len(),
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", "),
            self.config_digest
        );
        out += &format!("{:<10} {:>17} {:>17} {:>17} {:>17}\n", "Class", "Precision", "Recall", "F1-Score", "AUC");
        let k = self.runs.first().map_or(0, |r| r.metrics.per_class.len());
        let rows = (0..k).map(|c| (class_name(c), class_name(c))).chain([("Macro Avg".to_owned(), "macro".to_owned())]);
        for (label, key) in rows {
            let f = |m: &str| self.cell(&format!("{key}.{m}")).map_or("-".into(), |(a, s)| format_ratio(a, s));
            out += &format!("{:<10} {:>17} {:>17} {:>17} {:>17}\n", label, f("precision"), f("recall"), f("f1"), f("auc"));
        }
        if let Some((a, s)) = self.cell("accuracy") {
            out += &format!("\nAccuracy: {}\n", format_percent(a, s));
        }
        for r in &self.runs {
            for w in &r.metrics.warnings {
                out += &format!("warning (seed {}): {w}\n", r.seed);
            }
        }
        out
    }

    /// Writes `report.json`, `report.txt` and one `roc_<class>.csv`
    /// (`seed,fpr,tpr` rows) per class into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        fsutil::write_atomic(&dir.join("report.json"), self.to_json().as_bytes())?;
        fsutil::write_atomic(&dir.join("report.txt"), self.to_text().as_bytes())?;
        let k = self.runs.first().map_or(0, |r| r.roc.len());
        for c in 0..k {
            let mut csv = String::from("seed,fpr,tpr\n");
            for r in &self.runs {
                for (f, t) in &r.roc[c].points {
                    csv += &format!("{},{f},{t}\n", r.seed);
                }
            }
            fsutil::write_atomic(&dir.join(format!("roc_{}.csv", class_name(c))), csv.as_bytes())?;
        }
        Ok(())
    }
}

/// Writes the report files for `report` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    report.emit(dir)
}
