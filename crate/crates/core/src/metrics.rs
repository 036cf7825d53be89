//! Confusion matrices, top-k accuracy, per-class precision/recall/F1 and
//! the evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;

pub const REPORT_SCHEMA: &str = "vigru.metrics.v1";

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::data("confusion matrix rows must form a square grid"));
        }
        Ok(Self {
            classes: n,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::data(format!(
                "class pair ({truth}, {predicted}) outside a {}-class matrix",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    /// Elementwise sum with a partial matrix.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::data(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// True-class counts.
    pub fn supports(&self) -> Vec<u64> {
        (0..self.classes).map(|t| (0..self.classes).map(|p| self.get(t, p)).sum()).collect()
    }

    pub fn predicted_counts(&self) -> Vec<u64> {
        (0..self.classes).map(|p| (0..self.classes).map(|t| self.get(t, p)).sum()).collect()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

/// Rank of `label` among the logits when ties go to the lower index.
fn rank<T: Scalar>(logits: &[T], label: usize) -> usize {
    let v = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

/// Highest logit; the lowest index wins ties.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    (0..logits.len()).find(|&c| rank(logits, c) == 0).unwrap_or(0)
}

/// Whether `label` is among the `k` largest logits, ties broken towards the
/// lower class index.
pub fn topk_hit<T: Scalar>(logits: &[T], label: usize, k: usize) -> Result<bool> {
    if label >= logits.len() {
        return Err(Error::data(format!("label {label} outside {} classes", logits.len())));
    }
    if k == 0 || k > logits.len() {
        return Err(Error::data(format!("k = {k} outside 1..={}", logits.len())));
    }
    Ok(rank(logits, label) < k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: u64,
    /// True-class count.
    pub support: u64,
    pub predicted: u64,
    /// Never predicted; precision reported as 0.
    pub precision_degenerate: bool,
    /// Never present; recall reported as 0.
    pub recall_degenerate: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn prf_per_class(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    let supports = cm.supports();
    let predicted = cm.predicted_counts();
    (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let (precision, precision_degenerate) = ratio(tp, predicted[c]);
            let (recall, recall_degenerate) = ratio(tp, supports[c]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                true_positives: tp,
                support: supports[c],
                predicted: predicted[c],
                precision_degenerate,
                recall_degenerate,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub weighted: Averages,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Unweighted and support-weighted means of per-class values.
///
/// When a class's weight equals its own support, its weighted recall term is
/// the integer true-positive count, so weighted recall equals overall
/// accuracy without rounding.
pub fn aggregate(per_class: &[ClassMetrics], supports: &[u64]) -> Result<Aggregates> {
    if per_class.len() != supports.len() {
        return Err(Error::data(format!(
            "{} classes but {} supports",
            per_class.len(),
            supports.len()
        )));
    }
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return Err(Error::data("all class supports are zero"));
    }
    let n = per_class.len() as f64;
    let macro_avg = Averages {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / n,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / n,
    };
    // Supports reduced by their gcd, so equal supports give exactly the macro
    // mean.
    let g = supports.iter().fold(0u64, |a, &b| gcd(a, b));
    let reduced_total = (total / g) as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().zip(supports).map(|(m, &s)| (s / g) as f64 * f(m)).sum::<f64>() / reduced_total
    };
    let exact_recall = per_class.iter().zip(supports).all(|(m, &s)| s == 0 || (m.support == s && !m.recall_degenerate));
    let recall = if exact_recall {
        per_class.iter().zip(supports).filter(|(_, &s)| s > 0).map(|(m, _)| m.true_positives).sum::<u64>() as f64
            / total as f64
    } else {
        weighted(|m| m.recall)
    };
    Ok(Aggregates {
        macro_avg,
        weighted: Averages {
            precision: weighted(|m| m.precision),
            recall,
            f1: weighted(|m| m.f1),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub samples: u64,
    pub top1: f64,
    pub top2: f64,
    pub classes: Vec<ClassReport>,
    #[serde(flatten)]
    pub aggregates: Aggregates,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// Builds a report from a confusion matrix and the number of samples
    /// whose label was among the two highest logits.
    pub fn from_confusion(cm: &ConfusionMatrix, top2_hits: u64, class_names: &[String]) -> Result<Self> {
        let total = cm.total();
        if total == 0 {
            return Err(Error::data("no samples were evaluated"));
        }
        if top2_hits > total || top2_hits < cm.trace() {
            return Err(Error::data(format!(
                "top-2 hits {top2_hits} inconsistent with {} top-1 hits of {total}",
                cm.trace()
            )));
        }
        let per_class = prf_per_class(cm);
        let aggregates = aggregate(&per_class, &cm.supports())?;
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
        Ok(Self {
            schema: REPORT_SCHEMA.to_string(),
            samples: total,
            top1: cm.trace() as f64 / total as f64,
            top2: top2_hits as f64 / total as f64,
            classes: per_class
                .into_iter()
                .enumerate()
                .map(|(c, metrics)| ClassReport { name: name(c), metrics })
                .collect(),
            aggregates,
            confusion: cm.rows(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-class precision, recall and F1 in percent, followed by the
    /// weighted and macro rows and the top-k accuracies.
    pub fn text_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .chain([12])
            .max()
            .unwrap_or(12);
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let mut out = String::new();
        let mut row = |label: &str, p: String, r: String, f: String, s: String| {
            let _ = writeln!(out, "{label:<width$}  {p:>9}  {r:>9}  {f:>9}  {s:>7}");
        };
        row("Class", "Precision".into(), "Recall".into(), "F1".into(), "Support".into());
        for c in &self.classes {
            let m = &c.metrics;
            row(&c.name, pct(m.precision), pct(m.recall), pct(m.f1), m.support.to_string());
        }
        let w = self.aggregates.weighted;
        let m = self.aggregates.macro_avg;
        row("weighted avg", pct(w.precision), pct(w.recall), pct(w.f1), self.samples.to_string());
        row("macro avg", pct(m.precision), pct(m.recall), pct(m.f1), self.samples.to_string());
        let _ = writeln!(out, "\ntop-1 accuracy {}%  top-2 accuracy {}%", pct(self.top1), pct(self.top2));
        out
    }
}

/// Per-sample forward outputs used by evaluation and export.
fn forward_all<T: Scalar>(model: &Model<T>, samples: &[ImageSample<T>]) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    samples.par_iter().map(|s| model.infer(&s.pixels)).collect()
}

/// Confusion matrix and top-2 hit count over `samples`, one forward pass
/// each, no augmentation.
pub fn confusion_of<T: Scalar>(model: &Model<T>, samples: &[ImageSample<T>]) -> Result<(ConfusionMatrix, u64)> {
    let classes = model.config.head.num_classes;
    let outputs = forward_all(model, samples)?;
    let mut cm = ConfusionMatrix::new(classes);
    let mut top2 = 0;
    let k = classes.min(2);
    for (s, (logits, _)) in samples.iter().zip(&outputs) {
        cm.add(s.label, argmax(logits))?;
        top2 += u64::from(topk_hit(logits, s.label, k)?);
    }
    Ok((cm, top2))
}

pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    samples: &[ImageSample<T>],
    class_names: &[String],
) -> Result<(MetricsReport, ConfusionMatrix)> {
    if samples.is_empty() {
        return Err(Error::data("evaluation split is empty"));
    }
    let (cm, top2) = confusion_of(model, samples)?;
    Ok((MetricsReport::from_confusion(&cm, top2, class_names)?, cm))
}

/// Writes one CSV row per sample: sample index, true label, then the pooled
/// embedding at full precision. Returns the number of rows written.
pub fn export_embeddings<T: Scalar>(model: &Model<T>, samples: &[ImageSample<T>], path: &Path) -> Result<usize> {
    let width = model.config.head.pooled_width();
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let header = ["sample_id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..width).map(|i| format!("e{i}")));
    w.write_record(header).map_err(io)?;
    if samples.is_empty() {
        log::warn!("export split is empty; {} holds only the header", path.display());
    }
    let outputs = forward_all(model, samples)?;
    for (s, (_, pooled)) in samples.iter().zip(&outputs) {
        let row = [s.index.to_string(), s.label.to_string()]
            .into_iter()
            .chain(pooled.iter().map(|v| v.f64().to_string()));
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let l = [0.2, 0.5, 0.3];
        assert!(topk_hit(&l, 1, 1).unwrap());
        assert!(topk_hit(&l, 2, 2).unwrap());
        assert!(!topk_hit(&l, 2, 1).unwrap());
        assert!(!topk_hit(&[1.0, 1.0, 0.0], 1, 1).unwrap());
        assert!(topk_hit(&[1.0, 1.0, 0.0], 0, 1).unwrap());
        assert!(topk_hit(&l, 3, 1).is_err());
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
    }

    #[test]
    fn hand_confusion_matrix() {
        let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![4, 6]]).unwrap();
        let m = prf_per_class(&cm);
        assert!((m[0].precision - 8.0 / 12.0).abs() < 1e-15);
        assert_eq!(m[0].recall, 0.8);
        assert!((m[0].f1 - 16.0 / 22.0).abs() < 1e-12);
        assert_eq!(m[1].precision, 0.75);
        assert_eq!(m[1].recall, 0.6);
        assert!((m[1].f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_perfect_and_never_predicted_is_flagged() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]]).unwrap();
        assert!(prf_per_class(&cm).iter().all(|m| m.precision == 1.0 && m.recall == 1.0 && m.f1 == 1.0));
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0], vec![2, 0]]).unwrap();
        let m = prf_per_class(&cm);
        assert!(m[1].precision_degenerate && m[1].precision == 0.0 && !m[1].recall_degenerate);
    }

    #[test]
    fn aggregates() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 1], vec![2, 3]]).unwrap();
        let per = prf_per_class(&cm);
        let agg = aggregate(&per, &cm.supports()).unwrap();
        assert_eq!(agg.macro_avg, agg.weighted);
        assert_eq!(agg.weighted.recall, cm.trace() as f64 / cm.total() as f64);
        let single = aggregate(&per[..1], &[5]).unwrap();
        assert_eq!(single.weighted.precision, per[0].precision);
        assert!(aggregate(&per, &[0, 0]).is_err());
    }

    #[test]
    fn report_table_and_consistency_checks() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 1], vec![2, 3]]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let r = MetricsReport::from_confusion(&cm, 10, &names).unwrap();
        assert_eq!(r.top1, 0.7);
        assert_eq!(r.top2, 1.0);
        assert!(r.text_table().contains("weighted avg"));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(MetricsReport::from_confusion(&cm, 6, &names).is_err());
    }

    #[test]
    fn merge_is_elementwise() {
        let mut a = ConfusionMatrix::from_rows(&[vec![1, 2], vec![3, 4]]).unwrap();
        a.merge(&ConfusionMatrix::from_rows(&[vec![1, 0], vec![0, 1]]).unwrap()).unwrap();
        assert_eq!(a.rows(), vec![vec![2, 2], vec![3, 5]]);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
    }
}
