//! Railcar-level evaluation: MAE and R² for contamination, accuracy and
//! macro precision/recall/F1 for grade, and inspector spread statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {pred} predictions vs {truth} truths")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("empty input")]
    Empty,
    #[error("R² needs at least two pairs")]
    TooFewPairs,
    #[error("UNDEFINED_R2: all truth values are equal")]
    UndefinedR2,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("need at least two raters sharing a railcar")]
    InsufficientRaters,
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn check_pair(pred: usize, truth: usize) -> Result<()> {
    if pred != truth {
        return Err(MetricsError::LengthMismatch { pred, truth });
    }
    if pred == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred.len(), truth.len())?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred.len(), truth.len())?;
    if pred.len() < 2 {
        return Err(MetricsError::TooFewPairs);
    }
    // Tested on the values themselves: the mean of a constant column can
    // round away from it and leave a tiny nonzero SS_tot.
    if truth.iter().all(|&t| t == truth[0]) {
        return Err(MetricsError::UndefinedR2);
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Truth count.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// Classes with no truth and no prediction; they score 0 and still
    /// count in the macro averages.
    pub absent_classes: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, macro-averaged P/R/F1 over all `class_num` classes, and the
/// confusion matrix. Undefined ratios (no predictions or no truths for a
/// class) are 0.
pub fn classification_metrics(pred: &[usize], truth: &[usize], class_num: usize) -> Result<ClassificationMetrics> {
    check_pair(pred.len(), truth.len())?;
    for &l in pred.iter().chain(truth) {
        if l >= class_num {
            return Err(MetricsError::LabelOutOfRange {
                label: l,
                classes: class_num,
            });
        }
    }
    let mut confusion = vec![vec![0usize; class_num]; class_num];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let n = pred.len();
    let correct: usize = (0..class_num).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(class_num);
    let mut absent_classes = Vec::new();
    for c in 0..class_num {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..class_num).map(|t| confusion[t][c]).sum();
        if support == 0 && predicted == 0 {
            absent_classes.push(c);
        }
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassScores {
            class: c,
            precision,
            recall,
            f1,
            support,
        });
    }
    if !absent_classes.is_empty() {
        log::warn!("classes {absent_classes:?} absent from predictions and truth; scored as 0");
    }
    let k = class_num as f64;
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / n as f64,
        macro_precision: per_class.iter().map(|s| s.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|s| s.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / k,
        per_class,
        confusion,
        absent_classes,
    })
}

/// One rater's label for one railcar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterLabel {
    pub rater: String,
    pub railcar: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterSpread {
    pub rater: String,
    pub shared_railcars: usize,
    /// Mean of `rater - consensus`.
    pub bias: f64,
    /// Population standard deviation of `rater - consensus`.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadReport {
    pub raters: Vec<RaterSpread>,
    pub excluded: Vec<String>,
    pub warnings: Vec<String>,
}

/// Per-rater bias and dispersion against the per-railcar mean of all
/// raters. Only railcars with two or more raters count.
pub fn inspector_spread(labels: &[RaterLabel]) -> Result<SpreadReport> {
    let mut by_car: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    let mut raters: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for l in labels {
        by_car.entry(&l.railcar).or_default().push((&l.rater, l.value));
        raters.entry(&l.rater).or_default();
    }
    for entries in by_car.values().filter(|e| e.len() >= 2) {
        let consensus = entries.iter().map(|e| e.1).sum::<f64>() / entries.len() as f64;
        for &(r, v) in entries {
            raters.get_mut(r).expect("registered above").push(v - consensus);
        }
    }
    let mut out = SpreadReport {
        raters: Vec::new(),
        excluded: Vec::new(),
        warnings: Vec::new(),
    };
    for (r, diffs) in raters {
        if diffs.is_empty() {
            out.warnings
                .push(format!("rater `{r}` shares no railcar with another rater; excluded"));
            out.excluded.push(r.to_string());
            continue;
        }
        let n = diffs.len() as f64;
        let bias = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - bias).powi(2)).sum::<f64>() / n;
        out.raters.push(RaterSpread {
            rater: r.to_string(),
            shared_railcars: diffs.len(),
            bias,
            spread: var.sqrt(),
        });
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    if out.raters.len() < 2 {
        return Err(MetricsError::InsufficientRaters);
    }
    Ok(out)
}

/// Published railcar-level results, kept as reference metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Benchmark {
    pub name: &'static str,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

pub const BENCHMARKS: [Benchmark; 3] = [
    Benchmark {
        name: "swin-mil regression",
        mae: Some(0.27),
        r2: Some(0.83),
        accuracy: None,
        f1: None,
    },
    Benchmark {
        name: "swin grade classification",
        mae: None,
        r2: None,
        accuracy: Some(0.73),
        f1: None,
    },
    Benchmark {
        name: "swin-mtl joint",
        mae: Some(0.36),
        r2: Some(0.78),
        accuracy: None,
        f1: Some(0.79),
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub model_version: String,
    pub n_railcars: usize,
    pub mae: f64,
    /// `None` when every truth value is equal.
    pub r2: Option<f64>,
    pub classification: Option<ClassificationMetrics>,
    pub averaging: String,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    split: &'a str,
    model_version: &'a str,
    n_railcars: usize,
    mae: f64,
    r2: Option<f64>,
    accuracy: Option<f64>,
    macro_precision: Option<f64>,
    macro_recall: Option<f64>,
    macro_f1: Option<f64>,
}

impl EvalReport {
    /// Builds a report from railcar-level pairs. Classification inputs are
    /// optional (regression-only models).
    pub fn build(
        split: impl Into<String>,
        model_version: impl Into<String>,
        pred: &[f64],
        truth: &[f64],
        classes: Option<(&[usize], &[usize], usize)>,
    ) -> Result<Self> {
        let mae = mae(pred, truth)?;
        let mut warnings = Vec::new();
        let r2 = match r2(pred, truth) {
            Ok(v) => Some(v),
            Err(e @ (MetricsError::UndefinedR2 | MetricsError::TooFewPairs)) => {
                warnings.push(e.to_string());
                None
            }
            Err(e) => return Err(e),
        };
        let classification = match classes {
            Some((p, t, k)) => {
                let m = classification_metrics(p, t, k)?;
                if !m.absent_classes.is_empty() {
                    warnings.push(format!(
                        "absent classes {:?} scored as 0 in macro averages",
                        m.absent_classes
                    ));
                }
                Some(m)
            }
            None => None,
        };
        Ok(Self {
            split: split.into(),
            model_version: model_version.into(),
            n_railcars: pred.len(),
            mae,
            r2,
            classification,
            averaging: "macro".into(),
            warnings,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Header plus one flat CSV row.
    pub fn to_csv(&self) -> Result<String> {
        let c = self.classification.as_ref();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(CsvRow {
            split: &self.split,
            model_version: &self.model_version,
            n_railcars: self.n_railcars,
            mae: self.mae,
            r2: self.r2,
            accuracy: c.map(|c| c.accuracy),
            macro_precision: c.map(|c| c.macro_precision),
            macro_recall: c.map(|c| c.macro_recall),
            macro_f1: c.map(|c| c.macro_f1),
        })
        .map_err(|e| MetricsError::Csv(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| MetricsError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
