//! Confusion-matrix metrics, rank-based ROC AUC, per-domain breakdowns and
//! cross-fold aggregation.
//!
//! AMF (the minority class) is the positive class throughout: sensitivity is
//! AMF recall, specificity is NMF recall, and the AUC treats `1 - score` as
//! the positive-class score (scores are probabilities of NMF).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty prediction set")]
    EmptyInput,
    #[error("both classes must be present, found only {0}")]
    SingleClass(ClassLabel),
    #[error("fold aggregation needs k >= 2, got {0}")]
    TooFewFolds(usize),
    #[error("predictions file {path}: {reason}")]
    BadPredictionsFile { path: String, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One scored prediction. `predicted` is derived from the score so the
/// threshold rule (NMF iff score >= 0.5) can never drift from inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub patch_id: String,
    /// probability of NMF
    pub score: f64,
    pub predicted: ClassLabel,
    pub truth: ClassLabel,
    pub domain_id: String,
}

impl PredictionRow {
    pub fn new(patch_id: String, score: f64, truth: ClassLabel, domain_id: String) -> Self {
        let predicted = if score >= 0.5 {
            ClassLabel::Nmf
        } else {
            ClassLabel::Amf
        };
        PredictionRow {
            patch_id,
            score,
            predicted,
            truth,
            domain_id,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new() -> Self {
        PredictionSet::default()
    }

    pub fn from_rows(rows: Vec<PredictionRow>) -> Self {
        PredictionSet { rows }
    }

    pub fn push(&mut self, row: PredictionRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV dump: `patch_id,score,predicted,truth,domain_id`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let io = |source| EvalError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "patch_id,score,predicted,truth,domain_id").map_err(io)?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.patch_id,
                r.score,
                r.predicted.code(),
                r.truth.code(),
                r.domain_id
            )
            .map_err(io)?;
        }
        f.flush().map_err(io)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |reason: String| EvalError::BadPredictionsFile {
            path: path.display().to_string(),
            reason,
        };
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(bad(format!("line {}: expected 5 fields", i + 1)));
            }
            let score: f64 = parts[1]
                .parse()
                .map_err(|_| bad(format!("line {}: bad score '{}'", i + 1, parts[1])))?;
            let truth = parts[3]
                .parse::<u8>()
                .ok()
                .and_then(ClassLabel::from_code)
                .ok_or_else(|| bad(format!("line {}: bad truth code '{}'", i + 1, parts[3])))?;
            rows.push(PredictionRow::new(
                parts[0].to_string(),
                score,
                truth,
                parts[4].to_string(),
            ));
        }
        Ok(PredictionSet { rows })
    }
}

/// Confusion counts with AMF as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn sensitivity(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let neg = self.tn + self.fp;
        (neg > 0).then(|| self.tn as f64 / neg as f64)
    }

    /// Accumulates another confusion into this one.
    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Counts a prediction set (positive = AMF).
pub fn confusion(preds: &PredictionSet) -> Result<Confusion, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut c = Confusion::default();
    for r in preds.rows() {
        match (r.truth, r.predicted) {
            (ClassLabel::Amf, ClassLabel::Amf) => c.tp += 1,
            (ClassLabel::Nmf, ClassLabel::Nmf) => c.tn += 1,
            (ClassLabel::Nmf, ClassLabel::Amf) => c.fp += 1,
            (ClassLabel::Amf, ClassLabel::Nmf) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `(sensitivity + specificity) / 2`.
pub fn balanced_accuracy(sensitivity: f64, specificity: f64) -> f64 {
    (sensitivity + specificity) / 2.0
}

/// Balanced accuracy from counts. When one class is absent the mean runs
/// over the defined recalls only (degenerate validation slices).
pub fn balanced_accuracy_from_confusion(c: &Confusion) -> f64 {
    match (c.sensitivity(), c.specificity()) {
        (Some(se), Some(sp)) => balanced_accuracy(se, sp),
        (Some(se), None) => se,
        (None, Some(sp)) => sp,
        (None, None) => 0.0,
    }
}

/// Mann-Whitney ROC AUC with AMF as the positive class. Scores are
/// probabilities of NMF, so positives rank higher when their score is lower;
/// the implementation negates scores (exact in IEEE arithmetic) and uses
/// midranks, which credits ties with 0.5.
pub fn roc_auc(scores: &[f64], truths: &[ClassLabel]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), truths.len(), "scores/truths length mismatch");
    let n_pos = truths.iter().filter(|&&t| t == ClassLabel::Amf).count();
    let n_neg = truths.len() - n_pos;
    if n_pos == 0 {
        return Err(EvalError::SingleClass(ClassLabel::Nmf));
    }
    if n_neg == 0 {
        return Err(EvalError::SingleClass(ClassLabel::Amf));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| (-scores[a]).total_cmp(&-scores[b]));

    // midrank sum of the positive class; ranks are 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if truths[idx] == ClassLabel::Amf {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-scope metrics; fields needing an absent class are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub n: u64,
    pub confusion: Confusion,
    pub balanced_accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub roc_auc: Option<f64>,
}

/// Overall metrics plus the per-domain breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub roc_auc: f64,
    pub confusion: Confusion,
    pub n: u64,
    pub per_domain: BTreeMap<String, DomainMetrics>,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let io = |source| EvalError::Io {
            path: path.display().to_string(),
            source,
        };
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json + "\n").map_err(io)
    }

    pub fn read_json(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| EvalError::BadPredictionsFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Flat CSV: one row per scope (overall first, then each domain).
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let io = |source| EvalError::Io {
            path: path.display().to_string(),
            source,
        };
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(
            f,
            "scope,n,balanced_accuracy,sensitivity,specificity,roc_auc,tp,tn,fp,fn"
        )
        .map_err(io)?;
        writeln!(
            f,
            "overall,{},{},{},{},{},{},{},{},{}",
            self.n,
            self.balanced_accuracy,
            self.sensitivity,
            self.specificity,
            self.roc_auc,
            self.confusion.tp,
            self.confusion.tn,
            self.confusion.fp,
            self.confusion.fn_
        )
        .map_err(io)?;
        for (domain, m) in &self.per_domain {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{}",
                domain,
                m.n,
                fmt(m.balanced_accuracy),
                fmt(m.sensitivity),
                fmt(m.specificity),
                fmt(m.roc_auc),
                m.confusion.tp,
                m.confusion.tn,
                m.confusion.fp,
                m.confusion.fn_
            )
            .map_err(io)?;
        }
        f.flush().map_err(io)?;
        Ok(())
    }
}

fn domain_metrics(rows: &[&PredictionRow]) -> DomainMetrics {
    let mut c = Confusion::default();
    for r in rows {
        match (r.truth, r.predicted) {
            (ClassLabel::Amf, ClassLabel::Amf) => c.tp += 1,
            (ClassLabel::Nmf, ClassLabel::Nmf) => c.tn += 1,
            (ClassLabel::Nmf, ClassLabel::Amf) => c.fp += 1,
            (ClassLabel::Amf, ClassLabel::Nmf) => c.fn_ += 1,
        }
    }
    let sensitivity = c.sensitivity();
    let specificity = c.specificity();
    let both = sensitivity.is_some() && specificity.is_some();
    let balanced = both.then(|| balanced_accuracy(sensitivity.unwrap(), specificity.unwrap()));
    let auc = if both {
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let truths: Vec<ClassLabel> = rows.iter().map(|r| r.truth).collect();
        roc_auc(&scores, &truths).ok()
    } else {
        None
    };
    DomainMetrics {
        n: rows.len() as u64,
        confusion: c,
        balanced_accuracy: balanced,
        sensitivity,
        specificity,
        roc_auc: auc,
    }
}

/// Overall and per-domain metrics. The overall scope requires both classes;
/// domains lacking one class get absent fields instead of fabricated zeros.
pub fn evaluate(preds: &PredictionSet) -> Result<MetricsReport, EvalError> {
    let overall_confusion = confusion(preds)?;
    let sensitivity = overall_confusion
        .sensitivity()
        .ok_or(EvalError::SingleClass(ClassLabel::Nmf))?;
    let specificity = overall_confusion
        .specificity()
        .ok_or(EvalError::SingleClass(ClassLabel::Amf))?;
    let scores: Vec<f64> = preds.rows().iter().map(|r| r.score).collect();
    let truths: Vec<ClassLabel> = preds.rows().iter().map(|r| r.truth).collect();
    let auc = roc_auc(&scores, &truths)?;

    let mut groups: BTreeMap<String, Vec<&PredictionRow>> = BTreeMap::new();
    for r in preds.rows() {
        groups.entry(r.domain_id.clone()).or_default().push(r);
    }
    let per_domain = groups
        .into_iter()
        .map(|(d, rows)| (d, domain_metrics(&rows)))
        .collect();

    Ok(MetricsReport {
        balanced_accuracy: balanced_accuracy(sensitivity, specificity),
        sensitivity,
        specificity,
        roc_auc: auc,
        confusion: overall_confusion,
        n: preds.len() as u64,
        per_domain,
    })
}

/// Mean and sample standard deviation of one metric across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// `"0.8744 (±0.0093)"`-style rendering at 4 decimals.
    pub formatted: String,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    let std = var.sqrt();
    MeanStd {
        mean,
        std,
        formatted: format_mean_std(mean, std),
    }
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4} (\u{b1}{std:.4})")
}

/// Cross-fold aggregate of the overall metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAggregate {
    pub k: usize,
    pub balanced_accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub roc_auc: MeanStd,
}

/// Arithmetic mean and sample (k-1) standard deviation per metric.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldAggregate, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewFolds(reports.len()));
    }
    let collect = |f: fn(&MetricsReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    Ok(FoldAggregate {
        k: reports.len(),
        balanced_accuracy: mean_std(&collect(|r| r.balanced_accuracy)),
        sensitivity: mean_std(&collect(|r| r.sensitivity)),
        specificity: mean_std(&collect(|r| r.specificity)),
        roc_auc: mean_std(&collect(|r| r.roc_auc)),
    })
}
