//! Ratio-conditioned fusion of the two models and the evaluation metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data_model::{assign_eval_group, ClassLabel, EvalGroup};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Fusion weight of the US model for scans with very small or large infection.
pub const DUAL_WEIGHT_EXTREME: f64 = 0.35;
/// Fusion weight of the US model otherwise.
pub const DUAL_WEIGHT_REST: f64 = 0.96;
const DUAL_LOW_BELOW: f64 = 0.001;
const DUAL_HIGH_ABOVE: f64 = 0.030;

/// US weight for a scan with infection ratio `ratio`. The boundaries 0.001
/// and 0.030 themselves get the "rest" weight.
pub fn dual_weight(ratio: f64) -> f64 {
    if ratio < DUAL_LOW_BELOW || ratio > DUAL_HIGH_ABOVE {
        DUAL_WEIGHT_EXTREME
    } else {
        DUAL_WEIGHT_REST
    }
}

/// `w * p_us + (1 - w) * p_ss`.
pub fn fuse(p_us: f64, p_ss: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("fusion weight {w} outside [0, 1]")));
    }
    Ok(w * p_us + (1.0 - w) * p_ss)
}

fn check_aligned(scores: &[f64], labels: &[ClassLabel]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half (midrank form).
pub fn auc(scores: &[f64], labels: &[ClassLabel]) -> Result<f64> {
    check_aligned(scores, labels)?;
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k].is_positive() {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// Metrics that are undefined for the given data (e.g. sensitivity without
/// positives) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub counts: ConfusionCounts,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricReport {
    pub fn from_counts(counts: ConfusionCounts, auc: Option<f64>) -> Self {
        let c = counts;
        MetricReport {
            n: c.total(),
            auc,
            accuracy: ratio(c.tp + c.tn, c.total()),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            counts,
        }
    }
}

/// Positive prediction iff `score >= threshold`.
pub fn confusion_counts(scores: &[f64], labels: &[ClassLabel], threshold: f64) -> Result<ConfusionCounts> {
    check_aligned(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, l.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn confusion_metrics(scores: &[f64], labels: &[ClassLabel], threshold: f64) -> Result<MetricReport> {
    let counts = confusion_counts(scores, labels, threshold)?;
    Ok(MetricReport::from_counts(counts, auc(scores, labels).ok()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub band: EvalGroup,
    /// No scans fell into this band.
    pub empty: bool,
    pub report: MetricReport,
}

/// Metrics per infection-ratio band, in `EvalGroup::ALL` order.
pub fn groupwise_report(scores: &[f64], labels: &[ClassLabel], ratios: &[f64], threshold: f64) -> Result<Vec<BandReport>> {
    check_aligned(scores, labels)?;
    if ratios.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!("{} ratios for {} scores", ratios.len(), scores.len())));
    }
    let bands: Vec<EvalGroup> = ratios.iter().map(|r| assign_eval_group(*r)).collect::<Result<_>>()?;
    EvalGroup::ALL
        .iter()
        .map(|&band| {
            let (s, l): (Vec<f64>, Vec<ClassLabel>) = bands
                .iter()
                .zip(scores.iter().zip(labels))
                .filter(|(b, _)| **b == band)
                .map(|(_, (s, l))| (*s, *l))
                .unzip();
            Ok(BandReport {
                band,
                empty: s.is_empty(),
                report: confusion_metrics(&s, &l, threshold)?,
            })
        })
        .collect()
}

/// Two-sided paired t-test on `a - b`. All-zero differences give 1; constant
/// nonzero differences give 0.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// One scan's predictions from both models and their fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPrediction {
    pub scan_id: String,
    pub p_us: f64,
    pub p_ss: f64,
    pub w: f64,
    pub p_final: f64,
    pub label: ClassLabel,
    pub ratio: f64,
}

impl ScanPrediction {
    pub fn new(scan_id: impl Into<String>, p_us: f64, p_ss: f64, label: ClassLabel, ratio: f64) -> Result<Self> {
        let w = dual_weight(ratio);
        Ok(ScanPrediction {
            scan_id: scan_id.into(),
            p_us,
            p_ss,
            w,
            p_final: fuse(p_us, p_ss, w)?,
            label,
            ratio,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReports {
    pub overall: MetricReport,
    pub bands: Vec<BandReport>,
}

impl ModelReports {
    pub fn compute(scores: &[f64], labels: &[ClassLabel], ratios: &[f64]) -> Result<Self> {
        Ok(ModelReports {
            overall: confusion_metrics(scores, labels, DEFAULT_THRESHOLD)?,
            bands: groupwise_report(scores, labels, ratios, DEFAULT_THRESHOLD)?,
        })
    }

    pub fn band(&self, band: EvalGroup) -> &BandReport {
        self.bands.iter().find(|b| b.band == band).expect("all bands present")
    }
}

/// Reports for US, SS and the fused (DS) scores, plus per-scan rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub us: ModelReports,
    pub ss: ModelReports,
    pub ds: ModelReports,
    pub predictions: Vec<ScanPrediction>,
}

impl EvaluationReport {
    pub fn from_predictions(predictions: Vec<ScanPrediction>) -> Result<Self> {
        let labels: Vec<ClassLabel> = predictions.iter().map(|p| p.label).collect();
        let ratios: Vec<f64> = predictions.iter().map(|p| p.ratio).collect();
        let col = |f: fn(&ScanPrediction) -> f64| predictions.iter().map(f).collect::<Vec<f64>>();
        Ok(EvaluationReport {
            us: ModelReports::compute(&col(|p| p.p_us), &labels, &ratios)?,
            ss: ModelReports::compute(&col(|p| p.p_ss), &labels, &ratios)?,
            ds: ModelReports::compute(&col(|p| p.p_final), &labels, &ratios)?,
            predictions,
        })
    }
}
