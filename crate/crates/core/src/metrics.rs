//! Confusion-matrix metrics, relative-improvement columns and per-group
//! (per-windfarm) five-number summaries.
//!
//! All metrics are percentages. When a ratio has an empty denominator the
//! score is 100 if the prediction agrees with an empty ground truth for that
//! class and 0 otherwise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::BinaryMask;
use crate::error::{Error, Result};

/// Pixel counts with blade as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Roles of foreground and background exchanged.
    pub fn swapped(&self) -> Confusion {
        Confusion {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;
    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// The metric columns, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    Miou,
    IouBackground,
    IouBlade,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Miou,
        Metric::IouBackground,
        Metric::IouBlade,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::Miou => "miou",
            Metric::IouBackground => "iou_background",
            Metric::IouBlade => "iou_blade",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Metric set for one image, one group or one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou_background: f64,
    pub iou_blade: f64,
    pub miou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_miou: Option<f64>,
    #[serde(default)]
    pub group: String,
}

impl MetricsReport {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Miou => self.miou,
            Metric::IouBackground => self.iou_background,
            Metric::IouBlade => self.iou_blade,
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = group.into();
        self
    }

    /// Fills the relative columns against a baseline report.
    pub fn with_baseline(mut self, baseline: &MetricsReport) -> Result<Self> {
        self.relative_f1 = Some(relative_metric(self.f1, baseline.f1)?);
        self.relative_miou = Some(relative_metric(self.miou, baseline.miou)?);
        Ok(self)
    }
}

/// `num/den` as a percentage; `empty_ok` decides the 0/0 case.
fn ratio(num: u64, den: u64, empty_ok: bool) -> f64 {
    if den == 0 {
        if empty_ok {
            100.0
        } else {
            0.0
        }
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &Confusion) -> MetricsReport {
    let no_pred_pos = c.tp + c.fp == 0;
    let no_gt_pos = c.tp + c.fn_ == 0;
    let precision = ratio(c.tp, c.tp + c.fp, no_gt_pos);
    let recall = ratio(c.tp, c.tp + c.fn_, no_pred_pos);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let iou_blade = ratio(c.tp, c.tp + c.fp + c.fn_, true);
    let iou_background = ratio(c.tn, c.tn + c.fp + c.fn_, true);
    MetricsReport {
        accuracy: ratio(c.tp + c.tn, c.total(), true),
        precision,
        recall,
        f1,
        iou_background,
        iou_blade,
        miou: (iou_background + iou_blade) / 2.0,
        relative_f1: None,
        relative_miou: None,
        group: String::new(),
    }
}

/// `100 · value / baseline`.
pub fn relative_metric(value: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Argument(format!("baseline must be positive, got {baseline}")));
    }
    Ok(100.0 * value / baseline)
}

/// Rounds to the two-decimal presentation used in tables.
pub fn two_decimals(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Macro average (mean of per-image metrics).
pub fn macro_average(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Argument("cannot average zero reports".into()));
    }
    let n = reports.len() as f64;
    let mean = |m: Metric| reports.iter().map(|r| r.get(m)).sum::<f64>() / n;
    Ok(MetricsReport {
        accuracy: mean(Metric::Accuracy),
        precision: mean(Metric::Precision),
        recall: mean(Metric::Recall),
        f1: mean(Metric::F1),
        iou_background: mean(Metric::IouBackground),
        iou_blade: mean(Metric::IouBlade),
        miou: mean(Metric::Miou),
        relative_f1: None,
        relative_miou: None,
        group: String::new(),
    })
}

/// Five-number summary plus mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub n: usize,
}

/// Inclusive linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Argument("cannot summarize zero values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Summary {
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
        mean: v.iter().sum::<f64>() / v.len() as f64,
        n: v.len(),
    })
}

/// Per-metric distribution summaries of one group.
pub type GroupStats = BTreeMap<Metric, Summary>;

pub fn aggregate_groups(reports: &[MetricsReport]) -> Result<BTreeMap<String, GroupStats>> {
    if reports.is_empty() {
        return Err(Error::Argument("no reports to aggregate".into()));
    }
    let mut by_group: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        if r.group.is_empty() {
            return Err(Error::Argument("report without a group id".into()));
        }
        by_group.entry(&r.group).or_default().push(r);
    }
    by_group
        .into_iter()
        .map(|(g, rs)| {
            let stats = Metric::ALL
                .into_iter()
                .map(|m| {
                    let vals: Vec<f64> = rs.iter().map(|r| r.get(m)).collect();
                    summarize(&vals).map(|s| (m, s))
                })
                .collect::<Result<GroupStats>>()?;
            Ok((g.to_string(), stats))
        })
        .collect()
}
