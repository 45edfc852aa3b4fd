//! Evaluation runs and their on-disk reports.
//!
//! A report is one JSON document (`per_image`, `aggregate`, `micro`, `groups`,
//! `baseline_ref`) plus two CSV views: the table row in column order and the
//! per-group box statistics the plots are drawn from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneBundle, BinaryMask};
use crate::codec::{read_file, write_file};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::lora::AdaptorSet;
use crate::metrics::{
    aggregate_groups, compute_metrics, confusion, macro_average, relative_metric, Confusion, GroupStats, Metric,
    MetricsReport,
};
use crate::trainer::predict_mask;

/// Degenerate-denominator rule stored with every report.
pub const CONVENTIONS: &str = "percentages; macro average over images is the headline; 0/0 scores 100 when the \
prediction agrees with an empty ground truth for that class and 0 otherwise; f1 is 0 when precision+recall is 0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub group: String,
    pub confusion: Confusion,
    pub metrics: MetricsReport,
    pub foreground_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRef {
    pub source: String,
    pub f1: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageResult>,
    /// Macro average.
    pub aggregate: MetricsReport,
    /// Metrics of the pooled confusion matrix.
    pub micro: MetricsReport,
    pub groups: BTreeMap<String, GroupStats>,
    pub baseline_ref: Option<BaselineRef>,
    pub conventions: String,
}

impl EvalReport {
    /// Builds a report from predictions already made, in sample order.
    pub fn from_predictions(samples: &[ImageSample], preds: &[BinaryMask]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("cannot evaluate an empty dataset".into()));
        }
        if samples.len() != preds.len() {
            return Err(Error::Argument(format!(
                "{} samples but {} predictions",
                samples.len(),
                preds.len()
            )));
        }
        let per_image = samples
            .iter()
            .zip(preds)
            .map(|(s, p)| {
                let c = confusion(p, &s.mask)?;
                Ok(ImageResult {
                    id: s.id.clone(),
                    group: s.group.clone(),
                    confusion: c,
                    metrics: compute_metrics(&c).with_group(&s.group),
                    foreground_fraction: p.foreground_fraction(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_results(per_image)
    }

    pub fn from_results(per_image: Vec<ImageResult>) -> Result<Self> {
        let reports: Vec<MetricsReport> = per_image.iter().map(|r| r.metrics.clone()).collect();
        let pooled = per_image.iter().fold(Confusion::default(), |acc, r| acc + r.confusion);
        Ok(Self {
            aggregate: macro_average(&reports)?,
            micro: compute_metrics(&pooled),
            groups: aggregate_groups(&reports)?,
            per_image,
            baseline_ref: None,
            conventions: CONVENTIONS.to_string(),
        })
    }

    /// Fills the relative columns against another report's aggregate.
    pub fn with_baseline(mut self, baseline: &EvalReport, source: impl Into<String>) -> Result<Self> {
        self.aggregate = self.aggregate.with_baseline(&baseline.aggregate)?;
        self.micro = self.micro.with_baseline(&baseline.micro)?;
        self.baseline_ref = Some(BaselineRef {
            source: source.into(),
            f1: baseline.aggregate.f1,
            miou: baseline.aggregate.miou,
        });
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_file(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Table row view: header plus the aggregate, two decimals.
    pub fn table_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&table_header());
        out.push('\n');
        out.push_str(&table_row(&self.aggregate));
        out.push('\n');
        out
    }

    /// `group,metric,min,q1,median,q3,max,mean,n`, one line per group and metric.
    pub fn boxplot_csv(&self) -> String {
        let mut out = String::from("group,metric,min,q1,median,q3,max,mean,n\n");
        for (g, stats) in &self.groups {
            for m in Metric::ALL {
                let s = &stats[&m];
                out.push_str(&format!(
                    "{g},{},{},{},{},{},{},{},{}\n",
                    m.name(),
                    s.min,
                    s.q1,
                    s.median,
                    s.q3,
                    s.max,
                    s.mean,
                    s.n
                ));
            }
        }
        out
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>_boxplot.csv` into `dir`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<ReportPaths> {
        let paths = ReportPaths {
            json: dir.join(format!("{stem}.json")),
            table: dir.join(format!("{stem}.csv")),
            boxplot: dir.join(format!("{stem}_boxplot.csv")),
        };
        self.save_json(&paths.json)?;
        write_file(&paths.table, self.table_csv().as_bytes())?;
        write_file(&paths.boxplot, self.boxplot_csv().as_bytes())?;
        Ok(paths)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub table: PathBuf,
    pub boxplot: PathBuf,
}

fn table_header() -> String {
    let mut cols: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
    cols.extend(["relative_f1", "relative_miou"]);
    cols.join(",")
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_default()
}

fn table_row(r: &MetricsReport) -> String {
    let mut cells: Vec<String> = Metric::ALL.iter().map(|&m| cell(Some(r.get(m)))).collect();
    cells.push(cell(r.relative_f1));
    cells.push(cell(r.relative_miou));
    cells.join(",")
}

/// Predicts every sample (in parallel, collected in input order) and scores it.
pub fn evaluate(
    samples: &[ImageSample],
    bundle: &BackboneBundle,
    adaptors: &AdaptorSet,
    prompt: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let preds = samples
        .par_iter()
        .map(|s| predict_mask(&s.image, bundle, adaptors, prompt))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions(samples, &preds)
}

/// One row of the augmentation ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mixup: bool,
    pub latent_noise: bool,
    pub f1: f64,
    pub miou: f64,
    pub relative_f1: f64,
    pub relative_miou: f64,
    pub data_order_hash: String,
}

/// Rows in the given order with relative columns against the first row.
pub fn ablation_rows(entries: &[(bool, bool, f64, f64, String)]) -> Result<Vec<AblationRow>> {
    let Some(&(_, _, base_f1, base_miou, _)) = entries.first() else {
        return Err(Error::Argument("ablation needs at least one regime".into()));
    };
    entries
        .iter()
        .map(|(mixup, noise, f1, miou, hash)| {
            Ok(AblationRow {
                mixup: *mixup,
                latent_noise: *noise,
                f1: *f1,
                miou: *miou,
                relative_f1: relative_metric(*f1, base_f1)?,
                relative_miou: relative_metric(*miou, base_miou)?,
                data_order_hash: hash.clone(),
            })
        })
        .collect()
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mixup,latent_noise,f1,relative_f1,miou,relative_miou,data_order_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2},{}\n",
            yes_no(r.mixup),
            yes_no(r.latent_noise),
            r.f1,
            r.relative_f1,
            r.miou,
            r.relative_miou,
            r.data_order_hash
        ));
    }
    out
}
