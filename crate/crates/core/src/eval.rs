//! Precision / recall / F1 with `+1` as the positive class, fold aggregation
//! and report files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{FoldPlan, Label};
use crate::error::{Error, Result};

/// Confusion counts and derived scores. Zero denominators yield 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn predicted_positive(&self) -> u64 {
        self.tp + self.fp
    }

    fn add_counts(&self, other: &Metrics) -> Metrics {
        Metrics::from_counts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn_ + other.fn_,
            self.tn + other.tn,
        )
    }
}

/// Scores aligned prediction and gold vectors.
pub fn score_labels(preds: &[Label], golds: &[Label]) -> Result<Metrics> {
    if preds.len() != golds.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        match (p, g) {
            (Label::Positive, Label::Positive) => tp += 1,
            (Label::Positive, Label::Negative) => fp += 1,
            (Label::Negative, Label::Positive) => fn_ += 1,
            (Label::Negative, Label::Negative) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

/// Scores id-keyed predictions; both maps must cover the same ids.
pub fn score(preds: &BTreeMap<String, Label>, golds: &BTreeMap<String, Label>) -> Result<Metrics> {
    if let Some(id) = preds.keys().find(|k| !golds.contains_key(*k)) {
        return Err(Error::Invalid(format!("prediction for unknown id {id}")));
    }
    if let Some(id) = golds.keys().find(|k| !preds.contains_key(*k)) {
        return Err(Error::Invalid(format!("no prediction for id {id}")));
    }
    let (p, g): (Vec<Label>, Vec<Label>) = golds.iter().map(|(id, g)| (preds[id], *g)).unzip();
    score_labels(&p, &g)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub per_fold: Vec<Metrics>,
    /// Unweighted mean over folds.
    pub mean: MeanMetrics,
    /// Metrics of the summed confusion counts.
    pub pooled: Metrics,
}

impl CvSummary {
    pub fn from_folds(per_fold: Vec<Metrics>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(Error::Invalid("no folds to aggregate".into()));
        }
        let k = per_fold.len() as f64;
        let mean = MeanMetrics {
            precision: per_fold.iter().map(|m| m.precision).sum::<f64>() / k,
            recall: per_fold.iter().map(|m| m.recall).sum::<f64>() / k,
            f1: per_fold.iter().map(|m| m.f1).sum::<f64>() / k,
        };
        let pooled = per_fold.iter().fold(Metrics::default(), |acc, m| acc.add_counts(m));
        Ok(CvSummary { per_fold, mean, pooled })
    }
}

/// Runs `runner(fold)` for every fold and aggregates. Folds run in parallel
/// on the current rayon pool; results are reduced in fold order.
pub fn cross_validate<F>(plan: &FoldPlan, runner: F) -> Result<CvSummary>
where
    F: Fn(usize) -> Result<Metrics> + Sync,
{
    use rayon::prelude::*;
    let per_fold = (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            let m = runner(fold)?;
            if m.total() == 0 {
                return Err(Error::Invalid(format!("fold {fold} has no evaluable instances")));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    CvSummary::from_folds(per_fold)
}

/// Effective configuration echoed next to every metrics object.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub method: String,
    pub layer: Option<u32>,
    pub threshold: Option<f64>,
    pub pi_plus: Option<f64>,
    pub seed: Option<u64>,
    /// Every other effective setting, keyed by flag name.
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(flatten)]
    pub echo: ConfigEcho,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvSummary>,
    /// Value reported for a ratio whose denominator is zero.
    #[serde(default)]
    pub zero_division: f64,
}

impl Experiment {
    pub fn new(metrics: Metrics, echo: ConfigEcho) -> Self {
        Experiment {
            metrics,
            echo,
            cv: None,
            zero_division: 0.0,
        }
    }

    pub fn from_cv(cv: CvSummary, echo: ConfigEcho) -> Self {
        Experiment {
            metrics: cv.pooled,
            echo,
            cv: Some(cv),
            zero_division: 0.0,
        }
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sort_key(e: &Experiment) -> (String, u32, f64, f64) {
    (
        e.echo.method.clone(),
        e.echo.layer.unwrap_or(0),
        e.echo.pi_plus.unwrap_or(f64::NEG_INFINITY),
        e.echo.threshold.unwrap_or(f64::NEG_INFINITY),
    )
}

pub const TABLE_HEADER: &str =
    "method,layer,threshold,pi_plus,seed,tp,fp,fn,tn,precision,recall,f1,mean_precision,mean_recall,mean_f1";

fn table_row(e: &Experiment) -> String {
    let m = &e.metrics;
    let (mp, mr, mf) = match &e.cv {
        Some(cv) => (cv.mean.precision.to_string(), cv.mean.recall.to_string(), cv.mean.f1.to_string()),
        None => Default::default(),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        e.echo.method,
        e.echo.layer.map(|l| l.to_string()).unwrap_or_default(),
        opt_f64(e.echo.threshold),
        opt_f64(e.echo.pi_plus),
        e.echo.seed.map(|s| s.to_string()).unwrap_or_default(),
        m.tp,
        m.fp,
        m.fn_,
        m.tn,
        m.precision,
        m.recall,
        m.f1,
        mp,
        mr,
        mf
    )
}

/// Writes `<name>.json` (one object per experiment) and `<name>.csv` (flat
/// table sorted by method, layer, prior and threshold).
pub fn emit_report(dir: &Path, name: &str, results: &[Experiment]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Argument("no results to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sorted: Vec<&Experiment> = results.iter().collect();
    sorted.sort_by(|a, b| {
        let (ka, kb) = (sort_key(a), sort_key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then(ka.3.total_cmp(&kb.3))
    });

    let json_path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&sorted).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;

    let csv_path = dir.join(format!("{name}.csv"));
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{TABLE_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    for e in sorted {
        writeln!(out, "{}", table_row(e)).map_err(|e| Error::io(&csv_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&csv_path, e))
}

pub fn load_report(path: &Path) -> Result<Vec<Experiment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path.display().to_string(), e.line(), e))
}
