//! Mini-batch training of the head against a risk estimator.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::estimator::{EstimatorConfig, Objective, TeacherConfig};
use super::features::FeatureTable;
use super::head::{ForwardCache, LinearHead, Params, DEFAULT_DROPOUT};
use super::loss::sigmoid;
use super::prune::{rank_prune, PruneReport};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::eval::score_labels;
use crate::pairgen::PointwiseSets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Internal folds used by rank pruning to get out-of-fold probabilities.
    pub cross_fit_folds: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            batch_size: 256,
            epochs: 50,
            dropout: DEFAULT_DROPOUT,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cross_fit_folds: 5,
        }
    }
}

impl TrainHyper {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::Argument(format!(
                "need lr > 0, batch size >= 2 and at least one epoch (got {}, {}, {})",
                self.lr, self.batch_size, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Argument("optimizer moment coefficients must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Development data. Which part is used depends on the estimator: risk-based
/// selection prefers `sets`, F1-based selection prefers `labeled`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DevData {
    pub sets: Option<PointwiseSets>,
    /// Record indices with labels from the training label source.
    pub labeled: Option<(Vec<usize>, Vec<Label>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevCriterion {
    MinRisk,
    MaxF1,
    LastEpoch,
}

enum DevEval<'a> {
    Risk(&'a [usize], &'a [usize]),
    F1(&'a [usize], &'a [Label]),
    None,
}

impl DevEval<'_> {
    fn criterion(&self) -> DevCriterion {
        match self {
            DevEval::Risk(..) => DevCriterion::MinRisk,
            DevEval::F1(..) => DevCriterion::MaxF1,
            DevEval::None => DevCriterion::LastEpoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_risk: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    pub dev_criterion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub dim: usize,
    pub estimator: EstimatorConfig,
    pub hyper: TrainHyper,
    pub seed: u64,
    pub selected_epoch: usize,
    pub criterion: DevCriterion,
    pub label_source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneReport>,
    /// Parameter blob file name, relative to the metadata file.
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: LinearHead,
    pub meta: HeadMeta,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: TrainedHead,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], h: &TrainHyper) {
        self.t += 1;
        let c1 = 1.0 - h.beta1.powi(self.t);
        let c2 = 1.0 - h.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * grad[i];
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
            params[i] -= h.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + h.adam_eps);
        }
    }
}

/// One batch: estimator risk, consistency penalty, parameter gradient.
struct BatchEval {
    risk: f64,
    consistency: f64,
    grad: Params,
    cache: ForwardCache,
}

/// `rows` are ordered with the `n_pos` positive-set rows first. The optional
/// teacher adds `lambda * mean (sigmoid(s) - sigmoid(t))^2`.
fn batch_eval(
    head: &LinearHead,
    objective: &Objective,
    rows: &[&[f64]],
    n_pos: usize,
    teacher: Option<(&LinearHead, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<BatchEval> {
    let cache = head.forward_train(rows, rng)?;
    let (sp, sn) = cache.scores.split_at(n_pos);
    let eval = objective.evaluate(sp, sn);
    let mut grad_scores = eval.grad_pos;
    grad_scores.extend(eval.grad_neg);
    let mut consistency = 0.0;
    if let Some((t, lambda)) = teacher {
        let tc = t.forward_train(rows, rng)?;
        let b = rows.len() as f64;
        for (i, (s, ts)) in cache.scores.iter().zip(&tc.scores).enumerate() {
            let (ps, pt) = (sigmoid(*s), sigmoid(*ts));
            consistency += lambda * (ps - pt).powi(2) / b;
            grad_scores[i] += 2.0 * lambda * (ps - pt) * ps * (1.0 - ps) / b;
        }
    }
    let grad = head.backward(&cache, &grad_scores);
    Ok(BatchEval {
        risk: eval.risk,
        consistency,
        grad,
        cache,
    })
}

/// Scalar objective and its analytic gradient for one batch, with the head
/// in train mode. Dropout must be disabled on both heads for the result to
/// be a deterministic function of the parameters.
pub fn risk_and_gradient(
    head: &LinearHead,
    objective: &Objective,
    pos_rows: &[&[f64]],
    neg_rows: &[&[f64]],
    teacher: Option<(&LinearHead, f64)>,
) -> Result<(f64, Params)> {
    if head.dropout != 0.0 || teacher.is_some_and(|(t, _)| t.dropout != 0.0) {
        return Err(Error::Argument("gradient evaluation requires dropout 0".into()));
    }
    let rows: Vec<&[f64]> = pos_rows.iter().chain(neg_rows).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = batch_eval(head, objective, &rows, pos_rows.len(), teacher, &mut rng)?;
    Ok((e.risk + e.consistency, e.grad))
}

/// Scores of `indices` under the head in infer mode.
pub fn predict_scores(head: &LinearHead, features: &FeatureTable, indices: &[usize]) -> Result<Vec<f64>> {
    let rows = features.gather(indices)?;
    Ok(head.forward_infer(&rows)?.scores)
}

/// Sign of the infer-mode score; a score of exactly zero maps to `+1`.
pub fn predict(head: &LinearHead, features: &FeatureTable, indices: &[usize]) -> Result<Vec<Label>> {
    Ok(predict_scores(head, features, indices)?
        .into_iter()
        .map(|s| Label::from_sign(s >= 0.0))
        .collect())
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub(crate) struct FitSpec<'a> {
    pub objective: Objective,
    pub teacher: Option<TeacherConfig>,
    pub hyper: &'a TrainHyper,
    pub seed: u64,
}

/// Trains a fresh head on the given noisy sets (record indices, repeats
/// allowed). Returns the selected snapshot, its epoch and the log.
fn fit(
    spec: &FitSpec,
    pos: &[usize],
    neg: &[usize],
    features: &FeatureTable,
    dev: &DevEval,
) -> Result<(LinearHead, usize, Vec<EpochLog>)> {
    let h = spec.hyper;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut head = LinearHead::new(features.dim(), h.dropout, &mut rng)?;
    let mut teacher = spec.teacher.map(|_| head.clone());
    let mut flat = head.params.flatten();
    let mut adam = Adam::new(flat.len());

    let mut items: Vec<(usize, bool)> = pos.iter().map(|&i| (i, true)).chain(neg.iter().map(|&i| (i, false))).collect();
    let mut log = Vec::with_capacity(h.epochs);
    let mut best: Option<(f64, usize, LinearHead)> = None;

    for epoch in 1..=h.epochs {
        items.shuffle(&mut rng);
        let lambda = spec.teacher.map(|t| t.weight_at(epoch - 1));
        let (mut risk_sum, mut cons_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in items.chunks(h.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut rows = Vec::with_capacity(chunk.len());
            for &(i, _) in chunk.iter().filter(|c| c.1) {
                rows.push(features.require(i)?);
            }
            let n_pos = rows.len();
            for &(i, _) in chunk.iter().filter(|c| !c.1) {
                rows.push(features.require(i)?);
            }
            let t = teacher.as_ref().zip(lambda);
            let e = batch_eval(&head, &spec.objective, &rows, n_pos, t, &mut rng)?;
            let total = e.risk + e.consistency;
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}, batch {} (risk {}, consistency {})",
                    batches + 1,
                    e.risk,
                    e.consistency
                )));
            }
            adam.step(&mut flat, &e.grad.flatten(), h);
            head.params = Params::from_flat(head.dim(), &flat)?;
            head.update_running_stats(&e.cache);
            if let (Some(t), Some(cfg)) = (teacher.as_mut(), spec.teacher) {
                ema_update(t, &head, cfg.ema_decay);
            }
            risk_sum += e.risk;
            cons_sum += e.consistency;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Invalid("training set yields no batch of at least two items".into()));
        }
        let dev_value = match dev {
            DevEval::Risk(p, n) => {
                let sp = predict_scores(&head, features, p)?;
                let sn = predict_scores(&head, features, n)?;
                Some(spec.objective.risk(&sp, &sn))
            }
            DevEval::F1(idx, gold) => Some(score_labels(&predict(&head, features, idx)?, gold)?.f1),
            DevEval::None => None,
        };
        log.push(EpochLog {
            epoch,
            train_risk: risk_sum / batches as f64,
            consistency: spec.teacher.map(|_| cons_sum / batches as f64),
            dev_criterion: dev_value,
        });
        let key = match (dev, dev_value) {
            (DevEval::Risk(..), Some(v)) => -v,
            (DevEval::F1(..), Some(v)) => v,
            _ => epoch as f64,
        };
        if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
            best = Some((key, epoch, head.clone()));
        }
    }
    let (_, epoch, head) = best.expect("at least one epoch");
    Ok((head, epoch, log))
}

fn ema_update(teacher: &mut LinearHead, student: &LinearHead, decay: f64) {
    let s = student.params.flatten();
    let mut t = teacher.params.flatten();
    for (ti, si) in t.iter_mut().zip(&s) {
        *ti = decay * *ti + (1.0 - decay) * si;
    }
    teacher.params = Params::from_flat(student.dim(), &t).expect("same dimension");
    teacher.running_mean.clone_from(&student.running_mean);
    teacher.running_var.clone_from(&student.running_var);
    teacher.stats_ready = student.stats_ready;
}

/// Plain fit without dev selection, used by the rank-pruning preliminary head.
pub(crate) fn fit_plain(
    spec: &FitSpec,
    pos: &[usize],
    neg: &[usize],
    features: &FeatureTable,
) -> Result<LinearHead> {
    Ok(fit(spec, pos, neg, features, &DevEval::None)?.0)
}

pub fn train(
    sets: &PointwiseSets,
    features: &FeatureTable,
    cfg: &EstimatorConfig,
    hyper: &TrainHyper,
    dev: &DevData,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    hyper.validate()?;
    if sets.pos_set.is_empty() || sets.neg_set.is_empty() {
        return Err(Error::Invalid("training needs non-empty positive and negative sets".into()));
    }
    if features.dim() == 0 {
        return Err(Error::Invalid("feature table is empty".into()));
    }
    for &i in sets.pos_set.iter().chain(&sets.neg_set) {
        features.require(i)?;
    }

    let (train_sets, prune) = if cfg.method.uses_pruning() {
        let (pruned, report) = rank_prune(sets, features, cfg.rates_mode, cfg.pi_plus, hyper, cfg.seed)?;
        (pruned, Some(report))
    } else {
        (sets.clone(), None)
    };
    let objective = Objective::new(cfg, prune.as_ref().map(|p| p.weights))?;

    let risk_dev = dev.sets.as_ref().map(|s| DevEval::Risk(&s.pos_set, &s.neg_set));
    let f1_dev = dev.labeled.as_ref().map(|(i, l)| DevEval::F1(i, l));
    let dev_eval = if cfg.method.selects_on_risk() {
        risk_dev.or(f1_dev)
    } else {
        f1_dev.or(risk_dev)
    }
    .unwrap_or(DevEval::None);

    let spec = FitSpec {
        objective,
        teacher: cfg.teacher.filter(|_| cfg.method == super::estimator::Method::PcompTeacher),
        hyper,
        seed: cfg.seed,
    };
    let (head, selected_epoch, log) = fit(&spec, &train_sets.pos_set, &train_sets.neg_set, features, &dev_eval)?;
    log::info!(
        "{}: selected epoch {selected_epoch} of {} ({:?})",
        cfg.method.name(),
        hyper.epochs,
        dev_eval.criterion()
    );
    Ok(TrainOutcome {
        trained: TrainedHead {
            meta: HeadMeta {
                dim: head.dim(),
                estimator: cfg.clone(),
                hyper: hyper.clone(),
                seed: cfg.seed,
                selected_epoch,
                criterion: dev_eval.criterion(),
                label_source: sets.label_source.to_string(),
                prune,
                blob: String::new(),
            },
            head,
        },
        log,
    })
}

fn blob_path(meta_path: &Path) -> PathBuf {
    meta_path.with_extension("bin")
}

impl TrainedHead {
    /// Writes metadata JSON to `path` and parameters, as little-endian f32 in
    /// the order `w, b, gamma, beta, running_mean, running_var`, next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = blob_path(path);
        let mut meta = self.meta.clone();
        meta.blob = blob
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let h = &self.head;
        let mut values = h.params.flatten();
        values.extend(&h.running_mean);
        values.extend(&h.running_var);
        let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        std::fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
        let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: HeadMeta =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path.display().to_string(), e.line(), e))?;
        let blob = path.parent().unwrap_or(Path::new(".")).join(&meta.blob);
        let mut bytes = Vec::new();
        File::open(&blob)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&blob, e))?;
        let d = meta.dim;
        let expect = 4 * (5 * d + 1);
        if bytes.len() != expect {
            return Err(Error::SizeMismatch(format!(
                "{}: {} bytes, expected {expect}",
                blob.display(),
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(blob.display().to_string()));
        }
        let n = 3 * d + 1;
        let mut head = LinearHead::from_linear(vec![0.0; d], 0.0);
        head.params = Params::from_flat(d, &values[..n])?;
        head.running_mean = values[n..n + d].to_vec();
        head.running_var = values[n + d..].to_vec();
        head.dropout = meta.hyper.dropout;
        Ok(TrainedHead { head, meta })
    }
}

/// Training log as one JSON object per line.
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for row in log {
        let line = serde_json::to_string(row).expect("log row serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairgen::LabelSource;
    use crate::riskmin::estimator::Method;

    fn toy() -> (PointwiseSets, FeatureTable) {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (1.0 + (i as f64) / 40.0), (i as f64 * 0.37).sin()]
            })
            .collect();
        let pos = (0..40).filter(|i| i % 2 == 0).collect();
        let neg = (0..40).filter(|i| i % 2 == 1).collect();
        (
            PointwiseSets {
                pos_set: pos,
                neg_set: neg,
                label_source: LabelSource::Gold,
                pi_plus: Some(0.5),
            },
            FeatureTable::from_rows(rows).unwrap(),
        )
    }

    fn quick() -> TrainHyper {
        TrainHyper {
            lr: 0.05,
            batch_size: 16,
            epochs: 20,
            ..TrainHyper::default()
        }
    }

    #[test]
    fn same_seed_same_log() {
        let (sets, feats) = toy();
        let cfg = EstimatorConfig::new(Method::PcompTeacher, 0.5, 11);
        let a = train(&sets, &feats, &cfg, &quick(), &DevData::default()).unwrap();
        let b = train(&sets, &feats, &cfg, &quick(), &DevData::default()).unwrap();
        let bits = |l: &[EpochLog]| l.iter().map(|e| e.train_risk.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.log), bits(&b.log));
        assert_eq!(a.trained.head, b.trained.head);
    }

    #[test]
    fn clean_sets_are_learned() {
        let (sets, feats) = toy();
        let cfg = EstimatorConfig::new(Method::BinaryBiased, 0.5, 3);
        let out = train(&sets, &feats, &cfg, &quick(), &DevData::default()).unwrap();
        let idx: Vec<usize> = (0..40).collect();
        let preds = predict(&out.trained.head, &feats, &idx).unwrap();
        let gold: Vec<Label> = idx.iter().map(|i| Label::from_sign(i % 2 == 0)).collect();
        assert_eq!(preds, gold);
    }

    #[test]
    fn zero_features_keep_constant_risk() {
        let (sets, _) = toy();
        let feats = FeatureTable::from_rows(vec![vec![0.0, 0.0]; 40]).unwrap();
        let cfg = EstimatorConfig::new(Method::PcompUnbiased, 0.5, 5);
        let out = train(&sets, &feats, &cfg, &quick(), &DevData::default()).unwrap();
        // With zero inputs the score is the bias alone; the unbiased risk
        // l(b) + l(-b) - (l(-b) + l(b))/2 is minimized at b = 0 with value ln 2.
        let last = out.log.last().unwrap().train_risk;
        assert!((last - std::f64::consts::LN_2).abs() < 1e-2, "{last}");
        assert!(out.trained.head.params.beta.iter().all(|b| b.abs() < 0.5));
    }

    #[test]
    fn dev_selection_picks_best_epoch() {
        let (sets, feats) = toy();
        let cfg = EstimatorConfig::new(Method::PcompUnbiased, 0.5, 7);
        let dev = DevData {
            sets: Some(sets.clone()),
            labeled: None,
        };
        let out = train(&sets, &feats, &cfg, &quick(), &dev).unwrap();
        let best = out
            .log
            .iter()
            .map(|l| l.dev_criterion.unwrap())
            .fold(f64::INFINITY, f64::min);
        let chosen = out.log[out.trained.meta.selected_epoch - 1].dev_criterion.unwrap();
        assert_eq!(chosen, best);
        assert_eq!(out.trained.meta.criterion, DevCriterion::MinRisk);
    }

    #[test]
    fn save_load_round_trip() {
        let (sets, feats) = toy();
        let cfg = EstimatorConfig::new(Method::PcompRelu, 0.5, 1);
        let out = train(&sets, &feats, &cfg, &quick(), &DevData::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.json");
        out.trained.save(&path).unwrap();
        let back = TrainedHead::load(&path).unwrap();
        assert_eq!(back.meta.selected_epoch, out.trained.meta.selected_epoch);
        let idx: Vec<usize> = (0..40).collect();
        let a = predict_scores(&out.trained.head, &feats, &idx).unwrap();
        let b = predict_scores(&back.head, &feats, &idx).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn predict_tie_rule() {
        let head = LinearHead::from_linear(vec![1.0], 0.0);
        let feats = FeatureTable::from_rows(vec![vec![3.2], vec![-0.1], vec![0.0]]).unwrap();
        let labels = predict(&head, &feats, &[0, 1, 2]).unwrap();
        assert_eq!(labels, vec![Label::Positive, Label::Negative, Label::Positive]);
    }

    #[test]
    fn missing_features_rejected() {
        let (sets, _) = toy();
        let feats = FeatureTable::from_rows(vec![vec![0.0]; 10]).unwrap();
        let cfg = EstimatorConfig::new(Method::BinaryBiased, 0.5, 1);
        assert!(train(&sets, &feats, &cfg, &quick(), &DevData::default()).is_err());
    }
}
