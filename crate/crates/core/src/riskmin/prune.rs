//! Rank pruning of the noisy pointwise sets.
//!
//! A preliminary head trained with the biased binary risk gives
//! out-of-fold probabilities. The least confident members of each set are
//! removed according to the noise rates, and the survivors are reweighted by
//! `1/(1 - eta)`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimator::{noise_rates_from_prior, NoiseRates, Objective, RatesMode};
use super::features::FeatureTable;
use super::loss::sigmoid;
use super::train::{derive_seed, fit_plain, predict_scores, FitSpec, TrainHyper};
use crate::error::{Error, Result};
use crate::pairgen::PointwiseSets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub mode: RatesMode,
    pub rates: NoiseRates,
    /// Importance weights of the surviving positive and negative members.
    pub weights: (f64, f64),
    pub pruned_pos: usize,
    pub pruned_neg: usize,
}

/// Out-of-fold probabilities for every member of the two sets, in set order.
/// Folds are drawn over distinct record indices so a record never scores
/// itself.
pub fn out_of_fold_probabilities(
    sets: &PointwiseSets,
    features: &FeatureTable,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unique: Vec<usize> = sets.pos_set.iter().chain(&sets.neg_set).copied().collect();
    unique.sort_unstable();
    unique.dedup();
    let k = hyper.cross_fit_folds.min(unique.len());
    if k < 2 {
        return Err(Error::Invalid("cross-fitting needs at least two distinct records".into()));
    }
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5052_554e)));
    let fold_of: BTreeMap<usize, usize> = unique.iter().enumerate().map(|(i, &r)| (r, i % k)).collect();

    let spec_for = |f: usize| FitSpec {
        objective: Objective::Linear {
            pos: (1.0, 0.0),
            neg: (0.0, 1.0),
        },
        teacher: None,
        hyper,
        seed: derive_seed(seed, f as u64 + 1),
    };
    let heads = (0..k)
        .into_par_iter()
        .map(|f| {
            let pos: Vec<usize> = sets.pos_set.iter().copied().filter(|r| fold_of[r] != f).collect();
            let neg: Vec<usize> = sets.neg_set.iter().copied().filter(|r| fold_of[r] != f).collect();
            fit_plain(&spec_for(f), &pos, &neg, features)
        })
        .collect::<Result<Vec<_>>>()?;

    let probs = |set: &[usize]| -> Result<Vec<f64>> {
        set.iter()
            .map(|&r| Ok(sigmoid(predict_scores(&heads[fold_of[&r]], features, &[r])?[0])))
            .collect()
    };
    Ok((probs(&sets.pos_set)?, probs(&sets.neg_set)?))
}

/// Confident counting with the class-mean probabilities as thresholds.
pub fn estimate_noise_rates(probs_pos: &[f64], probs_neg: &[f64]) -> Result<NoiseRates> {
    if probs_pos.is_empty() || probs_neg.is_empty() {
        return Err(Error::Invalid("noise-rate estimation needs both sets".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let upper = mean(probs_pos);
    let lower = mean(probs_neg);
    let count = |v: &[f64], f: &dyn Fn(f64) -> bool| v.iter().filter(|&&p| f(p)).count() as f64;
    let ratio = |a: f64, b: f64| if a + b == 0.0 { 0.0 } else { a / (a + b) };
    let eta_pos = ratio(count(probs_pos, &|p| p <= lower), count(probs_pos, &|p| p >= upper));
    let eta_neg = ratio(count(probs_neg, &|p| p >= upper), count(probs_neg, &|p| p <= lower));
    Ok(NoiseRates { eta_pos, eta_neg })
}

/// Positions kept after dropping `floor(eta_pos * |P|)` lowest-probability
/// members of P and `floor(eta_neg * |N|)` highest-probability members of N.
/// Ties are broken by position. Kept positions are returned in set order.
pub fn prune_by_rank(probs_pos: &[f64], probs_neg: &[f64], rates: NoiseRates) -> Result<(Vec<usize>, Vec<usize>)> {
    let keep = |probs: &[f64], eta: f64, drop_low: bool, name: &str| -> Result<Vec<usize>> {
        let n = probs.len();
        let k = (eta * n as f64).floor() as usize;
        if k >= n {
            return Err(Error::Invalid(format!(
                "pruning {k} of {n} members would empty the {name} set"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let c = probs[a].total_cmp(&probs[b]);
            if drop_low {
                c
            } else {
                c.reverse()
            }
            .then(a.cmp(&b))
        });
        let mut kept = order[k..].to_vec();
        kept.sort_unstable();
        Ok(kept)
    };
    Ok((
        keep(probs_pos, rates.eta_pos, true, "positive")?,
        keep(probs_neg, rates.eta_neg, false, "negative")?,
    ))
}

pub fn rank_prune(
    sets: &PointwiseSets,
    features: &FeatureTable,
    mode: RatesMode,
    pi_plus: f64,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(PointwiseSets, PruneReport)> {
    if sets.pos_set.is_empty() || sets.neg_set.is_empty() {
        return Err(Error::Invalid("rank pruning needs non-empty sets".into()));
    }
    let (pp, pn) = out_of_fold_probabilities(sets, features, hyper, seed)?;
    let rates = match mode {
        RatesMode::Theory => noise_rates_from_prior(pi_plus)?,
        RatesMode::Estimate => estimate_noise_rates(&pp, &pn)?,
    };
    if rates.eta_pos + rates.eta_neg >= 1.0 {
        return Err(Error::Numerical(format!("noise rates {rates:?} leave no signal")));
    }
    let (kp, kn) = prune_by_rank(&pp, &pn, rates)?;
    log::info!(
        "rank pruning ({mode:?}): eta+ {:.4}, eta- {:.4}; kept {}/{} and {}/{}",
        rates.eta_pos,
        rates.eta_neg,
        kp.len(),
        pp.len(),
        kn.len(),
        pn.len()
    );
    let report = PruneReport {
        mode,
        rates,
        weights: (1.0 / (1.0 - rates.eta_pos), 1.0 / (1.0 - rates.eta_neg)),
        pruned_pos: pp.len() - kp.len(),
        pruned_neg: pn.len() - kn.len(),
    };
    let pruned = PointwiseSets {
        pos_set: kp.iter().map(|&i| sets.pos_set[i]).collect(),
        neg_set: kn.iter().map(|&i| sets.neg_set[i]).collect(),
        label_source: sets.label_source.clone(),
        pi_plus: sets.pi_plus,
    };
    Ok((pruned, report))
}
