//! Empirical risk estimators over scores of the noisy positive set (first
//! elements of the comparison pairs) and the noisy negative set.
//!
//! Every estimator is written as a function of the two score vectors and
//! returns the risk together with its gradient with respect to each score,
//! so the head only needs a generic backward pass.

use serde::{Deserialize, Serialize};

use super::loss::{dloss_neg, dloss_pos, loss_neg, loss_pos, logistic_loss};
use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BinaryBiased,
    Uu,
    PcompUnbiased,
    PcompRelu,
    PcompAbs,
    NoisyUnbiased,
    RankPruning,
    PcompTeacher,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::BinaryBiased,
        Method::Uu,
        Method::PcompUnbiased,
        Method::PcompRelu,
        Method::PcompAbs,
        Method::NoisyUnbiased,
        Method::RankPruning,
        Method::PcompTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BinaryBiased => "binary_biased",
            Method::Uu => "uu",
            Method::PcompUnbiased => "pcomp_unbiased",
            Method::PcompRelu => "pcomp_relu",
            Method::PcompAbs => "pcomp_abs",
            Method::NoisyUnbiased => "noisy_unbiased",
            Method::RankPruning => "rank_pruning",
            Method::PcompTeacher => "pcomp_teacher",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Method::ALL.into_iter().find(|m| m.name() == norm)
    }

    /// Methods trained on rank-pruned sets.
    pub fn uses_pruning(self) -> bool {
        matches!(self, Method::RankPruning | Method::PcompTeacher)
    }

    /// Methods whose dev selection uses the estimator risk rather than F1.
    pub fn selects_on_risk(self) -> bool {
        !matches!(self, Method::BinaryBiased | Method::RankPruning | Method::PcompTeacher)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    Relu,
    Abs,
}

impl Correction {
    fn apply(self, x: f64) -> f64 {
        match self {
            Correction::Relu => x.max(0.0),
            Correction::Abs => x.abs(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Correction::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Correction::Abs => {
                if x >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Mean-teacher consistency settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Teacher EMA decay per optimizer step.
    pub ema_decay: f64,
    pub lambda_max: f64,
    /// Epochs over which the consistency weight ramps linearly to `lambda_max`.
    pub ramp_epochs: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            ema_decay: 0.99,
            lambda_max: 1.0,
            ramp_epochs: 5,
        }
    }
}

impl TeacherConfig {
    pub fn weight_at(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 {
            self.lambda_max
        } else {
            self.lambda_max * (epoch as f64 / self.ramp_epochs as f64).min(1.0)
        }
    }
}

/// How rank pruning obtains its noise rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatesMode {
    /// Closed-form rates implied by the assumed class prior.
    Theory,
    /// Confident-threshold counting on out-of-fold probabilities.
    #[default]
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: Method,
    pub pi_plus: f64,
    /// Class priors of the positive and negative sets, for `uu`.
    #[serde(default)]
    pub uu_thetas: Option<(f64, f64)>,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    #[serde(default)]
    pub rates_mode: RatesMode,
    pub seed: u64,
}

impl EstimatorConfig {
    pub fn new(method: Method, pi_plus: f64, seed: u64) -> Self {
        EstimatorConfig {
            method,
            pi_plus,
            uu_thetas: None,
            teacher: (method == Method::PcompTeacher).then(TeacherConfig::default),
            rates_mode: RatesMode::default(),
            seed,
        }
    }

    pub fn with_uu_thetas(mut self, theta: f64, theta_p: f64) -> Self {
        self.uu_thetas = Some((theta, theta_p));
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_prior(self.pi_plus)?;
        if self.method == Method::Uu {
            let (t, tp) = self
                .uu_thetas
                .ok_or_else(|| Error::Argument("uu estimator requires (theta, theta') priors".into()))?;
            uu_coefficients(t, tp, self.pi_plus)?;
        }
        if self.method == Method::PcompTeacher && self.teacher.is_none() {
            return Err(Error::Argument("pcomp_teacher requires a teacher configuration".into()));
        }
        if let Some(t) = &self.teacher {
            if !(0.0..1.0).contains(&t.ema_decay) || t.lambda_max < 0.0 {
                return Err(Error::Argument(format!("invalid teacher configuration {t:?}")));
            }
        }
        Ok(())
    }
}

fn check_prior(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!("class prior must lie in (0,1), got {pi}")))
    }
}

/// Expected label-noise rates of the pointwise sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRates {
    /// Fraction of truly negative instances in the noisy positive set.
    pub eta_pos: f64,
    /// Fraction of truly positive instances in the noisy negative set.
    pub eta_neg: f64,
}

impl NoiseRates {
    pub const ZERO: NoiseRates = NoiseRates { eta_pos: 0.0, eta_neg: 0.0 };
}

pub fn noise_rates_from_prior(pi_plus: f64) -> Result<NoiseRates> {
    check_prior(pi_plus)?;
    let pi_minus = 1.0 - pi_plus;
    let eta_pos = pi_minus * pi_minus / (pi_minus * pi_minus + pi_plus);
    let eta_neg = pi_plus * pi_plus / (pi_plus * pi_plus + pi_minus);
    assert!(eta_pos + eta_neg < 1.0, "noise rates sum to {}", eta_pos + eta_neg);
    Ok(NoiseRates { eta_pos, eta_neg })
}

/// Noise-corrected logistic loss for an example observed with `noisy_label`.
pub fn loss_noisy_unbiased(score: f64, noisy_label: Label, rates: NoiseRates) -> Result<f64> {
    let (cp, cn) = noisy_coefficients(noisy_label, rates)?;
    Ok(cp * loss_pos(score) + cn * loss_neg(score))
}

/// Coefficients of `l(z,+1)` and `l(z,-1)` in the corrected loss.
fn noisy_coefficients(noisy_label: Label, rates: NoiseRates) -> Result<(f64, f64)> {
    let denom = 1.0 - rates.eta_pos - rates.eta_neg;
    if denom <= 0.0 {
        return Err(Error::Argument(format!(
            "noise rates {rates:?} leave no signal (1 - eta_pos - eta_neg <= 0)"
        )));
    }
    Ok(match noisy_label {
        Label::Positive => ((1.0 - rates.eta_neg) / denom, -rates.eta_pos / denom),
        Label::Negative => (-rates.eta_neg / denom, (1.0 - rates.eta_pos) / denom),
    })
}

fn uu_coefficients(theta: f64, theta_p: f64, pi: f64) -> Result<[f64; 4]> {
    check_prior(pi)?;
    if theta == theta_p {
        return Err(Error::Argument("uu priors theta and theta' must differ".into()));
    }
    let d = theta - theta_p;
    Ok([
        (1.0 - theta_p) * pi / d,
        theta_p * (1.0 - pi) / d,
        theta * (1.0 - pi) / d,
        (1.0 - theta) * pi / d,
    ])
}

/// Risk as a differentiable function of the two score vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `mean_pos(c_pp l(+1) + c_pn l(-1)) + mean_neg(c_np l(+1) + c_nn l(-1))`.
    Linear { pos: (f64, f64), neg: (f64, f64) },
    /// `g(mean_pos l(+1) - pi_minus mean_neg l(+1)) + g(mean_neg l(-1) - pi_plus mean_pos l(-1))`.
    Corrected { pi_plus: f64, g: Correction },
}

/// Risk and its gradient with respect to each score.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEval {
    pub risk: f64,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
}

impl Objective {
    /// `prune_weights` are the per-set importance weights produced by rank
    /// pruning; required for the pruning-based methods.
    pub fn new(cfg: &EstimatorConfig, prune_weights: Option<(f64, f64)>) -> Result<Self> {
        cfg.validate()?;
        let pi = cfg.pi_plus;
        Ok(match cfg.method {
            Method::BinaryBiased => Objective::Linear {
                pos: (1.0, 0.0),
                neg: (0.0, 1.0),
            },
            Method::Uu => {
                let (t, tp) = cfg.uu_thetas.expect("validated");
                let c = uu_coefficients(t, tp, pi)?;
                Objective::Linear {
                    pos: (c[0], -c[1]),
                    neg: (-c[3], c[2]),
                }
            }
            Method::PcompUnbiased => Objective::Linear {
                pos: (1.0, -pi),
                neg: (-(1.0 - pi), 1.0),
            },
            Method::PcompRelu => Objective::Corrected {
                pi_plus: pi,
                g: Correction::Relu,
            },
            Method::PcompAbs => Objective::Corrected {
                pi_plus: pi,
                g: Correction::Abs,
            },
            Method::NoisyUnbiased => {
                let rates = noise_rates_from_prior(pi)?;
                Objective::Linear {
                    pos: noisy_coefficients(Label::Positive, rates)?,
                    neg: noisy_coefficients(Label::Negative, rates)?,
                }
            }
            Method::RankPruning | Method::PcompTeacher => {
                let (wp, wn) = prune_weights.ok_or_else(|| {
                    Error::Argument(format!("{} requires rank-pruning weights", cfg.method.name()))
                })?;
                Objective::Linear {
                    pos: (wp, 0.0),
                    neg: (0.0, wn),
                }
            }
        })
    }

    /// Evaluates on a batch. An empty side contributes nothing.
    pub fn evaluate(&self, pos: &[f64], neg: &[f64]) -> RiskEval {
        let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let (ip, ineg) = (inv(pos.len()), inv(neg.len()));
        match *self {
            Objective::Linear { pos: (a, b), neg: (c, d) } => {
                let mut risk = 0.0;
                let grad_pos = pos
                    .iter()
                    .map(|&s| {
                        risk += ip * (a * loss_pos(s) + b * loss_neg(s));
                        ip * (a * dloss_pos(s) + b * dloss_neg(s))
                    })
                    .collect();
                let grad_neg = neg
                    .iter()
                    .map(|&s| {
                        risk += ineg * (c * loss_pos(s) + d * loss_neg(s));
                        ineg * (c * dloss_pos(s) + d * dloss_neg(s))
                    })
                    .collect();
                RiskEval { risk, grad_pos, grad_neg }
            }
            Objective::Corrected { pi_plus, g } => {
                let pi_minus = 1.0 - pi_plus;
                let pos_lp: f64 = ip * pos.iter().map(|&s| loss_pos(s)).sum::<f64>();
                let pos_ln: f64 = ip * pos.iter().map(|&s| loss_neg(s)).sum::<f64>();
                let neg_lp: f64 = ineg * neg.iter().map(|&s| loss_pos(s)).sum::<f64>();
                let neg_ln: f64 = ineg * neg.iter().map(|&s| loss_neg(s)).sum::<f64>();
                let first = pos_lp - pi_minus * neg_lp;
                let second = neg_ln - pi_plus * pos_ln;
                let (g1, g2) = (g.derivative(first), g.derivative(second));
                let grad_pos = pos
                    .iter()
                    .map(|&s| ip * (g1 * dloss_pos(s) - g2 * pi_plus * dloss_neg(s)))
                    .collect();
                let grad_neg = neg
                    .iter()
                    .map(|&s| ineg * (g2 * dloss_neg(s) - g1 * pi_minus * dloss_pos(s)))
                    .collect();
                RiskEval {
                    risk: g.apply(first) + g.apply(second),
                    grad_pos,
                    grad_neg,
                }
            }
        }
    }

    pub fn risk(&self, pos: &[f64], neg: &[f64]) -> f64 {
        self.evaluate(pos, neg).risk
    }
}

fn nonempty(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        Err(Error::Argument("risk needs non-empty positive and negative score sets".into()))
    } else {
        Ok(())
    }
}

fn paired(pos: &[f64], neg: &[f64]) -> Result<()> {
    nonempty(pos, neg)?;
    if pos.len() != neg.len() {
        return Err(Error::Argument(format!(
            "paired sets differ in length ({} vs {})",
            pos.len(),
            neg.len()
        )));
    }
    Ok(())
}

/// Plain binary risk treating the noisy sets as clean.
pub fn risk_binary_biased(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    nonempty(scores_pos, scores_neg)?;
    let mean = |xs: &[f64], f: fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64;
    Ok(mean(scores_pos, loss_pos) + mean(scores_neg, loss_neg))
}

/// Risk from two unlabeled sets with class priors `theta` and `theta_p`.
pub fn risk_uu(scores_a: &[f64], scores_b: &[f64], theta: f64, theta_p: f64, pi_plus: f64) -> Result<f64> {
    nonempty(scores_a, scores_b)?;
    let c = uu_coefficients(theta, theta_p, pi_plus)?;
    let ma: f64 = scores_a.iter().map(|&s| c[0] * loss_pos(s) - c[1] * loss_neg(s)).sum::<f64>()
        / scores_a.len() as f64;
    let mb: f64 = scores_b.iter().map(|&s| c[2] * loss_neg(s) - c[3] * loss_pos(s)).sum::<f64>()
        / scores_b.len() as f64;
    Ok(ma + mb)
}

/// Unbiased pairwise-comparison risk; may be negative.
pub fn risk_pcomp_unbiased(scores_pos: &[f64], scores_neg: &[f64], pi_plus: f64) -> Result<f64> {
    paired(scores_pos, scores_neg)?;
    check_prior(pi_plus)?;
    let pi_minus = 1.0 - pi_plus;
    let total: f64 = scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(&s, &sp)| {
            logistic_loss(s) + logistic_loss(-sp) - pi_plus * logistic_loss(-s) - pi_minus * logistic_loss(sp)
        })
        .sum();
    Ok(total / scores_pos.len() as f64)
}

/// Pairwise-comparison risk with each partial risk passed through `g`.
pub fn risk_pcomp_corrected(scores_pos: &[f64], scores_neg: &[f64], pi_plus: f64, g: Correction) -> Result<f64> {
    paired(scores_pos, scores_neg)?;
    check_prior(pi_plus)?;
    Ok(Objective::Corrected { pi_plus, g }.risk(scores_pos, scores_neg))
}
