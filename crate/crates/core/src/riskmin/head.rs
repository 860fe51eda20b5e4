//! Classifier head: batch normalization, inverted dropout, then a linear
//! layer. The input features are frozen, so gradients only flow into the
//! head parameters and the batch statistics are constants of the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DROPOUT: f64 = 0.3;
/// Weight of the previous running estimate in each update.
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Trainable parameters, also used for their gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub w: Vec<f64>,
    pub b: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Params {
    pub fn zeros(dim: usize) -> Self {
        Params {
            w: vec![0.0; dim],
            b: 0.0,
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// Layout: `w`, `b`, `gamma`, `beta`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.dim() + 1);
        v.extend_from_slice(&self.w);
        v.push(self.b);
        v.extend_from_slice(&self.gamma);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 3 * dim + 1 {
            return Err(Error::SizeMismatch(format!(
                "parameter vector of length {} for dimension {dim}",
                flat.len()
            )));
        }
        Ok(Params {
            w: flat[..dim].to_vec(),
            b: flat[dim],
            gamma: flat[dim + 1..2 * dim + 1].to_vec(),
            beta: flat[2 * dim + 1..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub params: Params,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub dropout: f64,
    pub momentum: f64,
    pub eps: f64,
    /// Set once running statistics have seen a batch.
    pub stats_ready: bool,
}

/// Intermediates of a forward pass needed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub scores: Vec<f64>,
    xhat: Vec<Vec<f64>>,
    /// Scaled keep mask, `0` or `1/(1-p)`; all ones without dropout.
    mask: Vec<Vec<f64>>,
    batch_mean: Option<Vec<f64>>,
    batch_var: Option<Vec<f64>>,
}

impl LinearHead {
    /// Linear weights uniform in `±1/sqrt(dim)`, identity normalization.
    pub fn new<R: Rng>(dim: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("head dimension must be positive".into()));
        }
        check_dropout(dropout)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let w = (0..dim).map(|_| rng.random_range(-bound..bound)).collect();
        let b = rng.random_range(-bound..bound);
        Ok(LinearHead {
            params: Params {
                w,
                b,
                gamma: vec![1.0; dim],
                beta: vec![0.0; dim],
            },
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            dropout,
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
            stats_ready: false,
        })
    }

    /// Head with the given linear layer, identity normalization, zero running
    /// mean, unit running variance and no dropout. Usable in infer mode.
    pub fn from_linear(w: Vec<f64>, b: f64) -> Self {
        let dim = w.len();
        LinearHead {
            params: Params {
                w,
                b,
                gamma: vec![1.0; dim],
                beta: vec![0.0; dim],
            },
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            dropout: 0.0,
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
            stats_ready: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        check_dropout(p)?;
        self.dropout = p;
        Ok(())
    }

    fn check_rows(&self, rows: &[&[f64]]) -> Result<()> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.dim()) {
            return Err(Error::SizeMismatch(format!(
                "feature of length {} for head dimension {}",
                r.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn forward<R: Rng>(&self, rows: &[&[f64]], mode: Mode, rng: &mut R) -> Result<ForwardCache> {
        match mode {
            Mode::Train => self.forward_train(rows, rng),
            Mode::Infer => self.forward_infer(rows),
        }
    }

    /// Batch statistics and a fresh dropout mask; needs at least two rows.
    pub fn forward_train<R: Rng>(&self, rows: &[&[f64]], rng: &mut R) -> Result<ForwardCache> {
        self.check_rows(rows)?;
        let n = rows.len();
        if n < 2 {
            return Err(Error::Argument("train-mode batch needs at least two rows".into()));
        }
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                let c = r[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);

        let keep = 1.0 - self.dropout;
        let mask: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        if self.dropout == 0.0 {
                            1.0
                        } else if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let mut cache = self.finish(rows, &mean, &var, mask);
        cache.batch_mean = Some(mean);
        cache.batch_var = Some(var);
        Ok(cache)
    }

    /// Running statistics, no dropout. Does not touch any random source.
    pub fn forward_infer(&self, rows: &[&[f64]]) -> Result<ForwardCache> {
        self.check_rows(rows)?;
        if !self.stats_ready {
            return Err(Error::Invalid(
                "head has no running statistics; run at least one training step first".into(),
            ));
        }
        let mask = vec![vec![1.0; self.dim()]; rows.len()];
        Ok(self.finish(rows, &self.running_mean, &self.running_var, mask))
    }

    fn finish(&self, rows: &[&[f64]], mean: &[f64], var: &[f64], mask: Vec<Vec<f64>>) -> ForwardCache {
        let p = &self.params;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let xhat: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| (0..r.len()).map(|j| (r[j] - mean[j]) * inv_std[j]).collect())
            .collect();
        let scores = xhat
            .iter()
            .zip(&mask)
            .map(|(xh, m)| {
                let mut s = p.b;
                for j in 0..xh.len() {
                    s += p.w[j] * (p.gamma[j] * xh[j] + p.beta[j]) * m[j];
                }
                s
            })
            .collect();
        ForwardCache {
            scores,
            xhat,
            mask,
            batch_mean: None,
            batch_var: None,
        }
    }

    /// Gradient of `sum_i grad_scores[i] * score_i` with respect to the parameters.
    pub fn backward(&self, cache: &ForwardCache, grad_scores: &[f64]) -> Params {
        assert_eq!(grad_scores.len(), cache.scores.len(), "gradient length");
        let p = &self.params;
        let mut g = Params::zeros(self.dim());
        for ((gi, xh), m) in grad_scores.iter().zip(&cache.xhat).zip(&cache.mask) {
            g.b += gi;
            for j in 0..xh.len() {
                let gm = gi * m[j];
                g.w[j] += gm * (p.gamma[j] * xh[j] + p.beta[j]);
                g.gamma[j] += gm * p.w[j] * xh[j];
                g.beta[j] += gm * p.w[j];
            }
        }
        g
    }

    /// Folds the batch statistics of a train-mode pass into the running ones.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let (Some(mean), Some(var)) = (&cache.batch_mean, &cache.batch_var) else {
            return;
        };
        let n = cache.scores.len() as f64;
        let unbias = n / (n - 1.0);
        let m = self.momentum;
        for j in 0..self.dim() {
            self.running_mean[j] = m * self.running_mean[j] + (1.0 - m) * mean[j];
            self.running_var[j] = m * self.running_var[j] + (1.0 - m) * var[j] * unbias;
        }
        self.stats_ready = true;
    }

    /// Infer-mode score of one feature vector.
    pub fn score(&self, row: &[f64]) -> Result<f64> {
        Ok(self.forward_infer(&[row])?.scores[0])
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Argument(format!("dropout rate must lie in [0,1), got {p}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows() -> Vec<Vec<f64>> {
        vec![vec![1.0, -2.0, 0.5], vec![0.3, 0.7, -1.1], vec![-0.4, 2.2, 0.0]]
    }

    #[test]
    fn zero_weights_score_zero() {
        let head = LinearHead::from_linear(vec![0.0; 3], 0.0);
        for r in rows() {
            assert_eq!(head.score(&r).unwrap(), 0.0);
        }
    }

    #[test]
    fn identity_normalization_is_dot_product() {
        let w = vec![0.5, -1.0, 2.0];
        let head = LinearHead::from_linear(w.clone(), 0.25);
        for r in rows() {
            let dot: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() + 0.25;
            assert!((head.score(&r).unwrap() - dot).abs() < 1e-4 * (1.0 + dot.abs()));
        }
    }

    #[test]
    fn train_mode_is_seed_reproducible() {
        let data = rows();
        let refs: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let head = LinearHead::new(3, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = head.forward_train(&refs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = head.forward_train(&refs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn infer_before_training_fails() {
        let head = LinearHead::new(3, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(head.score(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn infer_ignores_rng() {
        let data = rows();
        let refs: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let mut head = LinearHead::new(3, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = head.forward_train(&refs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        head.update_running_stats(&c);
        let a = head.forward(&refs, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = head.forward(&refs, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn running_stats_update() {
        let data = [vec![1.0], vec![3.0]];
        let refs: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let mut head = LinearHead::new(1, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = head.forward_train(&refs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        head.update_running_stats(&c);
        // batch mean 2, unbiased variance 2
        assert!((head.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((head.running_var[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn params_round_trip() {
        let p = Params {
            w: vec![1.0, 2.0],
            b: 3.0,
            gamma: vec![4.0, 5.0],
            beta: vec![6.0, 7.0],
        };
        assert_eq!(Params::from_flat(2, &p.flatten()).unwrap(), p);
        assert!(Params::from_flat(3, &p.flatten()).is_err());
    }

    #[test]
    fn bad_dropout_rejected() {
        assert!(LinearHead::new(2, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
