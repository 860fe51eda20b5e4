//! Shared builders for integration tests.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use relsift::attnmap::PackWriter;
use relsift::corpus::{Corpus, Label, SentenceRecord, Span};

/// Two-feature Gaussian class-conditionals `N(±mean·(1,1), I)`.
pub struct Gaussians {
    pub pi_plus: f64,
    pub mean: f64,
}

impl Gaussians {
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Label>) {
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let y = Label::from_sign(rng.random::<f64>() < self.pi_plus);
            let m = self.mean * y.as_f64();
            xs.push(vec![m + noise.sample(rng), m + noise.sample(rng)]);
            ys.push(y);
        }
        (xs, ys)
    }
}

/// Supervised logistic regression with intercept, fit by Newton's method.
pub fn logistic_regression(xs: &[Vec<f64>], ys: &[Label]) -> (Vec<f64>, f64) {
    let d = xs[0].len();
    let mut theta = vec![0.0; d + 1];
    for _ in 0..50 {
        let mut grad = vec![0.0; d + 1];
        let mut hess = vec![vec![0.0; d + 1]; d + 1];
        for (x, y) in xs.iter().zip(ys) {
            let z: f64 = theta[d] + (0..d).map(|j| theta[j] * x[j]).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let t = if y.is_positive() { 1.0 } else { 0.0 };
            let xa: Vec<f64> = x.iter().copied().chain([1.0]).collect();
            for a in 0..=d {
                grad[a] += (p - t) * xa[a];
                for b in 0..=d {
                    hess[a][b] += p * (1.0 - p) * xa[a] * xa[b];
                }
            }
        }
        let step = solve(hess, grad);
        for a in 0..=d {
            theta[a] -= step[a];
        }
        if step.iter().all(|s| s.abs() < 1e-12) {
            break;
        }
    }
    (theta[..d].to_vec(), theta[d])
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

pub fn f1_of(preds: &[Label], golds: &[Label]) -> f64 {
    let tp = preds.iter().zip(golds).filter(|(p, g)| p.is_positive() && g.is_positive()).count() as f64;
    let fp = preds.iter().zip(golds).filter(|(p, g)| p.is_positive() && !g.is_positive()).count() as f64;
    let fn_ = preds.iter().zip(golds).filter(|(p, g)| !p.is_positive() && g.is_positive()).count() as f64;
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

/// Corpus of placeholder sentences carrying the given labels.
pub fn label_corpus(labels: &[Label]) -> Corpus {
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| SentenceRecord {
            id: format!("s{i:05}"),
            tokens: vec!["A".into(), "binds".into(), "B".into()],
            e1: Span::single(0),
            e2: Span::single(2),
            gold_label: Some(l),
        })
        .collect();
    Corpus::new(records).unwrap()
}

/// Random row-stochastic `n x n` matrix.
pub fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3) + 1e-6).collect();
        let s: f64 = row.iter().sum();
        w.extend(row.iter().map(|v| v / s));
    }
    w
}

/// Writes a synthetic pack with `count` sentences at layers 10 and 11, with
/// `[CLS]`/`[SEP]` special tokens and 4-dim embeddings. Returns the corpus
/// whose ids and spans match.
pub fn synthetic_pack(dir: &Path, count: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut writer = PackWriter::create(dir, Some(serde_json::json!({"encoder": "synthetic"}))).unwrap();
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let words = rng.random_range(4..12usize);
        let n = words + 2;
        let mut mask = vec![false; n];
        mask[0] = true;
        mask[n - 1] = true;
        let e1 = Span::new(1, 1 + rng.random_range(0..2usize));
        let s2 = rng.random_range(e1.end + 1..n - 1);
        let e2 = Span::new(s2, s2);
        let d = 4;
        let layers: Vec<(u32, Vec<f64>, Option<Vec<f64>>)> = [10u32, 11]
            .iter()
            .map(|&l| {
                let emb = (l == 11).then(|| (0..n * d).map(|_| rng.random::<f64>() - 0.5).collect());
                (l, random_stochastic(n, &mut rng), emb)
            })
            .collect();
        let id = format!("syn{i:04}");
        writer.add(&id, &mask, e1, e2, d, &layers).unwrap();
        let tokens = (0..words).map(|k| format!("w{k}")).collect();
        records.push(SentenceRecord {
            id,
            tokens,
            e1: Span::new(e1.start - 1, e1.end - 1),
            e2: Span::new(e2.start - 1, e2.end - 1),
            gold_label: Some(Label::from_sign(rng.random::<bool>())),
        });
    }
    writer.finish().unwrap();
    Corpus::new(records).unwrap()
}
