//! Pairwise-comparison data generation and the pointwise split.
//!
//! A labeler draws ordered pairs `(s, s')` uniformly with replacement and
//! keeps every pair except `(-1, +1)`. The first elements form the noisy
//! positive set, the second elements the noisy negative set. With gold labels
//! this is GoDaG; with frozen silver labels from an unsupervised detector it
//! is SoDaG.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label};
use crate::error::{Error, Result};

pub const DEFAULT_PRIOR_GRID: [f64; 4] = [0.3, 0.4, 0.5, 0.6];

/// Ordered pair of record indices; `first` is the more-likely-positive one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ComparisonPair {
    pub first: usize,
    pub second: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Gold,
    /// Labels predicted by the named unsupervised method.
    Silver(String),
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelSource::Gold => f.write_str("gold"),
            LabelSource::Silver(m) => write!(f, "silver:{m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseSets {
    pub pos_set: Vec<usize>,
    pub neg_set: Vec<usize>,
    pub label_source: LabelSource,
    pub pi_plus: Option<f64>,
}

impl PointwiseSets {
    pub fn len(&self) -> usize {
        self.pos_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos_set.is_empty() && self.neg_set.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub accepted: u64,
    pub drawn: u64,
}

impl AcceptanceStats {
    pub fn rate(&self) -> f64 {
        self.accepted as f64 / self.drawn as f64
    }
}

/// Draws ordered pairs until `n_pairs` are accepted.
pub fn generate_pairs(labels: &[Label], n_pairs: usize, seed: u64) -> Result<(Vec<ComparisonPair>, AcceptanceStats)> {
    if labels.is_empty() {
        return Err(Error::Argument("cannot generate pairs from an empty label set".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Argument("n_pairs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut drawn = 0u64;
    while pairs.len() < n_pairs {
        let first = rng.random_range(0..labels.len());
        let second = rng.random_range(0..labels.len());
        drawn += 1;
        if labels[first] == Label::Negative && labels[second] == Label::Positive {
            continue;
        }
        pairs.push(ComparisonPair { first, second });
    }
    let stats = AcceptanceStats {
        accepted: pairs.len() as u64,
        drawn,
    };
    Ok((pairs, stats))
}

/// Pairs over a subset of records: `labels[k]` belongs to `records[k]`, and the
/// returned pairs carry corpus-level indices.
pub fn generate_pairs_for(
    records: &[usize],
    labels: &[Label],
    n_pairs: usize,
    seed: u64,
) -> Result<(Vec<ComparisonPair>, AcceptanceStats)> {
    assert_eq!(records.len(), labels.len());
    let (pairs, stats) = generate_pairs(labels, n_pairs, seed)?;
    let pairs = pairs
        .into_iter()
        .map(|p| ComparisonPair {
            first: records[p.first],
            second: records[p.second],
        })
        .collect();
    Ok((pairs, stats))
}

pub fn split_pointwise(pairs: &[ComparisonPair], label_source: LabelSource) -> Result<PointwiseSets> {
    if pairs.is_empty() {
        return Err(Error::Argument("no pairs to split".into()));
    }
    Ok(PointwiseSets {
        pos_set: pairs.iter().map(|p| p.first).collect(),
        neg_set: pairs.iter().map(|p| p.second).collect(),
        label_source,
        pi_plus: None,
    })
}

fn check_prior(pi_plus: f64) -> Result<()> {
    if pi_plus > 0.0 && pi_plus < 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!("class prior must lie in (0,1), got {pi_plus}")))
    }
}

/// Fraction of truly positive instances in the noisy positive and noisy
/// negative sets for class prior `pi_plus`.
pub fn mixture_weights(pi_plus: f64) -> Result<(f64, f64)> {
    check_prior(pi_plus)?;
    let pi_minus = 1.0 - pi_plus;
    let w_pos = pi_plus / (pi_minus * pi_minus + pi_plus);
    let w_neg = pi_plus * pi_plus / (pi_plus * pi_plus + pi_minus);
    Ok((w_pos, w_neg))
}

/// Both roots of `p^2 - p + (1 - rate) = 0` for the observed acceptance rate;
/// which one is the prior depends on which class dominates.
pub fn estimate_prior_from_acceptance(accepted: u64, drawn: u64) -> Result<(f64, f64)> {
    if accepted == 0 || accepted > drawn {
        return Err(Error::Argument(format!(
            "need 0 < accepted <= drawn, got {accepted}/{drawn}"
        )));
    }
    let rate = accepted as f64 / drawn as f64;
    let disc = 4.0 * rate - 3.0;
    if disc < 0.0 {
        return Err(Error::Invalid(format!(
            "acceptance rate {rate:.6} < 0.75 is inconsistent with any class prior"
        )));
    }
    let root = disc.sqrt();
    Ok(((1.0 - root) / 2.0, (1.0 + root) / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub accepted: u64,
    pub drawn: u64,
    pub acceptance_rate: f64,
    pub root_low: Option<f64>,
    pub root_high: Option<f64>,
    pub label_source: String,
    pub seed: u64,
}

impl PairReport {
    pub fn new(stats: AcceptanceStats, label_source: &LabelSource, seed: u64) -> Self {
        let roots = estimate_prior_from_acceptance(stats.accepted, stats.drawn).ok();
        PairReport {
            accepted: stats.accepted,
            drawn: stats.drawn,
            acceptance_rate: stats.rate(),
            root_low: roots.map(|r| r.0),
            root_high: roots.map(|r| r.1),
            label_source: label_source.to_string(),
            seed,
        }
    }
}

/// Writes `<first_id>\t<second_id>` lines.
pub fn write_pairs(path: &Path, pairs: &[ComparisonPair], corpus: &Corpus) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in pairs {
        let a = &corpus.records()[p.first].id;
        let b = &corpus.records()[p.second].id;
        writeln!(out, "{a}\t{b}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path, corpus: &Corpus) -> Result<Vec<ComparisonPair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut pairs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::malformed(&name, n + 1, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::malformed(&name, n + 1, "expected <first_id>\\t<second_id>"))?;
        let lookup = |id: &str| {
            corpus
                .index_of(id)
                .ok_or_else(|| Error::malformed(&name, n + 1, format!("unknown id {id}")))
        };
        pairs.push(ComparisonPair {
            first: lookup(a)?,
            second: lookup(b.trim())?,
        });
    }
    Ok(pairs)
}

/// Writes `<id>\tP` for the positive set then `<id>\tN` for the negative set.
pub fn write_sets(path: &Path, sets: &PointwiseSets, corpus: &Corpus) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (tag, set) in [("P", &sets.pos_set), ("N", &sets.neg_set)] {
        for &i in set {
            writeln!(out, "{}\t{tag}", corpus.records()[i].id).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sets(path: &Path, corpus: &Corpus, label_source: LabelSource) -> Result<PointwiseSets> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut sets = PointwiseSets {
        pos_set: Vec::new(),
        neg_set: Vec::new(),
        label_source,
        pi_plus: None,
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::malformed(&name, n + 1, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::malformed(&name, n + 1, "expected <id>\\t{P|N}"))?;
        let idx = corpus
            .index_of(id)
            .ok_or_else(|| Error::malformed(&name, n + 1, format!("unknown id {id}")))?;
        match tag.trim() {
            "P" => sets.pos_set.push(idx),
            "N" => sets.neg_set.push(idx),
            other => return Err(Error::malformed(&name, n + 1, format!("bad set tag {other:?}"))),
        }
    }
    Ok(sets)
}
