//! Annotated sentence corpora, fold plans and class priors.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"id":"s1","tokens":["Aspirin","inhibits","COX1"],"e1":{"start":0,"end":0},"e2":{"start":2,"end":2},"label":1}
//! ```
//!
//! Spans are inclusive token-index ranges. `label` is optional and takes
//! `1`/`-1` (or the strings `"+1"`/`"-1"`).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Binary relation label; `Positive` is the class scored by precision/recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_sign(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_i8())
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn flip(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "1" | "+1" | "+" | "P" => Some(Label::Positive),
            "-1" | "-" | "N" => Some(Label::Negative),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Positive => f.write_str("+1"),
            Label::Negative => f.write_str("-1"),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Int(1) => Some(Label::Positive),
            Raw::Int(-1) => Some(Label::Negative),
            Raw::Int(_) => None,
            Raw::Str(s) => Label::parse(&s),
        };
        parsed.ok_or_else(|| serde::de::Error::custom("label must be +1 or -1"))
    }
}

/// Inclusive token-index span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn single(index: usize) -> Self {
        Span { start: index, end: index }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    /// Well-formed and inside a sequence of `len` positions.
    pub fn fits(&self, len: usize) -> bool {
        self.start <= self.end && self.end < len
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub e1: Span,
    pub e2: Span,
    #[serde(rename = "label", default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<Label>,
}

impl SentenceRecord {
    /// Checks span bounds and disjointness.
    pub fn validate(&self) -> Result<()> {
        for span in [self.e1, self.e2] {
            if !span.fits(self.tokens.len()) {
                return Err(Error::SpanOutOfBounds {
                    id: self.id.clone(),
                    span: span.to_string(),
                    len: self.tokens.len(),
                });
            }
        }
        if self.e1.overlaps(&self.e2) {
            return Err(Error::OverlappingSpans { id: self.id.clone() });
        }
        Ok(())
    }
}

/// How [`load_corpus`] treats records with overlapping entity spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    #[default]
    Strict,
    /// Skip overlapping records and log how many were dropped.
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    records: Vec<SentenceRecord>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(records: Vec<SentenceRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            rec.validate()?;
            if by_id.insert(rec.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
        }
        Ok(Corpus { records, by_id })
    }

    pub fn records(&self) -> &[SentenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&SentenceRecord> {
        self.records.get(index)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&SentenceRecord> {
        self.index_of(id).map(|i| &self.records[i])
    }

    /// Gold labels in record order; errors on the first unlabeled record.
    pub fn gold_labels(&self) -> Result<Vec<Label>> {
        self.records
            .iter()
            .map(|r| r.gold_label.ok_or_else(|| Error::MissingLabel(r.id.clone())))
            .collect()
    }

    /// Sub-corpus of the given record indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let records: Vec<_> = indices.iter().map(|&i| self.records[i].clone()).collect();
        let by_id = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Corpus { records, by_id }
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for rec in &self.records {
            let line = serde_json::to_string(rec).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_corpus(path: &Path, mode: LoadMode) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), &path.display().to_string(), mode)
}

pub fn read_corpus<R: BufRead>(reader: R, source_name: &str, mode: LoadMode) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    let mut skipped = 0usize;
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::malformed(source_name, line_no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SentenceRecord =
            serde_json::from_str(&line).map_err(|e| Error::malformed(source_name, line_no, e))?;
        match rec.validate() {
            Ok(()) => {}
            Err(Error::OverlappingSpans { .. }) if mode == LoadMode::Lenient => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(Error::malformed(source_name, line_no, e)),
        }
        if seen.insert(rec.id.clone(), records.len()).is_some() {
            return Err(Error::malformed(
                source_name,
                line_no,
                Error::DuplicateId(rec.id.clone()),
            ));
        }
        records.push(rec);
    }
    if skipped > 0 {
        log::warn!("{source_name}: skipped {skipped} records with overlapping entity spans");
    }
    Ok(Corpus { records, by_id: seen })
}

/// Assignment of every corpus record to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// Record indices held out in `fold`, ascending.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    /// Record indices not in `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Reads `<id>\t<fold>` lines; every corpus id must appear exactly once.
    pub fn load(path: &Path, corpus: &Corpus) -> Result<FoldPlan> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut assignment: Vec<Option<usize>> = vec![None; corpus.len()];
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| Error::malformed(&name, line_no, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, fold) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed(&name, line_no, "expected <id>\\t<fold>"))?;
            let fold: usize = fold
                .trim()
                .parse()
                .map_err(|e| Error::malformed(&name, line_no, e))?;
            let idx = corpus
                .index_of(id)
                .ok_or_else(|| Error::malformed(&name, line_no, format!("unknown id {id}")))?;
            if assignment[idx].replace(fold).is_some() {
                return Err(Error::malformed(&name, line_no, Error::DuplicateId(id.to_string())));
            }
        }
        let assignment = assignment
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                f.ok_or_else(|| {
                    Error::Invalid(format!("{name}: no fold for id {}", corpus.records[i].id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let k = assignment.iter().max().map_or(0, |m| m + 1);
        let plan = FoldPlan { k, seed: 0, assignment };
        if k < 2 || plan.fold_sizes().contains(&0) {
            return Err(Error::Invalid(format!("{name}: folds must be 0..k with k >= 2, none empty")));
        }
        Ok(plan)
    }

    pub fn write(&self, path: &Path, corpus: &Corpus) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (rec, fold) in corpus.records().iter().zip(&self.assignment) {
            writeln!(out, "{}\t{}", rec.id, fold).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Shuffles record positions with `seed` and deals them round-robin into `k` folds.
pub fn make_folds(corpus: &Corpus, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Argument(format!("fold count must be at least 2, got {k}")));
    }
    if k > corpus.len() {
        return Err(Error::Argument(format!(
            "fold count {k} exceeds corpus size {}",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; corpus.len()];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % k;
    }
    Ok(FoldPlan { k, seed, assignment })
}

/// Splits `records` into (train, dev) with `round_half_up(fraction * n)` dev items.
/// Both halves are returned in ascending order.
pub fn split_train_dev(records: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!("dev fraction must be in (0,1), got {fraction}")));
    }
    let dev_n = (fraction * records.len() as f64 + 0.5).floor() as usize;
    if dev_n == 0 {
        return Err(Error::Argument(format!(
            "dev split of {} records at fraction {fraction} would be empty",
            records.len()
        )));
    }
    if dev_n >= records.len() {
        return Err(Error::Argument("dev split would leave no training records".into()));
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev = shuffled[..dev_n].to_vec();
    let mut train = shuffled[dev_n..].to_vec();
    dev.sort_unstable();
    train.sort_unstable();
    Ok((train, dev))
}

/// Fraction of `+1` gold labels.
pub fn empirical_prior(corpus: &Corpus) -> Result<f64> {
    let labels = corpus.gold_labels()?;
    if labels.is_empty() {
        return Err(Error::Invalid("empirical prior of an empty corpus".into()));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    Ok(pos as f64 / labels.len() as f64)
}

/// Reads `<id>\t<label>` lines (labels `+1`/`-1`).
pub fn load_label_file(path: &Path) -> Result<BTreeMap<String, Label>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut labels = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::malformed(&name, line_no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::malformed(&name, line_no, "expected <id>\\t<label>"))?;
        let label = Label::parse(label)
            .ok_or_else(|| Error::malformed(&name, line_no, format!("bad label {label:?}")))?;
        if labels.insert(id.to_string(), label).is_some() {
            return Err(Error::malformed(&name, line_no, Error::DuplicateId(id.to_string())));
        }
    }
    Ok(labels)
}

/// Writes `<id>\t<label>` lines in the given order.
pub fn write_label_file<'a, I>(path: &Path, labels: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, Label)>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (id, label) in labels {
        writeln!(out, "{id}\t{label}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
