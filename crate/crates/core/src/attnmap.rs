//! Attention-based relation detectors over pre-extracted tensor packs.
//!
//! A tensor pack is a directory with an `index.json` and raw little-endian
//! `f32` blobs, row-major and headerless:
//!
//! ```text
//! index.json           {"manifest": {...}, "entries": {"<id>": {n, d, layers, special_mask, tok_e1, tok_e2, files?}}}
//! <id>.L<layer>.attn   n x n head-averaged attention
//! <id>.L<layer>.emb    n x d token embeddings (optional per layer)
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Span};
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};

pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
const DISTRIBUTION_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_LAYERS: [u32; 2] = [10, 11];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFiles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emb: Option<String>,
}

/// Per-sentence metadata in `index.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackEntry {
    pub n: usize,
    pub d: usize,
    pub layers: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<BTreeMap<u32, LayerFiles>>,
    pub special_mask: Vec<u8>,
    pub tok_e1: Span,
    pub tok_e2: Span,
}

impl PackEntry {
    fn attn_file(&self, id: &str, layer: u32) -> String {
        self.files
            .as_ref()
            .and_then(|f| f.get(&layer))
            .and_then(|f| f.attn.clone())
            .unwrap_or_else(|| format!("{id}.L{layer}.attn"))
    }

    fn emb_file(&self, id: &str, layer: u32) -> String {
        self.files
            .as_ref()
            .and_then(|f| f.get(&layer))
            .and_then(|f| f.emb.clone())
            .unwrap_or_else(|| format!("{id}.L{layer}.emb"))
    }

    fn validate(&self, id: &str) -> Result<()> {
        if self.special_mask.len() != self.n {
            return Err(Error::SizeMismatch(format!("{id}: special_mask length vs n={}", self.n)));
        }
        for span in [self.tok_e1, self.tok_e2] {
            if !span.fits(self.n) {
                return Err(Error::SpanOutOfBounds {
                    id: id.to_string(),
                    span: span.to_string(),
                    len: self.n,
                });
            }
            if span.indices().any(|i| self.special_mask[i] != 0) {
                return Err(Error::Invalid(format!("{id}: entity span {span} covers a special token")));
            }
        }
        if self.tok_e1.overlaps(&self.tok_e2) {
            return Err(Error::OverlappingSpans { id: id.to_string() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PackIndex {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
    pub entries: BTreeMap<String, PackEntry>,
}

/// Head-averaged attention of one sentence at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub sentence_id: String,
    pub layer: u32,
    pub n: usize,
    /// Row-major `n x n`.
    pub weights: Vec<f64>,
    pub special_mask: Vec<bool>,
    pub tok_e1: Span,
    pub tok_e2: Span,
}

impl AttentionRecord {
    /// Builds a record and checks shapes, finiteness and row sums.
    pub fn new(
        sentence_id: impl Into<String>,
        layer: u32,
        n: usize,
        weights: Vec<f64>,
        special_mask: Vec<bool>,
        tok_e1: Span,
        tok_e2: Span,
    ) -> Result<Self> {
        let rec = AttentionRecord {
            sentence_id: sentence_id.into(),
            layer,
            n,
            weights,
            special_mask,
            tok_e1,
            tok_e2,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Record without special tokens.
    pub fn plain(n: usize, weights: Vec<f64>, tok_e1: Span, tok_e2: Span) -> Result<Self> {
        AttentionRecord::new("", 0, n, weights, vec![false; n], tok_e1, tok_e2)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    fn validate(&self) -> Result<()> {
        let id = &self.sentence_id;
        if self.weights.len() != self.n * self.n || self.special_mask.len() != self.n {
            return Err(Error::SizeMismatch(format!("{id} layer {}", self.layer)));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("{id} layer {}", self.layer)));
        }
        for i in 0..self.n {
            let sum: f64 = self.row(i).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "{id} layer {}: attention row {i} sums to {sum}",
                    self.layer
                )));
            }
        }
        for span in [self.tok_e1, self.tok_e2] {
            if !span.fits(self.n) {
                return Err(Error::SpanOutOfBounds {
                    id: id.clone(),
                    span: span.to_string(),
                    len: self.n,
                });
            }
        }
        Ok(())
    }

    fn content_count(&self, opts: &AttnOptions) -> usize {
        if opts.mask_special {
            self.special_mask.iter().filter(|&&m| !m).count()
        } else {
            self.n
        }
    }
}

/// Token embeddings of one sentence at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub sentence_id: String,
    pub layer: u32,
    pub n: usize,
    pub d: usize,
    /// Row-major `n x d`.
    pub values: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Mean of the embedding rows covered by `span`.
    pub fn mean_pool(&self, span: Span) -> Vec<f64> {
        let mut acc = vec![0.0; self.d];
        for i in span.indices() {
            for (a, v) in acc.iter_mut().zip(self.row(i)) {
                *a += v;
            }
        }
        let k = span.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnOptions {
    /// Zero special-token columns and renormalize entity attention over content tokens.
    pub mask_special: bool,
}

impl Default for AttnOptions {
    fn default() -> Self {
        AttnOptions { mask_special: true }
    }
}

/// Read-only view of a tensor pack directory. Blobs are read on access.
#[derive(Debug, Clone)]
pub struct TensorPack {
    dir: PathBuf,
    index: PackIndex,
}

impl TensorPack {
    /// Reads the index and checks every referenced blob exists with the right size.
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: PackIndex = serde_json::from_str(&text)
            .map_err(|e| Error::malformed(index_path.display().to_string(), e.line(), e))?;
        let pack = TensorPack {
            dir: dir.to_path_buf(),
            index,
        };
        for (id, entry) in &pack.index.entries {
            entry.validate(id)?;
            for &layer in &entry.layers {
                let attn = dir.join(entry.attn_file(id, layer));
                check_blob(&attn, entry.n * entry.n, true)?;
                let emb = dir.join(entry.emb_file(id, layer));
                check_blob(&emb, entry.n * entry.d, false)?;
            }
        }
        Ok(pack)
    }

    pub fn len(&self) -> usize {
        self.index.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.index.entries.keys().map(String::as_str)
    }

    pub fn entry(&self, id: &str) -> Option<&PackEntry> {
        self.index.entries.get(id)
    }

    pub fn manifest(&self) -> Option<&serde_json::Value> {
        self.index.manifest.as_ref()
    }

    fn entry_for(&self, id: &str, layer: u32) -> Result<&PackEntry> {
        let entry = self.entry(id).ok_or_else(|| Error::MissingRecord(id.to_string()))?;
        if !entry.layers.contains(&layer) {
            return Err(Error::MissingRecord(format!("{id} (layer {layer})")));
        }
        Ok(entry)
    }

    pub fn attention(&self, id: &str, layer: u32) -> Result<AttentionRecord> {
        let entry = self.entry_for(id, layer)?;
        let weights = read_blob(&self.dir.join(entry.attn_file(id, layer)), entry.n * entry.n)?;
        AttentionRecord::new(
            id,
            layer,
            entry.n,
            weights,
            entry.special_mask.iter().map(|&m| m != 0).collect(),
            entry.tok_e1,
            entry.tok_e2,
        )
    }

    pub fn embeddings(&self, id: &str, layer: u32) -> Result<EmbeddingRecord> {
        let entry = self.entry_for(id, layer)?;
        let path = self.dir.join(entry.emb_file(id, layer));
        let values = read_blob(&path, entry.n * entry.d)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(path.display().to_string()));
        }
        Ok(EmbeddingRecord {
            sentence_id: id.to_string(),
            layer,
            n: entry.n,
            d: entry.d,
            values,
        })
    }

    /// Highest layer of `id` that has an embedding blob.
    pub fn last_embedding_layer(&self, id: &str) -> Option<u32> {
        let entry = self.entry(id)?;
        entry
            .layers
            .iter()
            .copied()
            .filter(|&l| self.dir.join(entry.emb_file(id, l)).exists())
            .max()
    }
}

fn check_blob(path: &Path, floats: usize, required: bool) -> Result<()> {
    match fs::metadata(path) {
        Ok(meta) => {
            if meta.len() != 4 * floats as u64 {
                return Err(Error::SizeMismatch(format!(
                    "{}: {} bytes, expected {}",
                    path.display(),
                    meta.len(),
                    4 * floats
                )));
            }
            Ok(())
        }
        Err(_) if !required => Ok(()),
        Err(e) => Err(Error::Invalid(format!("missing blob {}: {e}", path.display()))),
    }
}

fn read_blob(path: &Path, floats: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * floats {
        return Err(Error::SizeMismatch(path.display().to_string()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

fn write_blob(path: &Path, values: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for &v in values {
        out.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Incrementally writes a tensor pack in the format [`TensorPack::open`] reads.
#[derive(Debug)]
pub struct PackWriter {
    dir: PathBuf,
    index: PackIndex,
}

impl PackWriter {
    pub fn create(dir: &Path, manifest: Option<serde_json::Value>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(PackWriter {
            dir: dir.to_path_buf(),
            index: PackIndex {
                manifest,
                entries: BTreeMap::new(),
            },
        })
    }

    /// Adds one sentence. `layers` pairs each layer with its attention matrix
    /// and optional embedding matrix (row-major).
    pub fn add(
        &mut self,
        id: &str,
        special_mask: &[bool],
        tok_e1: Span,
        tok_e2: Span,
        d: usize,
        layers: &[(u32, Vec<f64>, Option<Vec<f64>>)],
    ) -> Result<()> {
        let n = special_mask.len();
        let entry = PackEntry {
            n,
            d,
            layers: layers.iter().map(|l| l.0).collect(),
            files: None,
            special_mask: special_mask.iter().map(|&m| u8::from(m)).collect(),
            tok_e1,
            tok_e2,
        };
        entry.validate(id)?;
        for (layer, attn, emb) in layers {
            if attn.len() != n * n {
                return Err(Error::SizeMismatch(format!("{id} layer {layer} attention")));
            }
            write_blob(&self.dir.join(entry.attn_file(id, *layer)), attn)?;
            if let Some(emb) = emb {
                if emb.len() != n * d {
                    return Err(Error::SizeMismatch(format!("{id} layer {layer} embeddings")));
                }
                write_blob(&self.dir.join(entry.emb_file(id, *layer)), emb)?;
            }
        }
        if self.index.entries.insert(id.to_string(), entry).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join("index.json");
        let text = serde_json::to_string_pretty(&self.index).map_err(|e| Error::Invalid(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.dir)
    }
}

/// Mean of the attention rows covering `span`, optionally with special
/// columns zeroed and the result renormalized.
pub fn entity_attention(rec: &AttentionRecord, span: Span, opts: &AttnOptions) -> Result<Vec<f64>> {
    if !span.fits(rec.n) {
        return Err(Error::SpanOutOfBounds {
            id: rec.sentence_id.clone(),
            span: span.to_string(),
            len: rec.n,
        });
    }
    let mut acc = vec![0.0; rec.n];
    for i in span.indices() {
        for (a, w) in acc.iter_mut().zip(rec.row(i)) {
            *a += w;
        }
    }
    let k = span.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    if opts.mask_special {
        for (a, &m) in acc.iter_mut().zip(&rec.special_mask) {
            if m {
                *a = 0.0;
            }
        }
        if rec.special_mask.iter().any(|&m| m) {
            let total: f64 = acc.iter().sum();
            if total <= 0.0 {
                return Err(Error::Numerical(format!(
                    "{}: entity attention is entirely on special tokens",
                    rec.sentence_id
                )));
            }
            acc.iter_mut().for_each(|a| *a /= total);
        }
    }
    Ok(acc)
}

/// Normalized relevance of each token to an entity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextDistribution {
    pub weights: Vec<f64>,
    /// Set when the two attention vectors share no mass; weights are then uniform.
    pub degenerate: bool,
}

impl ContextDistribution {
    pub fn max(&self) -> f64 {
        self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

/// Hadamard product of the two vectors divided by their dot product.
pub fn localized_context_distribution(a1: &[f64], a2: &[f64]) -> ContextDistribution {
    assert_eq!(a1.len(), a2.len(), "attention vectors differ in length");
    let product: Vec<f64> = a1.iter().zip(a2).map(|(x, y)| x * y).collect();
    let dot: f64 = product.iter().sum();
    if dot > 0.0 {
        ContextDistribution {
            weights: product.into_iter().map(|p| p / dot).collect(),
            degenerate: false,
        }
    } else {
        let n = a1.len().max(1) as f64;
        ContextDistribution {
            weights: vec![1.0 / n; a1.len()],
            degenerate: true,
        }
    }
}

pub fn context_distribution(rec: &AttentionRecord, opts: &AttnOptions) -> Result<ContextDistribution> {
    let a1 = entity_attention(rec, rec.tok_e1, opts)?;
    let a2 = entity_attention(rec, rec.tok_e2, opts)?;
    Ok(localized_context_distribution(&a1, &a2))
}

/// `KL(p || q)` in nats, with `0 ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Argument(format!(
            "distributions differ in length ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    for (name, dist) in [("p", p), ("q", q)] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE || dist.iter().any(|&x| x < 0.0) {
            return Err(Error::Argument(format!("{name} is not a distribution (sum {sum})")));
        }
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Numerical("infinite divergence: q is zero where p is positive".into()));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    // Rounding can leave a tiny negative value for p == q.
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnMethod {
    Picmi,
    PicmiUp,
    Conex,
}

impl AttnMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "picmi" => Some(AttnMethod::Picmi),
            "picmi-up" | "picmi_up" | "picmiup" => Some(AttnMethod::PicmiUp),
            "conex" => Some(AttnMethod::Conex),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttnMethod::Picmi => "picmi",
            AttnMethod::PicmiUp => "picmi-up",
            AttnMethod::Conex => "conex",
        }
    }

    /// Threshold grid used when none is given.
    pub fn default_range(self) -> ThresholdRange {
        match self {
            AttnMethod::Picmi => ThresholdRange::new(0.3, 0.7, 0.05),
            AttnMethod::PicmiUp => ThresholdRange::new(0.2, 0.6, 0.05),
            AttnMethod::Conex => ThresholdRange::new(0.05, 0.14, 0.01),
        }
    }
}

/// The statistic each method compares against its threshold, or `None`
/// when the context distribution is degenerate (always predicted negative).
pub fn method_score(rec: &AttentionRecord, method: AttnMethod, opts: &AttnOptions) -> Result<Option<f64>> {
    let a1 = entity_attention(rec, rec.tok_e1, opts)?;
    let a2 = entity_attention(rec, rec.tok_e2, opts)?;
    let dist = localized_context_distribution(&a1, &a2);
    if dist.degenerate {
        log::warn!("{}: degenerate context distribution", rec.sentence_id);
        return Ok(None);
    }
    let score = match method {
        AttnMethod::Picmi => dist.max(),
        AttnMethod::PicmiUp => {
            let top = dist.argmax();
            (a1[top] + a2[top]) / 2.0
        }
        AttnMethod::Conex => {
            let m = rec.content_count(opts) as f64;
            let uniform: Vec<f64> = (0..rec.n)
                .map(|i| {
                    if opts.mask_special && rec.special_mask[i] {
                        0.0
                    } else {
                        1.0 / m
                    }
                })
                .collect();
            kl_divergence(&dist.weights, &uniform)?
        }
    };
    Ok(Some(score))
}

fn decide(score: Option<f64>, threshold: f64) -> Label {
    Label::from_sign(score.is_some_and(|s| s >= threshold))
}

pub fn picmi(rec: &AttentionRecord, threshold: f64, opts: &AttnOptions) -> Result<Label> {
    Ok(decide(method_score(rec, AttnMethod::Picmi, opts)?, threshold))
}

pub fn picmi_up(rec: &AttentionRecord, threshold: f64, opts: &AttnOptions) -> Result<Label> {
    Ok(decide(method_score(rec, AttnMethod::PicmiUp, opts)?, threshold))
}

pub fn conex(rec: &AttentionRecord, threshold: f64, opts: &AttnOptions) -> Result<Label> {
    Ok(decide(method_score(rec, AttnMethod::Conex, opts)?, threshold))
}

/// Inclusive arithmetic threshold grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl ThresholdRange {
    pub fn new(lo: f64, hi: f64, step: f64) -> Self {
        ThresholdRange { lo, hi, step }
    }

    pub fn thresholds(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.hi >= self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Argument(format!(
                "invalid threshold range lo={} hi={} step={}",
                self.lo, self.hi, self.step
            )));
        }
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        // Rounding to 1e-10 keeps grid points such as 0.35 printable as-is.
        Ok((0..count)
            .map(|i| ((self.lo + i as f64 * self.step) * 1e10).round() / 1e10)
            .collect())
    }
}

/// Method statistic for every corpus record at `layer`.
pub fn score_corpus(
    method: AttnMethod,
    corpus: &Corpus,
    pack: &TensorPack,
    layer: u32,
    opts: &AttnOptions,
) -> Result<Vec<Option<f64>>> {
    corpus
        .records()
        .par_iter()
        .map(|rec| method_score(&pack.attention(&rec.id, layer)?, method, opts))
        .collect()
}

pub fn predict_corpus(
    method: AttnMethod,
    corpus: &Corpus,
    pack: &TensorPack,
    layer: u32,
    threshold: f64,
    opts: &AttnOptions,
) -> Result<Vec<Label>> {
    Ok(score_corpus(method, corpus, pack, layer, opts)?
        .into_iter()
        .map(|s| decide(s, threshold))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub metrics: Metrics,
}

/// Metrics at every threshold of `range`, ascending.
pub fn sweep_thresholds(
    method: AttnMethod,
    corpus: &Corpus,
    pack: &TensorPack,
    layer: u32,
    range: &ThresholdRange,
    opts: &AttnOptions,
) -> Result<Vec<SweepRow>> {
    let thresholds = range.thresholds()?;
    let golds = corpus.gold_labels()?;
    let scores = score_corpus(method, corpus, pack, layer, opts)?;
    thresholds
        .into_iter()
        .map(|t| {
            let preds: Vec<Label> = scores.iter().map(|&s| decide(s, t)).collect();
            Ok(SweepRow {
                threshold: t,
                metrics: eval::score_labels(&preds, &golds)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_matrix(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n * n]
    }

    #[test]
    fn entity_attention_single_row_and_mean() {
        let mut w = uniform_matrix(4);
        w[..4].copy_from_slice(&[0.5, 0.5, 0.0, 0.0]);
        w[4..8].copy_from_slice(&[0.5, 0.0, 0.5, 0.0]);
        let rec = AttentionRecord::plain(4, w, Span::new(0, 1), Span::single(3)).unwrap();
        let opts = AttnOptions::default();
        assert_eq!(entity_attention(&rec, Span::single(0), &opts).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(entity_attention(&rec, Span::new(0, 1), &opts).unwrap(), vec![0.5, 0.25, 0.25, 0.0]);
        let uni = AttentionRecord::plain(4, uniform_matrix(4), Span::new(0, 1), Span::single(3)).unwrap();
        assert_eq!(entity_attention(&uni, Span::new(0, 1), &opts).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn masking_renormalizes_and_errors_when_empty() {
        // token 0 is special; row 1 puts half its mass there.
        let w = vec![
            1.0, 0.0, 0.0, //
            0.5, 0.25, 0.25, //
            1.0, 0.0, 0.0,
        ];
        let rec = AttentionRecord::new("m", 0, 3, w, vec![true, false, false], Span::single(1), Span::single(2))
            .unwrap();
        let a = entity_attention(&rec, Span::single(1), &AttnOptions::default()).unwrap();
        assert_eq!(a, vec![0.0, 0.5, 0.5]);
        let err = entity_attention(&rec, Span::single(2), &AttnOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        let raw = entity_attention(&rec, Span::single(2), &AttnOptions { mask_special: false }).unwrap();
        assert_eq!(raw, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn context_distribution_examples() {
        let d = localized_context_distribution(&[0.5, 0.5, 0.0, 0.0], &[0.5, 0.0, 0.5, 0.0]);
        assert_eq!(d.weights, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(!d.degenerate);
        let d = localized_context_distribution(&[0.25; 4], &[0.25; 4]);
        assert_eq!(d.weights, vec![0.25; 4]);
        let d = localized_context_distribution(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(d.weights, vec![0.5, 0.5]);
        assert!(d.degenerate);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.25; 4], &[0.25; 4]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = kl_divergence(&[0.7, 0.3], &[0.5, 0.5]).unwrap();
        assert!((v - 0.082282).abs() < 1e-6, "{v}");
        assert!(matches!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Numerical(_))));
        assert!(kl_divergence(&[0.5, 0.5], &[1.0 / 3.0; 3]).is_err());
    }

    /// Record whose context distribution is exactly `l`: e1 (token 0) attends
    /// with `l`, e2 (token 1) attends uniformly.
    fn record_with_distribution(l: &[f64]) -> AttentionRecord {
        let n = l.len();
        let mut w = uniform_matrix(n);
        w[..n].copy_from_slice(l);
        AttentionRecord::plain(n, w, Span::single(0), Span::single(1)).unwrap()
    }

    #[test]
    fn picmi_thresholds() {
        let rec = record_with_distribution(&[0.1, 0.7, 0.2]);
        let opts = AttnOptions::default();
        let dist = context_distribution(&rec, &opts).unwrap();
        assert!((dist.max() - 0.7).abs() < 1e-12);
        assert_eq!(picmi(&rec, 0.5, &opts).unwrap(), Label::Positive);
        assert_eq!(picmi(&rec, 0.75, &opts).unwrap(), Label::Negative);
        let point = record_with_distribution(&[1.0, 0.0, 0.0]);
        assert_eq!(picmi(&point, 1.0, &opts).unwrap(), Label::Positive);
    }

    #[test]
    fn picmi_up_uses_entity_scores_at_argmax() {
        // n = 3, e1 = 0, e2 = 1; column 2 dominates the product.
        let w = vec![
            0.2, 0.2, 0.6, //
            0.4, 0.4, 0.2, //
            1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0,
        ];
        let rec = AttentionRecord::plain(3, w, Span::single(0), Span::single(1)).unwrap();
        let opts = AttnOptions::default();
        // products 0.08, 0.08, 0.12 -> argmax 2, mean(0.6, 0.2) = 0.4
        assert_eq!(context_distribution(&rec, &opts).unwrap().argmax(), 2);
        let s = method_score(&rec, AttnMethod::PicmiUp, &opts).unwrap().unwrap();
        assert!((s - 0.4).abs() < 1e-12);
        assert_eq!(picmi_up(&rec, 0.35, &opts).unwrap(), Label::Positive);
        assert_eq!(picmi_up(&rec, 0.45, &opts).unwrap(), Label::Negative);
    }

    #[test]
    fn picmi_up_boundary_is_inclusive() {
        // e1 row gives 0.4 and e2 row 0.2 at the argmax column 0.
        let w = vec![
            0.4, 0.3, 0.3, //
            0.2, 0.4, 0.4, //
            1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0,
        ];
        let rec = AttentionRecord::plain(3, w, Span::single(0), Span::single(1)).unwrap();
        let opts = AttnOptions::default();
        // products 0.08, 0.12, 0.12 -> argmax 1 (lowest index of the tie): mean(0.3,0.4)
        let s = method_score(&rec, AttnMethod::PicmiUp, &opts).unwrap().unwrap();
        assert!((s - 0.35).abs() < 1e-12);
        assert_eq!(decide(Some((0.4 + 0.2) / 2.0), 0.3), Label::Positive);
        assert_eq!(decide(Some(0.1), 0.2), Label::Negative);
    }

    #[test]
    fn conex_examples() {
        let opts = AttnOptions::default();
        let uniform = AttentionRecord::plain(4, uniform_matrix(4), Span::single(0), Span::single(1)).unwrap();
        assert_eq!(conex(&uniform, 1e-9, &opts).unwrap(), Label::Negative);

        let point = record_with_distribution(&[1.0, 0.0, 0.0, 0.0]);
        let s = method_score(&point, AttnMethod::Conex, &opts).unwrap().unwrap();
        assert!((s - 4f64.ln()).abs() < 1e-12);
        assert_eq!(conex(&point, 0.1, &opts).unwrap(), Label::Positive);

        let graded = record_with_distribution(&[0.4, 0.3, 0.2, 0.1]);
        let s = method_score(&graded, AttnMethod::Conex, &opts).unwrap().unwrap();
        assert!((s - 0.106440).abs() < 1e-5, "{s}");
        assert_eq!(conex(&graded, 0.05, &opts).unwrap(), Label::Positive);
        assert_eq!(conex(&graded, 0.14, &opts).unwrap(), Label::Negative);
    }

    #[test]
    fn conex_uniform_reference_excludes_special_tokens() {
        // Special token 3 receives no mass; over the 3 content tokens the
        // distribution is uniform, so divergence is zero.
        let third = 1.0 / 3.0;
        let w = vec![
            third, third, third, 0.0, //
            third, third, third, 0.0, //
            third, third, third, 0.0, //
            0.25, 0.25, 0.25, 0.25,
        ];
        let rec = AttentionRecord::new("s", 0, 4, w, vec![false, false, false, true], Span::single(0), Span::single(1))
            .unwrap();
        let s = method_score(&rec, AttnMethod::Conex, &AttnOptions::default()).unwrap().unwrap();
        assert!(s.abs() < 1e-12, "{s}");
    }

    #[test]
    fn degenerate_distribution_predicts_negative() {
        let w = vec![
            1.0, 0.0, //
            0.0, 1.0,
        ];
        let rec = AttentionRecord::plain(2, w, Span::single(0), Span::single(1)).unwrap();
        let opts = AttnOptions::default();
        assert!(context_distribution(&rec, &opts).unwrap().degenerate);
        assert_eq!(picmi(&rec, 0.1, &opts).unwrap(), Label::Negative);
        assert_eq!(picmi_up(&rec, 0.1, &opts).unwrap(), Label::Negative);
        assert_eq!(conex(&rec, 0.01, &opts).unwrap(), Label::Negative);
    }

    #[test]
    fn threshold_grids() {
        assert_eq!(AttnMethod::Picmi.default_range().thresholds().unwrap().len(), 9);
        assert_eq!(AttnMethod::PicmiUp.default_range().thresholds().unwrap().len(), 9);
        let conex = AttnMethod::Conex.default_range().thresholds().unwrap();
        assert_eq!(conex.len(), 10);
        assert_eq!(conex[0], 0.05);
        assert_eq!(conex[9], 0.14);
        assert!(ThresholdRange::new(0.5, 0.1, 0.1).thresholds().is_err());
    }

    #[test]
    fn rejects_bad_rows() {
        let err = AttentionRecord::plain(2, vec![0.5, 0.4, 0.5, 0.5], Span::single(0), Span::single(1)).unwrap_err();
        assert!(err.to_string().contains("sums to"));
        let err =
            AttentionRecord::plain(2, vec![f64::NAN, 0.5, 0.5, 0.5], Span::single(0), Span::single(1)).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }
}
