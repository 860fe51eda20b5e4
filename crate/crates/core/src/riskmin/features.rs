//! Pair features: mean-pooled embeddings of the two entities, concatenated.

use crate::attnmap::TensorPack;
use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Feature rows indexed like the corpus they were built for. Records without
/// embeddings have no row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: Vec<Option<Vec<f64>>>,
}

impl FeatureTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_optional(rows.into_iter().map(Some).collect())
    }

    pub fn from_optional(rows: Vec<Option<Vec<f64>>>) -> Result<Self> {
        let dim = rows.iter().flatten().map(Vec::len).next().unwrap_or(0);
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                if r.len() != dim {
                    return Err(Error::SizeMismatch(format!("feature row {i} has length {}, expected {dim}", r.len())));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("feature row {i}")));
                }
            }
        }
        Ok(FeatureTable { dim, rows })
    }

    /// Builds `[mean(e1) ; mean(e2)]` for each corpus record present in the
    /// pack. `layer` defaults to the highest layer with embeddings.
    pub fn from_pack(pack: &TensorPack, corpus: &Corpus, layer: Option<u32>) -> Result<Self> {
        let rows = corpus
            .records()
            .iter()
            .map(|rec| {
                let Some(entry) = pack.entry(&rec.id) else {
                    return Ok(None);
                };
                let Some(l) = layer.or_else(|| pack.last_embedding_layer(&rec.id)) else {
                    return Ok(None);
                };
                let emb = pack.embeddings(&rec.id, l)?;
                let mut r = emb.mean_pool(entry.tok_e1);
                r.extend(emb.mean_pool(entry.tok_e2));
                Ok(Some(r))
            })
            .collect::<Result<Vec<_>>>()?;
        let skipped = rows.iter().filter(|r| r.is_none()).count();
        if skipped > 0 {
            log::warn!("{skipped} of {} records have no embeddings in the pack", rows.len());
        }
        Self::from_optional(rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.rows.get(index).and_then(|r| r.as_deref())
    }

    pub fn has(&self, index: usize) -> bool {
        self.get(index).is_some()
    }

    pub fn require(&self, index: usize) -> Result<&[f64]> {
        self.get(index)
            .ok_or_else(|| Error::MissingRecord(format!("features for record index {index}")))
    }

    /// Rows for `indices`, failing on the first missing one.
    pub fn gather(&self, indices: &[usize]) -> Result<Vec<&[f64]>> {
        indices.iter().map(|&i| self.require(i)).collect()
    }
}
