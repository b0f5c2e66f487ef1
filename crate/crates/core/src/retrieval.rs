//! Embedding database of named concepts with exact Euclidean top-k lookup.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::EmbeddingVector;
use crate::synthworld::{render_view, EmbeddingProvider};
use crate::taskgen::{Demonstration, TaskContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptRecord {
    pub name: String,
    pub info: String,
    pub embedding: EmbeddingVector,
    pub entity_id: u32,
}

/// Immutable index. Records are kept sorted by name so results never depend
/// on insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    records: Vec<ConceptRecord>,
    dim: usize,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[ConceptRecord] {
        &self.records
    }

    pub fn by_entity(&self, entity_id: u32) -> Option<&ConceptRecord> {
        self.records.iter().find(|r| r.entity_id == entity_id)
    }
}

pub fn build_index(mut records: Vec<ConceptRecord>) -> Result<RetrievalIndex> {
    let dim = records
        .first()
        .ok_or(Error::Empty("concept database"))?
        .embedding
        .dim();
    let mut seen = BTreeSet::new();
    for r in &records {
        if r.embedding.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.embedding.dim(),
            });
        }
        if !r.embedding.is_finite() {
            return Err(Error::NonFinite(format!("embedding of {}", r.name)));
        }
        if !seen.insert(r.name.as_str()) {
            return Err(Error::DuplicateName(r.name.clone()));
        }
    }
    records.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(RetrievalIndex { records, dim })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    /// Nearest distinct concepts, closest first.
    pub records: Vec<ConceptRecord>,
    pub distances: Vec<f64>,
    /// Set when `k` exceeded the index size and every record was returned.
    pub truncated: bool,
}

/// Global top-`k` distinct concepts over all query regions.
///
/// A concept's distance is its smallest distance to any region; ties go to
/// the lexicographically smaller name.
pub fn retrieve(
    index: &RetrievalIndex,
    queries: &[EmbeddingVector],
    k: usize,
) -> Result<Retrieved> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if queries.is_empty() {
        return Err(Error::Empty("query regions"));
    }
    for q in queries {
        if q.dim() != index.dim {
            return Err(Error::DimensionMismatch {
                expected: index.dim,
                got: q.dim(),
            });
        }
    }
    let mut scored: Vec<(f64, usize)> = index
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d = queries
                .iter()
                .map(|q| q.distance(&r.embedding))
                .fold(f64::INFINITY, f64::min);
            (d, i)
        })
        .collect();
    // Records are name-sorted, so the index breaks ties by name.
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let truncated = k > index.len();
    scored.truncate(k);
    Ok(Retrieved {
        records: scored
            .iter()
            .map(|&(_, i)| index.records[i].clone())
            .collect(),
        distances: scored.iter().map(|&(d, _)| d).collect(),
        truncated,
    })
}

/// Turns retrieved records into demonstrations, keeping retrieval order.
/// The reference view is not stored in the database, so it is left empty.
pub fn make_demonstrations(retrieved: &[ConceptRecord], limit: usize) -> Vec<Demonstration> {
    retrieved
        .iter()
        .take(limit)
        .map(|r| Demonstration {
            name: r.name.clone(),
            view: None,
            info: r.info.clone(),
        })
        .collect()
}

/// One record per entity, embedded from a noise-free reference view.
pub fn build_database(ctx: &TaskContext<'_>, seed: u64) -> Result<Vec<ConceptRecord>> {
    let cfg = &ctx.world.config;
    let provider = EmbeddingProvider::new(cfg);
    ctx.world
        .entities
        .iter()
        .map(|e| {
            let view = render_view(
                cfg,
                e,
                (cfg.width, cfg.height),
                cfg.scene_variation,
                crate::seed::derive(seed, &[u64::from(e.entity_id)]),
            )?;
            Ok(ConceptRecord {
                name: ctx.name(e.entity_id).to_string(),
                info: ctx.info(e),
                embedding: provider.embed(&view, 0.0, 0),
                entity_id: e.entity_id,
            })
        })
        .collect()
}

pub fn write_database<W: Write>(records: &[ConceptRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_database<R: BufRead>(r: R) -> Result<Vec<ConceptRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
