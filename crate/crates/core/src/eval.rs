//! Embedding index, cosine retrieval and mean Prec@1 over 16-track batches.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CliqueSet, PairSample};
use crate::seed;

/// Tracks per evaluation batch: 8 cover pairs.
pub const EVAL_BATCH_SIZE: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cosine distance of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding for track {track} contains non-finite values")]
    NonFinite { track: String },
    #[error("no embedding for track {track}")]
    MissingEmbedding { track: String },
    #[error("batch size must be even and at least 2, got {0}")]
    BadBatchSize(usize),
    #[error("evaluation pairs must be cover pairs; {a}/{b} is labelled 0")]
    NotACoverPair { a: String, b: String },
}

/// `1 - cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((1.0 - dot / (nu.sqrt() * nv.sqrt())).clamp(0.0, 2.0))
}

/// Track id to embedding vector. All vectors share one dimension and are
/// finite and nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, track: impl Into<String>, v: Vec<f64>) -> Result<(), EvalError> {
        let track = track.into();
        if v.len() != self.dim {
            return Err(EvalError::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EvalError::NonFinite { track });
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(EvalError::ZeroVector);
        }
        self.entries.insert(track, v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, track: &str) -> Option<&[f64]> {
        self.entries.get(track).map(Vec::as_slice)
    }

    fn require(&self, track: &str) -> Result<&[f64], EvalError> {
        self.get(track).ok_or_else(|| EvalError::MissingEmbedding {
            track: track.to_string(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Applies `f` to every vector (used for invariance checks).
    pub fn map_vectors(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self, EvalError> {
        let mut out = Self::new(self.dim);
        for (k, v) in &self.entries {
            out.insert(k.clone(), f(v))?;
        }
        Ok(out)
    }

    /// The `k` nearest other tracks to `query` by cosine distance, ties by id.
    pub fn nearest(&self, query: &str, k: usize) -> Result<Vec<(String, f64)>, EvalError> {
        let q = self.require(query)?;
        let mut scored = self
            .entries
            .iter()
            .filter(|(id, _)| id.as_str() != query)
            .map(|(id, v)| Ok((id.clone(), cosine_distance(q, v)?)))
            .collect::<Result<Vec<_>, EvalError>>()?;
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prec_at_1: f64,
    pub n_batches: usize,
    pub batch_size: usize,
    pub per_batch_scores: Vec<f64>,
    /// Pairs left over because they could not fill a batch.
    pub dropped_pairs: usize,
}

/// Groups cover pairs into batches of `batch_size / 2` pairs. Pairs are
/// shuffled by seed, then placed greedily so no batch repeats a track, nor a
/// clique when `cliques` is given. Leftovers that cannot fill a batch are
/// returned separately.
pub fn form_batches(
    pairs: &[PairSample],
    batch_size: usize,
    rng_seed: u64,
    cliques: Option<&CliqueSet>,
) -> Result<(Vec<Vec<PairSample>>, usize), EvalError> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(EvalError::BadBatchSize(batch_size));
    }
    if let Some(p) = pairs.iter().find(|p| !p.is_cover()) {
        return Err(EvalError::NotACoverPair {
            a: p.track_a.clone(),
            b: p.track_b.clone(),
        });
    }
    let per_batch = batch_size / 2;
    let mut pool: Vec<PairSample> = pairs.to_vec();
    pool.shuffle(&mut seed::rng(rng_seed));

    let group = |p: &PairSample| -> Option<String> {
        cliques.and_then(|cs| cs.clique_of(&p.track_a).map(str::to_string))
    };
    let mut batches = Vec::new();
    loop {
        let mut batch = Vec::with_capacity(per_batch);
        let mut tracks = HashSet::new();
        let mut groups = HashSet::new();
        let mut rest = Vec::with_capacity(pool.len());
        for p in pool.drain(..) {
            let g = group(&p);
            let fits = batch.len() < per_batch
                && !tracks.contains(&p.track_a)
                && !tracks.contains(&p.track_b)
                && g.as_ref().is_none_or(|g| !groups.contains(g));
            if fits {
                tracks.insert(p.track_a.clone());
                tracks.insert(p.track_b.clone());
                if let Some(g) = g {
                    groups.insert(g);
                }
                batch.push(p);
            } else {
                rest.push(p);
            }
        }
        if batch.len() < per_batch {
            let dropped = batch.len() + rest.len();
            return Ok((batches, dropped));
        }
        batches.push(batch);
        pool = rest;
    }
}

/// Scores pre-formed batches. Each track queries the other tracks of its
/// batch; it scores 1 when its nearest neighbour is its cover partner.
/// Equal distances resolve to the lexicographically smaller track id.
pub fn score_batches(
    index: &EmbeddingIndex,
    batches: &[Vec<PairSample>],
) -> Result<Vec<f64>, EvalError> {
    batches
        .iter()
        .map(|batch| {
            let mut members: Vec<(&str, &str)> = Vec::with_capacity(batch.len() * 2);
            for p in batch {
                members.push((&p.track_a, &p.track_b));
                members.push((&p.track_b, &p.track_a));
            }
            let vecs = members
                .iter()
                .map(|(t, _)| index.require(t))
                .collect::<Result<Vec<_>, _>>()?;
            let mut hits = 0usize;
            for (qi, (_, partner)) in members.iter().enumerate() {
                let mut best: Option<(f64, &str)> = None;
                for (ci, (cand, _)) in members.iter().enumerate() {
                    if ci == qi {
                        continue;
                    }
                    let d = cosine_distance(vecs[qi], vecs[ci])?;
                    let better = match best {
                        None => true,
                        Some((bd, bid)) => d < bd || (d == bd && *cand < bid),
                    };
                    if better {
                        best = Some((d, cand));
                    }
                }
                if best.map(|(_, id)| id) == Some(*partner) {
                    hits += 1;
                }
            }
            Ok(hits as f64 / members.len() as f64)
        })
        .collect()
}

fn report(scores: Vec<f64>, batch_size: usize, dropped: usize) -> EvalReport {
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    EvalReport {
        prec_at_1: mean,
        n_batches: scores.len(),
        batch_size,
        per_batch_scores: scores,
        dropped_pairs: dropped,
    }
}

/// Mean Prec@1 over batches of `batch_size` tracks drawn from cover pairs.
pub fn prec_at_1(
    index: &EmbeddingIndex,
    eval_pairs: &[PairSample],
    batch_size: usize,
    rng_seed: u64,
) -> Result<EvalReport, EvalError> {
    let (batches, dropped) = form_batches(eval_pairs, batch_size, rng_seed, None)?;
    Ok(report(score_batches(index, &batches)?, batch_size, dropped))
}

/// [`prec_at_1`] with batches that never hold two pairs from one clique, so
/// every query has exactly one cover in its batch.
pub fn prec_at_1_by_clique(
    index: &EmbeddingIndex,
    eval_pairs: &[PairSample],
    cliques: &CliqueSet,
    batch_size: usize,
    rng_seed: u64,
) -> Result<EvalReport, EvalError> {
    let (batches, dropped) = form_batches(eval_pairs, batch_size, rng_seed, Some(cliques))?;
    Ok(report(score_batches(index, &batches)?, batch_size, dropped))
}
