//! Negative minibatch selection.
//!
//! The pool holds (id, classification score) pairs; every strategy maps a
//! pool and a count to sample ids. The main strategy walks a comb of
//! m equally spaced pointers over the cumulative score line, which pins
//! each entry's selection count to floor or ceil of its expected value
//! m*s_j/S while still being random in the offset. The alternatives are
//! the comparison baselines: uniform without replacement, closest to the
//! decision boundary, and max-of-random-subset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Rng;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("empty pool")]
    EmptyPool,
    #[error("bad mining argument: {0}")]
    BadArgument(String),
    #[error("pool score at index {index} is invalid ({value})")]
    BadScore { index: usize, value: f64 },
}

// ------------------------------------------------------------------- pool --

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolEntry {
    pub id: u64,
    pub score: f64,
}

/// Scored negative pool. Scores are nonnegative and finite; the running
/// sum is kept alongside so spacing needs no rescan.
#[derive(Clone, Debug, Default)]
pub struct ScoredPool {
    entries: Vec<PoolEntry>,
    score_sum: f64,
}

impl ScoredPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(
        entries: impl IntoIterator<Item = (u64, f64)>,
    ) -> Result<Self, MiningError> {
        let mut pool = Self::new();
        for (id, score) in entries {
            pool.push(id, score)?;
        }
        Ok(pool)
    }

    pub fn push(&mut self, id: u64, score: f64) -> Result<(), MiningError> {
        if !score.is_finite() || score < 0.0 {
            return Err(MiningError::BadScore { index: self.entries.len(), value: score });
        }
        self.entries.push(PoolEntry { id, score });
        self.score_sum += score;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn score_sum(&self) -> f64 {
        self.score_sum
    }
}

// -------------------------------------------------------------- selection --

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningStrategy {
    Sunm,
    Hmm,
    Grdy,
    Rand,
}

impl MiningStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MiningStrategy::Sunm => "sunm",
            MiningStrategy::Hmm => "hmm",
            MiningStrategy::Grdy => "grdy",
            MiningStrategy::Rand => "rand",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub ids: Vec<u64>,
    /// All-zero score sum: the comb degenerates, so ids were drawn
    /// uniformly instead of erroring mid-training.
    pub uniform_fallback: bool,
}

/// Stochastic universal sampling over the score line. Duplicates are
/// allowed by construction; per-trial counts are floor or ceil of
/// m*s_j/S, so zero-score entries are never selected.
pub fn sus_select(pool: &ScoredPool, m: usize, rng: &mut Rng) -> Result<Selection, MiningError> {
    if pool.is_empty() {
        return Err(MiningError::EmptyPool);
    }
    if m == 0 {
        return Err(MiningError::BadArgument("m = 0".into()));
    }
    if pool.score_sum() == 0.0 {
        let ids = (0..m).map(|_| pool.entries[rng.below(pool.len())].id).collect();
        return Ok(Selection { ids, uniform_fallback: true });
    }

    let spacing = pool.score_sum() / m as f64;
    let start = rng.range(0.0, spacing);
    let mut ids = Vec::with_capacity(m);
    let mut idx = 0;
    let mut cum = pool.entries[0].score;
    for i in 0..m {
        // pointers computed as start + i*spacing, not by accumulation, so
        // rounding drift cannot compound across the comb
        let ptr = start + i as f64 * spacing;
        while ptr >= cum && idx + 1 < pool.len() {
            idx += 1;
            cum += pool.entries[idx].score;
        }
        ids.push(pool.entries[idx].id);
    }
    Ok(Selection { ids, uniform_fallback: false })
}

/// Uniform without replacement.
pub fn rand_select(pool: &ScoredPool, m: usize, rng: &mut Rng) -> Result<Vec<u64>, MiningError> {
    if pool.is_empty() {
        return Err(MiningError::EmptyPool);
    }
    if m > pool.len() {
        return Err(MiningError::BadArgument(format!("m = {m} > pool size {}", pool.len())));
    }
    Ok(rng.sample_indices(pool.len(), m).into_iter().map(|i| pool.entries[i].id).collect())
}

/// The m entries with scores closest to the decision boundary 0.5, ties
/// broken toward the lower id.
pub fn grdy_select(pool: &ScoredPool, m: usize) -> Result<Vec<u64>, MiningError> {
    if pool.is_empty() {
        return Err(MiningError::EmptyPool);
    }
    if m > pool.len() {
        return Err(MiningError::BadArgument(format!("m = {m} > pool size {}", pool.len())));
    }
    let mut order: Vec<&PoolEntry> = pool.entries.iter().collect();
    order.sort_by(|a, b| {
        let (da, db) = ((a.score - 0.5).abs(), (b.score - 0.5).abs());
        da.partial_cmp(&db).unwrap().then(a.id.cmp(&b.id))
    });
    Ok(order[..m].iter().map(|e| e.id).collect())
}

/// For each of the m slots, draw a random subset and keep its top-scoring
/// member (lower id on score ties).
pub fn hmm_select(
    pool: &ScoredPool,
    m: usize,
    subset_size: usize,
    rng: &mut Rng,
) -> Result<Vec<u64>, MiningError> {
    if pool.is_empty() {
        return Err(MiningError::EmptyPool);
    }
    if subset_size == 0 {
        return Err(MiningError::BadArgument("subset_size = 0".into()));
    }
    let take = subset_size.min(pool.len());
    let mut ids = Vec::with_capacity(m);
    for _ in 0..m {
        let subset = rng.sample_indices(pool.len(), take);
        let best = subset
            .into_iter()
            .map(|i| &pool.entries[i])
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap().then(b.id.cmp(&a.id)))
            .unwrap();
        ids.push(best.id);
    }
    Ok(ids)
}

/// Strategy dispatch; `hmm_subset` only matters for [`MiningStrategy::Hmm`].
pub fn mine(
    strategy: MiningStrategy,
    pool: &ScoredPool,
    m: usize,
    hmm_subset: usize,
    rng: &mut Rng,
) -> Result<Selection, MiningError> {
    let ids = match strategy {
        MiningStrategy::Sunm => return sus_select(pool, m, rng),
        MiningStrategy::Hmm => hmm_select(pool, m, hmm_subset, rng)?,
        MiningStrategy::Grdy => grdy_select(pool, m)?,
        MiningStrategy::Rand => rand_select(pool, m, rng)?,
    };
    Ok(Selection { ids, uniform_fallback: false })
}

/// Collapses duplicate ids to (id, count), first appearance order. The
/// counts become per-sample loss weights so a comb double-hit keeps its
/// doubled influence without a degenerate batch.
pub fn dedup_with_counts(ids: &[u64]) -> Vec<(u64, usize)> {
    let mut out: Vec<(u64, usize)> = Vec::new();
    for &id in ids {
        match out.iter_mut().find(|(seen, _)| *seen == id) {
            Some((_, n)) => *n += 1,
            None => out.push((id, 1)),
        }
    }
    out
}

// ---------------------------------------------------------------- logging --

pub const LOG_HEADER: &str = "frame,strategy,ids";

/// One mining-log CSV row; ids joined by spaces to stay a single field.
pub fn log_row(frame: u64, strategy: MiningStrategy, ids: &[u64]) -> String {
    let joined: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    format!("{frame},{},{}", strategy.as_str(), joined.join(" "))
}
