//! Pose-aware transductive hard-negative mining.
//!
//! Videos in a batch are split into similar / dissimilar pairs by the cosine
//! of their embeddings against a threshold `p`. A video's negatives are drawn
//! only from the positives of its dissimilar batchmates, never from its own
//! positives. Similarity computations are counted so the cost can be checked
//! against `0.5·b² + 2·b·c`.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::cosine;

/// One video of a mining batch. Items are catalog indices.
#[derive(Clone, Debug)]
pub struct MiningVideo {
    pub video_id: String,
    pub embedding: Vec<f64>,
    pub positives: BTreeSet<usize>,
}

#[derive(Clone, Debug)]
pub struct MiningBatch {
    pub videos: Vec<MiningVideo>,
    pub threshold: f64,
    pub n_neg: usize,
}

impl MiningBatch {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// For each video, the indices of batchmates whose cosine is `<= threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub dissimilar: Vec<Vec<usize>>,
    pub pair_sims: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningResult {
    pub negatives: Vec<Vec<usize>>,
    /// Whether a video had no dissimilar batchmate with usable items and fell
    /// back to the global catalog.
    pub used_fallback: Vec<bool>,
    pub pair_sims: usize,
    pub item_sims: usize,
}

pub fn partition_by_similarity(batch: &MiningBatch) -> Result<Partition> {
    let b = batch.len();
    let mut dissimilar = vec![Vec::new(); b];
    let mut pair_sims = 0;
    for u in 0..b {
        for v in u + 1..b {
            let c = cosine(&batch.videos[u].embedding, &batch.videos[v].embedding)?;
            pair_sims += 1;
            if c <= batch.threshold {
                dissimilar[u].push(v);
                dissimilar[v].push(u);
            }
        }
    }
    for d in &mut dissimilar {
        d.sort_unstable();
    }
    Ok(Partition { dissimilar, pair_sims })
}

/// Draw up to `n_neg` negatives per video. `catalog` lists every item index
/// eligible for the fallback draw.
pub fn sample_hard_negatives(
    batch: &MiningBatch,
    partition: &Partition,
    catalog: &[usize],
    rng: &mut impl Rng,
) -> Result<MiningResult> {
    if partition.dissimilar.len() != batch.len() {
        return Err(Error::Mining(format!(
            "partition covers {} videos, batch has {}",
            partition.dissimilar.len(),
            batch.len()
        )));
    }
    let mut negatives = Vec::with_capacity(batch.len());
    let mut used_fallback = Vec::with_capacity(batch.len());
    let mut item_sims = 0;
    for (v, video) in batch.videos.iter().enumerate() {
        let own = &video.positives;
        let pool: Vec<usize> = partition.dissimilar[v]
            .iter()
            .flat_map(|&u| batch.videos[u].positives.iter().copied())
            .filter(|i| !own.contains(i))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let (pool, fallback) = if pool.is_empty() {
            let unique: BTreeSet<usize> = catalog.iter().copied().collect();
            let eligible: Vec<usize> = unique.iter().copied().filter(|i| !own.contains(i)).collect();
            if unique.len() < own.len() + 1 || eligible.is_empty() {
                return Err(Error::CatalogExhausted(format!(
                    "video {} has {} positives and the catalog only {} items",
                    video.video_id,
                    own.len(),
                    unique.len()
                )));
            }
            (eligible, true)
        } else {
            (pool, false)
        };
        let take = batch.n_neg.min(pool.len());
        let mut picked: Vec<usize> = sample(rng, pool.len(), take).into_iter().map(|j| pool[j]).collect();
        picked.sort_unstable();
        item_sims += own.len() + picked.len();
        negatives.push(picked);
        used_fallback.push(fallback);
    }
    Ok(MiningResult {
        negatives,
        used_fallback,
        pair_sims: partition.pair_sims,
        item_sims,
    })
}

/// Partition then sample in one call.
pub fn mine(batch: &MiningBatch, catalog: &[usize], rng: &mut impl Rng) -> Result<MiningResult> {
    let partition = partition_by_similarity(batch)?;
    sample_hard_negatives(batch, &partition, catalog, rng)
}

/// Classic in-batch hard-negative selection used as a cost baseline: every
/// other video's positive is scored against the anchor and kept when its
/// triplet term `sim(neg) − min sim(pos)` exceeds `loss_threshold`.
pub fn traditional_mining(
    batch: &MiningBatch,
    score: impl Fn(usize, usize) -> Result<f64>,
    loss_threshold: f64,
) -> Result<MiningResult> {
    let mut negatives = Vec::with_capacity(batch.len());
    let mut item_sims = 0;
    for (v, video) in batch.videos.iter().enumerate() {
        let mut min_pos = f64::INFINITY;
        for &i in &video.positives {
            min_pos = min_pos.min(score(v, i)?);
            item_sims += 1;
        }
        let mut picked = Vec::new();
        for (u, other) in batch.videos.iter().enumerate() {
            if u == v {
                continue;
            }
            for &i in &other.positives {
                let s = score(v, i)?;
                item_sims += 1;
                if !video.positives.contains(&i) && s - min_pos > loss_threshold {
                    picked.push(i);
                }
            }
        }
        picked.sort_unstable();
        picked.dedup();
        negatives.push(picked);
    }
    Ok(MiningResult {
        used_fallback: vec![false; batch.len()],
        negatives,
        pair_sims: 0,
        item_sims,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub measured: usize,
    pub bound: f64,
    pub within_bound: bool,
}

/// `0.5·b² + 2·b·c`.
pub fn complexity_bound(b: usize, c: f64) -> f64 {
    0.5 * (b * b) as f64 + 2.0 * b as f64 * c
}

/// Mean per-video count of positives plus mined negatives.
pub fn mean_items_per_video(batch: &MiningBatch, result: &MiningResult) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: usize = batch
        .videos
        .iter()
        .zip(&result.negatives)
        .map(|(v, n)| v.positives.len() + n.len())
        .sum();
    total as f64 / batch.len() as f64
}

pub fn complexity_report(result: &MiningResult, b: usize, c: f64) -> ComplexityReport {
    let measured = result.pair_sims + result.item_sims;
    let bound = complexity_bound(b, c);
    ComplexityReport {
        measured,
        bound,
        within_bound: measured as f64 <= bound,
    }
}
