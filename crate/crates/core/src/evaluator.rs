//! Offline item index, top-k recommendation, ranking metrics and baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::item_encoder::{merge_factors_masked, ItemEmbedding, ItemRecord};
use crate::model::PoseRecModel;
use crate::numerics::{norm, Tensor, DEGENERATE_NORM};
use crate::trainer::{sliding_windows, train, TrainOptions};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// Precomputed item rows `concat_k(ω_k · ê_k)`; a video's score vector is
/// `M · concat_k(v̂_k)`.
#[derive(Clone, Debug)]
pub struct ItemIndex {
    pub ids: Vec<String>,
    pub rows: Tensor,
    pub k: usize,
    /// Items left out because a chunk of their embedding was degenerate.
    pub excluded: Vec<(String, String)>,
}

fn unit_chunks(v: &[f64], k: usize, what: &str) -> Result<Vec<f64>> {
    if k == 0 || !v.len().is_multiple_of(k) {
        return Err(Error::shape(format!("{what}: {} values in {k} chunks", v.len())));
    }
    let d = v.len() / k;
    let mut out = Vec::with_capacity(v.len());
    for c in v.chunks(d) {
        let n = norm(c);
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateVector {
                what: what.to_string(),
                norm: n,
            });
        }
        out.extend(c.iter().map(|x| x / n));
    }
    Ok(out)
}

impl ItemIndex {
    /// Build from embeddings and their contribution weights.
    pub fn from_embeddings(ids: Vec<String>, embeddings: &[ItemEmbedding], omegas: &[Vec<f64>]) -> Result<Self> {
        let k = omegas.first().map_or(1, Vec::len);
        let width = embeddings.first().map_or(0, |e| e.e_i.as_slice().len());
        let mut kept = Vec::new();
        let mut data = Vec::new();
        let mut excluded = Vec::new();
        for ((id, e), w) in ids.into_iter().zip(embeddings).zip(omegas) {
            match unit_chunks(e.e_i.as_slice(), k, &id) {
                Ok(u) => {
                    let d = u.len() / k;
                    data.extend(u.iter().enumerate().map(|(j, x)| w[j / d] * x));
                    kept.push(id);
                }
                Err(err) => excluded.push((id, err.to_string())),
            }
        }
        Ok(ItemIndex {
            rows: Tensor::matrix(kept.len(), width, data)?,
            ids: kept,
            k,
            excluded,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// One score per indexed item for a single window embedding.
    pub fn scores(&self, e_v: &[f64]) -> Result<Vec<f64>> {
        let v = unit_chunks(e_v, self.k, "video embedding")?;
        if v.len() != self.rows.cols() && !self.is_empty() {
            return Err(Error::shape(format!(
                "video width {} vs index width {}",
                v.len(),
                self.rows.cols()
            )));
        }
        Ok((0..self.len())
            .map(|i| self.rows.row(i).iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Mean of per-window score vectors.
    pub fn video_scores(&self, windows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Err(Error::Window { expected: 1, got: 0 });
        }
        let mut acc = vec![0.0; self.len()];
        for w in windows {
            for (a, s) in acc.iter_mut().zip(self.scores(w)?) {
                *a += s;
            }
        }
        let n = windows.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

pub fn build_item_index(model: &PoseRecModel, items: &[&ItemRecord], global_mask: &[bool]) -> Result<ItemIndex> {
    let emb = model.encode_items(items, global_mask)?;
    let omegas = emb.iter().map(|e| model.omega(&e.e_ic)).collect::<Result<Vec<_>>>()?;
    ItemIndex::from_embeddings(items.iter().map(|i| i.item_id.clone()).collect(), &emb, &omegas)
}

/// Indices sorted by descending score, ties by ascending id.
pub fn rank(scores: &[f64], ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub items: Vec<(String, f64)>,
    /// `n` exceeded the catalog size.
    pub truncated: bool,
}

pub fn recommend_from_scores(scores: &[f64], index: &ItemIndex, n: usize) -> Result<Recommendation> {
    if n == 0 {
        return Err(Error::Usage("--top must be at least 1".into()));
    }
    let order = rank(scores, &index.ids);
    let truncated = n > order.len();
    Ok(Recommendation {
        items: order
            .into_iter()
            .take(n)
            .map(|i| (index.ids[i].clone(), scores[i]))
            .collect(),
        truncated,
    })
}

/// Score every window of `frames` and recommend the top `n` items.
pub fn recommend(
    model: &PoseRecModel,
    index: &ItemIndex,
    frames: &crate::pose_encoder::PoseTrajectory,
    step: usize,
    n: usize,
) -> Result<Recommendation> {
    let windows = sliding_windows(frames, model.spec.window_len, step)?;
    if windows.is_empty() {
        return Err(Error::Window {
            expected: model.spec.window_len,
            got: frames.num_frames(),
        });
    }
    let refs: Vec<&Tensor> = windows.iter().collect();
    let emb = model.encode_windows(&refs)?;
    recommend_from_scores(&index.video_scores(&emb)?, index, n)
}

/// `|top-k ∩ positives| / |positives|`; `None` when there are no positives.
pub fn recall_at_k(ranking: &[usize], positives: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let hits = ranking.iter().take(k).filter(|i| positives.contains(i)).count();
    Some(hits as f64 / positives.len() as f64)
}

/// Binary-relevance NDCG@k.
pub fn ndcg_at_k(ranking: &[usize], positives: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| positives.contains(i))
        .map(|(j, _)| 1.0 / (j as f64 + 2.0).log2())
        .sum();
    let ideal: f64 = (0..k.min(positives.len())).map(|j| 1.0 / (j as f64 + 2.0).log2()).sum();
    Some(dcg / ideal)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Ins,
    Cat,
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ins" => Ok(Protocol::Ins),
            "cat" => Ok(Protocol::Cat),
            other => Err(Error::Usage(format!("unknown protocol {other:?}; use ins or cat"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Ins => "ins",
            Protocol::Cat => "cat",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub protocol: Protocol,
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub model: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Videos without positives or without a full window.
    pub skipped_videos: usize,
}

impl EvalReport {
    pub fn get(&self, model: &str, protocol: Protocol, k: usize) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.protocol == protocol && r.k == k)
    }

    pub fn recall(&self, model: &str, protocol: Protocol, k: usize) -> f64 {
        self.get(model, protocol, k).map_or(f64::NAN, |r| r.recall)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.skipped_videos = self.skipped_videos.max(other.skipped_videos);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol,k,recall,ndcg,model\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.protocol, r.k, r.recall, r.ndcg, r.model));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Average metrics over videos given a ranking per video.
fn summarize(
    protocol: Protocol,
    ks: &[usize],
    model: &str,
    per_video: &[(Vec<usize>, BTreeSet<usize>)],
    skipped: usize,
) -> EvalReport {
    let mut rows = Vec::new();
    for &k in ks {
        let (mut r, mut n, mut cnt) = (0.0, 0.0, 0usize);
        for (ranking, pos) in per_video {
            if let (Some(a), Some(b)) = (recall_at_k(ranking, pos, k), ndcg_at_k(ranking, pos, k)) {
                r += a;
                n += b;
                cnt += 1;
            }
        }
        let c = cnt.max(1) as f64;
        rows.push(EvalRow {
            protocol,
            k,
            recall: r / c,
            ndcg: n / c,
            model: model.to_string(),
        });
    }
    EvalReport {
        rows,
        skipped_videos: skipped,
    }
}

/// Candidates for one protocol: ids in index order and, for each catalog
/// item, its candidate index.
struct Candidates {
    ids: Vec<String>,
    of_item: Vec<Option<usize>>,
}

fn candidates(dataset: &Dataset, catalog: &[usize], protocol: Protocol) -> Candidates {
    let mut of_item = vec![None; dataset.items.len()];
    match protocol {
        Protocol::Ins => {
            let ids = catalog.iter().map(|&i| dataset.items[i].item_id.clone()).collect();
            for (c, &i) in catalog.iter().enumerate() {
                of_item[i] = Some(c);
            }
            Candidates { ids, of_item }
        }
        Protocol::Cat => {
            let cats: BTreeSet<&str> = catalog.iter().map(|&i| dataset.items[i].category.as_str()).collect();
            let ids: Vec<String> = cats.iter().map(|c| c.to_string()).collect();
            for &i in catalog {
                of_item[i] = ids.iter().position(|c| *c == dataset.items[i].category);
            }
            Candidates { ids, of_item }
        }
    }
}

/// Per-video positives in candidate space.
fn positives(video: &str, cands: &Candidates, labels: &BTreeMap<String, Vec<(usize, f64)>>) -> BTreeSet<usize> {
    labels
        .get(video)
        .into_iter()
        .flatten()
        .filter(|&&(_, s)| s > 0.0)
        .filter_map(|&(i, _)| cands.of_item[i])
        .collect()
}

/// Category index: the merged description is averaged over each category's
/// items, then projected; ω is recomputed from the averaged query.
pub fn build_category_index(
    model: &PoseRecModel,
    dataset: &Dataset,
    catalog: &[usize],
    global_mask: &[bool],
) -> Result<ItemIndex> {
    let w = model.store.value(model.item.factor_weights).data().to_vec();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in catalog {
        groups.entry(dataset.items[i].category.as_str()).or_default().push(i);
    }
    let mut ids = Vec::new();
    let mut emb = Vec::new();
    let mut omegas = Vec::new();
    for (cat, members) in groups {
        let mut mean = vec![0.0; model.spec.factor_dim];
        for &i in &members {
            let s = merge_factors_masked(&dataset.items[i], &w, global_mask)?;
            mean.iter_mut().zip(&s).for_each(|(m, x)| *m += x);
        }
        let n = members.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let e = model.item.embed_merged(&model.store, &mean, model.k())?;
        omegas.push(model.omega(&e.e_ic)?);
        emb.push(e);
        ids.push(cat.to_string());
    }
    ItemIndex::from_embeddings(ids, &emb, &omegas)
}

/// Scoring context shared by model and baseline evaluation.
pub struct EvalSet<'a> {
    pub dataset: &'a Dataset,
    /// Videos to evaluate.
    pub videos: &'a [String],
    /// Item indices eligible for ranking.
    pub catalog: &'a [usize],
    pub ks: &'a [usize],
}

/// Per-video (ranking, relevant set) pairs, skipped count, skipped ids.
type PerVideo = (Vec<(Vec<usize>, BTreeSet<usize>)>, usize, Vec<String>);

impl EvalSet<'_> {
    fn per_video<F>(&self, protocol: Protocol, mut ranking_for: F) -> Result<PerVideo>
    where
        F: FnMut(&str, &Candidates) -> Result<Option<Vec<usize>>>,
    {
        let labels = self.dataset.labels_by_video();
        let cands = candidates(self.dataset, self.catalog, protocol);
        let mut out = Vec::new();
        let mut skipped = 0;
        for v in self.videos {
            let pos = positives(v, &cands, &labels);
            if pos.is_empty() {
                skipped += 1;
                continue;
            }
            match ranking_for(v, &cands)? {
                Some(r) => out.push((r, pos)),
                None => skipped += 1,
            }
        }
        Ok((out, skipped, cands.ids))
    }
}

pub const MODEL_NAME: &str = "PoseRec";

pub fn evaluate(
    model: &PoseRecModel,
    set: &EvalSet,
    protocol: Protocol,
    window_step: usize,
    global_mask: &[bool],
) -> Result<EvalReport> {
    let items: Vec<&ItemRecord> = set.catalog.iter().map(|&i| &set.dataset.items[i]).collect();
    let index = match protocol {
        Protocol::Ins => build_item_index(model, &items, global_mask)?,
        Protocol::Cat => build_category_index(model, set.dataset, set.catalog, global_mask)?,
    };
    let poses: BTreeMap<&str, &crate::pose_encoder::PoseTrajectory> =
        set.dataset.poses.iter().map(|p| (p.video_id.as_str(), p)).collect();
    let (per_video, skipped, cand_ids) = set.per_video(protocol, |v, _| {
        let p = poses
            .get(v)
            .ok_or_else(|| Error::Data(format!("no poses for video {v}")))?;
        let windows = sliding_windows(p, model.spec.window_len, window_step)?;
        if windows.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&Tensor> = windows.iter().collect();
        let scores = index.video_scores(&model.encode_windows(&refs)?)?;
        Ok(Some(rank(&scores, &index.ids)))
    })?;
    // index ids equal candidate ids unless items were excluded
    let per_video = if index.ids == cand_ids {
        per_video
    } else {
        let pos_of: BTreeMap<&str, usize> = cand_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        per_video
            .into_iter()
            .map(|(r, p)| (r.into_iter().map(|i| pos_of[index.ids[i].as_str()]).collect(), p))
            .collect()
    };
    Ok(summarize(protocol, set.ks, MODEL_NAME, &per_video, skipped))
}

/// A uniformly random permutation per video.
pub fn evaluate_random(set: &EvalSet, protocol: Protocol, seed: u64) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (per_video, skipped, _) = set.per_video(protocol, |_, c| {
        let mut order: Vec<usize> = (0..c.ids.len()).collect();
        order.shuffle(&mut rng);
        Ok(Some(order))
    })?;
    Ok(summarize(protocol, set.ks, "Random", &per_video, skipped))
}

/// Rank by interaction count over `train_videos`.
pub fn evaluate_pop(set: &EvalSet, protocol: Protocol, train_videos: &[String]) -> Result<EvalReport> {
    let labels = set.dataset.labels_by_video();
    let cands = candidates(set.dataset, set.catalog, protocol);
    let mut counts = vec![0.0; cands.ids.len()];
    for v in train_videos {
        for &(i, s) in labels.get(v).into_iter().flatten() {
            if let (true, Some(c)) = (s > 0.0, cands.of_item[i]) {
                counts[c] += 1.0;
            }
        }
    }
    let order = rank(&counts, &cands.ids);
    let (per_video, skipped, _) = set.per_video(protocol, |_, _| Ok(Some(order.clone())))?;
    Ok(summarize(protocol, set.ks, "Pop", &per_video, skipped))
}

/// Configuration axis varied by [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Prototype count.
    K,
    /// Remove one factor per value (values are factor indices, or `all`).
    Factors,
    /// Fraction of the item catalog kept.
    Items,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(SweepAxis::K),
            "factors" | "factor_mask" => Ok(SweepAxis::Factors),
            "items" | "item_fraction" => Ok(SweepAxis::Items),
            other => Err(Error::Usage(format!(
                "unknown sweep axis {other:?}; use K, factors or items"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::K => "K",
            SweepAxis::Factors => "factors",
            SweepAxis::Items => "items",
        })
    }
}

/// One configuration of a sweep, labelled by its axis value.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: String,
    pub config: TrainConfig,
}

/// Expand `values` (comma separated) into configurations derived from `base`.
pub fn sweep_points(base: &TrainConfig, axis: SweepAxis, values: &str, factor_count: usize) -> Result<Vec<SweepPoint>> {
    let raw: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if raw.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let mut out = Vec::new();
    match axis {
        SweepAxis::K | SweepAxis::Items => {
            let key = if axis == SweepAxis::K { "k" } else { "item_fraction" };
            for v in raw {
                let mut config = base.clone();
                config.set(key, v)?;
                config.validate()?;
                out.push(SweepPoint {
                    value: v.to_string(),
                    config,
                });
            }
        }
        SweepAxis::Factors => {
            let removed: Vec<usize> = if raw == ["all"] {
                (0..factor_count).collect()
            } else {
                raw.iter()
                    .map(|v| {
                        v.parse::<usize>()
                            .ok()
                            .filter(|&f| f < factor_count)
                            .ok_or_else(|| Error::Usage(format!("factor index {v:?} is not in 0..{factor_count}")))
                    })
                    .collect::<Result<_>>()?
            };
            for f in removed {
                let mut config = base.clone();
                let mut mask = if base.factor_mask.is_empty() {
                    vec![true; factor_count]
                } else {
                    base.factor_mask.clone()
                };
                mask[f] = false;
                config.factor_mask = mask;
                config.validate()?;
                out.push(SweepPoint {
                    value: f.to_string(),
                    config,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub axis: String,
    /// `(axis value, row)` in sweep order.
    pub rows: Vec<(String, EvalRow)>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,value,protocol,k,recall,ndcg,model\n");
        for (v, r) in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.axis, v, r.protocol, r.k, r.recall, r.ndcg, r.model
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn recall(&self, value: &str, protocol: Protocol, k: usize) -> f64 {
        self.rows
            .iter()
            .find(|(v, r)| v == value && r.protocol == protocol && r.k == k && r.model == MODEL_NAME)
            .map_or(f64::NAN, |(_, r)| r.recall)
    }
}

/// Retrain once per sweep value on `split.train` and evaluate on `split.test`.
/// Each run writes into `out_dir/<axis>_<value>` when `out_dir` is set.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    dataset: &Dataset,
    split: &Split,
    axis: SweepAxis,
    points: &[SweepPoint],
    protocols: &[Protocol],
    ks: &[usize],
    out_dir: Option<&Path>,
    verbose: bool,
) -> Result<SweepReport> {
    let mut report = SweepReport {
        axis: axis.to_string(),
        rows: Vec::new(),
    };
    for p in points {
        if verbose {
            eprintln!("sweep {axis}={}", p.value);
        }
        let opts = TrainOptions {
            out_dir: out_dir.map(|d| d.join(format!("{axis}_{}", p.value))),
            validate: false,
            verbose,
        };
        let outcome = train(dataset, split, &p.config, &opts)?;
        let set = EvalSet {
            dataset,
            videos: &split.test,
            catalog: &outcome.catalog,
            ks,
        };
        for &protocol in protocols {
            let r = evaluate(
                &outcome.model,
                &set,
                protocol,
                p.config.window_step,
                &p.config.factor_mask,
            )?;
            report.rows.extend(r.rows.into_iter().map(|row| (p.value.clone(), row)));
        }
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        report.save(&d.join("sweep.csv"))?;
    }
    Ok(report)
}

/// Item rows then one row per prototype, as CSV with `k·chunk_dim` value
/// columns. Prototype `k` occupies chunk slot `k`; other slots are zero.
pub fn export_embeddings(
    model: &PoseRecModel,
    items: &[&ItemRecord],
    global_mask: &[bool],
    path: &Path,
) -> Result<usize> {
    let emb = model.encode_items(items, global_mask)?;
    let width = model.spec.embed_dim();
    let mut out = String::from("id,category");
    for j in 0..width {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    let mut rows = 0;
    let mut line = |id: &str, cat: &str, vals: &[f64]| {
        out.push_str(id);
        out.push(',');
        out.push_str(cat);
        for v in vals {
            out.push(',');
            out.push_str(&(*v as f32).to_string());
        }
        out.push('\n');
        rows += 1;
    };
    for (it, e) in items.iter().zip(&emb) {
        line(&it.item_id, &it.category, e.e_i.as_slice());
    }
    let d = model.spec.chunk_dim;
    for (k, r) in model.protos.rows(&model.store).into_iter().enumerate() {
        let mut vals = vec![0.0; width];
        vals[k * d..(k + 1) * d].copy_from_slice(r);
        line(&format!("__proto_{k}"), "__prototype", &vals);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ChunkedEmbedding;
    use crate::prototype::prototype_score;
    use rand::Rng;

    fn emb(rng: &mut ChaCha8Rng, width: usize, k: usize) -> ItemEmbedding {
        ItemEmbedding {
            e_i: ChunkedEmbedding::new((0..width).map(|_| rng.random_range(-1.0..1.0)).collect(), k).unwrap(),
            e_ic: vec![],
        }
    }

    fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn index_matches_direct_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 4;
        let items: Vec<ItemEmbedding> = (0..10).map(|_| emb(&mut rng, 32, k)).collect();
        let omegas: Vec<Vec<f64>> = (0..10).map(|_| simplex(&mut rng, k)).collect();
        let ids: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let index = ItemIndex::from_embeddings(ids, &items, &omegas).unwrap();
        for i in 0..10 {
            assert!(norm(index.rows.row(i)) <= 1.0 + 1e-12);
        }
        for _ in 0..20 {
            let v: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = index.scores(&v).unwrap();
            for i in 0..10 {
                let direct = prototype_score(items[i].e_i.as_slice(), &v, &omegas[i]).unwrap();
                assert!((s[i] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_items_are_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bad = emb(&mut rng, 8, 2);
        bad.e_i = ChunkedEmbedding::new(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], 2).unwrap();
        let good = emb(&mut rng, 8, 2);
        let index = ItemIndex::from_embeddings(
            vec!["bad".into(), "good".into()],
            &[bad, good],
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
        assert_eq!(index.ids, vec!["good".to_string()]);
        assert_eq!(index.excluded.len(), 1);
    }

    #[test]
    fn ranking_ties_and_prefix() {
        let ids: Vec<String> = ["b", "a", "c", "d"].iter().map(|s| s.to_string()).collect();
        assert_eq!(rank(&[0.5, 0.5, 0.9, 0.1], &ids), vec![2, 1, 0, 3]);
        let index = ItemIndex {
            ids: ids.clone(),
            rows: Tensor::zeros(&[4, 1]),
            k: 1,
            excluded: vec![],
        };
        let r = recommend_from_scores(&[0.5, 0.5, 0.9, 0.1], &index, 2).unwrap();
        assert_eq!(r.items.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), vec!["c", "a"]);
        let all = recommend_from_scores(&[0.5, 0.5, 0.9, 0.1], &index, 10).unwrap();
        assert!(all.truncated);
        assert_eq!(all.items.len(), 4);
        let one = ItemIndex {
            ids: vec!["only".into()],
            rows: Tensor::zeros(&[1, 1]),
            k: 1,
            excluded: vec![],
        };
        assert_eq!(recommend_from_scores(&[0.0], &one, 1).unwrap().items[0].0, "only");
    }

    #[test]
    fn metric_examples() {
        let pos1: BTreeSet<usize> = [0].into();
        assert_eq!(recall_at_k(&[0, 1, 2, 3, 4, 5], &pos1, 5), Some(1.0));
        assert_eq!(ndcg_at_k(&[0, 1, 2], &pos1, 5), Some(1.0));
        let pos_r2: BTreeSet<usize> = [1].into();
        assert!((ndcg_at_k(&[0, 1, 2], &pos_r2, 2).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-15);
        let pos2: BTreeSet<usize> = [1, 9].into();
        assert_eq!(recall_at_k(&[0, 1, 2, 3, 4, 9], &pos2, 5), Some(0.5));
        assert_eq!(recall_at_k(&[0], &BTreeSet::new(), 5), None);
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("INS".parse::<Protocol>().unwrap(), Protocol::Ins);
        assert!(matches!("bogus".parse::<Protocol>(), Err(Error::Usage(_))));
    }
}
