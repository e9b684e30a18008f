//! Windowed training loop with in-batch mining, Adam and checkpointing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::TrainConfig;
use crate::dataio::{generate_synthetic, Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalSet, Protocol, MODEL_NAME};
use crate::item_encoder::{ItemBatch, ItemRecord};
use crate::mining::{mine, MiningBatch, MiningVideo};
use crate::model::{ModelSpec, PoseRecModel};
use crate::numerics::{adam_step, gradcheck, AdamConfig, GradcheckOptions, GradcheckReport, Tape, Tensor, Var};
use crate::objective::{label_loss_on_tape, total_loss, triplet_loss_on_tape, LossBreakdown};
use crate::pose_encoder::{PoseTrajectory, SkeletonGraph};
use crate::prototype::score_on_tape;

pub const STEP_LOG_HEADER: &str = "epoch,step,l_label,l_pro,l_triple,l_total,pair_sims,item_sims";
pub const EPOCH_LOG_HEADER: &str = "epoch,l_label,l_pro,l_triple,l_total,pair_sims,item_sims,val_recall5,val_ndcg5";

/// Windows starting at `0, step, 2·step, …` that fit entirely in the trajectory.
pub fn sliding_windows(traj: &PoseTrajectory, len: usize, step: usize) -> Result<Vec<Tensor>> {
    if len == 0 || step == 0 {
        return Err(Error::Config(format!(
            "window len {len} and step {step} must be at least 1"
        )));
    }
    let t = traj.num_frames();
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= t {
        out.push(traj.window(start, len)?);
        start += step;
    }
    Ok(out)
}

/// Labels of one window: `(catalog item index, graded score)`.
#[derive(Clone, Debug)]
pub struct WindowLabels {
    pub video_id: String,
    pub labels: Vec<(usize, f64)>,
}

impl WindowLabels {
    pub fn positives(&self) -> BTreeSet<usize> {
        self.labels.iter().filter(|l| l.1 > 0.0).map(|l| l.0).collect()
    }
}

/// Loss of one batch given the video embeddings `videos` (`[B × embed]` on
/// the tape) and already-mined negatives.
pub fn batch_loss(
    model: &PoseRecModel,
    tape: &mut Tape,
    videos: Var,
    labels: &[WindowLabels],
    negatives: &[Vec<usize>],
    items: &[ItemRecord],
    config: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    if labels.len() != negatives.len() || labels.len() != tape.value(videos).rows() {
        return Err(Error::shape(format!(
            "{} label sets, {} negative sets, {} embeddings",
            labels.len(),
            negatives.len(),
            tape.value(videos).rows()
        )));
    }
    let flags = config.flags();
    if !(flags.label || flags.pro || flags.triple) {
        return Err(Error::Config("every loss term is disabled".into()));
    }
    let used: BTreeSet<usize> = labels
        .iter()
        .flat_map(|w| w.labels.iter().map(|l| l.0))
        .chain(negatives.iter().flatten().copied())
        .collect();
    let used: Vec<usize> = used.into_iter().collect();
    let row_of: BTreeMap<usize, usize> = used.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let refs: Vec<&ItemRecord> = used.iter().map(|&i| &items[i]).collect();
    let batch = ItemBatch::new(&refs, &config.factor_mask)?;
    let (e, q) = model.item.forward(&model.store, tape, &batch)?;
    let protos = model.protos.proto_vars(&model.store, tape);
    let qd = model.spec.chunk_dim;
    let mut omega = Vec::with_capacity(used.len());
    for r in 0..used.len() {
        let qi = tape.slice(q, r * qd, qd)?;
        omega.push(model.protos.omega(&model.store, tape, qi, Some(&protos))?);
    }
    let k = model.k();
    let mut label_scores = Vec::new();
    let mut targets = Vec::new();
    let mut pos_sets = Vec::new();
    let mut neg_sets = Vec::new();
    for (v, (w, negs)) in labels.iter().zip(negatives).enumerate() {
        let mut pos = Vec::new();
        for &(i, t) in &w.labels {
            let r = row_of[&i];
            let s = score_on_tape(tape, e, r, videos, v, omega[r], k)?;
            label_scores.push(s);
            targets.push(t);
            if t > 0.0 {
                pos.push(s);
            }
        }
        if flags.triple && !pos.is_empty() && !negs.is_empty() {
            let neg = negs
                .iter()
                .map(|i| {
                    let r = row_of[i];
                    score_on_tape(tape, e, r, videos, v, omega[r], k)
                })
                .collect::<Result<Vec<_>>>()?;
            pos_sets.push(pos);
            neg_sets.push(neg);
        }
    }
    let l_label = label_loss_on_tape(tape, &label_scores, &targets)?;
    let l_pro = model.protos.separation_loss(tape, &protos)?;
    let l_triple = triplet_loss_on_tape(tape, &pos_sets, &neg_sets, config.margin)?;
    let mut enabled = Vec::new();
    for (on, var) in [(flags.label, l_label), (flags.pro, l_pro), (flags.triple, l_triple)] {
        if on {
            enabled.push(var);
        }
    }
    let total = tape.add_n(&enabled)?;
    let breakdown = total_loss(tape.scalar(l_label), tape.scalar(l_pro), tape.scalar(l_triple), flags);
    Ok((total, breakdown))
}

/// Gradient check of the complete loss on a synthetic micro-batch of
/// 2 videos and 8 items (2 classes × 3 items plus 2 shared), with the
/// negatives mined once up front and then held fixed.
pub fn micro_batch_gradcheck(cfg: &TrainConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let spec = SynthSpec {
        n_classes: 2,
        videos_per_class: 1,
        items_per_class: 3,
        shared_items: 2,
        frames: cfg.window_len,
        seed: cfg.seed,
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    validate_mask(cfg, spec.factor_count)?;
    let mut model = PoseRecModel::new(
        ModelSpec::from_config(cfg, spec.factor_count, spec.factor_dim),
        SkeletonGraph::blazepose(),
        cfg.seed,
    )?;
    let by_video = data.labels_by_video();
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for p in &data.poses {
        windows.push(sliding_windows(p, cfg.window_len, cfg.window_len)?.remove(0));
        labels.push(WindowLabels {
            video_id: p.video_id.clone(),
            labels: by_video.get(&p.video_id).cloned().unwrap_or_default(),
        });
    }
    let refs: Vec<&Tensor> = windows.iter().collect();
    let emb = model.encode_windows(&refs)?;
    let batch = MiningBatch {
        videos: labels
            .iter()
            .zip(&emb)
            .map(|(l, e)| MiningVideo {
                video_id: l.video_id.clone(),
                embedding: e.clone(),
                positives: l.positives(),
            })
            .collect(),
        threshold: cfg.p_threshold,
        n_neg: cfg.n_neg,
    };
    let catalog: Vec<usize> = (0..data.items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let negatives = mine(&batch, &catalog, &mut rng)?.negatives;
    let template = model.clone();
    gradcheck(
        &mut model.store,
        |store, tape| {
            let m = PoseRecModel {
                store: store.clone(),
                ..template.clone()
            };
            let v = m.video.forward(&m.store, tape, &refs)?;
            Ok(batch_loss(&m, tape, v, &labels, &negatives, &data.items, cfg)?.0)
        },
        opts,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub pair_sims: usize,
    pub item_sims: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub pair_sims: usize,
    pub item_sims: usize,
    pub val_recall5: f64,
    pub val_ndcg5: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PoseRecModel,
    pub config: TrainConfig,
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Items eligible for training and evaluation after `item_fraction`.
    pub catalog: Vec<usize>,
    /// Every video whose labels a training step read.
    pub touched_videos: BTreeSet<String>,
}

impl TrainOutcome {
    pub fn step_log_csv(&self) -> String {
        let mut s = format!("{STEP_LOG_HEADER}\n");
        for r in &self.steps {
            let l = &r.loss;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.step, l.l_label, l.l_pro, l.l_triple, l.l_total, r.pair_sims, r.item_sims
            );
        }
        s
    }

    pub fn epoch_log_csv(&self) -> String {
        let mut s = format!("{EPOCH_LOG_HEADER}\n");
        for r in &self.epochs {
            let l = &r.mean;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                l.l_label,
                l.l_pro,
                l.l_triple,
                l.l_total,
                r.pair_sims,
                r.item_sims,
                r.val_recall5,
                r.val_ndcg5
            );
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the checkpoint, logs and split; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Run validation after every epoch (and before the first).
    pub validate: bool,
    pub verbose: bool,
}

/// The seeded subset of items kept under `item_fraction`, in ascending order.
pub fn item_catalog(n_items: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..n_items).collect();
    }
    let keep = ((n_items as f64 * fraction).round() as usize)
        .clamp(1, n_items.max(1))
        .min(n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut idx = rand::seq::index::sample(&mut rng, n_items, keep).into_vec();
    idx.sort_unstable();
    idx
}

fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(2 * epoch as u64 + purpose);
    r
}

struct Sample {
    window: Tensor,
    labels: WindowLabels,
}

fn build_samples(
    dataset: &Dataset,
    videos: &[String],
    catalog: &BTreeSet<usize>,
    cfg: &TrainConfig,
) -> Result<Vec<Sample>> {
    let by_video = dataset.labels_by_video();
    let poses: BTreeMap<&str, &PoseTrajectory> = dataset.poses.iter().map(|p| (p.video_id.as_str(), p)).collect();
    let mut out = Vec::new();
    for v in videos {
        let labels: Vec<(usize, f64)> = by_video
            .get(v)
            .into_iter()
            .flatten()
            .filter(|(i, _)| catalog.contains(i))
            .copied()
            .collect();
        if !labels.iter().any(|l| l.1 > 0.0) {
            continue;
        }
        let p = poses
            .get(v.as_str())
            .ok_or_else(|| Error::Data(format!("no poses for video {v}")))?;
        for window in sliding_windows(p, cfg.window_len, cfg.window_step)? {
            out.push(Sample {
                window,
                labels: WindowLabels {
                    video_id: v.clone(),
                    labels: labels.clone(),
                },
            });
        }
    }
    Ok(out)
}

fn validate_mask(cfg: &TrainConfig, f: usize) -> Result<()> {
    if !cfg.factor_mask.is_empty() && cfg.factor_mask.len() != f {
        return Err(Error::Config(format!(
            "factor_mask has {} entries, items have {f} factors",
            cfg.factor_mask.len()
        )));
    }
    Ok(())
}

/// Train from scratch on `split.train`, validating on `split.val`.
pub fn train(dataset: &Dataset, split: &Split, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = dataset
        .items
        .first()
        .ok_or_else(|| Error::Data("dataset has no items".into()))?;
    let (f, d) = (first.factor_count(), first.factor_dim());
    validate_mask(cfg, f)?;
    let catalog = item_catalog(dataset.items.len(), cfg.item_fraction, cfg.seed);
    let catalog_set: BTreeSet<usize> = catalog.iter().copied().collect();
    let samples = build_samples(dataset, &split.train, &catalog_set, cfg)?;
    let distinct: BTreeSet<&str> = samples.iter().map(|s| s.labels.video_id.as_str()).collect();
    if distinct.len() < cfg.batch_size.min(2) || samples.len() < 2 {
        return Err(Error::Data(format!(
            "only {} training videos with positives and full windows",
            distinct.len()
        )));
    }
    let spec = ModelSpec::from_config(cfg, f, d);
    let mut model = PoseRecModel::new(spec, SkeletonGraph::blazepose(), cfg.seed)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        l2: cfg.l2,
        ..Default::default()
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        split.save(&dir.join("split.csv"))?;
        fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(dir, e))?;
    }

    let val = |model: &PoseRecModel| -> Result<(f64, f64)> {
        let set = EvalSet {
            dataset,
            videos: &split.val,
            catalog: &catalog,
            ks: &[5],
        };
        let r = evaluate(model, &set, Protocol::Ins, cfg.window_step, &cfg.factor_mask)?;
        let row = r.get(MODEL_NAME, Protocol::Ins, 5).expect("k=5 row");
        Ok((row.recall, row.ndcg))
    };

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut touched = BTreeSet::new();
    if opts.validate {
        let (r, n) = val(&model)?;
        epochs.push(EpochLog {
            epoch: 0,
            mean: LossBreakdown::default(),
            pair_sims: 0,
            item_sims: 0,
            val_recall5: r,
            val_ndcg5: n,
        });
    }
    let mut last_good = model.store.clone();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0));
        let mut mine_rng = epoch_rng(cfg.seed, epoch, 1);
        let mut sums = [0.0; 4];
        let (mut pairs, mut item_sims, mut n_steps) = (0, 0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut tape = Tape::new();
            let windows: Vec<&Tensor> = batch.iter().map(|s| &s.window).collect();
            let v = model.video.forward(&model.store, &mut tape, &windows)?;
            let emb = tape.value(v);
            let mb = MiningBatch {
                videos: batch
                    .iter()
                    .enumerate()
                    .map(|(r, s)| MiningVideo {
                        video_id: s.labels.video_id.clone(),
                        embedding: emb.row(r).to_vec(),
                        positives: s.labels.positives(),
                    })
                    .collect(),
                threshold: cfg.p_threshold,
                n_neg: cfg.n_neg,
            };
            let mined = mine(&mb, &catalog, &mut mine_rng)?;
            let labels: Vec<WindowLabels> = batch.iter().map(|s| s.labels.clone()).collect();
            touched.extend(labels.iter().map(|l| l.video_id.clone()));
            let (total, breakdown) = batch_loss(&model, &mut tape, v, &labels, &mined.negatives, &dataset.items, cfg)?;
            let grads = tape.backward(total)?;
            grads.accumulate_into(&mut model.store);
            let finite = breakdown.l_total.is_finite() && model.store.iter().all(|p| p.grad.is_finite());
            if !finite {
                model.store = last_good;
                let ckpt = match &opts.out_dir {
                    Some(dir) => {
                        let path = dir.join("last_good.psrc");
                        model.to_checkpoint(cfg, epoch - 1).save(&path)?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: breakdown.l_total,
                    checkpoint: ckpt,
                });
            }
            adam_step(&mut model.store, &adam);
            sums[0] += breakdown.l_label;
            sums[1] += breakdown.l_pro;
            sums[2] += breakdown.l_triple;
            sums[3] += breakdown.l_total;
            pairs += mined.pair_sims;
            item_sims += mined.item_sims;
            n_steps += 1;
            steps.push(StepLog {
                epoch,
                step,
                loss: breakdown,
                pair_sims: mined.pair_sims,
                item_sims: mined.item_sims,
            });
        }
        last_good = model.store.clone();
        let n = n_steps.max(1) as f64;
        let mean = LossBreakdown {
            l_label: sums[0] / n,
            l_pro: sums[1] / n,
            l_triple: sums[2] / n,
            l_total: sums[3] / n,
            flags: cfg.flags(),
        };
        let (r, nd) = if opts.validate {
            val(&model)?
        } else {
            (f64::NAN, f64::NAN)
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch}: loss {:.4} (label {:.4}, pro {:.4}, triple {:.4}), val R@5 {r:.4} N@5 {nd:.4}",
                mean.l_total, mean.l_label, mean.l_pro, mean.l_triple
            );
        }
        epochs.push(EpochLog {
            epoch,
            mean,
            pair_sims: pairs,
            item_sims,
            val_recall5: r,
            val_ndcg5: nd,
        });
    }
    model.store.round_to_f32();
    let checkpoint = model.to_checkpoint(cfg, cfg.epochs);
    let outcome = TrainOutcome {
        model,
        config: cfg.clone(),
        checkpoint,
        steps,
        epochs,
        catalog,
        touched_videos: touched,
    };
    if let Some(dir) = &opts.out_dir {
        save_outputs(&outcome, dir)?;
    }
    Ok(outcome)
}

fn save_outputs(o: &TrainOutcome, dir: &Path) -> Result<()> {
    o.checkpoint.save(&dir.join("model.psrc"))?;
    write_atomic(&dir.join("train_log.csv"), o.step_log_csv().as_bytes())?;
    write_atomic(&dir.join("epoch_log.csv"), o.epoch_log_csv().as_bytes())?;
    Ok(())
}
