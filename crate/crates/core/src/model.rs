//! The two towers plus the prototype bank, and their checkpoint mapping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, DType};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::item_encoder::{ItemBatch, ItemEmbedding, ItemEncoder, ItemRecord};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::pose_encoder::{default_layer_stack, PoseEncoder, SkeletonGraph, StgcnLayerSpec, LANDMARKS};
use crate::prototype::{contribution_weights, prototype_score, PrototypeBank};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub window_len: usize,
    pub k: usize,
    pub chunk_dim: usize,
    pub factor_count: usize,
    pub factor_dim: usize,
    pub temperature: f64,
    pub layers: Vec<StgcnLayerSpec>,
}

impl ModelSpec {
    pub fn from_config(config: &TrainConfig, factor_count: usize, factor_dim: usize) -> Self {
        ModelSpec {
            window_len: config.window_len,
            k: config.k,
            chunk_dim: config.chunk_dim,
            factor_count,
            factor_dim,
            temperature: config.temperature,
            layers: default_layer_stack(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.k * self.chunk_dim
    }
}

#[derive(Clone, Debug)]
pub struct PoseRecModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub video: PoseEncoder,
    pub item: ItemEncoder,
    pub protos: PrototypeBank,
}

impl PoseRecModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(spec: ModelSpec, graph: SkeletonGraph, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = spec.embed_dim();
        let video = PoseEncoder::register(&mut store, &mut rng, graph, &spec.layers, spec.window_len, embed)?;
        let item = ItemEncoder::register(
            &mut store,
            &mut rng,
            spec.factor_count,
            spec.factor_dim,
            embed,
            spec.chunk_dim,
        )?;
        let protos = PrototypeBank::register(&mut store, &mut rng, spec.k, spec.chunk_dim, spec.temperature)?;
        Ok(PoseRecModel {
            spec,
            store,
            video,
            item,
            protos,
        })
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    /// Frozen video embeddings, one per window.
    pub fn encode_windows(&self, windows: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        self.video.encode_batch(&self.store, windows)
    }

    /// Frozen item embeddings in one tape pass.
    pub fn encode_items(&self, items: &[&ItemRecord], global_mask: &[bool]) -> Result<Vec<ItemEmbedding>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let batch = ItemBatch::new(items, global_mask)?;
        let mut tape = Tape::new();
        let (e, q) = self.item.forward(&self.store, &mut tape, &batch)?;
        let (e, q) = (tape.value(e), tape.value(q));
        (0..items.len())
            .map(|i| {
                Ok(ItemEmbedding {
                    e_i: crate::embedding::ChunkedEmbedding::new(e.row(i).to_vec(), self.k())?,
                    e_ic: q.row(i).to_vec(),
                })
            })
            .collect()
    }

    pub fn omega(&self, e_ic: &[f64]) -> Result<Vec<f64>> {
        contribution_weights(e_ic, &self.protos.rows(&self.store), self.protos.temperature)
    }

    pub fn score(&self, item: &ItemEmbedding, e_v: &[f64]) -> Result<f64> {
        prototype_score(item.e_i.as_slice(), e_v, &self.omega(&item.e_ic)?)
    }

    /// Parameters (f32), model shape, graph and the training config.
    pub fn to_checkpoint(&self, config: &TrainConfig, epochs_done: usize) -> Checkpoint {
        let mut c = Checkpoint::default();
        for p in self.store.iter() {
            c.push(p.name.clone(), DType::F32, p.value.clone());
        }
        let s = &self.spec;
        let f64s = |c: &mut Checkpoint, name: &str, v: f64| c.push(name, DType::F64, Tensor::scalar(v));
        f64s(&mut c, "model.factor_count", s.factor_count as f64);
        f64s(&mut c, "model.factor_dim", s.factor_dim as f64);
        let layers: Vec<f64> = s
            .layers
            .iter()
            .flat_map(|l| {
                [
                    l.in_channels as f64,
                    l.out_channels as f64,
                    l.temporal_kernel as f64,
                    l.temporal_stride as f64,
                    if l.relu { 1.0 } else { 0.0 },
                ]
            })
            .collect();
        c.push(
            "model.layers",
            DType::F64,
            Tensor::matrix(s.layers.len(), 5, layers).expect("5 values per layer"),
        );
        let g = &self.video.graph;
        let edges: Vec<f64> = g.edges.iter().flat_map(|&(a, b)| [a as f64, b as f64]).collect();
        c.push(
            "graph.edges",
            DType::F64,
            Tensor::matrix(g.edges.len(), 2, edges).expect("2 values per edge"),
        );
        c.push("graph.adjacency", DType::F64, g.adjacency_norm.clone());
        push_config(&mut c, config);
        let halves = |x: u64| Tensor::vector(vec![(x >> 32) as f64, (x & 0xffff_ffff) as f64]);
        c.push("rng.seed", DType::F64, halves(config.seed));
        f64s(&mut c, "rng.epochs", epochs_done as f64);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let config = read_config(c)?;
        let as_usize = |name: &str| -> Result<usize> {
            let v = c.scalar(name)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Data(format!("checkpoint entry {name} = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let lt = c.tensor("model.layers")?;
        if lt.dims().len() != 2 || lt.cols() != 5 {
            return Err(Error::Data("model.layers must be [L × 5]".into()));
        }
        let layers = (0..lt.rows())
            .map(|i| {
                let r = lt.row(i);
                StgcnLayerSpec {
                    in_channels: r[0] as usize,
                    out_channels: r[1] as usize,
                    temporal_kernel: r[2] as usize,
                    temporal_stride: r[3] as usize,
                    relu: r[4] != 0.0,
                }
            })
            .collect();
        let spec = ModelSpec {
            layers,
            ..ModelSpec::from_config(&config, as_usize("model.factor_count")?, as_usize("model.factor_dim")?)
        };
        let et = c.tensor("graph.edges")?;
        let edges = (0..et.rows())
            .map(|i| (et.row(i)[0] as usize, et.row(i)[1] as usize))
            .collect();
        let graph = SkeletonGraph::new(LANDMARKS, edges)?;
        let mut model = PoseRecModel::new(spec, graph, config.seed)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let t = c.tensor(&name)?.clone();
            model.store.set_value(id, t)?;
        }
        Ok((model, config))
    }
}

fn push_config(c: &mut Checkpoint, cfg: &TrainConfig) {
    let mut put = |k: &str, v: Tensor| c.push(format!("config.{k}"), DType::F64, v);
    let s = |v: f64| Tensor::scalar(v);
    put("window_len", s(cfg.window_len as f64));
    put("window_step", s(cfg.window_step as f64));
    put("batch_size", s(cfg.batch_size as f64));
    put("epochs", s(cfg.epochs as f64));
    put("lr", s(cfg.lr));
    put("l2", s(cfg.l2));
    put("p_threshold", s(cfg.p_threshold));
    put("n_neg", s(cfg.n_neg as f64));
    put("k", s(cfg.k as f64));
    put("chunk_dim", s(cfg.chunk_dim as f64));
    put("margin", Tensor::vector(cfg.margin.into_iter().collect()));
    put(
        "seed",
        Tensor::vector(vec![(cfg.seed >> 32) as f64, (cfg.seed & 0xffff_ffff) as f64]),
    );
    put(
        "factor_mask",
        Tensor::vector(cfg.factor_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
    );
    put("item_fraction", s(cfg.item_fraction));
    put("loss_label", s(cfg.loss_label as u8 as f64));
    put("loss_pro", s(cfg.loss_pro as u8 as f64));
    put("loss_triple", s(cfg.loss_triple as u8 as f64));
    put("temperature", s(cfg.temperature));
}

fn read_config(c: &Checkpoint) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let num = |k: &str| c.scalar(&format!("config.{k}"));
    let count = |k: &str| num(k).map(|v| v as usize);
    cfg.window_len = count("window_len")?;
    cfg.window_step = count("window_step")?;
    cfg.batch_size = count("batch_size")?;
    cfg.epochs = count("epochs")?;
    cfg.lr = num("lr")?;
    cfg.l2 = num("l2")?;
    cfg.p_threshold = num("p_threshold")?;
    cfg.n_neg = count("n_neg")?;
    cfg.k = count("k")?;
    cfg.chunk_dim = count("chunk_dim")?;
    cfg.margin = c.tensor("config.margin")?.data().first().copied();
    let seed = c.tensor("config.seed")?.data();
    if seed.len() != 2 {
        return Err(Error::Data("config.seed must hold two halves".into()));
    }
    cfg.seed = ((seed[0] as u64) << 32) | seed[1] as u64;
    cfg.factor_mask = c
        .tensor("config.factor_mask")?
        .data()
        .iter()
        .map(|&v| v != 0.0)
        .collect();
    cfg.item_fraction = num("item_fraction")?;
    cfg.loss_label = num("loss_label")? != 0.0;
    cfg.loss_pro = num("loss_pro")? != 0.0;
    cfg.loss_triple = num("loss_triple")? != 0.0;
    cfg.temperature = num("temperature")?;
    cfg.validate()?;
    Ok(cfg)
}
