//! Item tower: weighted factor merge and the two projections (shared-space
//! embedding `e_i` and prototype query `e_ic`).

use std::sync::Arc;

use rand::Rng;

use crate::embedding::ChunkedEmbedding;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const FACTOR_COUNT: usize = 9;
pub const FACTOR_DIM: usize = 768;

#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord {
    pub item_id: String,
    pub category: String,
    /// `[F × dim]`
    pub factors: Tensor,
    pub factor_mask: Vec<bool>,
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>, category: impl Into<String>, factors: Tensor) -> Result<Self> {
        let item_id = item_id.into();
        if factors.dims().len() != 2 {
            return Err(Error::shape(format!(
                "item {item_id}: factors must be [F × dim], got {:?}",
                factors.dims()
            )));
        }
        let f = factors.dims()[0];
        Ok(ItemRecord {
            item_id,
            category: category.into(),
            factor_mask: vec![true; f],
            factors,
        })
    }

    pub fn factor_count(&self) -> usize {
        self.factors.dims()[0]
    }

    pub fn factor_dim(&self) -> usize {
        self.factors.dims()[1]
    }

    /// 1.0 for factors active under both the item mask and `global`, else 0.0.
    fn effective_mask(&self, global: &[bool]) -> Vec<f64> {
        (0..self.factor_count())
            .map(|j| {
                let on = self.factor_mask.get(j).copied().unwrap_or(true) && global.get(j).copied().unwrap_or(true);
                if on {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// `s_i = Σ_j w_j·f_{i,j}` over unmasked factors.
pub fn merge_factors(item: &ItemRecord, weights: &[f64]) -> Result<Vec<f64>> {
    merge_factors_masked(item, weights, &[])
}

pub fn merge_factors_masked(item: &ItemRecord, weights: &[f64], global_mask: &[bool]) -> Result<Vec<f64>> {
    let f = item.factor_count();
    if weights.len() != f {
        return Err(Error::shape(format!(
            "{} factor weights for {f} factors",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::shape("non-finite factor weight"));
    }
    let mask = item.effective_mask(global_mask);
    if mask.iter().all(|&m| m == 0.0) {
        return Err(Error::EmptyItem(item.item_id.clone()));
    }
    let d = item.factor_dim();
    let mut s = vec![0.0; d];
    for j in 0..f {
        if mask[j] == 0.0 {
            continue;
        }
        for (o, v) in s.iter_mut().zip(item.factors.row(j)) {
            *o += weights[j] * v;
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbedding {
    pub e_i: ChunkedEmbedding,
    pub e_ic: Vec<f64>,
}

/// The item tower's parameter handles.
#[derive(Clone, Debug)]
pub struct ItemEncoder {
    pub factor_weights: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub query_weight: ParamId,
    pub query_bias: ParamId,
    pub factor_count: usize,
    pub factor_dim: usize,
    pub embed_dim: usize,
    pub query_dim: usize,
}

/// Items stacked for one tape pass.
pub struct ItemBatch {
    pub factors: Arc<Tensor>,
    pub mask: Arc<Vec<f64>>,
}

impl ItemBatch {
    /// Stack items into `[n × F × dim]`. `global_mask` becomes the merge mask;
    /// rows masked by an item's own mask are zeroed. An item left with no
    /// active factor is an error.
    pub fn new(items: &[&ItemRecord], global_mask: &[bool]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("empty item batch"))?;
        let (f, d) = (first.factor_count(), first.factor_dim());
        let mut data = Vec::with_capacity(items.len() * f * d);
        for it in items {
            if it.factor_count() != f || it.factor_dim() != d {
                return Err(Error::shape(format!(
                    "item {} has factors {:?}, batch expects [{f}, {d}]",
                    it.item_id,
                    it.factors.dims()
                )));
            }
            let m = it.effective_mask(global_mask);
            if m.iter().all(|&v| v == 0.0) {
                return Err(Error::EmptyItem(it.item_id.clone()));
            }
            for j in 0..f {
                if it.factor_mask.get(j).copied().unwrap_or(true) {
                    data.extend_from_slice(it.factors.row(j));
                } else {
                    data.extend(std::iter::repeat_n(0.0, d));
                }
            }
        }
        let mask = (0..f)
            .map(|j| {
                if global_mask.get(j).copied().unwrap_or(true) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Ok(ItemBatch {
            factors: Arc::new(Tensor::new(vec![items.len(), f, d], data)?),
            mask: Arc::new(mask),
        })
    }

    pub fn len(&self) -> usize {
        self.factors.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ItemEncoder {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        factor_count: usize,
        factor_dim: usize,
        embed_dim: usize,
        query_dim: usize,
    ) -> Result<Self> {
        if factor_count == 0 || factor_dim == 0 {
            return Err(Error::Config("item factors must be non-empty".into()));
        }
        let w0 = Tensor::vector(vec![1.0 / factor_count as f64; factor_count]);
        let factor_weights = store.register("item.factor_w", w0)?;
        let xavier = |rng: &mut dyn rand::RngCore, rows: usize, cols: usize| {
            let b = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-b..b)).collect())
        };
        let proj_weight = store.register("item.proj.w", xavier(rng, factor_dim, embed_dim)?)?;
        let proj_bias = store.register("item.proj.b", Tensor::zeros(&[embed_dim]))?;
        let query_weight = store.register("item.query.w", xavier(rng, factor_dim, query_dim)?)?;
        let query_bias = store.register("item.query.b", Tensor::zeros(&[query_dim]))?;
        Ok(ItemEncoder {
            factor_weights,
            proj_weight,
            proj_bias,
            query_weight,
            query_bias,
            factor_count,
            factor_dim,
            embed_dim,
            query_dim,
        })
    }

    /// Merged descriptions `s` for a batch: `[n × dim]`.
    pub fn merge(&self, store: &ParamStore, tape: &mut Tape, batch: &ItemBatch) -> Result<Var> {
        let w = tape.param(store, self.factor_weights);
        tape.factor_merge(w, batch.factors.clone(), batch.mask.clone())
    }

    /// Project merged descriptions: returns (`e_i` `[n × embed]`, `e_ic` `[n × query]`).
    pub fn project(&self, store: &ParamStore, tape: &mut Tape, s: Var) -> Result<(Var, Var)> {
        let w2 = tape.param(store, self.proj_weight);
        let b2 = tape.param(store, self.proj_bias);
        let e = tape.matmul(s, w2)?;
        let e = tape.add_row_bias(e, b2)?;
        let w3 = tape.param(store, self.query_weight);
        let b3 = tape.param(store, self.query_bias);
        let q = tape.matmul(s, w3)?;
        let q = tape.add_row_bias(q, b3)?;
        Ok((e, q))
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, batch: &ItemBatch) -> Result<(Var, Var)> {
        let s = self.merge(store, tape, batch)?;
        self.project(store, tape, s)
    }

    /// Frozen-weight projection of one merged description.
    pub fn embed_merged(&self, store: &ParamStore, s: &[f64], chunks: usize) -> Result<ItemEmbedding> {
        if s.len() != self.factor_dim {
            return Err(Error::shape(format!(
                "merged description has {} values, expected {}",
                s.len(),
                self.factor_dim
            )));
        }
        let mut tape = Tape::new();
        let sv = tape.constant(Tensor::matrix(1, s.len(), s.to_vec())?);
        let (e, q) = self.project(store, &mut tape, sv)?;
        Ok(ItemEmbedding {
            e_i: ChunkedEmbedding::new(tape.value(e).data().to_vec(), chunks)?,
            e_ic: tape.value(q).data().to_vec(),
        })
    }

    pub fn encode_item(
        &self,
        store: &ParamStore,
        item: &ItemRecord,
        global_mask: &[bool],
        chunks: usize,
    ) -> Result<ItemEmbedding> {
        let w = store.value(self.factor_weights).data().to_vec();
        let s = merge_factors_masked(item, &w, global_mask)?;
        self.embed_merged(store, &s, chunks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, GradcheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_item(rng: &mut ChaCha8Rng, id: &str, f: usize, d: usize) -> ItemRecord {
        let data = (0..f * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        ItemRecord::new(id, "cat", Tensor::matrix(f, d, data).unwrap()).unwrap()
    }

    #[test]
    fn one_hot_weight_selects_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let item = random_item(&mut rng, "a", 9, 16);
        let mut w = vec![0.0; 9];
        w[1] = 1.0;
        assert_eq!(merge_factors(&item, &w).unwrap(), item.factors.row(1));
    }

    #[test]
    fn equal_factors_scale_by_weight_sum() {
        let f: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let data: Vec<f64> = (0..9).flat_map(|_| f.clone()).collect();
        let item = ItemRecord::new("a", "c", Tensor::matrix(9, 8, data).unwrap()).unwrap();
        let w = [0.3, -1.0, 2.0, 0.1, 0.0, 0.5, 1.5, -0.2, 0.7];
        let total: f64 = w.iter().sum();
        for (s, v) in merge_factors(&item, &w).unwrap().iter().zip(&f) {
            assert!((s - total * v).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_matches_component_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let item = random_item(&mut rng, "a", 9, 12);
        let w: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = merge_factors(&item, &w).unwrap();
        for (c, sc) in s.iter().enumerate() {
            let mut acc = 0.0;
            for (j, wj) in w.iter().enumerate() {
                acc += wj * item.factors.get2(j, c);
            }
            assert!((sc - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_dominates_weight_and_all_masked_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut item = random_item(&mut rng, "a", 9, 6);
        item.factor_mask[4] = false;
        let mut w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s1 = merge_factors(&item, &w).unwrap();
        w[4] = 1e6;
        assert_eq!(merge_factors(&item, &w).unwrap(), s1);
        item.factor_mask = vec![false; 9];
        assert!(matches!(merge_factors(&item, &w), Err(Error::EmptyItem(_))));
    }

    fn encoder(seed: u64, d: usize) -> (ParamStore, ItemEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = ItemEncoder::register(&mut store, &mut rng, 9, d, 256, 64).unwrap();
        // non-zero biases so the linearity identity is exercised
        for id in [enc.proj_bias, enc.query_bias] {
            let n = store.value(id).len();
            let v = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            store.set_value(id, Tensor::vector(v)).unwrap();
        }
        (store, enc)
    }

    #[test]
    fn output_dims_and_zero_input_gives_bias() {
        let (store, enc) = encoder(4, 16);
        let e = enc.embed_merged(&store, &[0.0; 16], 4).unwrap();
        assert_eq!(e.e_i.as_slice().len(), 256);
        assert_eq!(e.e_ic.len(), 64);
        assert_eq!(e.e_i.as_slice(), store.value(enc.proj_bias).data());
        assert_eq!(&e.e_ic[..], store.value(enc.query_bias).data());
    }

    #[test]
    fn projection_is_affine() {
        let (store, enc) = encoder(5, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let s1: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s2: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (alpha, beta) = (0.7, -1.9);
        let mix: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| alpha * a + beta * b).collect();
        let e1 = enc.embed_merged(&store, &s1, 4).unwrap();
        let e2 = enc.embed_merged(&store, &s2, 4).unwrap();
        let em = enc.embed_merged(&store, &mix, 4).unwrap();
        let bias = store.value(enc.proj_bias).data();
        for i in 0..256 {
            let expect = alpha * e1.e_i.as_slice()[i] + beta * e2.e_i.as_slice()[i] - (alpha + beta - 1.0) * bias[i];
            assert!((em.e_i.as_slice()[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_matches_single_item_encoding() {
        let (store, enc) = encoder(6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let items: Vec<ItemRecord> = (0..3).map(|i| random_item(&mut rng, &format!("i{i}"), 9, 8)).collect();
        let refs: Vec<&ItemRecord> = items.iter().collect();
        let mask = [true, true, false, true, true, true, true, true, true];
        let batch = ItemBatch::new(&refs, &mask).unwrap();
        let mut tape = Tape::new();
        let (e, q) = enc.forward(&store, &mut tape, &batch).unwrap();
        for (i, it) in items.iter().enumerate() {
            let single = enc.encode_item(&store, it, &mask, 4).unwrap();
            for (a, b) in tape.value(e).row(i).iter().zip(single.e_i.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in tape.value(q).row(i).iter().zip(&single.e_ic) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn both_heads_pass_gradcheck() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = ItemEncoder::register(&mut store, &mut rng, 9, 6, 8, 4).unwrap();
        let items: Vec<ItemRecord> = (0..3).map(|i| random_item(&mut rng, &format!("i{i}"), 9, 6)).collect();
        let refs: Vec<&ItemRecord> = items.iter().collect();
        let batch = ItemBatch::new(&refs, &[]).unwrap();
        let ce = Tensor::matrix(3, 8, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cq = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = gradcheck(
            &mut store,
            |s, tape| {
                let (e, q) = enc.forward(s, tape, &batch)?;
                let a = tape.constant(ce.clone());
                let b = tape.constant(cq.clone());
                let pe = tape.mul(e, a)?;
                let pq = tape.mul(q, b)?;
                let se = tape.sum(pe);
                let sq = tape.sum(pq);
                tape.add(se, sq)
            },
            &GradcheckOptions {
                tolerance: 1e-6,
                abs_floor: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
