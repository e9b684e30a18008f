//! Item-aware prototype scoring.
//!
//! Each item picks a convex weighting `ω` over `K` learned prototypes from its
//! query vector; the item/video score is the `ω`-weighted sum of per-chunk
//! cosines. Plain-slice versions serve inference and oracles, tape versions
//! serve training.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{cosine, softmax, ParamId, ParamStore, Tape, Tensor, Var};

/// Max pairwise cosine accepted between freshly drawn prototypes.
pub const INIT_MAX_COSINE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub ids: Vec<ParamId>,
    pub dim: usize,
    pub temperature: f64,
}

pub fn prototype_param_name(k: usize) -> String {
    format!("proto.r{k}")
}

impl PrototypeBank {
    /// Register `k` unit-norm random prototypes of dimension `dim`, redrawing
    /// any that land within [`INIT_MAX_COSINE`] of an earlier one.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        k: usize,
        dim: usize,
        temperature: f64,
    ) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "prototype bank needs K >= 1 and d >= 1, got K={k}, d={dim}"
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut attempts = 0;
        while rows.len() < k {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(format!(
                    "could not draw {k} prototypes in {dim} dims with pairwise cosine < {INIT_MAX_COSINE}"
                )));
            }
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = crate::numerics::norm(&v);
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            if dim > 1
                && rows
                    .iter()
                    .any(|r| cosine(r, &v).map_or(true, |c| c >= INIT_MAX_COSINE))
            {
                continue;
            }
            rows.push(v);
        }
        let mut ids = Vec::with_capacity(k);
        for (i, r) in rows.into_iter().enumerate() {
            ids.push(store.register(prototype_param_name(i), Tensor::vector(r))?);
        }
        Ok(PrototypeBank { ids, dim, temperature })
    }

    pub fn k(&self) -> usize {
        self.ids.len()
    }

    pub fn rows<'a>(&self, store: &'a ParamStore) -> Vec<&'a [f64]> {
        self.ids.iter().map(|&id| store.value(id).data()).collect()
    }

    /// Tape version of [`contribution_weights`]; `e_ic` is a `[d]` vector node.
    pub fn omega(&self, store: &ParamStore, tape: &mut Tape, e_ic: Var, protos: Option<&[Var]>) -> Result<Var> {
        let owned;
        let protos = match protos {
            Some(p) => p,
            None => {
                owned = self.proto_vars(store, tape);
                &owned
            }
        };
        let cos = protos
            .iter()
            .map(|&r| tape.cosine(e_ic, r))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.stack(&cos)?;
        let logits = if self.temperature == 1.0 {
            logits
        } else {
            tape.scale(logits, 1.0 / self.temperature)
        };
        tape.softmax(logits)
    }

    pub fn proto_vars(&self, store: &ParamStore, tape: &mut Tape) -> Vec<Var> {
        self.ids.iter().map(|&id| tape.param(store, id)).collect()
    }

    /// Tape version of [`prototype_separation_loss`].
    pub fn separation_loss(&self, tape: &mut Tape, protos: &[Var]) -> Result<Var> {
        let mut terms = Vec::new();
        for a in 0..protos.len() {
            for b in a + 1..protos.len() {
                terms.push(tape.cosine(protos[a], protos[b])?);
            }
        }
        if terms.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let s = tape.stack(&terms)?;
        Ok(tape.sum(s))
    }
}

/// `ω = softmax(cos(e_ic, r_k) / temperature)`.
pub fn contribution_weights(e_ic: &[f64], protos: &[&[f64]], temperature: f64) -> Result<Vec<f64>> {
    let logits = protos
        .iter()
        .map(|r| cosine(e_ic, r).map(|c| c / temperature))
        .collect::<Result<Vec<_>>>()?;
    softmax(&logits)
}

/// `Σ_k ω_k · cos(e_i^(k), e_v^(k))` over `ω.len()` equal chunks.
pub fn prototype_score(e_i: &[f64], e_v: &[f64], omega: &[f64]) -> Result<f64> {
    let k = omega.len();
    if k == 0 || e_i.len() != e_v.len() || !e_i.len().is_multiple_of(k) {
        return Err(Error::shape(format!(
            "score of item {} and video {} values over {k} chunks",
            e_i.len(),
            e_v.len()
        )));
    }
    let d = e_i.len() / k;
    let mut s = 0.0;
    for (c, w) in omega.iter().enumerate() {
        s += w * cosine(&e_i[c * d..(c + 1) * d], &e_v[c * d..(c + 1) * d])?;
    }
    Ok(s)
}

/// `Σ_{a<b} cos(r_a, r_b)`; zero for a single prototype.
pub fn prototype_separation_loss(protos: &[&[f64]]) -> Result<f64> {
    let mut s = 0.0;
    for a in 0..protos.len() {
        for b in a + 1..protos.len() {
            s += cosine(protos[a], protos[b])?;
        }
    }
    Ok(s)
}

/// Tape version of [`prototype_score`]: chunk cosines between row `item_row`
/// of `items` and row `video_row` of `videos`, weighted by the `[K]` node `omega`.
pub fn score_on_tape(
    tape: &mut Tape,
    items: Var,
    item_row: usize,
    videos: Var,
    video_row: usize,
    omega: Var,
    k: usize,
) -> Result<Var> {
    let embed = tape.value(items).cols();
    if tape.value(videos).cols() != embed || !embed.is_multiple_of(k) {
        return Err(Error::shape(format!(
            "score: item width {embed}, video width {}, K={k}",
            tape.value(videos).cols()
        )));
    }
    let d = embed / k;
    let mut cos = Vec::with_capacity(k);
    for c in 0..k {
        let a = tape.slice(items, item_row * embed + c * d, d)?;
        let b = tape.slice(videos, video_row * embed + c * d, d)?;
        cos.push(tape.cosine(a, b)?);
    }
    let s = tape.stack(&cos)?;
    tape.dot(omega, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{adam_step, gradcheck, AdamConfig, GradcheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_prototype_gives_unit_weight() {
        let w = contribution_weights(&[0.3, -0.2], &[&[1.0, 1.0]], 1.0).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn equidistant_query_gives_uniform_weights() {
        let e = [1.0, 1.0, 1.0];
        let protos: [&[f64]; 3] = [&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]];
        for w in contribution_weights(&e, &protos, 1.0).unwrap() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosines_one_and_zero_give_logistic_weights() {
        let w = contribution_weights(&[1.0, 0.0], &[&[2.0, 0.0], &[0.0, 5.0]], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn degenerate_query_errors() {
        assert!(matches!(
            contribution_weights(&[0.0, 0.0], &[&[1.0, 0.0]], 1.0),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn k1_score_is_plain_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (randv(&mut rng, 16), randv(&mut rng, 16));
        assert_eq!(prototype_score(&a, &b, &[1.0]).unwrap(), cosine(&a, &b).unwrap());
    }

    #[test]
    fn equal_chunk_cosines_give_that_cosine() {
        // every chunk pair is (u, rotated u) with the same angle
        let e_i = [1.0, 0.0, 2.0, 0.0, 0.5, 0.0];
        let e_v = [1.0, 1.0, 3.0, 3.0, 0.1, 0.1];
        let s = prototype_score(&e_i, &e_v, &[0.2, 0.5, 0.3]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn score_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (e_i, e_v) = (randv(&mut rng, 32), randv(&mut rng, 32));
        let raw = randv(&mut rng, 4);
        let omega = softmax(&raw).unwrap();
        let mut expect = 0.0;
        for k in 0..4 {
            let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
            for j in k * 8..(k + 1) * 8 {
                d += e_i[j] * e_v[j];
                na += e_i[j] * e_i[j];
                nb += e_v[j] * e_v[j];
            }
            expect += omega[k] * d / (na.sqrt() * nb.sqrt());
        }
        assert!((prototype_score(&e_i, &e_v, &omega).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn separation_loss_examples() {
        assert_eq!(prototype_separation_loss(&[&[1.0, 0.0], &[0.0, 3.0]]).unwrap(), 0.0);
        assert!((prototype_separation_loss(&[&[1.0, 2.0], &[1.0, 2.0]]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(prototype_separation_loss(&[&[1.0, 2.0]]).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<Vec<f64>> = (0..3).map(|_| randv(&mut rng, 5)).collect();
        let refs: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
        let mut expect = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                if a < b {
                    let d: f64 = p[a].iter().zip(&p[b]).map(|(x, y)| x * y).sum();
                    let na: f64 = p[a].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = p[b].iter().map(|x| x * x).sum::<f64>().sqrt();
                    expect += d / (na * nb);
                }
            }
        }
        assert!((prototype_separation_loss(&refs).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn tape_versions_agree_with_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let bank = PrototypeBank::register(&mut store, &mut rng, 4, 8, 1.0).unwrap();
        let e_ic = randv(&mut rng, 8);
        let e_i = randv(&mut rng, 32);
        let e_v = randv(&mut rng, 32);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::vector(e_ic.clone()));
        let om = bank.omega(&store, &mut tape, q, None).unwrap();
        let expect_w = contribution_weights(&e_ic, &bank.rows(&store), 1.0).unwrap();
        assert_eq!(tape.value(om).data(), &expect_w[..]);
        let iv = tape.constant(Tensor::matrix(1, 32, e_i.clone()).unwrap());
        let vv = tape.constant(Tensor::matrix(1, 32, e_v.clone()).unwrap());
        let s = score_on_tape(&mut tape, iv, 0, vv, 0, om, 4).unwrap();
        assert!((tape.scalar(s) - prototype_score(&e_i, &e_v, &expect_w).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn initial_prototypes_are_unit_and_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let bank = PrototypeBank::register(&mut store, &mut rng, 8, 64, 1.0).unwrap();
        let rows = bank.rows(&store);
        for (a, ra) in rows.iter().enumerate() {
            assert!((crate::numerics::norm(ra) - 1.0).abs() < 1e-12);
            for rb in &rows[a + 1..] {
                assert!(cosine(ra, rb).unwrap() < INIT_MAX_COSINE);
            }
        }
        assert_eq!(store.get(bank.ids[3]).name, "proto.r3");
    }

    #[test]
    fn separation_loss_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let bank = PrototypeBank::register(&mut store, &mut rng, 4, 6, 1.0).unwrap();
        let report = gradcheck(
            &mut store,
            |s, tape| {
                let p = bank.proto_vars(s, tape);
                bank.separation_loss(tape, &p)
            },
            &GradcheckOptions {
                tolerance: 1e-6,
                abs_floor: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn separation_loss_alone_spreads_prototypes() {
        for k in [2usize, 4, 8] {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
            let mut store = ParamStore::new();
            let bank = PrototypeBank::register(&mut store, &mut rng, k, 64, 1.0).unwrap();
            let cfg = AdamConfig {
                lr: 1e-3,
                l2: 0.0,
                ..Default::default()
            };
            for _ in 0..500 {
                let mut tape = Tape::new();
                let p = bank.proto_vars(&store, &mut tape);
                let l = bank.separation_loss(&mut tape, &p).unwrap();
                tape.backward(l).unwrap().accumulate_into(&mut store);
                adam_step(&mut store, &cfg);
            }
            let rows = bank.rows(&store);
            let mut worst = f64::NEG_INFINITY;
            for a in 0..k {
                for b in a + 1..k {
                    worst = worst.max(cosine(rows[a], rows[b]).unwrap());
                }
            }
            assert!(worst < 0.1, "K={k}: max pairwise cosine {worst}");
        }
    }

    proptest::proptest! {
        #[test]
        fn weights_and_score_are_scale_invariant(
            seed in 0u64..1000,
            s_q in 0.01f64..100.0,
            s_r in 0.01f64..100.0,
            s_c in proptest::collection::vec(0.01f64..100.0, 8),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = randv(&mut rng, 6);
            let protos: Vec<Vec<f64>> = (0..4).map(|_| randv(&mut rng, 6)).collect();
            let refs: Vec<&[f64]> = protos.iter().map(Vec::as_slice).collect();
            let w = contribution_weights(&q, &refs, 1.0).unwrap();
            let q2: Vec<f64> = q.iter().map(|v| v * s_q).collect();
            let p2: Vec<Vec<f64>> = protos.iter().map(|r| r.iter().map(|v| v * s_r).collect()).collect();
            let refs2: Vec<&[f64]> = p2.iter().map(Vec::as_slice).collect();
            let w2 = contribution_weights(&q2, &refs2, 1.0).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
            let e_i = randv(&mut rng, 16);
            let e_v = randv(&mut rng, 16);
            let s = prototype_score(&e_i, &e_v, &w).unwrap();
            let scale = |e: &[f64], off: usize| -> Vec<f64> {
                e.iter().enumerate().map(|(j, v)| v * s_c[off + j / 4]).collect()
            };
            let s2 = prototype_score(&scale(&e_i, 0), &scale(&e_v, 4), &w).unwrap();
            proptest::prop_assert!((s - s2).abs() < 1e-12);
            proptest::prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
