//! Video tower: skeleton graph, spatio-temporal graph convolutions, pooling
//! and projection into the shared embedding space.
//!
//! Activations are laid out as `[batch·time·landmarks × channels]` rows, so
//! the per-layer channel map is a single matrix product.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::embedding::ChunkedEmbedding;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, SparseMix, Tape, TemporalGeometry, Tensor, Var};

pub const LANDMARKS: usize = 33;
pub const POSE_CHANNELS: usize = 4;

/// Landmark indices used for root-centering and torso scaling.
const LEFT_SHOULDER: usize = 11;
const RIGHT_SHOULDER: usize = 12;
const LEFT_HIP: usize = 23;
const RIGHT_HIP: usize = 24;

const DEFAULT_EDGES: &str = include_str!("../data/blazepose_edges.txt");

/// Parse an edge list: one `i j` pair per line, `#` comments and blank lines ignored.
pub fn parse_edges(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Graph(format!("line {}: bad landmark index {s:?}", no + 1)))
        };
        match parts.as_slice() {
            [a, b] => edges.push((parse(a)?, parse(b)?)),
            _ => return Err(Error::Graph(format!("line {}: expected `i j`, got {line:?}", no + 1))),
        }
    }
    Ok(edges)
}

pub fn load_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edges(&text)
}

fn binary_adjacency(node_count: usize, edges: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut e = vec![0.0; node_count * node_count];
    for &(a, b) in edges {
        if a >= node_count || b >= node_count {
            return Err(Error::Graph(format!(
                "edge ({a}, {b}) out of range for {node_count} nodes"
            )));
        }
        if a == b {
            return Err(Error::Graph(format!("self-edge ({a}, {a}); self-loops are implicit")));
        }
        if e[a * node_count + b] != 0.0 {
            return Err(Error::Graph(format!("duplicate edge ({a}, {b})")));
        }
        e[a * node_count + b] = 1.0;
        e[b * node_count + a] = 1.0;
    }
    for i in 0..node_count {
        e[i * node_count + i] = 1.0;
    }
    Ok(e)
}

/// Symmetrically normalized adjacency with self-loops, `D^{-1/2}(E+I)D^{-1/2}`.
pub fn build_adjacency(node_count: usize, edges: &[(usize, usize)]) -> Result<Tensor> {
    let e = binary_adjacency(node_count, edges)?;
    let deg: Vec<f64> = e.chunks(node_count).map(|r| r.iter().sum()).collect();
    let mut a = e;
    for i in 0..node_count {
        for j in 0..node_count {
            a[i * node_count + j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    Tensor::matrix(node_count, node_count, a)
}

/// Random-walk normalization `D^{-1}(E+I)`; rows sum to one.
pub fn build_random_walk_adjacency(node_count: usize, edges: &[(usize, usize)]) -> Result<Tensor> {
    let mut e = binary_adjacency(node_count, edges)?;
    for row in e.chunks_mut(node_count) {
        let d: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= d);
    }
    Tensor::matrix(node_count, node_count, e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub adjacency_norm: Tensor,
}

impl SkeletonGraph {
    pub fn new(node_count: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let adjacency_norm = build_adjacency(node_count, &edges)?;
        Ok(SkeletonGraph {
            node_count,
            edges,
            adjacency_norm,
        })
    }

    /// The 33-landmark BlazePose topology.
    pub fn blazepose() -> Self {
        let edges = parse_edges(DEFAULT_EDGES).expect("bundled edge list parses");
        SkeletonGraph::new(LANDMARKS, edges).expect("bundled edge list is valid")
    }
}

/// One landmark trajectory: `frames` is `[T × 33 × 4]` with channels (x, y, z, visibility).
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrajectory {
    pub video_id: String,
    pub frames: Tensor,
}

impl PoseTrajectory {
    pub fn new(video_id: impl Into<String>, frames: Tensor) -> Result<Self> {
        let video_id = video_id.into();
        let d = frames.dims();
        if d.len() != 3 || d[0] == 0 || d[1] != LANDMARKS || d[2] != POSE_CHANNELS {
            return Err(Error::Data(format!(
                "video {video_id}: frames must be [T>=1, {LANDMARKS}, {POSE_CHANNELS}], got {d:?}"
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Data(format!("video {video_id}: non-finite coordinate")));
        }
        for (i, lm) in frames.data().chunks(POSE_CHANNELS).enumerate() {
            if !(0.0..=1.0).contains(&lm[3]) {
                return Err(Error::Data(format!(
                    "video {video_id}: visibility {} outside [0, 1] at frame {}, landmark {}",
                    lm[3],
                    i / LANDMARKS,
                    i % LANDMARKS
                )));
            }
        }
        Ok(PoseTrajectory { video_id, frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    /// Frames `[start, start+len)` as a `[len × 33 × 4]` tensor.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.num_frames() {
            return Err(Error::Window {
                expected: start + len,
                got: self.num_frames(),
            });
        }
        let per = LANDMARKS * POSE_CHANNELS;
        Tensor::new(
            vec![len, LANDMARKS, POSE_CHANNELS],
            self.frames.data()[start * per..(start + len) * per].to_vec(),
        )
    }
}

/// Root-center every frame on the mid-hip and scale by the window's mean torso length.
/// Visibility passes through. Windows whose torso length is below 1e-9 are only centered.
pub fn normalize_window(frames: &Tensor) -> Tensor {
    let per = LANDMARKS * POSE_CHANNELS;
    let t = frames.len() / per;
    let src = frames.data();
    let lm = |f: usize, l: usize, c: usize| src[f * per + l * POSE_CHANNELS + c];
    let mut hips = Vec::with_capacity(t);
    let mut torso = 0.0;
    for f in 0..t {
        let hip: [f64; 3] = std::array::from_fn(|c| 0.5 * (lm(f, LEFT_HIP, c) + lm(f, RIGHT_HIP, c)));
        let sh: [f64; 3] = std::array::from_fn(|c| 0.5 * (lm(f, LEFT_SHOULDER, c) + lm(f, RIGHT_SHOULDER, c)));
        torso += (0..3).map(|c| (sh[c] - hip[c]).powi(2)).sum::<f64>().sqrt();
        hips.push(hip);
    }
    torso /= t as f64;
    let scale = if torso < 1e-9 { 1.0 } else { 1.0 / torso };
    let mut out = frames.clone();
    let dst = out.data_mut();
    for f in 0..t {
        for l in 0..LANDMARKS {
            let base = f * per + l * POSE_CHANNELS;
            for c in 0..3 {
                dst[base + c] = (src[base + c] - hips[f][c]) * scale;
            }
        }
    }
    out
}

/// One spatio-temporal graph convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StgcnLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
    pub relu: bool,
}

impl StgcnLayerSpec {
    pub fn new(in_channels: usize, out_channels: usize, temporal_kernel: usize, temporal_stride: usize) -> Self {
        StgcnLayerSpec {
            in_channels,
            out_channels,
            temporal_kernel,
            temporal_stride,
            relu: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.temporal_stride == 0 {
            return Err(Error::Config(format!("layer {self:?} has a zero size")));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        Ok(())
    }
}

/// Channels 4→64→128→256, time 10→10→5→5.
pub fn default_layer_stack() -> Vec<StgcnLayerSpec> {
    vec![
        StgcnLayerSpec::new(POSE_CHANNELS, 64, 3, 1),
        StgcnLayerSpec::new(64, 128, 3, 2),
        StgcnLayerSpec::new(128, 256, 3, 1),
    ]
}

/// Output `(channels, frames)` of a stack applied to `t_in` frames.
pub fn stack_output_shape(layers: &[StgcnLayerSpec], t_in: usize) -> (usize, usize) {
    layers.iter().fold((POSE_CHANNELS, t_in), |(_, t), l| {
        (l.out_channels, t.div_ceil(l.temporal_stride))
    })
}

/// Parameter handles of one layer: channel map `[C_in × C_out]`, depthwise
/// temporal kernel `[C_out × k]` and its bias `[C_out]`.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub spec: StgcnLayerSpec,
    pub weight: ParamId,
    pub temporal_weight: ParamId,
    pub temporal_bias: ParamId,
}

/// Apply one layer on the tape. `x` is `[batch·t_in·nodes × C_in]`.
pub fn stgcn_layer(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    layer: &LayerParams,
    mix: &Arc<SparseMix>,
    batch: usize,
    t_in: usize,
) -> Result<(Var, usize)> {
    let spec = layer.spec;
    let nodes = mix.size();
    let dims = tape.value(x).dims().to_vec();
    if dims != [batch * t_in * nodes, spec.in_channels] {
        return Err(Error::shape(format!(
            "layer {spec:?} got input {dims:?}, expected [{}, {}]",
            batch * t_in * nodes,
            spec.in_channels
        )));
    }
    let mixed = tape.graph_mix(x, mix.clone())?;
    let w = tape.param(store, layer.weight);
    let mapped = tape.matmul(mixed, w)?;
    let tw = tape.param(store, layer.temporal_weight);
    let tb = tape.param(store, layer.temporal_bias);
    let geom = TemporalGeometry {
        batch,
        t_in,
        nodes,
        stride: spec.temporal_stride,
    };
    let conv = tape.temporal_conv(mapped, tw, tb, geom)?;
    let out = if spec.relu { tape.relu(conv) } else { conv };
    Ok((out, geom.t_out()))
}

#[derive(Clone, Debug)]
pub struct VideoEmbedding {
    pub e_v: ChunkedEmbedding,
}

/// The video tower.
#[derive(Clone, Debug)]
pub struct PoseEncoder {
    pub layers: Vec<LayerParams>,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub graph: SkeletonGraph,
    mix: Arc<SparseMix>,
    pub window_len: usize,
    pub embed_dim: usize,
}

fn uniform(rng: &mut impl Rng, dims: &[usize], bound: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("dims match data")
}

impl PoseEncoder {
    /// Register freshly initialized parameters under `video.*`.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        graph: SkeletonGraph,
        layers: &[StgcnLayerSpec],
        window_len: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("the video tower needs at least one layer".into()));
        }
        let mut prev = POSE_CHANNELS;
        let mut params = Vec::with_capacity(layers.len());
        for (l, spec) in layers.iter().enumerate() {
            spec.validate()?;
            if spec.in_channels != prev {
                return Err(Error::Config(format!(
                    "layer {l} expects {} input channels, previous layer gives {prev}",
                    spec.in_channels
                )));
            }
            prev = spec.out_channels;
            let (ci, co, k) = (spec.in_channels, spec.out_channels, spec.temporal_kernel);
            let weight = store.register(
                format!("video.l{l}.w"),
                uniform(rng, &[ci, co], (6.0 / ci as f64).sqrt()),
            )?;
            let mut tw = uniform(rng, &[co, k], 0.1);
            for c in 0..co {
                tw.data_mut()[c * k + k / 2] += 1.0;
            }
            let temporal_weight = store.register(format!("video.l{l}.tw"), tw)?;
            let temporal_bias = store.register(format!("video.l{l}.tb"), Tensor::zeros(&[co]))?;
            params.push(LayerParams {
                spec: *spec,
                weight,
                temporal_weight,
                temporal_bias,
            });
        }
        let bound = (6.0 / (prev + embed_dim) as f64).sqrt();
        let proj_weight = store.register("video.proj.w", uniform(rng, &[prev, embed_dim], bound))?;
        let proj_bias = store.register("video.proj.b", Tensor::zeros(&[embed_dim]))?;
        Self::from_parts(params, proj_weight, proj_bias, graph, window_len, embed_dim)
    }

    pub fn from_parts(
        layers: Vec<LayerParams>,
        proj_weight: ParamId,
        proj_bias: ParamId,
        graph: SkeletonGraph,
        window_len: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if window_len == 0 {
            return Err(Error::Config("window_len must be at least 1".into()));
        }
        let mix = Arc::new(SparseMix::from_dense(&graph.adjacency_norm)?);
        Ok(PoseEncoder {
            layers,
            proj_weight,
            proj_bias,
            graph,
            mix,
            window_len,
            embed_dim,
        })
    }

    /// Encode a batch of raw windows (`[T × 33 × 4]` each) to `[batch × embed_dim]`.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, windows: &[&Tensor]) -> Result<Var> {
        if windows.is_empty() {
            return Err(Error::shape("empty window batch"));
        }
        let per = self.graph.node_count * POSE_CHANNELS;
        let mut data = Vec::with_capacity(windows.len() * self.window_len * per);
        for w in windows {
            let t = w.len() / per;
            if w.len() % per != 0 || t != self.window_len {
                return Err(Error::Window {
                    expected: self.window_len,
                    got: t,
                });
            }
            data.extend_from_slice(normalize_window(w).data());
        }
        let batch = windows.len();
        let input = Tensor::matrix(batch * self.window_len * self.graph.node_count, POSE_CHANNELS, data)?;
        let mut x = tape.constant(input);
        let mut t = self.window_len;
        for layer in &self.layers {
            let (y, t_out) = stgcn_layer(tape, store, x, layer, &self.mix, batch, t)?;
            x = y;
            t = t_out;
        }
        let pooled = tape.group_mean(x, batch)?;
        let w = tape.param(store, self.proj_weight);
        let b = tape.param(store, self.proj_bias);
        let projected = tape.matmul(pooled, w)?;
        tape.add_row_bias(projected, b)
    }

    /// Frozen-weight encoding of one window.
    pub fn encode_video(&self, store: &ParamStore, window: &Tensor, chunks: usize) -> Result<VideoEmbedding> {
        let mut tape = Tape::new();
        let out = self.forward(store, &mut tape, &[window])?;
        Ok(VideoEmbedding {
            e_v: ChunkedEmbedding::new(tape.value(out).data().to_vec(), chunks)?,
        })
    }

    /// Frozen-weight encoding of many windows at once, one row per window.
    pub fn encode_batch(&self, store: &ParamStore, windows: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(store, &mut tape, windows)?;
        let v = tape.value(out);
        Ok((0..windows.len()).map(|i| v.row(i).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, GradcheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng, t: usize) -> Tensor {
        let mut data = Vec::with_capacity(t * LANDMARKS * POSE_CHANNELS);
        for _ in 0..t * LANDMARKS {
            data.extend([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..1.0),
            ]);
        }
        Tensor::new(vec![t, LANDMARKS, POSE_CHANNELS], data).unwrap()
    }

    #[test]
    fn single_node_adjacency_is_one() {
        assert_eq!(build_adjacency(1, &[]).unwrap().data(), &[1.0]);
    }

    #[test]
    fn two_node_adjacency_hand_computed() {
        // E+I = all ones, degrees 2: every entry 1/sqrt(2·2)
        assert_eq!(build_adjacency(2, &[(0, 1)]).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn out_of_range_edge_is_graph_error() {
        assert!(matches!(build_adjacency(33, &[(0, 33)]), Err(Error::Graph(_))));
        assert!(matches!(build_adjacency(3, &[(0, 1), (1, 0)]), Err(Error::Graph(_))));
    }

    #[test]
    fn blazepose_adjacency_symmetric_with_spectral_radius_at_most_one() {
        let g = SkeletonGraph::blazepose();
        let a = &g.adjacency_norm;
        assert_eq!(g.edges.len(), 35);
        for i in 0..LANDMARKS {
            assert!(a.get2(i, i) > 0.0);
            for j in 0..LANDMARKS {
                assert_eq!(a.get2(i, j), a.get2(j, i));
            }
        }
        // power iteration on A + I (positive definite shift) to find the top eigenvalue of A
        let mut v = vec![1.0; LANDMARKS];
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let mut w: Vec<f64> = (0..LANDMARKS)
                .map(|i| (0..LANDMARKS).map(|j| a.get2(i, j) * v[j]).sum::<f64>() + v[i])
                .collect();
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter_mut().for_each(|x| *x /= n);
            lambda = n - 1.0;
            v = w;
        }
        assert!(lambda <= 1.0 + 1e-9, "top eigenvalue {lambda}");
        assert!(lambda > 0.99);
    }

    #[test]
    fn random_walk_rows_sum_to_one() {
        let g = SkeletonGraph::blazepose();
        let rw = build_random_walk_adjacency(LANDMARKS, &g.edges).unwrap();
        for i in 0..LANDMARKS {
            let s: f64 = rw.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-15, "row {i} sums to {s}");
        }
    }

    #[test]
    fn edge_file_parsing() {
        let edges = parse_edges("# comment\n0 1\n\n2 3\n").unwrap();
        assert_eq!(edges, vec![(0, 1), (2, 3)]);
        assert!(parse_edges("0 1 2").is_err());
        assert!(parse_edges("0 x").is_err());
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut store = ParamStore::new();
        let c = 3;
        let spec = StgcnLayerSpec {
            relu: false,
            ..StgcnLayerSpec::new(c, c, 1, 1)
        };
        let layer = LayerParams {
            spec,
            weight: store.register("w", Tensor::identity(c)).unwrap(),
            temporal_weight: store
                .register("tw", Tensor::matrix(c, 1, vec![1.0; c]).unwrap())
                .unwrap(),
            temporal_bias: store.register("tb", Tensor::zeros(&[c])).unwrap(),
        };
        let mix = Arc::new(SparseMix::from_dense(&Tensor::identity(LANDMARKS)).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = uniform(&mut rng, &[2 * 4 * LANDMARKS, c], 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (y, t_out) = stgcn_layer(&mut tape, &store, x, &layer, &mix, 2, 4).unwrap();
        assert_eq!(t_out, 4);
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn default_stack_shapes_follow_layer_table() {
        let layers = default_layer_stack();
        assert_eq!(
            layers.iter().map(|l| l.out_channels).collect::<Vec<_>>(),
            vec![64, 128, 256]
        );
        assert_eq!(stack_output_shape(&layers, 10), (256, 5));
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = PoseEncoder::register(&mut store, &mut rng, SkeletonGraph::blazepose(), &layers, 10, 256).unwrap();
        let w = random_window(&mut rng, 10);
        let mut tape = Tape::new();
        let per = LANDMARKS * POSE_CHANNELS;
        let mut x = tape.constant(Tensor::matrix(10 * LANDMARKS, 4, w.data()[..10 * per].to_vec()).unwrap());
        let mut t = 10;
        let mut seen = vec![];
        for layer in &enc.layers {
            let (y, t_out) = stgcn_layer(&mut tape, &store, x, layer, &enc.mix, 1, t).unwrap();
            seen.push((tape.value(y).cols(), t_out));
            x = y;
            t = t_out;
        }
        assert_eq!(seen, vec![(64, 10), (128, 5), (256, 5)]);
        assert_eq!(tape.value(x).dims(), &[5 * LANDMARKS, 256]);
    }

    #[test]
    fn encode_video_output_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = PoseEncoder::register(
            &mut store,
            &mut rng,
            SkeletonGraph::blazepose(),
            &default_layer_stack(),
            10,
            256,
        )
        .unwrap();
        let w = random_window(&mut rng, 10);
        let a = enc.encode_video(&store, &w, 4).unwrap();
        let b = enc.encode_video(&store, &w, 4).unwrap();
        assert_eq!(a.e_v.as_slice().len(), 256);
        assert_eq!(a.e_v.chunk_dim(), 64);
        assert_eq!(a.e_v, b.e_v);
        let bad = random_window(&mut rng, 9);
        assert!(matches!(
            enc.encode_video(&store, &bad, 4),
            Err(Error::Window { expected: 10, got: 9 })
        ));
    }

    #[test]
    fn translation_is_removed_by_normalization() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = PoseEncoder::register(
            &mut store,
            &mut rng,
            SkeletonGraph::blazepose(),
            &default_layer_stack(),
            10,
            256,
        )
        .unwrap();
        let w = random_window(&mut rng, 10);
        let mut shifted = w.clone();
        for lm in shifted.data_mut().chunks_mut(POSE_CHANNELS) {
            lm[0] += 3.25;
            lm[1] -= 1.5;
            lm[2] += 0.75;
        }
        let a = enc.encode_video(&store, &w, 4).unwrap();
        let b = enc.encode_video(&store, &shifted, 4).unwrap();
        for (x, y) in a.e_v.as_slice().iter().zip(b.e_v.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn small_layer_gradcheck() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = SkeletonGraph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (1, 4)]).unwrap();
        let mix = Arc::new(SparseMix::from_dense(&g.adjacency_norm).unwrap());
        let spec = StgcnLayerSpec::new(3, 4, 3, 2);
        let layer = LayerParams {
            spec,
            weight: store.register("w", uniform(&mut rng, &[3, 4], 1.0)).unwrap(),
            temporal_weight: store.register("tw", uniform(&mut rng, &[4, 3], 1.0)).unwrap(),
            temporal_bias: store.register("tb", uniform(&mut rng, &[4], 0.5)).unwrap(),
        };
        let input = uniform(&mut rng, &[2 * 5 * 5, 3], 1.0);
        let weights = uniform(&mut rng, &[2 * 3 * 5, 4], 1.0);
        let report = gradcheck(
            &mut store,
            |s, tape| {
                let x = tape.constant(input.clone());
                let (y, _) = stgcn_layer(tape, s, x, &layer, &mix, 2, 5)?;
                let c = tape.constant(weights.clone());
                let p = tape.mul(y, c)?;
                Ok(tape.sum(p))
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

    #[test]
    fn full_tower_gradcheck() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layers = vec![StgcnLayerSpec::new(4, 6, 3, 1), StgcnLayerSpec::new(6, 8, 3, 2)];
        let enc = PoseEncoder::register(&mut store, &mut rng, SkeletonGraph::blazepose(), &layers, 4, 8).unwrap();
        let windows = [random_window(&mut rng, 4), random_window(&mut rng, 4)];
        let weights = uniform(&mut rng, &[2, 8], 1.0);
        let report = gradcheck(
            &mut store,
            |s, tape| {
                let refs: Vec<&Tensor> = windows.iter().collect();
                let e = enc.forward(s, tape, &refs)?;
                let c = tape.constant(weights.clone());
                let p = tape.mul(e, c)?;
                Ok(tape.sum(p))
            },
            &GradcheckOptions {
                tolerance: 1e-4,
                abs_floor: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
