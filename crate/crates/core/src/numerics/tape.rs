//! Reverse-mode automatic differentiation over coarse tensor ops.
//!
//! A [`Tape`] records every op applied during a forward pass together with
//! its output value. [`Tape::backward`] replays the records in reverse order,
//! visiting each node once, and returns the gradient of a scalar output with
//! respect to every recorded node. Parameter gradients are then folded into a
//! [`ParamStore`] with [`Gradients::accumulate_into`].

use std::sync::Arc;

use super::tensor::{dot, matmul_at_into, matmul_bt_into, norm};
use super::{ParamId, ParamStore, Tensor, DEGENERATE_NORM};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse square operator applied independently to every slab of rows
/// (one slab per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMix {
    pub fn from_dense(m: &Tensor) -> Result<Self> {
        let d = m.dims();
        if d.len() != 2 || d[0] != d[1] {
            return Err(Error::shape(format!("mixing operator must be square, got {d:?}")));
        }
        let n = d[0];
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter_map(|j| {
                        let v = m.get2(i, j);
                        (v != 0.0).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        Ok(SparseMix { n, rows })
    }

    pub fn size(&self) -> usize {
        self.n
    }
}

/// Geometry of a depthwise temporal convolution over `[batch·time·nodes × channels]` rows.
#[derive(Clone, Copy, Debug)]
pub struct TemporalGeometry {
    pub batch: usize,
    pub t_in: usize,
    pub nodes: usize,
    pub stride: usize,
}

impl TemporalGeometry {
    pub fn t_out(&self) -> usize {
        self.t_in.div_ceil(self.stride)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Relu(Var),
    Sum(Var),
    AddN(Vec<Var>),
    GroupMean {
        x: Var,
        groups: usize,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Stack(Vec<Var>),
    Cosine {
        a: Var,
        b: Var,
        na: f64,
        nb: f64,
        cos: f64,
    },
    Softmax(Var),
    Dot(Var, Var),
    BceLogits {
        y: Var,
        target: f64,
    },
    GraphMix {
        x: Var,
        mix: Arc<SparseMix>,
    },
    TemporalConv {
        x: Var,
        w: Var,
        b: Var,
        geom: TemporalGeometry,
    },
    FactorMerge {
        w: Var,
        factors: Arc<Tensor>,
        mask: Arc<Vec<f64>>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records ops for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Add parameter gradients into `store`'s `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{what} of left {:?} and right {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.dims().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// `x[m×n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        if vb.len() != n {
            return Err(Error::shape(format!(
                "row bias of length {} for input {:?}",
                vb.len(),
                vx.dims()
            )));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("add_n of nothing"))?;
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            self.same_shape(first, x, "add_n")?;
            out.add_assign(self.value(x));
        }
        Ok(self.push(out, Op::AddN(xs.to_vec())))
    }

    /// Mean over each of `groups` equal, contiguous blocks of rows: `[groups·r × c] → [groups × c]`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = (vx.rows(), vx.cols());
        if groups == 0 || rows % groups != 0 {
            return Err(Error::shape(format!("{rows} rows do not split into {groups} groups")));
        }
        let per = rows / groups;
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            let o = &mut out[g * c..(g + 1) * c];
            for r in 0..per {
                for (ov, xv) in o.iter_mut().zip(vx.row(g * per + r)) {
                    *ov += xv;
                }
            }
            o.iter_mut().for_each(|v| *v /= per as f64);
        }
        let out = Tensor::matrix(groups, c, out)?;
        Ok(self.push(out, Op::GroupMean { x, groups }))
    }

    /// Contiguous slice `[offset, offset+len)` of the flattened data, as a vector.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if offset + len > vx.len() {
            return Err(Error::shape(format!(
                "slice [{offset}, {}) of a tensor with {} values",
                offset + len,
                vx.len()
            )));
        }
        let out = Tensor::vector(vx.data()[offset..offset + len].to_vec());
        Ok(self.push(out, Op::Slice { x, offset }))
    }

    /// Stack scalar nodes into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.len() != 1 {
                return Err(Error::shape(format!("stack expects scalars, got {:?}", v.dims())));
            }
            data.push(v.item());
        }
        Ok(self.push(Tensor::vector(data), Op::Stack(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::shape(format!(
                "cosine of left {:?} and right {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let (na, nb) = (norm(va.data()), norm(vb.data()));
        for (what, n) in [("left operand", na), ("right operand", nb)] {
            if n < DEGENERATE_NORM {
                return Err(Error::DegenerateVector {
                    what: what.into(),
                    norm: n,
                });
            }
        }
        let cos = dot(va.data(), vb.data()) / (na * nb);
        Ok(self.push(Tensor::scalar(cos), Op::Cosine { a, b, na, nb, cos }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = super::tensor::softmax(self.value(x).data())?;
        Ok(self.push(Tensor::vector(out), Op::Softmax(x)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(format!(
                "dot of left {:?} and right {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let d = dot(self.value(a).data(), self.value(b).data());
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b)))
    }

    /// Binary cross entropy of a logit `y` against a soft target in `[0, 1]`,
    /// as a loss to minimize: `softplus(y) − target·y`.
    pub fn bce_logits(&mut self, y: Var, target: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Label(format!("target {target} outside [0, 1]")));
        }
        let yv = self.scalar(y);
        let loss = softplus(yv) - target * yv;
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { y, target }))
    }

    /// Apply `mix` to every contiguous slab of `mix.size()` rows.
    pub fn graph_mix(&mut self, x: Var, mix: Arc<SparseMix>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c, n) = (vx.rows(), vx.cols(), mix.size());
        if rows % n != 0 {
            return Err(Error::shape(format!(
                "{rows} rows are not a multiple of the {n}-node graph"
            )));
        }
        let src = vx.data();
        let mut out = vec![0.0; rows * c];
        for slab in 0..rows / n {
            let base = slab * n;
            for (i, entries) in mix.rows.iter().enumerate() {
                let o = &mut out[(base + i) * c..(base + i + 1) * c];
                for &(j, a) in entries {
                    let xr = &src[(base + j) * c..(base + j + 1) * c];
                    for (ov, xv) in o.iter_mut().zip(xr) {
                        *ov += a * xv;
                    }
                }
            }
        }
        let out = Tensor::new(vx.dims().to_vec(), out)?;
        Ok(self.push(out, Op::GraphMix { x, mix }))
    }

    /// Depthwise 1-D convolution along time with symmetric zero padding.
    /// `x` is `[batch·t_in·nodes × c]`, `w` is `[c × kernel]` (odd kernel), `b` is `[c]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var, geom: TemporalGeometry) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let c = vx.cols();
        let k = vw.cols();
        if vw.dims() != [c, k] || vb.len() != c || k % 2 == 0 || geom.stride == 0 {
            return Err(Error::shape(format!(
                "temporal conv: input {:?}, kernel {:?}, bias {:?}, stride {}",
                vx.dims(),
                vw.dims(),
                vb.dims(),
                geom.stride
            )));
        }
        if vx.rows() != geom.batch * geom.t_in * geom.nodes {
            return Err(Error::shape(format!(
                "temporal conv input has {} rows, geometry needs {}x{}x{}",
                vx.rows(),
                geom.batch,
                geom.t_in,
                geom.nodes
            )));
        }
        let t_out = geom.t_out();
        let pad = (k / 2) as isize;
        let (src, wd, bd) = (vx.data(), vw.data(), vb.data());
        let mut out = vec![0.0; geom.batch * t_out * geom.nodes * c];
        for bi in 0..geom.batch {
            for to in 0..t_out {
                for nd in 0..geom.nodes {
                    let orow = ((bi * t_out + to) * geom.nodes + nd) * c;
                    out[orow..orow + c].copy_from_slice(bd);
                    for q in 0..k {
                        let ti = (to * geom.stride) as isize + q as isize - pad;
                        if ti < 0 || ti >= geom.t_in as isize {
                            continue;
                        }
                        let irow = ((bi * geom.t_in + ti as usize) * geom.nodes + nd) * c;
                        for ch in 0..c {
                            out[orow + ch] += wd[ch * k + q] * src[irow + ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(geom.batch * t_out * geom.nodes, c, out)?;
        Ok(self.push(out, Op::TemporalConv { x, w, b, geom }))
    }

    /// Masked weighted sum of factor rows: `factors` is `[items × F × D]`, `w` is `[F]`,
    /// `mask` is `[F]` with 0/1 entries; output `[items × D]`.
    pub fn factor_merge(&mut self, w: Var, factors: Arc<Tensor>, mask: Arc<Vec<f64>>) -> Result<Var> {
        let fd = factors.dims();
        let vw = self.value(w);
        if fd.len() != 3 || vw.len() != fd[1] || mask.len() != fd[1] {
            return Err(Error::shape(format!(
                "factor merge: factors {:?}, weights {:?}, mask of {}",
                fd,
                vw.dims(),
                mask.len()
            )));
        }
        let (n, f, d) = (fd[0], fd[1], fd[2]);
        let mut out = vec![0.0; n * d];
        let src = factors.data();
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..f {
                let coef = vw.data()[j] * mask[j];
                if coef == 0.0 {
                    continue;
                }
                let row = &src[(i * f + j) * d..(i * f + j + 1) * d];
                for (ov, fv) in o.iter_mut().zip(row) {
                    *ov += coef * fv;
                }
            }
        }
        let out = Tensor::matrix(n, d, out)?;
        Ok(self.push(out, Op::FactorMerge { w, factors, mask }))
    }

    /// Gradients of scalar node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                self.dims(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::new(self.dims(output).to_vec(), vec![1.0])?);
        let mut params = Vec::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((idx, *id)),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.dims()[0], va.dims()[1], vb.dims()[1]);
                    let ga = acc(&mut grads, *a, va.dims());
                    matmul_bt_into(g.data(), vb.data(), ga.data_mut(), m, k, n);
                    let gb = acc(&mut grads, *b, vb.dims());
                    matmul_at_into(va.data(), g.data(), gb.data_mut(), m, k, n);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.dims()).add_assign(&g);
                    acc(&mut grads, *b, g.dims()).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.dims()).add_assign(&g);
                    axpy(acc(&mut grads, *b, g.dims()), -1.0, &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, va.dims());
                    for ((o, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gv * bv;
                    }
                    let gb = acc(&mut grads, *b, vb.dims());
                    for ((o, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * av;
                    }
                }
                Op::Scale(a, c) => axpy(acc(&mut grads, *a, g.dims()), *c, &g),
                Op::AddRowBias(x, bias) => {
                    acc(&mut grads, *x, g.dims()).add_assign(&g);
                    let n = g.cols();
                    let gb = acc(&mut grads, *bias, self.dims(*bias));
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                Op::Relu(x) => {
                    let vx = self.value(*x);
                    let gx = acc(&mut grads, *x, vx.dims());
                    for ((o, gv), xv) in gx.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    let gx = acc(&mut grads, *x, self.dims(*x));
                    gx.data_mut().iter_mut().for_each(|o| *o += gv);
                }
                Op::AddN(xs) => {
                    for x in xs {
                        acc(&mut grads, *x, g.dims()).add_assign(&g);
                    }
                }
                Op::GroupMean { x, groups } => {
                    let vx = self.value(*x);
                    let (rows, c) = (vx.rows(), vx.cols());
                    let per = rows / groups;
                    let gx = acc(&mut grads, *x, vx.dims());
                    for gi in 0..*groups {
                        let gr = g.row(gi);
                        for r in 0..per {
                            let row = &mut gx.data_mut()[(gi * per + r) * c..(gi * per + r + 1) * c];
                            for (o, v) in row.iter_mut().zip(gr) {
                                *o += v / per as f64;
                            }
                        }
                    }
                }
                Op::Slice { x, offset } => {
                    let gx = acc(&mut grads, *x, self.dims(*x));
                    for (o, v) in gx.data_mut()[*offset..*offset + g.len()].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                Op::Stack(xs) => {
                    for (x, gv) in xs.iter().zip(g.data()) {
                        let gx = acc(&mut grads, *x, self.dims(*x));
                        gx.data_mut()[0] += gv;
                    }
                }
                Op::Reshape(x) => {
                    let gx = acc(&mut grads, *x, self.dims(*x));
                    for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                Op::Cosine { a, b, na, nb, cos } => {
                    // d cos / da = b/(|a||b|) − cos·a/|a|²
                    let gv = g.item();
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let inv = 1.0 / (na * nb);
                    let ga = acc(&mut grads, *a, va.dims());
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *o += gv * (y * inv - cos * x / (na * na));
                    }
                    let gb = acc(&mut grads, *b, vb.dims());
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *o += gv * (x * inv - cos * y / (nb * nb));
                    }
                }
                Op::Softmax(x) => {
                    let s = node.value.data();
                    let inner = dot(s, g.data());
                    let gx = acc(&mut grads, *x, self.dims(*x));
                    for ((o, sv), gv) in gx.data_mut().iter_mut().zip(s).zip(g.data()) {
                        *o += sv * (gv - inner);
                    }
                }
                Op::Dot(a, b) => {
                    let gv = g.item();
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    axpy(acc(&mut grads, *a, va.dims()), gv, &vb);
                    axpy(acc(&mut grads, *b, vb.dims()), gv, &va);
                }
                Op::BceLogits { y, target } => {
                    let yv = self.scalar(*y);
                    let gy = acc(&mut grads, *y, self.dims(*y));
                    gy.data_mut()[0] += g.item() * (sigmoid(yv) - target);
                }
                Op::GraphMix { x, mix } => {
                    let vx = self.value(*x);
                    let (rows, c, n) = (vx.rows(), vx.cols(), mix.size());
                    let gx = acc(&mut grads, *x, vx.dims());
                    let gd = g.data();
                    for slab in 0..rows / n {
                        let base = slab * n;
                        for (i, entries) in mix.rows.iter().enumerate() {
                            let go = &gd[(base + i) * c..(base + i + 1) * c];
                            for &(j, a) in entries {
                                let row = &mut gx.data_mut()[(base + j) * c..(base + j + 1) * c];
                                for (o, v) in row.iter_mut().zip(go) {
                                    *o += a * v;
                                }
                            }
                        }
                    }
                }
                Op::TemporalConv { x, w, b, geom } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (c, k) = (vx.cols(), vw.cols());
                    let t_out = geom.t_out();
                    let pad = (k / 2) as isize;
                    let gd = g.data();
                    let mut gx = Tensor::zeros(vx.dims());
                    let mut gw = Tensor::zeros(vw.dims());
                    let mut gb = Tensor::zeros(&[c]);
                    for bi in 0..geom.batch {
                        for to in 0..t_out {
                            for nd in 0..geom.nodes {
                                let orow = ((bi * t_out + to) * geom.nodes + nd) * c;
                                for (o, v) in gb.data_mut().iter_mut().zip(&gd[orow..orow + c]) {
                                    *o += v;
                                }
                                for q in 0..k {
                                    let ti = (to * geom.stride) as isize + q as isize - pad;
                                    if ti < 0 || ti >= geom.t_in as isize {
                                        continue;
                                    }
                                    let irow = ((bi * geom.t_in + ti as usize) * geom.nodes + nd) * c;
                                    for ch in 0..c {
                                        let gv = gd[orow + ch];
                                        gw.data_mut()[ch * k + q] += gv * vx.data()[irow + ch];
                                        gx.data_mut()[irow + ch] += gv * vw.data()[ch * k + q];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, vx.dims()).add_assign(&gx);
                    acc(&mut grads, *w, gw.dims()).add_assign(&gw);
                    acc(&mut grads, *b, &[c]).add_assign(&gb);
                }
                Op::FactorMerge { w, factors, mask } => {
                    let fd = factors.dims();
                    let (n, f, d) = (fd[0], fd[1], fd[2]);
                    let src = factors.data();
                    let gw = acc(&mut grads, *w, &[f]);
                    for i in 0..n {
                        let go = &g.data()[i * d..(i + 1) * d];
                        for j in 0..f {
                            if mask[j] == 0.0 {
                                continue;
                            }
                            let row = &src[(i * f + j) * d..(i * f + j + 1) * d];
                            gw.data_mut()[j] += mask[j] * dot(go, row);
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, dims: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(dims))
}

fn axpy(y: &mut Tensor, a: f64, x: &Tensor) {
    for (o, v) in y.data_mut().iter_mut().zip(x.data()) {
        *o += a * v;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
