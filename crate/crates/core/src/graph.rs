//! Reverse-mode autodiff over 2-D tensors.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, appends a node,
//! and records enough to run the backward pass. Nodes only ever reference
//! earlier nodes, so the tape order is already topological and the backward
//! pass is a single reverse sweep.
//!
//! Masked softmax uses `true` = attend; masked-out entries receive exactly
//! zero probability and therefore exactly zero gradient.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array1, Array2, Axis};

use crate::param::ParamStore;
use crate::scalar::{s as sc, Scalar};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    /// Broadcast-add a 1 x C row onto every row of an L x C tensor.
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        src: NodeId,
        start: usize,
    },
    SliceCols {
        src: NodeId,
        start: usize,
    },
    // The attention mask is consumed by the eager forward pass; the backward
    // rule needs only the output (masked entries have probability exactly 0).
    SoftmaxRows {
        src: NodeId,
    },
    LayerNorm {
        src: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gelu(NodeId),
    MeanRows(NodeId),
    /// Gather rows of `table` by index; duplicate ids accumulate gradient.
    EmbedRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Mean negative log-likelihood of `targets[i]` under row `i` of the
    /// logits, restricted to positions where `mask[i]` is true.
    CrossEntropyMasked {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<String>,
}

/// Autodiff tape. Create one per forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id].value;
        (v.nrows(), v.ncols())
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn input(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. The same name always returns the
    /// same node within one graph, so shared weights accumulate gradient.
    /// Gradient flows only if the store marks the parameter trainable.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> NodeId {
        if let Some(&id) = self.param_nodes.get(name) {
            return id;
        }
        let value = store.get(name).clone();
        let trainable = store.is_trainable(name);
        let id = self.push(value, Op::Leaf, trainable);
        self.nodes[id].param = Some(name.to_string());
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1, "add_row: row must be 1 x C");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let v = &self.nodes[a].value + &self.nodes[row].value;
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a).1,
            self.shape(b).0,
            "matmul: inner dimension mismatch"
        );
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            assert_eq!(pv.ncols(), cols, "concat_rows: width mismatch");
            v.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            assert_eq!(pv.nrows(), rows, "concat_cols: height mismatch");
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        assert!(start + len <= self.shape(src).0, "slice_rows: out of range");
        let v = self.nodes[src]
            .value
            .slice(s![start..start + len, ..])
            .to_owned();
        let ng = self.needs(src);
        self.push(v, Op::SliceRows { src, start }, ng)
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        assert!(start + len <= self.shape(src).1, "slice_cols: out of range");
        let v = self.nodes[src]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        let ng = self.needs(src);
        self.push(v, Op::SliceCols { src, start }, ng)
    }

    /// Row-wise softmax with an optional boolean mask (`true` = attend).
    /// Masked-out entries get exactly zero probability. Every row must keep
    /// at least one attendable entry; callers guarantee this via fallbacks.
    pub fn softmax_rows(&mut self, src: NodeId, mask: Option<Array2<bool>>) -> NodeId {
        if let Some(m) = &mask {
            assert_eq!(
                (m.nrows(), m.ncols()),
                self.shape(src),
                "softmax_rows: mask shape mismatch"
            );
            for r in m.rows() {
                assert!(
                    r.iter().any(|&k| k),
                    "softmax_rows: fully masked row has no attendable entry"
                );
            }
        }
        let v = softmax_rows_masked(&self.nodes[src].value, mask.as_ref());
        let ng = self.needs(src);
        self.push(v, Op::SoftmaxRows { src }, ng)
    }

    /// Per-row layer normalization with learned scale and shift (both 1 x C).
    pub fn layer_norm(&mut self, src: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let c = self.shape(src).1;
        assert_eq!(self.shape(gamma), (1, c), "layer_norm: gamma must be 1 x C");
        assert_eq!(self.shape(beta), (1, c), "layer_norm: beta must be 1 x C");
        let x = &self.nodes[src].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let mut v = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let (xhat, _, _) = ln_row(&row.to_owned());
            for j in 0..c {
                v[[i, j]] = xhat[j] * g[[0, j]] + b[[0, j]];
            }
        }
        let ng = self.needs(src) || self.needs(gamma) || self.needs(beta);
        self.push(v, Op::LayerNorm { src, gamma, beta }, ng)
    }

    /// GELU with the tanh approximation (smooth, finite-difference friendly).
    pub fn gelu(&mut self, src: NodeId) -> NodeId {
        let v = self.nodes[src].value.mapv(gelu_val);
        let ng = self.needs(src);
        self.push(v, Op::Gelu(src), ng)
    }

    /// Mean over rows: L x C -> 1 x C.
    pub fn mean_rows(&mut self, src: NodeId) -> NodeId {
        let x = &self.nodes[src].value;
        let l = sc::<T>(x.nrows() as f64);
        let mean = x.sum_axis(Axis(0)).mapv(|v| v / l);
        let v = mean.insert_axis(Axis(0));
        let ng = self.needs(src);
        self.push(v, Op::MeanRows(src), ng)
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        assert!(!ids.is_empty(), "embed_rows: empty id list");
        let t = &self.nodes[table].value;
        for &id in ids {
            assert!(id < t.nrows(), "embed_rows: id {} out of vocab {}", id, t.nrows());
        }
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        let ng = self.needs(table);
        self.push(
            v,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Mean masked token NLL; output is 1 x 1. At least one position must be
    /// masked in.
    pub fn cross_entropy_masked(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> NodeId {
        let (l, vocab) = self.shape(logits);
        assert_eq!(targets.len(), l, "cross_entropy: target length mismatch");
        assert_eq!(mask.len(), l, "cross_entropy: mask length mismatch");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "cross_entropy: no masked positions");
        let x = &self.nodes[logits].value;
        let mut total = 0.0f64;
        for i in 0..l {
            if !mask[i] {
                continue;
            }
            assert!(targets[i] < vocab, "cross_entropy: target out of vocab");
            let row: Vec<f64> = x.row(i).iter().map(|&v| v.to_f64().unwrap()).collect();
            total += logsumexp(&row) - row[targets[i]];
        }
        let v = Array2::from_elem((1, 1), sc::<T>(total / count as f64));
        let ng = self.needs(logits);
        self.push(
            v,
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Runs the backward pass from a 1 x 1 loss node.
    pub fn backward(&self, loss: NodeId) -> Grads<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be 1 x 1");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), T::one()));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let dy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Grads { grads }
    }

    fn accumulate_inputs(&self, id: NodeId, dy: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let add_to = |grads: &mut [Option<Array2<T>>], tgt: NodeId, g: Array2<T>| {
            if !self.nodes[tgt].needs_grad {
                return;
            }
            match &mut grads[tgt] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, dy.clone());
                add_to(grads, *b, dy.clone());
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, dy.clone());
                let summed = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *row, summed);
            }
            Op::Scale(a, c) => {
                add_to(grads, *a, dy.mapv(|v| v * *c));
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, dy.dot(&bv.t()));
                add_to(grads, *b, av.t().dot(dy));
            }
            Op::Transpose(a) => {
                add_to(grads, *a, dy.t().to_owned());
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    add_to(grads, p, dy.slice(s![at..at + h, ..]).to_owned());
                    at += h;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    add_to(grads, p, dy.slice(s![.., at..at + w]).to_owned());
                    at += w;
                }
            }
            Op::SliceRows { src, start } => {
                let mut g = Array2::zeros(self.nodes[*src].value.raw_dim());
                g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                add_to(grads, *src, g);
            }
            Op::SliceCols { src, start } => {
                let mut g = Array2::zeros(self.nodes[*src].value.raw_dim());
                g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                add_to(grads, *src, g);
            }
            Op::SoftmaxRows { src } => {
                // dx = p * (dy - sum_j dy_j p_j), rowwise. Masked entries have
                // p = 0, so their gradient is exactly zero.
                let p = &self.nodes[id].value;
                let mut g = Array2::zeros(p.raw_dim());
                for i in 0..p.nrows() {
                    let dot: T = (0..p.ncols()).map(|j| dy[[i, j]] * p[[i, j]]).sum();
                    for j in 0..p.ncols() {
                        g[[i, j]] = p[[i, j]] * (dy[[i, j]] - dot);
                    }
                }
                add_to(grads, *src, g);
            }
            Op::LayerNorm { src, gamma, beta } => {
                let x = &self.nodes[*src].value;
                let gm = &self.nodes[*gamma].value;
                let c = x.ncols();
                let cn = sc::<T>(c as f64);
                let mut gx = Array2::zeros(x.raw_dim());
                let mut gg = Array2::zeros((1, c));
                let mut gb = Array2::zeros((1, c));
                for i in 0..x.nrows() {
                    let (xhat, _, sigma) = ln_row(&x.row(i).to_owned());
                    let a: Array1<T> =
                        Array1::from_iter((0..c).map(|j| dy[[i, j]] * gm[[0, j]]));
                    let mean_a: T = a.iter().copied().sum::<T>() / cn;
                    let mean_ax: T =
                        (0..c).map(|j| a[j] * xhat[j]).sum::<T>() / cn;
                    for j in 0..c {
                        gx[[i, j]] = (a[j] - mean_a - xhat[j] * mean_ax) / sigma;
                        gg[[0, j]] += dy[[i, j]] * xhat[j];
                        gb[[0, j]] += dy[[i, j]];
                    }
                }
                add_to(grads, *src, gx);
                add_to(grads, *gamma, gg);
                add_to(grads, *beta, gb);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let g = ndarray::Zip::from(dy).and(x).map_collect(|&d, &v| d * gelu_grad(v));
                add_to(grads, *a, g);
            }
            Op::MeanRows(a) => {
                let l = self.shape(*a).0;
                let inv = T::one() / sc::<T>(l as f64);
                let mut g = Array2::zeros(self.nodes[*a].value.raw_dim());
                for i in 0..l {
                    for j in 0..g.ncols() {
                        g[[i, j]] = dy[[0, j]] * inv;
                    }
                }
                add_to(grads, *a, g);
            }
            Op::EmbedRows { table, ids } => {
                let mut g = Array2::zeros(self.nodes[*table].value.raw_dim());
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..g.ncols() {
                        g[[id, j]] += dy[[i, j]];
                    }
                }
                add_to(grads, *table, g);
            }
            Op::CrossEntropyMasked {
                logits,
                targets,
                mask,
            } => {
                let x = &self.nodes[*logits].value;
                let count = mask.iter().filter(|&&m| m).count();
                let scale = dy[[0, 0]] / sc::<T>(count as f64);
                let mut g = Array2::zeros(x.raw_dim());
                for i in 0..x.nrows() {
                    if !mask[i] {
                        continue;
                    }
                    let p = softmax_row_f64(&x.row(i).to_owned());
                    for j in 0..x.ncols() {
                        let delta = if j == targets[i] { 1.0 } else { 0.0 };
                        g[[i, j]] = sc::<T>(p[j] - delta) * scale;
                    }
                }
                add_to(grads, *logits, g);
            }
        }
    }
}

/// Result of a backward pass.
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, id: NodeId) -> Option<&Array2<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Collects gradients for trainable named parameters.
    pub fn into_param_grads(mut self, graph: &Graph<T>) -> BTreeMap<String, Array2<T>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &graph.param_nodes {
            if let Some(g) = self.grads.get_mut(id).and_then(|g| g.take()) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Accumulates parameter gradients across several backward passes
/// (e.g. one loss per sample inside a batch).
pub fn accumulate_param_grads<T: Scalar>(
    acc: &mut BTreeMap<String, Array2<T>>,
    delta: BTreeMap<String, Array2<T>>,
) {
    for (name, g) in delta {
        match acc.get_mut(&name) {
            Some(a) => *a += &g,
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn ln_row<T: Scalar>(row: &Array1<T>) -> (Array1<T>, T, T) {
    let c = sc::<T>(row.len() as f64);
    let mu: T = row.iter().copied().sum::<T>() / c;
    let var: T = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / c;
    let sigma = (var + sc::<T>(LN_EPS)).sqrt();
    let xhat = row.mapv(|v| (v - mu) / sigma);
    (xhat, mu, sigma)
}

fn gelu_val<T: Scalar>(x: T) -> T {
    let k = sc::<T>(0.7978845608028654); // sqrt(2/pi)
    let c = sc::<T>(0.044715);
    let u = k * (x + c * x * x * x);
    sc::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = sc::<T>(0.7978845608028654);
    let c = sc::<T>(0.044715);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + sc::<T>(3.0) * c * x * x);
    sc::<T>(0.5) * (T::one() + t) + sc::<T>(0.5) * x * (T::one() - t * t) * du
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_row_f64<T: Scalar>(row: &Array1<T>) -> Vec<f64> {
    let vals: Vec<f64> = row.iter().map(|&v| v.to_f64().unwrap()).collect();
    let lse = logsumexp(&vals);
    vals.iter().map(|&v| (v - lse).exp()).collect()
}

/// Numerically stable masked row softmax (shared with non-graph callers).
pub fn softmax_rows_masked<T: Scalar>(
    x: &Array2<T>,
    mask: Option<&Array2<bool>>,
) -> Array2<T> {
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let keep = |j: usize| mask.is_none_or(|m| m[[i, j]]);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..x.ncols() {
            if keep(j) {
                mx = mx.max(x[[i, j]].to_f64().unwrap());
            }
        }
        let mut denom = 0.0f64;
        for j in 0..x.ncols() {
            if keep(j) {
                denom += (x[[i, j]].to_f64().unwrap() - mx).exp();
            }
        }
        for j in 0..x.ncols() {
            if keep(j) {
                let e = (x[[i, j]].to_f64().unwrap() - mx).exp();
                out[[i, j]] = sc::<T>(e / denom);
            }
        }
    }
    out
}
