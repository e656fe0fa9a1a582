//! Shared transformer building blocks: linear layers with transparent
//! low-rank adapter pass-through, multi-head attention, feed-forward
//! readouts, and layer norm, all built on the autodiff graph.
//!
//! Naming convention: a block at `prefix` owns `{prefix}.wq`, `{prefix}.wk`,
//! `{prefix}.wv`, `{prefix}.wo` (attention), `{prefix}.w1/b1/w2/b2`
//! (feed-forward), `{prefix}.gamma/beta` (layer norm). A low-rank adapter on
//! weight `w` stores `lora.{w}.a` and `lora.{w}.b`; [`linear`] adds its
//! contribution whenever those tensors exist.

use ndarray::Array2;

use crate::graph::{Graph, NodeId};
use crate::param::ParamStore;
use crate::scalar::{s, Scalar};

/// `x . W`, plus `(x . A) . B` when an adapter is attached to this weight.
pub fn linear<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    w_name: &str,
) -> NodeId {
    let w = g.param(store, w_name);
    let base = g.matmul(x, w);
    let a_name = format!("lora.{w_name}.a");
    if store.contains(&a_name) {
        let a = g.param(store, &a_name);
        let b = g.param(store, &format!("lora.{w_name}.b"));
        let down = g.matmul(x, a);
        let up = g.matmul(down, b);
        g.add(base, up)
    } else {
        base
    }
}

/// `x . W + b` with a broadcast 1 x out bias.
pub fn linear_bias<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    w_name: &str,
    b_name: &str,
) -> NodeId {
    let y = linear(g, store, x, w_name);
    let b = g.param(store, b_name);
    g.add_row(y, b)
}

/// Layer norm with this prefix's scale and shift.
pub fn ln<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let gamma = g.param(store, &format!("{prefix}.gamma"));
    let beta = g.param(store, &format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta)
}

/// Multi-head attention readout (no residual, no input norm).
///
/// `mask` is Lq x Lkv with `true` = attend, shared across heads. `scaled`
/// selects the 1/sqrt(head_dim) logit scaling; the aggregator's relevance
/// scoring deliberately runs unscaled.
#[allow(clippy::too_many_arguments)]
pub fn mha<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    heads: usize,
    mask: Option<&Array2<bool>>,
    scaled: bool,
) -> NodeId {
    let q = linear(g, store, q_in, &format!("{prefix}.wq"));
    let k = linear(g, store, kv_in, &format!("{prefix}.wk"));
    let v = linear(g, store, kv_in, &format!("{prefix}.wv"));
    let dim = g.shape(q).1;
    assert!(heads > 0 && dim.is_multiple_of(heads), "mha: heads must divide width");
    let head_dim = dim / heads;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let kt = g.transpose(kh);
        let mut scores = g.matmul(qh, kt);
        if scaled {
            scores = g.scale(scores, s::<T>(1.0 / (head_dim as f64).sqrt()));
        }
        let probs = g.softmax_rows(scores, mask.cloned());
        parts.push(g.matmul(probs, vh));
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)
    };
    linear(g, store, cat, &format!("{prefix}.wo"))
}

/// Feed-forward readout: `gelu(x . w1 + b1) . w2 + b2`.
pub fn ffn<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let h = linear_bias(g, store, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
    let h = g.gelu(h);
    linear_bias(g, store, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

pub fn init_attn<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    trainable: bool,
) {
    let std = 1.0 / (dim as f64).sqrt();
    for w in ["wq", "wk", "wv", "wo"] {
        store.init_normal(format!("{prefix}.{w}"), (dim, dim), std, trainable);
    }
}

pub fn init_ffn<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    hidden: usize,
    trainable: bool,
) {
    store.init_normal(
        format!("{prefix}.w1"),
        (dim, hidden),
        1.0 / (dim as f64).sqrt(),
        trainable,
    );
    store.init_zeros(format!("{prefix}.b1"), (1, hidden), trainable);
    store.init_normal(
        format!("{prefix}.w2"),
        (hidden, dim),
        1.0 / (hidden as f64).sqrt(),
        trainable,
    );
    store.init_zeros(format!("{prefix}.b2"), (1, dim), trainable);
}

pub fn init_ln<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, trainable: bool) {
    store.init_ones(format!("{prefix}.gamma"), (1, dim), trainable);
    store.init_zeros(format!("{prefix}.beta"), (1, dim), trainable);
}
