//! Instruction-aware clue aggregation.
//!
//! A fixed pool of learnable queries is refined by a short stack of blocks
//! (self-attention, cross-attention into the instruction tokens,
//! cross-attention into the visual/facial tokens, feed-forward, all
//! pre-norm with residuals). The refined queries then score the visual
//! tokens directly: unscaled logits `Q . X^T`, row softmax, weighted sum,
//! and a mean over the queries yields the single context token.

use ndarray::{Array2, Axis};

use crate::blocks;
use crate::graph::{softmax_rows_masked, Graph, NodeId};
use crate::param::ParamStore;
use crate::scalar::{s, Scalar};

#[derive(Debug, Clone)]
pub struct AggregatorCfg {
    pub channel_dim: usize,
    pub llm_dim: usize,
    pub num_queries: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

pub struct ClueAggregator {
    pub cfg: AggregatorCfg,
}

impl ClueAggregator {
    pub fn new(cfg: AggregatorCfg) -> Self {
        ClueAggregator { cfg }
    }

    /// Registers the trainable aggregator weights.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.cfg.channel_dim;
        store.init_normal("agg.queries", (self.cfg.num_queries, c), 0.02, true);
        store.init_normal(
            "agg.instr_proj",
            (self.cfg.llm_dim, c),
            1.0 / (self.cfg.llm_dim as f64).sqrt(),
            true,
        );
        for b in 0..self.cfg.blocks {
            for part in ["self", "instr", "cross"] {
                blocks::init_ln(store, &format!("agg.b{b}.{part}_ln"), c, true);
                blocks::init_attn(store, &format!("agg.b{b}.{part}"), c, true);
            }
            blocks::init_ln(store, &format!("agg.b{b}.ffn_ln"), c, true);
            blocks::init_ffn(store, &format!("agg.b{b}.ffn"), c, c * self.cfg.ffn_mult, true);
        }
    }

    /// Projects instruction token embeddings (rows of the decoder embedding
    /// table) into the aggregator channel space.
    pub fn embed_instruction<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embed_table: NodeId,
        token_ids: &[usize],
    ) -> NodeId {
        assert!(!token_ids.is_empty(), "instruction must contain tokens");
        let rows = g.embed_rows(embed_table, token_ids);
        blocks::linear(g, store, rows, "agg.instr_proj")
    }

    /// Refines the learnable queries against the instruction and the
    /// visual (plus optional facial) tokens. Returns M x C.
    pub fn aggregate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        instr: NodeId,
        visual: NodeId,
        facial: Option<NodeId>,
    ) -> NodeId {
        let kv = match facial {
            Some(f) => g.concat_rows(&[visual, f]),
            None => visual,
        };
        let mut q = g.param(store, "agg.queries");
        for b in 0..self.cfg.blocks {
            let normed = blocks::ln(g, store, &format!("agg.b{b}.self_ln"), q);
            let attn = blocks::mha(
                g,
                store,
                &format!("agg.b{b}.self"),
                normed,
                normed,
                self.cfg.heads,
                None,
                true,
            );
            q = g.add(q, attn);

            let normed = blocks::ln(g, store, &format!("agg.b{b}.instr_ln"), q);
            let attn = blocks::mha(
                g,
                store,
                &format!("agg.b{b}.instr"),
                normed,
                instr,
                self.cfg.heads,
                None,
                true,
            );
            q = g.add(q, attn);

            let normed = blocks::ln(g, store, &format!("agg.b{b}.cross_ln"), q);
            let attn = blocks::mha(
                g,
                store,
                &format!("agg.b{b}.cross"),
                normed,
                kv,
                self.cfg.heads,
                None,
                true,
            );
            q = g.add(q, attn);

            let normed = blocks::ln(g, store, &format!("agg.b{b}.ffn_ln"), q);
            let f = blocks::ffn(g, store, &format!("agg.b{b}.ffn"), normed);
            q = g.add(q, f);
        }
        q
    }

    /// Relevance pooling of the refined queries over the visual tokens:
    /// unscaled logits, row softmax, weighted sum, mean over queries.
    /// Returns 1 x C.
    pub fn context_token<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        queries: NodeId,
        visual: NodeId,
    ) -> NodeId {
        let vt = g.transpose(visual);
        let logits = g.matmul(queries, vt);
        let probs = g.softmax_rows(logits, None);
        let mixed = g.matmul(probs, visual);
        g.mean_rows(mixed)
    }

    /// Full pass: aggregate then pool. Returns 1 x C.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        instr: NodeId,
        visual: NodeId,
        facial: Option<NodeId>,
    ) -> NodeId {
        let q = self.aggregate(g, store, instr, visual, facial);
        self.context_token(g, q, visual)
    }
}

/// Pure-value twin of [`ClueAggregator::context_token`]; reference for
/// oracle tests and usable without a graph.
pub fn context_token_values<T: Scalar>(queries: &Array2<T>, visual: &Array2<T>) -> Array2<T> {
    assert_eq!(queries.ncols(), visual.ncols(), "channel width mismatch");
    let logits = queries.dot(&visual.t());
    let probs = softmax_rows_masked(&logits, None);
    let mixed = probs.dot(visual);
    let m = s::<T>(mixed.nrows() as f64);
    mixed
        .sum_axis(Axis(0))
        .mapv(|v| v / m)
        .insert_axis(Axis(0))
}
