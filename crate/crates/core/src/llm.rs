//! Frozen causal decoder. The base weights (embeddings, positions,
//! attention, feed-forward, output head) never train; task adaptation goes
//! through low-rank adapters attached to the attention and feed-forward
//! projections (see [`crate::lora`]), which [`crate::blocks::linear`] picks
//! up transparently.

use ndarray::Array2;

use crate::blocks;
use crate::graph::{Graph, NodeId};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tokenizer::EOS;

#[derive(Debug, Clone)]
pub struct LlmCfg {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
}

pub struct TinyDecoder {
    pub cfg: LlmCfg,
    pub vocab_size: usize,
}

impl TinyDecoder {
    pub fn new(cfg: LlmCfg, vocab_size: usize) -> Self {
        TinyDecoder { cfg, vocab_size }
    }

    /// Registers the frozen decoder weights.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let d = self.cfg.dim;
        store.init_normal("llm.embed", (self.vocab_size, d), 0.02, false);
        store.init_normal("llm.pos", (self.cfg.max_seq_len, d), 0.02, false);
        for l in 0..self.cfg.layers {
            blocks::init_ln(store, &format!("llm.l{l}.ln1"), d, false);
            blocks::init_attn(store, &format!("llm.l{l}.attn"), d, false);
            blocks::init_ln(store, &format!("llm.l{l}.ln2"), d, false);
            blocks::init_ffn(store, &format!("llm.l{l}.ffn"), d, d * self.cfg.ffn_mult, false);
        }
        blocks::init_ln(store, "llm.ln_out", d, false);
        store.init_normal("llm.head", (d, self.vocab_size), 1.0 / (d as f64).sqrt(), false);
    }

    /// Embeds token ids as decoder input rows.
    pub fn embed_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ids: &[usize],
    ) -> NodeId {
        let table = g.param(store, "llm.embed");
        g.embed_rows(table, ids)
    }

    /// Causal transformer over an embedded sequence (L x D -> L x D).
    pub fn hidden<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: NodeId,
    ) -> NodeId {
        let l = g.shape(seq).0;
        assert!(
            l <= self.cfg.max_seq_len,
            "sequence length {l} exceeds max {}",
            self.cfg.max_seq_len
        );
        let pos_all = g.param(store, "llm.pos");
        let pos = g.slice_rows(pos_all, 0, l);
        let mut x = g.add(seq, pos);
        let causal = Array2::from_shape_fn((l, l), |(i, j)| j <= i);
        for layer in 0..self.cfg.layers {
            let normed = blocks::ln(g, store, &format!("llm.l{layer}.ln1"), x);
            let attn = blocks::mha(
                g,
                store,
                &format!("llm.l{layer}.attn"),
                normed,
                normed,
                self.cfg.heads,
                Some(&causal),
                true,
            );
            x = g.add(x, attn);
            let normed = blocks::ln(g, store, &format!("llm.l{layer}.ln2"), x);
            let f = blocks::ffn(g, store, &format!("llm.l{layer}.ffn"), normed);
            x = g.add(x, f);
        }
        blocks::ln(g, store, "llm.ln_out", x)
    }

    /// Next-token logits aligned to input positions: row i predicts the
    /// token at position i from positions before it. Row 0 is zeros (no
    /// prefix exists), giving it a uniform implied distribution.
    pub fn aligned_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: NodeId,
    ) -> NodeId {
        let l = g.shape(seq).0;
        let h = self.hidden(g, store, seq);
        let prefix = g.slice_rows(h, 0, l - 1);
        let tail = blocks::linear(g, store, prefix, "llm.head");
        let zero = g.constant(Array2::zeros((1, self.vocab_size)));
        g.concat_rows(&[zero, tail])
    }

    /// Masked next-token loss over an embedded sequence; 1 x 1 node.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: NodeId,
        token_ids: &[usize],
        answer_mask: &[bool],
    ) -> NodeId {
        let l = g.shape(seq).0;
        assert_eq!(token_ids.len(), l);
        assert_eq!(answer_mask.len(), l);
        let h = self.hidden(g, store, seq);
        let prefix = g.slice_rows(h, 0, l - 1);
        let logits = blocks::linear(g, store, prefix, "llm.head");
        // Row i of `logits` predicts token i + 1.
        g.cross_entropy_masked(logits, &token_ids[1..], &answer_mask[1..])
    }

    /// Greedy decoding from an embedded prefix. Returns generated token ids
    /// (EOS not included). Deterministic.
    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prefix: &Array2<T>,
        max_new_tokens: usize,
    ) -> Vec<usize> {
        let embed = store.get("llm.embed");
        let mut seq = prefix.clone();
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            if seq.nrows() >= self.cfg.max_seq_len {
                break;
            }
            let mut g = Graph::new();
            let node = g.constant(seq.clone());
            let h = self.hidden(&mut g, store, node);
            let last = g.slice_rows(h, seq.nrows() - 1, 1);
            let logits = blocks::linear(&mut g, store, last, "llm.head");
            let row = g.value(logits);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..self.vocab_size {
                let v = row[[0, j]].to_f64().unwrap();
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            let mut next = Array2::zeros((seq.nrows() + 1, self.cfg.dim));
            next.slice_mut(ndarray::s![..seq.nrows(), ..]).assign(&seq);
            next.row_mut(seq.nrows()).assign(&embed.row(best));
            seq = next;
        }
        out
    }
}
