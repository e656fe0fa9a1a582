//! Low-rank adapter injection for the frozen decoder.
//!
//! An adapter on weight `w` (shape in x out) adds trainable tensors
//! `lora.{w}.a` (in x rank, small random init) and `lora.{w}.b`
//! (rank x out, zeros), contributing `(x . A) . B` on top of the frozen
//! `x . W`. The zero-initialized `B` makes injection an exact identity at
//! step zero. No extra scaling factor is applied: the adapter contribution
//! is the raw low-rank product.

use crate::error::{Error, Result};
use crate::llm::LlmCfg;
use crate::param::ParamStore;
use crate::scalar::Scalar;

/// Outcome of adapter injection.
#[derive(Debug, Clone)]
pub struct LoraInfo {
    /// Weight names that received adapters.
    pub sites: Vec<String>,
    /// Trainable elements added: sum of rank * (in + out) over sites.
    pub added_parameters: usize,
}

/// Weights eligible for adapters: every attention and feed-forward
/// projection of the decoder (embeddings, positions, norms, and the output
/// head stay untouched).
pub fn adapter_sites(cfg: &LlmCfg) -> Vec<String> {
    let mut sites = Vec::new();
    for l in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            sites.push(format!("llm.l{l}.attn.{w}"));
        }
        for w in ["w1", "w2"] {
            sites.push(format!("llm.l{l}.ffn.{w}"));
        }
    }
    sites
}

/// Attaches a rank-`rank` adapter to every eligible decoder weight.
pub fn inject_adapters<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &LlmCfg,
    rank: usize,
) -> Result<LoraInfo> {
    if rank == 0 {
        return Err(Error::config("adapter rank must be at least 1"));
    }
    let sites = adapter_sites(cfg);
    // Validate every site before mutating anything.
    for site in &sites {
        let w = store
            .try_get(site)
            .ok_or_else(|| Error::config(format!("adapter site {site:?} does not exist")))?;
        let min_dim = w.nrows().min(w.ncols());
        if rank > min_dim {
            return Err(Error::config(format!(
                "adapter rank {rank} exceeds the smaller dimension {min_dim} of {site:?}"
            )));
        }
        if store.contains(&format!("lora.{site}.a")) {
            return Err(Error::config(format!(
                "adapter already injected at {site:?}"
            )));
        }
    }
    let mut added = 0usize;
    for site in &sites {
        let (rows, cols) = {
            let w = store.get(site);
            (w.nrows(), w.ncols())
        };
        store.init_normal(
            format!("lora.{site}.a"),
            (rows, rank),
            1.0 / (rows as f64).sqrt(),
            true,
        );
        store.init_zeros(format!("lora.{site}.b"), (rank, cols), true);
        added += rank * (rows + cols);
    }
    Ok(LoraInfo {
        sites,
        added_parameters: added,
    })
}
