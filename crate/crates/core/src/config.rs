//! Structured configuration: TOML round trip, defaults, validation.
//!
//! [`Config::default`] is the desk-scale preset: small dimensions that train
//! in seconds on a CPU against the synthetic fixtures. The full-scale
//! reference values from the source system (rank-128 adapters, one epoch at
//! learning rate 2e-4, one frame per second) are preserved where they are
//! scale-independent and documented on each field where they are not
//! (notably the desk preset trains at 2e-3).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_ctx, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    /// Shared self-attention feeding global and local face attention
    /// branches (the full mining block).
    Attention,
    /// Baseline: mean-pool visual and facial tokens and concatenate.
    PoolConcat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    /// Base seed for parameter initialization.
    pub seed: u64,
    /// Shared channel width C of visual and facial token embeddings.
    pub channel_dim: usize,
    /// Token width D of the language decoder.
    pub llm_dim: usize,
    /// Number of learnable aggregator queries M (reference scale: 32).
    pub num_queries: usize,
    /// Side length of the square backbone input.
    pub image_size: u32,
    /// Patch side; must divide `image_size`.
    pub patch_size: u32,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub aggregator_blocks: usize,
    pub aggregator_heads: usize,
    pub mining_heads: usize,
    /// Hidden width multiplier of every feed-forward block.
    pub ffn_mult: usize,
    /// Facial expert: `"toy"` or a path to saved expert weights.
    pub expert: String,
    pub llm_layers: usize,
    pub llm_heads: usize,
    pub max_seq_len: usize,
    /// Low-rank adapter rank (reference scale: 128).
    pub lora_rank: usize,
    /// Generation budget for closed-set answers.
    pub max_new_tokens: usize,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            seed: 1,
            channel_dim: 32,
            llm_dim: 48,
            num_queries: 8,
            image_size: 28,
            patch_size: 7,
            backbone_layers: 2,
            backbone_heads: 4,
            aggregator_blocks: 2,
            aggregator_heads: 4,
            mining_heads: 4,
            ffn_mult: 2,
            expert: "toy".into(),
            llm_layers: 2,
            llm_heads: 4,
            max_seq_len: 256,
            lora_rank: 8,
            max_new_tokens: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureToggles {
    /// Feed facial-expert embeddings into aggregation and mining.
    pub facial_embedding: bool,
    /// Emit the landmark token as a third per-frame token.
    pub landmark_token: bool,
    /// Prepend the attribute information sentence to the prompt.
    pub agr_prompt: bool,
    /// Keep the local (region-masked) face attention branch.
    pub local_attention: bool,
    pub mining_strategy: MiningStrategy,
    /// Append sample descriptions to evaluation prompts when present.
    pub descriptive_text: bool,
}

impl Default for FeatureToggles {
    fn default() -> Self {
        FeatureToggles {
            facial_embedding: true,
            landmark_token: true,
            agr_prompt: true,
            local_attention: true,
            mining_strategy: MiningStrategy::Attention,
            descriptive_text: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    /// AdamW learning rate (reference scale: 2e-4; the desk-scale preset
    /// needs a hotter 2e-3 to reach answer-bearing behavior in minutes).
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs over the instruction set (reference scale: 1).
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Seed for sampling order (independent of the model seed).
    pub seed: u64,
    /// Inverse-frequency weighted sampling for category instructions.
    pub balanced_sampler: bool,
    /// Instruction kinds to train on; empty means all kinds present.
    pub kinds: Vec<String>,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lr: 2e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 1,
            batch_size: 4,
            grad_clip: 1.0,
            seed: 1,
            balanced_sampler: true,
            kinds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataCfg {
    /// Video frame sampling rate (reference scale: 1 frame per second).
    pub fps: f64,
    /// Directory for face-detection caches; empty disables caching.
    pub cache_dir: String,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg {
            fps: 1.0,
            cache_dir: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelCfg,
    pub features: FeatureToggles,
    pub train: TrainCfg,
    pub data: DataCfg,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = io_ctx(std::fs::read_to_string(path), path)?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| Error::config(format!("malformed config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("serialize config: {e}")))?;
        io_ctx(std::fs::write(path, text), path)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.patch_size == 0 || m.image_size == 0 {
            return Err(Error::config("image_size and patch_size must be positive"));
        }
        if !m.image_size.is_multiple_of(m.patch_size) {
            return Err(Error::config(format!(
                "patch_size {} does not divide image_size {}",
                m.patch_size, m.image_size
            )));
        }
        for (what, dim, heads) in [
            ("backbone", m.channel_dim, m.backbone_heads),
            ("aggregator", m.channel_dim, m.aggregator_heads),
            ("mining", m.channel_dim, m.mining_heads),
            ("llm", m.llm_dim, m.llm_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::config(format!(
                    "{what}: head count {heads} must divide width {dim}"
                )));
            }
        }
        if m.num_queries == 0 {
            return Err(Error::config("num_queries must be at least 1"));
        }
        if m.aggregator_blocks == 0 || m.backbone_layers == 0 || m.llm_layers == 0 {
            return Err(Error::config("layer counts must be at least 1"));
        }
        if m.ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be at least 1"));
        }
        if m.lora_rank == 0 {
            return Err(Error::config("lora_rank must be at least 1"));
        }
        if m.max_seq_len < 8 {
            return Err(Error::config("max_seq_len must be at least 8"));
        }
        if m.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be at least 1"));
        }
        if m.expert.is_empty() {
            return Err(Error::config("expert must be 'toy' or a weights path"));
        }
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if t.grad_clip < 0.0 || !t.grad_clip.is_finite() {
            return Err(Error::config("grad_clip must be finite and non-negative"));
        }
        if !(self.data.fps.is_finite() && self.data.fps > 0.0) {
            return Err(Error::config("fps must be positive"));
        }
        Ok(())
    }

    /// Number of visual tokens the backbone produces per frame.
    pub fn visual_tokens(&self) -> usize {
        let per_side = (self.model.image_size / self.model.patch_size) as usize;
        per_side * per_side
    }
}
