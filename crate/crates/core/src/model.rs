//! The full pipeline: media -> priors -> backbone -> aggregation and mining
//! -> projected frame tokens -> decoder, with every feature toggle wired
//! through.
//!
//! Frozen components (backbone, facial expert, decoder base) feed the graph
//! as constants; their per-media outputs are cached so repeated training
//! steps on the same sample skip the pixel work.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

use crate::aggregator::{AggregatorCfg, ClueAggregator};
use crate::assembly::{
    build_attribute_prompt, plan_sequence, FramePart, Projectors, ProjectorCfg, SeqItem,
    SequencePlan, TurnText,
};
use crate::config::{Config, MiningStrategy};
use crate::error::{io_ctx, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::llm::{LlmCfg, TinyDecoder};
use crate::lora::inject_adapters;
use crate::media::{sample_frames, MediaHandle};
use crate::mining::{
    au_regions_from_landmarks, default_landmark_groups, AuRegions, FaceInfoMining, MiningCfg,
};
use crate::param::ParamStore;
use crate::priors::{
    construct_expert, crop_from_detection, AgrAttributes, BlobDetector, DetectionCache,
    FaceDetector, FacialExpert, LandmarkSet,
};
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;
use crate::vision::{BackboneCfg, VisionBackbone};

/// Frozen per-frame features, cached per media id.
pub struct FrameFeatures<T: Scalar> {
    pub visual: Array2<T>,
    pub facial: Array2<T>,
    pub landmarks: LandmarkSet<T>,
    pub agr: AgrAttributes,
    /// True when the face detector found nothing and the center fallback
    /// was used.
    pub crop_fallback: bool,
}

/// One item presented to the model.
pub struct ModelSample<'a> {
    pub media_id: &'a str,
    pub handle: &'a MediaHandle,
    pub turns: Vec<TurnText<'a>>,
    pub description: Option<&'a str>,
}

pub struct Model<T: Scalar> {
    pub cfg: Config,
    pub store: ParamStore<T>,
    pub tokenizer: Tokenizer,
    pub backbone: VisionBackbone,
    pub aggregator: ClueAggregator,
    pub mining: FaceInfoMining,
    pub decoder: TinyDecoder,
    pub projectors: Projectors,
    pub expert: Box<dyn FacialExpert<T>>,
    pub detector: Box<dyn FaceDetector>,
    landmark_groups: Vec<Vec<usize>>,
    detection_cache: Option<DetectionCache>,
    feature_cache: RefCell<HashMap<String, Arc<Vec<FrameFeatures<T>>>>>,
}

impl<T: Scalar> Model<T> {
    /// Builds a model with freshly initialized weights. The tokenizer must
    /// already cover the training/evaluation text.
    pub fn new(cfg: Config, tokenizer: Tokenizer) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let expert = construct_expert::<T>(&m.expert, m.channel_dim)?;

        let backbone = VisionBackbone::new(BackboneCfg {
            image_size: m.image_size,
            patch_size: m.patch_size,
            channel_dim: m.channel_dim,
            layers: m.backbone_layers,
            heads: m.backbone_heads,
            ffn_mult: m.ffn_mult,
        });
        let aggregator = ClueAggregator::new(AggregatorCfg {
            channel_dim: m.channel_dim,
            llm_dim: m.llm_dim,
            num_queries: m.num_queries,
            blocks: m.aggregator_blocks,
            heads: m.aggregator_heads,
            ffn_mult: m.ffn_mult,
        });
        let mining = FaceInfoMining::new(MiningCfg {
            channel_dim: m.channel_dim,
            heads: m.mining_heads,
            ffn_mult: m.ffn_mult,
            local_attention: cfg.features.local_attention,
        });
        let decoder = TinyDecoder::new(
            LlmCfg {
                dim: m.llm_dim,
                layers: m.llm_layers,
                heads: m.llm_heads,
                ffn_mult: m.ffn_mult,
                max_seq_len: m.max_seq_len,
            },
            tokenizer.vocab_size(),
        );
        let enhanced_rows = match cfg.features.mining_strategy {
            MiningStrategy::Attention => 1,
            MiningStrategy::PoolConcat => 2,
        };
        let projectors = Projectors::new(ProjectorCfg {
            channel_dim: m.channel_dim,
            llm_dim: m.llm_dim,
            landmark_count: expert.landmark_count(),
            enhanced_rows,
        });

        let mut store = ParamStore::new(m.seed);
        backbone.init(&mut store);
        aggregator.init(&mut store);
        mining.init(&mut store);
        projectors.init(&mut store);
        decoder.init(&mut store);
        inject_adapters(&mut store, &decoder.cfg, m.lora_rank)?;

        let detection_cache = if cfg.data.cache_dir.is_empty() {
            None
        } else {
            Some(DetectionCache::open(Path::new(&cfg.data.cache_dir))?)
        };

        Ok(Model {
            cfg,
            store,
            tokenizer,
            backbone,
            aggregator,
            mining,
            decoder,
            projectors,
            expert,
            detector: Box::new(BlobDetector::default()),
            landmark_groups: default_landmark_groups(),
            detection_cache,
            feature_cache: RefCell::new(HashMap::new()),
        })
    }

    /// Swaps the face detector (tests and specialized deployments).
    pub fn set_detector(&mut self, detector: Box<dyn FaceDetector>) {
        self.detector = detector;
        self.feature_cache.borrow_mut().clear();
    }

    /// Swaps the facial expert; its channel width must match the model.
    pub fn set_expert(&mut self, expert: Box<dyn FacialExpert<T>>) -> Result<()> {
        if expert.channel_dim() != self.cfg.model.channel_dim {
            return Err(Error::config(format!(
                "expert channel width {} does not match model width {}",
                expert.channel_dim(),
                self.cfg.model.channel_dim
            )));
        }
        self.expert = expert;
        self.feature_cache.borrow_mut().clear();
        Ok(())
    }

    pub fn clear_feature_cache(&self) {
        self.feature_cache.borrow_mut().clear();
    }

    /// Frozen features for every sampled frame of a media item (cached).
    pub fn frame_features(
        &self,
        media_id: &str,
        handle: &MediaHandle,
    ) -> Result<Arc<Vec<FrameFeatures<T>>>> {
        if let Some(hit) = self.feature_cache.borrow().get(media_id) {
            return Ok(hit.clone());
        }
        let frames = sample_frames(handle, self.cfg.data.fps)?;
        let target = self.expert.input_size();
        let mut features = Vec::with_capacity(frames.len());
        for frame in &frames {
            let crop = match &self.detection_cache {
                Some(cache) => {
                    let cached =
                        cache.get_or_detect(media_id, frame.index, frame, self.detector.as_ref())?;
                    crop_from_detection(frame, cached.best, target)
                }
                None => {
                    let detections = self.detector.detect(frame);
                    let best = detections.into_iter().max_by(|a, b| {
                        a.confidence.partial_cmp(&b.confidence).expect("finite")
                    });
                    crop_from_detection(frame, best, target)
                }
            };
            let facial = self.expert.encode(&crop)?;
            let (landmarks, agr) = self.expert.decode(&facial)?;
            let visual = self.backbone.encode_values(&self.store, frame);
            features.push(FrameFeatures {
                visual,
                facial,
                landmarks,
                agr,
                crop_fallback: crop.fallback,
            });
        }
        let arc = Arc::new(features);
        self.feature_cache
            .borrow_mut()
            .insert(media_id.to_string(), arc.clone());
        Ok(arc)
    }

    /// Plans the token sequence for a sample. The attribute sentence comes
    /// from the first frame; callers decide whether to pass a description
    /// (the inference-time descriptive-text switch lives in the evaluator).
    fn plan<'a>(
        &self,
        features: &[FrameFeatures<T>],
        turns: &[TurnText<'a>],
        description: Option<&'a str>,
    ) -> Result<SequencePlan> {
        let attribute_prompt = build_attribute_prompt(
            &features
                .first()
                .ok_or_else(|| Error::input("media produced no frames"))?
                .agr,
            self.cfg.features.agr_prompt,
        );
        let plan = plan_sequence(
            &self.tokenizer,
            features.len(),
            self.cfg.features.landmark_token,
            &attribute_prompt,
            description,
            turns,
        )?;
        if plan.len() > self.cfg.model.max_seq_len {
            return Err(Error::input(format!(
                "planned sequence of {} tokens exceeds max_seq_len {}",
                plan.len(),
                self.cfg.model.max_seq_len
            )));
        }
        Ok(plan)
    }

    /// Builds the three projected tokens for one frame on the graph.
    fn frame_token_nodes(
        &self,
        g: &mut Graph<T>,
        feats: &FrameFeatures<T>,
        instr_ids: &[usize],
    ) -> (NodeId, NodeId, NodeId) {
        let visual = g.constant(feats.visual.clone());
        let facial = if self.cfg.features.facial_embedding {
            Some(g.constant(feats.facial.clone()))
        } else {
            None
        };

        let table = g.param(&self.store, "llm.embed");
        let instr = self
            .aggregator
            .embed_instruction(g, &self.store, table, instr_ids);
        let queries = self
            .aggregator
            .aggregate(g, &self.store, instr, visual, facial);
        let ctx = self.aggregator.context_token(g, queries, visual);

        let enhanced = match self.cfg.features.mining_strategy {
            MiningStrategy::Attention => {
                let regions = self.regions_for(feats);
                self.mining
                    .forward(g, &self.store, visual, facial, regions.as_ref())
            }
            MiningStrategy::PoolConcat => self.mining.pool_concat(g, visual, facial),
        };

        let ctx_tok = self.projectors.project_context(g, &self.store, ctx);
        let enh_tok = self.projectors.project_enhanced(g, &self.store, enhanced);
        let lmk_tok = self
            .projectors
            .project_landmarks(g, &self.store, &feats.landmarks);
        (ctx_tok, enh_tok, lmk_tok)
    }

    fn regions_for(&self, feats: &FrameFeatures<T>) -> Option<AuRegions> {
        if !(self.cfg.features.local_attention && self.cfg.features.facial_embedding) {
            return None;
        }
        Some(au_regions_from_landmarks(
            &feats.landmarks,
            self.expert.token_grid(),
            &self.landmark_groups,
        ))
    }

    /// Materializes a planned sequence as decoder input rows (L x D).
    fn sequence_node(
        &self,
        g: &mut Graph<T>,
        plan: &SequencePlan,
        frame_tokens: &[(NodeId, NodeId, NodeId)],
    ) -> NodeId {
        let mut parts: Vec<NodeId> = Vec::new();
        let mut pending: Vec<usize> = Vec::new();
        let table = g.param(&self.store, "llm.embed");
        for item in &plan.items {
            match item {
                SeqItem::Token(id) => pending.push(*id),
                SeqItem::FrameSlot { frame, part } => {
                    if !pending.is_empty() {
                        let run = g.embed_rows(table, &pending);
                        parts.push(run);
                        pending.clear();
                    }
                    let (ctx, enh, lmk) = frame_tokens[*frame];
                    parts.push(match part {
                        FramePart::Context => ctx,
                        FramePart::Visual => enh,
                        FramePart::Landmark => lmk,
                    });
                }
            }
        }
        if !pending.is_empty() {
            let run = g.embed_rows(table, &pending);
            parts.push(run);
        }
        g.concat_rows(&parts)
    }

    /// Training forward pass: returns the loss node (1 x 1). Every turn
    /// must carry an answer.
    pub fn forward_loss(&self, g: &mut Graph<T>, sample: &ModelSample) -> Result<NodeId> {
        if sample.turns.iter().any(|t| t.answer.is_none()) {
            return Err(Error::input("training turns must all carry answers"));
        }
        let features = self.frame_features(sample.media_id, sample.handle)?;
        let plan = self.plan(&features, &sample.turns, sample.description)?;
        let instr_ids = self.instruction_ids(&sample.turns)?;
        let frame_tokens: Vec<(NodeId, NodeId, NodeId)> = features
            .iter()
            .map(|f| self.frame_token_nodes(g, f, &instr_ids))
            .collect();
        let seq = self.sequence_node(g, &plan, &frame_tokens);
        Ok(self
            .decoder
            .loss(g, &self.store, seq, &plan.token_ids, &plan.answer_mask))
    }

    /// Greedy generation for the final (answer-less) turn of a sample.
    pub fn generate(&self, sample: &ModelSample) -> Result<String> {
        let features = self.frame_features(sample.media_id, sample.handle)?;
        let plan = self.plan(&features, &sample.turns, sample.description)?;
        let instr_ids = self.instruction_ids(&sample.turns)?;
        let mut g = Graph::new();
        let frame_tokens: Vec<(NodeId, NodeId, NodeId)> = features
            .iter()
            .map(|f| self.frame_token_nodes(&mut g, f, &instr_ids))
            .collect();
        let seq = self.sequence_node(&mut g, &plan, &frame_tokens);
        let prefix = g.value(seq).clone();
        let ids = self
            .decoder
            .generate(&self.store, &prefix, self.cfg.model.max_new_tokens);
        Ok(self.tokenizer.decode(&ids))
    }

    /// Instruction tokens steering the aggregator: the first question.
    fn instruction_ids(&self, turns: &[TurnText]) -> Result<Vec<usize>> {
        let first = turns
            .first()
            .ok_or_else(|| Error::input("sample has no turns"))?;
        let ids = self.tokenizer.encode(first.question);
        if ids.is_empty() {
            return Err(Error::input("instruction text is empty"));
        }
        Ok(ids)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_elements()
    }

    pub fn frozen_hash(&self) -> String {
        self.store.frozen_hash()
    }

    /// Writes weights, tokenizer, and config into a checkpoint directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io_ctx(std::fs::create_dir_all(dir), dir)?;
        self.store.save(&dir.join("weights.json"))?;
        let tok_path = dir.join("tokenizer.json");
        io_ctx(std::fs::write(&tok_path, self.tokenizer.to_json()), &tok_path)?;
        self.cfg.save(&dir.join("config.toml"))
    }

    /// Restores a model from [`Model::save`] output.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = Config::load(&dir.join("config.toml"))?;
        let tok_path = dir.join("tokenizer.json");
        let tok_text = io_ctx(std::fs::read_to_string(&tok_path), &tok_path)?;
        let tokenizer = Tokenizer::from_json(&tok_text)?;
        let mut model = Model::new(cfg, tokenizer)?;
        model.store = ParamStore::load(&dir.join("weights.json"))?;
        Ok(model)
    }
}
