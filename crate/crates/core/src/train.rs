//! Instruction-tuning loop: balanced category sampling interleaved with
//! uniform conversation sampling, batched gradient accumulation, per-step
//! loss logging, and atomic checkpointing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::TurnText;
use crate::error::{io_ctx, Error, Result};
use crate::graph::{accumulate_param_grads, Graph};
use crate::instruct::{InstructionKind, InstructionSample};
use crate::media::MediaHandle;
use crate::model::{Model, ModelSample};
use crate::optim::{AdamW, AdamWCfg};
use crate::sampler::{compute_sampler_weights, WeightedSampler};
use crate::scalar::{s, to_f64, Scalar};

/// Summary of one training run, also written into the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainManifest {
    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    pub category_instructions: usize,
    pub conversation_instructions: usize,
    pub balanced_sampler: bool,
    pub frozen_hash: String,
    pub trainable_parameters: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub manifest: TrainManifest,
    pub checkpoint_dir: PathBuf,
}

impl TrainManifest {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn turn_texts(inst: &InstructionSample) -> Vec<TurnText<'_>> {
    inst.turns
        .chunks(2)
        .map(|pair| TurnText {
            question: &pair[0].text,
            answer: Some(&pair[1].text),
        })
        .collect()
}

/// Draws instruction indices for one epoch: category draws are
/// inverse-frequency weighted (or uniform when the balanced sampler is off),
/// conversation draws are uniform, and the two streams alternate 1:1 while
/// both are present.
struct InstructionStream<'a> {
    category: Vec<&'a InstructionSample>,
    conversation: Vec<&'a InstructionSample>,
    category_sampler: Option<WeightedSampler>,
    next_is_category: bool,
}

impl<'a> InstructionStream<'a> {
    fn new(instructions: &'a [InstructionSample], balanced: bool) -> Result<Self> {
        let category: Vec<_> = instructions
            .iter()
            .filter(|i| i.kind == InstructionKind::Category)
            .collect();
        let conversation: Vec<_> = instructions
            .iter()
            .filter(|i| i.kind == InstructionKind::Conversation)
            .collect();
        let category_sampler = if balanced && !category.is_empty() {
            let labels: Vec<&str> = category.iter().map(|i| i.label.as_str()).collect();
            Some(WeightedSampler::new(
                &compute_sampler_weights(&labels)?.weights,
            )?)
        } else {
            None
        };
        Ok(InstructionStream {
            category,
            conversation,
            category_sampler,
            next_is_category: true,
        })
    }

    fn len(&self) -> usize {
        self.category.len() + self.conversation.len()
    }

    fn draw(&mut self, rng: &mut impl Rng) -> &'a InstructionSample {
        let pick_category = match (self.category.is_empty(), self.conversation.is_empty()) {
            (false, true) => true,
            (true, false) => false,
            (false, false) => {
                let c = self.next_is_category;
                self.next_is_category = !self.next_is_category;
                c
            }
            (true, true) => unreachable!("stream constructed from a non-empty set"),
        };
        if pick_category {
            match &self.category_sampler {
                Some(sampler) => self.category[sampler.draw(rng)],
                None => self.category[rng.random_range(0..self.category.len())],
            }
        } else {
            self.conversation[rng.random_range(0..self.conversation.len())]
        }
    }
}

/// Runs instruction tuning and writes a checkpoint into `out_dir`
/// (atomically: assembled in a sibling temp directory, then renamed).
/// Media paths in the instructions resolve against `data_root`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data_root: &Path,
    instructions: &[InstructionSample],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let tcfg = model.cfg.train.clone();
    let kinds = parse_kinds(&tcfg.kinds)?;
    let selected: Vec<InstructionSample> = instructions
        .iter()
        .filter(|i| kinds.is_empty() || kinds.contains(&i.kind))
        .cloned()
        .collect();

    let frozen_before = model.frozen_hash();
    let total_steps: usize;
    let mut losses = Vec::new();
    let (n_cat, n_conv);

    if tcfg.epochs == 0 {
        total_steps = 0;
        n_cat = 0;
        n_conv = 0;
    } else {
        if selected.is_empty() {
            return Err(Error::input(
                "no instructions match the configured kinds; nothing to train on",
            ));
        }
        let mut stream = InstructionStream::new(&selected, tcfg.balanced_sampler)?;
        n_cat = stream.category.len();
        n_conv = stream.conversation.len();
        let steps_per_epoch = stream.len().div_ceil(tcfg.batch_size);
        total_steps = tcfg.epochs * steps_per_epoch;

        let mut opt = AdamW::new(AdamWCfg::from_train(&tcfg));
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);

        for step in 0..total_steps {
            let mut grads: BTreeMap<String, Array2<T>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            let mut batch_ids: Vec<String> = Vec::with_capacity(tcfg.batch_size);
            for _ in 0..tcfg.batch_size {
                let inst = stream.draw(&mut rng);
                batch_ids.push(inst.id.clone());
                let media_path = data_root.join(&inst.media);
                let handle = MediaHandle::from_path(&media_path)?;
                let sample = ModelSample {
                    media_id: &inst.media,
                    handle: &handle,
                    turns: turn_texts(inst),
                    description: None,
                };
                let mut g = Graph::new();
                let loss = model.forward_loss(&mut g, &sample)?;
                let lv = to_f64(g.value(loss)[[0, 0]]);
                if !lv.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss {lv} at step {step}; batch = {batch_ids:?}"
                    )));
                }
                batch_loss += lv;
                let sample_grads = g.backward(loss).into_param_grads(&g);
                accumulate_param_grads(&mut grads, sample_grads);
            }
            let inv = s::<T>(1.0 / tcfg.batch_size as f64);
            for grad in grads.values_mut() {
                grad.mapv_inplace(|x| x * inv);
            }
            let stats = opt.step(&mut model.store, &grads)?;
            let mean_loss = batch_loss / tcfg.batch_size as f64;
            losses.push(mean_loss);
            log::info!(
                "step {}/{}: loss {:.6} grad_norm {:.4}{}",
                step + 1,
                total_steps,
                mean_loss,
                stats.grad_norm,
                if stats.clipped { " (clipped)" } else { "" }
            );
        }
    }

    let frozen_after = model.frozen_hash();
    debug_assert_eq!(frozen_before, frozen_after, "frozen weights moved");
    if frozen_before != frozen_after {
        return Err(Error::numeric("frozen parameters changed during training"));
    }

    let manifest = TrainManifest {
        steps: total_steps,
        epochs: tcfg.epochs,
        batch_size: tcfg.batch_size,
        losses,
        category_instructions: n_cat,
        conversation_instructions: n_conv,
        balanced_sampler: tcfg.balanced_sampler,
        frozen_hash: frozen_after,
        trainable_parameters: model.trainable_parameter_count(),
    };
    write_checkpoint(model, &manifest, out_dir)?;
    Ok(TrainOutcome {
        manifest,
        checkpoint_dir: out_dir.to_path_buf(),
    })
}

/// Parses instruction-kind names ("category", "conversation") into their
/// enum form; anything else is a configuration error.
pub fn parse_kinds(kinds: &[String]) -> Result<Vec<InstructionKind>> {
    kinds
        .iter()
        .map(|k| match k.as_str() {
            "category" => Ok(InstructionKind::Category),
            "conversation" => Ok(InstructionKind::Conversation),
            other => Err(Error::config(format!(
                "unknown instruction kind {other:?} (expected category or conversation)"
            ))),
        })
        .collect()
}

/// Assembles the checkpoint in `<out_dir>.tmp` and renames it into place,
/// so a crash never leaves a half-written checkpoint at `out_dir`.
fn write_checkpoint<T: Scalar>(
    model: &Model<T>,
    manifest: &TrainManifest,
    out_dir: &Path,
) -> Result<()> {
    let tmp = out_dir.with_extension("tmp");
    if tmp.exists() {
        io_ctx(std::fs::remove_dir_all(&tmp), &tmp)?;
    }
    model.save(&tmp)?;
    let manifest_path = tmp.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::io_other(&manifest_path, format!("encode manifest: {e}")))?;
    io_ctx(std::fs::write(&manifest_path, text), &manifest_path)?;
    if out_dir.exists() {
        io_ctx(std::fs::remove_dir_all(out_dir), out_dir)?;
    }
    io_ctx(std::fs::rename(&tmp, out_dir), out_dir)
}

/// Reads the manifest back from a checkpoint directory.
pub fn load_manifest(dir: &Path) -> Result<TrainManifest> {
    let path = dir.join("manifest.json");
    let text = io_ctx(std::fs::read_to_string(&path), &path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::input(format!("malformed manifest {}: {e}", path.display())))
}

/// Collects every piece of text a run can encounter — instruction turns,
/// class names, sample descriptions, attribute-prompt vocabulary, and the
/// closed-set evaluation strings — so a tokenizer built from it never maps
/// run-critical words to the unknown token.
pub fn standard_vocabulary(
    dataset: &crate::dataset::Dataset,
    instructions: &[InstructionSample],
) -> Vec<String> {
    let mut texts = Vec::new();
    for inst in instructions {
        for turn in &inst.turns {
            texts.push(turn.text.clone());
        }
    }
    texts.push(dataset.spec.classes.join(" "));
    for s in &dataset.spec.samples {
        if let Some(d) = &s.description {
            texts.push(d.clone());
        }
    }
    texts.push(crate::assembly::ATTRIBUTE_PROMPT_PREFIX.to_string());
    for bucket in crate::priors::AGE_BUCKETS
        .iter()
        .chain(crate::priors::GENDER_BUCKETS.iter())
        .chain(crate::priors::RACE_BUCKETS.iter())
    {
        texts.push(bucket.to_string());
    }
    // A fully rendered closed-set prompt covers the guidance string, the
    // list punctuation, and the default question in one shot.
    if let Ok(prompt) = crate::eval::build_closed_set_prompt(
        &dataset.spec.classes,
        crate::eval::DEFAULT_EVAL_QUESTION,
    ) {
        texts.push(prompt.render());
    }
    texts.push("My choice is:".to_string());
    texts
}
