//! Token assembly: the attribute prompt sentence, per-frame token
//! projection into the decoder space, sequence planning for training and
//! generation, and the autoregressive loss on the answer span.
//!
//! Per frame the decoder receives up to three projected tokens, in order:
//! the context token from clue aggregation, the enhanced token from face
//! mining, and (toggleable) the landmark token. Each goes through its own
//! two-layer projector.

use ndarray::Array2;

use crate::blocks;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::ParamStore;
use crate::priors::{AgrAttributes, LandmarkSet};
use crate::scalar::{s, to_f64, Scalar};
use crate::tokenizer::{Tokenizer, ASSISTANT, BOS, EOS, FRAME, HUMAN};

/// Opening of the attribute information sentence, rendered verbatim into
/// prompts when the attribute feature is on.
pub const ATTRIBUTE_PROMPT_PREFIX: &str = "According to the specific question, you are allowed to use or partially use the following information:";

/// Renders the attribute sentence: the fixed prefix followed by
/// ` {age}, {gender}, {race}.` Returns an empty string when disabled.
pub fn build_attribute_prompt(agr: &AgrAttributes, enabled: bool) -> String {
    if !enabled {
        return String::new();
    }
    format!(
        "{ATTRIBUTE_PROMPT_PREFIX} {}, {}, {}.",
        agr.age, agr.gender, agr.race
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramePart {
    Context,
    Visual,
    Landmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqItem {
    /// A projected frame token occupies this position.
    FrameSlot { frame: usize, part: FramePart },
    Token(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Frames,
    Prompt,
    Question,
    Answer,
}

#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// One question/answer pair; `answer` is `None` when planning for
/// generation.
#[derive(Debug, Clone)]
pub struct TurnText<'a> {
    pub question: &'a str,
    pub answer: Option<&'a str>,
}

/// A fully laid-out decoder sequence.
#[derive(Debug, Clone)]
pub struct SequencePlan {
    pub items: Vec<SeqItem>,
    /// Token id per position; frame slots carry the FRAME placeholder.
    pub token_ids: Vec<usize>,
    /// True at answer positions (including each answer's closing EOS).
    pub answer_mask: Vec<bool>,
    pub segments: Vec<Segment>,
}

impl SequencePlan {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of masked (supervised) positions.
    pub fn answer_positions(&self) -> usize {
        self.answer_mask.iter().filter(|&&m| m).count()
    }
}

/// Lays out: BOS, all frame tokens, then per turn HUMAN, prompt sentence
/// (first turn only), question, optional description (first turn only),
/// ASSISTANT, answer + EOS. The attribute sentence and description are
/// prompt-tagged; only answer tokens (plus their EOS) are supervised.
pub fn plan_sequence(
    vocab: &Tokenizer,
    n_frames: usize,
    landmark_token: bool,
    attribute_prompt: &str,
    description: Option<&str>,
    turns: &[TurnText],
) -> Result<SequencePlan> {
    if turns.is_empty() {
        return Err(Error::input("sequence needs at least one turn"));
    }
    let mut items = Vec::new();
    let mut token_ids = Vec::new();
    let mut answer_mask = Vec::new();
    let mut segments = Vec::new();

    let push_token = |items: &mut Vec<SeqItem>,
                          ids: &mut Vec<usize>,
                          mask: &mut Vec<bool>,
                          id: usize,
                          supervised: bool| {
        items.push(SeqItem::Token(id));
        ids.push(id);
        mask.push(supervised);
    };

    push_token(&mut items, &mut token_ids, &mut answer_mask, BOS, false);

    if n_frames > 0 {
        let start = items.len();
        for frame in 0..n_frames {
            let mut parts = vec![FramePart::Context, FramePart::Visual];
            if landmark_token {
                parts.push(FramePart::Landmark);
            }
            for part in parts {
                items.push(SeqItem::FrameSlot { frame, part });
                token_ids.push(FRAME);
                answer_mask.push(false);
            }
        }
        segments.push(Segment {
            kind: SegmentKind::Frames,
            start,
            len: items.len() - start,
        });
    }

    for (t, turn) in turns.iter().enumerate() {
        push_token(&mut items, &mut token_ids, &mut answer_mask, HUMAN, false);

        if t == 0 && !attribute_prompt.is_empty() {
            let ids = vocab.encode(attribute_prompt);
            let start = items.len();
            for id in ids {
                push_token(&mut items, &mut token_ids, &mut answer_mask, id, false);
            }
            segments.push(Segment {
                kind: SegmentKind::Prompt,
                start,
                len: items.len() - start,
            });
        }

        let q_ids = vocab.encode(turn.question);
        if q_ids.is_empty() {
            return Err(Error::input(format!("turn {t} has an empty question")));
        }
        let start = items.len();
        for id in q_ids {
            push_token(&mut items, &mut token_ids, &mut answer_mask, id, false);
        }
        segments.push(Segment {
            kind: SegmentKind::Question,
            start,
            len: items.len() - start,
        });

        if t == 0 {
            if let Some(desc) = description {
                let ids = vocab.encode(desc);
                if !ids.is_empty() {
                    let start = items.len();
                    for id in ids {
                        push_token(&mut items, &mut token_ids, &mut answer_mask, id, false);
                    }
                    segments.push(Segment {
                        kind: SegmentKind::Prompt,
                        start,
                        len: items.len() - start,
                    });
                }
            }
        }

        push_token(&mut items, &mut token_ids, &mut answer_mask, ASSISTANT, false);

        if let Some(answer) = turn.answer {
            let a_ids = vocab.encode(answer);
            if a_ids.is_empty() {
                return Err(Error::input(format!("turn {t} has an empty answer")));
            }
            let start = items.len();
            for id in a_ids {
                push_token(&mut items, &mut token_ids, &mut answer_mask, id, true);
            }
            push_token(&mut items, &mut token_ids, &mut answer_mask, EOS, true);
            segments.push(Segment {
                kind: SegmentKind::Answer,
                start,
                len: items.len() - start,
            });
        } else if t + 1 != turns.len() {
            return Err(Error::input(
                "only the final turn may omit its answer (generation)",
            ));
        }
    }

    Ok(SequencePlan {
        items,
        token_ids,
        answer_mask,
        segments,
    })
}

/// Sizing for the three per-frame projectors.
#[derive(Debug, Clone)]
pub struct ProjectorCfg {
    pub channel_dim: usize,
    pub llm_dim: usize,
    pub landmark_count: usize,
    /// Rows of the enhanced-token input (1 for attention mining, 2 for the
    /// pool-concat baseline).
    pub enhanced_rows: usize,
}

pub struct Projectors {
    pub cfg: ProjectorCfg,
}

impl Projectors {
    pub fn new(cfg: ProjectorCfg) -> Self {
        Projectors { cfg }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let d = self.cfg.llm_dim;
        let inputs = [
            ("proj.ctx", self.cfg.channel_dim),
            ("proj.vis", self.cfg.channel_dim * self.cfg.enhanced_rows),
            ("proj.lmk", self.cfg.landmark_count * 2),
        ];
        for (prefix, input) in inputs {
            store.init_normal(
                format!("{prefix}.w1"),
                (input, d),
                1.0 / (input as f64).sqrt(),
                true,
            );
            store.init_zeros(format!("{prefix}.b1"), (1, d), true);
            store.init_normal(
                format!("{prefix}.w2"),
                (d, d),
                1.0 / (d as f64).sqrt(),
                true,
            );
            store.init_zeros(format!("{prefix}.b2"), (1, d), true);
        }
    }

    fn mlp<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
        x: NodeId,
    ) -> NodeId {
        let h = blocks::linear_bias(g, store, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h = g.gelu(h);
        blocks::linear_bias(g, store, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Context token (1 x C) -> decoder token (1 x D).
    pub fn project_context<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ctx: NodeId,
    ) -> NodeId {
        assert_eq!(g.shape(ctx), (1, self.cfg.channel_dim));
        self.mlp(g, store, "proj.ctx", ctx)
    }

    /// Enhanced token (`enhanced_rows` x C, flattened row-major) -> 1 x D.
    pub fn project_enhanced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        enhanced: NodeId,
    ) -> NodeId {
        let (rows, c) = g.shape(enhanced);
        assert_eq!(rows, self.cfg.enhanced_rows);
        assert_eq!(c, self.cfg.channel_dim);
        let flat = if rows == 1 {
            enhanced
        } else {
            let parts: Vec<NodeId> = (0..rows).map(|r| g.slice_rows(enhanced, r, 1)).collect();
            g.concat_cols(&parts)
        };
        self.mlp(g, store, "proj.vis", flat)
    }

    /// Landmarks (off-graph, from the frozen expert) -> 1 x D.
    pub fn project_landmarks<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        landmarks: &LandmarkSet<T>,
    ) -> NodeId {
        assert_eq!(landmarks.len(), self.cfg.landmark_count);
        let mut flat = Array2::zeros((1, self.cfg.landmark_count * 2));
        for k in 0..landmarks.len() {
            flat[[0, 2 * k]] = landmarks.points[[k, 0]];
            flat[[0, 2 * k + 1]] = landmarks.points[[k, 1]];
        }
        let x = g.constant(flat);
        self.mlp(g, store, "proj.lmk", x)
    }
}

/// Mean negative log-likelihood over the supervised positions.
///
/// `aligned_logits` row i must be the next-token distribution for position
/// i given positions before i; the mask selects the answer positions.
pub fn autoregressive_loss<T: Scalar>(
    aligned_logits: &Array2<T>,
    token_ids: &[usize],
    answer_mask: &[bool],
) -> Result<T> {
    if aligned_logits.nrows() != token_ids.len() || token_ids.len() != answer_mask.len() {
        return Err(Error::input(format!(
            "loss inputs disagree on length: {} logits, {} ids, {} mask",
            aligned_logits.nrows(),
            token_ids.len(),
            answer_mask.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..token_ids.len() {
        if !answer_mask[i] {
            continue;
        }
        if i == 0 {
            return Err(Error::input("position 0 cannot be supervised"));
        }
        if token_ids[i] >= aligned_logits.ncols() {
            return Err(Error::input(format!(
                "token id {} exceeds vocab {}",
                token_ids[i],
                aligned_logits.ncols()
            )));
        }
        let row: Vec<f64> = aligned_logits.row(i).iter().map(|&v| to_f64(v)).collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[token_ids[i]];
        count += 1;
    }
    if count == 0 {
        return Err(Error::input("no supervised positions in sequence"));
    }
    Ok(s::<T>(total / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agr() -> AgrAttributes {
        AgrAttributes {
            age: "adult".into(),
            gender: "female".into(),
            race: "group-A".into(),
        }
    }

    fn vocab() -> Tokenizer {
        Tokenizer::build([
            "what emotion is shown ?",
            "happiness sadness anger",
            ATTRIBUTE_PROMPT_PREFIX,
            "adult , female , group-a .",
            "a close look",
        ])
    }

    #[test]
    fn attribute_prompt_renders_verbatim() {
        let text = build_attribute_prompt(&agr(), true);
        assert_eq!(
            text,
            "According to the specific question, you are allowed to use or partially use the \
             following information: adult, female, group-A."
        );
        assert_eq!(build_attribute_prompt(&agr(), false), "");
    }

    #[test]
    fn plan_layout_single_turn() {
        let v = vocab();
        let plan = plan_sequence(
            &v,
            2,
            true,
            &build_attribute_prompt(&agr(), true),
            None,
            &[TurnText {
                question: "what emotion is shown?",
                answer: Some("happiness"),
            }],
        )
        .unwrap();

        // BOS + 2 frames x 3 tokens + HUMAN + prompt + question(5) +
        // ASSISTANT + answer(1) + EOS.
        assert_eq!(plan.items[0], SeqItem::Token(BOS));
        assert_eq!(
            plan.items[1],
            SeqItem::FrameSlot {
                frame: 0,
                part: FramePart::Context
            }
        );
        assert_eq!(
            plan.items[3],
            SeqItem::FrameSlot {
                frame: 0,
                part: FramePart::Landmark
            }
        );
        assert_eq!(
            plan.items[4],
            SeqItem::FrameSlot {
                frame: 1,
                part: FramePart::Context
            }
        );
        assert_eq!(plan.items[7], SeqItem::Token(HUMAN));
        // Frame placeholders carry the FRAME id.
        assert_eq!(plan.token_ids[1], FRAME);
        // Supervision covers the answer and its EOS, nothing else.
        assert_eq!(plan.answer_positions(), 2);
        let last = plan.len() - 1;
        assert!(plan.answer_mask[last]);
        assert_eq!(plan.token_ids[last], EOS);
        assert!(plan.answer_mask[last - 1]);
        assert!(!plan.answer_mask[last - 2]);
        // Segment kinds present.
        let kinds: Vec<SegmentKind> = plan.segments.iter().map(|s| s.kind).collect();
        assert!(kinds.contains(&SegmentKind::Frames));
        assert!(kinds.contains(&SegmentKind::Prompt));
        assert!(kinds.contains(&SegmentKind::Question));
        assert!(kinds.contains(&SegmentKind::Answer));
    }

    #[test]
    fn landmark_toggle_drops_one_slot_per_frame() {
        let v = vocab();
        let with = plan_sequence(&v, 2, true, "", None, &[TurnText { question: "what", answer: Some("anger") }]).unwrap();
        let without = plan_sequence(&v, 2, false, "", None, &[TurnText { question: "what", answer: Some("anger") }]).unwrap();
        assert_eq!(with.len() - without.len(), 2);
    }

    #[test]
    fn description_is_prompt_tagged_after_question() {
        let v = vocab();
        let plan = plan_sequence(
            &v,
            1,
            false,
            "",
            Some("a close look"),
            &[TurnText {
                question: "what emotion is shown?",
                answer: Some("anger"),
            }],
        )
        .unwrap();
        let q = plan
            .segments
            .iter()
            .find(|s| s.kind == SegmentKind::Question)
            .unwrap();
        let p = plan
            .segments
            .iter()
            .find(|s| s.kind == SegmentKind::Prompt)
            .unwrap();
        assert_eq!(p.start, q.start + q.len);
        assert_eq!(p.len, 3);
    }

    #[test]
    fn multi_turn_is_flat_and_supervises_every_answer() {
        let v = vocab();
        let plan = plan_sequence(
            &v,
            1,
            true,
            "",
            None,
            &[
                TurnText {
                    question: "what emotion is shown?",
                    answer: Some("sadness"),
                },
                TurnText {
                    question: "what emotion is shown?",
                    answer: Some("anger"),
                },
            ],
        )
        .unwrap();
        let answers: Vec<&Segment> = plan
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Answer)
            .collect();
        assert_eq!(answers.len(), 2);
        assert_eq!(plan.answer_positions(), 4); // two answers + two EOS
        // Frames appear exactly once.
        let frames = plan
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Frames)
            .count();
        assert_eq!(frames, 1);
        let frame_slots = plan
            .items
            .iter()
            .filter(|i| matches!(i, SeqItem::FrameSlot { .. }))
            .count();
        assert_eq!(frame_slots, 3);
    }

    #[test]
    fn generation_plan_ends_at_assistant() {
        let v = vocab();
        let plan = plan_sequence(
            &v,
            1,
            true,
            "",
            None,
            &[TurnText {
                question: "what emotion is shown?",
                answer: None,
            }],
        )
        .unwrap();
        assert_eq!(*plan.token_ids.last().unwrap(), ASSISTANT);
        assert_eq!(plan.answer_positions(), 0);
    }

    #[test]
    fn empty_answer_or_question_is_an_input_error() {
        let v = vocab();
        let empty_answer = plan_sequence(
            &v,
            1,
            true,
            "",
            None,
            &[TurnText {
                question: "what",
                answer: Some(""),
            }],
        );
        assert!(empty_answer.is_err());
        let empty_question = plan_sequence(
            &v,
            1,
            true,
            "",
            None,
            &[TurnText {
                question: "",
                answer: Some("anger"),
            }],
        );
        assert!(empty_question.is_err());
    }

    #[test]
    fn only_final_turn_may_omit_answer() {
        let v = vocab();
        let bad = plan_sequence(
            &v,
            1,
            true,
            "",
            None,
            &[
                TurnText {
                    question: "what",
                    answer: None,
                },
                TurnText {
                    question: "what",
                    answer: Some("anger"),
                },
            ],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn uniform_logits_lose_log_vocab() {
        let logits = Array2::<f64>::zeros((4, 9));
        let ids = [1, 7, 8, 2];
        let mask = [false, false, true, true];
        let loss = autoregressive_loss(&logits, &ids, &mask).unwrap();
        assert!((loss - (9.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_graph_cross_entropy() {
        let mut rng_state = 123456789u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let logits = Array2::from_shape_fn((5, 6), |_| next());
        let ids = [0, 3, 5, 1, 2];
        let mask = [false, true, false, true, true];
        let direct = autoregressive_loss(&logits, &ids, &mask).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let l = g.constant(logits);
        let node = g.cross_entropy_masked(l, &ids, &mask);
        assert!((direct - g.value(node)[[0, 0]]).abs() < 1e-12);
    }

    #[test]
    fn no_supervised_positions_is_an_input_error() {
        let logits = Array2::<f64>::zeros((3, 4));
        let err = autoregressive_loss(&logits, &[0, 1, 2], &[false, false, false]).unwrap_err();
        assert_eq!(err.kind(), "input");
    }

    #[test]
    fn projector_shapes() {
        let cfg = ProjectorCfg {
            channel_dim: 6,
            llm_dim: 10,
            landmark_count: 4,
            enhanced_rows: 2,
        };
        let proj = Projectors::new(cfg);
        let mut store: ParamStore<f64> = ParamStore::new(5);
        proj.init(&mut store);
        let mut g = Graph::new();
        let ctx = g.constant(Array2::from_elem((1, 6), 0.5));
        let enh = g.constant(Array2::from_elem((2, 6), -0.25));
        let out_c = proj.project_context(&mut g, &store, ctx);
        let out_e = proj.project_enhanced(&mut g, &store, enh);
        assert_eq!(g.shape(out_c), (1, 10));
        assert_eq!(g.shape(out_e), (1, 10));
        let lm = LandmarkSet {
            points: Array2::from_elem((4, 2), 0.5),
            visibility: vec![true; 4],
        };
        let out_l = proj.project_landmarks(&mut g, &store, &lm);
        assert_eq!(g.shape(out_l), (1, 10));
    }
}
