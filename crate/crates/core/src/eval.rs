//! Closed-set evaluation: prompt construction with a fixed guidance
//! sentence, tiered answer parsing, per-sample records, aggregate metrics,
//! and report artifacts (JSONL records, JSON report, SVG recall chart).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::TurnText;
use crate::dataset::{Dataset, DatasetSample, Modality};
use crate::error::{io_ctx, Error, Result};
use crate::metrics::{compute_metrics, MetricsReport, PredictionRecord, UNPARSEABLE};
use crate::model::{Model, ModelSample};
use crate::scalar::Scalar;

/// Answer-format guidance appended to every closed-set question. Golden
/// tests pin this string byte for byte; do not edit it.
pub const CLOSED_SET_GUIDANCE: &str = "PLEASE ENSURE that you start your answer with 'My choice is: ' FIRST and select ONLY ONE WORD from the provided list.";

/// Marker the tier-1 parser looks for, lowercased for comparison.
const CHOICE_MARKER: &str = "my choice is:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClosedSetPrompt {
    pub class_list: Vec<String>,
    pub guidance: String,
    pub question: String,
}

impl ClosedSetPrompt {
    /// The full human-turn text: question, options, guidance.
    pub fn render(&self) -> String {
        format!(
            "{} The provided list: {}. {}",
            self.question,
            self.class_list.join(", "),
            self.guidance
        )
    }
}

pub fn build_closed_set_prompt(class_list: &[String], question: &str) -> Result<ClosedSetPrompt> {
    if class_list.is_empty() {
        return Err(Error::input("closed-set prompt needs a non-empty class list"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in class_list {
        if !seen.insert(c.as_str()) {
            return Err(Error::input(format!("duplicate class {c:?} in class list")));
        }
    }
    if question.trim().is_empty() {
        return Err(Error::input("closed-set question is empty"));
    }
    Ok(ClosedSetPrompt {
        class_list: class_list.to_vec(),
        guidance: CLOSED_SET_GUIDANCE.to_string(),
        question: question.to_string(),
    })
}

/// True when `needle` occurs in `haystack` delimited by non-alphanumeric
/// characters on both sides. Both arguments must already be lowercase.
fn contains_whole_word(haystack: &str, needle: &str) -> bool {
    let h = haystack.as_bytes();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let left_ok = start == 0 || !h[start - 1].is_ascii_alphanumeric();
        let right_ok = end == h.len() || !h[end].is_ascii_alphanumeric();
        if left_ok && right_ok {
            return true;
        }
        from = start + 1;
    }
    false
}

/// Tiered, total, deterministic answer parsing:
/// 1. text following the choice marker, matched case-insensitively against
///    the class list (longest class wins on shared prefixes);
/// 2. otherwise a unique whole-word class mention anywhere in the response;
/// 3. otherwise [`UNPARSEABLE`].
pub fn parse_choice(response: &str, class_list: &[String]) -> String {
    let lower = response.to_lowercase();

    if let Some(pos) = lower.find(CHOICE_MARKER) {
        let after = lower[pos + CHOICE_MARKER.len()..].trim_start();
        let mut best: Option<&String> = None;
        for class in class_list {
            let cl = class.to_lowercase();
            if after.starts_with(&cl) {
                let end_ok = after[cl.len()..]
                    .chars()
                    .next()
                    .is_none_or(|c| !c.is_alphanumeric());
                if end_ok && best.is_none_or(|b| b.len() < class.len()) {
                    best = Some(class);
                }
            }
        }
        if let Some(class) = best {
            return class.clone();
        }
    }

    let mentioned: Vec<&String> = class_list
        .iter()
        .filter(|c| contains_whole_word(&lower, &c.to_lowercase()))
        .collect();
    if mentioned.len() == 1 {
        return mentioned[0].clone();
    }
    UNPARSEABLE.to_string()
}

/// Evaluation protocol variants; cross-modality modes pin the modality the
/// evaluated dataset must have.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    InDomain,
    CrossImageToVideo,
    CrossVideoToImage,
    ZeroShot,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::InDomain => "in-domain",
            EvalMode::CrossImageToVideo => "cross-image-to-video",
            EvalMode::CrossVideoToImage => "cross-video-to-image",
            EvalMode::ZeroShot => "zero-shot",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "in-domain" => Ok(EvalMode::InDomain),
            "cross-image-to-video" => Ok(EvalMode::CrossImageToVideo),
            "cross-video-to-image" => Ok(EvalMode::CrossVideoToImage),
            "zero-shot" => Ok(EvalMode::ZeroShot),
            other => Err(Error::config(format!(
                "unknown eval mode {other:?} (expected in-domain, cross-image-to-video, cross-video-to-image, or zero-shot)"
            ))),
        }
    }

    fn required_modality(&self) -> Option<Modality> {
        match self {
            EvalMode::CrossImageToVideo => Some(Modality::Video),
            EvalMode::CrossVideoToImage => Some(Modality::Image),
            EvalMode::InDomain | EvalMode::ZeroShot => None,
        }
    }
}

/// Anything that can answer a closed-set question about a dataset sample.
pub trait Responder {
    fn respond(
        &self,
        dataset: &Dataset,
        sample: &DatasetSample,
        prompt: &ClosedSetPrompt,
        description: Option<&str>,
    ) -> Result<String>;
}

/// The real thing: greedy generation from a trained model.
pub struct ModelResponder<'a, T: Scalar> {
    pub model: &'a Model<T>,
}

impl<'a, T: Scalar> Responder for ModelResponder<'a, T> {
    fn respond(
        &self,
        dataset: &Dataset,
        sample: &DatasetSample,
        prompt: &ClosedSetPrompt,
        description: Option<&str>,
    ) -> Result<String> {
        let handle = dataset.media_handle(sample)?;
        let text = prompt.render();
        let model_sample = ModelSample {
            media_id: &sample.media,
            handle: &handle,
            turns: vec![TurnText {
                question: &text,
                answer: None,
            }],
            description,
        };
        self.model.generate(&model_sample)
    }
}

/// Always answers with the gold label in the requested format.
pub struct OracleResponder;

impl Responder for OracleResponder {
    fn respond(
        &self,
        _dataset: &Dataset,
        sample: &DatasetSample,
        _prompt: &ClosedSetPrompt,
        _description: Option<&str>,
    ) -> Result<String> {
        Ok(format!("My choice is: {}", sample.label))
    }
}

/// Uniformly random choice over the prompt's class list.
pub struct RandomResponder {
    rng: Mutex<ChaCha8Rng>,
}

impl RandomResponder {
    pub fn new(seed: u64) -> Self {
        RandomResponder {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl Responder for RandomResponder {
    fn respond(
        &self,
        _dataset: &Dataset,
        _sample: &DatasetSample,
        prompt: &ClosedSetPrompt,
        _description: Option<&str>,
    ) -> Result<String> {
        let mut rng = self.rng.lock().expect("rng lock");
        let i = rng.random_range(0..prompt.class_list.len());
        Ok(format!("My choice is: {}", prompt.class_list[i]))
    }
}

/// Scripted outcome for one sample id.
#[derive(Debug, Clone)]
pub enum ScriptedReply {
    Text(String),
    Fail(String),
}

/// Answers from a fixed per-id table; useful for exercising failure paths.
pub struct ScriptedResponder {
    pub replies: BTreeMap<String, ScriptedReply>,
    pub fallback: Option<String>,
}

impl Responder for ScriptedResponder {
    fn respond(
        &self,
        _dataset: &Dataset,
        sample: &DatasetSample,
        _prompt: &ClosedSetPrompt,
        _description: Option<&str>,
    ) -> Result<String> {
        match self.replies.get(&sample.id) {
            Some(ScriptedReply::Text(t)) => Ok(t.clone()),
            Some(ScriptedReply::Fail(msg)) => Err(Error::input(msg.clone())),
            None => self
                .fallback
                .clone()
                .ok_or_else(|| Error::input(format!("no scripted reply for {}", sample.id))),
        }
    }
}

/// Answers correctly only when a description was injected — proves the
/// descriptive-text switch reaches the responder.
pub struct DescriptionSensitiveResponder;

impl Responder for DescriptionSensitiveResponder {
    fn respond(
        &self,
        _dataset: &Dataset,
        sample: &DatasetSample,
        prompt: &ClosedSetPrompt,
        description: Option<&str>,
    ) -> Result<String> {
        if description.is_some() {
            Ok(format!("My choice is: {}", sample.label))
        } else {
            let wrong = prompt
                .class_list
                .iter()
                .find(|c| *c != &sample.label)
                .unwrap_or(&sample.label);
            Ok(format!("My choice is: {wrong}"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalCfg {
    pub mode: EvalMode,
    /// Inject sample descriptions into prompts (inference-time switch).
    pub with_description: bool,
    /// Closed-set question; None uses the default phrasing.
    pub question: Option<String>,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            mode: EvalMode::InDomain,
            with_description: false,
            question: None,
        }
    }
}

pub const DEFAULT_EVAL_QUESTION: &str = "What facial expression does the person show?";

/// The persisted evaluation report: metrics plus run provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub dataset: String,
    pub with_description: bool,
    /// Samples whose generation failed (recorded as UNPARSEABLE).
    pub failed_samples: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub records: Vec<PredictionRecord>,
    pub records_path: PathBuf,
    pub report_path: PathBuf,
    pub chart_path: PathBuf,
}

impl EvalOutcome {
    /// CLI exit code: 0 for a clean run, 4 when some samples failed but the
    /// run completed.
    pub fn exit_code(&self) -> i32 {
        if self.report.failed_samples > 0 {
            4
        } else {
            0
        }
    }
}

/// Evaluates every dataset sample (ordered by id), never aborting on
/// per-sample failures, and writes records.jsonl, report.json, and
/// recall.svg into `out_dir`.
pub fn run_eval(
    responder: &dyn Responder,
    dataset: &Dataset,
    cfg: &EvalCfg,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    if let Some(required) = cfg.mode.required_modality() {
        if dataset.spec.modality != required {
            return Err(Error::config(format!(
                "mode {} evaluates {required} datasets, got a {} dataset",
                cfg.mode.as_str(),
                dataset.spec.modality
            )));
        }
    }
    let question = cfg.question.as_deref().unwrap_or(DEFAULT_EVAL_QUESTION);
    let prompt = build_closed_set_prompt(&dataset.spec.classes, question)?;

    let mut order: Vec<&DatasetSample> = dataset.spec.samples.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let mut records = Vec::with_capacity(order.len());
    let mut failed = 0u64;
    for sample in order {
        let description = if cfg.with_description {
            sample.description.as_deref()
        } else {
            None
        };
        match responder.respond(dataset, sample, &prompt, description) {
            Ok(response) => {
                let parsed = parse_choice(&response, &dataset.spec.classes);
                records.push(PredictionRecord {
                    id: sample.id.clone(),
                    response,
                    parsed,
                    gold: sample.label.clone(),
                    description: description.map(str::to_string),
                    error: None,
                });
            }
            Err(e) => {
                failed += 1;
                log::warn!("sample {} failed: {e}", sample.id);
                records.push(PredictionRecord {
                    id: sample.id.clone(),
                    response: String::new(),
                    parsed: UNPARSEABLE.to_string(),
                    gold: sample.label.clone(),
                    description: description.map(str::to_string),
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let metrics = compute_metrics(&records, &dataset.spec.classes)?;
    let report = EvalReport {
        mode: cfg.mode,
        dataset: dataset.spec.name.clone(),
        with_description: cfg.with_description,
        failed_samples: failed,
        metrics,
    };

    io_ctx(std::fs::create_dir_all(out_dir), out_dir)?;
    let records_path = out_dir.join("records.jsonl");
    let mut text = String::new();
    for r in &records {
        text.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::io_other(&records_path, format!("encode record: {e}")))?,
        );
        text.push('\n');
    }
    io_ctx(std::fs::write(&records_path, text), &records_path)?;

    let report_path = out_dir.join("report.json");
    let report_text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::io_other(&report_path, format!("encode report: {e}")))?;
    io_ctx(std::fs::write(&report_path, report_text), &report_path)?;

    let chart_path = out_dir.join("recall.svg");
    write_recall_chart(&report.metrics, &chart_path)?;

    Ok(EvalOutcome {
        report,
        records,
        records_path,
        report_path,
        chart_path,
    })
}

/// Reads a records file written by [`run_eval`].
pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = io_ctx(std::fs::read_to_string(path), path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::input(format!("line {} of {}: {e}", i + 1, path.display())))
        })
        .collect()
}

/// Per-class recall bar chart as a standalone SVG file.
pub fn write_recall_chart(metrics: &MetricsReport, path: &Path) -> Result<()> {
    let classes: Vec<&String> = metrics.per_class_recall.keys().collect();
    let n = classes.len().max(1);
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (70.0, 20.0, 30.0, 90.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let slot = plot_w / n as f64;
    let bar_w = slot * 0.7;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">Per-class recall</text>\n",
        w / 2.0
    ));
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = top + plot_h * (1.0 - frac);
        svg.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n",
            w - right
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{frac:.2}</text>\n",
            left - 6.0,
            y + 4.0
        ));
    }
    for (i, class) in classes.iter().enumerate() {
        let recall = metrics.per_class_recall[*class];
        let x = left + i as f64 * slot + (slot - bar_w) / 2.0;
        let bh = plot_h * recall;
        let y = top + plot_h - bh;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{bh:.1}\" fill=\"#4682b4\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{recall:.2}</text>\n",
            x + bar_w / 2.0,
            y - 4.0
        ));
        let lx = x + bar_w / 2.0;
        let ly = top + plot_h + 14.0;
        svg.push_str(&format!(
            "<text x=\"{lx:.1}\" y=\"{ly:.1}\" text-anchor=\"end\" transform=\"rotate(-35 {lx:.1} {ly:.1})\">{}</text>\n",
            svg_escape(class)
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
        top + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
        top + plot_h,
        w - right,
        top + plot_h
    ));
    svg.push_str("</svg>\n");
    io_ctx(std::fs::write(path, svg), path)
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
