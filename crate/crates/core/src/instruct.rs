//! Instruction-data generation: closed-set category Q/A pairs templated
//! locally, and free-form conversations produced by a pluggable generator
//! client (live HTTP, recorded replay, or a deterministic offline mock),
//! followed by validation, dedup, and JSONL serialization.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_captions, Dataset, Modality};
use crate::error::{io_ctx, Error, Result};
use crate::param::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionKind {
    Category,
    Conversation,
}

impl std::fmt::Display for InstructionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InstructionKind::Category => write!(f, "category"),
            InstructionKind::Conversation => write!(f, "conversation"),
        }
    }
}

/// One training item: a media reference plus an alternating dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    pub modality: Modality,
    /// Media path relative to the dataset root.
    pub media: String,
    pub label: String,
    pub kind: InstructionKind,
    pub turns: Vec<Turn>,
    /// Unparsed generator output, kept for audit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_generation: Option<String>,
}

impl InstructionSample {
    /// Structural invariants: alternating turns starting with a human, a
    /// final assistant turn, category = exactly one exchange, known label.
    pub fn validate(&self, classes: &[String]) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::input("instruction sample has an empty id"));
        }
        if !classes.iter().any(|c| c == &self.label) {
            return Err(Error::input(format!(
                "label {:?} is not in the class set",
                self.label
            )));
        }
        if self.turns.is_empty() || !self.turns.len().is_multiple_of(2) {
            return Err(Error::input(format!(
                "sample {} needs an even, non-zero number of turns",
                self.id
            )));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expect = if i % 2 == 0 { Role::Human } else { Role::Assistant };
            if turn.role != expect {
                return Err(Error::input(format!(
                    "sample {}: turn {i} must alternate starting with a human turn",
                    self.id
                )));
            }
            if turn.text.trim().is_empty() {
                return Err(Error::input(format!("sample {}: turn {i} is empty", self.id)));
            }
        }
        if self.kind == InstructionKind::Category && self.turns.len() != 2 {
            return Err(Error::input(format!(
                "category sample {} must be exactly one question/answer pair",
                self.id
            )));
        }
        Ok(())
    }

    /// Dedup identity: same media and same dialogue text.
    fn dedup_key(&self) -> String {
        let mut key = self.media.clone();
        for t in &self.turns {
            key.push('\u{1f}');
            key.push_str(&t.text);
        }
        key
    }
}

/// Everything a conversation generator gets to condition on.
#[derive(Debug, Clone, Serialize)]
pub struct GenerationRequest {
    pub media: String,
    pub modality: Modality,
    pub label: String,
    /// Textual stand-in for the image or the central video frame.
    pub summary: String,
    /// One caption per second for videos; empty for images.
    pub captions: Vec<String>,
}

/// Produces raw dialogue text in the `HUMAN:`/`ASSISTANT:` line protocol.
pub trait GeneratorClient {
    fn generate(&self, req: &GenerationRequest) -> Result<String>;
    fn name(&self) -> &'static str;
}

/// Parses the line protocol into turns: each turn starts at a line beginning
/// with `HUMAN:` or `ASSISTANT:`; continuation lines attach to the open turn.
pub fn parse_turns(raw: &str) -> Result<Vec<Turn>> {
    let mut turns: Vec<Turn> = Vec::new();
    for line in raw.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("HUMAN:") {
            turns.push(Turn {
                role: Role::Human,
                text: rest.trim().to_string(),
            });
        } else if let Some(rest) = trimmed.strip_prefix("ASSISTANT:") {
            turns.push(Turn {
                role: Role::Assistant,
                text: rest.trim().to_string(),
            });
        } else if trimmed.is_empty() {
            continue;
        } else if let Some(last) = turns.last_mut() {
            if !last.text.is_empty() {
                last.text.push(' ');
            }
            last.text.push_str(trimmed);
        } else {
            return Err(Error::input("dialogue text before the first turn marker"));
        }
    }
    if turns.is_empty() {
        return Err(Error::input("generator returned no turns"));
    }
    Ok(turns)
}

/// Deterministic offline generator: label-conditioned templates, one
/// exchange for images, two for videos (quoting the first caption).
pub struct MockClient;

impl GeneratorClient for MockClient {
    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        if req.label.trim().is_empty() {
            return Err(Error::input("generation is label-conditioned; label is empty"));
        }
        let mut out = String::new();
        match req.modality {
            Modality::Image => {
                out.push_str("HUMAN: What stands out about the person in this image?\n");
                out.push_str(&format!(
                    "ASSISTANT: Looking at {}, the face most clearly conveys {}.\n",
                    req.summary, req.label
                ));
            }
            Modality::Video => {
                out.push_str("HUMAN: Describe how the person's expression unfolds in this clip.\n");
                let first_caption = req
                    .captions
                    .first()
                    .ok_or_else(|| Error::input("video generation needs at least one caption"))?;
                out.push_str(&format!(
                    "ASSISTANT: The clip opens with {first_caption} and settles into {}.\n",
                    req.label
                ));
                out.push_str("HUMAN: What emotion would you say dominates overall?\n");
                out.push_str(&format!(
                    "ASSISTANT: Overall the dominant emotion is {}.\n",
                    req.label
                ));
            }
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

/// Replays recorded responses keyed by `media|label`; missing keys fail.
pub struct ReplayClient {
    pub responses: BTreeMap<String, String>,
}

impl ReplayClient {
    pub fn key(media: &str, label: &str) -> String {
        format!("{media}|{label}")
    }
}

impl GeneratorClient for ReplayClient {
    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        self.responses
            .get(&ReplayClient::key(&req.media, &req.label))
            .cloned()
            .ok_or_else(|| Error::client(format!("no recorded response for {}", req.media)))
    }

    fn name(&self) -> &'static str {
        "replay"
    }
}

/// Test double that pops scripted outcomes in order.
pub struct ScriptedClient {
    pub script: Mutex<VecDeque<Result<String>>>,
}

impl ScriptedClient {
    pub fn new(script: Vec<Result<String>>) -> Self {
        ScriptedClient {
            script: Mutex::new(script.into()),
        }
    }
}

impl GeneratorClient for ScriptedClient {
    fn generate(&self, _req: &GenerationRequest) -> Result<String> {
        self.script
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or_else(|| Err(Error::client("script exhausted")))
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpClientCfg {
    pub endpoint: String,
    /// Environment variable holding the bearer token; empty sends no auth.
    pub api_key_env: String,
    pub max_requests_per_second: f64,
    pub timeout_seconds: u64,
}

/// Live generator over HTTP POST: sends the request as JSON, expects the
/// dialogue text back as the response body. Paced to the configured rate.
pub struct HttpClient {
    cfg: HttpClientCfg,
    agent: ureq::Agent,
    last_request: Mutex<Option<Instant>>,
}

impl HttpClient {
    pub fn new(cfg: HttpClientCfg) -> Result<Self> {
        if !(cfg.max_requests_per_second.is_finite() && cfg.max_requests_per_second > 0.0) {
            return Err(Error::config("max_requests_per_second must be positive"));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_seconds.max(1))))
            .build()
            .into();
        Ok(HttpClient {
            cfg,
            agent,
            last_request: Mutex::new(None),
        })
    }

    fn pace(&self) {
        let min_gap = Duration::from_secs_f64(1.0 / self.cfg.max_requests_per_second);
        let mut last = self.last_request.lock().expect("pace lock");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < min_gap {
                std::thread::sleep(min_gap - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl GeneratorClient for HttpClient {
    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        self.pace();
        let body = serde_json::to_string(req)
            .map_err(|e| Error::client(format!("encode request: {e}")))?;
        let mut http = self
            .agent
            .post(&self.cfg.endpoint)
            .header("content-type", "application/json");
        if !self.cfg.api_key_env.is_empty() {
            let key = std::env::var(&self.cfg.api_key_env).map_err(|_| {
                Error::config(format!("api key env var {} is not set", self.cfg.api_key_env))
            })?;
            http = http.header("authorization", &format!("Bearer {key}"));
        }
        let response = http
            .send(&body)
            .map_err(|e| Error::client(format!("generator request failed: {e}")))?;
        response
            .into_body()
            .read_to_string()
            .map_err(|e| Error::client(format!("read generator response: {e}")))
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

/// Closed-set question phrasings; the answer is always the bare label.
const CATEGORY_TEMPLATES: [&str; 4] = [
    "Which facial expression best describes this face? Choose one of: {classes}.",
    "From the options {classes}, what emotion does the person show?",
    "Please pick the single expression that fits this face from: {classes}.",
    "Looking at the face, which one of {classes} applies?",
];

/// Templates a closed-set category Q/A pair. The phrasing is a deterministic
/// function of (seed, id), so output order never changes the text.
pub fn gen_category_instruction(
    id: &str,
    modality: Modality,
    media: &str,
    label: &str,
    classes: &[String],
    seed: u64,
) -> Result<InstructionSample> {
    if !classes.iter().any(|c| c == label) {
        return Err(Error::input(format!("label {label:?} is not in the class set")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id));
    let template = CATEGORY_TEMPLATES[rng.random_range(0..CATEGORY_TEMPLATES.len())];
    let question = template.replace("{classes}", &classes.join(", "));
    let sample = InstructionSample {
        id: id.to_string(),
        modality,
        media: media.to_string(),
        label: label.to_string(),
        kind: InstructionKind::Category,
        turns: vec![
            Turn {
                role: Role::Human,
                text: question,
            },
            Turn {
                role: Role::Assistant,
                text: label.to_string(),
            },
        ],
        raw_generation: None,
    };
    sample.validate(classes)?;
    Ok(sample)
}

#[derive(Debug, Clone)]
pub struct GenCfg {
    pub seed: u64,
    /// Additional attempts after a failed client call.
    pub retries: usize,
    /// Base backoff between retries; doubles per attempt.
    pub backoff: Duration,
}

impl Default for GenCfg {
    fn default() -> Self {
        GenCfg {
            seed: 1,
            retries: 2,
            backoff: Duration::from_millis(0),
        }
    }
}

fn call_with_retries(
    client: &dyn GeneratorClient,
    cfg: &GenCfg,
    req: &GenerationRequest,
) -> Result<String> {
    let mut attempt = 0;
    loop {
        match client.generate(req) {
            Ok(raw) => return Ok(raw),
            Err(e) if attempt < cfg.retries => {
                log::warn!(
                    "generator {} failed on {} (attempt {}): {e}",
                    client.name(),
                    req.media,
                    attempt + 1
                );
                if !cfg.backoff.is_zero() {
                    std::thread::sleep(cfg.backoff * 2u32.pow(attempt as u32));
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn conversation_from_client(
    id: &str,
    req: &GenerationRequest,
    client: &dyn GeneratorClient,
    cfg: &GenCfg,
    classes: &[String],
) -> Result<InstructionSample> {
    if req.label.trim().is_empty() {
        return Err(Error::input("generation is label-conditioned; label is empty"));
    }
    let raw = call_with_retries(client, cfg, req)?;
    let turns = parse_turns(&raw)?;
    let sample = InstructionSample {
        id: id.to_string(),
        modality: req.modality,
        media: req.media.clone(),
        label: req.label.clone(),
        kind: InstructionKind::Conversation,
        turns,
        raw_generation: Some(raw),
    };
    sample.validate(classes)?;
    Ok(sample)
}

/// Conversation instructions for a single image.
pub fn gen_image_instructions(
    id: &str,
    media: &str,
    summary: &str,
    label: &str,
    classes: &[String],
    client: &dyn GeneratorClient,
    cfg: &GenCfg,
) -> Result<Vec<InstructionSample>> {
    let req = GenerationRequest {
        media: media.to_string(),
        modality: Modality::Image,
        label: label.to_string(),
        summary: summary.to_string(),
        captions: Vec::new(),
    };
    Ok(vec![conversation_from_client(id, &req, client, cfg, classes)?])
}

/// Conversation instructions for a video clip with per-second captions.
#[allow(clippy::too_many_arguments)]
pub fn gen_video_instructions(
    id: &str,
    media: &str,
    summary: &str,
    captions: &[String],
    label: &str,
    classes: &[String],
    client: &dyn GeneratorClient,
    cfg: &GenCfg,
) -> Result<Vec<InstructionSample>> {
    if captions.is_empty() {
        return Err(Error::input("video generation needs at least one caption"));
    }
    let req = GenerationRequest {
        media: media.to_string(),
        modality: Modality::Video,
        label: label.to_string(),
        summary: summary.to_string(),
        captions: captions.to_vec(),
    };
    Ok(vec![conversation_from_client(id, &req, client, cfg, classes)?])
}

/// Walks a dataset and produces category instructions for every sample plus
/// conversation instructions when the dataset permits them. Client failures
/// after retries skip the sample (logged and counted), never abort the run.
pub fn generate_for_dataset(
    dataset: &Dataset,
    client: &dyn GeneratorClient,
    cfg: &GenCfg,
    kinds: &[InstructionKind],
) -> Result<(Vec<InstructionSample>, u64)> {
    let classes = &dataset.spec.classes;
    let mut out = Vec::new();
    let mut skipped = 0u64;
    let want = |k: InstructionKind| kinds.is_empty() || kinds.contains(&k);
    for sample in &dataset.spec.samples {
        if want(InstructionKind::Category) {
            out.push(gen_category_instruction(
                &format!("{}-cat", sample.id),
                dataset.spec.modality,
                &sample.media,
                &sample.label,
                classes,
                cfg.seed,
            )?);
        }
        if want(InstructionKind::Conversation) && dataset.spec.conversation_eligible {
            let summary = sample
                .description
                .clone()
                .unwrap_or_else(|| "the provided face".to_string());
            let conv_id = format!("{}-conv", sample.id);
            let result = match dataset.spec.modality {
                Modality::Image => gen_image_instructions(
                    &conv_id,
                    &sample.media,
                    &summary,
                    &sample.label,
                    classes,
                    client,
                    cfg,
                ),
                Modality::Video => {
                    let clip_dir = dataset.dir.join(&sample.media);
                    let captions = load_captions(&clip_dir)?;
                    gen_video_instructions(
                        &conv_id,
                        &sample.media,
                        &summary,
                        &captions,
                        &sample.label,
                        classes,
                        client,
                        cfg,
                    )
                }
            };
            match result {
                Ok(mut samples) => out.append(&mut samples),
                Err(e) => {
                    log::warn!("skipping conversation for {}: {e}", sample.id);
                    skipped += 1;
                }
            }
        }
    }
    Ok((out, skipped))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenManifest {
    pub written: u64,
    pub deduplicated: u64,
    pub rejected: Vec<RejectedSample>,
    pub by_modality: BTreeMap<String, u64>,
    pub by_kind: BTreeMap<String, u64>,
    pub by_class: BTreeMap<String, u64>,
}

impl GenManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::io_other(path, format!("encode manifest: {e}")))?;
        io_ctx(std::fs::write(path, text), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io_ctx(std::fs::read_to_string(path), path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("malformed manifest {}: {e}", path.display())))
    }
}

/// Validates, deduplicates, and writes samples as JSON lines (atomically:
/// temp file then rename). Returns the bookkeeping manifest.
pub fn validate_and_write(
    samples: &[InstructionSample],
    classes: &[String],
    out_path: &Path,
) -> Result<GenManifest> {
    let mut seen = BTreeSet::new();
    let mut rejected = Vec::new();
    let mut deduplicated = 0u64;
    let mut kept: Vec<&InstructionSample> = Vec::new();
    for s in samples {
        if let Err(e) = s.validate(classes) {
            rejected.push(RejectedSample {
                id: s.id.clone(),
                reason: e.to_string(),
            });
            continue;
        }
        if !seen.insert(s.dedup_key()) {
            deduplicated += 1;
            continue;
        }
        kept.push(s);
    }

    let mut text = String::new();
    let mut by_modality = BTreeMap::new();
    let mut by_kind = BTreeMap::new();
    let mut by_class = BTreeMap::new();
    for s in &kept {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::io_other(out_path, format!("encode sample {}: {e}", s.id)))?;
        text.push_str(&line);
        text.push('\n');
        *by_modality.entry(s.modality.to_string()).or_insert(0) += 1;
        *by_kind.entry(s.kind.to_string()).or_insert(0) += 1;
        *by_class.entry(s.label.clone()).or_insert(0) += 1;
    }
    let tmp = out_path.with_extension("jsonl.tmp");
    io_ctx(std::fs::write(&tmp, &text), &tmp)?;
    io_ctx(std::fs::rename(&tmp, out_path), out_path)?;

    Ok(GenManifest {
        written: kept.len() as u64,
        deduplicated,
        rejected,
        by_modality,
        by_kind,
        by_class,
    })
}

/// Reads a JSONL instruction file back into samples.
pub fn read_instructions(path: &Path) -> Result<Vec<InstructionSample>> {
    let text = io_ctx(std::fs::read_to_string(path), path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: InstructionSample = serde_json::from_str(line).map_err(|e| {
            Error::input(format!("line {} of {}: {e}", i + 1, path.display()))
        })?;
        out.push(sample);
    }
    Ok(out)
}
