//! Implementations of the four subcommands. Every run directory receives a
//! `config.toml` snapshot of the fully resolved configuration and a
//! `run.json` describing the invocation, so any run can be reproduced.

use std::path::Path;

use facelm::config::Config;
use facelm::dataset::Dataset;
use facelm::error::io_ctx;
use facelm::eval::{
    run_eval, ClosedSetPrompt, EvalCfg, EvalMode, ModelResponder, OracleResponder,
    RandomResponder, Responder,
};
use facelm::instruct::{
    generate_for_dataset, read_instructions, validate_and_write, GenCfg, GeneratorClient,
    HttpClient, HttpClientCfg, InstructionSample, MockClient,
};
use facelm::tokenizer::Tokenizer;
use facelm::train::{load_manifest, parse_kinds, standard_vocabulary, train};
use facelm::{Error, Result};

use crate::{AblateArgs, Cmd, EvalArgs, GenArgs, ToggleArgs, TrainArgs};

/// Dispatches a parsed subcommand; the returned code is the process exit
/// status for successful runs (0, or 4 for partially completed
/// evaluations).
pub fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    io_ctx(std::fs::create_dir_all(dir), dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::io_other(path, format!("encode json: {e}")))?;
    io_ctx(std::fs::write(path, text), path)
}

impl ToggleArgs {
    fn apply(&self, cfg: &mut Config) {
        if self.no_facial_embedding {
            cfg.features.facial_embedding = false;
        }
        if self.no_landmark_token {
            cfg.features.landmark_token = false;
        }
        if self.no_agr_prompt {
            cfg.features.agr_prompt = false;
        }
        if self.no_local_attention {
            cfg.features.local_attention = false;
        }
        if self.no_sampler {
            cfg.train.balanced_sampler = false;
        }
        if self.with_description {
            cfg.features.descriptive_text = true;
        }
        if self.no_description {
            cfg.features.descriptive_text = false;
        }
    }
}

fn toggle_snapshot(cfg: &Config) -> serde_json::Value {
    serde_json::json!({
        "facial-embedding": cfg.features.facial_embedding,
        "landmark-token": cfg.features.landmark_token,
        "agr-prompt": cfg.features.agr_prompt,
        "local-attention": cfg.features.local_attention,
        "sampler": cfg.train.balanced_sampler,
        "descriptive-text": cfg.features.descriptive_text,
    })
}

fn build_fixture(preset: &str, dir: &Path, per_class: usize, seed: u64) -> Result<Dataset> {
    use facelm::fixtures;
    match preset {
        "tiny" => fixtures::seven_class_images(dir, 2, seed),
        "seven" => fixtures::seven_class_images(dir, per_class, seed),
        "imbalanced" => fixtures::binary_imbalanced_images(dir, 38, 2, seed),
        "face-only" => fixtures::face_only_signal_images(dir, per_class, seed),
        "videos" => fixtures::seven_class_videos(dir, per_class, 2.0, 4, seed),
        other => Err(Error::config(format!(
            "unknown fixture preset {other:?} (expected tiny, seven, imbalanced, face-only, or videos)"
        ))),
    }
}

fn cmd_gen(args: GenArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.model.seed);
    ensure_dir(&args.out)?;

    let dataset = match (&args.data, &args.fixtures) {
        (Some(dir), None) => Dataset::load(dir)?,
        (None, Some(preset)) => build_fixture(preset, &args.out.join("dataset"), args.per_class, seed)?,
        (None, None) => {
            return Err(Error::config(
                "pass --data <dir> for an existing dataset or --fixtures <preset> to synthesize one",
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };

    let client: Box<dyn GeneratorClient> = if args.mock {
        Box::new(MockClient)
    } else if let Some(endpoint) = &args.endpoint {
        Box::new(HttpClient::new(HttpClientCfg {
            endpoint: endpoint.clone(),
            api_key_env: args.api_key_env.clone(),
            max_requests_per_second: args.requests_per_second,
            timeout_seconds: args.timeout_seconds,
        })?)
    } else {
        return Err(Error::config(
            "pass --mock for offline generation or --endpoint <url> for a remote generator",
        ));
    };

    let kinds = parse_kinds(&args.kinds)?;
    let gen_cfg = GenCfg {
        seed,
        ..GenCfg::default()
    };
    let (samples, skipped) = generate_for_dataset(&dataset, client.as_ref(), &gen_cfg, &kinds)?;
    let instructions_path = args.out.join("instructions.jsonl");
    let manifest = validate_and_write(&samples, &dataset.spec.classes, &instructions_path)?;
    manifest.save(&args.out.join("manifest.json"))?;

    cfg.save(&args.out.join("config.toml"))?;
    write_json(
        &args.out.join("run.json"),
        &serde_json::json!({
            "subcommand": "gen",
            "seed": seed,
            "dataset": dataset.dir.display().to_string(),
            "fixtures": args.fixtures,
            "client": client.name(),
            "kinds": args.kinds,
            "skipped_by_client": skipped,
            "instructions": instructions_path.display().to_string(),
        }),
    )?;

    println!(
        "wrote {} instructions ({} duplicates removed, {} rejected, {} skipped by client) -> {}",
        manifest.written,
        manifest.deduplicated,
        manifest.rejected.len(),
        skipped,
        instructions_path.display()
    );
    Ok(0)
}

fn resolved_train_config(args: &TrainArgs) -> Result<Config> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        cfg.train.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(kinds) = &args.kinds {
        cfg.train.kinds = kinds.clone();
    }
    args.toggles.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Builds a fresh model for `cfg` and trains it on the instruction set,
/// leaving the checkpoint at `checkpoint_dir`.
fn train_once(
    cfg: &Config,
    dataset: &Dataset,
    data_root: &Path,
    instructions: &[InstructionSample],
    checkpoint_dir: &Path,
) -> Result<facelm::train::TrainOutcome> {
    let vocabulary = standard_vocabulary(dataset, instructions);
    let tokenizer = Tokenizer::build(vocabulary.iter().map(String::as_str));
    let mut model = facelm::Model::new(cfg.clone(), tokenizer)?;
    train(&mut model, data_root, instructions, checkpoint_dir)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let cfg = resolved_train_config(&args)?;
    let dataset = Dataset::load(&args.data)?;
    let instructions = read_instructions(&args.instructions)?;
    ensure_dir(&args.out)?;

    let checkpoint_dir = args.out.join("checkpoint");
    let outcome = train_once(&cfg, &dataset, &args.data, &instructions, &checkpoint_dir)?;

    cfg.save(&args.out.join("config.toml"))?;
    write_json(
        &args.out.join("run.json"),
        &serde_json::json!({
            "subcommand": "train",
            "seed": cfg.train.seed,
            "dataset": args.data.display().to_string(),
            "instructions": args.instructions.display().to_string(),
            "checkpoint": outcome.checkpoint_dir.display().to_string(),
            "toggles": toggle_snapshot(&cfg),
            "kinds": cfg.train.kinds,
            "epochs": cfg.train.epochs,
            "steps": outcome.manifest.steps,
            "final_loss": outcome.manifest.final_loss(),
        }),
    )?;

    println!(
        "trained {} steps (loss {} -> {}), checkpoint -> {}",
        outcome.manifest.steps,
        outcome
            .manifest
            .initial_loss()
            .map_or_else(|| "n/a".to_string(), |l| format!("{l:.4}")),
        outcome
            .manifest
            .final_loss()
            .map_or_else(|| "n/a".to_string(), |l| format!("{l:.4}")),
        outcome.checkpoint_dir.display()
    );
    Ok(0)
}

/// Responder selection for `eval`, owning whatever state the choice needs.
enum CliResponder {
    Model(Box<facelm::Model>),
    Oracle(OracleResponder),
    Random(Box<RandomResponder>),
}

impl Responder for CliResponder {
    fn respond(
        &self,
        dataset: &Dataset,
        sample: &facelm::dataset::DatasetSample,
        prompt: &ClosedSetPrompt,
        description: Option<&str>,
    ) -> Result<String> {
        match self {
            CliResponder::Model(m) => {
                ModelResponder { model: m }.respond(dataset, sample, prompt, description)
            }
            CliResponder::Oracle(o) => o.respond(dataset, sample, prompt, description),
            CliResponder::Random(r) => r.respond(dataset, sample, prompt, description),
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let dataset = Dataset::load(&args.data)?;
    let mode = EvalMode::parse(&args.mode)?;

    let (responder, config_default_description, snapshot_cfg) = match args.responder.as_str() {
        "model" => {
            let checkpoint = args.checkpoint.as_ref().ok_or_else(|| {
                Error::config("--responder model requires --checkpoint <dir>")
            })?;
            let model: facelm::Model = facelm::Model::load(checkpoint)?;
            let default_desc = model.cfg.features.descriptive_text;
            let cfg = model.cfg.clone();
            (
                CliResponder::Model(Box::new(model)),
                default_desc,
                Some(cfg),
            )
        }
        "oracle" => (CliResponder::Oracle(OracleResponder), false, None),
        "random" => (
            CliResponder::Random(Box::new(RandomResponder::new(args.seed))),
            false,
            None,
        ),
        other => {
            return Err(Error::config(format!(
                "unknown responder {other:?} (expected model, oracle, or random)"
            )))
        }
    };

    let with_description = if args.with_description {
        true
    } else if args.no_description {
        false
    } else {
        config_default_description
    };

    let eval_cfg = EvalCfg {
        mode,
        with_description,
        question: args.question.clone(),
    };
    ensure_dir(&args.out)?;
    let outcome = run_eval(&responder, &dataset, &eval_cfg, &args.out)?;

    if let Some(cfg) = &snapshot_cfg {
        cfg.save(&args.out.join("config.toml"))?;
    }
    write_json(
        &args.out.join("run.json"),
        &serde_json::json!({
            "subcommand": "eval",
            "dataset": args.data.display().to_string(),
            "checkpoint": args.checkpoint.as_ref().map(|p| p.display().to_string()),
            "responder": args.responder,
            "mode": mode.as_str(),
            "with_description": with_description,
            "question": args.question,
        }),
    )?;

    let m = &outcome.report.metrics;
    println!(
        "mode {}: acc {:.4}, uar {:.4}, war {:.4} over {} samples ({} unparseable, {} failed) -> {}",
        outcome.report.mode.as_str(),
        m.acc,
        m.uar,
        m.war,
        m.total,
        m.unparseable_count,
        outcome.report.failed_samples,
        outcome.report_path.display()
    );
    Ok(outcome.exit_code())
}

const ABLATION_AXES: [&str; 6] = [
    "facial-embedding",
    "landmark-token",
    "agr-prompt",
    "local-attention",
    "sampler",
    "descriptive-text",
];

fn set_axis(cfg: &mut Config, axis: &str, on: bool) {
    match axis {
        "facial-embedding" => cfg.features.facial_embedding = on,
        "landmark-token" => cfg.features.landmark_token = on,
        "agr-prompt" => cfg.features.agr_prompt = on,
        "local-attention" => cfg.features.local_attention = on,
        "sampler" => cfg.train.balanced_sampler = on,
        "descriptive-text" => cfg.features.descriptive_text = on,
        other => unreachable!("axis {other} was validated"),
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    let mut base = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        base.model.seed = seed;
        base.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        base.train.epochs = epochs;
    }
    base.validate()?;

    let mut axes = Vec::new();
    for axis in &args.axes {
        if !ABLATION_AXES.contains(&axis.as_str()) {
            return Err(Error::config(format!(
                "unknown ablation axis {axis:?} (expected one of {})",
                ABLATION_AXES.join(", ")
            )));
        }
        if !axes.contains(axis) {
            axes.push(axis.clone());
        }
    }

    let dataset = Dataset::load(&args.data)?;
    let instructions = read_instructions(&args.instructions)?;
    ensure_dir(&args.out)?;

    let n_rows = 1usize << axes.len();
    let mut rows = Vec::with_capacity(n_rows);
    for mask in 0..n_rows {
        // Bit clear = axis on, so row 0 is the everything-on configuration.
        let settings: Vec<bool> = (0..axes.len()).map(|i| mask & (1 << i) == 0).collect();
        let mut cfg = base.clone();
        for (axis, &on) in axes.iter().zip(&settings) {
            set_axis(&mut cfg, axis, on);
        }

        let row_dir = args.out.join(format!("row-{mask}"));
        ensure_dir(&row_dir)?;
        let checkpoint_dir = row_dir.join("checkpoint");
        train_once(&cfg, &dataset, &args.data, &instructions, &checkpoint_dir)?;

        let eval_cfg = EvalCfg {
            mode: EvalMode::InDomain,
            with_description: cfg.features.descriptive_text,
            question: None,
        };
        let model: facelm::Model = facelm::Model::load(&checkpoint_dir)?;
        let responder = ModelResponder { model: &model };
        let eval_outcome = run_eval(&responder, &dataset, &eval_cfg, &row_dir.join("eval"))?;
        cfg.save(&row_dir.join("config.toml"))?;

        let m = &eval_outcome.report.metrics;
        let label = if axes.is_empty() {
            "baseline".to_string()
        } else {
            axes.iter()
                .zip(&settings)
                .map(|(a, &on)| format!("{a}={}", if on { "on" } else { "off" }))
                .collect::<Vec<_>>()
                .join(",")
        };
        log::info!("ablation row {mask} ({label}): uar {:.4} war {:.4}", m.uar, m.war);
        rows.push(serde_json::json!({
            "row": mask,
            "label": label,
            "settings": settings,
            "uar": m.uar,
            "war": m.war,
            "acc": m.acc,
            "final_loss": load_manifest(&checkpoint_dir)?.final_loss(),
            // Relative so a rerun into a different directory stays
            // byte-identical.
            "dir": format!("row-{mask}"),
        }));
    }

    let table = serde_json::json!({
        "axes": axes,
        "seed": base.train.seed,
        "rows": rows,
    });
    write_json(&args.out.join("ablation.json"), &table)?;
    base.save(&args.out.join("config.toml"))?;
    write_json(
        &args.out.join("run.json"),
        &serde_json::json!({
            "subcommand": "ablate",
            "dataset": args.data.display().to_string(),
            "instructions": args.instructions.display().to_string(),
            "axes": axes,
            "seed": base.train.seed,
            "epochs": base.train.epochs,
            "rows": n_rows,
        }),
    )?;

    print_ablation_table(&axes, &table);
    Ok(0)
}

fn print_ablation_table(axes: &[String], table: &serde_json::Value) {
    let mut header: Vec<String> = vec!["row".into()];
    header.extend(axes.iter().cloned());
    header.extend(["uar", "war", "acc"].map(String::from));

    let rows = table["rows"].as_array().expect("rows array");
    let mut lines: Vec<Vec<String>> = vec![header];
    for row in rows {
        let mut line = vec![row["row"].to_string()];
        for on in row["settings"].as_array().expect("settings array") {
            line.push(if on.as_bool() == Some(true) { "on".into() } else { "off".into() });
        }
        for key in ["uar", "war", "acc"] {
            line.push(format!("{:.4}", row[key].as_f64().unwrap_or(f64::NAN)));
        }
        lines.push(line);
    }

    let columns = lines[0].len();
    let widths: Vec<usize> = (0..columns)
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    for line in &lines {
        let rendered: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        println!("{}", rendered.join("  ").trim_end());
    }
}
