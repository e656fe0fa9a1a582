//! Release acceptance gate.
//!
//! Each criterion runs as its own test and prints exactly one
//! `[PASS] criterion N: ...` / `[FAIL] criterion N: ...` line (visible under
//! `cargo test --test acceptance -- --nocapture`) carrying its measured
//! runtime and, where the criterion pins one, its time budget. The oracles
//! here are deliberately independent re-derivations: explicit index loops
//! over raw weight tensors, never calls back into the graph ops they check.

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use facelm::aggregator::{AggregatorCfg, ClueAggregator};
use facelm::assembly::{
    autoregressive_loss, build_attribute_prompt, ProjectorCfg, Projectors, ATTRIBUTE_PROMPT_PREFIX,
};
use facelm::blocks;
use facelm::config::Config;
use facelm::dataset::Dataset;
use facelm::eval::{
    build_closed_set_prompt, run_eval, EvalCfg, EvalMode, ModelResponder, CLOSED_SET_GUIDANCE,
    DEFAULT_EVAL_QUESTION,
};
use facelm::fixtures::{
    binary_imbalanced_images, face_only_signal_images, seven_class_images, SEVEN_CLASSES,
};
use facelm::graph::{softmax_rows_masked, Graph};
use facelm::instruct::{
    generate_for_dataset, read_instructions, validate_and_write, GenCfg, InstructionKind,
    InstructionSample, MockClient,
};
use facelm::llm::{LlmCfg, TinyDecoder};
use facelm::lora::inject_adapters;
use facelm::metrics::{compute_metrics, MetricsReport, PredictionRecord, UNPARSEABLE};
use facelm::mining::{AuRegions, FaceInfoMining, MiningCfg};
use facelm::param::ParamStore;
use facelm::priors::{AgrAttributes, LandmarkSet};
use facelm::tokenizer::Tokenizer;
use facelm::train::{standard_vocabulary, train};

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

/// Runs one criterion, timing it and printing a single verdict line. The
/// test still fails through the normal panic path; the budget (when the
/// criterion pins one) is enforced after the verdict is printed.
fn criterion<F: FnOnce()>(id: u32, name: &str, budget_secs: Option<f64>, body: F) {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(body));
    let secs = start.elapsed().as_secs_f64();
    let timing = match budget_secs {
        Some(b) => format!("{secs:.2}s / {b:.0}s budget"),
        None => format!("{secs:.2}s"),
    };
    let over_budget = budget_secs.is_some_and(|b| secs > b);
    match (&outcome, over_budget) {
        (Ok(()), false) => println!("[PASS] criterion {id}: {name} ({timing})"),
        (Ok(()), true) => println!("[FAIL] criterion {id}: {name} exceeded time budget ({timing})"),
        (Err(_), _) => println!("[FAIL] criterion {id}: {name} ({timing})"),
    }
    if let Err(cause) = outcome {
        std::panic::resume_unwind(cause);
    }
    assert!(
        !over_budget,
        "criterion {id} ({name}) exceeded its time budget: {timing}"
    );
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Unique scratch directory, removed on drop.
struct TempDir(PathBuf);

impl TempDir {
    fn new(tag: &str) -> TempDir {
        let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!(
            "facelm-accept-{tag}-{}-{n}",
            std::process::id()
        ));
        std::fs::create_dir_all(&dir).expect("create temp dir");
        TempDir(dir)
    }

    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v * std
    })
}

// ---------------------------------------------------------------------------
// Hand-unrolled oracle math (explicit loops only)
// ---------------------------------------------------------------------------

fn o_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, inner) = a.dim();
    let (inner2, n) = b.dim();
    assert_eq!(inner, inner2, "oracle matmul shape mismatch");
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..inner {
                acc += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn o_add(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(a.dim(), b.dim());
    let mut out = a.clone();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out[[i, j]] = a[[i, j]] + b[[i, j]];
        }
    }
    out
}

fn o_add_row(a: &Array2<f64>, row: &Array2<f64>) -> Array2<f64> {
    assert_eq!(row.nrows(), 1);
    assert_eq!(a.ncols(), row.ncols());
    let mut out = a.clone();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out[[i, j]] = a[[i, j]] + row[[0, j]];
        }
    }
    out
}

/// Row softmax with optional keep-mask; masked entries get exact zero mass.
fn o_softmax_rows(x: &Array2<f64>, keep: Option<&Array2<bool>>) -> Array2<f64> {
    let (m, n) = x.dim();
    if let Some(k) = keep {
        assert_eq!(k.dim(), (m, n));
    }
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        let kept = |j: usize| keep.is_none_or(|k| k[[i, j]]);
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if kept(j) && x[[i, j]] > max {
                max = x[[i, j]];
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if kept(j) {
                denom += (x[[i, j]] - max).exp();
            }
        }
        for j in 0..n {
            out[[i, j]] = if kept(j) {
                (x[[i, j]] - max).exp() / denom
            } else {
                0.0
            };
        }
    }
    out
}

const O_LN_EPS: f64 = 1e-5;

fn o_layer_norm(x: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> Array2<f64> {
    let (m, n) = x.dim();
    assert_eq!(gamma.dim(), (1, n));
    assert_eq!(beta.dim(), (1, n));
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        let mut mean = 0.0;
        for j in 0..n {
            mean += x[[i, j]];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for j in 0..n {
            let d = x[[i, j]] - mean;
            var += d * d;
        }
        var /= n as f64;
        let sigma = (var + O_LN_EPS).sqrt();
        for j in 0..n {
            out[[i, j]] = gamma[[0, j]] * (x[[i, j]] - mean) / sigma + beta[[0, j]];
        }
    }
    out
}

fn o_gelu_scalar(v: f64) -> f64 {
    const K: f64 = 0.7978845608028654;
    const C: f64 = 0.044715;
    0.5 * v * (1.0 + (K * (v + C * v * v * v)).tanh())
}

fn o_gelu(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for v in out.iter_mut() {
        *v = o_gelu_scalar(*v);
    }
    out
}

fn o_ln(store: &ParamStore<f64>, prefix: &str, x: &Array2<f64>) -> Array2<f64> {
    o_layer_norm(
        x,
        store.get(&format!("{prefix}.gamma")),
        store.get(&format!("{prefix}.beta")),
    )
}

/// Multi-head attention re-derived from the weight tensors: per-head column
/// slices, dot-product scores (optionally 1/sqrt(d_h)), masked row softmax,
/// value mixing, concatenation, output projection.
fn o_mha(
    store: &ParamStore<f64>,
    prefix: &str,
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    heads: usize,
    mask: Option<&Array2<bool>>,
    scaled: bool,
) -> Array2<f64> {
    let q = o_matmul(q_in, store.get(&format!("{prefix}.wq")));
    let k = o_matmul(kv_in, store.get(&format!("{prefix}.wk")));
    let v = o_matmul(kv_in, store.get(&format!("{prefix}.wv")));
    let dim = q.ncols();
    assert!(heads > 0 && dim.is_multiple_of(heads));
    let hd = dim / heads;
    let (lq, lk) = (q.nrows(), k.nrows());
    let mut cat = Array2::zeros((lq, dim));
    for h in 0..heads {
        let mut scores = Array2::zeros((lq, lk));
        for i in 0..lq {
            for j in 0..lk {
                let mut s = 0.0;
                for d in 0..hd {
                    s += q[[i, h * hd + d]] * k[[j, h * hd + d]];
                }
                if scaled {
                    s /= (hd as f64).sqrt();
                }
                scores[[i, j]] = s;
            }
        }
        let probs = o_softmax_rows(&scores, mask);
        for i in 0..lq {
            for d in 0..hd {
                let mut acc = 0.0;
                for j in 0..lk {
                    acc += probs[[i, j]] * v[[j, h * hd + d]];
                }
                cat[[i, h * hd + d]] = acc;
            }
        }
    }
    o_matmul(&cat, store.get(&format!("{prefix}.wo")))
}

fn o_ffn(store: &ParamStore<f64>, prefix: &str, x: &Array2<f64>) -> Array2<f64> {
    let h = o_add_row(
        &o_matmul(x, store.get(&format!("{prefix}.w1"))),
        store.get(&format!("{prefix}.b1")),
    );
    let h = o_gelu(&h);
    o_add_row(
        &o_matmul(&h, store.get(&format!("{prefix}.w2"))),
        store.get(&format!("{prefix}.b2")),
    )
}

fn o_mean_rows(x: &Array2<f64>) -> Array2<f64> {
    let (m, n) = x.dim();
    let mut out = Array2::zeros((1, n));
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..m {
            acc += x[[i, j]];
        }
        out[[0, j]] = acc / m as f64;
    }
    out
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "comparing different shapes");
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        worst = worst.max((x - y).abs());
    }
    worst
}

/// Instruction-conditioned readout: unscaled query/visual scores, row
/// softmax, convex mix of visual rows, mean over queries.
fn oracle_context_token(queries: &Array2<f64>, visual: &Array2<f64>) -> Array2<f64> {
    let (m, c) = queries.dim();
    let n = visual.nrows();
    assert_eq!(visual.ncols(), c);
    let mut scores = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for d in 0..c {
                s += queries[[i, d]] * visual[[j, d]];
            }
            scores[[i, j]] = s;
        }
    }
    let probs = o_softmax_rows(&scores, None);
    let mixed = o_matmul(&probs, visual);
    o_mean_rows(&mixed)
}

/// The full face-aware enhancement pass, re-derived composition by
/// composition: pre-norm residual self-attention trunk, cross-attention
/// into the facial tokens with residual, pre-norm feed-forward with
/// residual, plus the region-masked readout averaged over regions.
fn oracle_face_enhance(
    store: &ParamStore<f64>,
    cfg: &MiningCfg,
    visual: &Array2<f64>,
    facial: Option<&Array2<f64>>,
    regions: Option<&AuRegions>,
) -> Array2<f64> {
    let normed = o_ln(store, "mine.sattn_ln", visual);
    let trunk = o_add(
        visual,
        &o_mha(store, "mine.sattn", &normed, &normed, cfg.heads, None, true),
    );
    let combined = match facial {
        None => {
            let f = o_ffn(store, "mine.ffn", &o_ln(store, "mine.ffn_ln", &trunk));
            o_add(&trunk, &f)
        }
        Some(fac) => {
            let gq = o_ln(store, "mine.gf_ln", &trunk);
            let gf = o_add(&trunk, &o_mha(store, "mine.gf", &gq, fac, cfg.heads, None, true));
            let f = o_ffn(store, "mine.ffn", &o_ln(store, "mine.ffn_ln", &gf));
            let branch = o_add(&gf, &f);
            if cfg.local_attention {
                let regions = regions.expect("local branch needs regions");
                let lq = o_ln(store, "mine.lf_ln", &trunk);
                let rows = trunk.nrows();
                let mut acc = Array2::<f64>::zeros((rows, trunk.ncols()));
                for r in 0..regions.region_count() {
                    let mask = regions.mask_matrix(r, rows);
                    let part = o_mha(store, "mine.lf", &lq, fac, cfg.heads, Some(&mask), true);
                    acc = o_add(&acc, &part);
                }
                let scale = 1.0 / regions.region_count() as f64;
                for v in acc.iter_mut() {
                    *v *= scale;
                }
                o_add(&branch, &acc)
            } else {
                branch
            }
        }
    };
    o_mean_rows(&combined)
}

fn oracle_projector_mlp(store: &ParamStore<f64>, prefix: &str, flat: &Array2<f64>) -> Array2<f64> {
    let h = o_add_row(
        &o_matmul(flat, store.get(&format!("{prefix}.w1"))),
        store.get(&format!("{prefix}.b1")),
    );
    let h = o_gelu(&h);
    o_add_row(
        &o_matmul(&h, store.get(&format!("{prefix}.w2"))),
        store.get(&format!("{prefix}.b2")),
    )
}

/// Masked mean next-token negative log-likelihood over pre-aligned logits:
/// row i scores token i; log-sum-exp is max-shifted by hand.
fn oracle_masked_nll(logits: &Array2<f64>, ids: &[usize], mask: &[bool]) -> f64 {
    assert_eq!(logits.nrows(), ids.len());
    assert_eq!(ids.len(), mask.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..ids.len() {
        if !mask[i] {
            continue;
        }
        assert!(i > 0, "position 0 has no preceding context to score it");
        let mut max = f64::NEG_INFINITY;
        for v in 0..logits.ncols() {
            max = max.max(logits[[i, v]]);
        }
        let mut sum = 0.0;
        for v in 0..logits.ncols() {
            sum += (logits[[i, v]] - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - logits[[i, ids[i]]];
        count += 1;
    }
    total / count as f64
}

// ---------------------------------------------------------------------------
// Shared fixture-run helper (criteria 5 and 6)
// ---------------------------------------------------------------------------

/// Builds a model for `cfg`, trains it on the instruction set, then runs the
/// closed-set evaluation over the same corpus. Descriptions are never
/// injected, so every answer must come from the pixels.
fn train_and_eval(
    cfg: Config,
    dataset: &Dataset,
    data_root: &Path,
    instructions: &[InstructionSample],
    work: &Path,
) -> MetricsReport {
    let vocab = standard_vocabulary(dataset, instructions);
    let tokenizer = Tokenizer::build(vocab.iter().map(String::as_str));
    let mut model = facelm::Model::new(cfg, tokenizer).expect("model construction");
    train(&mut model, data_root, instructions, &work.join("ckpt")).expect("training run");
    let responder = ModelResponder { model: &model };
    let eval_cfg = EvalCfg {
        mode: EvalMode::InDomain,
        with_description: false,
        question: None,
    };
    let outcome = run_eval(&responder, dataset, &eval_cfg, &work.join("eval")).expect("evaluation");
    assert_eq!(outcome.report.failed_samples, 0, "no sample may fail to decode");
    outcome.report.metrics
}

fn category_instructions(dataset: &Dataset, seed: u64) -> Vec<InstructionSample> {
    let gen_cfg = GenCfg {
        seed,
        ..GenCfg::default()
    };
    let (instructions, skipped) =
        generate_for_dataset(dataset, &MockClient, &gen_cfg, &[InstructionKind::Category])
            .expect("instruction generation");
    assert_eq!(skipped, 0, "mock generation must not skip samples");
    instructions
}

// ---------------------------------------------------------------------------
// Criterion 1: equation oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_equation_oracles() {
    criterion(1, "equation oracles", Some(10.0), || {
        const TOL: f64 = 1e-6;

        // (a) Instruction-conditioned context token.
        for (seed, m, n, c) in [(3u64, 3, 4, 8), (4, 1, 2, 3), (5, 4, 4, 8)] {
            let mut rng = seeded(seed);
            let queries = randn(&mut rng, m, c, 0.8);
            let visual = randn(&mut rng, n, c, 1.1);
            let agg = ClueAggregator::new(AggregatorCfg {
                channel_dim: c,
                llm_dim: c,
                num_queries: m,
                blocks: 1,
                heads: 1,
                ffn_mult: 2,
            });
            let mut g = Graph::<f64>::new();
            let qn = g.input(queries.clone());
            let vn = g.input(visual.clone());
            let out = agg.context_token(&mut g, qn, vn);
            let want = oracle_context_token(&queries, &visual);
            let diff = max_abs_diff(g.value(out), &want);
            assert!(diff <= TOL, "context token (seed {seed}) diverges: {diff:.3e}");
        }

        // (b) Face-aware enhanced token, all three compositions.
        let regions = AuRegions {
            token_masks: vec![
                vec![true, false, true, false],
                vec![false, true, false, true],
                vec![true, true, false, false],
            ],
            fallback_regions: vec![],
        };
        for (seed, with_facial, local) in [(11u64, true, true), (12, true, false), (13, false, false)] {
            let cfg = MiningCfg {
                channel_dim: 8,
                heads: 2,
                ffn_mult: 2,
                local_attention: local,
            };
            let mining = FaceInfoMining::new(cfg.clone());
            let mut store = ParamStore::<f64>::new(seed);
            mining.init(&mut store);
            let mut rng = seeded(seed * 31 + 7);
            let visual = randn(&mut rng, 4, 8, 0.9);
            let facial = randn(&mut rng, 4, 8, 0.9);
            let mut g = Graph::<f64>::new();
            let vn = g.input(visual.clone());
            let fn_ = if with_facial { Some(g.input(facial.clone())) } else { None };
            let out = mining.forward(&mut g, &store, vn, fn_, if local { Some(&regions) } else { None });
            let want = oracle_face_enhance(
                &store,
                &cfg,
                &visual,
                if with_facial { Some(&facial) } else { None },
                if local { Some(&regions) } else { None },
            );
            let diff = max_abs_diff(g.value(out), &want);
            assert!(
                diff <= TOL,
                "enhanced token (seed {seed}, facial {with_facial}, local {local}) diverges: {diff:.3e}"
            );
        }

        // (c) Frame-token projection family, including the row flattening.
        for (seed, enhanced_rows) in [(21u64, 1usize), (22, 2)] {
            let pcfg = ProjectorCfg {
                channel_dim: 8,
                llm_dim: 8,
                landmark_count: 4,
                enhanced_rows,
            };
            let projectors = Projectors::new(pcfg);
            let mut store = ParamStore::<f64>::new(seed);
            projectors.init(&mut store);
            let mut rng = seeded(seed * 17 + 3);
            let ctx = randn(&mut rng, 1, 8, 1.0);
            let enhanced = randn(&mut rng, enhanced_rows, 8, 1.0);
            let points = randn(&mut rng, 4, 2, 0.3);
            let landmarks = LandmarkSet {
                points: points.clone(),
                visibility: vec![true; 4],
            };

            let mut g = Graph::<f64>::new();
            let ctx_n = g.input(ctx.clone());
            let enh_n = g.input(enhanced.clone());
            let ctx_tok = projectors.project_context(&mut g, &store, ctx_n);
            let enh_tok = projectors.project_enhanced(&mut g, &store, enh_n);
            let lmk_tok = projectors.project_landmarks(&mut g, &store, &landmarks);

            let want_ctx = oracle_projector_mlp(&store, "proj.ctx", &ctx);
            let mut flat = Array2::zeros((1, enhanced_rows * 8));
            for r in 0..enhanced_rows {
                for j in 0..8 {
                    flat[[0, r * 8 + j]] = enhanced[[r, j]];
                }
            }
            let want_enh = oracle_projector_mlp(&store, "proj.vis", &flat);
            let mut lmk_flat = Array2::zeros((1, 8));
            for k in 0..4 {
                lmk_flat[[0, 2 * k]] = points[[k, 0]];
                lmk_flat[[0, 2 * k + 1]] = points[[k, 1]];
            }
            let want_lmk = oracle_projector_mlp(&store, "proj.lmk", &lmk_flat);

            for (label, node, want) in [
                ("context", ctx_tok, &want_ctx),
                ("enhanced", enh_tok, &want_enh),
                ("landmark", lmk_tok, &want_lmk),
            ] {
                let diff = max_abs_diff(g.value(node), want);
                assert!(diff <= TOL, "{label} projection (seed {seed}) diverges: {diff:.3e}");
            }
        }

        // (d) Answer-token loss: the value-level reduction against hand
        // arithmetic, then the graph loss against both on a real decoder.
        let mut rng = seeded(29);
        let logits = randn(&mut rng, 4, 8, 1.5);
        let ids = [3usize, 1, 6, 2];
        let mask = [false, true, false, true];
        let got = autoregressive_loss(&logits, &ids, &mask).expect("valid loss inputs");
        let want = oracle_masked_nll(&logits, &ids, &mask);
        assert!(
            (got - want).abs() <= TOL,
            "value-level loss diverges: got {got}, want {want}"
        );

        let lcfg = LlmCfg {
            dim: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_seq_len: 8,
        };
        let decoder = TinyDecoder::new(lcfg, 8);
        let mut store = ParamStore::<f64>::new(31);
        decoder.init(&mut store);
        let ids = [1usize, 4, 2, 5];
        let mask = [false, true, true, true];

        let mut g1 = Graph::<f64>::new();
        let seq1 = decoder.embed_tokens(&mut g1, &store, &ids);
        let aligned = decoder.aligned_logits(&mut g1, &store, seq1);
        let aligned_values = g1.value(aligned).clone();

        let mut g2 = Graph::<f64>::new();
        let seq2 = decoder.embed_tokens(&mut g2, &store, &ids);
        let loss_node = decoder.loss(&mut g2, &store, seq2, &ids, &mask);
        let graph_loss = g2.value(loss_node)[[0, 0]];

        let value_loss = autoregressive_loss(&aligned_values, &ids, &mask).expect("aligned loss");
        let hand_loss = oracle_masked_nll(&aligned_values, &ids, &mask);
        assert!(
            (graph_loss - hand_loss).abs() <= TOL,
            "graph loss {graph_loss} != hand loss {hand_loss}"
        );
        assert!(
            (value_loss - hand_loss).abs() <= TOL,
            "value loss {value_loss} != hand loss {hand_loss}"
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient checks
// ---------------------------------------------------------------------------

/// Moves every trainable tensor to a fresh point of uniform O(0.35) scale.
/// Gradient correctness is pointwise, so the check may pick its point — and
/// the fixed 1e-3 step must stay a small relative perturbation of every
/// tensor. (The 0.02-scale query initialization, for one, sits under a layer
/// norm whose 1/sigma curvature inflates the finite-difference truncation
/// term when the step is 5% of the parameter's own magnitude. An actually
/// wrong analytic gradient still fails regardless of the point: its error
/// does not shrink with the step size.)
fn rescale_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.trainable_names().map(str::to_string).collect();
    for name in &names {
        let (rows, cols) = store.get(name).dim();
        let fresh = randn(rng, rows, cols, 0.35);
        *store.get_mut(name) = fresh;
    }
}

/// Central finite differences (step 1e-3) against the analytic gradients for
/// every trainable tensor reachable from the loss; three entries per tensor.
fn finite_difference_sweep<F>(
    store: &mut ParamStore<f64>,
    grads: &BTreeMap<String, Array2<f64>>,
    loss_fn: F,
    rng: &mut ChaCha8Rng,
    checked: &mut usize,
    worst_rel: &mut f64,
) where
    F: Fn(&ParamStore<f64>) -> f64,
{
    const H: f64 = 1e-3;
    let names: Vec<String> = store.trainable_names().map(str::to_string).collect();
    for name in &names {
        let (rows, cols) = store.get(name).dim();
        let mut picks = vec![(0usize, 0usize)];
        for _ in 0..2 {
            picks.push((rng.random_range(0..rows), rng.random_range(0..cols)));
        }
        picks.sort_unstable();
        picks.dedup();
        for (i, j) in picks {
            let original = store.get(name)[[i, j]];
            store.get_mut(name)[[i, j]] = original + H;
            let up = loss_fn(store);
            store.get_mut(name)[[i, j]] = original - H;
            let down = loss_fn(store);
            store.get_mut(name)[[i, j]] = original;
            let fd = (up - down) / (2.0 * H);
            let analytic = grads.get(name).map_or(0.0, |m| m[[i, j]]);
            let err = (analytic - fd).abs();
            let denom = analytic.abs().max(fd.abs());
            *checked += 1;
            // Tiny gradients bottom out at the finite-difference noise
            // floor (truncation plus roundoff, ~1e-8 here), where a relative
            // test is meaningless; 1e-7 of absolute agreement still catches
            // any real formula error, which lands orders of magnitude
            // higher even on small entries.
            if err <= 1e-7 {
                continue;
            }
            let rel = err / denom;
            *worst_rel = worst_rel.max(rel);
            assert!(
                rel <= 1e-4,
                "gradient mismatch at {name}[{i},{j}]: analytic {analytic:.6e}, fd {fd:.6e}, rel {rel:.3e}"
            );
        }
    }
}

#[test]
fn criterion_2_gradient_checks() {
    criterion(2, "gradient checks", Some(60.0), || {
        let mut checked = 0usize;
        let mut worst = 0.0f64;

        // Clue-aggregator forward (through the instruction projection so
        // every trainable tensor participates). Input scales are moderate:
        // the check compares against central differences at the fixed step
        // 1e-3, whose truncation term grows with the cube of activation
        // magnitude, and an exact analytic gradient must stay visible
        // above it. (A wrong gradient shows up as a step-size-independent
        // error far beyond the tolerance.)
        for seed in 0..20u64 {
            let agg = ClueAggregator::new(AggregatorCfg {
                channel_dim: 8,
                llm_dim: 8,
                num_queries: 3,
                blocks: 1,
                heads: 2,
                ffn_mult: 2,
            });
            let mut store = ParamStore::<f64>::new(seed * 7 + 1);
            agg.init(&mut store);
            let mut rng = seeded(seed);
            rescale_params(&mut store, &mut rng);
            let raw_instr = randn(&mut rng, 2, 8, 0.4);
            let visual = randn(&mut rng, 4, 8, 0.4);
            let facial = randn(&mut rng, 3, 8, 0.4);
            let probe = randn(&mut rng, 8, 1, 0.5);

            let build = |s: &ParamStore<f64>| {
                let mut g = Graph::<f64>::new();
                let raw = g.input(raw_instr.clone());
                let instr = blocks::linear(&mut g, s, raw, "agg.instr_proj");
                let vn = g.input(visual.clone());
                let fn_ = g.input(facial.clone());
                let out = agg.forward(&mut g, s, instr, vn, Some(fn_));
                let w = g.constant(probe.clone());
                let loss = g.matmul(out, w);
                (g, loss)
            };
            let (g, loss) = build(&store);
            let grads = g.backward(loss).into_param_grads(&g);
            let loss_fn = |s: &ParamStore<f64>| {
                let (g, loss) = build(s);
                g.value(loss)[[0, 0]]
            };
            finite_difference_sweep(&mut store, &grads, loss_fn, &mut rng, &mut checked, &mut worst);
        }

        // Face-info-mining forward with both branches and region masks live.
        let regions = AuRegions {
            token_masks: vec![
                vec![true, true, false, false],
                vec![false, false, true, true],
                vec![true, false, true, false],
            ],
            fallback_regions: vec![],
        };
        for seed in 100..120u64 {
            let cfg = MiningCfg {
                channel_dim: 8,
                heads: 2,
                ffn_mult: 2,
                local_attention: true,
            };
            let mining = FaceInfoMining::new(cfg);
            let mut store = ParamStore::<f64>::new(seed * 3 + 5);
            mining.init(&mut store);
            let mut rng = seeded(seed);
            rescale_params(&mut store, &mut rng);
            let visual = randn(&mut rng, 4, 8, 0.4);
            let facial = randn(&mut rng, 4, 8, 0.4);
            let probe = randn(&mut rng, 8, 1, 0.5);

            let build = |s: &ParamStore<f64>| {
                let mut g = Graph::<f64>::new();
                let vn = g.input(visual.clone());
                let fn_ = g.input(facial.clone());
                let out = mining.forward(&mut g, s, vn, Some(fn_), Some(&regions));
                let w = g.constant(probe.clone());
                let loss = g.matmul(out, w);
                (g, loss)
            };
            let (g, loss) = build(&store);
            let grads = g.backward(loss).into_param_grads(&g);
            let loss_fn = |s: &ParamStore<f64>| {
                let (g, loss) = build(s);
                g.value(loss)[[0, 0]]
            };
            finite_difference_sweep(&mut store, &grads, loss_fn, &mut rng, &mut checked, &mut worst);
        }

        println!("  criterion 2 detail: {checked} gradient entries checked, worst relative error {worst:.3e}");
        assert!(checked > 1000, "sweep unexpectedly small: {checked} entries");
    });
}

// ---------------------------------------------------------------------------
// Criterion 3: structural invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_structural_invariants() {
    criterion(3, "structural invariants", Some(60.0), || {
        // Softmax row-stochasticity, masked and unmasked.
        for seed in 0..10u64 {
            let mut rng = seeded(seed + 40);
            let logits = randn(&mut rng, 5, 7, 3.0);
            let plain = softmax_rows_masked(&logits, None);
            for i in 0..5 {
                let mut sum = 0.0;
                for j in 0..7 {
                    assert!(plain[[i, j]] >= 0.0);
                    sum += plain[[i, j]];
                }
                assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
            }
            let mut keep = Array2::from_shape_fn((5, 7), |_| rng.random_bool(0.5));
            for i in 0..5 {
                let forced = rng.random_range(0..7);
                keep[[i, forced]] = true;
            }
            let masked = softmax_rows_masked(&logits, Some(&keep));
            for i in 0..5 {
                let mut sum = 0.0;
                for j in 0..7 {
                    if keep[[i, j]] {
                        sum += masked[[i, j]];
                    } else {
                        assert_eq!(masked[[i, j]], 0.0, "masked key holds mass at [{i},{j}]");
                    }
                }
                assert!((sum - 1.0).abs() <= 1e-12, "masked row {i} sums to {sum}");
            }
        }

        // Convex-hull property of the context token: per channel the output
        // stays inside the range spanned by the visual rows, and the oracle
        // weights are a convex combination.
        for seed in 0..20u64 {
            let mut rng = seeded(seed + 60);
            let m = rng.random_range(1..=4);
            let n = rng.random_range(1..=4);
            let c = 8;
            let queries = randn(&mut rng, m, c, 1.0);
            let visual = randn(&mut rng, n, c, 1.2);
            let agg = ClueAggregator::new(AggregatorCfg {
                channel_dim: c,
                llm_dim: c,
                num_queries: m,
                blocks: 1,
                heads: 1,
                ffn_mult: 2,
            });
            let mut g = Graph::<f64>::new();
            let qn = g.input(queries.clone());
            let vn = g.input(visual.clone());
            let out = agg.context_token(&mut g, qn, vn);
            let token = g.value(out);
            for ch in 0..c {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in 0..n {
                    lo = lo.min(visual[[r, ch]]);
                    hi = hi.max(visual[[r, ch]]);
                }
                let v = token[[0, ch]];
                assert!(
                    v >= lo - 1e-9 && v <= hi + 1e-9,
                    "channel {ch} leaves the hull: {v} not in [{lo}, {hi}]"
                );
            }
        }

        // Mask soundness, behaviorally: garbage in a key/value row that no
        // region may attend to cannot change the local readout at all.
        {
            let cfg = MiningCfg {
                channel_dim: 8,
                heads: 2,
                ffn_mult: 2,
                local_attention: true,
            };
            let mining = FaceInfoMining::new(cfg);
            let mut store = ParamStore::<f64>::new(71);
            mining.init(&mut store);
            let regions = AuRegions {
                token_masks: vec![vec![true, true, false, false], vec![false, true, true, false]],
                fallback_regions: vec![],
            };
            let mut rng = seeded(72);
            let trunk = randn(&mut rng, 4, 8, 1.0);
            let facial = randn(&mut rng, 4, 8, 1.0);
            let mut poisoned = facial.clone();
            for j in 0..8 {
                poisoned[[3, j]] = 1.0e6; // token 3 is masked out of every region
            }
            let run = |fac: &Array2<f64>| {
                let mut g = Graph::<f64>::new();
                let tn = g.input(trunk.clone());
                let fn_ = g.input(fac.clone());
                let out = mining.local_face_attn(&mut g, &store, tn, fn_, &regions);
                g.value(out).clone()
            };
            let clean = run(&facial);
            let dirty = run(&poisoned);
            assert_eq!(
                max_abs_diff(&clean, &dirty),
                0.0,
                "masked facial token leaked into the local readout"
            );
        }

        // Permutation invariance of the global face attention over facial
        // tokens (order-free set attention).
        for seed in 0..5u64 {
            let cfg = MiningCfg {
                channel_dim: 8,
                heads: 2,
                ffn_mult: 2,
                local_attention: false,
            };
            let mining = FaceInfoMining::new(cfg);
            let mut store = ParamStore::<f64>::new(seed + 80);
            mining.init(&mut store);
            let mut rng = seeded(seed + 90);
            let trunk = randn(&mut rng, 3, 8, 1.0);
            let facial = randn(&mut rng, 4, 8, 1.0);
            let mut order: Vec<usize> = (0..4).collect();
            order.shuffle(&mut rng);
            let permuted = Array2::from_shape_fn((4, 8), |(i, j)| facial[[order[i], j]]);

            let run_global = |fac: &Array2<f64>| {
                let mut g = Graph::<f64>::new();
                let tn = g.input(trunk.clone());
                let fn_ = g.input(fac.clone());
                let out = mining.global_face_attn(&mut g, &store, tn, fn_);
                g.value(out).clone()
            };
            let diff = max_abs_diff(&run_global(&facial), &run_global(&permuted));
            assert!(diff <= 1e-9, "global attention is order-sensitive: {diff:.3e}");

            let run_forward = |fac: &Array2<f64>| {
                let mut g = Graph::<f64>::new();
                let tn = g.input(trunk.clone());
                let fn_ = g.input(fac.clone());
                let out = mining.forward(&mut g, &store, tn, Some(fn_), None);
                g.value(out).clone()
            };
            let diff = max_abs_diff(&run_forward(&facial), &run_forward(&permuted));
            assert!(diff <= 1e-9, "enhancement pass is order-sensitive: {diff:.3e}");
        }

        // Zero-initialized adapters must not move the decoder's function.
        {
            let lcfg = LlmCfg {
                dim: 8,
                layers: 1,
                heads: 2,
                ffn_mult: 2,
                max_seq_len: 8,
            };
            let decoder = TinyDecoder::new(lcfg.clone(), 10);
            let mut store = ParamStore::<f64>::new(101);
            decoder.init(&mut store);
            let ids = [1usize, 3, 5, 2, 4];
            let mask = [false, false, true, true, true];
            let run = |s: &ParamStore<f64>| {
                let mut g = Graph::<f64>::new();
                let seq = decoder.embed_tokens(&mut g, s, &ids);
                let aligned = decoder.aligned_logits(&mut g, s, seq);
                let aligned_values = g.value(aligned).clone();
                let mut g2 = Graph::<f64>::new();
                let seq2 = decoder.embed_tokens(&mut g2, s, &ids);
                let loss = decoder.loss(&mut g2, s, seq2, &ids, &mask);
                (aligned_values, g2.value(loss)[[0, 0]])
            };
            let (logits_before, loss_before) = run(&store);
            inject_adapters(&mut store, &lcfg, 4).expect("adapter injection");
            assert!(
                store.names().any(|n| n.starts_with("lora.")),
                "injection added no adapter tensors"
            );
            let (logits_after, loss_after) = run(&store);
            assert!(
                max_abs_diff(&logits_before, &logits_after) <= 1e-6,
                "adapter injection moved the logits"
            );
            assert!(
                (loss_before - loss_after).abs() <= 1e-6,
                "adapter injection moved the loss: {loss_before} -> {loss_after}"
            );
        }

        // Frozen-weight hash invariance across a real training run.
        {
            let tmp = TempDir::new("c3-frozen");
            let data = tmp.path().join("data");
            let dataset = seven_class_images(&data, 2, 41).expect("fixture");
            let instructions = category_instructions(&dataset, 41);
            let mut cfg = Config::default();
            cfg.model.seed = 41;
            cfg.model.channel_dim = 8;
            cfg.model.llm_dim = 12;
            cfg.model.num_queries = 2;
            cfg.model.image_size = 14;
            cfg.model.patch_size = 7;
            cfg.model.backbone_layers = 1;
            cfg.model.backbone_heads = 2;
            cfg.model.aggregator_blocks = 1;
            cfg.model.aggregator_heads = 2;
            cfg.model.mining_heads = 2;
            cfg.model.llm_layers = 1;
            cfg.model.llm_heads = 2;
            cfg.model.max_seq_len = 192;
            cfg.model.lora_rank = 2;
            cfg.model.max_new_tokens = 3;
            cfg.train.epochs = 1;
            cfg.train.batch_size = 4;
            cfg.train.lr = 1e-3;
            cfg.train.seed = 41;
            cfg.train.kinds = vec!["category".into()];
            let vocab = standard_vocabulary(&dataset, &instructions);
            let tokenizer = Tokenizer::build(vocab.iter().map(String::as_str));
            let mut model = facelm::Model::new(cfg, tokenizer).expect("model");
            let hash_before = model.frozen_hash();
            let outcome =
                train(&mut model, &data, &instructions, &tmp.path().join("ckpt")).expect("train");
            assert!(outcome.manifest.steps > 0);
            assert_eq!(
                model.frozen_hash(),
                hash_before,
                "training touched frozen weights"
            );
            assert_eq!(outcome.manifest.frozen_hash, hash_before);
        }
    });
}

// ---------------------------------------------------------------------------
// Criterion 4: metrics oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_metrics_oracle() {
    criterion(4, "metrics oracle", Some(5.0), || {
        let classes: Vec<String> = vec!["alpha".into(), "beta".into()];
        let mut instances = 0u64;
        for n in 1..=5usize {
            let total = 6usize.pow(n as u32);
            for code in 0..total {
                // Each sample takes one of six (gold, parsed) states:
                // gold in {alpha, beta} x parsed in {alpha, beta, UNPARSEABLE}.
                let mut rest = code;
                let mut records = Vec::with_capacity(n);
                let mut gold_counts = [0u64; 2];
                let mut correct = [0u64; 2];
                let mut confusion = [[0u64; 3]; 2];
                for i in 0..n {
                    let digit = rest % 6;
                    rest /= 6;
                    let gi = digit / 3;
                    let pi = digit % 3;
                    let parsed = if pi == 2 {
                        UNPARSEABLE.to_string()
                    } else {
                        classes[pi].clone()
                    };
                    let response = if pi == 2 {
                        "hard to say".to_string()
                    } else {
                        format!("My choice is: {}", classes[pi])
                    };
                    gold_counts[gi] += 1;
                    confusion[gi][pi] += 1;
                    if pi == gi {
                        correct[gi] += 1;
                    }
                    records.push(PredictionRecord {
                        id: format!("s{i}"),
                        response,
                        parsed,
                        gold: classes[gi].clone(),
                        description: None,
                        error: None,
                    });
                }

                let got = compute_metrics(&records, &classes).expect("metrics");

                // Hand-computed expectations.
                let total_f = n as f64;
                let acc = (correct[0] + correct[1]) as f64 / total_f;
                let mut recall_sum = 0.0;
                let mut present = 0u64;
                let mut war = 0.0;
                for k in 0..2 {
                    if gold_counts[k] == 0 {
                        continue;
                    }
                    let recall = correct[k] as f64 / gold_counts[k] as f64;
                    recall_sum += recall;
                    present += 1;
                    war += (gold_counts[k] as f64 / total_f) * recall;
                    let by_hand = got
                        .per_class_recall
                        .get(&classes[k])
                        .unwrap_or_else(|| panic!("recall missing for {}", classes[k]));
                    assert!((by_hand - recall).abs() <= 1e-12);
                }
                let uar = recall_sum / present as f64;
                assert!((got.acc - acc).abs() <= 1e-12, "acc {} != {acc}", got.acc);
                assert!((got.uar - uar).abs() <= 1e-12, "uar {} != {uar}", got.uar);
                assert!((war - acc).abs() <= 1e-12, "hand WAR and Acc disagree");
                assert!((got.war - war).abs() <= 1e-12, "war {} != {war}", got.war);
                assert!(
                    got.war.to_bits() == got.acc.to_bits(),
                    "WAR must equal Acc on every single-count instance"
                );
                assert_eq!(got.total, n as u64);
                assert_eq!(
                    got.per_class_recall.len(),
                    present as usize,
                    "recall reported for absent classes"
                );
                let expected_unparseable: u64 = confusion[0][2] + confusion[1][2];
                assert_eq!(got.unparseable_count, expected_unparseable);
                for k in 0..2 {
                    assert_eq!(got.confusion[k], confusion[k].to_vec(), "confusion row {k}");
                }
                instances += 1;
            }
        }
        assert_eq!(instances, 9330, "enumeration must cover all instances");
    });
}

// ---------------------------------------------------------------------------
// Criterion 5: end-to-end desk-scale learning
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_end_to_end_learning() {
    criterion(5, "end-to-end desk-scale learning", Some(600.0), || {
        let tmp = TempDir::new("c5");
        let data = tmp.path().join("data");
        let dataset = seven_class_images(&data, 20, 2024).expect("fixture");
        assert_eq!(dataset.spec.samples.len(), 140);
        let instructions = category_instructions(&dataset, 5);

        let mut cfg = Config::default();
        cfg.model.seed = 7;
        cfg.model.channel_dim = 32;
        cfg.model.llm_dim = 48;
        cfg.model.num_queries = 4;
        cfg.model.image_size = 32;
        cfg.model.patch_size = 8;
        cfg.model.backbone_layers = 1;
        cfg.model.backbone_heads = 4;
        cfg.model.aggregator_blocks = 1;
        cfg.model.aggregator_heads = 4;
        cfg.model.mining_heads = 4;
        cfg.model.llm_layers = 1;
        cfg.model.llm_heads = 4;
        cfg.model.max_seq_len = 160;
        cfg.model.lora_rank = 8;
        cfg.model.max_new_tokens = 4;
        cfg.train.lr = 2e-3;
        cfg.train.epochs = 60;
        cfg.train.batch_size = 8;
        cfg.train.seed = 7;
        cfg.train.balanced_sampler = true;
        cfg.train.kinds = vec!["category".into()];

        let metrics = train_and_eval(cfg, &dataset, &data, &instructions, tmp.path());
        println!(
            "  criterion 5 detail: UAR {:.3}, WAR {:.3}, unparseable {}",
            metrics.uar, metrics.war, metrics.unparseable_count
        );
        assert!(
            metrics.uar >= 0.40,
            "trained UAR {:.3} is below the 0.40 gate (chance is 1/7 ~ 0.143)",
            metrics.uar
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 6: ablation directionality
// ---------------------------------------------------------------------------

/// The proven desk-scale recipe from the end-to-end criterion, reused for
/// both ablation arms so the contrast rides on a model that reliably learns
/// and generates parseable answers.
fn ablation_cfg(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.model.seed = seed;
    cfg.model.channel_dim = 32;
    cfg.model.llm_dim = 48;
    cfg.model.num_queries = 4;
    cfg.model.image_size = 32;
    cfg.model.patch_size = 8;
    cfg.model.backbone_layers = 1;
    cfg.model.backbone_heads = 4;
    cfg.model.aggregator_blocks = 1;
    cfg.model.aggregator_heads = 4;
    cfg.model.mining_heads = 4;
    cfg.model.llm_layers = 1;
    cfg.model.llm_heads = 4;
    cfg.model.max_seq_len = 160;
    cfg.model.lora_rank = 8;
    cfg.model.max_new_tokens = 4;
    cfg.train.lr = 2e-3;
    cfg.train.batch_size = 8;
    cfg.train.seed = seed;
    cfg.train.kinds = vec!["category".into()];
    cfg
}

#[test]
fn criterion_6_ablation_directionality() {
    criterion(6, "ablation directionality", None, || {
        // (a) Balanced sampling on a 95/5 class skew must lift minority
        // recall; strict ordering in at least 2 of 3 seeds.
        let mut sampler_wins = 0u32;
        for seed in [901u64, 902, 903] {
            let tmp = TempDir::new("c6-sampler");
            let data = tmp.path().join("data");
            let dataset = binary_imbalanced_images(&data, 76, 4, seed).expect("fixture");
            let instructions = category_instructions(&dataset, seed);

            let minority_recall = |sampler_on: bool, work: &Path| {
                let mut cfg = ablation_cfg(seed);
                cfg.train.epochs = 40;
                cfg.train.balanced_sampler = sampler_on;
                let metrics = train_and_eval(cfg, &dataset, &data, &instructions, work);
                metrics.per_class_recall.get("sadness").copied().unwrap_or(0.0)
            };
            let with = minority_recall(true, &tmp.path().join("on"));
            let without = minority_recall(false, &tmp.path().join("off"));
            println!("  criterion 6a detail: seed {seed} minority recall {with:.3} (sampler) vs {without:.3} (none)");
            if with > without {
                sampler_wins += 1;
            }
        }
        assert!(
            sampler_wins >= 2,
            "balanced sampling helped minority recall in only {sampler_wins}/3 seeds"
        );

        // (b) When the class signal lives only inside the face crop,
        // removing the facial-embedding branch must cost UAR; strict
        // ordering in at least 2 of 3 seeds. The landmark and attribute
        // paths stay off in both arms so the branch under test is the only
        // difference.
        let mut facial_wins = 0u32;
        for seed in [1101u64, 1102, 1103] {
            let tmp = TempDir::new("c6-facial");
            let data = tmp.path().join("data");
            let dataset = face_only_signal_images(&data, 20, seed).expect("fixture");
            let instructions = category_instructions(&dataset, seed);

            let uar = |facial_on: bool, work: &Path| {
                let mut cfg = ablation_cfg(seed);
                // A coarse full-frame view keeps the tiny face below the
                // backbone's resolving power; the expert crop stays at the
                // source resolution, so the branch under test carries the
                // only clean class signal.
                cfg.model.image_size = 16;
                cfg.train.epochs = 50;
                cfg.features.facial_embedding = facial_on;
                cfg.features.landmark_token = false;
                cfg.features.agr_prompt = false;
                let metrics = train_and_eval(cfg, &dataset, &data, &instructions, work);
                metrics.uar
            };
            let with = uar(true, &tmp.path().join("on"));
            let without = uar(false, &tmp.path().join("off"));
            println!("  criterion 6b detail: seed {seed} UAR {with:.3} (facial) vs {without:.3} (ablated)");
            if with > without {
                facial_wins += 1;
            }
        }
        assert!(
            facial_wins >= 2,
            "the facial branch helped UAR in only {facial_wins}/3 seeds"
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 7: protocol fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_protocol_fidelity() {
    criterion(7, "protocol fidelity", None, || {
        assert_eq!(
            CLOSED_SET_GUIDANCE,
            include_str!("golden/closed_set_guidance.txt"),
            "closed-set guidance drifted from the golden file"
        );
        assert_eq!(
            ATTRIBUTE_PROMPT_PREFIX,
            include_str!("golden/attribute_prefix.txt"),
            "attribute prefix drifted from the golden file"
        );
        assert_eq!(
            DEFAULT_EVAL_QUESTION,
            "What facial expression does the person show?"
        );

        let classes: Vec<String> = SEVEN_CLASSES.iter().map(|c| c.to_string()).collect();
        let prompt = build_closed_set_prompt(&classes, DEFAULT_EVAL_QUESTION).expect("prompt");
        assert_eq!(prompt.guidance, CLOSED_SET_GUIDANCE);
        assert_eq!(
            prompt.render(),
            include_str!("golden/closed_set_prompt.txt"),
            "rendered closed-set prompt drifted from the golden file"
        );

        let agr = AgrAttributes {
            age: "adult".into(),
            gender: "female".into(),
            race: "group-B".into(),
        };
        assert_eq!(
            build_attribute_prompt(&agr, true),
            include_str!("golden/attribute_prompt.txt"),
            "rendered attribute prompt drifted from the golden file"
        );
        assert_eq!(build_attribute_prompt(&agr, false), "");
    });
}

// ---------------------------------------------------------------------------
// Criterion 8: data pipeline round-trip
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_data_pipeline_round_trip() {
    criterion(8, "data pipeline round-trip", Some(10.0), || {
        let tmp = TempDir::new("c8");
        let dataset = seven_class_images(&tmp.path().join("data"), 2, 77).expect("fixture");
        let gen_cfg = GenCfg {
            seed: 9,
            ..GenCfg::default()
        };

        let (first, skipped_a) =
            generate_for_dataset(&dataset, &MockClient, &gen_cfg, &[]).expect("first generation");
        let (second, skipped_b) =
            generate_for_dataset(&dataset, &MockClient, &gen_cfg, &[]).expect("second generation");
        assert_eq!(skipped_a, skipped_b);

        let path_a = tmp.path().join("a.jsonl");
        let path_b = tmp.path().join("b.jsonl");
        let manifest_a =
            validate_and_write(&first, &dataset.spec.classes, &path_a).expect("first write");
        let manifest_b =
            validate_and_write(&second, &dataset.spec.classes, &path_b).expect("second write");

        let bytes_a = std::fs::read(&path_a).expect("read a");
        let bytes_b = std::fs::read(&path_b).expect("read b");
        assert!(!bytes_a.is_empty());
        assert_eq!(bytes_a, bytes_b, "regeneration is not byte-identical");
        assert_eq!(
            serde_json::to_value(&manifest_a).unwrap(),
            serde_json::to_value(&manifest_b).unwrap(),
            "manifests differ between identical runs"
        );

        // Every line must re-parse, and the line count must match the
        // manifest's written count.
        let reread = read_instructions(&path_a).expect("re-parse");
        assert_eq!(reread.len() as u64, manifest_a.written);
        let text = String::from_utf8(bytes_a).expect("utf-8 jsonl");
        let lines = text.lines().filter(|l| !l.trim().is_empty()).count();
        assert_eq!(lines as u64, manifest_a.written);
        for (left, right) in reread.iter().zip(first.iter().filter(|s| {
            // Only samples that survived validation are on disk; a simple
            // id match keeps the comparison honest without re-deriving the
            // dedup rules here.
            reread.iter().any(|r| r.id == s.id)
        })) {
            assert_eq!(left.id, right.id);
            assert_eq!(left.turns.len(), right.turns.len());
        }

        // Histogram sums must equal the written total, on every axis.
        for (axis, histogram) in [
            ("kind", &manifest_a.by_kind),
            ("modality", &manifest_a.by_modality),
            ("class", &manifest_a.by_class),
        ] {
            let sum: u64 = histogram.values().sum();
            assert_eq!(
                sum, manifest_a.written,
                "{axis} histogram sums to {sum}, expected {}",
                manifest_a.written
            );
        }

        println!(
            "  criterion 8 detail: {} instruction lines, {} deduplicated, {} rejected",
            manifest_a.written,
            manifest_a.deduplicated,
            manifest_a.rejected.len()
        );
    });
}
