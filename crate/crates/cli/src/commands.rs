use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use latentloop::data::{
    is_square_budget, leakage_audit, load_dataset, quality_filter, save_dataset, FilterConfig, FilterVerdict,
    SupervisionMode, SyntheticConfig, SyntheticTask, TrainingExample,
};
use latentloop::experiment::{fit_latent_basis, init_model, latent_samples, synthetic_eval, synthetic_train};
use latentloop::inference::{
    accuracy, budget_sweep, check_budgets, decode_all, DecodeOptions, EmaOptions, InterventionMode,
};
use latentloop::norms::{profile_norms, LabeledSequence, TokenClass};
use latentloop::training::{grad_check, train, GradCheckConfig, TrainConfig, TrainingSequence};
use latentloop::{ModelParams, PcaBasis};

use crate::config::{ConfigError, RunConfig};

pub const COMMANDS: &[(&str, &str, &[&str])] = &[
    (
        "build-data",
        "Generate, route and filter the synthetic train/eval datasets",
        &["n_train", "n_eval", "task_seed", "hard_fraction", "n_classes", "tau", "attempts"],
    ),
    ("pca-fit", "Fit the latent PCA basis on a dataset's latent targets", &["dataset", "variance_target"]),
    (
        "train",
        "Train the model with joint language and latent losses",
        &[
            "dataset",
            "basis",
            "epochs",
            "batch_size",
            "lr",
            "lr_latent",
            "warmup_ratio",
            "weight_decay",
            "lambda_latent",
            "mix",
            "n_classes",
        ],
    ),
    ("profile-norms", "Per-layer residual norm profile of text and vision slots", &["dataset", "checkpoint"]),
    (
        "intervene",
        "Decode an eval set under a latent intervention and score it",
        &[
            "eval",
            "basis",
            "checkpoint",
            "mode",
            "budget",
            "noise_scale",
            "norm_match",
            "ema",
            "ema_decay",
            "max_tokens",
            "force_span",
        ],
    ),
    (
        "sweep",
        "Accuracy across latent budgets and seeds",
        &[
            "eval",
            "basis",
            "checkpoint",
            "budgets",
            "seeds",
            "mode",
            "noise_scale",
            "norm_match",
            "ema",
            "ema_decay",
            "max_tokens",
            "force_span",
        ],
    ),
    ("audit", "Exact-duplicate leakage audit between two datasets", &["dataset", "eval"]),
    (
        "grad-check",
        "Compare analytic gradients with central differences",
        &["dataset", "basis", "checkpoint", "grad_examples", "fd_step", "samples_per_tensor", "lambda_latent", "grad_tol"],
    ),
];

/// Either a configuration problem (status 2) or a runtime failure (status 1).
pub enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<latentloop::Error> for Failure {
    fn from(e: latentloop::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn synthetic_config(cfg: &RunConfig) -> SyntheticConfig {
    SyntheticConfig {
        n_classes: cfg.usize("n_classes"),
        hard_fraction: cfg.f64("hard_fraction"),
        tau: cfg.f64("tau"),
        attempts: cfg.u64("attempts") as u32,
        task_seed: cfg.u64("task_seed"),
        ..SyntheticConfig::default()
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load(path: &Path) -> Result<Vec<TrainingExample>> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_basis(path: &Path) -> Result<PcaBasis> {
    PcaBasis::load(path).with_context(|| format!("loading basis {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(cfg.usize("workers")).build()?)
}

/// Every token id used anywhere in the data, plus one.
fn vocab_needed(data: &[TrainingExample]) -> Result<usize> {
    let mut max = 0;
    for ex in data {
        for &t in ex.query_tokens.iter().chain(&ex.response_tokens()?) {
            max = max.max(t as usize);
        }
    }
    Ok(max + 1)
}

fn decode_options(cfg: &RunConfig, budget: usize, mode: InterventionMode) -> DecodeOptions {
    DecodeOptions {
        ema: cfg.bool("ema").then(|| EmaOptions {
            decay: cfg.f64("ema_decay"),
            reference_norms: vec![1.0],
        }),
        max_tokens: cfg.usize("max_tokens"),
        force_span: cfg.bool("force_span"),
        ..DecodeOptions::new(budget, mode)
    }
}

pub fn run(cfg: &RunConfig) -> Result<(), Failure> {
    // Inputs and static settings are checked before the run directory exists.
    match cfg.command.as_str() {
        "build-data" => {
            synthetic_config(cfg).validate().map_err(|e| ConfigError(e.to_string()))?;
        }
        "pca-fit" => {
            cfg.input("dataset")?;
            let v = cfg.f64("variance_target");
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError(format!("key 'variance_target' must be in (0, 1], got {v}")).into());
            }
        }
        "train" | "grad-check" => {
            cfg.input("dataset")?;
            cfg.input("basis")?;
            if cfg.path("checkpoint").is_some() {
                cfg.input("checkpoint")?;
            }
        }
        "profile-norms" => {
            cfg.input("dataset")?;
            cfg.input("checkpoint")?;
        }
        "intervene" => {
            let budget = cfg.usize("budget");
            if cfg.mode() != InterventionMode::ZeroLatent && !is_square_budget(budget) {
                return Err(ConfigError(latentloop::Error::BudgetNotSquare(budget).to_string()).into());
            }
            for k in ["eval", "basis", "checkpoint"] {
                cfg.input(k)?;
            }
        }
        "sweep" => {
            let budgets: Vec<usize> = cfg.list("budgets").into_iter().map(|b| b as usize).collect();
            check_budgets(&budgets).map_err(|e| ConfigError(e.to_string()))?;
            if budgets.is_empty() || cfg.list("seeds").is_empty() {
                return Err(ConfigError("keys 'budgets' and 'seeds' must be non-empty".into()).into());
            }
            for k in ["eval", "basis", "checkpoint"] {
                cfg.input(k)?;
            }
        }
        "audit" => {
            cfg.input("dataset")?;
            cfg.input("eval")?;
        }
        other => return Err(ConfigError(format!("unknown command '{other}'")).into()),
    }

    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating run directory {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.render()).context("writing config.txt")?;
    fs::write(out.join("seed.txt"), format!("{}\n", cfg.u64("seed"))).context("writing seed.txt")?;

    match cfg.command.as_str() {
        "build-data" => build_data(cfg, &out),
        "pca-fit" => pca_fit(cfg, &out),
        "train" => train_cmd(cfg, &out),
        "profile-norms" => profile(cfg, &out),
        "intervene" => intervene(cfg, &out),
        "sweep" => sweep(cfg, &out),
        "audit" => audit(cfg, &out),
        "grad-check" => gradcheck(cfg, &out),
        _ => unreachable!("validated above"),
    }
    .map_err(Failure::Runtime)
}

fn build_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sc = synthetic_config(cfg);
    let seed = cfg.u64("seed");
    let filter = FilterConfig {
        tau: sc.tau,
        ..FilterConfig::default()
    };
    let mut train_set = Vec::new();
    let mut rejected = 0;
    let mut routed = 0;
    for ex in synthetic_train(&sc, cfg.usize("n_train"), seed)? {
        match quality_filter(&ex, &filter) {
            FilterVerdict::Keep => train_set.push(ex),
            FilterVerdict::RouteTextOnly => {
                routed += 1;
                train_set.push(latentloop::data::route(ex, sc.tau));
            }
            FilterVerdict::Reject(_) => rejected += 1,
        }
    }
    let eval_set = synthetic_eval(&sc, cfg.usize("n_eval"), seed)?;
    save_dataset(out.join("train.llds"), &train_set)?;
    save_dataset(out.join("eval.llds"), &eval_set)?;
    let latent = train_set.iter().filter(|e| e.mode == SupervisionMode::Latent).count();
    write_json(
        &out.join("data_report.json"),
        &json!({
            "train": train_set.len(),
            "train_latent": latent,
            "train_text_only": train_set.len() - latent,
            "rerouted": routed,
            "rejected": rejected,
            "eval": eval_set.len(),
            "vocab_size": SyntheticTask::new(sc)?.vocab_size(),
        }),
    )?;
    println!(
        "wrote {} training ({latent} latent) and {} eval examples to {}",
        train_set.len(),
        eval_set.len(),
        out.display()
    );
    Ok(())
}

fn pca_fit(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load(&cfg.input("dataset")?)?;
    let target = cfg.f64("variance_target");
    let basis = fit_latent_basis(&data, target)?;
    let relmse = basis.rel_mse(&latent_samples(&data))?;
    basis.save(out.join("basis.llpb"))?;
    write_json(
        &out.join("pca_report.json"),
        &json!({
            "d": basis.dim(),
            "k": basis.k(),
            "variance_target": target,
            "relmse": relmse,
            "spectral_relmse": basis.spectral_rel_mse(),
        }),
    )?;
    println!("k = {} of d = {}, relmse {relmse:.6}", basis.k(), basis.dim());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load(&cfg.input("dataset")?)?;
    let basis = load_basis(&cfg.input("basis")?)?;
    let seed = cfg.u64("seed");
    let mut params = match cfg.path("checkpoint") {
        Some(p) => load_model(&p)?,
        None => {
            let vocab = SyntheticTask::new(synthetic_config(cfg))?.vocab_size().max(vocab_needed(&data)?);
            init_model(vocab, &basis, seed)?
        }
    };
    let tc = TrainConfig {
        epochs: cfg.usize("epochs"),
        batch_size: cfg.usize("batch_size"),
        lr: cfg.f64("lr"),
        lr_latent: cfg.f64("lr_latent"),
        warmup_ratio: cfg.f64("warmup_ratio"),
        weight_decay: cfg.f64("weight_decay"),
        lambda_latent: cfg.f64("lambda_latent"),
        mix: cfg.f64("mix"),
        seed,
        workers: cfg.usize("workers"),
    };
    let report = train(&mut params, &basis, &data, &tc)?;
    params.save(out.join("model.ckpt"))?;
    let mut w = create(&out.join("train_log.csv"))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    if let Some(last) = report.log.last() {
        println!(
            "{} steps; final lm {:.4} latent {:.4}",
            report.steps, last.lm_loss, last.latent_loss
        );
    }
    Ok(())
}

fn profile(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load(&cfg.input("dataset")?)?;
    let params = load_model(&cfg.input("checkpoint")?)?;
    let batch: Vec<LabeledSequence> = data
        .iter()
        .map(|ex| TrainingSequence::from_example(ex).map(|s| LabeledSequence::from_slots(s.slots)))
        .collect::<latentloop::Result<_>>()?;
    let prof = pool(cfg)?.install(|| profile_norms(&params, &batch))?;
    let mut w = create(&out.join("norms.csv"))?;
    prof.write_csv(&mut w)?;
    w.flush()?;
    let last = prof.n_layers;
    let mean = |l, c| prof.cell(l, c).map(|cell| cell.mean_log_norm);
    write_json(
        &out.join("norm_summary.json"),
        &json!({
            "layers": last,
            "text_input_log_norm": mean(0, TokenClass::Text),
            "text_final_log_norm": mean(last, TokenClass::Text),
            "vision_input_log_norm": mean(0, TokenClass::Vision),
            "vision_final_log_norm": mean(last, TokenClass::Vision),
        }),
    )?;
    println!("profiled {} sequences over {} layers", batch.len(), last);
    Ok(())
}

fn intervene(cfg: &RunConfig, out: &Path) -> Result<()> {
    let eval = load(&cfg.input("eval")?)?;
    let basis = load_basis(&cfg.input("basis")?)?;
    let params = load_model(&cfg.input("checkpoint")?)?;
    let mode = cfg.mode();
    let budget = if mode == InterventionMode::ZeroLatent { 0 } else { cfg.usize("budget") };
    let opts = decode_options(cfg, budget, mode);
    let transcripts = decode_all(&params, &basis, &eval, &opts, cfg.u64("seed"), cfg.usize("workers"))?;
    let dir = out.join("transcripts");
    fs::create_dir_all(&dir)?;
    for (i, t) in transcripts.iter().enumerate() {
        let mut w = create(&dir.join(format!("{i:05}.jsonl")))?;
        t.write_jsonl(&mut w)?;
        w.flush()?;
    }
    let acc = accuracy(&transcripts, &eval);
    write_json(
        &out.join("intervention.json"),
        &json!({
            "mode": mode,
            "budget": budget,
            "accuracy": acc,
            "n_examples": eval.len(),
        }),
    )?;
    println!("{} accuracy {acc:.4} on {} examples", mode.label(), eval.len());
    Ok(())
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let eval = load(&cfg.input("eval")?)?;
    let basis = load_basis(&cfg.input("basis")?)?;
    let params = load_model(&cfg.input("checkpoint")?)?;
    let budgets: Vec<usize> = cfg.list("budgets").into_iter().map(|b| b as usize).collect();
    let template = decode_options(cfg, 0, cfg.mode());
    let table = budget_sweep(&params, &basis, &eval, &budgets, &cfg.list("seeds"), &template, cfg.usize("workers"))?;
    let mut w = create(&out.join("sweep.csv"))?;
    table.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("sweep_summary.csv"))?;
    table.write_summary_csv(&mut w)?;
    w.flush()?;
    for s in table.summary() {
        println!("budget {:>3}: {:.4} ± {:.4} ({} seeds)", s.budget, s.mean, s.std, s.n_seeds);
    }
    Ok(())
}

fn audit(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train_set = load(&cfg.input("dataset")?)?;
    let eval = load(&cfg.input("eval")?)?;
    let report = leakage_audit(&train_set, &eval)?;
    write_json(
        &out.join("audit.json"),
        &json!({
            "clean": report.is_clean(),
            "leaked_eval_indices": report.leaked_eval_indices(),
            "image_collisions": report.image_collisions,
            "text_collisions": report.text_collisions,
        }),
    )?;
    println!(
        "{} image and {} text collisions; {} eval examples affected",
        report.image_collisions.len(),
        report.text_collisions.len(),
        report.leaked_eval_indices().len()
    );
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load(&cfg.input("dataset")?)?;
    let basis = load_basis(&cfg.input("basis")?)?;
    let seed = cfg.u64("seed");
    let params = match cfg.path("checkpoint") {
        Some(p) => load_model(&p)?,
        None => {
            let vocab = SyntheticTask::new(synthetic_config(cfg))?.vocab_size().max(vocab_needed(&data)?);
            init_model(vocab, &basis, seed)?
        }
    };
    let n = cfg.usize("grad_examples");
    let seqs: Vec<TrainingSequence> = data
        .iter()
        .filter(|e| e.mode == SupervisionMode::Latent)
        .take(n)
        .map(TrainingSequence::from_example)
        .collect::<latentloop::Result<_>>()?;
    if seqs.len() < n {
        bail!("dataset has only {} latent-supervised examples, need {n}", seqs.len());
    }
    let gc = GradCheckConfig {
        fd_step: cfg.f64("fd_step"),
        samples_per_tensor: cfg.usize("samples_per_tensor"),
        lambda_latent: cfg.f64("lambda_latent"),
        seed,
    };
    let report = grad_check(&params, &basis, &seqs, &gc)?;
    write_json(&out.join("gradcheck.json"), &serde_json::to_value(&report)?)?;
    let tol = cfg.f64("grad_tol");
    println!("max relative error {:.3e} over {} tensors", report.max_rel_error, report.tensors.len());
    if !(report.max_rel_error < tol) {
        bail!("max relative error {:.3e} exceeds grad_tol {tol:e}", report.max_rel_error);
    }
    Ok(())
}
