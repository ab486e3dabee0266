//! `gridflow`: synthesis, training, adaptation, evaluation, and reporting
//! for the grid state-estimation pipeline.
//!
//! Every subcommand is deterministic given its flags, config file, and
//! input files: rerunning a command overwrites its outputs byte for byte.
//! All artifacts land under `--out`, together with a `manifest.json` that
//! fingerprints the resolved configuration and every produced file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gridflow_core::adapt::AdaptMode;
use gridflow_core::grid::Regime;
use gridflow_core::loss::LossConfig;
use gridflow_core::model::{checkpoint_to_json, load_checkpoint, Model, ModelConfig, PreparedSample};
use gridflow_core::report::{
    history_csv, history_from_csv, line_chart, manifest, metrics_csv, metrics_from_csv,
    scatter_chart, Series,
};
use gridflow_core::stats::{bonferroni, stratified_indices, wilcoxon_paired, DEFAULT_TEST_SAMPLES};
use gridflow_core::synth::{generate_dataset_threaded, load_jsonl, save_jsonl, Dataset, Split, SynthConfig};
use gridflow_core::train::{
    evaluate, fewshot_subsets, pareto_front, prepare_transfer, train, AdaptOptions, EvalSummary,
    MetricsRecord, SampleEval, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "gridflow",
    version,
    about = "Synthetic power grids, attention-based state estimation, and low-rank domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize solved MV/HV datasets as JSONL.
    Generate(GenerateArgs),
    /// Train the source-domain model from scratch.
    TrainSource(TrainSourceArgs),
    /// Transfer a source checkpoint to a target dataset with one mode.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Sweep the target training budget for one adaptation mode.
    Fewshot(FewshotArgs),
    /// Pool metrics tables into a parameter/accuracy trade-off front.
    Pareto(ParetoArgs),
    /// Paired Wilcoxon test between two per-sample evaluation dumps.
    Stats(StatsArgs),
    /// Rebuild charts and the manifest from a run directory's CSVs.
    Report(ReportArgs),
}

/// Optional experiment file; command-line flags override its values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    synth: Option<SynthConfig>,
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    loss: Option<LossConfig>,
    modes: Option<Vec<String>>,
    betas: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Worker cap from GRIDFLOW_THREADS; defaults to 1.
fn worker_threads() -> usize {
    std::env::var("GRIDFLOW_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn parse_regime(s: &str) -> Result<Regime> {
    match s.to_ascii_lowercase().as_str() {
        "mv" => Ok(Regime::Mv),
        "hv" => Ok(Regime::Hv),
        other => bail!("unknown regime '{other}', expected 'mv' or 'hv'"),
    }
}

fn parse_mode(s: &str) -> Result<AdaptMode> {
    s.parse::<AdaptMode>().map_err(Into::into)
}

fn resolve_out(flag: &Option<PathBuf>, cfg: &ExperimentConfig, default: &str) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(default))
}

fn resolve_seed(flag: Option<u64>, cfg: &ExperimentConfig) -> u64 {
    flag.or_else(|| cfg.seeds.as_ref().and_then(|s| s.first().copied()))
        .unwrap_or(0)
}

#[derive(Args, Clone, Copy, Default)]
struct ScaleArgs {
    /// Small-hardware defaults: 10 refinement steps, 30 epochs, batch 64.
    #[arg(long, conflicts_with = "paper_scale")]
    desk_scale: bool,
    /// Full-size defaults: 40 refinement steps, 100 epochs, batch 512.
    #[arg(long)]
    paper_scale: bool,
}

impl ScaleArgs {
    fn model_config(&self, cfg: &ExperimentConfig) -> ModelConfig {
        cfg.model.clone().unwrap_or_else(|| {
            if self.paper_scale {
                ModelConfig::default()
            } else {
                ModelConfig::desk()
            }
        })
    }

    fn train_config(&self, cfg: &ExperimentConfig) -> TrainConfig {
        let mut t = cfg.train.clone().unwrap_or_else(|| {
            if self.paper_scale {
                TrainConfig::paper_scale()
            } else {
                TrainConfig::default()
            }
        });
        if let Some(loss) = cfg.loss {
            t.loss = loss;
        }
        t
    }
}

/// Collects written artifacts so the closing manifest covers them all.
struct OutDir {
    root: PathBuf,
    artifacts: Vec<(String, Vec<u8>)>,
}

impl OutDir {
    fn create(root: PathBuf) -> Result<OutDir> {
        std::fs::create_dir_all(&root)
            .with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(OutDir { root, artifacts: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        std::fs::write(self.root.join(name), &bytes)
            .with_context(|| format!("writing {}", self.root.join(name).display()))?;
        self.artifacts.push((name.to_string(), bytes));
        Ok(())
    }

    fn finish(self, resolved_config: &serde_json::Value) -> Result<()> {
        let config_json = serde_json::to_string(resolved_config)?;
        let m = manifest(&config_json, &self.artifacts);
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        std::fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }
}

fn prepare_split(ds: &Dataset, split: Split) -> Result<Vec<PreparedSample>> {
    let prepared: gridflow_core::Result<Vec<PreparedSample>> =
        ds.split_samples(split).into_iter().map(PreparedSample::new).collect();
    Ok(prepared?)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split '{other}', expected train, val, or test"),
    }
}

fn summary_record(
    mode: &str,
    seed: u64,
    beta: f64,
    summary: &EvalSummary,
    trainable: usize,
    full_ft_params: usize,
) -> MetricsRecord {
    MetricsRecord {
        mode: mode.to_string(),
        seed,
        beta,
        rmse_all: summary.rmse_all,
        rmse_v: summary.rmse_v,
        rmse_theta_deg: summary.rmse_theta_deg,
        l_pf: summary.l_pf,
        trainable_params: trainable,
        p_reduced: trainable as f64 / full_ft_params as f64,
        // Needs a full fine-tuning partner run; the pareto/stats commands
        // work from the table, so a standalone row records NaN here.
        r_ret: f64::NAN,
    }
}

fn per_sample_json(summary: &EvalSummary) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(&summary.per_sample)?;
    text.push('\n');
    Ok(text.into_bytes())
}

// ---------------------------------------------------------------- generate

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// 'mv' or 'hv'; omitted generates both.
    #[arg(long)]
    regime: Option<String>,
    /// Samples to keep per dataset (rejects 0).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let out_path = resolve_out(&args.out, &cfg, "runs/data");
    let mut out = OutDir::create(out_path)?;
    let regimes = match &args.regime {
        Some(r) => vec![parse_regime(r)?],
        None => vec![Regime::Mv, Regime::Hv],
    };
    let threads = worker_threads();
    let mut resolved = Vec::new();
    for regime in regimes {
        let mut synth = match &cfg.synth {
            Some(s) => SynthConfig { regime, ..s.clone() },
            None => SynthConfig::new(regime),
        };
        if let Some(n) = args.n {
            synth.n_samples = n as usize;
        }
        if let Some(seed) = args.seed {
            synth.seed = seed;
        }
        let ds = generate_dataset_threaded(&synth, threads)?;
        let name = format!("{}.jsonl", regime.to_string().to_ascii_lowercase());
        let tmp = out.root.join(&name);
        save_jsonl(&ds, &tmp)?;
        out.artifacts.push((name.clone(), std::fs::read(&tmp)?));
        let rate = 100.0 * ds.samples.len() as f64 / ds.attempts as f64;
        println!(
            "{regime}: {} samples in {} attempts ({rate:.1}% converged), splits {}/{}/{} -> {}",
            ds.samples.len(),
            ds.attempts,
            ds.splits.train.len(),
            ds.splits.val.len(),
            ds.splits.test.len(),
            tmp.display()
        );
        resolved.push(synth);
    }
    out.finish(&serde_json::json!({ "command": "generate", "synth": resolved }))
}

// ------------------------------------------------------------ train-source

#[derive(Args)]
struct TrainSourceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source-domain dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Master seed: model initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    scale: ScaleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_train_source(args: TrainSourceArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let seed = resolve_seed(args.seed, &cfg);
    let model_cfg = args.scale.model_config(&cfg);
    let mut train_cfg = args.scale.train_config(&cfg);
    train_cfg.seed = seed;
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    let ds = load_jsonl(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let train_set = prepare_split(&ds, Split::Train)?;
    let val_set = prepare_split(&ds, Split::Val)?;
    let test_set = prepare_split(&ds, Split::Test)?;

    let mut model = Model::init(&model_cfg, seed);
    let history = train(&mut model, &train_set, &val_set, &train_cfg)?;
    let summary = evaluate(&model, &test_set, train_cfg.loss.gamma)?;
    let trainable = model.count_params(true);
    let record = summary_record("source", seed, 1.0, &summary, trainable, trainable);

    let mut out = OutDir::create(resolve_out(&args.out, &cfg, "runs/source"))?;
    out.write("model.json", checkpoint_to_json(&model)?.into_bytes())?;
    out.write("history.csv", history_csv(&history.epochs).into_bytes())?;
    out.write("metrics.csv", metrics_csv(&[record]).into_bytes())?;
    out.write("per_sample.json", per_sample_json(&summary)?)?;
    out.write("loss_curves.svg", history_chart(&history.epochs).into_bytes())?;
    println!(
        "trained {} epochs, best epoch {} (val rmse {:.6}); test rmse_all {:.6}, l_pf {:.6}",
        history.epochs.len(),
        history.best_epoch,
        history.best_val_rmse,
        summary.rmse_all,
        summary.l_pf
    );
    out.finish(&serde_json::json!({
        "command": "train-source",
        "data": args.data,
        "seed": seed,
        "model": model_cfg,
        "train": train_cfg,
    }))
}

fn history_chart(epochs: &[gridflow_core::train::EpochLog]) -> String {
    let series = [
        Series {
            label: "train data loss",
            points: epochs.iter().map(|e| (e.epoch as f64, e.loss_data)).collect(),
        },
        Series {
            label: "train physics loss",
            points: epochs.iter().map(|e| (e.epoch as f64, e.loss_pf)).collect(),
        },
        Series {
            label: "val rmse",
            points: epochs.iter().map(|e| (e.epoch as f64, e.val_rmse)).collect(),
        },
    ];
    line_chart("training curves", "epoch", "loss / rmse", &series, true)
}

// ------------------------------------------------------------------- adapt

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source checkpoint (model.json).
    #[arg(long)]
    source: PathBuf,
    /// Target-domain dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// zero_shot, full_ft, head_only, lora_only, or lora_phead.
    #[arg(long)]
    mode: Option<String>,
    /// Adapter rank.
    #[arg(long, default_value_t = gridflow_core::adapt::DEFAULT_RANK)]
    rank: usize,
    /// Adapter scaling numerator.
    #[arg(long, default_value_t = gridflow_core::adapt::DEFAULT_ALPHA)]
    alpha: f64,
    /// Fraction of the target training split to use, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    scale: ScaleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct AdaptOutcome {
    model: Model,
    history: gridflow_core::train::TrainHistory,
    summary: EvalSummary,
    record: MetricsRecord,
}

fn adapt_once(
    source: &Model,
    mode: AdaptMode,
    opts: &AdaptOptions,
    beta: f64,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    test_set: &[PreparedSample],
    train_cfg: &TrainConfig,
) -> Result<AdaptOutcome> {
    if !(beta > 0.0 && beta <= 1.0) {
        bail!("beta must be in (0, 1], got {beta}");
    }
    let mut model = prepare_transfer(source, opts)?;
    let subset_idx = &fewshot_subsets(train_set.len(), &[beta], train_cfg.seed)[0].1;
    let subset: Vec<PreparedSample> =
        subset_idx.iter().map(|&i| train_set[i].clone()).collect();
    let history = train(&mut model, &subset, val_set, train_cfg)?;
    let summary = evaluate(&model, test_set, train_cfg.loss.gamma)?;
    let record = summary_record(
        mode.as_str(),
        train_cfg.seed,
        beta,
        &summary,
        model.count_params(true),
        model.count_params(false),
    );
    Ok(AdaptOutcome { model, history, summary, record })
}

fn run_adapt(args: AdaptArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let mode_str = args
        .mode
        .clone()
        .or_else(|| cfg.modes.as_ref().and_then(|m| m.first().cloned()))
        .context("no --mode given and the config lists none")?;
    let mode = parse_mode(&mode_str)?;
    let seed = resolve_seed(args.seed, &cfg);
    let mut train_cfg = args.scale.train_config(&cfg);
    train_cfg.seed = seed;
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    let source = load_checkpoint(&args.source)
        .with_context(|| format!("loading checkpoint {}", args.source.display()))?;
    let ds = load_jsonl(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let train_set = prepare_split(&ds, Split::Train)?;
    let val_set = prepare_split(&ds, Split::Val)?;
    let test_set = prepare_split(&ds, Split::Test)?;

    let opts = AdaptOptions { mode, rank: args.rank, alpha: args.alpha, seed };
    let outcome = adapt_once(
        &source, mode, &opts, args.beta, &train_set, &val_set, &test_set, &train_cfg,
    )?;

    let mut out = OutDir::create(resolve_out(&args.out, &cfg, "runs/adapt"))?;
    out.write("model.json", checkpoint_to_json(&outcome.model)?.into_bytes())?;
    out.write("history.csv", history_csv(&outcome.history.epochs).into_bytes())?;
    out.write("metrics.csv", metrics_csv(&[outcome.record.clone()]).into_bytes())?;
    out.write("per_sample.json", per_sample_json(&outcome.summary)?)?;
    if !outcome.history.epochs.is_empty() {
        out.write("loss_curves.svg", history_chart(&outcome.history.epochs).into_bytes())?;
    }
    println!(
        "{mode}: {} trainable params, test rmse_all {:.6}, l_pf {:.6}",
        outcome.record.trainable_params, outcome.record.rmse_all, outcome.record.l_pf
    );
    out.finish(&serde_json::json!({
        "command": "adapt",
        "source": args.source,
        "data": args.data,
        "mode": mode.as_str(),
        "rank": args.rank,
        "alpha": args.alpha,
        "beta": args.beta,
        "seed": seed,
        "train": train_cfg,
    }))
}

// -------------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate (model.json).
    #[arg(long)]
    model: PathBuf,
    /// Dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Mode label recorded in the metrics row.
    #[arg(long, default_value = "eval")]
    label: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let seed = resolve_seed(args.seed, &cfg);
    let gamma = cfg.loss.unwrap_or_default().gamma;
    let split = parse_split(&args.split)?;
    let model = load_checkpoint(&args.model)
        .with_context(|| format!("loading checkpoint {}", args.model.display()))?;
    let ds = load_jsonl(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let set = prepare_split(&ds, split)?;
    let summary = evaluate(&model, &set, gamma)?;
    let record = summary_record(
        &args.label,
        seed,
        1.0,
        &summary,
        model.count_params(true),
        model.count_params(false),
    );
    println!(
        "{} on {} ({} samples): rmse_all {:.6}, rmse_v {:.6}, rmse_theta_deg {:.6}, l_pf {:.6}",
        args.label,
        args.split,
        set.len(),
        summary.rmse_all,
        summary.rmse_v,
        summary.rmse_theta_deg,
        summary.l_pf
    );
    let mut out = OutDir::create(resolve_out(&args.out, &cfg, "runs/eval"))?;
    out.write("metrics.csv", metrics_csv(&[record]).into_bytes())?;
    out.write("per_sample.json", per_sample_json(&summary)?)?;
    out.finish(&serde_json::json!({
        "command": "eval",
        "model": args.model,
        "data": args.data,
        "split": args.split,
        "label": args.label,
        "seed": seed,
    }))
}

// ----------------------------------------------------------------- fewshot

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value_t = gridflow_core::adapt::DEFAULT_RANK)]
    rank: usize,
    #[arg(long, default_value_t = gridflow_core::adapt::DEFAULT_ALPHA)]
    alpha: f64,
    /// Training-budget fractions, e.g. --beta 0.02,0.1,0.5,1.0.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    scale: ScaleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_fewshot(args: FewshotArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let mode_str = args
        .mode
        .clone()
        .or_else(|| cfg.modes.as_ref().and_then(|m| m.first().cloned()))
        .context("no --mode given and the config lists none")?;
    let mode = parse_mode(&mode_str)?;
    let betas = args
        .beta
        .clone()
        .or_else(|| cfg.betas.clone())
        .unwrap_or_else(|| vec![0.02, 0.05, 0.1, 0.25, 0.5, 1.0]);
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone().unwrap_or_else(|| vec![0]),
    };
    let mut train_cfg = args.scale.train_config(&cfg);
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    let source = load_checkpoint(&args.source)
        .with_context(|| format!("loading checkpoint {}", args.source.display()))?;
    let ds = load_jsonl(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let train_set = prepare_split(&ds, Split::Train)?;
    let val_set = prepare_split(&ds, Split::Val)?;
    let test_set = prepare_split(&ds, Split::Test)?;

    let mut records = Vec::new();
    for &seed in &seeds {
        train_cfg.seed = seed;
        let opts = AdaptOptions { mode, rank: args.rank, alpha: args.alpha, seed };
        for &beta in &betas {
            let outcome = adapt_once(
                &source, mode, &opts, beta, &train_set, &val_set, &test_set, &train_cfg,
            )?;
            println!(
                "seed {seed} beta {beta}: rmse_all {:.6} ({} train samples)",
                outcome.record.rmse_all,
                (beta * train_set.len() as f64).ceil() as usize
            );
            records.push(outcome.record);
        }
    }
    let labels: Vec<String> = seeds.iter().map(|s| format!("seed {s}")).collect();
    let series: Vec<Series<'_>> = seeds
        .iter()
        .zip(&labels)
        .map(|(seed, label)| {
            let mut pts: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.seed == *seed)
                .map(|r| (r.beta, r.rmse_all))
                .collect();
            pts.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
            Series { label, points: pts }
        })
        .collect();
    let chart = line_chart(
        &format!("few-shot budget sweep ({mode})"),
        "training fraction",
        "test rmse",
        &series,
        false,
    );
    let mut out = OutDir::create(resolve_out(&args.out, &cfg, "runs/fewshot"))?;
    out.write("fewshot.csv", metrics_csv(&records).into_bytes())?;
    out.write("fewshot.svg", chart.into_bytes())?;
    out.finish(&serde_json::json!({
        "command": "fewshot",
        "source": args.source,
        "data": args.data,
        "mode": mode.as_str(),
        "rank": args.rank,
        "alpha": args.alpha,
        "betas": betas,
        "seeds": seeds,
        "train": train_cfg,
    }))
}

// ------------------------------------------------------------------ pareto

#[derive(Args)]
struct ParetoArgs {
    /// Metrics CSVs to pool (repeat or comma-separate).
    #[arg(long, required = true, value_delimiter = ',')]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_pareto(args: ParetoArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    for path in &args.metrics {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        records.extend(metrics_from_csv(&text)?);
    }
    if records.is_empty() {
        bail!("no metric rows found");
    }
    let points: Vec<(f64, f64)> =
        records.iter().map(|r| (r.p_reduced, r.rmse_all)).collect();
    let front = pareto_front(&points);
    let mut csv = String::from("mode,seed,beta,p_reduced,rmse_all,on_front\n");
    for (i, r) in records.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode,
            r.seed,
            r.beta,
            r.p_reduced,
            r.rmse_all,
            front.contains(&i)
        ));
    }
    let labeled: Vec<(f64, f64, String)> = records
        .iter()
        .map(|r| (r.p_reduced, r.rmse_all, r.mode.clone()))
        .collect();
    // Draw the front line in trade-off order.
    let mut front_sorted = front.clone();
    front_sorted.sort_by(|&a, &b| points[a].0.partial_cmp(&points[b].0).unwrap());
    let chart = scatter_chart(
        "trainable parameters vs accuracy",
        "trainable fraction of full fine-tuning",
        "test rmse",
        &labeled,
        &front_sorted,
    );
    for &i in &front {
        println!("front: {} (p_reduced {:.4}, rmse {:.6})", records[i].mode, points[i].0, points[i].1);
    }
    let mut out = OutDir::create(resolve_out(&args.out, &cfg, "runs/pareto"))?;
    out.write("pareto.csv", csv.into_bytes())?;
    out.write("pareto.svg", chart.into_bytes())?;
    out.finish(&serde_json::json!({
        "command": "pareto",
        "metrics": args.metrics,
    }))
}

// ------------------------------------------------------------------- stats

#[derive(Args)]
struct StatsArgs {
    /// First per-sample dump (per_sample.json).
    #[arg(long)]
    a: PathBuf,
    /// Second per-sample dump, same dataset and split.
    #[arg(long)]
    b: PathBuf,
    /// Paired subsample size.
    #[arg(long, default_value_t = DEFAULT_TEST_SAMPLES)]
    n: usize,
    /// Comparisons assumed for Bonferroni correction.
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct StatsReport {
    n_pairs: usize,
    n_subsampled: usize,
    n_effective: usize,
    w: f64,
    p: f64,
    p_bonferroni: f64,
    m: usize,
    exact: bool,
}

fn load_per_sample(path: &Path) -> Result<Vec<SampleEval>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run_stats(args: StatsArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let seed = resolve_seed(args.seed, &cfg);
    let a = load_per_sample(&args.a)?;
    let b = load_per_sample(&args.b)?;
    if a.len() != b.len() {
        bail!("dumps pair by position but have {} and {} samples", a.len(), b.len());
    }
    if a.iter().zip(&b).any(|(x, y)| x.n_buses != y.n_buses) {
        bail!("dumps disagree on bus counts; were they evaluated on the same split?");
    }
    let counts: Vec<usize> = a.iter().map(|s| s.n_buses).collect();
    let idx = stratified_indices(&counts, args.n, seed);
    let xa: Vec<f64> = idx.iter().map(|&i| a[i].rmse_all).collect();
    let xb: Vec<f64> = idx.iter().map(|&i| b[i].rmse_all).collect();
    let r = wilcoxon_paired(&xa, &xb)?;
    let report = StatsReport {
        n_pairs: a.len(),
        n_subsampled: idx.len(),
        n_effective: r.n_effective,
        w: r.w,
        p: r.p,
        p_bonferroni: bonferroni(r.p, args.m),
        m: args.m,
        exact: r.exact,
    };
    println!(
        "W = {}, p = {:.6e} ({} pairs, {} effective, {}), Bonferroni x{} -> {:.6e}",
        report.w,
        report.p,
        report.n_subsampled,
        report.n_effective,
        if report.exact { "exact" } else { "normal approximation" },
        report.m,
        report.p_bonferroni
    );
    let mut out = OutDir::create(resolve_out(&args.out, &cfg, "runs/stats"))?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    out.write("stats.json", text.into_bytes())?;
    out.finish(&serde_json::json!({
        "command": "stats",
        "a": args.a,
        "b": args.b,
        "n": args.n,
        "m": args.m,
        "seed": seed,
    }))
}

// ------------------------------------------------------------------ report

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding history.csv / metrics.csv / fewshot.csv.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run_report(args: ReportArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let out_path = args.out.clone().unwrap_or_else(|| args.run.clone());
    let mut out = OutDir::create(resolve_out(&Some(out_path), &cfg, "runs/report"))?;
    let mut produced = 0;
    let history_path = args.run.join("history.csv");
    if history_path.exists() {
        let rows = history_from_csv(&std::fs::read_to_string(&history_path)?)?;
        out.write("loss_curves.svg", history_chart(&rows).into_bytes())?;
        produced += 1;
    }
    let metrics_path = args.run.join("metrics.csv");
    if metrics_path.exists() {
        let records = metrics_from_csv(&std::fs::read_to_string(&metrics_path)?)?;
        let labeled: Vec<(f64, f64, String)> = records
            .iter()
            .map(|r| (r.p_reduced, r.rmse_all, r.mode.clone()))
            .collect();
        let points: Vec<(f64, f64)> = labeled.iter().map(|p| (p.0, p.1)).collect();
        let mut front = pareto_front(&points);
        front.sort_by(|&x, &y| points[x].0.partial_cmp(&points[y].0).unwrap());
        out.write(
            "pareto.svg",
            scatter_chart(
                "trainable parameters vs accuracy",
                "trainable fraction of full fine-tuning",
                "test rmse",
                &labeled,
                &front,
            )
            .into_bytes(),
        )?;
        produced += 1;
    }
    let fewshot_path = args.run.join("fewshot.csv");
    if fewshot_path.exists() {
        let records = metrics_from_csv(&std::fs::read_to_string(&fewshot_path)?)?;
        let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let labels: Vec<String> = seeds.iter().map(|s| format!("seed {s}")).collect();
        let series: Vec<Series<'_>> = seeds
            .iter()
            .zip(&labels)
            .map(|(seed, label)| {
                let mut pts: Vec<(f64, f64)> = records
                    .iter()
                    .filter(|r| r.seed == *seed)
                    .map(|r| (r.beta, r.rmse_all))
                    .collect();
                pts.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
                Series { label, points: pts }
            })
            .collect();
        out.write(
            "fewshot.svg",
            line_chart("few-shot budget sweep", "training fraction", "test rmse", &series, false)
                .into_bytes(),
        )?;
        produced += 1;
    }
    if produced == 0 {
        bail!("no history.csv, metrics.csv, or fewshot.csv under {}", args.run.display());
    }
    println!("rebuilt {produced} chart(s) from {}", args.run.display());
    out.finish(&serde_json::json!({
        "command": "report",
        "run": args.run,
    }))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => run_generate(a),
        Command::TrainSource(a) => run_train_source(a),
        Command::Adapt(a) => run_adapt(a),
        Command::Eval(a) => run_eval(a),
        Command::Fewshot(a) => run_fewshot(a),
        Command::Pareto(a) => run_pareto(a),
        Command::Stats(a) => run_stats(a),
        Command::Report(a) => run_report(a),
    }
}
