//! `uthp` command-line front end.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use uthp::checkpoint;
use uthp::data::{load_dataset, split_dataset, Dataset};
use uthp::gradcheck::{grad_check, GradCheckSetup};
use uthp::intensity::Estimator;
use uthp::predict::{to_jsonl, LossWeights};
use uthp::synthgen::{simulate, GenSpec, HawkesParams, Sidecar};
use uthp::train::{evaluate, train, EvalConfig};
use uthp::{Error, LayerSharing, Model, ModelConfig};

use crate::config::{RunConfig, KEYS};

#[derive(Parser, Debug)]
#[command(
    name = "uthp",
    version,
    about = "Universal transformer Hawkes process: simulate, train, evaluate and predict event sequences",
    after_help = config_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn config_help() -> String {
    let mut s = String::from("Config file keys (key = value, # comments):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<20} [default: {d}]\n"));
    }
    s
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a multivariate exponential-kernel Hawkes process
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint and run report
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics file
    Evaluate(EvaluateArgs),
    /// Write next-event predictions as JSON Lines
    Predict(PredictArgs),
    /// Count trainable parameters of a configuration
    CountParams(CountArgs),
    /// Check analytic gradients against central finite differences
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output dataset (JSON Lines); parameters go to <out>.params.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    num_types: usize,
    /// Background rates, comma separated [default: 0.2 for every type]
    #[arg(long)]
    mu: Option<String>,
    /// Branching matrix, rows separated by `;` [default: 0.4 diagonal, 0.2/(C-1) elsewhere]
    #[arg(long)]
    a: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    decay: f64,
    /// Number of sequences
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 50.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write <out>.train/.dev/.test.jsonl with these ratios, e.g. 0.8,0.1,0.1 [default: no split]
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug, Default)]
struct Ablation {
    /// Pure recurrence: apply the shared layer a fixed number of times
    #[arg(long)]
    no_act: bool,
    /// Number of recurrence steps (maximum steps when ACT is on) [default: from config]
    #[arg(long)]
    iters: Option<usize>,
    /// Plain position-wise feed-forward instead of conv + max-pool
    #[arg(long)]
    no_cnn_ffn: bool,
    /// Drop the recurrent postprocessing block
    #[arg(long)]
    no_postprocess_rnn: bool,
    /// Distinct layer per step instead of one shared layer (needs --no-act)
    #[arg(long)]
    stacked_layers: bool,
}

impl Ablation {
    fn apply(&self, m: &mut ModelConfig) {
        if self.no_act {
            m.act_enabled = false;
        }
        if let Some(n) = self.iters {
            m.max_n = n;
        }
        if self.no_cnn_ffn {
            m.use_cnn_ffn = false;
        }
        if self.no_postprocess_rnn {
            m.d_rnn = 0;
        }
        if self.stacked_layers {
            m.layer_sharing = LayerSharing::Stacked;
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration file [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data [default: `train` key of the config]
    #[arg(long)]
    train: Option<PathBuf>,
    /// Dev data for model selection [default: `dev` key of the config, else none]
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint to write [default: `checkpoint` key of the config]
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    /// Run report [default: <checkpoint>.report.json]
    #[arg(long)]
    report: Option<PathBuf>,
    /// Overrides the config seed [default: from config]
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config epoch count [default: from config]
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    ablation: Ablation,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Monte Carlo points per interval
    #[arg(long, default_value_t = 10_000)]
    eval_samples: usize,
    #[arg(long, default_value = "mc")]
    estimator: Estimator,
    /// Seed of the Monte Carlo draws
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

impl EvalArgs {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            batch_size: self.batch_size,
            seed: self.seed,
            estimator: self.estimator,
            mc_samples: self.eval_samples,
            weights: LossWeights::LIKELIHOOD,
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_metrics: PathBuf,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CountArgs {
    /// Run configuration file [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of event types [default: `num_types` key of the config, else 2]
    #[arg(long)]
    num_types: Option<usize>,
    /// Write the JSON breakdown here [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    ablation: Ablation,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Model keys override the built-in check model (D=8, D_H=16, C=3) [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail when the maximum relative error reaches this value
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Write the JSON report here [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_list(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number `{x}`"))
        })
        .collect()
}

fn hawkes_params(args: &GenerateArgs) -> anyhow::Result<HawkesParams> {
    let c = args.num_types;
    if c == 0 {
        return Err(Error::Config("num-types must be positive".into()).into());
    }
    let mu = match &args.mu {
        Some(s) => parse_list(s)?,
        None => vec![0.2; c],
    };
    let a = match &args.a {
        Some(s) => s
            .split(';')
            .map(parse_list)
            .collect::<anyhow::Result<Vec<_>>>()?,
        None => (0..c)
            .map(|i| {
                (0..c)
                    .map(|j| if i == j { 0.4 } else { 0.2 / (c - 1) as f64 })
                    .collect()
            })
            .collect(),
    };
    if mu.len() != c || a.len() != c {
        return Err(Error::Hawkes(format!("expected {c} rates and {c} matrix rows")).into());
    }
    Ok(HawkesParams {
        mu,
        a,
        decay: args.decay,
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let params = hawkes_params(&args)?;
    let spec = GenSpec {
        num_sequences: args.n,
        horizon: args.horizon,
        seed: args.seed,
    };
    let data = simulate(&params, &spec)?;
    data.save(&args.out)?;
    Sidecar::new(&params, &spec).save(&sibling(&args.out, "params.json"))?;
    info!(
        "wrote {} sequences ({} events) to {}",
        data.len(),
        data.total_events(),
        args.out.display()
    );
    if let Some(split) = &args.split {
        let r = parse_list(split)?;
        let ratios: [f64; 3] = r
            .try_into()
            .map_err(|_| Error::Config("split needs three ratios".into()))?;
        let (tr, dv, te) = split_dataset(&data, ratios, args.seed)?;
        for (name, part) in [("train", tr), ("dev", dv), ("test", te)] {
            if !part.is_empty() {
                part.save(&sibling(&args.out, &format!("{name}.jsonl")))?;
            }
        }
    }
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut rc = load_run_config(args.config.as_deref())?;
    args.ablation.apply(&mut rc.model);
    if let Some(s) = args.seed {
        rc.train.seed = s;
    }
    if let Some(e) = args.epochs {
        rc.train.epochs = e;
    }
    let ckpt = args
        .out_checkpoint
        .or(rc.checkpoint.clone())
        .ok_or_else(|| {
            Error::Config("no checkpoint path: pass --out-checkpoint or set `checkpoint`".into())
        })?;
    rc.train.checkpoint_path = Some(ckpt.clone());
    rc.validate()?;
    let train_path = args
        .train
        .or(rc.train_path.clone())
        .ok_or_else(|| Error::Config("no training data: pass --train or set `train`".into()))?;
    let train_set = load_dataset(&train_path, rc.num_types)?;
    let dev_path = args.dev.or(rc.dev_path.clone());
    let dev: Option<Dataset> = dev_path
        .map(|p| load_dataset(&p, Some(train_set.num_types)))
        .transpose()?;
    let model = Model::build(rc.model.clone(), train_set.num_types, rc.train.seed)?;
    info!(
        "training {} parameters on {} sequences",
        model.count_params(),
        train_set.len()
    );
    let (_, report) = train(model, &train_set, dev.as_ref(), &rc.train)?;
    info!("finished in {:.1}s", report.wall_seconds);
    let report_path = args.report.unwrap_or_else(|| sibling(&ckpt, "report.json"));
    write_file(&report_path, &report.to_json())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = load_dataset(&args.data, Some(model.num_types))?;
    let ev = evaluate(&model, &data, &args.eval.config())?;
    info!(
        "per-event ll {:.5}, accuracy {:.2}%, rmse {:.5}",
        ev.metrics.per_event_ll, ev.metrics.accuracy, ev.metrics.rmse
    );
    write_file(&args.out_metrics, &json(&ev.metrics))
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = load_dataset(&args.data, Some(model.num_types))?;
    let cfg = EvalConfig {
        mc_samples: 1,
        ..EvalConfig::default()
    };
    let ev = evaluate(&model, &data, &cfg)?;
    write_file(&args.out, &to_jsonl(&ev.predictions))
}

#[derive(Serialize)]
struct CountReport {
    total: usize,
    tensors: Vec<TensorCount>,
}

#[derive(Serialize)]
struct TensorCount {
    name: String,
    count: usize,
}

fn cmd_count_params(args: CountArgs) -> anyhow::Result<()> {
    let mut rc = load_run_config(args.config.as_deref())?;
    args.ablation.apply(&mut rc.model);
    rc.model.validate()?;
    let c = args.num_types.or(rc.num_types).unwrap_or(2);
    let model = Model::build(rc.model, c, 0)?;
    let report = CountReport {
        total: model.count_params(),
        tensors: model
            .param_breakdown()
            .into_iter()
            .map(|(name, count)| TensorCount { name, count })
            .collect(),
    };
    emit(args.out.as_deref(), &json(&report))
}

fn cmd_grad_check(args: GradCheckArgs) -> anyhow::Result<()> {
    let mut setup = GradCheckSetup {
        seed: args.seed,
        ..GradCheckSetup::default()
    };
    if let Some(p) = &args.config {
        let rc = RunConfig::load(p)?;
        if rc.model != ModelConfig::default() {
            setup.model = rc.model;
        }
        if let Some(c) = rc.num_types {
            setup.num_types = c;
        }
    }
    let report = grad_check(&setup)?;
    info!(
        "checked {} entries in {:.1}s",
        report.checked, report.seconds
    );
    emit(args.out.as_deref(), &json(&report))?;
    if report.max_rel_err >= args.tolerance {
        bail!(GradCheckFailed(format!(
            "max relative error {:.3e} at {}[{}] reaches tolerance {:.1e}",
            report.max_rel_err, report.worst_param, report.worst_index, args.tolerance
        )));
    }
    Ok(())
}

#[derive(Debug)]
struct GradCheckFailed(String);

impl std::fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GradCheckFailed {}

fn error_line(err: &anyhow::Error) -> String {
    let (kind, message) = if let Some(e) = err.downcast_ref::<Error>() {
        (e.kind(), e.to_string())
    } else if err.is::<GradCheckFailed>() {
        ("grad_check_failed", err.to_string())
    } else {
        ("other", format!("{err:#}"))
    };
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::CountParams(a) => cmd_count_params(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
