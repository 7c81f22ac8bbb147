//! Verbs of the `dlora` command. Each one reads a configuration file (or the
//! defaults), applies `--key=value` overrides and writes its artifacts into
//! an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dlora_core::checkpoint::Checkpoint;
use dlora_core::config::RunConfig;
use dlora_core::data::{load_csv, sniff_date_column, synth_generate, write_csv, write_matrix_csv, SynthKind, SynthSpec};
use dlora_core::experiment::{self, Evaluation};
use dlora_core::model::Variant;
use dlora_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dlora", version, about = "Forecasting with a frozen decoder stack and routed low-rank adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes model.dlf, history.csv and routing.json.
    Train(RunArgs),
    /// Score a checkpoint on its test split against the seasonal-naive baseline.
    Eval(EvalArgs),
    /// Forecast the steps after a lookback CSV.
    Forecast(ForecastArgs),
    /// Train and score all five variants with a shared seed.
    Ablate(RunArgs),
    /// Train and score the full variant for several numbers of active adapters.
    SweepN(SweepArgs),
    /// Generate a synthetic series CSV plus a JSON sidecar of its parameters.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for the artifacts.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Configuration overrides: `--key=value` or `--key value`. `--synthetic
    /// KIND` selects a synthetic dataset.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
    /// Split to score.
    #[arg(long, default_value = "test", value_parser = ["test", "val"])]
    pub split: String,
    /// Dataset or evaluation overrides; lookback and horizon must match the checkpoint.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV whose last lookback rows are the model input.
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the forecast CSV.
    #[arg(long, default_value = "forecast.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Numbers of active adapters to try.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5, 6, 7])]
    pub n_values: Vec<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "sine_mixture")]
    pub kind: String,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 2000)]
    pub length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise standard deviation; the kind's default when omitted.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value = "synthetic.csv")]
    pub out: PathBuf,
}

/// Splits `--key=value` / `--key value` arguments into pairs. Dashes in keys
/// become underscores; `--synthetic KIND` expands to two keys.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key=value, got '{arg}'")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("override --{body} has no value")))?;
                (body.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if key == "synthetic" {
            out.push(("dataset".into(), "synthetic".into()));
            out.push(("synthetic_kind".into(), value));
        } else {
            out.push((key, value));
        }
    }
    Ok(out)
}

pub fn load_config(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let pairs = parse_overrides(overrides)?;
    cfg.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Forecast(a) => cmd_forecast(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::SweepN(a) => cmd_sweep_n(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let run = experiment::run_training(&cfg)?;
    ensure_dir(&a.out)?;
    let h = &run.outcome.history;
    let steps = h.records.len() as u64;
    experiment::make_checkpoint(&cfg, &run.model, steps, &run.dataset).save(&a.out.join("model.dlf"))?;
    h.write_csv(&a.out.join("history.csv"))?;
    write_json(&a.out.join("routing.json"), &run.outcome.routing.to_json())?;
    let p = run.model.param_report();
    println!(
        "trained {} on '{}' for {} epochs (best epoch {}{})",
        cfg.model.variant,
        run.dataset.series.name(),
        h.records.len(),
        h.best_epoch,
        if h.stopped_early { ", stopped early" } else { "" }
    );
    if let Some(best) = h.records.get(h.best_epoch) {
        println!(
            "train loss {:.6}, val loss {}",
            best.train_loss,
            best.val_loss.map_or("-".into(), |v| format!("{v:.6}"))
        );
    }
    println!(
        "parameters: {} trainable of {} ({:.2}%), adapters {}",
        p.trainable,
        p.total,
        100.0 * p.trainable_fraction(),
        p.adapters
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn print_eval(ev: &Evaluation) {
    print!("{}", ev.table());
    println!("repeat-last MSE {:.6}", ev.repeat_last_mse);
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let loaded = experiment::load_checkpoint(&ck)?;
    let mut cfg = loaded.config.clone();
    let pairs = parse_overrides(&a.overrides)?;
    cfg.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if cfg.model.horizon != loaded.config.model.horizon || cfg.model.lookback != loaded.config.model.lookback {
        return Err(Error::Config(format!(
            "horizon mismatch: checkpoint was trained for lookback {} / horizon {}, evaluation asks for {} / {}",
            loaded.config.model.lookback, loaded.config.model.horizon, cfg.model.lookback, cfg.model.horizon
        )));
    }
    cfg.validate()?;
    let data = experiment::load_dataset(&cfg)?;
    let splits = data.splits(cfg.model.lookback)?;
    let view = if a.split == "val" { splits.val } else { splits.test };
    let ev = experiment::evaluate(&loaded.model, view, &cfg)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("metrics.json"), &ev.to_json())?;
    write(&a.out.join("metrics.txt"), &ev.table())?;
    write_json(&a.out.join("routing.json"), &ev.routing.to_json())?;
    print_eval(&ev);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_forecast(a: &ForecastArgs) -> Result<()> {
    let loaded = experiment::load_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let date = sniff_date_column(&a.input)?;
    let history = load_csv(&a.input, date.as_deref())?;
    let rows = experiment::forecast_series(&loaded, &history)?;
    write_matrix_csv(&a.output, history.channel_names(), &rows)?;
    println!(
        "forecast {} steps of {} channels -> {}",
        rows.len(),
        history.channels(),
        a.output.display()
    );
    Ok(())
}

fn cmd_ablate(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let rows = experiment::ablate(&cfg, &Variant::ALL)?;
    let shared = rows.windows(2).all(|w| w[0].init_checksums == w[1].init_checksums);
    if !shared {
        return Err(Error::Contract("variants did not share initialization".into()));
    }
    ensure_dir(&a.out)?;
    write(&a.out.join("ablation.csv"), &experiment::ablation_csv(&rows))?;
    let table = experiment::ablation_table(&rows);
    write(&a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    println!("shared initialization checksums match across {} variants", rows.len());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_sweep_n(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(a.run.config.as_deref(), &a.run.overrides)?;
    if let Some(bad) = a.n_values.iter().find(|n| !(1..=7).contains(*n)) {
        return Err(Error::Config(format!("n value {bad} outside 1..=7")));
    }
    let rows = experiment::sweep_n(&cfg, &a.n_values)?;
    ensure_dir(&a.run.out)?;
    write(&a.run.out.join("sweep_n.csv"), &experiment::sweep_csv(&rows))?;
    println!("{:>2} {:>12} {:>12} {:>12}", "n", "MSE", "MAE", "SMAPE");
    for r in &rows {
        println!("{:>2} {:>12.6} {:>12.6} {:>12.4}", r.n, r.eval.model.mse, r.eval.model.mae, r.eval.model.smape);
    }
    println!("wrote {}", a.run.out.display());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let kind: SynthKind = a.kind.parse()?;
    let mut spec = SynthSpec::new(kind, a.channels, a.length, a.seed);
    if let Some(n) = a.noise {
        spec.noise_std = n;
    }
    let (series, params) = synth_generate(&spec)?;
    write_csv(&a.out, &series)?;
    let sidecar = a.out.with_extension("params.json");
    write(&sidecar, &(serde_json::to_string_pretty(&params)? + "\n"))?;
    println!(
        "wrote {} ({} steps × {} channels) and {}",
        a.out.display(),
        series.len(),
        series.channels(),
        sidecar.display()
    );
    Ok(())
}
