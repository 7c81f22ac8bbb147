//! Orchestration shared by the command-line verbs and the acceptance suite:
//! dataset preparation, training runs, evaluation against the seasonal-naive
//! baseline, checkpoint assembly, the variant ablation and the `n` sweep.

use std::fmt::Write as _;

use crate::autograd::Tensor;
use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{
    chronological_split, few_shot_subset, load_csv, sniff_date_column, make_windows, synth_generate, MultivariateSeries, SeriesView,
    SplitSpec, Splits, SynthParams, SynthSpec, WindowBatch,
};
use crate::dlora::RoutingStats;
use crate::error::{Error, Result};
use crate::metrics::{self, naive_seasonal_forecast, MetricReport, SeriesForecast};
use crate::model::{Forecaster, ParamReport, Variant};
use crate::training::{self, pretrain_then_freeze, TrainOutcome};

const EVAL_BATCH: usize = 64;

/// A loaded series with its split lengths and optional global statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub series: MultivariateSeries,
    pub split: SplitSpec,
    /// Per-channel `(mean, std)` when global standardization is on.
    pub global_stats: Option<Vec<(f64, f64)>>,
    pub synth_params: Option<SynthParams>,
}

impl Dataset {
    pub fn splits(&self, lookback: usize) -> Result<Splits<'_>> {
        chronological_split(&self.series, self.split, lookback)
    }
}

fn split_lengths(total: usize, (tr, va): (f64, f64)) -> SplitSpec {
    let train = (total as f64 * tr).floor() as usize;
    let val = ((total as f64 * va).floor() as usize).min(total - train);
    SplitSpec::new(train, val, total - train - val)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let (mut series, synth_params) = match d.source() {
        DataSource::Synthetic(r) => {
            let (s, p) = synth_generate(&SynthSpec::new(r.kind, r.channels, r.length, cfg.seed))?;
            (s, Some(p))
        }
        DataSource::Csv { path } => {
            let date = match &d.date_column {
                Some(c) => Some(c.clone()),
                None => sniff_date_column(&path)?,
            };
            (load_csv(&path, date.as_deref())?, None)
        }
    };
    if let Some(freq) = &d.frequency {
        series = MultivariateSeries::new(
            series.name(),
            series.values().to_vec(),
            series.channels(),
            freq.clone(),
            series.channel_names().to_vec(),
        )?;
    }
    series.ensure_windowable(cfg.model.lookback, cfg.model.horizon)?;
    let split = split_lengths(series.len(), d.split);
    let global_stats = if d.global_standardize {
        let (s, stats) = series.standardized(split.train_len)?;
        series = s;
        Some(stats)
    } else {
        None
    };
    Ok(Dataset {
        series,
        split,
        global_stats,
        synth_params,
    })
}

/// The training view after the few-shot cut.
pub fn training_view<'a>(cfg: &RunConfig, splits: &Splits<'a>) -> Result<SeriesView<'a>> {
    if cfg.data.few_shot < 1.0 {
        few_shot_subset(splits.train, cfg.data.few_shot, cfg.model.lookback, cfg.model.horizon)
    } else {
        Ok(splits.train)
    }
}

/// Builds the model for a dataset, running the backbone pretraining when the
/// configuration asks for it.
pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<Forecaster> {
    let mut model = Forecaster::new(cfg.model_for(data.series.name(), data.series.frequency()))?;
    let bb = &cfg.model.backbone;
    if bb.pretrain_mode.is_pretrained() {
        pretrain_then_freeze(&mut model, bb.pretrain_steps)?;
    }
    Ok(model)
}

pub struct TrainRun {
    pub model: Forecaster,
    pub outcome: TrainOutcome,
    pub dataset: Dataset,
    /// Checksums of the shared-component tensors before training.
    pub init_checksums: Vec<(String, u64)>,
}

pub const SHARED_PREFIXES: [&str; 3] = ["backbone.", "embed.", "head."];

pub fn run_training(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let mut model = build_model(cfg, &dataset)?;
    let init_checksums = SHARED_PREFIXES
        .iter()
        .map(|p| (p.to_string(), model.store().checksum(p)))
        .collect();
    let outcome = {
        let splits = dataset.splits(cfg.model.lookback)?;
        let train = training_view(cfg, &splits)?;
        training::train(&mut model, train, splits.val, &cfg.train)?
    };
    Ok(TrainRun {
        model,
        outcome,
        dataset,
        init_checksums,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: MetricReport,
    pub naive: MetricReport,
    /// MSE of repeating the last lookback value over the horizon.
    pub repeat_last_mse: f64,
    pub routing: RoutingStats,
}

impl Evaluation {
    pub fn table(&self) -> String {
        metrics::format_table(&[("model".to_string(), &self.model), ("seasonal_naive".to_string(), &self.naive)])
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "seasonal_naive": self.naive,
            "repeat_last_mse": self.repeat_last_mse,
        })
    }
}

/// Seasonal period used for scoring: the configured one, else the period of
/// the series frequency, capped by the lookback.
pub fn eval_seasonality(cfg: &RunConfig, series: &MultivariateSeries) -> usize {
    let s = if cfg.eval.seasonality > 0 {
        cfg.eval.seasonality
    } else {
        metrics::seasonality(series.frequency())
    };
    s.clamp(1, cfg.model.lookback)
}

/// Scores every stride-1 window of `view`; each channel of each window is one
/// series for the metric averages.
pub fn evaluate(model: &Forecaster, view: SeriesView<'_>, cfg: &RunConfig) -> Result<Evaluation> {
    let mc = model.config();
    let (tl, tp) = (mc.lookback, mc.horizon);
    let ws = make_windows(view, tl, tp, 1);
    if ws.is_empty() {
        return Err(Error::Data(format!(
            "evaluation split of {} steps holds no {tl}+{tp} window",
            view.len()
        )));
    }
    let s = eval_seasonality(cfg, view.series());
    let conv = cfg.eval.mase_convention;
    let (mut per_model, mut per_naive) = (Vec::new(), Vec::new());
    let (mut last_sq, mut last_count) = (0.0, 0usize);
    let mut routing = RoutingStats::default();
    for chunk in ws.windows.chunks(EVAL_BATCH) {
        let batch = WindowBatch::build(view, chunk);
        let (y_hat, stats) = model.predict(&batch.x)?;
        routing.merge(&stats);
        let n = batch.x.shape()[1];
        for b in 0..batch.len() {
            for c in 0..n {
                let row = b * n + c;
                let hist = &batch.x.data()[row * tl..(row + 1) * tl];
                let y = &batch.y.data()[row * tp..(row + 1) * tp];
                let yh = &y_hat.data()[row * tp..(row + 1) * tp];
                let naive = naive_seasonal_forecast(hist, s, tp)?;
                per_model.push(metrics::series_metrics(SeriesForecast { y, y_hat: yh, history: hist }, s, conv)?);
                per_naive.push(metrics::series_metrics(SeriesForecast { y, y_hat: &naive, history: hist }, s, conv)?);
                let last = hist[tl - 1];
                last_sq += y.iter().map(|v| (v - last).powi(2)).sum::<f64>();
                last_count += tp;
            }
        }
    }
    let naive = MetricReport::from_series(&per_naive, tp, s, conv)?;
    let naive = naive.clone().with_owa(&naive);
    let model_report = MetricReport::from_series(&per_model, tp, s, conv)?.with_owa(&naive);
    Ok(Evaluation {
        model: model_report,
        naive,
        repeat_last_mse: last_sq / last_count as f64,
        routing,
    })
}

/// Checkpoint of a trained model. The stored config pins the rendered prompt
/// so reloading does not depend on the dataset.
pub fn make_checkpoint(cfg: &RunConfig, model: &Forecaster, step: u64, data: &Dataset) -> Checkpoint {
    let mut snapshot = cfg.clone();
    snapshot.prompt_text = Some(model.config().prompt_text.clone());
    let mut ck = Checkpoint::capture(model.store(), snapshot.to_text(), cfg.seed, step);
    if let Some(stats) = &data.global_stats {
        ck.push_meta("global_mean", Tensor::row(&stats.iter().map(|s| s.0).collect::<Vec<_>>()));
        ck.push_meta("global_std", Tensor::row(&stats.iter().map(|s| s.1).collect::<Vec<_>>()));
    }
    ck
}

pub struct LoadedModel {
    pub config: RunConfig,
    pub model: Forecaster,
    pub global_stats: Option<Vec<(f64, f64)>>,
}

pub fn load_checkpoint(ck: &Checkpoint) -> Result<LoadedModel> {
    let mut config = RunConfig::parse_text(&ck.config_text, std::path::Path::new("<checkpoint>"))?;
    config.seed = ck.seed;
    config.sync();
    let mut model = Forecaster::new(config.model_for("", ""))?;
    ck.restore_into(model.store_mut())?;
    let global_stats = match (ck.meta("global_mean"), ck.meta("global_std")) {
        (Some(m), Some(s)) => Some(m.data().iter().copied().zip(s.data().iter().copied()).collect()),
        _ => None,
    };
    Ok(LoadedModel {
        config,
        model,
        global_stats,
    })
}

/// Forecasts the `T_P` steps after the last `T_L` rows of `history`, returned
/// as a `T_P×N` row-major matrix on the original scale.
pub fn forecast_series(loaded: &LoadedModel, history: &MultivariateSeries) -> Result<Vec<Vec<f64>>> {
    let mc = loaded.model.config();
    let (tl, tp) = (mc.lookback, mc.horizon);
    if history.len() < tl {
        return Err(Error::Data(format!(
            "lookback file has {} rows; the model needs {tl}",
            history.len()
        )));
    }
    let n = history.channels();
    if let Some(stats) = &loaded.global_stats {
        if stats.len() != n {
            return Err(Error::Data(format!(
                "lookback file has {n} channels; the model was trained on {}",
                stats.len()
            )));
        }
    }
    let block = history.block(history.len() - tl, tl);
    let mut x = block.data().to_vec();
    if let Some(stats) = &loaded.global_stats {
        for c in 0..n {
            for v in &mut x[c * tl..(c + 1) * tl] {
                *v = (*v - stats[c].0) / stats[c].1;
            }
        }
    }
    let (y, _) = loaded.model.predict(&Tensor::new(vec![1, n, tl], x)?)?;
    Ok((0..tp)
        .map(|t| {
            (0..n)
                .map(|c| {
                    let v = y.data()[c * tp + t];
                    loaded.global_stats.as_ref().map_or(v, |s| v * s[c].1 + s[c].0)
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub eval: Evaluation,
    pub params: ParamReport,
    /// Mean over layers of the entropy of chosen gate sets on the test split.
    pub selection_entropy: Option<f64>,
    pub init_checksums: Vec<(String, u64)>,
    pub epochs: usize,
}

/// Trains and scores each variant on the same data, seed and window order.
pub fn ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let mut c = cfg.clone();
            c.model.variant = variant;
            let run = run_training(&c)?;
            let splits = run.dataset.splits(c.model.lookback)?;
            let eval = evaluate(&run.model, splits.test, &c)?;
            let sel = eval.routing.selection_entropy_bits();
            Ok(AblationRow {
                variant,
                params: run.model.param_report(),
                selection_entropy: (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64),
                init_checksums: run.init_checksums,
                epochs: run.outcome.history.records.len(),
                eval,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let reports: Vec<(String, &MetricReport)> = rows.iter().map(|r| (r.variant.name().to_string(), &r.eval.model)).collect();
    let mut out = metrics::format_table(&reports);
    let _ = writeln!(out, "\n{:<18} {:>10} {:>10} {:>10} {:>12}", "variant", "adapters", "trainable", "total", "sel_entropy");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>10} {:>10} {:>10} {:>12}",
            r.variant.name(),
            r.params.adapters,
            r.params.trainable,
            r.params.total,
            r.selection_entropy.map_or("-".into(), |e| format!("{e:.4}"))
        );
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,mse,mae,smape,mase,owa,adapter_params,trainable_params,total_params,selection_entropy,epochs\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    for r in rows {
        let m = &r.eval.model;
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{},{},{},{},{},{},{}",
            r.variant.name(),
            m.mse,
            m.mae,
            m.smape,
            opt(m.mase),
            opt(m.owa),
            r.params.adapters,
            r.params.trainable,
            r.params.total,
            opt(r.selection_entropy),
            r.epochs
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub n: usize,
    pub eval: Evaluation,
}

/// Trains the full variant once per `n` with a shared seed.
pub fn sweep_n(cfg: &RunConfig, ns: &[usize]) -> Result<Vec<SweepRow>> {
    ns.iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.model.top_n = n;
            let run = run_training(&c)?;
            let splits = run.dataset.splits(c.model.lookback)?;
            Ok(SweepRow {
                n,
                eval: evaluate(&run.model, splits.test, &c)?,
            })
        })
        .collect()
}

/// One row per `(n, layer)`: test metrics plus the activation frequency of
/// each module, which sums to one within a row.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    use crate::backbone::Module;
    let mut out = String::from("n,layer,mse,mae,smape,mase");
    for m in Module::ALL {
        let _ = write!(out, ",freq_{}", m.name());
    }
    out.push('\n');
    for r in rows {
        for (l, layer) in r.eval.routing.layers.iter().enumerate() {
            let m = &r.eval.model;
            let _ = write!(
                out,
                "{},{l},{:?},{:?},{:?},{}",
                r.n,
                m.mse,
                m.mae,
                m.smape,
                m.mase.map_or(String::new(), |v| format!("{v:?}"))
            );
            for f in layer.activation_frequency() {
                let _ = write!(out, ",{f:?}");
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_run_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.apply_overrides([
            ("seed", "4"),
            ("channels", "2"),
            ("length", "200"),
            ("lookback", "16"),
            ("horizon", "4"),
            ("layers", "1"),
            ("d_model", "16"),
            ("heads", "2"),
            ("d_ffn", "32"),
            ("align_heads", "4"),
            ("rank", "2"),
            ("top_n", "2"),
            ("epochs", "1"),
            ("stride", "8"),
            ("batch_size", "8"),
            ("seasonality", "1"),
        ])
        .unwrap();
        c
    }

    #[test]
    fn split_lengths_cover_series() {
        let s = split_lengths(2000, (0.7, 0.1));
        assert_eq!((s.train_len, s.val_len, s.test_len), (1400, 200, 400));
        let m4 = split_lengths(50, (1.0, 0.0));
        assert_eq!((m4.train_len, m4.val_len, m4.test_len), (50, 0, 0));
    }

    #[test]
    fn checkpoint_reload_is_bit_identical() {
        let cfg = tiny_run_config();
        let run = run_training(&cfg).unwrap();
        let ck = make_checkpoint(&cfg, &run.model, 1, &run.dataset);
        let loaded = load_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        let splits = run.dataset.splits(16).unwrap();
        let batch = WindowBatch::build(splits.test, &make_windows(splits.test, 16, 4, 1).windows[..3]);
        let a = run.model.predict(&batch.x).unwrap().0;
        let b = loaded.model.predict(&batch.x).unwrap().0;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn evaluation_reports_naive_owa_of_one() {
        let cfg = tiny_run_config();
        let run = run_training(&cfg).unwrap();
        let splits = run.dataset.splits(16).unwrap();
        let ev = evaluate(&run.model, splits.test, &cfg).unwrap();
        assert!((ev.naive.owa.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ev.model.series, ev.naive.series);
        for layer in &ev.routing.layers {
            assert!((layer.activation_frequency().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn forecast_uses_last_lookback_rows_and_global_stats() {
        let mut cfg = tiny_run_config();
        cfg.set("global_standardize", "true").unwrap();
        let run = run_training(&cfg).unwrap();
        let ck = make_checkpoint(&cfg, &run.model, 1, &run.dataset);
        let loaded = load_checkpoint(&ck).unwrap();
        let raw = load_dataset(&RunConfig {
            data: crate::config::DataConfig {
                global_standardize: false,
                ..cfg.data.clone()
            },
            ..cfg.clone()
        })
        .unwrap();
        let out = forecast_series(&loaded, &raw.series).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|r| r.len() == 2 && r.iter().all(|v| v.is_finite())));
        let short = MultivariateSeries::new("s", vec![0.0; 10], 2, "h", vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(forecast_series(&loaded, &short), Err(Error::Data(_))));
    }

    #[test]
    fn ablation_shares_initialization() {
        let cfg = tiny_run_config();
        let rows = ablate(&cfg, &[Variant::Full, Variant::Frozen, Variant::StaticLora]).unwrap();
        assert!(rows.windows(2).all(|w| w[0].init_checksums == w[1].init_checksums));
        assert_eq!(rows[1].params.adapters, 0);
        assert_eq!(rows[2].selection_entropy, Some(0.0));
        assert!(ablation_csv(&rows).lines().count() == 4);
    }

    #[test]
    fn sweep_rows_sum_to_one() {
        let cfg = tiny_run_config();
        let rows = sweep_n(&cfg, &[1, 7]).unwrap();
        let csv = sweep_csv(&rows);
        for line in csv.lines().skip(1) {
            let f: Vec<f64> = line.split(',').skip(6).map(|v| v.parse().unwrap()).collect();
            assert_eq!(f.len(), 7);
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let n7 = csv.lines().skip(1).find(|l| l.starts_with("7,")).unwrap();
        assert!(n7.split(',').skip(6).all(|v| (v.parse::<f64>().unwrap() - 1.0 / 7.0).abs() < 1e-12));
    }
}
