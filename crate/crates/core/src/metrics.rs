//! Forecast accuracy metrics: MSE, MAE, SMAPE, MAPE, MASE and OWA.
//!
//! Percent metrics are on the 0–100 (SMAPE 0–200) scale. MASE defaults to
//! scaling by the seasonal differences of the target horizon itself; the M4
//! convention (in-sample seasonal differences) is available as an option.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(op: &'static str, y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::shape(op, &[y.len()], &[y_hat.len()]));
    }
    Ok(())
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len("mse", y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len("mae", y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// `200/H · Σ |Y−Ŷ| / (|Y|+|Ŷ|)`; a term with both values zero counts as 0.
pub fn smape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len("smape", y, y_hat)?;
    let s: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| {
            let den = a.abs() + b.abs();
            if den == 0.0 {
                0.0
            } else {
                (a - b).abs() / den
            }
        })
        .sum();
    Ok(200.0 * s / y.len() as f64)
}

/// `100/H · Σ |Y−Ŷ| / |Y|`.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len("mape", y, y_hat)?;
    if let Some(h) = y.iter().position(|&v| v == 0.0) {
        return Err(Error::UndefinedMetric(format!("mape: ground truth is zero at step {}", h + 1)));
    }
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| ((a - b) / a).abs()).sum();
    Ok(100.0 * s / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaseConvention {
    /// Scale by the mean seasonal difference within the forecast horizon.
    Horizon,
    /// Scale by the mean seasonal difference of the in-sample history.
    M4,
}

impl FromStr for MaseConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizon" => Ok(Self::Horizon),
            "m4" => Ok(Self::M4),
            other => Err(Error::Config(format!("unknown mase convention '{other}' (horizon, m4)"))),
        }
    }
}

fn seasonal_scale(series: &[f64], s: usize, what: &str) -> Result<f64> {
    if s == 0 || series.len() <= s {
        return Err(Error::UndefinedMetric(format!(
            "mase: {what} of length {} needs more than s = {s} steps",
            series.len()
        )));
    }
    let d: f64 = (s..series.len()).map(|j| (series[j] - series[j - s]).abs()).sum();
    let scale = d / (series.len() - s) as f64;
    if scale == 0.0 {
        return Err(Error::UndefinedMetric(format!("mase: {what} is constant at lag {s}")));
    }
    Ok(scale)
}

/// `mean|Y−Ŷ| / ((1/(H−s)) Σ_{j>s} |Y_j − Y_{j−s}|)`.
pub fn mase(y: &[f64], y_hat: &[f64], s: usize) -> Result<f64> {
    check_len("mase", y, y_hat)?;
    Ok(mae(y, y_hat)? / seasonal_scale(y, s, "target")?)
}

/// MASE scaled by the in-sample seasonal naive error of `history`.
pub fn mase_m4(y: &[f64], y_hat: &[f64], history: &[f64], s: usize) -> Result<f64> {
    check_len("mase", y, y_hat)?;
    Ok(mae(y, y_hat)? / seasonal_scale(history, s, "history")?)
}

/// `½ (SMAPE/SMAPE_naive + MASE/MASE_naive)`.
pub fn owa(smape: f64, mase: f64, smape_naive: f64, mase_naive: f64) -> Result<f64> {
    if smape_naive == 0.0 || mase_naive == 0.0 {
        return Err(Error::UndefinedMetric("owa: naive baseline has zero error".into()));
    }
    Ok(0.5 * (smape / smape_naive + mase / mase_naive))
}

/// `Ŷ_h = lookback[T_L − s + ((h−1) mod s)]` for `h = 1..=horizon`.
pub fn naive_seasonal_forecast(lookback: &[f64], s: usize, horizon: usize) -> Result<Vec<f64>> {
    if s == 0 || lookback.len() < s {
        return Err(Error::Data(format!(
            "seasonal naive needs a lookback of at least s = {s}, got {}",
            lookback.len()
        )));
    }
    let base = lookback.len() - s;
    Ok((0..horizon).map(|h| lookback[base + h % s]).collect())
}

/// Seasonal period for a frequency name; unknown names get 1.
pub fn seasonality(frequency: &str) -> usize {
    match frequency.to_ascii_lowercase().as_str() {
        "hourly" | "h" => 24,
        "daily" | "d" => 7,
        "weekly" | "w" => 52,
        "monthly" | "m" => 12,
        "quarterly" | "q" => 4,
        "yearly" | "y" => 1,
        "15min" | "15-min" | "15t" => 96,
        "10min" | "10-min" | "10t" => 144,
        _ => 1,
    }
}

/// One forecast to score: target, forecast, and the lookback it came from.
#[derive(Debug, Clone, Copy)]
pub struct SeriesForecast<'a> {
    pub y: &'a [f64],
    pub y_hat: &'a [f64],
    pub history: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetrics {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mape: Option<f64>,
    pub mase: Option<f64>,
}

pub fn series_metrics(f: SeriesForecast<'_>, s: usize, convention: MaseConvention) -> Result<SeriesMetrics> {
    let mase_v = match convention {
        MaseConvention::Horizon => mase(f.y, f.y_hat, s),
        MaseConvention::M4 => mase_m4(f.y, f.y_hat, f.history, s),
    };
    Ok(SeriesMetrics {
        mse: mse(f.y, f.y_hat)?,
        mae: mae(f.y, f.y_hat)?,
        smape: smape(f.y, f.y_hat)?,
        mape: undefined_to_none(mape(f.y, f.y_hat))?,
        mase: undefined_to_none(mase_v)?,
    })
}

fn undefined_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Aggregate over many series: the unweighted mean of each per-series
/// metric. MAPE/MASE are reported only when defined for every series, and
/// OWA only when a naive baseline was scored with defined MASE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizon: usize,
    pub seasonality: usize,
    pub mase_convention: MaseConvention,
    pub series: usize,
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mape: Option<f64>,
    pub mase: Option<f64>,
    pub owa: Option<f64>,
}

impl MetricReport {
    pub fn from_series(per_series: &[SeriesMetrics], horizon: usize, s: usize, convention: MaseConvention) -> Result<Self> {
        if per_series.is_empty() {
            return Err(Error::Data("no forecasts to score".into()));
        }
        let n = per_series.len() as f64;
        let mean = |f: fn(&SeriesMetrics) -> f64| per_series.iter().map(f).sum::<f64>() / n;
        let mean_opt = |f: fn(&SeriesMetrics) -> Option<f64>| -> Option<f64> {
            per_series.iter().map(f).sum::<Option<f64>>().map(|t| t / n)
        };
        Ok(Self {
            horizon,
            seasonality: s,
            mase_convention: convention,
            series: per_series.len(),
            mse: mean(|m| m.mse),
            mae: mean(|m| m.mae),
            smape: mean(|m| m.smape),
            mape: mean_opt(|m| m.mape),
            mase: mean_opt(|m| m.mase),
            owa: None,
        })
    }

    pub fn score(forecasts: &[SeriesForecast<'_>], horizon: usize, s: usize, convention: MaseConvention) -> Result<Self> {
        let per = forecasts
            .iter()
            .map(|f| series_metrics(*f, s, convention))
            .collect::<Result<Vec<_>>>()?;
        Self::from_series(&per, horizon, s, convention)
    }

    /// Fills `owa` against a naive report; left empty when undefined.
    pub fn with_owa(mut self, naive: &MetricReport) -> Self {
        self.owa = match (self.mase, naive.mase) {
            (Some(m), Some(mn)) => owa(self.smape, m, naive.smape, mn).ok(),
            _ => None,
        };
        self
    }
}

/// Fixed-width table with one row per labelled report.
pub fn format_table(rows: &[(String, &MetricReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<label_w$} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "run", "horizon", "MSE", "MAE", "SMAPE", "MAPE", "MASE", "OWA"
    );
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{:<label_w$} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>10} {:>10} {:>10}",
            label,
            r.horizon,
            r.mse,
            r.mae,
            r.smape,
            opt(r.mape),
            opt(r.mase),
            opt(r.owa)
        );
    }
    out
}
