//! Series ingestion, chronological splits, sliding windows and synthetic
//! fixtures.

mod csv_io;
mod split;
mod synth;
mod window;

pub use csv_io::{load_csv, sniff_date_column, write_csv, write_matrix_csv};
pub use split::{chronological_split, few_shot_subset, SeriesView, SplitSpec, Splits};
pub use synth::{synth_generate, SynthKind, SynthParams, SynthSpec};
pub use window::{make_windows, Window, WindowBatch, WindowSet};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// A `T×N` matrix of observations: `T` time steps of `N` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    name: String,
    values: Vec<f64>,
    steps: usize,
    channels: usize,
    frequency: String,
    channel_names: Vec<String>,
}

impl MultivariateSeries {
    /// `values` is time-major: row `t` holds the `N` channel readings at step `t`.
    pub fn new(
        name: impl Into<String>,
        values: Vec<f64>,
        channels: usize,
        frequency: impl Into<String>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Data("series needs at least one channel".into()));
        }
        if values.len() % channels != 0 {
            return Err(Error::Data(format!(
                "{} values do not divide into {channels} channels",
                values.len()
            )));
        }
        if channel_names.len() != channels {
            return Err(Error::Data(format!(
                "{} channel names for {channels} channels",
                channel_names.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at step {}, channel {}",
                pos / channels,
                pos % channels
            )));
        }
        Ok(Self {
            name: name.into(),
            steps: values.len() / channels,
            values,
            channels,
            frequency: frequency.into(),
            channel_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn frequency(&self) -> &str {
        &self.frequency
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    /// Number of channels `N`.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn value(&self, step: usize, channel: usize) -> f64 {
        self.values[step * self.channels + channel]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Channel-major `N×len` block of steps `[start, start+len)`.
    pub fn block(&self, start: usize, len: usize) -> Tensor {
        let n = self.channels;
        let mut data = vec![0.0; n * len];
        for t in 0..len {
            for c in 0..n {
                data[c * len + t] = self.value(start + t, c);
            }
        }
        Tensor::new(vec![n, len], data).expect("block shape")
    }

    /// Fails unless at least one `(lookback, horizon)` window fits.
    pub fn ensure_windowable(&self, lookback: usize, horizon: usize) -> Result<()> {
        if self.steps < lookback + horizon {
            return Err(Error::Data(format!(
                "series '{}' has {} steps; one window needs {}",
                self.name,
                self.steps,
                lookback + horizon
            )));
        }
        Ok(())
    }

    /// Per-channel z-scoring with mean/std estimated on the first `fit_len`
    /// steps. Returns the transformed series and the `(mean, std)` per channel.
    pub fn standardized(&self, fit_len: usize) -> Result<(Self, Vec<(f64, f64)>)> {
        if fit_len == 0 || fit_len > self.steps {
            return Err(Error::Data(format!(
                "cannot fit standardization on {fit_len} of {} steps",
                self.steps
            )));
        }
        let stats: Vec<(f64, f64)> = (0..self.channels)
            .map(|c| {
                let col: Vec<f64> = (0..fit_len).map(|t| self.value(t, c)).collect();
                let mean = col.iter().sum::<f64>() / fit_len as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fit_len as f64;
                (mean, var.sqrt().max(1e-8))
            })
            .collect();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (m, s) = stats[i % self.channels];
                (v - m) / s
            })
            .collect();
        let mut out = self.clone();
        out.values = values;
        Ok((out, stats))
    }
}
