//! Deterministic synthetic fixtures.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MultivariateSeries;
use crate::error::{Error, Result};
use crate::rng::{self, standard_normal, uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    SineMixture,
    Ar2,
    TrendSeasonal,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_mixture" | "sine" => Ok(Self::SineMixture),
            "ar2" => Ok(Self::Ar2),
            "trend_seasonal" | "trend" => Ok(Self::TrendSeasonal),
            other => Err(Error::Config(format!(
                "unknown synthetic kind '{other}' (sine_mixture, ar2, trend_seasonal)"
            ))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SineMixture => "sine_mixture",
            Self::Ar2 => "ar2",
            Self::TrendSeasonal => "trend_seasonal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub channels: usize,
    pub length: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise (the innovation for AR(2)).
    pub noise_std: f64,
    /// Sinusoids per channel for `SineMixture`.
    pub components: usize,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, channels: usize, length: usize, seed: u64) -> Self {
        let noise_std = match kind {
            SynthKind::SineMixture => 0.0,
            SynthKind::Ar2 => 1.0,
            SynthKind::TrendSeasonal => 0.1,
        };
        Self {
            kind,
            channels,
            length,
            seed,
            noise_std,
            components: 3,
        }
    }
}

/// Everything drawn while generating, written next to the data so a
/// fixture can be regenerated and inspected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub spec: SynthSpec,
    /// Sine mixture: shared frequencies (cycles per step) and amplitudes, and
    /// per-channel phases `phases[channel][component]`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub frequencies: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub amplitudes: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub phases: Vec<Vec<f64>>,
    /// AR(2): per-channel `(phi1, phi2)`; both characteristic roots have
    /// modulus `sqrt(-phi2) < 1`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ar_coefficients: Vec<(f64, f64)>,
    /// Trend + seasonal: per-channel `(level, slope, amplitude, period)`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trend_seasonal: Vec<(f64, f64, f64, f64)>,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(MultivariateSeries, SynthParams)> {
    if spec.channels == 0 || spec.length == 0 {
        return Err(Error::Config("synthetic series needs N >= 1 and T >= 1".into()));
    }
    let (n, t_len) = (spec.channels, spec.length);
    let mut r = rng::stream(spec.seed, "synth.params");
    let mut noise = rng::stream(spec.seed, "synth.noise");
    let mut params = SynthParams {
        spec: spec.clone(),
        frequencies: Vec::new(),
        amplitudes: Vec::new(),
        phases: Vec::new(),
        ar_coefficients: Vec::new(),
        trend_seasonal: Vec::new(),
    };
    let mut values = vec![0.0; n * t_len];
    match spec.kind {
        SynthKind::SineMixture => {
            let k = spec.components.max(1);
            params.frequencies = (0..k).map(|_| 1.0 / uniform(8.0, 48.0, &mut r)).collect();
            params.amplitudes = (0..k).map(|_| uniform(0.5, 1.5, &mut r)).collect();
            params.phases = (0..n)
                .map(|_| (0..k).map(|_| uniform(0.0, TAU, &mut r)).collect())
                .collect();
            for t in 0..t_len {
                for c in 0..n {
                    let mut v = 0.0;
                    for j in 0..k {
                        v += params.amplitudes[j]
                            * (TAU * params.frequencies[j] * t as f64 + params.phases[c][j]).sin();
                    }
                    values[t * n + c] = v + spec.noise_std * standard_normal(&mut noise);
                }
            }
        }
        SynthKind::Ar2 => {
            params.ar_coefficients = (0..n)
                .map(|_| {
                    let radius = uniform(0.8, 0.95, &mut r);
                    let angle = TAU / uniform(8.0, 48.0, &mut r);
                    (2.0 * radius * angle.cos(), -radius * radius)
                })
                .collect();
            for c in 0..n {
                let (p1, p2) = params.ar_coefficients[c];
                let (mut prev1, mut prev2) = (0.0, 0.0);
                for t in 0..t_len {
                    let v = p1 * prev1 + p2 * prev2 + spec.noise_std * standard_normal(&mut noise);
                    values[t * n + c] = v;
                    prev2 = prev1;
                    prev1 = v;
                }
            }
        }
        SynthKind::TrendSeasonal => {
            const PERIODS: [f64; 3] = [24.0, 12.0, 7.0];
            params.trend_seasonal = (0..n)
                .map(|i| {
                    (
                        uniform(-1.0, 1.0, &mut r),
                        uniform(-2e-3, 2e-3, &mut r),
                        uniform(0.5, 1.5, &mut r),
                        PERIODS[i % PERIODS.len()],
                    )
                })
                .collect();
            for t in 0..t_len {
                for c in 0..n {
                    let (level, slope, amp, period) = params.trend_seasonal[c];
                    let tf = t as f64;
                    values[t * n + c] = level
                        + slope * tf
                        + amp * (TAU * tf / period).sin()
                        + spec.noise_std * standard_normal(&mut noise);
                }
            }
        }
    }
    let names = (0..n).map(|c| format!("ch{c}")).collect();
    let series = MultivariateSeries::new(spec.kind.to_string(), values, n, "hourly", names)?;
    Ok((series, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        for kind in [SynthKind::SineMixture, SynthKind::Ar2, SynthKind::TrendSeasonal] {
            let spec = SynthSpec::new(kind, 3, 500, 11);
            let (a, pa) = synth_generate(&spec).unwrap();
            let (b, pb) = synth_generate(&spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(pa, pb);
            let (c, _) = synth_generate(&SynthSpec { seed: 12, ..spec }).unwrap();
            assert_ne!(a.values(), c.values());
        }
    }

    #[test]
    fn noiseless_single_sine_is_exact() {
        let spec = SynthSpec {
            components: 1,
            ..SynthSpec::new(SynthKind::SineMixture, 1, 200, 3)
        };
        let (s, p) = synth_generate(&spec).unwrap();
        for t in 0..200 {
            let expect = p.amplitudes[0] * (TAU * p.frequencies[0] * t as f64 + p.phases[0][0]).sin();
            assert_eq!(s.value(t, 0), expect);
        }
    }

    #[test]
    fn ar2_is_stable_over_long_horizons() {
        let spec = SynthSpec::new(SynthKind::Ar2, 4, 10_000, 5);
        let (s, p) = synth_generate(&spec).unwrap();
        for &(p1, p2) in &p.ar_coefficients {
            // complex roots with modulus sqrt(-p2)
            assert!(p1 * p1 + 4.0 * p2 < 0.0);
            assert!((-p2).sqrt() < 1.0);
        }
        let max = s.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 100.0, "max |x| = {max}");
    }

    #[test]
    fn params_serialize_to_json() {
        let (_, p) = synth_generate(&SynthSpec::new(SynthKind::SineMixture, 2, 10, 1)).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let back: SynthParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        assert!(text.contains("\"kind\":\"sine_mixture\""));
    }
}
