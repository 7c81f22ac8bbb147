//! Run configuration: a flat `key = value` text format with `[section]`
//! headers. Keys are unique across sections, so any key can be overridden on
//! the command line by name.
//!
//! ```text
//! seed = 7
//! [data]
//! dataset = synthetic
//! synthetic_kind = sine_mixture
//! [model]
//! lookback = 64
//! horizon = 16
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::alignment::{render_prompt, DEFAULT_PROMPT_TEMPLATE};
use crate::backbone::{BackboneConfig, PretrainMode};
use crate::data::SynthKind;
use crate::dlora::RouterActivation;
use crate::error::{Error, Result};
use crate::metrics::MaseConvention;
use crate::model::{ModelConfig, Variant};
use crate::training::{LossKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthRecipe {
    pub kind: SynthKind,
    pub channels: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthRecipe),
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// CSV path; `None` selects the synthetic recipe.
    pub path: Option<PathBuf>,
    pub synthetic: SynthRecipe,
    pub date_column: Option<String>,
    /// Overrides the frequency recorded with the series.
    pub frequency: Option<String>,
    /// Train/validation/test fractions; test takes the remainder.
    pub split: (f64, f64),
    pub few_shot: f64,
    pub global_standardize: bool,
}

impl DataConfig {
    pub fn source(&self) -> DataSource {
        match &self.path {
            Some(p) => DataSource::Csv { path: p.clone() },
            None => DataSource::Synthetic(self.synthetic),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub mase_convention: MaseConvention,
    /// Seasonal period; 0 picks it from the series frequency.
    pub seasonality: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub prompt_template: String,
    /// Verbatim prompt; overrides the template when set.
    pub prompt_text: Option<String>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                path: None,
                synthetic: SynthRecipe {
                    kind: SynthKind::SineMixture,
                    channels: 3,
                    length: 2000,
                },
                date_column: None,
                frequency: None,
                split: (0.7, 0.1),
                few_shot: 1.0,
                global_standardize: false,
            },
            model: ModelConfig::desk(64, 16),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            prompt_text: None,
            train: TrainConfig::default(),
            eval: EvalConfig {
                mase_convention: MaseConvention::Horizon,
                seasonality: 0,
            },
        }
    }
}

struct Key {
    section: &'static str,
    name: &'static str,
}

const KEYS: &[Key] = &[
    Key { section: "", name: "seed" },
    Key { section: "data", name: "dataset" },
    Key { section: "data", name: "synthetic_kind" },
    Key { section: "data", name: "channels" },
    Key { section: "data", name: "length" },
    Key { section: "data", name: "date_column" },
    Key { section: "data", name: "frequency" },
    Key { section: "data", name: "split" },
    Key { section: "data", name: "few_shot" },
    Key { section: "data", name: "global_standardize" },
    Key { section: "model", name: "lookback" },
    Key { section: "model", name: "horizon" },
    Key { section: "model", name: "layers" },
    Key { section: "model", name: "d_model" },
    Key { section: "model", name: "heads" },
    Key { section: "model", name: "d_ffn" },
    Key { section: "model", name: "causal_mask" },
    Key { section: "model", name: "pretrain_mode" },
    Key { section: "model", name: "pretrain_steps" },
    Key { section: "model", name: "align_heads" },
    Key { section: "model", name: "rank_preset" },
    Key { section: "model", name: "rank" },
    Key { section: "model", name: "top_n" },
    Key { section: "model", name: "router_activation" },
    Key { section: "model", name: "prompt_template" },
    Key { section: "model", name: "prompt_text" },
    Key { section: "model", name: "prompt_vocab" },
    Key { section: "model", name: "prompt_max_tokens" },
    Key { section: "model", name: "instance_norm" },
    Key { section: "model", name: "variant" },
    Key { section: "train", name: "lr" },
    Key { section: "train", name: "weight_decay" },
    Key { section: "train", name: "batch_size" },
    Key { section: "train", name: "epochs" },
    Key { section: "train", name: "lambda_lb" },
    Key { section: "train", name: "loss" },
    Key { section: "train", name: "patience" },
    Key { section: "train", name: "clip_norm" },
    Key { section: "train", name: "stride" },
    Key { section: "eval", name: "mase_convention" },
    Key { section: "eval", name: "seasonality" },
];

pub fn valid_keys() -> Vec<&'static str> {
    KEYS.iter().map(|k| k.name).collect()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "dataset" => self.data.path = (value != "synthetic").then(|| value.into()),
            "synthetic_kind" => self.data.synthetic.kind = value.parse()?,
            "channels" => self.data.synthetic.channels = parse(key, value)?,
            "length" => self.data.synthetic.length = parse(key, value)?,
            "date_column" => self.data.date_column = (!value.is_empty()).then(|| value.to_string()),
            "frequency" => self.data.frequency = (!value.is_empty()).then(|| value.to_string()),
            "split" => {
                let parts: Vec<&str> = value.split('/').collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("split must be train/val/test fractions, got '{value}'")));
                }
                let f: Vec<f64> = parts.iter().map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                self.data.split = (f[0], f[1]);
            }
            "few_shot" => self.data.few_shot = parse(key, value)?,
            "global_standardize" => self.data.global_standardize = parse_bool(key, value)?,
            "lookback" => m.lookback = parse(key, value)?,
            "horizon" => m.horizon = parse(key, value)?,
            "layers" => m.backbone.layers = parse(key, value)?,
            "d_model" => m.backbone.d_model = parse(key, value)?,
            "heads" => m.backbone.heads = parse(key, value)?,
            "d_ffn" => m.backbone.d_ffn = parse(key, value)?,
            "causal_mask" => m.backbone.causal_mask = parse_bool(key, value)?,
            "pretrain_mode" => m.backbone.pretrain_mode = value.parse()?,
            "pretrain_steps" => m.backbone.pretrain_steps = parse(key, value)?,
            "align_heads" => m.align_heads = parse(key, value)?,
            "rank_preset" => {
                m.rank = match value {
                    "appendix" => 8,
                    "main_text" => 4,
                    _ => return Err(Error::Config(format!("unknown rank preset '{value}' (appendix, main_text)"))),
                }
            }
            "rank" => m.rank = parse(key, value)?,
            "top_n" => m.top_n = parse(key, value)?,
            "router_activation" => m.router_activation = value.parse::<RouterActivation>()?,
            "prompt_template" => self.prompt_template = value.to_string(),
            "prompt_text" => self.prompt_text = (!value.is_empty()).then(|| value.to_string()),
            "prompt_vocab" => m.prompt_vocab = parse(key, value)?,
            "prompt_max_tokens" => m.prompt_max_tokens = parse(key, value)?,
            "instance_norm" => m.instance_norm = parse_bool(key, value)?,
            "variant" => m.variant = value.parse::<Variant>()?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lambda_lb" => t.lambda_lb = parse(key, value)?,
            "loss" => t.loss = value.parse::<LossKind>()?,
            "patience" => t.patience = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "stride" => t.stride = parse(key, value)?,
            "mase_convention" => self.eval.mase_convention = value.parse()?,
            "seasonality" => self.eval.seasonality = parse(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}'; valid keys: {}",
                    valid_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config(format!("{}: line {}: {message}", origin.display(), i + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|k| k.section == name) {
                    return Err(err(format!("unknown section [{name}] (data, model, train, eval)")));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected 'key = value', got '{line}'")));
            };
            let key = key.trim();
            match KEYS.iter().find(|k| k.name == key) {
                None => {
                    return Err(Error::Config(format!(
                        "{}: line {}: unknown key '{key}'; valid keys: {}",
                        origin.display(),
                        i + 1,
                        valid_keys().join(", ")
                    )))
                }
                Some(k) if k.section != section => {
                    return Err(err(format!("key '{key}' belongs in section [{}]", k.section)));
                }
                Some(_) => {}
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: line {}: {m}", origin.display(), i + 1)),
                other => other,
            })?;
        }
        cfg.sync();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, path)
    }

    /// Applies `--key=value` / `--key value` style overrides given as pairs.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        self.sync();
        Ok(())
    }

    /// Propagates the shared seed into the model and training sections.
    pub fn sync(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let (tr, va) = self.data.split;
        if !(tr > 0.0 && va >= 0.0 && tr + va <= 1.0 + 1e-12) {
            return Err(Error::Config(format!("invalid split fractions {tr}/{va}")));
        }
        if !(self.data.few_shot > 0.0 && self.data.few_shot <= 1.0) {
            return Err(Error::Config(format!("few_shot {} outside (0, 1]", self.data.few_shot)));
        }
        if let DataSource::Synthetic(r) = self.data.source() {
            if r.channels == 0 || r.length == 0 {
                return Err(Error::Config("synthetic channels and length must be positive".into()));
            }
        }
        let m = &self.model;
        if m.lookback == 0 || m.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be positive".into()));
        }
        m.backbone.validate()?;
        if m.align_heads == 0 || m.backbone.d_model % m.align_heads != 0 {
            return Err(Error::Config(format!(
                "align_heads {} must divide d_model {}",
                m.align_heads, m.backbone.d_model
            )));
        }
        if !(1..=7).contains(&m.top_n) {
            return Err(Error::Config(format!("top_n {} outside 1..=7", m.top_n)));
        }
        self.train.validate()
    }

    /// Model configuration with the prompt rendered for a dataset.
    pub fn model_for(&self, dataset: &str, frequency: &str) -> ModelConfig {
        ModelConfig {
            prompt_text: self
                .prompt_text
                .clone()
                .unwrap_or_else(|| render_prompt(&self.prompt_template, dataset, self.model.horizon, frequency)),
            seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Canonical text form; `parse_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let d = &self.data;
        let m = &self.model;
        let b: &BackboneConfig = &m.backbone;
        let t = &self.train;
        let _ = writeln!(out, "seed = {}", self.seed);
        out.push_str("\n[data]\n");
        match &d.path {
            Some(p) => {
                let _ = writeln!(out, "dataset = {}", p.display());
            }
            None => out.push_str("dataset = synthetic\n"),
        }
        let r = d.synthetic;
        let _ = writeln!(out, "synthetic_kind = {}\nchannels = {}\nlength = {}", r.kind, r.channels, r.length);
        if let Some(c) = &d.date_column {
            let _ = writeln!(out, "date_column = {c}");
        }
        if let Some(f) = &d.frequency {
            let _ = writeln!(out, "frequency = {f}");
        }
        let _ = writeln!(
            out,
            "split = {:?}/{:?}/{:?}\nfew_shot = {:?}\nglobal_standardize = {}",
            d.split.0,
            d.split.1,
            1.0 - d.split.0 - d.split.1,
            d.few_shot,
            d.global_standardize
        );
        out.push_str("\n[model]\n");
        let _ = writeln!(
            out,
            "lookback = {}\nhorizon = {}\nlayers = {}\nd_model = {}\nheads = {}\nd_ffn = {}\ncausal_mask = {}\npretrain_mode = {}\npretrain_steps = {}",
            m.lookback, m.horizon, b.layers, b.d_model, b.heads, b.d_ffn, b.causal_mask, b.pretrain_mode, b.pretrain_steps
        );
        let _ = writeln!(
            out,
            "align_heads = {}\nrank = {}\ntop_n = {}\nrouter_activation = {}\nprompt_template = {}\nprompt_vocab = {}\nprompt_max_tokens = {}\ninstance_norm = {}\nvariant = {}",
            m.align_heads,
            m.rank,
            m.top_n,
            m.router_activation,
            self.prompt_template,
            m.prompt_vocab,
            m.prompt_max_tokens,
            m.instance_norm,
            m.variant
        );
        if let Some(p) = &self.prompt_text {
            let _ = writeln!(out, "prompt_text = {p}");
        }
        out.push_str("\n[train]\n");
        let _ = writeln!(
            out,
            "lr = {:?}\nweight_decay = {:?}\nbatch_size = {}\nepochs = {}\nlambda_lb = {:?}\nloss = {}\npatience = {}\nclip_norm = {:?}\nstride = {}",
            t.lr, t.weight_decay, t.batch_size, t.epochs, t.lambda_lb, t.loss, t.patience, t.clip_norm, t.stride
        );
        out.push_str("\n[eval]\n");
        let conv = match self.eval.mase_convention {
            MaseConvention::Horizon => "horizon",
            MaseConvention::M4 => "m4",
        };
        let _ = writeln!(out, "mase_convention = {conv}\nseasonality = {}", self.eval.seasonality);
        out
    }
}

impl PretrainMode {
    pub fn is_pretrained(self) -> bool {
        self == PretrainMode::PretrainThenFreeze
    }
}
