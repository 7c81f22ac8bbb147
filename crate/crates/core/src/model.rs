//! The full forecaster: instance norm → channel embedding → prompt alignment
//! → adapted frozen backbone → linear head → denormalization.
//!
//! A forward takes a `B×N×T_L` batch and runs it as one stacked `B·N`-row
//! pass; routing decisions are still made per sample.

use std::fmt;
use std::str::FromStr;

use crate::alignment::{build_prompt, CrossAttention, PromptEmbedding};
use crate::autograd::{Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::dlora::{self, LayerAdapters, LoraRouter, RouterActivation, RouterDecision, RoutingStats};
use crate::embedding::{NormStats, OutputHead, TsEmbedder};
use crate::error::{Error, Result};
use crate::params::{ForwardCtx, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoAlign,
    PrefixPrompt,
    StaticLora,
    Frozen,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAlign,
        Variant::PrefixPrompt,
        Variant::StaticLora,
        Variant::Frozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoAlign => "v1_no_align",
            Self::PrefixPrompt => "v2_prefix_prompt",
            Self::StaticLora => "v3_static_lora",
            Self::Frozen => "v4_frozen",
        }
    }

    pub fn uses_alignment(self) -> bool {
        self != Self::NoAlign
    }

    pub fn has_adapters(self) -> bool {
        self != Self::Frozen
    }

    pub fn has_routers(self) -> bool {
        matches!(self, Self::Full | Self::NoAlign | Self::PrefixPrompt)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation variant '{s}' (full, v1_no_align, v2_prefix_prompt, v3_static_lora, v4_frozen)"
                ))
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub backbone: BackboneConfig,
    pub align_heads: usize,
    pub rank: usize,
    pub top_n: usize,
    pub router_activation: RouterActivation,
    pub prompt_text: String,
    pub prompt_vocab: usize,
    pub prompt_max_tokens: usize,
    pub instance_norm: bool,
    pub variant: Variant,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk(lookback: usize, horizon: usize) -> Self {
        Self {
            lookback,
            horizon,
            backbone: BackboneConfig::desk(),
            align_heads: 8,
            rank: 8,
            top_n: 4,
            router_activation: RouterActivation::Tanh,
            prompt_text: "forecast series".into(),
            prompt_vocab: 256,
            prompt_max_tokens: 16,
            instance_norm: true,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

/// Scalar counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamReport {
    pub backbone: usize,
    pub adapters: usize,
    pub routers: usize,
    pub embedder: usize,
    pub alignment: usize,
    pub head: usize,
    pub trainable: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

pub struct ForwardOutput {
    /// `B·N×T_P` forecasts in the original scale, sample-major.
    pub forecast: Var,
    /// Per-layer `B×7` router probabilities (routed variants only).
    pub probs: Vec<Var>,
    /// `decisions[sample][layer]`; empty for the frozen variant.
    pub decisions: Vec<Vec<RouterDecision>>,
    pub stats: RoutingStats,
    /// Backbone rows per sample (`N`, or `P+N` with a prefix prompt).
    pub backbone_rows: usize,
    /// Rows handed to the head per sample.
    pub head_rows: usize,
}

#[derive(Debug, Clone)]
pub struct Forecaster {
    config: ModelConfig,
    store: ParamStore,
    embedder: TsEmbedder,
    prompt: Option<PromptEmbedding>,
    align: Option<CrossAttention>,
    backbone: Backbone,
    adapters: Vec<LayerAdapters>,
    routers: Vec<LoraRouter>,
    head: OutputHead,
}

impl Forecaster {
    /// Builds every component from `config.seed`. Each parameter draws from
    /// its own named stream, so shared components initialize identically
    /// across variants.
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.lookback == 0 || config.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be positive".into()));
        }
        let seed = config.seed;
        let d = config.backbone.d_model;
        let mut store = ParamStore::new();
        let embedder = TsEmbedder::new(&mut store, config.lookback, d, seed)?;
        let variant = config.variant;
        let (prompt, align) = if variant.uses_alignment() {
            let tokens = build_prompt(&config.prompt_text, config.prompt_max_tokens, config.prompt_vocab)?;
            let pe = PromptEmbedding::new(&mut store, tokens, config.prompt_vocab, d, seed)?;
            let ca = CrossAttention::new(&mut store, d, config.align_heads, seed)?;
            (Some(pe), Some(ca))
        } else {
            (None, None)
        };
        let backbone = Backbone::new(&mut store, config.backbone.clone(), seed)?;
        let adapters = if variant.has_adapters() {
            backbone
                .blocks()
                .iter()
                .enumerate()
                .map(|(l, b)| LayerAdapters::new(&mut store, l, b, config.rank, seed))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let routers = if variant.has_routers() {
            (0..backbone.layers())
                .map(|l| LoraRouter::new(&mut store, l, d, config.top_n, config.router_activation))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let head = OutputHead::new(&mut store, d, config.horizon, seed)?;
        Ok(Self {
            config,
            store,
            embedder,
            prompt,
            align,
            backbone,
            adapters,
            routers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn adapters(&self) -> &[LayerAdapters] {
        &self.adapters
    }

    pub fn routers(&self) -> &[LoraRouter] {
        &self.routers
    }

    pub fn param_report(&self) -> ParamReport {
        let s = &self.store;
        ParamReport {
            backbone: s.scalars_with_prefix("backbone."),
            adapters: s.scalars_with_prefix("lora."),
            routers: s.scalars_with_prefix("router."),
            embedder: s.scalars_with_prefix("embed."),
            alignment: s.scalars_with_prefix("align."),
            head: s.scalars_with_prefix("head."),
            trainable: s.trainable_scalars(),
            total: s.total_scalars(),
        }
    }

    /// Records a forward of a `B×N×T_L` batch on `ctx`.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: &Tensor) -> Result<ForwardOutput> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.config.lookback || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::Contract(format!(
                "forward expects B×N×{} input, got {:?}",
                self.config.lookback, shape
            )));
        }
        let (b, n, tl) = (shape[0], shape[1], shape[2]);
        let stacked = Tensor::new(vec![b * n, tl], x.data().to_vec())?;
        let (input, stats) = if self.config.instance_norm {
            let s = NormStats::from_lookback(&stacked);
            (s.normalize(&stacked), Some(s))
        } else {
            (stacked, None)
        };
        let xv = ctx.constant(input);
        let mut h = self.embedder.embed(ctx, xv)?;

        let prompt = match &self.prompt {
            Some(p) => Some(p.embed(ctx)?),
            None => None,
        };
        if let (Some(align), Some(p)) = (&self.align, prompt) {
            h = align.align(ctx, h, p)?.hidden;
        }

        let prefix = self.config.variant == Variant::PrefixPrompt;
        let p_len = self.prompt.as_ref().map_or(0, PromptEmbedding::len);
        let rows_per = if prefix { p_len + n } else { n };
        if prefix {
            let p = prompt.expect("prefix variant has a prompt");
            let mut parts = Vec::with_capacity(2 * b);
            for s in 0..b {
                parts.push(p);
                parts.push(ctx.tape.slice(h, 0, s * n, (s + 1) * n)?);
            }
            h = ctx.tape.concat(&parts, 0)?;
        }

        let mut probs = Vec::new();
        let mut per_layer: Vec<Vec<RouterDecision>> = Vec::new();
        let variant = self.config.variant;
        let routers = &self.routers;
        let mut gate_fn = |ctx: &mut ForwardCtx<'_>, l: usize, hl: Var| -> Result<Vec<dlora::Gates>> {
            let decisions = if variant.has_routers() {
                let pooled = dlora::pool_var(ctx, hl, rows_per)?;
                let p = routers[l].probs(ctx, pooled)?;
                probs.push(p);
                routers[l].decide(ctx.tape.value(p))
            } else {
                vec![RouterDecision::all_on(l); b]
            };
            let gates = decisions.iter().map(|d| d.gates).collect();
            per_layer.push(decisions);
            Ok(gates)
        };
        let adapters = if self.adapters.is_empty() {
            None
        } else {
            Some(self.adapters.as_slice())
        };
        let out = self.backbone.forward(ctx, h, adapters, rows_per, &mut gate_fn)?;
        let mut hl = out.hidden;

        if prefix {
            let parts = (0..b)
                .map(|s| ctx.tape.slice(hl, 0, s * rows_per + p_len, (s + 1) * rows_per))
                .collect::<Result<Vec<_>>>()?;
            hl = if parts.len() == 1 { parts[0] } else { ctx.tape.concat(&parts, 0)? };
        }

        let mut y = self.head.project(ctx, hl)?;
        if let Some(s) = &stats {
            y = s.denormalize_var(ctx, y)?;
        }

        let decisions: Vec<Vec<RouterDecision>> = if per_layer.is_empty() {
            Vec::new()
        } else {
            (0..b).map(|s| per_layer.iter().map(|l| l[s].clone()).collect()).collect()
        };
        let stats = if decisions.is_empty() {
            RoutingStats::default()
        } else {
            dlora::accumulate_stats(&decisions)?
        };
        Ok(ForwardOutput {
            forecast: y,
            probs,
            decisions,
            stats,
            backbone_rows: rows_per,
            head_rows: n,
        })
    }

    /// Forecasts for a `B×N×T_L` batch as a `B×N×T_P` tensor, with routing
    /// statistics.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, RoutingStats)> {
        let mut ctx = ForwardCtx::new(&self.store);
        let out = self.forward(&mut ctx, x)?;
        let (b, n) = (x.shape()[0], x.shape()[1]);
        let y = ctx.tape.value(out.forecast).clone().reshape(vec![b, n, self.config.horizon])?;
        Ok((y, out.stats))
    }
}
