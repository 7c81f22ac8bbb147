//! Dynamic low-rank adaptation.
//!
//! Every backbone linear gets an adapter `(W^A, W^B)` whose contribution is
//! switched by a binary gate: `x·W + g·(x·W^A)·W^B + b`. A router per layer
//! looks at the last token of that layer's input, produces a softmax over the
//! seven module slots and switches on the `n` most probable ones.
//!
//! Gates are hard and carry no gradient. The router is trained only through
//! the load-balancing term, which couples the batch-mean probabilities `p̂`
//! with the (constant) argmax fractions `f`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::autograd::{softmax, Tensor, Var};
use crate::backbone::{Linear, Module, TransformerBlock, N_MOD};
use crate::error::{Error, Result};
use crate::params::{ForwardCtx, ParamId, ParamStore};
use crate::rng::{self, normal_tensor};

pub type Gates = [bool; N_MOD];

pub const LORA_A_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub module: Module,
    a: ParamId,
    b: ParamId,
    rank: usize,
}

impl LoraAdapter {
    pub fn new(store: &mut ParamStore, layer: usize, base: &Linear, rank: usize, seed: u64) -> Result<Self> {
        let (d1, d2) = (base.d_in(), base.d_out());
        if rank == 0 || 2 * rank > d1.min(d2) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must satisfy 1 <= r <= min({d1}, {d2})/2"
            )));
        }
        let prefix = format!("lora.{layer}.{}", base.module.name());
        let mut r = rng::stream(seed, &prefix);
        let a = normal_tensor(&[d1, rank], LORA_A_STD, &mut r).with_requires_grad(true);
        let b = Tensor::zeros(&[rank, d2]).with_requires_grad(true);
        Ok(Self {
            module: base.module,
            a: store.add(format!("{prefix}.a"), a)?,
            b: store.add(format!("{prefix}.b"), b)?,
            rank,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn a(&self) -> ParamId {
        self.a
    }

    pub fn b(&self) -> ParamId {
        self.b
    }

    fn delta(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let (a, b) = (ctx.param(self.a), ctx.param(self.b));
        let xa = ctx.tape.matmul(x, a)?;
        ctx.tape.matmul(xa, b)
    }
}

/// The seven adapters of one block, indexed by module.
#[derive(Debug, Clone)]
pub struct LayerAdapters {
    adapters: Vec<LoraAdapter>,
}

impl LayerAdapters {
    pub fn new(store: &mut ParamStore, layer: usize, block: &TransformerBlock, rank: usize, seed: u64) -> Result<Self> {
        let adapters = block
            .linears()
            .iter()
            .map(|lin| LoraAdapter::new(store, layer, lin, rank, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { adapters })
    }

    pub fn from_adapters(adapters: Vec<LoraAdapter>) -> Result<Self> {
        let names: Vec<Module> = adapters.iter().map(|a| a.module).collect();
        if names != Module::ALL {
            return Err(Error::Config(format!(
                "adapters must cover Q,K,V,O,G,U,D in order, got {names:?}"
            )));
        }
        Ok(Self { adapters })
    }

    pub fn get(&self, m: Module) -> &LoraAdapter {
        &self.adapters[m.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.iter()
    }

    pub(crate) fn check_matches(&self, block: &TransformerBlock) -> Result<()> {
        for (a, l) in self.adapters.iter().zip(block.linears()) {
            if a.module != l.module {
                return Err(Error::Config(format!(
                    "adapter {} attached to module {}",
                    a.module, l.module
                )));
            }
        }
        Ok(())
    }
}

/// Gated linear with a single gate for every row.
pub fn apply(ctx: &mut ForwardCtx<'_>, x: Var, base: &Linear, adapter: &LoraAdapter, gate: bool) -> Result<Var> {
    let rows = ctx.tape.shape(x)[0];
    apply_masked(ctx, x, base, adapter, &[gate], rows)
}

/// Gated linear where sample `b` (rows `[b·rows_per_sample, ..)`) uses
/// `gates[b]`. The low-rank path runs as two thin products and is skipped
/// entirely when every gate is off.
pub fn apply_masked(
    ctx: &mut ForwardCtx<'_>,
    x: Var,
    base: &Linear,
    adapter: &LoraAdapter,
    gates: &[bool],
    rows_per_sample: usize,
) -> Result<Var> {
    if adapter.module != base.module {
        return Err(Error::Config(format!(
            "adapter {} attached to module {}",
            adapter.module, base.module
        )));
    }
    let rows = ctx.tape.shape(x)[0];
    if gates.len() * rows_per_sample != rows {
        return Err(Error::Contract(format!(
            "{} gates × {rows_per_sample} rows do not cover {rows} rows",
            gates.len()
        )));
    }
    let y = base.forward(ctx, x)?;
    if gates.iter().all(|g| !g) {
        return Ok(y);
    }
    let delta = adapter.delta(ctx, x)?;
    let delta = if gates.iter().all(|&g| g) {
        delta
    } else {
        let mask: Vec<f64> = gates
            .iter()
            .flat_map(|&g| std::iter::repeat(if g { 1.0 } else { 0.0 }).take(rows_per_sample))
            .collect();
        let m = ctx.constant(Tensor::new(vec![rows, 1], mask)?);
        ctx.tape.mul(delta, m)?
    };
    ctx.tape.add(y, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterActivation {
    Tanh,
    Identity,
}

impl RouterActivation {
    fn eval(self, v: f64) -> f64 {
        match self {
            Self::Tanh => v.tanh(),
            Self::Identity => v,
        }
    }
}

impl FromStr for RouterActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "identity" | "none" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown router activation '{other}' (tanh, identity)"))),
        }
    }
}

impl fmt::Display for RouterActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterDecision {
    pub layer: usize,
    pub probs: Vec<f64>,
    pub gates: Gates,
}

impl RouterDecision {
    /// Decision that switches every adapter on, for static LoRA.
    pub fn all_on(layer: usize) -> Self {
        Self {
            layer,
            probs: vec![1.0 / N_MOD as f64; N_MOD],
            gates: [true; N_MOD],
        }
    }

    pub fn active(&self) -> usize {
        self.gates.iter().filter(|&&g| g).count()
    }

    fn gate_bits(&self) -> u8 {
        self.gates
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &g)| acc | (u8::from(g) << i))
    }
}

/// Ones on the `n` largest probabilities; ties go to the lower slot index.
pub fn top_n_gates(probs: &[f64], n: usize) -> Gates {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
    let mut gates = [false; N_MOD];
    for &i in order.iter().take(n) {
        gates[i] = true;
    }
    gates
}

/// Last token row of an `N×d_m` hidden state.
pub fn pool(h: &Tensor) -> Vec<f64> {
    h.row_slice(h.rows() - 1).to_vec()
}

/// Last row of every sample in a stack of `rows_per_sample`-row samples,
/// gathered as a `B×d_m` matrix on the tape.
pub fn pool_var(ctx: &mut ForwardCtx<'_>, h: Var, rows_per_sample: usize) -> Result<Var> {
    let rows = ctx.tape.shape(h)[0];
    let samples = rows / rows_per_sample;
    if samples == 1 {
        return ctx.tape.slice(h, 0, rows - 1, rows);
    }
    let mut sel = Tensor::zeros(&[samples, rows]);
    for b in 0..samples {
        sel.data_mut()[b * rows + b * rows_per_sample + rows_per_sample - 1] = 1.0;
    }
    let s = ctx.constant(sel);
    ctx.tape.matmul(s, h)
}

/// `Top_n(softmax(act(h)·W_r), n)` on plain values.
pub fn route(h_pooled: &[f64], w_r: &Tensor, activation: RouterActivation, n: usize, layer: usize) -> RouterDecision {
    let logits: Vec<f64> = (0..N_MOD)
        .map(|j| {
            h_pooled
                .iter()
                .enumerate()
                .map(|(i, &v)| activation.eval(v) * w_r.at(i, j))
                .sum()
        })
        .collect();
    let probs = softmax(&logits);
    let gates = top_n_gates(&probs, n);
    RouterDecision { layer, probs, gates }
}

#[derive(Debug, Clone)]
pub struct LoraRouter {
    weight: ParamId,
    top_n: usize,
    activation: RouterActivation,
    layer: usize,
}

impl LoraRouter {
    /// `W_r` starts at zero, so the first decisions are uniform and tie-broken.
    pub fn new(store: &mut ParamStore, layer: usize, d_model: usize, top_n: usize, activation: RouterActivation) -> Result<Self> {
        if !(1..=N_MOD).contains(&top_n) {
            return Err(Error::Config(format!("router n = {top_n} outside 1..={N_MOD}")));
        }
        let w = Tensor::zeros(&[d_model, N_MOD]).with_requires_grad(true);
        Ok(Self {
            weight: store.add(format!("router.{layer}.weight"), w)?,
            top_n,
            activation,
            layer,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn top_n(&self) -> usize {
        self.top_n
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// `B×7` routing probabilities for `B×d_m` pooled vectors, on the tape.
    pub fn probs(&self, ctx: &mut ForwardCtx<'_>, pooled: Var) -> Result<Var> {
        let a = match self.activation {
            RouterActivation::Tanh => ctx.tape.tanh(pooled),
            RouterActivation::Identity => pooled,
        };
        let w = ctx.param(self.weight);
        let logits = ctx.tape.matmul(a, w)?;
        ctx.tape.softmax(logits, 1)
    }

    pub fn decide(&self, probs: &Tensor) -> Vec<RouterDecision> {
        (0..probs.rows())
            .map(|b| {
                let p = probs.row_slice(b).to_vec();
                let gates = top_n_gates(&p, self.top_n);
                RouterDecision {
                    layer: self.layer,
                    probs: p,
                    gates,
                }
            })
            .collect()
    }
}

/// Routing counts for one layer. `f` and `p̂` are derived from these sums, so
/// statistics from several batches merge exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerRouting {
    pub samples: usize,
    pub argmax_counts: [usize; N_MOD],
    pub prob_sums: [f64; N_MOD],
    pub active_counts: [usize; N_MOD],
    /// Occurrences of each distinct gate set (bit `i` = slot `i` on).
    pub selections: BTreeMap<u8, usize>,
}

impl LayerRouting {
    /// `f_i`: fraction of samples whose argmax slot is `i`.
    pub fn f(&self) -> [f64; N_MOD] {
        self.argmax_counts.map(|c| c as f64 / self.samples.max(1) as f64)
    }

    /// `p̂_i`: batch-mean probability of slot `i`.
    pub fn p_hat(&self) -> [f64; N_MOD] {
        self.prob_sums.map(|s| s / self.samples.max(1) as f64)
    }

    /// Share of all activations that went to each module; sums to one.
    pub fn activation_frequency(&self) -> [f64; N_MOD] {
        let total: usize = self.active_counts.iter().sum();
        self.active_counts.map(|c| c as f64 / total.max(1) as f64)
    }

    pub fn entropy_bits(&self) -> f64 {
        entropy_bits(&self.p_hat())
    }

    /// Entropy of the distribution over chosen gate sets; zero when every
    /// sample selects the same modules.
    pub fn selection_entropy_bits(&self) -> f64 {
        let probs: Vec<f64> = self
            .selections
            .values()
            .map(|&c| c as f64 / self.samples.max(1) as f64)
            .collect();
        entropy_bits(&probs)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingStats {
    pub layers: Vec<LayerRouting>,
}

impl RoutingStats {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        if self.layers.is_empty() {
            self.layers = other.layers.clone();
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.samples += b.samples;
            for i in 0..N_MOD {
                a.argmax_counts[i] += b.argmax_counts[i];
                a.prob_sums[i] += b.prob_sums[i];
                a.active_counts[i] += b.active_counts[i];
            }
            for (k, v) in &b.selections {
                *a.selections.entry(*k).or_default() += v;
            }
        }
    }

    pub fn entropy_bits(&self) -> Vec<f64> {
        self.layers.iter().map(LayerRouting::entropy_bits).collect()
    }

    pub fn selection_entropy_bits(&self) -> Vec<f64> {
        self.layers.iter().map(LayerRouting::selection_entropy_bits).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Layer {
            layer: usize,
            samples: usize,
            activation_frequency: BTreeMap<&'static str, f64>,
            argmax_fraction: BTreeMap<&'static str, f64>,
            mean_probability: BTreeMap<&'static str, f64>,
            entropy_bits: f64,
            selection_entropy_bits: f64,
        }
        let by_module = |v: [f64; N_MOD]| -> BTreeMap<&'static str, f64> {
            Module::ALL.iter().map(|m| (m.name(), v[m.index()])).collect()
        };
        let layers: Vec<Layer> = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, s)| Layer {
                layer: l,
                samples: s.samples,
                activation_frequency: by_module(s.activation_frequency()),
                argmax_fraction: by_module(s.f()),
                mean_probability: by_module(s.p_hat()),
                entropy_bits: s.entropy_bits(),
                selection_entropy_bits: s.selection_entropy_bits(),
            })
            .collect();
        serde_json::json!({ "modules": Module::ALL.map(Module::name), "layers": layers })
    }
}

/// Statistics of `decisions[sample][layer]`.
pub fn accumulate_stats(decisions: &[Vec<RouterDecision>]) -> Result<RoutingStats> {
    let layers = decisions.first().map_or(0, Vec::len);
    if decisions.iter().any(|d| d.len() != layers) {
        return Err(Error::Contract("every sample needs one decision per layer".into()));
    }
    let mut stats = RoutingStats {
        layers: vec![LayerRouting::default(); layers],
    };
    for sample in decisions {
        for (l, d) in sample.iter().enumerate() {
            let s = &mut stats.layers[l];
            s.samples += 1;
            s.argmax_counts[argmax(&d.probs)] += 1;
            for i in 0..N_MOD {
                s.prob_sums[i] += d.probs[i];
                s.active_counts[i] += usize::from(d.gates[i]);
            }
            *s.selections.entry(d.gate_bits()).or_default() += 1;
        }
    }
    Ok(stats)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// `N_mod · Σ_l Σ_i f_i^l · p̂_i^l`.
pub fn load_balance_loss(stats: &RoutingStats) -> f64 {
    let per_layer: f64 = stats
        .layers
        .iter()
        .map(|s| s.f().iter().zip(s.p_hat()).map(|(f, p)| f * p).sum::<f64>())
        .sum();
    N_MOD as f64 * per_layer
}

/// Differentiable load-balancing loss. `probs[l]` is the `B×7` probability
/// matrix of layer `l`; `f` comes from `stats` and is a constant.
pub fn load_balance_loss_var(ctx: &mut ForwardCtx<'_>, probs: &[Var], stats: &RoutingStats) -> Result<Option<Var>> {
    if probs.len() != stats.layers.len() {
        return Err(Error::Contract(format!(
            "{} probability layers for {} stats layers",
            probs.len(),
            stats.layers.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&p, s) in probs.iter().zip(&stats.layers) {
        let b = ctx.tape.shape(p)[0] as f64;
        let col = ctx.tape.sum_axis(p, 0)?;
        let p_hat = ctx.tape.scale(col, 1.0 / b);
        let f = ctx.constant(Tensor::new(vec![1, N_MOD], s.f().to_vec())?);
        let fp = ctx.tape.mul(p_hat, f)?;
        let term = ctx.tape.sum(fp);
        total = Some(match total {
            None => term,
            Some(t) => ctx.tape.add(t, term)?,
        });
    }
    Ok(total.map(|t| ctx.tape.scale(t, N_MOD as f64)))
}

/// Shannon entropy in bits; zero-probability terms contribute nothing.
pub fn entropy_bits(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * (1.0 / v).log2()).sum()
}
