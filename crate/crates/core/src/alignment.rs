//! Cross-attention from time-series tokens (queries) onto prompt token
//! embeddings (keys and values), added back residually.
//!
//! The prompt is only a key/value source here; it never enters the decoder
//! stack.

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ForwardCtx, ParamId, ParamStore};
use crate::rng::{self, fnv1a64, normal_tensor};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "forecast {dataset} horizon {horizon} frequency {frequency}";

/// Fills `{dataset}`, `{horizon}` and `{frequency}` in a prompt template.
pub fn render_prompt(template: &str, dataset: &str, horizon: usize, frequency: &str) -> String {
    template
        .replace("{dataset}", dataset)
        .replace("{horizon}", &horizon.to_string())
        .replace("{frequency}", frequency)
}

/// Hash-bucket tokenization of a prompt string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTokens {
    pub text: String,
    pub bucket_ids: Vec<usize>,
}

/// Lowercases, splits on whitespace, hashes each word with FNV-1a into one of
/// `vocab` buckets and keeps at most `max_tokens` of them.
pub fn build_prompt(text: &str, max_tokens: usize, vocab: usize) -> Result<PromptTokens> {
    if vocab == 0 || max_tokens == 0 {
        return Err(Error::Config("prompt vocabulary and length must be positive".into()));
    }
    let bucket_ids: Vec<usize> = text
        .to_lowercase()
        .split_whitespace()
        .take(max_tokens)
        .map(|w| (fnv1a64(w.as_bytes()) % vocab as u64) as usize)
        .collect();
    if bucket_ids.is_empty() {
        return Err(Error::Config("prompt text is empty".into()));
    }
    Ok(PromptTokens {
        text: text.to_string(),
        bucket_ids,
    })
}

/// Trainable `V×d_m` bucket table plus the fixed token sequence it is read with.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    table: ParamId,
    tokens: PromptTokens,
    vocab: usize,
}

impl PromptEmbedding {
    pub fn new(store: &mut ParamStore, tokens: PromptTokens, vocab: usize, d_model: usize, seed: u64) -> Result<Self> {
        if let Some(&bad) = tokens.bucket_ids.iter().find(|&&b| b >= vocab) {
            return Err(Error::Config(format!("bucket id {bad} outside vocabulary {vocab}")));
        }
        let mut r = rng::stream(seed, "align.prompt_table");
        let table = normal_tensor(&[vocab, d_model], 0.02, &mut r).with_requires_grad(true);
        Ok(Self {
            table: store.add("align.prompt_table", table)?,
            tokens,
            vocab,
        })
    }

    pub fn tokens(&self) -> &PromptTokens {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.bucket_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.bucket_ids.is_empty()
    }

    /// `P×d_m` prompt embeddings, gathered through a one-hot product so the
    /// table receives gradients.
    pub fn embed(&self, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let p = self.len();
        let mut onehot = Tensor::zeros(&[p, self.vocab]);
        for (i, &b) in self.tokens.bucket_ids.iter().enumerate() {
            onehot.data_mut()[i * self.vocab + b] = 1.0;
        }
        let sel = ctx.constant(onehot);
        let table = ctx.param(self.table);
        ctx.tape.matmul(sel, table)
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    heads: usize,
}

pub struct AlignOutput {
    pub hidden: Var,
    /// Per-head `N×P` attention weights.
    pub weights: Vec<Var>,
}

impl CrossAttention {
    /// Per-head projections are the column blocks of `d_m×d_m` matrices.
    /// The output projection starts at zero, so alignment starts as identity.
    pub fn new(store: &mut ParamStore, d_model: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "alignment heads {heads} must divide d_model {d_model}"
            )));
        }
        let mut r = rng::stream(seed, "align.proj");
        let mut proj = |name: &str, r: &mut rng::Rng| -> Result<ParamId> {
            let t = normal_tensor(&[d_model, d_model], 0.02, r).with_requires_grad(true);
            store.add(format!("align.{name}"), t)
        };
        let wq = proj("wq", &mut r)?;
        let wk = proj("wk", &mut r)?;
        let wv = proj("wv", &mut r)?;
        let wo = store.add(
            "align.wo",
            Tensor::zeros(&[d_model, d_model]).with_requires_grad(true),
        )?;
        Ok(Self { wq, wk, wv, wo, heads })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `H + Concat(A_1..A_K)·W^O` with `A_k = softmax(Q_k K_kᵀ/√d_head)·V_k`.
    pub fn align(&self, ctx: &mut ForwardCtx<'_>, ts_tokens: Var, prompt: Var) -> Result<AlignOutput> {
        let (d_ts, d_p) = (ctx.tape.shape(ts_tokens)[1], ctx.tape.shape(prompt)[1]);
        if d_ts != d_p {
            return Err(Error::shape("align", ctx.tape.shape(ts_tokens), ctx.tape.shape(prompt)));
        }
        let (wq, wk, wv, wo) = (
            ctx.param(self.wq),
            ctx.param(self.wk),
            ctx.param(self.wv),
            ctx.param(self.wo),
        );
        let q = ctx.tape.matmul(ts_tokens, wq)?;
        let k = ctx.tape.matmul(prompt, wk)?;
        let v = ctx.tape.matmul(prompt, wv)?;
        let (heads_out, weights) = multi_head_attention(ctx, q, k, v, self.heads, None)?;
        let o = ctx.tape.matmul(heads_out, wo)?;
        let hidden = ctx.tape.add(ts_tokens, o)?;
        Ok(AlignOutput { hidden, weights })
    }
}

/// Scaled dot-product attention over `heads` column blocks of `q`, `k`, `v`.
/// `mask`, when given, is added to every head's `rows×keys` score matrix.
/// Returns the concatenated head outputs and each head's weights.
pub(crate) fn multi_head_attention(
    ctx: &mut ForwardCtx<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = ctx.tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = ctx.tape.slice(q, 1, lo, hi)?;
        let kh = ctx.tape.slice(k, 1, lo, hi)?;
        let vh = ctx.tape.slice(v, 1, lo, hi)?;
        let kt = ctx.tape.transpose(kh)?;
        let scores = ctx.tape.matmul(qh, kt)?;
        let mut scores = ctx.tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = ctx.tape.add(scores, m)?;
        }
        let w = ctx.tape.softmax(scores, 1)?;
        outs.push(ctx.tape.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        ctx.tape.concat(&outs, 1)?
    };
    Ok((cat, weights))
}
