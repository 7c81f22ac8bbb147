//! Channel-as-token embedding, the linear forecasting head, and per-window
//! instance normalization.
//!
//! Each channel's whole lookback series becomes one token: the embedder is a
//! two-layer MLP `T_L → 2·d_m → d_m` with SiLU between, applied row-wise, so
//! token `i` depends only on channel `i`.

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ForwardCtx, ParamId, ParamStore};
use crate::rng::{self, normal_tensor};

pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TsEmbedder {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    lookback: usize,
    d_model: usize,
}

impl TsEmbedder {
    pub fn new(store: &mut ParamStore, lookback: usize, d_model: usize, seed: u64) -> Result<Self> {
        let hidden = 2 * d_model;
        let mut r = rng::stream(seed, "embed");
        let w1 = normal_tensor(&[lookback, hidden], 1.0 / (lookback as f64).sqrt(), &mut r);
        let w2 = normal_tensor(&[hidden, d_model], 1.0 / (hidden as f64).sqrt(), &mut r);
        Ok(Self {
            fc1_w: store.add("embed.fc1.weight", w1.with_requires_grad(true))?,
            fc1_b: store.add("embed.fc1.bias", Tensor::zeros(&[1, hidden]).with_requires_grad(true))?,
            fc2_w: store.add("embed.fc2.weight", w2.with_requires_grad(true))?,
            fc2_b: store.add("embed.fc2.bias", Tensor::zeros(&[1, d_model]).with_requires_grad(true))?,
            lookback,
            d_model,
        })
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// `N×T_L` lookback → `N×d_m` tokens.
    pub fn embed(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.lookback || shape[0] == 0 {
            return Err(Error::Contract(format!(
                "embed expects N×{} input with N >= 1, got {:?}",
                self.lookback, shape
            )));
        }
        let (w1, b1, w2, b2) = (
            ctx.param(self.fc1_w),
            ctx.param(self.fc1_b),
            ctx.param(self.fc2_w),
            ctx.param(self.fc2_b),
        );
        let h = ctx.tape.matmul(x, w1)?;
        let h = ctx.tape.add(h, b1)?;
        let h = ctx.tape.silu(h);
        let h = ctx.tape.matmul(h, w2)?;
        ctx.tape.add(h, b2)
    }
}

/// `Ŷ = H·W^P + b^P`, applied row-wise.
#[derive(Debug, Clone)]
pub struct OutputHead {
    weight: ParamId,
    bias: ParamId,
    horizon: usize,
}

impl OutputHead {
    pub fn new(store: &mut ParamStore, d_model: usize, horizon: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "head");
        let w = normal_tensor(&[d_model, horizon], 1.0 / (d_model as f64).sqrt(), &mut r);
        Ok(Self {
            weight: store.add("head.weight", w.with_requires_grad(true))?,
            bias: store.add("head.bias", Tensor::zeros(&[1, horizon]).with_requires_grad(true))?,
            horizon,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn project(&self, ctx: &mut ForwardCtx<'_>, h: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = ctx.tape.matmul(h, w)?;
        ctx.tape.add(y, b)
    }
}

/// Per-channel mean and (clamped) standard deviation of one lookback window.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics of an `N×T_L` lookback, one pair per row.
    pub fn from_lookback(x: &Tensor) -> Self {
        let (rows, cols) = (x.rows(), x.cols());
        let mut mean = Vec::with_capacity(rows);
        let mut std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row_slice(r);
            let first = row[0];
            let m = if row.iter().all(|&v| v == first) {
                first
            } else {
                row.iter().sum::<f64>() / cols as f64
            };
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64;
            mean.push(m);
            std.push(var.sqrt().max(NORM_EPS));
        }
        Self { mean, std }
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        self.map_rows(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, y: &Tensor) -> Tensor {
        self.map_rows(y, |v, m, s| v * s + m)
    }

    /// Denormalization recorded on the tape; the statistics are constants.
    pub fn denormalize_var(&self, ctx: &mut ForwardCtx<'_>, y: Var) -> Result<Var> {
        let n = self.mean.len();
        let std = ctx.constant(Tensor::new(vec![n, 1], self.std.clone())?);
        let mean = ctx.constant(Tensor::new(vec![n, 1], self.mean.clone())?);
        let scaled = ctx.tape.mul(y, std)?;
        ctx.tape.add(scaled, mean)
    }

    fn map_rows(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let cols = x.cols();
        let mut out = x.detached();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let r = i / cols;
            *v = f(*v, self.mean[r], self.std[r]);
        }
        out
    }
}

/// Per-channel z-scoring of an `N×T_L` lookback.
pub fn instance_normalize(x: &Tensor) -> (Tensor, NormStats) {
    let stats = NormStats::from_lookback(x);
    (stats.normalize(x), stats)
}

pub fn denormalize(y: &Tensor, stats: &NormStats) -> Tensor {
    stats.denormalize(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_matches, random_tensor};

    fn embedder(lookback: usize, d: usize) -> (ParamStore, TsEmbedder) {
        let mut store = ParamStore::new();
        let e = TsEmbedder::new(&mut store, lookback, d, 3).unwrap();
        (store, e)
    }

    #[test]
    fn ett_shape() {
        let (store, e) = embedder(512, 64);
        let mut ctx = ForwardCtx::new(&store);
        let x = ctx.constant(random_tensor(&[7, 512], 1, 1.0));
        let h = e.embed(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(h), &[7, 64]);
    }

    #[test]
    fn wrong_lookback_is_contract_error() {
        let (store, e) = embedder(16, 8);
        let mut ctx = ForwardCtx::new(&store);
        let x = ctx.constant(Tensor::zeros(&[3, 15]));
        assert!(matches!(e.embed(&mut ctx, x), Err(Error::Contract(_))));
    }

    #[test]
    fn channel_permutation_permutes_tokens() {
        let (store, e) = embedder(10, 8);
        let x = random_tensor(&[3, 10], 4, 1.0);
        let perm = [2usize, 0, 1];
        let px = Tensor::from_rows(&perm.iter().map(|&p| x.row_slice(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut ctx = ForwardCtx::new(&store);
        let a = ctx.constant(x);
        let b = ctx.constant(px);
        let ha = e.embed(&mut ctx, a).unwrap();
        let hb = e.embed(&mut ctx, b).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(ctx.tape.value(hb).row_slice(i), ctx.tape.value(ha).row_slice(p));
        }
    }

    #[test]
    fn zero_weights_give_zero_tokens() {
        let (mut store, e) = embedder(6, 4);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut ctx = ForwardCtx::new(&store);
        let x = ctx.constant(random_tensor(&[2, 6], 9, 1.0));
        let h = e.embed(&mut ctx, x).unwrap();
        assert!(ctx.tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_constant_bias_and_single_row() {
        let mut store = ParamStore::new();
        let head = OutputHead::new(&mut store, 4, 3, 1).unwrap();
        store.get_mut(store.id("head.weight").unwrap()).data_mut().fill(0.0);
        store.get_mut(store.id("head.bias").unwrap()).data_mut().copy_from_slice(&[1.5, -2.0, 0.25]);
        let mut ctx = ForwardCtx::new(&store);
        let h = ctx.constant(random_tensor(&[5, 4], 2, 1.0));
        let y = head.project(&mut ctx, h).unwrap();
        for r in 0..5 {
            assert_eq!(ctx.tape.value(y).row_slice(r), &[1.5, -2.0, 0.25]);
        }
        let h1 = ctx.constant(random_tensor(&[1, 4], 3, 1.0));
        let y1 = head.project(&mut ctx, h1).unwrap();
        assert_eq!(ctx.tape.shape(y1), &[1, 3]);
    }

    #[test]
    fn head_mse_gradient_matches_finite_differences() {
        let h = random_tensor(&[3, 4], 5, 1.0);
        let w = random_tensor(&[4, 2], 6, 1.0);
        let b = random_tensor(&[1, 2], 7, 1.0);
        let y = random_tensor(&[3, 2], 8, 1.0);
        assert_grad_matches("project+mse", &[h, w, b, y], 1e-5, |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            let p = t.add(p, v[2]).unwrap();
            let d = t.sub(p, v[3]).unwrap();
            let sq = t.square(d);
            t.mean(sq)
        });
    }

    #[test]
    fn instance_norm_properties() {
        let x = Tensor::from_rows(&[vec![0.1; 6], vec![1.0, 4.0, -2.0, 3.5, 0.0, 7.0]]).unwrap();
        let (z, stats) = instance_normalize(&x);
        assert!(z.row_slice(0).iter().all(|&v| v == 0.0));
        let row = z.row_slice(1);
        let m = row.iter().sum::<f64>() / 6.0;
        let s = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0).sqrt();
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
        let back = denormalize(&z, &stats);
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn normalized_tokens_invariant_to_affine_channel_change() {
        let x = random_tensor(&[2, 12], 10, 3.0);
        let mut y = x.clone();
        for v in &mut y.data_mut()[12..] {
            *v = 4.0 * *v - 7.0;
        }
        let (zx, _) = instance_normalize(&x);
        let (zy, _) = instance_normalize(&y);
        assert!(zx.max_abs_diff(&zy) < 1e-12);
    }
}
