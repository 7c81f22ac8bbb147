//! Loss assembly, optimization and the epoch loop.
//!
//! Only trainable parameters move. Each epoch shuffles the training windows
//! with a stream derived from the seed and epoch number, so a run is fully
//! determined by its configuration.

mod loss;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

pub use loss::{mse_loss, smape_loss, task_loss, total_loss, LossKind, SMAPE_DENOM_FLOOR};
pub use optim::{clip_grad_norm, grad_norm, AdamW};

use crate::autograd::Tensor;
use crate::data::{make_windows, synth_generate, SeriesView, SynthKind, SynthSpec, Window, WindowBatch};
use crate::dlora::{self, RoutingStats};
use crate::error::{Error, Result};
use crate::model::{Forecaster, ModelConfig, Variant};
use crate::params::{ForwardCtx, ParamId};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_lb: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub patience: usize,
    pub clip_norm: f64,
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 20,
            lambda_lb: 0.01,
            loss: LossKind::Mse,
            seed: 0,
            patience: 3,
            clip_norm: 5.0,
            stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("batch_size and stride must be at least 1".into()));
        }
        if !(self.lambda_lb >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lambda_lb and weight_decay must be non-negative".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lb_loss: f64,
    pub routing_entropy: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    /// `epoch,train_loss,val_loss,lb_loss,entropy_l0,..`; floats use the
    /// shortest round-trip representation.
    pub fn to_csv(&self) -> String {
        let layers = self.records.iter().map(|r| r.routing_entropy.len()).max().unwrap_or(0);
        let mut out = String::from("epoch,train_loss,val_loss,lb_loss");
        for l in 0..layers {
            let _ = write!(out, ",entropy_l{l}");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{:?},", r.epoch, r.train_loss);
            if let Some(v) = r.val_loss {
                let _ = write!(out, "{v:?}");
            }
            let _ = write!(out, ",{:?}", r.lb_loss);
            for l in 0..layers {
                match r.routing_entropy.get(l) {
                    Some(e) => {
                        let _ = write!(out, ",{e:?}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    /// Routing over the training windows of the best epoch.
    pub routing: RoutingStats,
}

/// Loss of one batch, recorded on `ctx`.
pub struct BatchLoss {
    pub total: crate::autograd::Var,
    pub task: f64,
    pub lb: f64,
    pub stats: RoutingStats,
}

pub fn batch_loss(
    model: &Forecaster,
    ctx: &mut ForwardCtx<'_>,
    batch: &WindowBatch,
    kind: LossKind,
    lambda_lb: f64,
) -> Result<BatchLoss> {
    let out = model.forward(ctx, &batch.x)?;
    let (b, n, tp) = (batch.y.shape()[0], batch.y.shape()[1], batch.y.shape()[2]);
    let y = ctx.constant(Tensor::new(vec![b * n, tp], batch.y.data().to_vec())?);
    let task = task_loss(&mut ctx.tape, kind, y, out.forecast)?;
    let lb = if out.probs.is_empty() {
        None
    } else {
        dlora::load_balance_loss_var(ctx, &out.probs, &out.stats)?
    };
    let total = total_loss(&mut ctx.tape, task, lb, lambda_lb)?;
    Ok(BatchLoss {
        total,
        task: ctx.tape.value(task).item()?,
        lb: lb.map_or(Ok(0.0), |v| ctx.tape.value(v).item())?,
        stats: out.stats,
    })
}

/// Mean squared error of the model over every window of `view`.
pub fn evaluate_mse(model: &Forecaster, view: SeriesView<'_>, batch_size: usize) -> Result<Option<f64>> {
    let cfg = model.config();
    let ws = make_windows(view, cfg.lookback, cfg.horizon, 1);
    if ws.is_empty() {
        return Ok(None);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in ws.windows.chunks(batch_size.max(1)) {
        let batch = WindowBatch::build(view, chunk);
        let (y_hat, _) = model.predict(&batch.x)?;
        sum += y_hat
            .data()
            .iter()
            .zip(batch.y.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        count += y_hat.len();
    }
    Ok(Some(sum / count as f64))
}

fn trainable_snapshot(model: &Forecaster) -> Vec<(ParamId, Tensor)> {
    model
        .store()
        .iter()
        .filter(|(_, _, t)| t.requires_grad())
        .map(|(id, _, t)| (id, t.clone()))
        .collect()
}

fn restore(model: &mut Forecaster, snap: &[(ParamId, Tensor)]) {
    for (id, t) in snap {
        *model.store_mut().get_mut(*id) = t.clone();
    }
}

fn one_step(model: &mut Forecaster, opt: &mut AdamW, batch: &WindowBatch, cfg: &TrainConfig) -> Result<BatchLoss> {
    let (bl, grads) = {
        let mut ctx = ForwardCtx::new(model.store());
        let bl = batch_loss(model, &mut ctx, batch, cfg.loss, cfg.lambda_lb)?;
        let total = ctx.tape.value(bl.total).item()?;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {total} (task {}, load balance {}, lr {}, batch of {} windows, |x| max {:.3e}, |y| max {:.3e})",
                bl.task,
                bl.lb,
                cfg.lr,
                batch.len(),
                batch.x.data().iter().fold(0.0f64, |m, v| m.max(v.abs())),
                batch.y.data().iter().fold(0.0f64, |m, v| m.max(v.abs())),
            )));
        }
        let grads = ctx.backward(bl.total)?;
        (bl, grads)
    };
    let store = model.store_mut();
    store.zero_grads();
    store.accumulate(grads)?;
    clip_grad_norm(store, cfg.clip_norm);
    opt.step(store);
    Ok(bl)
}

/// Trains the model's trainable parameters on `train`, early-stopping on the
/// validation MSE. The parameters of the best validation epoch (or of the
/// last epoch when there is no validation data) are restored at the end.
pub fn train(model: &mut Forecaster, train: SeriesView<'_>, val: SeriesView<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mc = model.config().clone();
    let ws = make_windows(train, mc.lookback, mc.horizon, cfg.stride);
    if ws.is_empty() {
        return Err(Error::Data(format!(
            "training split yields no windows: {}",
            ws.warning.unwrap_or_default()
        )));
    }
    let mut opt = AdamW::new(model.store(), cfg.lr, cfg.weight_decay)?;
    let mut history = History::default();
    let mut best: Option<(f64, Vec<(ParamId, Tensor)>, RoutingStats)> = None;
    let mut last_routing = RoutingStats::default();
    let mut bad_epochs = 0;
    let mut order: Vec<Window> = ws.windows.clone();

    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &format!("shuffle.{epoch}"));
        order.copy_from_slice(&ws.windows);
        order.shuffle(&mut r);
        let (mut task_sum, mut lb_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut routing = RoutingStats::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = WindowBatch::build(train, chunk);
            let bl = one_step(model, &mut opt, &batch, cfg).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batches}: {m}")),
                other => other,
            })?;
            task_sum += bl.task;
            lb_sum += bl.lb;
            routing.merge(&bl.stats);
            batches += 1;
        }
        let val_loss = evaluate_mse(model, val, cfg.batch_size)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: task_sum / batches as f64,
            val_loss,
            lb_loss: lb_sum / batches as f64,
            routing_entropy: routing.entropy_bits(),
        });
        match val_loss {
            Some(v) if best.as_ref().map_or(true, |(b, _, _)| v < *b) => {
                best = Some((v, trainable_snapshot(model), routing.clone()));
                history.best_epoch = epoch;
                bad_epochs = 0;
            }
            Some(_) => {
                bad_epochs += 1;
                if bad_epochs >= cfg.patience {
                    history.stopped_early = true;
                    last_routing = routing;
                    break;
                }
            }
            None => history.best_epoch = epoch,
        }
        last_routing = routing;
    }

    let routing = match best {
        Some((_, snap, routing)) => {
            restore(model, &snap);
            routing
        }
        None => last_routing,
    };
    Ok(TrainOutcome { history, routing })
}

/// Gives a randomly initialized backbone a short next-window pretraining on a
/// synthetic sine-mixture corpus, copies the learned blocks into `model`, and
/// freezes them. Embedder, alignment, adapters and head of `model` keep their
/// initial values.
pub fn pretrain_then_freeze(model: &mut Forecaster, steps: usize) -> Result<()> {
    let mc = model.config();
    let mut cfg = ModelConfig {
        variant: Variant::Frozen,
        ..mc.clone()
    };
    cfg.backbone.frozen = false;
    let mut proxy = Forecaster::new(cfg)?;
    let seed = mc.seed;
    let spec = SynthSpec {
        noise_std: 0.05,
        ..SynthSpec::new(SynthKind::SineMixture, 4, 4 * (mc.lookback + mc.horizon) + 256, seed ^ 0x5eed)
    };
    let (corpus, _) = synth_generate(&spec)?;
    let ws = make_windows(SeriesView::whole(&corpus), mc.lookback, mc.horizon, 1);
    let tc = TrainConfig {
        lambda_lb: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(proxy.store(), tc.lr, 0.0)?;
    let mut r = rng::stream(seed, "pretrain.batches");
    let mut order = ws.windows.clone();
    let mut done = 0;
    while done < steps {
        order.shuffle(&mut r);
        for chunk in order.chunks(tc.batch_size) {
            if done == steps {
                break;
            }
            let batch = WindowBatch::build(SeriesView::whole(&corpus), chunk);
            one_step(&mut proxy, &mut opt, &batch, &tc)?;
            done += 1;
        }
    }
    let names: Vec<String> = proxy
        .store()
        .iter()
        .filter(|(_, n, _)| n.starts_with("backbone."))
        .map(|(_, n, _)| n.to_string())
        .collect();
    for name in names {
        let src = proxy.store().by_name(&name).expect("proxy tensor").detached();
        let id = model
            .store()
            .id(&name)
            .ok_or_else(|| Error::Contract(format!("backbone tensor {name} missing from model")))?;
        *model.store_mut().get_mut(id) = src;
    }
    model.store_mut().set_trainable_prefix("backbone.", false);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{chronological_split, SplitSpec};

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                layers: 2,
                d_model: 16,
                heads: 2,
                d_ffn: 32,
                ..BackboneConfig::desk()
            },
            align_heads: 4,
            rank: 2,
            top_n: 3,
            variant,
            seed: 3,
            ..ModelConfig::desk(16, 4)
        }
    }

    fn data() -> crate::data::MultivariateSeries {
        synth_generate(&SynthSpec::new(SynthKind::SineMixture, 2, 240, 9)).unwrap().0
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            stride: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn deterministic_history_and_frozen_backbone() {
        let s = data();
        let sp = chronological_split(&s, SplitSpec::proportional(s.len()), 16).unwrap();
        let mut a = Forecaster::new(tiny_config(Variant::Full)).unwrap();
        let mut b = Forecaster::new(tiny_config(Variant::Full)).unwrap();
        let before = a.store().checksum("backbone.");
        let ha = train(&mut a, sp.train, sp.val, &quick()).unwrap();
        let hb = train(&mut b, sp.train, sp.val, &quick()).unwrap();
        assert_eq!(ha.history, hb.history);
        assert_eq!(a.store().checksum("backbone."), before);
        assert_ne!(a.store().checksum("head."), Forecaster::new(tiny_config(Variant::Full)).unwrap().store().checksum("head."));
        assert!(ha.history.records.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let s = data();
        let view = SeriesView::whole(&s);
        let sp = chronological_split(&s, SplitSpec::new(10, 0, 0), 16).unwrap();
        let mut m = Forecaster::new(tiny_config(Variant::Full)).unwrap();
        assert!(matches!(train(&mut m, sp.train, view, &quick()), Err(Error::Data(_))));
    }

    #[test]
    fn nan_loss_aborts_with_numeric_error() {
        let s = data();
        let sp = chronological_split(&s, SplitSpec::proportional(s.len()), 16).unwrap();
        let mut m = Forecaster::new(tiny_config(Variant::Full)).unwrap();
        let id = m.store().id("head.bias").unwrap();
        m.store_mut().get_mut(id).data_mut()[0] = f64::NAN;
        let err = train(&mut m, sp.train, sp.val, &quick()).unwrap_err();
        assert!(matches!(&err, Error::Numeric(msg) if msg.contains("epoch 0") && msg.contains("lr")));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            records: vec![EpochRecord {
                epoch: 0,
                train_loss: 0.5,
                val_loss: None,
                lb_loss: 4.0,
                routing_entropy: vec![2.0, 1.5],
            }],
            best_epoch: 0,
            stopped_early: false,
        };
        assert_eq!(
            h.to_csv(),
            "epoch,train_loss,val_loss,lb_loss,entropy_l0,entropy_l1\n0,0.5,,4.0,2.0,1.5\n"
        );
    }

    #[test]
    fn pretraining_changes_then_freezes_backbone() {
        let mut m = Forecaster::new(tiny_config(Variant::Full)).unwrap();
        let init = m.store().checksum("backbone.");
        let head = m.store().checksum("head.");
        pretrain_then_freeze(&mut m, 3).unwrap();
        let after = m.store().checksum("backbone.");
        assert_ne!(init, after);
        assert_eq!(m.store().checksum("head."), head);
        let s = data();
        let sp = chronological_split(&s, SplitSpec::proportional(s.len()), 16).unwrap();
        train(&mut m, sp.train, sp.val, &TrainConfig { epochs: 1, ..quick() }).unwrap();
        assert_eq!(m.store().checksum("backbone."), after);
    }
}
