//! Adam with a validation-driven learning-rate schedule, forecast metrics,
//! and the mini-batch training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{window_dataset, Dataset, Split, WindowSet};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam moments plus plateau-schedule bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs since the last sufficient improvement.
    pub stagnant: usize,
    pub best_loss: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Minimum decrease that counts as an improvement.
    pub threshold: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            stagnant: 0,
            best_loss: f64::INFINITY,
            patience: 3,
            factor: 0.5,
            min_lr: 1e-6,
            threshold: 1e-6,
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients abort before any
    /// parameter is touched.
    pub fn adam_step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Feed one epoch's validation loss; halves the rate after `patience`
    /// epochs without an improvement of at least `threshold`. Returns whether
    /// the rate changed.
    pub fn lr_schedule(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best_loss - self.threshold {
            self.best_loss = val_loss;
            self.stagnant = 0;
            return false;
        }
        self.stagnant += 1;
        if self.stagnant >= self.patience {
            self.stagnant = 0;
            let next = (self.lr * self.factor).max(self.min_lr);
            let changed = next != self.lr;
            self.lr = next;
            return changed;
        }
        false
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    /// MSE per forecast step, averaged over windows and channels.
    pub step_mse: Vec<f64>,
    pub windows: usize,
}

impl EvalReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,mse\n");
        for (i, v) in self.step_mse.iter().enumerate() {
            let _ = writeln!(s, "{},{v}", i + 1);
        }
        s
    }
}

/// Micro-averaged MSE and MAE over paired `[horizon, C]` forecasts.
pub fn metrics(preds: &[Tensor], targets: &[Tensor]) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Contract("evaluation needs at least one window".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let shape = targets[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(
            "metrics",
            format!("windows must be [horizon, C], got {shape:?}"),
        ));
    }
    let (h, c) = (shape[0], shape[1]);
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut step = vec![0.0; h];
    for (p, y) in preds.iter().zip(targets) {
        if p.shape() != shape.as_slice() || y.shape() != shape.as_slice() {
            return Err(Error::dim("metrics", format!("{:?} vs {:?}", p.shape(), y.shape())));
        }
        for (i, (a, b)) in p.data().iter().zip(y.data()).enumerate() {
            let d = a - b;
            sq += d * d;
            abs += d.abs();
            step[i / c] += d * d;
        }
    }
    let n = (preds.len() * h * c) as f64;
    let per_step = (preds.len() * c) as f64;
    Ok(EvalReport {
        mse: sq / n,
        mae: abs / n,
        step_mse: step.into_iter().map(|s| s / per_step).collect(),
        windows: preds.len(),
    })
}

/// Forecast every window and score it, in batches of `batch`.
pub fn evaluate(state: &ModelState, ds: &Dataset, windows: &WindowSet, batch: usize) -> Result<EvalReport> {
    let (preds, targets) = forecasts(state, ds, windows, batch)?;
    metrics(&preds, &targets)
}

/// Predictions and targets for every window, each `[horizon, C]`.
pub fn forecasts(
    state: &ModelState,
    ds: &Dataset,
    windows: &WindowSet,
    batch: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if windows.is_empty() {
        return Err(Error::Contract("evaluation needs at least one window".into()));
    }
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut preds = Vec::with_capacity(windows.len());
    let mut targets = Vec::with_capacity(windows.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = windows.batch(ds, chunk);
        let p = state.predict(&x)?;
        for b in 0..chunk.len() {
            preds.push(p.index_first(b));
            targets.push(y.index_first(b));
        }
    }
    Ok((preds, targets))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
    /// Seed of the window shuffle.
    pub seed: u64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub stride: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            clip: Some(5.0),
            seed: 42,
            patience: 3,
            factor: 0.5,
            min_lr: 1e-6,
            stride: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_mse,val_mse,lr\n");
    for e in log {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", e.epoch, e.train_mse, e.val_mse, e.lr);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MSE seen.
    pub best: ModelState,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Train a fresh model on the split, normalised `ds`.
pub fn train(config: &ModelConfig, ds: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    let state = ModelState::new(config.clone())?;
    train_from(state, ds, opts, |_| {})
}

/// Train `state` in place of a fresh model; `on_epoch` sees each log row as
/// it is produced.
pub fn train_from(
    mut state: ModelState,
    ds: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if opts.batch_size == 0 || opts.lr.is_nan() || opts.lr <= 0.0 {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let cfg = state.config.clone();
    if ds.channels() != cfg.channels {
        return Err(Error::Config(format!(
            "dataset has {} channels, model expects {}",
            ds.channels(),
            cfg.channels
        )));
    }
    let train_w = window_dataset(ds, Split::Train, cfg.lookback, cfg.horizon, opts.stride)?;
    let val_w = window_dataset(ds, Split::Val, cfg.lookback, cfg.horizon, 1)?;
    let mut opt = OptimizerState::new(&state.params, opts.lr);
    opt.patience = opts.patience;
    opt.factor = opts.factor;
    opt.min_lr = opts.min_lr;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let mut best = state.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(opts.epochs);
    let eval_batch = opts.batch_size.max(64);

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let (x, y) = train_w.batch(ds, chunk);
            let (loss, mut grads) = state.loss_and_grads(&x, &y)?;
            if !loss.is_finite() {
                return Ok(diverged(
                    best,
                    best_epoch,
                    log,
                    format!("non-finite loss in epoch {epoch}"),
                ));
            }
            if let Some(c) = opts.clip {
                clip_global_norm(&mut grads, c);
            }
            match opt.adam_step(&mut state.params, &grads) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(name)) => {
                    let msg = format!("non-finite gradient for `{name}` in epoch {epoch}");
                    return Ok(diverged(best, best_epoch, log, msg));
                }
                Err(e) => return Err(e),
            }
            sum += loss * chunk.len() as f64;
        }
        let train_mse = sum / train_w.len() as f64;
        let val_mse = evaluate(&state, ds, &val_w, eval_batch)?.mse;
        if !val_mse.is_finite() {
            return Ok(diverged(
                best,
                best_epoch,
                log,
                format!("non-finite validation loss in epoch {epoch}"),
            ));
        }
        let row = EpochLog {
            epoch,
            train_mse,
            val_mse,
            lr: opt.lr,
        };
        log::info!(
            "epoch {epoch}: train {train_mse:.6e} val {val_mse:.6e} lr {:.2e}",
            opt.lr
        );
        on_epoch(&row);
        log.push(row);
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = state.clone();
        }
        opt.lr_schedule(val_mse);
    }
    if best_epoch == 0 {
        best = state;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        diverged: None,
    })
}

fn diverged(best: ModelState, best_epoch: usize, log: Vec<EpochLog>, msg: String) -> TrainOutcome {
    log::warn!("training stopped: {msg}");
    TrainOutcome {
        best,
        best_epoch,
        log,
        diverged: Some(msg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![w]));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(0.7);
        let mut opt = OptimizerState::new(&p, 1e-3);
        opt.m[0].data_mut()[0] = 0.5;
        opt.adam_step(&mut p, &[Tensor::vector(vec![0.0])]).unwrap();
        assert!((opt.m[0].data()[0] - 0.45).abs() < 1e-15);
        // m decays but the update is not zero: Adam keeps momentum
        let mut q = scalar_store(0.7);
        let mut fresh = OptimizerState::new(&q, 1e-3);
        fresh.adam_step(&mut q, &[Tensor::vector(vec![0.0])]).unwrap();
        assert_eq!(q.get("w").unwrap().data()[0], 0.7);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(1.0);
        let mut opt = OptimizerState::new(&p, 1e-4);
        opt.adam_step(&mut p, &[Tensor::vector(vec![1.0])]).unwrap();
        let moved = 1.0 - p.get("w").unwrap().data()[0];
        assert!((moved - 1e-4).abs() < 1e-11, "{moved}");
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = scalar_store(1.0);
        let mut opt = OptimizerState::new(&p, 0.1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let w = p.get("w").unwrap().data()[0];
            opt.adam_step(&mut p, &[Tensor::vector(vec![2.0 * w])]).unwrap();
            let now = p.get("w").unwrap().data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let mut opt = OptimizerState::new(&p, 0.1);
        let r = opt.adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])]);
        assert!(matches!(r, Err(Error::NonFiniteGradient(ref n)) if n == "w"));
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule_halves_after_patience() {
        let p = scalar_store(0.0);
        let mut opt = OptimizerState::new(&p, 1e-4);
        for l in [1.0, 0.9, 0.8, 0.7] {
            opt.lr_schedule(l);
        }
        assert_eq!(opt.lr, 1e-4);
        for _ in 0..3 {
            opt.lr_schedule(0.7);
        }
        assert_eq!(opt.lr, 5e-5);
        for _ in 0..300 {
            opt.lr_schedule(0.7);
        }
        assert_eq!(opt.lr, 1e-6);
    }

    #[test]
    fn tiny_improvements_count_as_stagnation() {
        let p = scalar_store(0.0);
        let mut opt = OptimizerState::new(&p, 1e-4);
        opt.lr_schedule(1.0);
        for i in 1..=3 {
            opt.lr_schedule(1.0 - 1e-7 * i as f64);
        }
        assert_eq!(opt.lr, 5e-5);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0]), Tensor::vector(vec![0.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.3);
    }

    #[test]
    fn metric_cases() {
        let y = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let perfect = metrics(std::slice::from_ref(&y), std::slice::from_ref(&y)).unwrap();
        assert_eq!((perfect.mse, perfect.mae), (0.0, 0.0));
        let off = y.map(|v| v + 2.0);
        let r = metrics(&[off], &[y]).unwrap();
        assert_eq!((r.mse, r.mae), (4.0, 2.0));
        assert_eq!(r.step_mse, vec![4.0, 4.0]);
        assert!(matches!(metrics(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn log_has_header() {
        let s = log_csv(&[EpochLog {
            epoch: 1,
            train_mse: 0.5,
            val_mse: 0.25,
            lr: 1e-4,
        }]);
        assert!(s.starts_with("epoch,train_mse,val_mse,lr\n1,"));
    }
}
