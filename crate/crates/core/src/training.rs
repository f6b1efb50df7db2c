//! Mini-batch training with early stopping on validation MSE.

use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use ndarray::{concatenate, Array2, ArrayView2, Axis, CowArray, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{LinearBackbone, Params};
use crate::dataset::WindowSet;
use crate::error::{Error, Result};

/// Mean squared error over all elements.
pub fn loss_mse(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> f64 {
    squared_sum(pred, target) / pred.len() as f64
}

/// Mean absolute error over all elements.
pub fn loss_mae(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> f64 {
    absolute_sum(pred, target) / pred.len() as f64
}

fn squared_sum(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(pred.dim(), target.dim(), "prediction and target shapes differ");
    pred.iter().zip(target.iter()).map(|(p, y)| (p - y) * (p - y)).sum()
}

fn absolute_sum(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(pred.dim(), target.dim(), "prediction and target shapes differ");
    pred.iter().zip(target.iter()).map(|(p, y)| (p - y).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::adam()),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            optimizer: Optimizer::adam(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size and epoch count must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config("invalid Adam hyperparameters"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

#[derive(Debug, Clone)]
enum Store {
    Windows(WindowSet),
    Owned {
        inputs: Vec<Array2<f64>>,
        targets: Vec<Array2<f64>>,
    },
}

/// Inputs, targets and optional auxiliary windows for training or evaluation.
#[derive(Debug, Clone)]
pub struct SampleSet {
    store: Store,
    aux: Option<Arc<Vec<Array2<f64>>>>,
    /// Feed `[x; aux]` stacked along time as a single input.
    concat: bool,
}

impl SampleSet {
    pub fn from_windows(windows: WindowSet) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::config("no windows"));
        }
        Ok(Self {
            store: Store::Windows(windows),
            aux: None,
            concat: false,
        })
    }

    pub fn from_pairs(pairs: Vec<(Array2<f64>, Array2<f64>)>) -> Result<Self> {
        let Some((x0, y0)) = pairs.first() else {
            return Err(Error::config("no samples"));
        };
        let (xd, yd) = (x0.dim(), y0.dim());
        if pairs.iter().any(|(x, y)| x.dim() != xd || y.dim() != yd) {
            return Err(Error::shape("samples have inconsistent shapes"));
        }
        let (inputs, targets) = pairs.into_iter().unzip();
        Ok(Self {
            store: Store::Owned { inputs, targets },
            aux: None,
            concat: false,
        })
    }

    /// Attaches one auxiliary window per sample.
    pub fn with_aux(mut self, aux: Vec<Array2<f64>>) -> Result<Self> {
        if aux.len() != self.len() {
            return Err(Error::shape(format!(
                "{} samples but {} auxiliary windows",
                self.len(),
                aux.len()
            )));
        }
        let want = self.raw_input(0).dim();
        if aux.iter().any(|z| z.dim() != want) {
            return Err(Error::shape("auxiliary windows must match the input shape"));
        }
        self.aux = Some(Arc::new(aux));
        Ok(self)
    }

    /// Uses the time-axis concatenation of input and auxiliary window as the input.
    pub fn concatenated(mut self) -> Result<Self> {
        if self.aux.is_none() {
            return Err(Error::config("concatenation needs auxiliary windows"));
        }
        self.concat = true;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        match &self.store {
            Store::Windows(w) => w.len(),
            Store::Owned { inputs, .. } => inputs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn raw_input(&self, i: usize) -> ArrayView2<'_, f64> {
        match &self.store {
            Store::Windows(w) => w.x(i),
            Store::Owned { inputs, .. } => inputs[i].view(),
        }
    }

    pub fn input(&self, i: usize) -> CowArray<'_, f64, Ix2> {
        let x = self.raw_input(i);
        match (&self.aux, self.concat) {
            (Some(aux), true) => concatenate(Axis(0), &[x, aux[i].view()])
                .expect("shapes checked")
                .into(),
            _ => x.into(),
        }
    }

    pub fn target(&self, i: usize) -> ArrayView2<'_, f64> {
        match &self.store {
            Store::Windows(w) => w.y(i),
            Store::Owned { targets, .. } => targets[i].view(),
        }
    }

    /// The auxiliary window fed to the gate, `None` for plain or concatenated sets.
    pub fn aux(&self, i: usize) -> Option<ArrayView2<'_, f64>> {
        match (&self.aux, self.concat) {
            (Some(a), false) => Some(a[i].view()),
            _ => None,
        }
    }

    fn is_gated(&self) -> bool {
        self.aux.is_some() && !self.concat
    }
}

fn check_compatible(model: &LinearBackbone, set: &SampleSet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::config("empty sample set"));
    }
    match (model.is_augmented(), set.is_gated()) {
        (false, true) => Err(Error::MissingGate),
        (true, false) => Err(Error::config("augmented model needs auxiliary windows")),
        _ => Ok(()),
    }
}

const EVAL_CHUNK: usize = 256;

/// Predictions for the samples `range`, in order.
fn predict_range(model: &LinearBackbone, set: &SampleSet, range: std::ops::Range<usize>) -> Result<Vec<Array2<f64>>> {
    let inputs: Vec<_> = range.clone().map(|i| set.input(i)).collect();
    let xs: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let zs: Option<Vec<_>> = set
        .is_gated()
        .then(|| range.map(|i| set.aux(i).expect("gated")).collect());
    model.forward_batch(&xs, zs.as_deref())
}

/// Dataset-level MSE and MAE, the means of the per-window losses.
pub fn evaluate_set(model: &LinearBackbone, set: &SampleSet) -> Result<(f64, f64)> {
    check_compatible(model, set)?;
    let chunks: Vec<_> = (0..set.len()).step_by(EVAL_CHUNK).collect();
    let sums: Vec<(f64, f64)> = chunks
        .par_iter()
        .map(|&lo| {
            let hi = (lo + EVAL_CHUNK).min(set.len());
            let preds = predict_range(model, set, lo..hi)?;
            Ok(preds.iter().enumerate().fold((0.0, 0.0), |(se, ae), (k, p)| {
                let y = set.target(lo + k);
                (se + loss_mse(p.view(), y), ae + loss_mae(p.view(), y))
            }))
        })
        .collect::<Result<_>>()?;
    let (se, ae) = sums.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let n = set.len() as f64;
    Ok((se / n, ae / n))
}

/// Model predictions for every sample.
pub fn predict_all(model: &LinearBackbone, set: &SampleSet) -> Result<Vec<Array2<f64>>> {
    check_compatible(model, set)?;
    let chunks: Vec<_> = (0..set.len()).step_by(EVAL_CHUNK).collect();
    let parts: Vec<Vec<Array2<f64>>> = chunks
        .par_iter()
        .map(|&lo| predict_range(model, set, lo..(lo + EVAL_CHUNK).min(set.len())))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, params: &Params) -> Self {
        let shapes: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    fn apply(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let lr = self.lr;
        let grads = grads.slices();
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.slices_mut().into_iter().zip(grads) {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (((p, g), m), v) in params
                    .slices_mut()
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Trains `model` and returns the parameters with the lowest validation MSE.
pub fn train(
    mut model: LinearBackbone,
    train_set: &SampleSet,
    val_set: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(LinearBackbone, TrainReport)> {
    cfg.validate()?;
    check_compatible(&model, train_set)?;
    check_compatible(&model, val_set)?;
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, model.params());
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Params)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<_> = batch.iter().map(|&i| train_set.input(i)).collect();
            let xs: Vec<_> = inputs.iter().map(|a| a.view()).collect();
            let ys: Vec<_> = batch.iter().map(|&i| train_set.target(i)).collect();
            let zs: Option<Vec<_>> = train_set
                .is_gated()
                .then(|| batch.iter().map(|&i| train_set.aux(i).expect("gated")).collect());
            let (loss, grads) = model.loss_and_gradients(&xs, zs.as_deref(), &ys)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * batch.len() as f64;
            opt.apply(model.params_mut(), &grads);
        }
        let train_loss = total / train_set.len() as f64;
        let (val_mse, val_mae) = evaluate_set(&model, val_set)?;
        if !val_mse.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_mse });
        }
        debug!("epoch {epoch}: train {train_loss:.6} val mse {val_mse:.6} mae {val_mae:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mse,
            val_mae,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_mse < *b) {
            best = Some((epoch, val_mse, model.params().clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }

    let (best_epoch, best_val_mse, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            best_val_mse,
            wall_seconds: clock.elapsed().as_secs_f64(),
        },
    ))
}
