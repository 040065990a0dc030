//! Mini-batch training with validation early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams, Sample};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global L2 norm the gradient is clipped to; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::adam(),
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Scales `grads` down to `max_norm` if its L2 norm exceeds it. Returns the
/// norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grads.l2_norm().as_f64();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

pub fn sgd_step<T: Real>(params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) -> Result<()> {
    check_same_shape(params, grads)?;
    let lr = T::of(lr);
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (x, &d) in p.iter_mut().zip(g) {
            *x -= lr * d;
        }
    }
    Ok(())
}

fn check_same_shape<T: Real>(a: &ModelParams<T>, b: &ModelParams<T>) -> Result<()> {
    let la: Vec<usize> = a.tensors().iter().map(|t| t.len()).collect();
    let lb: Vec<usize> = b.tensors().iter().map(|t| t.len()).collect();
    if la != lb {
        return Err(Error::shape("gradient does not match parameters"));
    }
    Ok(())
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: &ModelConfig) -> Self {
        AdamState {
            step: 0,
            m: ModelParams::zeros(config),
            v: ModelParams::zeros(config),
        }
    }
}

pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_same_shape(params, grads)?;
    check_same_shape(params, &state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::of(1.0 - beta1.powi(t));
    let c2 = T::of(1.0 - beta2.powi(t));
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one, lr, eps) = (T::one(), T::of(lr), T::of(eps));
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

enum OptState {
    Sgd,
    Adam(Box<AdamState<f32>>, f64, f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch\ttrain_loss\tval_loss\tseconds`
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss, earliest on ties.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss. Up to `patience` consecutive epochs
/// without a strict improvement are tolerated; the next one stops training.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Hooks invoked by [`train_from`].
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    /// Called with the new best parameters whenever validation improves.
    fn on_improvement(&mut self, _epoch: usize, _params: &ModelParams<f32>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn evaluate_loss<T: Real>(params: &ModelParams<T>, split: &[Sample<'_, T>]) -> Result<T> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    model::mean_loss(params, split)
}

pub fn train(
    train_set: &[Sample<'_, f32>],
    val_set: &[Sample<'_, f32>],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    let params = model::init_params(model_config)?;
    train_from(params, train_set, val_set, config, &mut ())
}

/// Trains starting from `params` and returns the parameters of the best
/// validation epoch.
pub fn train_from(
    mut params: ModelParams<f32>,
    train_set: &[Sample<'_, f32>],
    val_set: &[Sample<'_, f32>],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptySplit);
    }
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut opt = match config.optimizer {
        Optimizer::Sgd => OptState::Sgd,
        Optimizer::Adam { beta1, beta2, eps } => {
            OptState::Adam(Box::new(AdamState::new(&params.config)), beta1, beta2, eps)
        }
    };
    let mut stopping = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train_set[i]));
            let (loss, mut grads) = model::loss_and_grads(&params, &batch)?;
            if let Some(c) = config.clip_norm {
                clip_gradients(&mut grads, c);
            }
            match &mut opt {
                OptState::Sgd => sgd_step(&mut params, &grads, config.lr)?,
                OptState::Adam(state, b1, b2, eps) => {
                    adam_step(&mut params, &grads, state, config.lr, *b1, *b2, *eps)?
                }
            }
            loss_sum += loss as f64;
            batches += 1;
        }
        if !params.all_finite() {
            return Err(Error::NumericError);
        }
        let val_loss = evaluate_loss(&params, val_set)? as f64;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        observer.on_epoch(&record)?;
        epochs.push(record);
        match stopping.observe(epoch, val_loss) {
            StopDecision::Improved => {
                best.clone_from(&params);
                observer.on_improvement(epoch, &best)?;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch: stopping.best_epoch(),
        },
    ))
}
