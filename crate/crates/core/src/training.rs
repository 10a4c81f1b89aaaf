//! Bidirectional teacher-forced training.
//!
//! Each step encodes the batch images once, runs the decoder over the
//! left-to-right and right-to-left target rows together (both halves attend
//! to the same memory entries) and updates every parameter with Adadelta.

use std::collections::HashMap;
use std::fmt;
use std::time::{Duration, Instant};

use crate::data::{make_bibatch, BiBatch, Sample};
use crate::model::{Model, OptimConfig};
use crate::nn::{Module, Phase, Slot, Visitor};
use crate::numerics::{Float, NumericsError, RngState, Tensor};
use crate::{Error, Result};

/// Loss of one batch.
pub struct BiLoss<T: Float> {
    /// Differentiable scalar: per-sample token mean, averaged over samples
    /// and over the directions present.
    pub total: Tensor<T>,
    /// Left-to-right component on the same per-sample scale.
    pub l2r: f64,
    /// Right-to-left component; `None` when that half was not computed.
    pub r2l: Option<f64>,
    /// Argmax hits over valid target positions of both halves.
    pub correct: usize,
    pub counted: usize,
}

impl<T: Float> BiLoss<T> {
    pub fn value(&self) -> f64 {
        self.total.data()[0].f64()
    }
}

/// Cross-entropy of `l2r[B, L, V]` and optionally `r2l[B, L, V]` against
/// the batch targets.
///
/// Every sample contributes the mean over its valid positions, so samples
/// weigh the same regardless of length. `PAD` targets carry zero weight.
pub fn bidirectional_loss<T: Float>(l2r: &Tensor<T>, r2l: Option<&Tensor<T>>, batch: &BiBatch) -> Result<BiLoss<T>> {
    let (b, l) = (batch.batch, batch.len);
    let halves = if r2l.is_some() { 2 } else { 1 };
    let lengths = batch.lengths();
    let rows = lengths.iter().filter(|&&n| n > 0).count();
    if rows == 0 {
        return Err(NumericsError::Contract("batch has no valid target positions".into()).into());
    }
    let weights: Vec<f64> = batch
        .token_mask
        .iter()
        .enumerate()
        .map(|(i, &m)| if m { 1.0 / (lengths[i / l] * rows * halves) as f64 } else { 0.0 })
        .collect();

    let mut correct = 0;
    let mut half = |logits: &Tensor<T>, targets: &[usize]| -> Result<Tensor<T>> {
        let s = logits.shape();
        if s.len() != 3 || s[0] != b || s[1] != l {
            return Err(NumericsError::Shape { op: "bidirectional_loss", lhs: s.to_vec(), rhs: vec![b, l] }.into());
        }
        let v = s[2];
        for (i, row) in logits.data().chunks_exact(v).enumerate() {
            if batch.token_mask[i] && argmax(row) == targets[i] {
                correct += 1;
            }
        }
        Ok(logits.cross_entropy(targets, &weights)?)
    };
    let lt = half(l2r, &batch.l2r_target)?;
    let l2r_value = lt.data()[0].f64() * halves as f64;
    let (total, r2l_value) = match r2l {
        Some(r) => {
            let rt = half(r, &batch.r2l_target)?;
            let rv = rt.data()[0].f64() * 2.0;
            (lt.add(&rt)?, Some(rv))
        }
        None => (lt, None),
    };
    let counted = batch.token_mask.iter().filter(|&&m| m).count() * halves;
    Ok(BiLoss { total, l2r: l2r_value, r2l: r2l_value, correct, counted })
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Logits for both halves of `batch`: `([B, L, V], Some([B, L, V]))`, or
/// only the left-to-right half when `bidirectional` is false.
pub fn forward_batch<T: Float>(
    model: &Model<T>,
    batch: &BiBatch,
    bidirectional: bool,
    phase: &mut Phase<'_>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (b, l) = (batch.batch, batch.len);
    let pixels = batch.images.iter().map(|&p| T::lit(p as f64)).collect();
    let images = Tensor::new(pixels, &[b, 1, batch.height, batch.width])?;
    let memory = model.encoder.encode(&images, &batch.extents, phase)?;
    let mut rows: Vec<usize> = (0..b).collect();
    let mut ids = batch.l2r_input.clone();
    if bidirectional {
        rows.extend(0..b);
        ids.extend_from_slice(&batch.r2l_input);
    }
    let logits = model.decoder.forward_teacher_forced(&memory, &rows, &ids, l, phase)?;
    if !bidirectional {
        return Ok((logits, None));
    }
    Ok((logits.narrow(0, b)?, Some(logits.narrow(b, b)?)))
}

/// One Adadelta update in place.
///
/// `grad` is the raw gradient; `clip` scales it before weight decay is
/// added. Accumulators hold running means of squared gradients and squared
/// updates.
pub fn adadelta_update(
    theta: &mut [f64],
    grad: &[f64],
    sq_grad: &mut [f64],
    sq_update: &mut [f64],
    config: &OptimConfig,
    clip: f64,
) {
    let OptimConfig { lr, rho, eps, weight_decay, .. } = *config;
    for i in 0..theta.len() {
        let g = grad[i] * clip + weight_decay * theta[i];
        sq_grad[i] = rho * sq_grad[i] + (1.0 - rho) * g * g;
        let delta = ((sq_update[i] + eps).sqrt() / (sq_grad[i] + eps).sqrt()) * g;
        sq_update[i] = rho * sq_update[i] + (1.0 - rho) * delta * delta;
        theta[i] -= lr * delta;
    }
}

#[derive(Clone, Debug, Default)]
struct Accumulators {
    sq_grad: Vec<f64>,
    sq_update: Vec<f64>,
}

/// Adadelta with per-parameter state keyed by parameter path.
#[derive(Clone, Debug)]
pub struct Adadelta {
    pub config: OptimConfig,
    state: HashMap<String, Accumulators>,
    steps: u64,
}

/// What one optimizer step saw.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adadelta {
    pub fn new(config: OptimConfig) -> Self {
        Adadelta { config, state: HashMap::new(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `(squared gradient, squared update)` accumulators of a parameter.
    pub fn accumulators(&self, path: &str) -> Option<(&[f64], &[f64])> {
        self.state.get(path).map(|a| (a.sq_grad.as_slice(), a.sq_update.as_slice()))
    }

    /// Updates every parameter that received a gradient, replacing it with
    /// a fresh leaf. Parameters without a gradient are left untouched.
    ///
    /// Nothing changes if any gradient is non-finite; the error names the
    /// first offending parameter.
    pub fn step<T: Float, M: Module<T>>(&mut self, model: &mut M) -> Result<StepStats> {
        let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
        let mut sq = 0f64;
        for (path, t) in model.named_params() {
            let Some(g) = t.grad() else { continue };
            let g: Vec<f64> = g.iter().map(|v| v.f64()).collect();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {path}")));
            }
            sq += g.iter().map(|v| v * v).sum::<f64>();
            grads.insert(path, g);
        }
        let grad_norm = sq.sqrt();
        let limit = self.config.clip_norm;
        let clipped = limit > 0.0 && grad_norm > limit;
        let clip = if clipped { limit / grad_norm } else { 1.0 };

        let config = self.config.clone();
        let state = &mut self.state;
        let mut err = None;
        let mut f = |path: &str, slot: Slot<'_, T>| {
            let Slot::Param(t) = slot else { return };
            let Some(g) = grads.get(path) else { return };
            let acc = state.entry(path.to_string()).or_insert_with(|| Accumulators {
                sq_grad: vec![0.0; g.len()],
                sq_update: vec![0.0; g.len()],
            });
            let mut theta: Vec<f64> = t.data().iter().map(|v| v.f64()).collect();
            adadelta_update(&mut theta, g, &mut acc.sq_grad, &mut acc.sq_update, &config, clip);
            match Tensor::param(theta.into_iter().map(T::lit).collect(), t.shape()) {
                Ok(nt) => *t = nt,
                Err(e) => err = Some(e),
            }
        };
        model.visit(&mut Visitor::new(&mut f));
        if let Some(e) = err {
            return Err(e.into());
        }
        self.steps += 1;
        Ok(StepStats { grad_norm, clipped })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Train on both target directions; otherwise left-to-right only.
    pub bidirectional: bool,
    /// Stop after the epoch during which this much wall time has passed.
    pub time_budget: Option<Duration>,
    /// Batches per bucket: samples are shuffled, cut into chunks of
    /// `bucket * batch_size`, and sorted by image size inside each chunk
    /// to limit padding. `1` disables bucketing.
    pub bucket: usize,
    /// Stop once an epoch's mean loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 100,
            seed: 0,
            bidirectional: true,
            time_budget: None,
            bucket: 8,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for the reduced preset.
    pub fn toy() -> Self {
        TrainConfig { batch_size: 8, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.bucket == 0 {
            return Err(Error::Config("batch_size and bucket must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `train.*` key without its prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "bidirectional" => self.bidirectional = parse_value(key, value)?,
            "bucket" => self.bucket = parse_value(key, value)?,
            "time_budget" => {
                let secs: f64 = parse_value(key, value)?;
                self.time_budget = (secs > 0.0).then(|| Duration::from_secs_f64(secs));
            }
            "target_loss" => {
                let v: f64 = parse_value(key, value)?;
                self.target_loss = (v > 0.0).then_some(v);
            }
            _ => return Err(Error::Config(format!("unknown key train.{key}"))),
        }
        Ok(())
    }
}

/// Parses a config value, naming the key on failure.
pub fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// One `key = value` line of a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse_config_text(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut out: Vec<ConfigEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", i + 1)));
        };
        let (key, value) = (k.trim().to_string(), v.trim().to_string());
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!("line {}: {key} already set on line {}", i + 1, prev.line)));
        }
        out.push(ConfigEntry { key, value, line: i + 1 });
    }
    Ok(out)
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epoch: usize,
    pub loss: f64,
    pub l2r: f64,
    pub r2l: Option<f64>,
    pub token_accuracy: f64,
    pub steps: usize,
    pub wall_time: Duration,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} loss={:.6} l2r={:.6} ", self.epoch, self.loss, self.l2r)?;
        match self.r2l {
            Some(r) => write!(f, "r2l={r:.6}")?,
            None => write!(f, "r2l=-")?,
        }
        write!(f, " tokacc={:.4} steps={} time={:.1}s", self.token_accuracy, self.steps, self.wall_time.as_secs_f64())
    }
}

/// Why training stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Epochs,
    TimeBudget,
    TargetLoss,
}

pub struct TrainOutcome<T: Float> {
    pub reports: Vec<TrainReport>,
    /// Parameters after the epoch with the best selection score.
    pub best: Model<T>,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub last: Model<T>,
    pub stop: StopReason,
}

/// Model, optimizer and shuffling stream of one training run.
pub struct Trainer<T: Float = f32> {
    pub model: Model<T>,
    pub optim: Adadelta,
    pub config: TrainConfig,
    rng: RngState,
    epoch: usize,
}

impl<T: Float> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optim = Adadelta::new(model.config.optim.clone());
        let rng = RngState::new(config.seed);
        Ok(Trainer { model, optim, config, rng, epoch: 0 })
    }

    /// Sample indices per batch for the next epoch.
    pub fn plan_batches(&mut self, data: &[Sample]) -> Vec<Vec<usize>> {
        let bs = self.config.batch_size;
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let mut batches = Vec::new();
        for chunk in order.chunks_mut(bs * self.config.bucket) {
            if self.config.bucket > 1 {
                chunk.sort_by_key(|&i| (data[i].image.height, data[i].image.width, i));
            }
            batches.extend(chunk.chunks(bs).map(<[usize]>::to_vec));
        }
        if self.config.bucket > 1 {
            self.rng.shuffle(&mut batches);
        }
        batches
    }

    /// Forward, backward and one optimizer step on `batch`.
    pub fn step(&mut self, batch: &BiBatch) -> Result<(f64, f64, Option<f64>, usize, usize)> {
        let mut dropout_rng = self.rng.fork();
        let mut phase = Phase::Train(&mut dropout_rng);
        let (l2r, r2l) = forward_batch(&self.model, batch, self.config.bidirectional, &mut phase)?;
        let loss = bidirectional_loss(&l2r, r2l.as_ref(), batch)?;
        if !loss.value().is_finite() {
            return Err(Error::NonFinite(format!("loss at epoch {} step {}", self.epoch + 1, self.optim.steps() + 1)));
        }
        loss.total.backward()?;
        self.optim.step(&mut self.model)?;
        Ok((loss.value(), loss.l2r, loss.r2l, loss.correct, loss.counted))
    }

    /// One pass over `data`; sample weight in the epoch loss is uniform.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let start = Instant::now();
        let l_cap = self.model.config.decoder.max_positions;
        let (mut loss, mut l2r, mut r2l) = (0f64, 0f64, 0f64);
        let (mut correct, mut counted, mut steps) = (0usize, 0usize, 0usize);
        for idx in self.plan_batches(data) {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let l_max = samples.iter().map(|s| s.tokens.len() + 1).max().unwrap_or(1);
            if l_max > l_cap {
                let s = samples.iter().find(|s| s.tokens.len() + 1 > l_cap).expect("some sample is too long");
                return Err(crate::data::DataError::TooLong { id: s.id.clone(), len: s.tokens.len(), l_max: l_cap }.into());
            }
            let batch = make_bibatch(&samples, l_max)?;
            let (v, a, b, c, n) = self.step(&batch)?;
            let w = samples.len() as f64;
            loss += v * w;
            l2r += a * w;
            r2l += b.unwrap_or(0.0) * w;
            correct += c;
            counted += n;
            steps += 1;
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(TrainReport {
            epoch: self.epoch,
            loss: loss / n,
            l2r: l2r / n,
            r2l: self.config.bidirectional.then_some(r2l / n),
            token_accuracy: correct as f64 / counted.max(1) as f64,
            steps,
            wall_time: start.elapsed(),
        })
    }
}

/// Trains `model` on `data` for up to `config.epochs` epochs.
///
/// `select` scores the model after each epoch (higher is better); without
/// it the epoch's training loss decides. `on_epoch` sees every report and
/// may abort by returning an error.
pub fn train<T: Float>(
    model: Model<T>,
    data: &[Sample],
    config: &TrainConfig,
    mut select: Option<&mut dyn FnMut(&Model<T>) -> Result<f64>>,
    mut on_epoch: impl FnMut(&TrainReport) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    let start = Instant::now();
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut reports = Vec::new();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut stop = StopReason::Epochs;
    for _ in 0..config.epochs {
        let report = trainer.run_epoch(data)?;
        on_epoch(&report)?;
        let score = match select.as_deref_mut() {
            Some(f) => f(&trainer.model)?,
            None => -report.loss,
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, report.epoch, trainer.model.clone()));
        }
        let loss = report.loss;
        reports.push(report);
        if config.target_loss.is_some_and(|t| loss < t) {
            stop = StopReason::TargetLoss;
            break;
        }
        if config.time_budget.is_some_and(|b| start.elapsed() >= b) {
            stop = StopReason::TimeBudget;
            break;
        }
    }
    let last = trainer.model;
    let (best, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (last.clone(), 0),
    };
    Ok(TrainOutcome { reports, best, best_epoch, last, stop })
}

#[cfg(test)]
mod tests;
