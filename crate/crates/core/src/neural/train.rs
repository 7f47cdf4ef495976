//! Supervised-then-unsupervised training with Adam and best-validation
//! checkpoint selection.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::loss::{self, RateTarget};
use super::network::{Mode, NetworkModel};
use super::tape::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{KeyFeatures, SystemConfig};
use crate::rng::sub_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_supervised: f64,
    pub lr_unsupervised: f64,
    /// Learning-rate multiplier applied every `decay_every` epochs of a phase.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub epochs_supervised: usize,
    pub epochs_unsupervised: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Training aborts when validation WSR falls below this fraction of the
    /// label WSR after having been above it.
    pub divergence_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_supervised: 0.01,
            lr_unsupervised: 0.001,
            decay_factor: 0.5,
            decay_every: 10,
            batch_size: 256,
            n_train: 50_000,
            n_val: 5_000,
            n_test: 5_000,
            epochs_supervised: 50,
            epochs_unsupervised: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            divergence_ratio: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_supervised, self.lr_unsupervised, self.decay_factor, self.adam_eps];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig("learning rates and decay must be positive".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.n_train == 0 || self.n_val == 0 {
            return Err(Error::InvalidConfig("batch size, decay period and dataset sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam moment coefficients must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr(&self, phase: Phase, epoch_in_phase: usize) -> f64 {
        let base = match phase {
            Phase::Unsupervised => self.lr_unsupervised,
            _ => self.lr_supervised,
        };
        base * self.decay_factor.powi((epoch_in_phase / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Initial,
    Supervised,
    Unsupervised,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Initial => "initial",
            Phase::Supervised => "supervised",
            Phase::Unsupervised => "unsupervised",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_wsr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub initial_val_wsr: f64,
    pub best_val_wsr: f64,
    pub best_epoch: usize,
    /// Mean WSR of the WMMSE labels on the validation set.
    pub label_val_wsr: f64,
}

/// Adam moments for every trainable tensor, in model layer order.
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(model: &NetworkModel) -> Self {
        let zeros: Vec<Tensor> = model
            .layers()
            .flat_map(|l| l.trainable().iter().map(|&i| Tensor::zeros(l.params[i].raw_dim())))
            .collect();
        Self { v: zeros.clone(), m: zeros, t: 0 }
    }

    fn step(&mut self, model: &mut NetworkModel, grads: &[Tensor], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (tc.beta1, tc.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut slot = 0;
        for layer in model.layers_mut() {
            for &i in layer.trainable() {
                let g = &grads[slot];
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                ndarray::Zip::from(&mut layer.params[i]).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + tc.adam_eps);
                });
                slot += 1;
            }
        }
    }
}

/// Mean WSR of the model's recovered precoders on the true channels.
pub fn evaluate(model: &NetworkModel, samples: &[Sample], cfg: &SystemConfig) -> Result<f64> {
    Ok(evaluate_each(model, samples, cfg)?.iter().sum::<f64>() / samples.len().max(1) as f64)
}

/// Per-sample WSR of the model's recovered precoders on the true channels.
pub fn evaluate_each(model: &NetworkModel, samples: &[Sample], cfg: &SystemConfig) -> Result<Vec<f64>> {
    let mut feats: Vec<KeyFeatures> = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let problems: Vec<_> = chunk.iter().map(|s| &s.problem).collect();
        feats.extend(model.predict(&problems)?);
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    exec::par_map(&idx, |&i| loss::features_wsr(&samples[i].problem, &samples[i].truth, cfg, &feats[i]))
        .into_iter()
        .collect()
}

/// One optimization step on a batch; returns the batch loss.
fn batch_step(
    model: &mut NetworkModel,
    adam: &mut Adam,
    batch: &[&Sample],
    phase: Phase,
    lr: f64,
    cfg: &SystemConfig,
    tc: &TrainConfig,
) -> Result<f64> {
    let problems: Vec<_> = batch.iter().map(|s| &s.problem).collect();
    let input = model.prepare(&problems)?;
    let mut tape = Tape::new();
    let fwd = model.forward_tape(&mut tape, &input, Mode::Train);
    let loss = match phase {
        Phase::Supervised => {
            let labels: Vec<&KeyFeatures> = batch.iter().map(|s| &s.labels).collect();
            loss::supervised_on_tape(&mut tape, &fwd, &labels)
        }
        _ => {
            let targets: Vec<RateTarget<'_>> =
                batch.iter().map(|s| RateTarget { problem: &s.problem, truth: &s.truth }).collect();
            loss::unsupervised_on_tape(&mut tape, &fwd, &targets, cfg)?
        }
    };
    let value = tape.value(loss).iter().sum::<f64>();
    if !value.is_finite() {
        return Err(Error::Diverged(format!("non-finite {} loss", phase.name())));
    }
    let grads = tape.backward(loss);
    let mut flat = Vec::new();
    for (layer, vars) in model.layers().zip(&fwd.params) {
        for &i in layer.trainable() {
            flat.push(grads.get_or_zeros(vars[i], &layer.params[i]));
        }
    }
    if flat.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::Diverged(format!("non-finite gradient in {} phase", phase.name())));
    }
    adam.step(model, &flat, lr, tc);
    model.update_running_stats(&fwd.bn_stats, &model.bn_counts(batch.len()));
    Ok(value)
}

/// Runs `epochs` epochs of one phase, updating the best checkpoint.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut NetworkModel,
    best: &mut (NetworkModel, f64, usize),
    report: &mut TrainReport,
    train: &[Sample],
    val: &[Sample],
    cfg: &SystemConfig,
    tc: &TrainConfig,
    phase: Phase,
    epochs: usize,
    lr_override: Option<f64>,
) -> Result<()> {
    let mut adam = Adam::new(model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let floor = tc.divergence_ratio * report.label_val_wsr;
    for e in 0..epochs {
        let epoch = report.curve.len();
        order.shuffle(&mut sub_rng(tc.seed, epoch as u64));
        let lr = match lr_override {
            Some(base) => base * tc.decay_factor.powi((e / tc.decay_every) as i32),
            None => tc.lr(phase, e),
        };
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            total += batch_step(model, &mut adam, &batch, phase, lr, cfg, tc)? * batch.len() as f64;
        }
        let val_wsr = evaluate(model, val, cfg)?;
        report.curve.push(CurvePoint { epoch, phase, train_loss: total / train.len() as f64, val_wsr });
        if val_wsr > best.1 {
            *best = (model.clone(), val_wsr, epoch);
        }
        if !(val_wsr >= floor) && best.1 >= floor {
            return Err(Error::Diverged(format!(
                "epoch {epoch} ({}): validation WSR {val_wsr:.4} below {:.0}% of label WSR {:.4} (best {:.4} at epoch {})",
                phase.name(),
                100.0 * tc.divergence_ratio,
                report.label_val_wsr,
                best.1,
                best.2
            )));
        }
    }
    Ok(())
}

fn start(model: &NetworkModel, val: &[Sample], cfg: &SystemConfig) -> Result<((NetworkModel, f64, usize), TrainReport)> {
    if val.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    let initial = evaluate(model, val, cfg)?;
    let label = val.iter().map(|s| s.label_wsr).sum::<f64>() / val.len() as f64;
    let report = TrainReport {
        curve: vec![CurvePoint { epoch: 0, phase: Phase::Initial, train_loss: f64::NAN, val_wsr: initial }],
        initial_val_wsr: initial,
        best_val_wsr: initial,
        best_epoch: 0,
        label_val_wsr: label,
    };
    Ok(((model.clone(), initial, 0), report))
}

/// Supervised phase followed by the unsupervised phase. Returns the
/// checkpoint with the best validation WSR (the initial model included).
pub fn train(model: NetworkModel, train: &[Sample], val: &[Sample], cfg: &SystemConfig, tc: &TrainConfig) -> Result<(NetworkModel, TrainReport)> {
    tc.validate()?;
    if train.is_empty() && tc.epochs_supervised + tc.epochs_unsupervised > 0 {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let (mut best, mut report) = start(&model, val, cfg)?;
    let mut model = model;
    run_phase(&mut model, &mut best, &mut report, train, val, cfg, tc, Phase::Supervised, tc.epochs_supervised, None)?;
    run_phase(&mut model, &mut best, &mut report, train, val, cfg, tc, Phase::Unsupervised, tc.epochs_unsupervised, None)?;
    report.best_val_wsr = best.1;
    report.best_epoch = best.2;
    Ok((best.0, report))
}

/// Unsupervised fine-tuning at learning rate `lr` (used after pruning).
pub fn fine_tune(
    model: NetworkModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &SystemConfig,
    tc: &TrainConfig,
    lr: f64,
    epochs: usize,
) -> Result<(NetworkModel, TrainReport)> {
    tc.validate()?;
    let (mut best, mut report) = start(&model, val, cfg)?;
    let mut model = model;
    run_phase(&mut model, &mut best, &mut report, train, val, cfg, tc, Phase::Finetune, epochs, Some(lr))?;
    report.best_val_wsr = best.1;
    report.best_epoch = best.2;
    Ok((best.0, report))
}

/// Writes the curve as CSV `epoch,phase,train_loss,val_wsr`.
pub fn write_curve<W: Write>(w: W, curve: &[CurvePoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "phase", "train_loss", "val_wsr"])?;
    for p in curve {
        out.write_record([p.epoch.to_string(), p.phase.name().to_string(), p.train_loss.to_string(), p.val_wsr.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
