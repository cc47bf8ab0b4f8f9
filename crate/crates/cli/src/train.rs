//! Minibatch SGD over a dataset split with any backward mode.

use anyhow::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trevsnn_core::engine::{
    backward, ActivationLedger, Adam, BackwardOptions, GradientSet, Mode, Sgd,
};
use trevsnn_core::network::{predict, EffectiveModel, ModelWeights, NetworkConfig};
use trevsnn_core::Tensor;

use crate::config::{LrSchedule, OptimizerKind, RunConfig};
use crate::data::Dataset;

pub const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub ledger_peak_bytes: usize,
    /// Reversible batches whose reconstruction exceeded the bound and were
    /// recomputed with the store-everything pass.
    pub reconstruction_fallbacks: usize,
    pub lr: f64,
}

/// Why an epoch stopped early.
#[derive(Clone, Debug)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub reason: String,
    /// Weights before the offending update.
    pub last_good: ModelWeights,
}

pub enum EpochOutcome {
    Completed(EpochRecord),
    Diverged(Divergence),
}

pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

pub fn accuracy(eff: &EffectiveModel, config: &NetworkConfig, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let pred = argmax_rows(&predict(&x, eff, config)?);
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    fn step(&mut self, lr: f64, weights: &mut ModelWeights, grads: &GradientSet) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => {
                o.lr = lr;
                o.step(weights, grads)?
            }
            Optimizer::Adam(o) => {
                o.lr = lr;
                o.step(weights, grads)?
            }
        }
        Ok(())
    }
}

pub struct Trainer {
    pub mode: Mode,
    pub config: NetworkConfig,
    pub weights: ModelWeights,
    pub opts: BackwardOptions,
    optimizer: Optimizer,
    seed: u64,
    batch_size: usize,
    base_lr: f64,
    schedule: LrSchedule,
    total_steps: usize,
    pub step: usize,
    pub ledger: ActivationLedger,
    fallback: bool,
    shift: usize,
}

impl Trainer {
    pub fn new(run: &RunConfig, mode: Mode, train_len: usize) -> Result<Self> {
        let config = run.network();
        mode.validate(&config)?;
        let weights = ModelWeights::init(&config)?;
        let steps_per_epoch = train_len.div_ceil(run.train.batch_size);
        Ok(Self {
            mode,
            config,
            weights,
            opts: run.backward_options(),
            optimizer: match run.train.optimizer {
                OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(run.train.lr, run.train.momentum)),
                OptimizerKind::Adam => {
                    Optimizer::Adam(Adam::new(run.train.lr, run.train.momentum, run.train.beta2))
                }
            },
            seed: run.seed,
            batch_size: run.train.batch_size,
            base_lr: run.train.lr,
            schedule: run.train.schedule,
            total_steps: (steps_per_epoch * run.train.epochs).max(1),
            step: 0,
            ledger: ActivationLedger::new(),
            fallback: run.train.reconstruction_fallback,
            shift: run.train.augment_shift,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Cosine => {
                let p = (step as f64 / self.total_steps as f64).min(1.0);
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }

    /// Sample order of epoch `epoch` (1-based), a pure function of the seed.
    pub fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
        idx.shuffle(&mut rng);
        idx
    }

    /// Runs one epoch, handing every gradient set to `on_grads` before it is applied.
    pub fn epoch(
        &mut self,
        data: &Dataset,
        epoch: usize,
        mut on_grads: impl FnMut(&GradientSet),
    ) -> Result<EpochOutcome> {
        let order = self.order(data.len(), epoch);
        let mut aug = ChaCha8Rng::seed_from_u64(
            self.seed.wrapping_add(0x5851_f42d_4c95_7f2d) ^ (epoch as u64) << 32,
        );
        let s = self.shift as i64;
        let (mut loss_sum, mut correct, mut peak, mut fallbacks) = (0.0f64, 0usize, 0usize, 0usize);
        let mut lr = self.base_lr;
        for (i, chunk) in order.chunks(self.batch_size).enumerate() {
            let (mut x, y) = data.batch(chunk);
            if s > 0 {
                let shifts: Vec<(i64, i64)> = chunk
                    .iter()
                    .map(|_| (aug.random_range(-s..=s), aug.random_range(-s..=s)))
                    .collect();
                data.shift_batch(&mut x, &shifts);
            }
            let mut r = backward(
                self.mode,
                &x,
                &y,
                &self.weights,
                &self.config,
                &mut self.ledger,
                &self.opts,
            );
            if matches!(r, Err(trevsnn_core::Error::Reconstruction { .. })) && self.fallback {
                fallbacks += 1;
                let mut scratch = ActivationLedger::new();
                r = backward(
                    Mode::Stbp,
                    &x,
                    &y,
                    &self.weights,
                    &self.config,
                    &mut scratch,
                    &self.opts,
                );
            }
            let r = match r {
                Err(trevsnn_core::Error::NonFinite(what)) => {
                    return Ok(EpochOutcome::Diverged(Divergence {
                        epoch,
                        step: i,
                        reason: format!("non-finite value in {what}"),
                        last_good: self.weights.clone(),
                    }))
                }
                r => r?,
            };
            peak = peak.max(self.ledger.peak_bytes());
            let diverged = |reason: String, w: &ModelWeights| {
                Ok(EpochOutcome::Diverged(Divergence {
                    epoch,
                    step: i,
                    reason,
                    last_good: w.clone(),
                }))
            };
            if !r.loss.is_finite() {
                return diverged(format!("loss is {}", r.loss), &self.weights);
            }
            if let Err(e) = r.grads.check_finite() {
                return diverged(e.to_string(), &self.weights);
            }
            on_grads(&r.grads);
            loss_sum += r.loss as f64 * chunk.len() as f64;
            correct += argmax_rows(&r.logits)
                .iter()
                .zip(&y)
                .filter(|(p, l)| p == l)
                .count();
            lr = self.lr_at(self.step);
            let before = self.weights.clone();
            self.optimizer.step(lr, &mut self.weights, &r.grads)?;
            self.step += 1;
            if !self.weights.all_finite() {
                return diverged("weights became non-finite".into(), &before);
            }
        }
        Ok(EpochOutcome::Completed(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            test_accuracy: None,
            ledger_peak_bytes: peak,
            reconstruction_fallbacks: fallbacks,
            lr,
        }))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        accuracy(&self.weights.effective()?, &self.config, data)
    }
}

pub fn metrics_csv(mode: Mode, records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mode,loss,train_accuracy,test_accuracy,ledger_peak_bytes,reconstruction_fallbacks,lr\n");
    for r in records {
        let test = r
            .test_accuracy
            .map(|a| format!("{a:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.8},{:.6},{},{},{},{:.8}\n",
            r.epoch,
            mode.name(),
            r.loss,
            r.train_accuracy,
            test,
            r.ledger_peak_bytes,
            r.reconstruction_fallbacks,
            r.lr
        ));
    }
    out
}
