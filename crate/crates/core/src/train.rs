//! Staged, annealed training loop with resumable state.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use crate::checkpoint::Checkpoint;
use crate::corpus::{batch_at_step, Vocab};
use crate::error::{Error, Result};
use crate::objective::LossBreakdown;
use crate::optim::{Adam, AdamConfig};
use crate::params::Session;
use crate::pe::{apply_freeze, TrainMode, TrainableMask};
use crate::schedule::{beta_at_step, lr_at_step, stage_mask_at_step, TrainSchedule};
use crate::vae::AdaVae;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(schedule: TrainSchedule, batch_size: usize, seed: u64, mode: TrainMode) -> Self {
        Self {
            schedule,
            batch_size,
            seed,
            mode,
            adam: AdamConfig::default(),
        }
    }
}

/// One row of the step log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub beta: f64,
    pub lr: f64,
    pub rec_per_token: f64,
    pub kl_raw: f64,
    pub kl_hinged: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    pub const HEADER: &'static str = "step\tbeta\tlr\trec_nats_per_token\tkl_raw\tkl_hinged\ttotal\tgrad_norm";

    fn new(step: u64, lr: f64, b: &LossBreakdown, batch: usize, grad_norm: f64) -> Self {
        Self {
            step,
            beta: b.beta,
            lr,
            rec_per_token: b.rec_nats * batch as f64 / b.token_count.max(1) as f64,
            kl_raw: b.kl_raw,
            kl_hinged: b.kl_hinged,
            total: b.total,
            grad_norm,
        }
    }
}

/// Tab-separated; floats use the shortest round-trip form.
impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.beta, self.lr, self.rec_per_token, self.kl_raw, self.kl_hinged, self.total, self.grad_norm
        )
    }
}

pub struct Trainer {
    pub model: AdaVae,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub mask: TrainableMask,
    pub sentences: Vec<Vec<usize>>,
    /// Number of optimizer steps already applied.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: AdaVae, sentences: Vec<Vec<usize>>, config: TrainConfig) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::contract("training corpus is empty"));
        }
        if config.batch_size == 0 || config.schedule.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        let mask = apply_freeze(&model.store, config.mode);
        let optimizer = Adam::new(config.adam.clone(), &model.store);
        Ok(Self {
            model,
            optimizer,
            config,
            mask,
            sentences,
            step: 0,
        })
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, sentences: Vec<Vec<usize>>, config: TrainConfig) -> Result<Self> {
        let model = AdaVae::from_store(ckpt.model, ckpt.params)?;
        let mut t = Self::new(model, sentences, config)?;
        if let Some(opt) = ckpt.optimizer {
            t.optimizer = opt;
        }
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self, vocab: &Vocab, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            vocab: vocab.clone(),
            step: self.step,
            meta,
            params: self.model.store.clone(),
            optimizer: Some(self.optimizer.clone()),
            prior: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.schedule.total_steps as u64
    }

    /// Mask in force at the current step.
    pub fn effective_mask(&self) -> TrainableMask {
        stage_mask_at_step(self.step as usize, &self.config.schedule, &self.mask)
    }

    /// One optimizer step. Non-finite loss or gradients abort with
    /// [`Error::NonFinite`] before any parameter changes.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let t = self.step;
        let sched = &self.config.schedule;
        let beta = beta_at_step(t as usize, sched);
        let lr = lr_at_step(t as usize, sched);
        let batch = batch_at_step(&self.sentences, self.config.batch_size, self.config.seed, t);
        let mask = self.effective_mask();
        let (grads, breakdown) = {
            let mut s = Session::new(&self.model.store, Some(mask.flags()));
            let loss =
                self.model
                    .batch_loss(&mut s, &batch, beta, sched.free_bit_lambda, Some((self.config.seed, t)))?;
            (s.backward(loss.total)?, loss.breakdown)
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {} at step {t}", breakdown.total)));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at step {t}")));
        }
        self.optimizer.step(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(StepRecord::new(t, lr, &breakdown, batch.len(), norm))
    }

    /// Trains until `until` steps (capped at the schedule length), writing
    /// one log line per step.
    pub fn run_until(&mut self, until: u64, log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        let end = until.min(self.config.schedule.total_steps as u64);
        let mut out = Vec::new();
        while self.step < end {
            let rec = self.train_step()?;
            writeln!(log, "{rec}")?;
            out.push(rec);
        }
        Ok(out)
    }
}
