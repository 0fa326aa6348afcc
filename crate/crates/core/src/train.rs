//! Optimizers and the denoiser training loop.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffusion::{gaussian, loss_total, Batch, LossConfig, NoiseSchedule};
use crate::error::{bail, Result};
use crate::network::{finetune_mask, Bound, Denoiser, FinetuneMode, ModelParams, TrainableSet};
use crate::numerics::{Tape, Tensor, Var};
use crate::spectral::BandSplitter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Plain stochastic gradient with heavy-ball momentum.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Independent drop probability for each label level.
    pub cond_drop: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 16,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cond_drop: 0.1,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            bail!(Config, "batch must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            bail!(Config, "lr must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "momentum and beta coefficients must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            bail!(Config, "adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            bail!(Config, "cond_drop must be in [0, 1], got {}", self.cond_drop);
        }
        Ok(())
    }
}

/// First-order optimizer state over a [`ModelParams`] list. Entries that are
/// not trainable keep no state and are never written.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &ModelParams, mask: &[bool]) -> Self {
        let state = || -> Vec<Option<Vec<f64>>> {
            params
                .iter()
                .zip(mask)
                .map(|(p, &m)| m.then(|| vec![0.0; p.value.len()]))
                .collect()
        };
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            momentum: cfg.momentum,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            first: state(),
            second: if cfg.optimizer == OptimizerKind::Adam { state() } else { vec![None; params.len()] },
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` must be present for every trainable entry.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            bail!(Dimension, "{} gradients for {} parameters", grads.len(), params.len());
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for i in 0..params.len() {
            let Some(m) = self.first[i].as_mut() else { continue };
            let Some(g) = grads[i].as_ref() else {
                bail!(Contract, "missing gradient for trainable parameter {}", params.get(i).name);
            };
            let w = params.value_mut(i).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, m), g) in w.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *m = self.momentum * *m + g;
                        *w -= self.lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second[i].as_mut().expect("adam keeps second moments");
                    for (((w, m), v), g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-step record, one row of `losses.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub org: f64,
    pub high_pix: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossRow {
    pub fn is_finite(&self) -> bool {
        [self.org, self.high_pix, self.rec, self.total].iter().all(|v| v.is_finite())
    }
}

pub const LOSS_CSV_HEADER: &str = "step,L_org,L_high_pix,L_rec,L_EFD";

pub fn loss_csv_row(r: &LossRow) -> String {
    format!("{},{},{},{},{}", r.step, r.org, r.high_pix, r.rec, r.total)
}

/// Owns a model and everything needed to advance it one optimizer step at a
/// time, so callers can interleave checkpointing and logging.
pub struct Trainer {
    model: Denoiser,
    cfg: TrainConfig,
    loss: LossConfig,
    schedule: NoiseSchedule,
    gamma: f64,
    splitter: Rc<BandSplitter>,
    trainable: TrainableSet,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    step: usize,
    step_time_ns: u128,
}

impl Trainer {
    /// `gamma` is the enhancement/degradation blend used by the
    /// reconstruction term; `cutoff` the band-split cutoff.
    pub fn new(
        model: Denoiser,
        cfg: TrainConfig,
        loss: LossConfig,
        schedule: NoiseSchedule,
        gamma: f64,
        cutoff: f64,
        mode: FinetuneMode,
    ) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        if !(0.0..=1.0).contains(&gamma) {
            bail!(Config, "gamma must be in [0, 1], got {gamma}");
        }
        let size = model.config().image_size;
        let splitter = Rc::new(BandSplitter::new(cutoff, size, size)?);
        let trainable = finetune_mask(model.params(), mode);
        let optimizer = Optimizer::new(&cfg, model.params(), &trainable.mask);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            loss,
            schedule,
            gamma,
            splitter,
            trainable,
            optimizer,
            rng,
            step: 0,
            step_time_ns: 0,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn trainable(&self) -> &TrainableSet {
        &self.trainable
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Mean wall time per completed step.
    pub fn mean_step_time_ns(&self) -> f64 {
        self.step_time_ns as f64 / self.step.max(1) as f64
    }

    fn check_compatible(&self, data: &Dataset) -> Result<()> {
        let m = self.model.config();
        let s = &data.spec;
        if s.size != m.image_size || s.channels != m.channels {
            bail!(
                Contract,
                "dataset images are {0}×{0}×{1}, model expects {2}×{2}×{3}",
                s.size,
                s.channels,
                m.image_size,
                m.channels
            );
        }
        if data.hierarchy() != *self.model.hierarchy() {
            bail!(Contract, "dataset label hierarchy does not match the model's");
        }
        Ok(())
    }

    /// Draws a batch, evaluates the composite loss and updates the trainable
    /// parameters.
    pub fn step(&mut self, data: &Dataset) -> Result<LossRow> {
        self.check_compatible(data)?;
        let start = Instant::now();
        let b = self.cfg.batch;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..data.len())).collect();
        let t: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=self.schedule.steps())).collect();
        let (x0, labels) = data.batch(&idx);
        let p = self.cfg.cond_drop;
        let conds: Vec<_> = labels
            .into_iter()
            .map(|c| {
                let drop = (self.rng.random_bool(p), self.rng.random_bool(p));
                c.dropped(drop)
            })
            .collect();
        let eps = gaussian(x0.shape(), &mut self.rng);

        let tape = Tape::new();
        let vars: Vec<Var> = self
            .model
            .params()
            .iter()
            .zip(&self.trainable.mask)
            .map(|(p, &m)| if m { tape.param(p.value.clone()) } else { Var::constant(p.value.clone()) })
            .collect();
        let bound = Bound::from_vars(vars);
        let batch = Batch {
            x0: &x0,
            conds: &conds,
            t: &t,
            eps: &eps,
        };
        let parts = loss_total(&self.model, &bound, &batch, &self.schedule, &self.loss, self.gamma, &self.splitter)?;
        let row = LossRow {
            step: self.step,
            org: parts.org,
            high_pix: parts.high_pix,
            rec: parts.rec,
            total: parts.total_value(),
        };
        if !row.is_finite() {
            bail!(Numeric, "non-finite loss at training step {}", self.step);
        }
        let grads = parts.total.backward()?;
        let per_param: Vec<Option<Tensor>> = bound
            .vars()
            .iter()
            .zip(&self.trainable.mask)
            .map(|(v, &m)| m.then(|| grads.wrt(v)))
            .collect();
        self.optimizer.apply(self.model.params_mut(), &per_param)?;
        self.step += 1;
        self.step_time_ns += start.elapsed().as_nanos();
        Ok(row)
    }

    /// Runs the configured number of steps and returns every loss row.
    pub fn run(&mut self, data: &Dataset) -> Result<Vec<LossRow>> {
        (0..self.cfg.steps).map(|_| self.step(data)).collect()
    }
}
