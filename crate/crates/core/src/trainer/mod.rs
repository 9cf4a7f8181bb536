//! Training loops: single-scale, multiscale (telescopic estimator every
//! step) and full multiscale (coarse-to-fine with hot starts).

pub mod optim;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mesh::MeshLevel;
use crate::metrics;
use crate::mge::{mge_gradient, LevelPlan, RandomSampler};
use crate::models::Model;
use crate::tensor::Params;
use crate::wu::{Strategy, WorkUnitLedger};

pub use optim::{adam_step, sgd_step, AdamState};

const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over each stage.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Ssim,
}

macro_rules! str_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::invalid(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}

str_enum!(OptimizerKind, "optimizer", OptimizerKind::Sgd => "sgd", OptimizerKind::Adam => "adam");
str_enum!(LrSchedule, "lr schedule", LrSchedule::Constant => "constant", LrSchedule::Cosine => "cosine");
str_enum!(Metric, "metric", Metric::Mse => "mse", Metric::Ssim => "ssim");

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub levels: usize,
    pub n1: usize,
    /// One count for single/multiscale; one per stage, coarsest stage
    /// first, for full multiscale.
    pub iters: Vec<u64>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub eval_every: u64,
    pub metric: Metric,
    /// Fresh optimizer state at every full-multiscale stage.
    pub reset_optimizer: bool,
    /// Training images used for the finest-level probe loss.
    pub probe_size: usize,
    /// Record elapsed seconds in the history (otherwise 0).
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Multiscale,
            levels: 4,
            n1: 16,
            iters: vec![2000],
            optimizer: OptimizerKind::Adam,
            lr: 5e-4,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            eval_every: 100,
            metric: Metric::Mse,
            reset_optimizer: true,
            probe_size: 16,
            wall_time: false,
        }
    }
}

/// One optimization stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub finest: MeshLevel,
    pub plan: LevelPlan,
    pub iters: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.n1 == 0 {
            return Err(Error::invalid("levels and n1 must be positive"));
        }
        let want = match self.strategy {
            Strategy::FullMultiscale => self.levels,
            _ => 1,
        };
        if self.iters.len() != want {
            return Err(Error::invalid(format!(
                "{} expects {want} iteration count(s), got {}",
                self.strategy,
                self.iters.len()
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.eval_every == 0 || self.probe_size == 0 {
            return Err(Error::invalid("eval_every and probe_size must be positive"));
        }
        Ok(())
    }

    /// Stages in execution order.
    pub fn stages(&self) -> Result<Vec<Stage>> {
        self.validate()?;
        let doubling = LevelPlan::doubling(self.levels, self.n1)?;
        match self.strategy {
            Strategy::Single => {
                let images = ((1usize << self.levels) - 1) * self.n1;
                Ok(vec![Stage { finest: MeshLevel::FINEST, plan: LevelPlan::explicit(vec![images])?, iters: self.iters[0] }])
            }
            Strategy::Multiscale => Ok(vec![Stage { finest: MeshLevel::FINEST, plan: doubling, iters: self.iters[0] }]),
            Strategy::FullMultiscale => self
                .iters
                .iter()
                .enumerate()
                .map(|(s, &iters)| {
                    let finest = MeshLevel::new(self.levels - s)?;
                    Ok(Stage { finest, plan: doubling.truncate(finest)?, iters })
                })
                .collect(),
        }
    }

    fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Finest level of the stage that produced these parameters.
    pub level: usize,
    /// Finest-level loss on the training probe subset.
    pub loss: f64,
    /// Evaluation metric on the held-out set.
    pub metric: f64,
    pub wu: BigRational,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpan {
    pub level: usize,
    pub start_step: u64,
    pub iters: u64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
    /// Estimator loss of every step.
    pub step_losses: Vec<f64>,
    pub stages: Vec<StageSpan>,
    pub ledger: WorkUnitLedger,
    pub params: Params,
}

impl TrainHistory {
    pub fn final_record(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    /// Steps of the finest stage taken before the probe loss first falls to
    /// `target * (1 + tol)`. The stage's starting point counts as zero steps.
    pub fn finest_iters_to_reach(&self, target: f64, tol: f64) -> Option<u64> {
        let stage = self.stages.iter().find(|s| s.level == 1)?;
        self.records
            .iter()
            .filter(|r| r.step >= stage.start_step)
            .find(|r| r.loss <= target * (1.0 + tol))
            .map(|r| r.step - stage.start_step)
    }

    /// Mean of the first and last `window` step losses of each stage.
    pub fn stage_trends(&self, window: usize) -> Vec<(usize, f64, f64)> {
        self.stages
            .iter()
            .filter(|s| s.iters > 0)
            .map(|s| {
                let losses = &self.step_losses[s.start_step as usize..(s.start_step + s.iters) as usize];
                let w = window.min(losses.len()).max(1);
                let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
                (s.level, mean(&losses[..w]), mean(&losses[losses.len() - w..]))
            })
            .collect()
    }
}

/// Mean metric of the model over `data` at the finest level.
pub fn evaluate(model: &Model, params: &Params, data: &Dataset, metric: Metric) -> Result<f64> {
    evaluate_ids(model, params, data, &(0..data.len()).collect::<Vec<_>>(), metric)
}

fn evaluate_ids(model: &Model, params: &Params, data: &Dataset, ids: &[usize], metric: Metric) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut total = 0.0;
    for chunk in ids.chunks(EVAL_CHUNK) {
        let b = data.batch(chunk, MeshLevel::FINEST)?;
        let pred = model.predict(params, &b.input)?;
        let v = match metric {
            Metric::Mse => metrics::mse(&pred, &b.target)?,
            Metric::Ssim => metrics::ssim(&pred, &b.target)?,
        };
        total += v * chunk.len() as f64;
    }
    Ok(total / ids.len() as f64)
}

/// Work charged by a run of `config`, without training.
pub fn dry_run(config: &TrainConfig) -> Result<WorkUnitLedger> {
    let mut ledger = WorkUnitLedger::new();
    for stage in config.stages()? {
        let plan = &stage.plan;
        let sizes = plan.batch_sizes();
        let first = plan.finest().index();
        let mut per_level = vec![0u64; sizes.len()];
        per_level[sizes.len() - 1] += sizes[sizes.len() - 1] as u64;
        for (i, &n) in sizes[..sizes.len() - 1].iter().enumerate() {
            per_level[i] += n as u64;
            per_level[i + 1] += n as u64;
        }
        for (i, n) in per_level.into_iter().enumerate() {
            ledger.charge(first + i, n * stage.iters)?;
        }
    }
    Ok(ledger)
}

enum OptState {
    Sgd,
    Adam(AdamState),
}

impl OptState {
    fn new(kind: OptimizerKind, params: &Params) -> Self {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam => OptState::Adam(AdamState::new(params)),
        }
    }

    fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        match self {
            OptState::Sgd => sgd_step(params, grads, lr),
            OptState::Adam(s) => adam_step(s, params, grads, lr),
        }
    }
}

/// Trains `params` on `train` and reports progress on `eval`.
pub fn train(config: &TrainConfig, model: &Model, params: Params, train: &Dataset, eval: &Dataset) -> Result<TrainHistory> {
    let stages = config.stages()?;
    for s in &stages {
        s.plan.validate(train.size(), model)?;
        let need = s.plan.batch_sizes().iter().copied().max().unwrap_or(0);
        if need > train.len() {
            return Err(Error::invalid(format!("batch of {need} exceeds the {} training images", train.len())));
        }
    }
    if eval.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let probe: Vec<usize> = (0..config.probe_size.min(train.len())).collect();
    let clock = Instant::now();
    let mut sampler = RandomSampler::new(ChaCha8Rng::seed_from_u64(config.seed));
    let mut params = params;
    let mut opt = OptState::new(config.optimizer, &params);
    let mut ledger = WorkUnitLedger::new();
    let mut records = Vec::new();
    let mut step_losses = Vec::new();
    let mut spans = Vec::new();
    let mut step = 0u64;

    let record = |step: u64, level: usize, params: &Params, ledger: &WorkUnitLedger| -> Result<EvalRecord> {
        Ok(EvalRecord {
            step,
            level,
            loss: evaluate_ids(model, params, train, &probe, Metric::Mse)?,
            metric: evaluate(model, params, eval, config.metric)?,
            wu: ledger.total().clone(),
            seconds: if config.wall_time { clock.elapsed().as_secs_f64() } else { 0.0 },
        })
    };
    records.push(record(0, stages[0].finest.index(), &params, &ledger)?);

    for (i, stage) in stages.iter().enumerate() {
        if i > 0 && config.reset_optimizer {
            opt = OptState::new(config.optimizer, &params);
        }
        spans.push(StageSpan { level: stage.finest.index(), start_step: step, iters: stage.iters });
        for k in 0..stage.iters {
            let est = mge_gradient(model, &params, train, &mut sampler, &stage.plan).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step, what: "activation" },
                other => other,
            })?;
            if !est.loss.is_finite() {
                return Err(Error::Diverged { step, what: "loss" });
            }
            if !est.grads.is_finite() {
                return Err(Error::Diverged { step, what: "gradient" });
            }
            opt.step(&mut params, &est.grads, config.lr_at(k, stage.iters))?;
            if !params.is_finite() {
                return Err(Error::Diverged { step, what: "parameters" });
            }
            ledger.merge(&est.ledger);
            step_losses.push(est.loss);
            step += 1;
            if (k + 1) % config.eval_every == 0 || k + 1 == stage.iters {
                records.push(record(step, stage.finest.index(), &params, &ledger)?);
            }
        }
    }
    Ok(TrainHistory { records, step_losses, stages: spans, ledger, params })
}
