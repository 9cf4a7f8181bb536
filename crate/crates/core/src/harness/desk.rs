//! Desk-scale comparison of the three training strategies on synthetic
//! denoising, sharing data and initial parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::{build, ModelConfig};
use crate::trainer::{train, LrSchedule, Metric, OptimizerKind, TrainConfig, TrainHistory};
use crate::wu::Strategy;

use super::{TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DeskConfig {
    pub size: usize,
    pub levels: usize,
    pub n1: usize,
    /// Single-scale and multiscale steps; full multiscale runs
    /// `[I, I/2, I/4, I/8, ..]` from the coarsest stage.
    pub iters: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub channels: Vec<usize>,
    pub lr: f64,
    pub eval_every: u64,
    pub probe_size: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            size: 32,
            levels: 4,
            n1: 2,
            iters: 400,
            n_train: 256,
            n_eval: 32,
            channels: vec![2, 16, 16, 1],
            lr: 2e-3,
            eval_every: 10,
            probe_size: 32,
        }
    }
}

impl DeskConfig {
    /// Halving stage schedule, coarsest stage first.
    pub fn full_schedule(&self) -> Vec<u64> {
        (0..self.levels).map(|s| (self.iters >> s).max(1)).collect()
    }

    pub fn train_config(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        let iters = match strategy {
            Strategy::FullMultiscale => self.full_schedule(),
            _ => vec![self.iters],
        };
        TrainConfig {
            strategy,
            levels: self.levels,
            n1: self.n1,
            iters,
            optimizer: OptimizerKind::Adam,
            lr: self.lr,
            lr_schedule: LrSchedule::Cosine,
            seed,
            eval_every: self.eval_every,
            metric: Metric::Mse,
            reset_optimizer: true,
            probe_size: self.probe_size,
            wall_time: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskRuns {
    pub single: TrainHistory,
    pub multiscale: TrainHistory,
    pub full: TrainHistory,
}

pub fn desk_runs(cfg: &DeskConfig, seed: u64) -> Result<DeskRuns> {
    let task = TaskSpec::new(TaskKind::Denoise, cfg.size, cfg.n_train, cfg.n_eval, seed).build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (model, init) = build(ModelConfig::convstack(cfg.channels.clone()), &mut rng)?;
    let run = |s: Strategy| train(&cfg.train_config(s, seed), &model, init.clone(), &task.train, &task.eval);
    Ok(DeskRuns { single: run(Strategy::Single)?, multiscale: run(Strategy::Multiscale)?, full: run(Strategy::FullMultiscale)? })
}
