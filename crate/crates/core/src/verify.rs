//! Invariant suites shared by `mge verify` and the acceptance tests.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_grad, relative_error, FaultInjection, ParamVars, Tape, Var};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::mesh::MeshLevel;
use crate::mge::{mge_gradient, FullBatch, LevelPlan, ScriptedSampler};
use crate::models::{build, loss_and_grad, ModelConfig, ModelKind};
use crate::tensor::{Params, Tensor};
use crate::trainer::{dry_run, TrainConfig};
use crate::wu::{closed_form, Strategy, WorkUnitLedger};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const TELESCOPE_ABS_TOL: f64 = 1e-12;
pub const UNBIASED_ABS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Telescopic,
    Unbiased,
    Wu,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Grad, Suite::Telescopic, Suite::Unbiased, Suite::Wu];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Grad => "grad",
            Suite::Telescopic => "telescopic",
            Suite::Unbiased => "unbiased",
            Suite::Wu => "wu",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown suite {s:?} (expected grad, telescopic, unbiased or wu)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run(suite: Suite, faults: FaultInjection) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Grad => grad_checks(faults)?,
        Suite::Telescopic => telescopic_checks()?,
        Suite::Unbiased => unbiased_checks()?,
        Suite::Wu => wu_checks()?,
    };
    Ok(SuiteReport { suite, checks })
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn params_of(entries: Vec<(&str, Tensor)>) -> Params {
    let mut p = Params::new();
    for (k, t) in entries {
        p.insert(k, t);
    }
    p
}

/// Worst relative error between taped and finite-difference gradients of
/// the scalar built by `f`.
pub fn worst_grad_error<F>(params: &Params, faults: FaultInjection, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::with_faults(faults);
    let pv = tape.bind_params(params)?;
    let loss = f(&mut tape, &pv)?;
    let grads = tape.backward(loss, &pv)?;
    let fd = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let pv = t.bind_params(p)?;
            let l = f(&mut t, &pv)?;
            t.value(l).item()
        },
        params,
        FD_STEP,
    )?;
    Ok(grads.flatten().iter().zip(fd.flatten()).map(|(a, b)| relative_error(*a, b)).fold(0.0, f64::max))
}

type Builder = Box<dyn Fn(&mut Tape, &ParamVars) -> Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Params, Builder)> {
    let mut cases: Vec<(&'static str, Params, Builder)> = Vec::new();
    let y = random(&[2, 3, 6, 6], rng);
    cases.push((
        "conv2d",
        params_of(vec![("x", random(&[2, 2, 6, 6], rng)), ("k", random(&[3, 2, 3, 3], rng)), ("b", random(&[3], rng))]),
        Box::new(move |t, pv| {
            let c = t.conv2d(pv.get("x")?, pv.get("k")?, pv.get("b")?, 1)?;
            let y = t.constant(y.clone())?;
            t.mse_loss(c, y)
        }),
    ));
    let y = random(&[1, 2, 9], rng);
    cases.push((
        "conv1d",
        params_of(vec![("x", random(&[1, 3, 9], rng)), ("k", random(&[2, 3, 3], rng))]),
        Box::new(move |t, pv| {
            let c = t.conv1d(pv.get("x")?, pv.get("k")?, 1)?;
            let y = t.constant(y.clone())?;
            let m = t.mul(c, y)?;
            t.sum(m)
        }),
    ));
    let w = random(&[1, 2, 2, 2], rng);
    cases.push((
        "avgpool2",
        params_of(vec![("x", random(&[1, 2, 4, 4], rng))]),
        Box::new(move |t, pv| {
            let p = t.avgpool2(pv.get("x")?)?;
            let w = t.constant(w.clone())?;
            let m = t.mul(p, w)?;
            t.sum(m)
        }),
    ));
    let w = random(&[1, 1, 4, 4], rng);
    cases.push((
        "upsample_nearest2",
        params_of(vec![("x", random(&[1, 1, 2, 2], rng))]),
        Box::new(move |t, pv| {
            let u = t.upsample_nearest2(pv.get("x")?)?;
            let w = t.constant(w.clone())?;
            let m = t.mul(u, w)?;
            t.sum(m)
        }),
    ));
    // keep inputs away from the kink
    let x = Tensor::from_fn(&[12], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.4 - i as f64 * 0.1 });
    cases.push((
        "relu",
        params_of(vec![("x", x)]),
        Box::new(|t, pv| {
            let r = t.relu(pv.get("x")?)?;
            let s = t.mul(r, r)?;
            t.sum(s)
        }),
    ));
    cases.push((
        "add_sub_mul_scale",
        params_of(vec![("a", random(&[5], rng)), ("b", random(&[5], rng))]),
        Box::new(|t, pv| {
            let (a, b) = (pv.get("a")?, pv.get("b")?);
            let s = t.add(a, b)?;
            let d = t.sub(a, b)?;
            let m = t.mul(s, d)?;
            let m = t.scale(m, 0.7)?;
            t.sum(m)
        }),
    ));
    let y = random(&[3, 4], rng);
    cases.push((
        "mse_loss",
        params_of(vec![("x", random(&[3, 4], rng))]),
        Box::new(move |t, pv| {
            let y = t.constant(y.clone())?;
            t.mse_loss(pv.get("x")?, y)
        }),
    ));
    cases
}

/// Small configurations of every model kind for end-to-end checks.
pub fn verification_models() -> Vec<ModelConfig> {
    vec![
        ModelConfig::convstack(vec![2, 4, 4, 1]),
        ModelConfig::resnet(2, 4, 1, 2),
        ModelConfig::unet(2, &[3, 4], 1),
    ]
    .into_iter()
    .map(|c| c.with_zero_final(false))
    .collect()
}

fn grad_checks(faults: FaultInjection) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut checks = Vec::new();
    for (name, params, f) in primitive_cases(&mut rng) {
        let worst = worst_grad_error(&params, faults, f)?;
        checks.push(Check::new(format!("{name} vs finite differences"), worst < GRAD_REL_TOL, format!("max rel err {worst:.2e}")));
    }
    for cfg in verification_models() {
        let kind = cfg.kind;
        let (model, params) = build(cfg, &mut rng)?;
        let batch = crate::data::Batch {
            input: random(&[2, 2, 8, 8], &mut rng),
            target: random(&[2, 1, 8, 8], &mut rng),
            level: MeshLevel::FINEST,
        };
        let worst = worst_grad_error(&params, faults, |t, pv| model.loss(t, pv, &batch))?;
        checks.push(Check::new(format!("{kind} end-to-end at 8x8"), worst < GRAD_REL_TOL, format!("max rel err {worst:.2e}")));
    }
    Ok(checks)
}

/// Random smooth-ish dataset for the estimator checks.
pub fn toy_dataset(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| Sample {
            input: Tensor::from_fn(&[1, 2, size, size], |_| rng.random_range(0.0..1.0)),
            target: Tensor::from_fn(&[1, 1, size, size], |_| rng.random_range(0.0..1.0)),
            noise_level: None,
        })
        .collect();
    Dataset::new(samples)
}

/// Largest `|MGE full-batch loss - fine loss|` over `L = 1..=4` for `cfg`.
pub fn telescopic_gap(cfg: &ModelConfig, data: &Dataset, seed: u64) -> Result<f64> {
    let (model, params) = build(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (fine, _) = loss_and_grad(&model, &params, &data.batch(&all, MeshLevel::FINEST)?)?;
    let mut gap: f64 = 0.0;
    for levels in 1..=4 {
        let est = mge_gradient(&model, &params, data, &mut FullBatch, &LevelPlan::doubling(levels, 1)?)?;
        gap = gap.max((est.loss - fine).abs());
    }
    Ok(gap)
}

fn telescopic_checks() -> Result<Vec<Check>> {
    let data = toy_dataset(3, 32, 30)?;
    verification_models()
        .iter()
        .map(|cfg| {
            let gap = telescopic_gap(cfg, &data, 31)?;
            Ok(Check::new(format!("{} full-batch collapse, L=1..4", cfg.kind), gap <= TELESCOPE_ABS_TOL, format!("max gap {gap:.2e}")))
        })
        .collect()
}

/// Largest per-coordinate gap between the exhaustive average of the
/// two-level estimator (`N = [1, 2]`, 4 samples) and the fine gradient.
pub fn unbiased_gap(kind: ModelKind, seed: u64) -> Result<f64> {
    let cfg = verification_models().into_iter().find(|c| c.kind == kind).expect("every kind has a config");
    let data = toy_dataset(4, 8, seed)?;
    let (model, params) = build(cfg, &mut ChaCha8Rng::seed_from_u64(seed + 1))?;
    let plan = LevelPlan::explicit(vec![1, 2])?;
    let pairs: Vec<Vec<usize>> = (0..4).flat_map(|a| (a + 1..4).map(move |b| vec![a, b])).collect();
    let mut sum = vec![0.0; params.num_scalars()];
    let mut count = 0usize;
    for base in &pairs {
        for d in 0..4 {
            let mut s = ScriptedSampler::new([base.clone(), vec![d]]);
            let g = mge_gradient(&model, &params, &data, &mut s, &plan)?.grads.flatten();
            sum.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            count += 1;
        }
    }
    let all: Vec<usize> = (0..4).collect();
    let (_, full) = loss_and_grad(&model, &params, &data.batch(&all, MeshLevel::FINEST)?)?;
    Ok(sum.iter().zip(full.flatten()).map(|(a, b)| (a / count as f64 - b).abs()).fold(0.0, f64::max))
}

fn unbiased_checks() -> Result<Vec<Check>> {
    [ModelKind::ConvStack, ModelKind::ResNet, ModelKind::UNet]
        .into_iter()
        .map(|kind| {
            let gap = unbiased_gap(kind, 40)?;
            Ok(Check::new(format!("{kind} exhaustive two-level average"), gap <= UNBIASED_ABS_TOL, format!("max gap {gap:.2e}")))
        })
        .collect()
}

fn int(v: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

/// Reference work-unit totals: `(label, strategy, iters, expected)` at
/// `N1 = 16`, `L = 4`.
pub fn reference_totals() -> Vec<(&'static str, Strategy, Vec<u64>, BigRational)> {
    vec![
        ("single-scale", Strategy::Single, vec![2000], int(480000)),
        ("multiscale", Strategy::Multiscale, vec![2000], int(74000)),
        ("full multiscale, halving schedule", Strategy::FullMultiscale, vec![2000, 1000, 500, 250], int(28750)),
        ("full multiscale, equal schedule", Strategy::FullMultiscale, vec![2000; 4], int(126000)),
    ]
}

fn wu_checks() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (label, strategy, iters, want) in reference_totals() {
        let closed = closed_form(strategy, 16, &iters, 4)?;
        let cfg = TrainConfig { strategy, levels: 4, n1: 16, iters, ..TrainConfig::default() };
        let ledger = dry_run(&cfg)?;
        let ok = closed == want && *ledger.total() == want;
        checks.push(Check::new(
            format!("{label} total"),
            ok,
            format!("closed form {closed}, ledger {}, expected {want}", ledger.total()),
        ));
    }
    for n in [4i64, 16, 64, 100] {
        let mut step = WorkUnitLedger::new();
        let plan = LevelPlan::explicit(vec![(n / 4) as usize, n as usize])?;
        step.charge(2, n as u64)?;
        step.charge(1, (n / 4) as u64)?;
        step.charge(2, (n / 4) as u64)?;
        let want = BigRational::new(BigInt::from(9 * n), BigInt::from(16));
        checks.push(Check::new(
            format!("two-level step with N={n}"),
            *step.total() == want && plan.step_cost() == want,
            format!("ledger {}, plan {}, expected {want}", step.total(), plan.step_cost()),
        ));
    }
    Ok(checks)
}
