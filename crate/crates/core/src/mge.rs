//! Multiscale gradient estimation.
//!
//! The fine-mesh gradient is written as a telescopic sum: a base term at the
//! coarsest level `L` plus difference terms `l(h_{j-1}) - l(h_j)` for
//! `j = 2..=L`, each evaluated on its own batch. A difference term uses the
//! same samples at both resolutions, so its variance is small and it can use
//! a small batch.

use std::collections::VecDeque;

use num_rational::BigRational;
use rand::Rng;

use crate::autodiff::{ParamVars, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mesh::{MeshLevel, RnormFit};
use crate::models::Model;
use crate::tensor::Params;
use crate::wu::{self, WorkUnitLedger};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanRule {
    Doubling,
    Explicit,
}

/// Mesh levels `first..first+len` with one batch size each, finest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPlan {
    first: usize,
    batch_sizes: Vec<usize>,
    rule: PlanRule,
}

impl LevelPlan {
    /// `N_j = 2^(j-1) N1` for `j = 1..=levels`.
    pub fn doubling(levels: usize, n1: usize) -> Result<Self> {
        if levels == 0 || n1 == 0 {
            return Err(Error::invalid(format!("plan needs levels >= 1 and N1 >= 1, got {levels} and {n1}")));
        }
        let batch_sizes = (0..levels).map(|j| n1 << j).collect();
        Ok(Self { first: 1, batch_sizes, rule: PlanRule::Doubling })
    }

    pub fn explicit(batch_sizes: Vec<usize>) -> Result<Self> {
        if batch_sizes.is_empty() || batch_sizes.contains(&0) {
            return Err(Error::invalid(format!("batch sizes must be a non-empty list of positive integers, got {batch_sizes:?}")));
        }
        Ok(Self { first: 1, batch_sizes, rule: PlanRule::Explicit })
    }

    /// The same plan without its levels finer than `finest`.
    pub fn truncate(&self, finest: MeshLevel) -> Result<Self> {
        let skip = finest.index().checked_sub(self.first).filter(|&s| s < self.batch_sizes.len());
        let skip = skip.ok_or_else(|| {
            Error::invalid(format!("level {finest} outside plan levels {}..={}", self.first, self.coarsest()))
        })?;
        Ok(Self { first: finest.index(), batch_sizes: self.batch_sizes[skip..].to_vec(), rule: self.rule })
    }

    pub fn rule(&self) -> PlanRule {
        self.rule
    }

    pub fn num_levels(&self) -> usize {
        self.batch_sizes.len()
    }

    pub fn finest(&self) -> MeshLevel {
        MeshLevel::new(self.first).expect("levels start at 1")
    }

    pub fn coarsest(&self) -> MeshLevel {
        MeshLevel::new(self.first + self.batch_sizes.len() - 1).expect("levels start at 1")
    }

    pub fn batch_sizes(&self) -> &[usize] {
        &self.batch_sizes
    }

    /// Batch size at `level`.
    pub fn batch(&self, level: MeshLevel) -> Option<usize> {
        level.index().checked_sub(self.first).and_then(|i| self.batch_sizes.get(i).copied())
    }

    /// Checks that every level is usable for images of side `size`.
    pub fn validate(&self, size: usize, model: &Model) -> Result<()> {
        let coarsest = self.coarsest();
        let s = coarsest.size_from(size)?;
        let min = model.config().min_spatial();
        if s < min {
            return Err(Error::TooCoarse { level: coarsest.index(), size: s, min });
        }
        for j in self.first..=coarsest.index() {
            model.config().check_spatial(MeshLevel::new(j)?.size_from(size)?)?;
        }
        Ok(())
    }

    /// Exact WU of one estimator evaluation under this plan.
    pub fn step_cost(&self) -> BigRational {
        let mut total = wu::cost(self.coarsest().index(), self.batch_sizes[self.batch_sizes.len() - 1] as u64);
        for (i, &n) in self.batch_sizes[..self.batch_sizes.len() - 1].iter().enumerate() {
            let j = self.first + i;
            total += wu::cost(j, n as u64) + wu::cost(j + 1, n as u64);
        }
        total
    }
}

/// Source of sample ids for telescopic terms.
pub trait Sampler {
    /// Draws `n` distinct ids from `0..population`.
    fn draw(&mut self, n: usize, population: usize) -> Result<Vec<usize>>;
}

/// Uniform draws without replacement.
pub struct RandomSampler<R: Rng> {
    rng: R,
}

impl<R: Rng> RandomSampler<R> {
    pub fn new(rng: R) -> Self {
        Self { rng }
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}

impl<R: Rng> Sampler for RandomSampler<R> {
    fn draw(&mut self, n: usize, population: usize) -> Result<Vec<usize>> {
        if n == 0 || n > population {
            return Err(Error::invalid(format!("cannot draw {n} distinct samples from {population}")));
        }
        Ok(rand::seq::index::sample(&mut self.rng, population, n).into_vec())
    }
}

/// Every term uses the whole dataset, ignoring the requested batch size.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullBatch;

impl Sampler for FullBatch {
    fn draw(&mut self, _n: usize, population: usize) -> Result<Vec<usize>> {
        if population == 0 {
            return Err(Error::invalid("empty dataset"));
        }
        Ok((0..population).collect())
    }
}

/// Replays a fixed sequence of draws.
#[derive(Debug, Clone, Default)]
pub struct ScriptedSampler {
    draws: VecDeque<Vec<usize>>,
}

impl ScriptedSampler {
    pub fn new(draws: impl IntoIterator<Item = Vec<usize>>) -> Self {
        Self { draws: draws.into_iter().collect() }
    }
}

impl Sampler for ScriptedSampler {
    fn draw(&mut self, n: usize, population: usize) -> Result<Vec<usize>> {
        let ids = self.draws.pop_front().ok_or_else(|| Error::invalid("scripted sampler exhausted"))?;
        if ids.len() != n || ids.iter().any(|&i| i >= population) {
            return Err(Error::invalid(format!("scripted draw {ids:?} does not fit n={n}, population={population}")));
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Base,
    Diff,
}

/// One term of the telescopic sum. `Base` contributes `l(fine)`; `Diff`
/// contributes `l(fine) - l(coarse)` on the same samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TelescopicTerm {
    pub kind: TermKind,
    pub fine: MeshLevel,
    pub coarse: Option<MeshLevel>,
    pub sample_ids: Vec<usize>,
}

impl TelescopicTerm {
    fn charge(&self, ledger: &mut WorkUnitLedger) -> Result<()> {
        let n = self.sample_ids.len() as u64;
        ledger.charge(self.fine.index(), n)?;
        if let Some(c) = self.coarse {
            ledger.charge(c.index(), n)?;
        }
        Ok(())
    }

    /// Records this term's contribution on `tape`.
    pub fn record(&self, tape: &mut Tape, pv: &ParamVars, model: &Model, data: &Dataset) -> Result<Var> {
        let fine = model.loss(tape, pv, &data.batch(&self.sample_ids, self.fine)?)?;
        match self.coarse {
            None => Ok(fine),
            Some(c) => {
                let coarse = model.loss(tape, pv, &data.batch(&self.sample_ids, c)?)?;
                tape.sub(fine, coarse)
            }
        }
    }

    /// This term's value and gradient on its own tape.
    pub fn gradient(&self, model: &Model, params: &Params, data: &Dataset) -> Result<(f64, Params)> {
        let mut tape = Tape::new();
        let pv = tape.bind_params(params)?;
        let v = self.record(&mut tape, &pv, model, data)?;
        let g = tape.backward(v, &pv)?;
        Ok((tape.value(v).item()?, g))
    }
}

/// Draws the terms of one estimator evaluation: base first, then the
/// difference terms from the finest pair to the coarsest.
pub fn draw_terms<S: Sampler + ?Sized>(sampler: &mut S, plan: &LevelPlan, population: usize) -> Result<Vec<TelescopicTerm>> {
    let sizes = plan.batch_sizes();
    let coarsest = plan.coarsest();
    let mut terms = Vec::with_capacity(sizes.len());
    terms.push(TelescopicTerm {
        kind: TermKind::Base,
        fine: coarsest,
        coarse: None,
        sample_ids: sampler.draw(sizes[sizes.len() - 1], population)?,
    });
    for (i, &n) in sizes[..sizes.len() - 1].iter().enumerate() {
        let fine = MeshLevel::new(plan.finest().index() + i)?;
        terms.push(TelescopicTerm {
            kind: TermKind::Diff,
            fine,
            coarse: Some(fine.coarser()),
            sample_ids: sampler.draw(n, population)?,
        });
    }
    Ok(terms)
}

/// Records the telescopic loss on `tape`. Returns the loss node, the drawn
/// terms and the work charged.
pub fn mge_loss<S: Sampler + ?Sized>(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &Model,
    data: &Dataset,
    sampler: &mut S,
    plan: &LevelPlan,
) -> Result<(Var, Vec<TelescopicTerm>, WorkUnitLedger)> {
    plan.validate(data.size(), model)?;
    let terms = draw_terms(sampler, plan, data.len())?;
    let mut ledger = WorkUnitLedger::new();
    let mut loss: Option<Var> = None;
    for term in &terms {
        let v = term.record(tape, pv, model, data)?;
        term.charge(&mut ledger)?;
        loss = Some(match loss {
            None => v,
            Some(acc) => tape.add(acc, v)?,
        });
    }
    Ok((loss.expect("plan has at least one level"), terms, ledger))
}

/// Per-term diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TermStat {
    pub kind: TermKind,
    pub fine: MeshLevel,
    pub coarse: Option<MeshLevel>,
    pub batch: usize,
    /// Norm of the term's gradient.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub loss: f64,
    pub grads: Params,
    pub ledger: WorkUnitLedger,
    pub terms: Vec<TelescopicTerm>,
    pub term_stats: Option<Vec<TermStat>>,
}

impl GradEstimate {
    pub fn wu_cost(&self) -> &BigRational {
        self.ledger.total()
    }
}

/// Gradient of the telescopic loss.
pub fn mge_gradient<S: Sampler + ?Sized>(
    model: &Model,
    params: &Params,
    data: &Dataset,
    sampler: &mut S,
    plan: &LevelPlan,
) -> Result<GradEstimate> {
    let mut tape = Tape::new();
    let pv = tape.bind_params(params)?;
    let (loss, terms, ledger) = mge_loss(&mut tape, &pv, model, data, sampler, plan)?;
    let grads = tape.backward(loss, &pv)?;
    Ok(GradEstimate { loss: tape.value(loss).item()?, grads, ledger, terms, term_stats: None })
}

/// Like [`mge_gradient`] but also reports each term's gradient norm. Costs
/// one extra gradient evaluation per term; the extra work is not charged.
pub fn mge_gradient_with_stats<S: Sampler + ?Sized>(
    model: &Model,
    params: &Params,
    data: &Dataset,
    sampler: &mut S,
    plan: &LevelPlan,
) -> Result<GradEstimate> {
    let mut est = mge_gradient(model, params, data, sampler, plan)?;
    let stats = est
        .terms
        .iter()
        .map(|t| {
            let (_, g) = t.gradient(model, params, data)?;
            Ok(TermStat { kind: t.kind, fine: t.fine, coarse: t.coarse, batch: t.sample_ids.len(), grad_norm: g.norm() })
        })
        .collect::<Result<Vec<_>>>()?;
    est.term_stats = Some(stats);
    Ok(est)
}

/// Batch-mean gradient at a single level.
pub fn single_scale_gradient<S: Sampler + ?Sized>(
    model: &Model,
    params: &Params,
    data: &Dataset,
    sampler: &mut S,
    n: usize,
    level: MeshLevel,
) -> Result<GradEstimate> {
    let plan = LevelPlan { first: level.index(), batch_sizes: vec![n], rule: PlanRule::Explicit };
    if n == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    mge_gradient(model, params, data, sampler, &plan)
}

/// Empirical variance of one term's gradient over independent redraws.
#[derive(Debug, Clone, PartialEq)]
pub struct TermVariance {
    pub kind: TermKind,
    pub fine: MeshLevel,
    pub coarse: Option<MeshLevel>,
    pub batch: usize,
    pub mean_norm: f64,
    /// `1/(R-1) * sum_r ||g_r - mean(g)||^2`
    pub variance: f64,
}

pub fn estimate_term_variance<S: Sampler + ?Sized>(
    model: &Model,
    params: &Params,
    data: &Dataset,
    sampler: &mut S,
    plan: &LevelPlan,
    repeats: usize,
) -> Result<Vec<TermVariance>> {
    if repeats < 2 {
        return Err(Error::invalid(format!("variance needs at least 2 repeats, got {repeats}")));
    }
    plan.validate(data.size(), model)?;
    let mut draws: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut shape: Vec<TelescopicTerm> = Vec::new();
    for _ in 0..repeats {
        let terms = draw_terms(sampler, plan, data.len())?;
        if draws.is_empty() {
            draws = vec![Vec::with_capacity(repeats); terms.len()];
            shape = terms.clone();
        }
        for (slot, term) in draws.iter_mut().zip(&terms) {
            slot.push(term.gradient(model, params, data)?.1.flatten());
        }
    }
    Ok(shape
        .iter()
        .zip(&draws)
        .map(|(term, gs)| {
            // shifted by the first draw so identical draws give exactly zero
            let r = repeats as f64;
            let mut sum = vec![0.0; gs[0].len()];
            let mut sq = 0.0;
            for g in gs {
                for ((s, a), b) in sum.iter_mut().zip(g).zip(&gs[0]) {
                    let d = a - b;
                    *s += d;
                    sq += d * d;
                }
            }
            let sq = sq - sum.iter().map(|s| s * s).sum::<f64>() / r;
            let norms: f64 = gs.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
            TermVariance {
                kind: term.kind,
                fine: term.fine,
                coarse: term.coarse,
                batch: term.sample_ids.len(),
                mean_norm: norms / repeats as f64,
                variance: (sq / (r - 1.0)).max(0.0),
            }
        })
        .collect())
}

/// Composed error bound `e = C (1/sqrt(N_L) + B sum_{j=2}^L h_{j-1}^p / sqrt(N_{j-1}))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBudget {
    pub c_hat: f64,
    pub b: f64,
    pub p: f64,
    /// Base contribution first, then one per difference term, finest first.
    pub terms: Vec<f64>,
    pub total: f64,
    /// For two-level plans: the finest-level batch of equal accuracy.
    pub equivalent_fine_batch: Option<f64>,
}

/// Finest-level batch of a two-level estimator matching a single-scale batch
/// of `n`: `N_1 = (1 + 2 B h^p)^2 n / 4`.
pub fn equivalent_fine_batch(b: f64, p: f64, h: f64, n: f64) -> f64 {
    0.25 * (1.0 + 2.0 * b * h.powf(p)).powi(2) * n
}

pub fn error_budget(c_hat: f64, fit: &RnormFit, plan: &LevelPlan, h1: f64) -> Result<ErrorBudget> {
    if !(c_hat > 0.0 && h1 > 0.0 && fit.b >= 0.0 && fit.p > 0.0) {
        return Err(Error::invalid("error budget needs positive C, h1, p and non-negative B"));
    }
    let sizes = plan.batch_sizes();
    let mut terms = vec![c_hat / (sizes[sizes.len() - 1] as f64).sqrt()];
    for (i, &n) in sizes[..sizes.len() - 1].iter().enumerate() {
        let h = MeshLevel::new(plan.finest().index() + i)?.scale(h1);
        terms.push(c_hat * fit.b * h.powf(fit.p) / (n as f64).sqrt());
    }
    let total = terms.iter().sum();
    let equivalent_fine_batch =
        (sizes.len() == 2).then(|| equivalent_fine_batch(fit.b, fit.p, plan.finest().scale(h1), sizes[1] as f64));
    Ok(ErrorBudget { c_hat, b: fit.b, p: fit.p, terms, total, equivalent_fine_batch })
}

#[cfg(test)]
mod tests;
