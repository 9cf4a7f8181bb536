//! Numerical experiments on smooth synthetic data: the 1-D convolution
//! example, gradient residual order, coarsening versus cropping, and
//! estimator variance.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::mesh::{crop, fit_rnorm, grad_residual, restrict1d, MeshLevel, RnormFit};
use crate::mge::{estimate_term_variance, single_scale_gradient, LevelPlan, RandomSampler, TermVariance};
use crate::models::{build, loss_and_grad, Model, ModelConfig};
use crate::tensor::{Params, Tensor};

use super::{degrade_deblur, smooth_images, DEFAULT_BLUR_SIGMA};

/// Small random-init model used by the analysis experiments.
pub fn analysis_model() -> ModelConfig {
    ModelConfig::convstack(vec![1, 8, 1]).with_zero_final(false)
}

/// Noise-free blurred smooth images at `size`: smooth inputs and targets.
pub fn smooth_pairs(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let targets = smooth_images(n, size, rng);
    degrade_deblur(&targets, DEFAULT_BLUR_SIGMA, 0.0, rng)
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// 1-D convolution with a linear loss

#[derive(Debug, Clone, PartialEq)]
pub struct Example1Config {
    pub n: usize,
    pub sigmas: Vec<f64>,
    /// Number of meshes; `levels - 1` adjacent pairs are compared.
    pub levels: usize,
    pub seed: u64,
}

impl Default for Example1Config {
    fn default() -> Self {
        Self { n: 256, sigmas: vec![0.0, 0.1, 0.5, 1.0], levels: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example1Row {
    pub sigma: f64,
    /// Pair `i` compares meshes `2^i h` and `2^(i+1) h`.
    pub level_pair: usize,
    pub delta_g: f64,
    pub oracle_delta_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example1Result {
    pub rows: Vec<Example1Row>,
    /// Largest per-coordinate gap between taped and closed-form gradients.
    pub max_oracle_gap: f64,
}

fn smooth_signal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> =
        (0..3).map(|_| (rng.random_range(0.5..3.0), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))).collect();
    (0..n)
        .map(|i| {
            let x = (i as f64 + 0.5) / n as f64;
            waves.iter().map(|(f, p, a)| a * (2.0 * PI * f * x + p).sin()).sum()
        })
        .collect()
}

/// Gradient of `(1/n) (u * theta)^T y` for a centred 3-tap kernel with zero
/// padding, by autodiff.
pub fn example1_grad(u: &[f64], y: &[f64], theta: &[f64; 3]) -> Result<[f64; 3]> {
    let n = u.len();
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::new(vec![1, 1, n], u.to_vec())?)?;
    let target = tape.constant(Tensor::new(vec![1, 1, n], y.to_vec())?)?;
    let kernel = tape.variable(Tensor::new(vec![1, 1, 3], theta.to_vec())?)?;
    let out = tape.conv1d(input, kernel, 1)?;
    let prod = tape.mul(out, target)?;
    let s = tape.sum(prod)?;
    let loss = tape.scale(s, 1.0 / n as f64)?;
    let g = tape.value_with_grad(loss, kernel)?;
    let g = g.grad().expect("kernel gradient");
    Ok([g[0], g[1], g[2]])
}

/// Closed form: `dl/dtheta_k = (1/n) sum_i u_{i+k-1} y_i`, zero outside.
pub fn example1_oracle(u: &[f64], y: &[f64]) -> [f64; 3] {
    let n = u.len();
    let mut g = [0.0; 3];
    for (k, gk) in g.iter_mut().enumerate() {
        for i in 0..n {
            let j = i as isize + k as isize - 1;
            if j >= 0 && (j as usize) < n {
                *gk += u[j as usize] * y[i];
            }
        }
        *gk /= n as f64;
    }
    g
}

pub fn example1(cfg: &Example1Config) -> Result<Example1Result> {
    if cfg.levels < 2 || cfg.n % (1 << (cfg.levels - 1)) != 0 || cfg.n >> (cfg.levels - 1) < 3 {
        return Err(Error::invalid(format!(
            "n = {} must be divisible by 2^(levels-1) = {} with at least 3 points on the coarsest mesh",
            cfg.n,
            1usize << cfg.levels.saturating_sub(1)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u = smooth_signal(cfg.n, &mut rng);
    let y = smooth_signal(cfg.n, &mut rng);
    let z: Vec<f64> = (0..cfg.n).map(|_| rng.sample(StandardNormal)).collect();
    let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let y_t = Tensor::new(vec![cfg.n], y)?;
    let mut rows = Vec::new();
    let mut gap: f64 = 0.0;
    for &sigma in &cfg.sigmas {
        let noisy: Vec<f64> = u.iter().zip(&z).map(|(a, b)| a + sigma * b).collect();
        let u_t = Tensor::new(vec![cfg.n], noisy)?;
        let mut auto = Vec::with_capacity(cfg.levels);
        let mut oracle = Vec::with_capacity(cfg.levels);
        for i in 0..cfg.levels {
            let ui = restrict1d(&u_t, i)?;
            let yi = restrict1d(&y_t, i)?;
            let a = example1_grad(ui.data(), yi.data(), &theta)?;
            let o = example1_oracle(ui.data(), yi.data());
            for (p, q) in a.iter().zip(&o) {
                gap = gap.max((p - q).abs());
            }
            auto.push(a);
            oracle.push(o);
        }
        for i in 0..cfg.levels - 1 {
            rows.push(Example1Row {
                sigma,
                level_pair: i,
                delta_g: diff_norm(&auto[i], &auto[i + 1]),
                oracle_delta_g: diff_norm(&oracle[i], &oracle[i + 1]),
            });
        }
    }
    Ok(Example1Result { rows, max_oracle_gap: gap })
}

// Gradient residual order

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualConfig {
    /// Finest sizes of the compared pairs, largest first.
    pub sizes: Vec<usize>,
    pub n_samples: usize,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self { sizes: vec![128, 64, 32], n_samples: 8, model: analysis_model(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub h: f64,
    pub size: usize,
    pub mean_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualResult {
    pub rows: Vec<ResidualRow>,
    pub fit: RnormFit,
}

fn check_sizes(sizes: &[usize]) -> Result<usize> {
    let max = *sizes.first().ok_or_else(|| Error::invalid("no sizes given"))?;
    for w in sizes.windows(2) {
        if w[0] != 2 * w[1] {
            return Err(Error::invalid(format!("sizes must halve successively, got {sizes:?}")));
        }
    }
    if !max.is_power_of_two() {
        return Err(Error::invalid(format!("size {max} is not a power of two")));
    }
    Ok(max)
}

fn seeded_setup(model: &ModelConfig, n: usize, size: usize, seed: u64) -> Result<(Model, Params, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = smooth_pairs(n, size, &mut rng)?;
    let (m, p) = build(model.clone(), &mut rng)?;
    Ok((m, p, data))
}

/// Mean per-sample `||g^h - g^{2h}||` for each size, with `h = 1/size`.
pub fn residual_order(cfg: &ResidualConfig) -> Result<ResidualResult> {
    let max = check_sizes(&cfg.sizes)?;
    let (model, params, data) = seeded_setup(&cfg.model, cfg.n_samples, max, cfg.seed)?;
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::new();
    for (d, &size) in cfg.sizes.iter().enumerate() {
        let fine = MeshLevel::new(d + 1)?;
        let r = grad_residual(&model, &params, &data, &ids, fine, fine.coarser())?;
        rows.push(ResidualRow { h: 1.0 / size as f64, size, mean_norm: r.mean_norm() });
    }
    let fit = fit_rnorm(&rows.iter().map(|r| (r.h, r.mean_norm)).collect::<Vec<_>>())?;
    Ok(ResidualResult { rows, fit })
}

// Coarsening versus cropping

#[derive(Debug, Clone, PartialEq)]
pub struct CropConfig {
    pub sizes: Vec<usize>,
    pub n_samples: usize,
    /// Fraction of the image area kept by a crop.
    pub crop_fraction: f64,
    pub crop_draws: usize,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { sizes: vec![128, 64, 32], n_samples: 8, crop_fraction: 0.25, crop_draws: 16, model: analysis_model(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropRow {
    pub h: f64,
    pub size: usize,
    pub r_coarsen: f64,
    pub r_crop: f64,
    pub n_samples: usize,
}

/// Side of a square crop covering `fraction` of a `size x size` image.
pub fn crop_side(size: usize, fraction: f64) -> usize {
    ((fraction.sqrt() * size as f64).round() as usize).clamp(1, size)
}

pub fn coarsen_vs_crop(cfg: &CropConfig) -> Result<Vec<CropRow>> {
    if !(cfg.crop_fraction > 0.0 && cfg.crop_fraction <= 1.0) || cfg.crop_draws == 0 {
        return Err(Error::invalid("crop_fraction must lie in (0, 1] and crop_draws must be positive"));
    }
    let max = check_sizes(&cfg.sizes)?;
    let (model, params, data) = seeded_setup(&cfg.model, cfg.n_samples, max, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::new();
    for (d, &size) in cfg.sizes.iter().enumerate() {
        let fine = MeshLevel::new(d + 1)?;
        let r_coarsen = grad_residual(&model, &params, &data, &ids, fine, fine.coarser())?.mean_norm();
        let side = crop_side(size, cfg.crop_fraction);
        let mut total = 0.0;
        for &i in &ids {
            let full = data.batch(&[i], fine)?;
            let g_full = loss_and_grad(&model, &params, &full)?.1.flatten();
            for _ in 0..cfg.crop_draws {
                let (input, offsets) = crop(&full.input, side, &mut rng)?;
                let target = crate::mesh::crop_at(&full.target, side, &offsets)?;
                let g = loss_and_grad(&model, &params, &Batch { input, target, level: fine })?.1.flatten();
                total += diff_norm(&g_full, &g);
            }
        }
        let r_crop = total / (ids.len() * cfg.crop_draws) as f64;
        rows.push(CropRow { h: 1.0 / size as f64, size, r_coarsen, r_crop, n_samples: ids.len() });
    }
    Ok(rows)
}

// Estimator variance

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceConfig {
    pub size: usize,
    pub n_data: usize,
    pub batch: usize,
    pub repeats: usize,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self { size: 32, n_data: 512, batch: 4, repeats: 128, model: analysis_model(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceResult {
    /// `(N, variance)` of the finest-level batch-mean gradient at `N` and `4N`.
    pub scaling: [(usize, f64); 2],
    /// Base and difference terms of a two-level plan with equal batches.
    pub terms: Vec<TermVariance>,
}

impl VarianceResult {
    pub fn ratio(&self) -> f64 {
        self.scaling[0].1 / self.scaling[1].1
    }
}

fn batch_mean_variance(
    model: &Model,
    params: &Params,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
    n: usize,
    repeats: usize,
) -> Result<f64> {
    let mut sampler = RandomSampler::new(ChaCha8Rng::seed_from_u64(rng.random()));
    let gs = (0..repeats)
        .map(|_| Ok(single_scale_gradient(model, params, data, &mut sampler, n, MeshLevel::FINEST)?.grads.flatten()))
        .collect::<Result<Vec<_>>>()?;
    let dim = gs[0].len();
    let mut mean = vec![0.0; dim];
    for g in &gs {
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= repeats as f64);
    Ok(gs.iter().map(|g| diff_norm(g, &mean).powi(2)).sum::<f64>() / (repeats - 1) as f64)
}

pub fn variance(cfg: &VarianceConfig) -> Result<VarianceResult> {
    if cfg.repeats < 2 || cfg.batch == 0 || 4 * cfg.batch > cfg.n_data {
        return Err(Error::invalid("variance needs repeats >= 2 and 0 < 4 * batch <= n_data"));
    }
    let (model, params, data) = seeded_setup(&cfg.model, cfg.n_data, cfg.size, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a71_a2ce);
    let small = batch_mean_variance(&model, &params, &data, &mut rng, cfg.batch, cfg.repeats)?;
    let large = batch_mean_variance(&model, &params, &data, &mut rng, 4 * cfg.batch, cfg.repeats)?;
    let plan = LevelPlan::explicit(vec![cfg.batch, cfg.batch])?;
    let mut sampler = RandomSampler::new(ChaCha8Rng::seed_from_u64(rng.random()));
    let terms = estimate_term_variance(&model, &params, &data, &mut sampler, &plan, cfg.repeats)?;
    Ok(VarianceResult { scaling: [(cfg.batch, small), (4 * cfg.batch, large)], terms })
}
