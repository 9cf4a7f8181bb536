//! Synthetic tasks, raster ingestion, experiments and CSV output.

pub mod csv;
pub mod desk;
pub mod experiments;
pub mod raster;
pub mod report;

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BLUR_SIGMA: f64 = 3.0;
pub const DEFAULT_BLUR_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Denoise,
    Deblur,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Denoise => "denoise",
            TaskKind::Deblur => "deblur",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(TaskKind::Denoise),
            "deblur" => Ok(TaskKind::Deblur),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// A smooth random field on a `size x size` grid sampled at cell centres:
/// four plane waves of at most 4 cycles per axis plus three Gaussian blobs,
/// min-max normalized to `[0, 1]`.
pub fn smooth_field<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| [rng.random_range(-4.0..=4.0), rng.random_range(-4.0..=4.0), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0)])
        .collect();
    let blobs: Vec<[f64; 4]> = (0..3)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.08..0.25), rng.random_range(-1.0..1.0)])
        .collect();
    let mut v = Vec::with_capacity(size * size);
    for iy in 0..size {
        let y = (iy as f64 + 0.5) / size as f64;
        for ix in 0..size {
            let x = (ix as f64 + 0.5) / size as f64;
            let mut s = 0.0;
            for [fx, fy, phase, amp] in &waves {
                s += amp * (2.0 * PI * (fx * x + fy * y) + phase).sin();
            }
            for [cx, cy, width, amp] in &blobs {
                s += amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * width * width)).exp();
            }
            v.push(s);
        }
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    v.iter_mut().for_each(|s| *s = (*s - lo) / span);
    v
}

/// `n` single-channel smooth images `[1, 1, size, size]`.
pub fn smooth_images<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<Tensor> {
    (0..n)
        .map(|_| Tensor::new(vec![1, 1, size, size], smooth_field(size, rng)).expect("shape matches"))
        .collect()
}

/// `u = t y + (1 - t) z`, with `t` carried as the noise level.
pub fn denoise_sample(target: &Tensor, t: f64, noise: &Tensor) -> Result<Sample> {
    target.check_same_shape(noise, "denoise")?;
    let input = target.data().iter().zip(noise.data()).map(|(y, z)| t * y + (1.0 - t) * z).collect();
    Ok(Sample { input: Tensor::new(target.shape().to_vec(), input)?, target: target.clone(), noise_level: Some(t) })
}

fn check_pow2(size: usize) -> Result<()> {
    if !size.is_power_of_two() {
        return Err(Error::invalid(format!("image size {size} is not a power of two")));
    }
    Ok(())
}

/// Denoising pairs from clean targets: `t ~ U[0,1]` per image and standard
/// normal noise per pixel.
pub fn degrade_denoise<R: Rng + ?Sized>(targets: &[Tensor], rng: &mut R) -> Result<Dataset> {
    let samples = targets
        .iter()
        .map(|y| {
            let t: f64 = rng.random_range(0.0..=1.0);
            let z = Tensor::from_fn(y.shape(), |_| rng.sample(StandardNormal));
            denoise_sample(y, t, &z)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

pub fn gen_denoise<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Result<Dataset> {
    check_pow2(size)?;
    let targets = smooth_images(n, size, rng);
    degrade_denoise(&targets, rng)
}

/// Normalized Gaussian `exp(-(x^2 + y^2) / sigma^2)` truncated at radius
/// `ceil(3 sigma)`, row-major `(2r+1)^2`.
pub fn blur_kernel(sigma: f64) -> Result<(Vec<f64>, usize)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as usize;
    let d = 2 * r + 1;
    let mut k = Vec::with_capacity(d * d);
    for y in 0..d {
        for x in 0..d {
            let (dy, dx) = (y as f64 - r as f64, x as f64 - r as f64);
            k.push((-(dx * dx + dy * dy) / (sigma * sigma)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok((k, r))
}

/// Convolves every plane of `[N, C, H, W]` with the blur kernel, replicating
/// edge pixels outside the image.
pub fn blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let [n, c, h, w] = image.dims4("blur")?;
    let (k, r) = blur_kernel(sigma)?;
    let d = 2 * r + 1;
    if d > h || d > w {
        return Err(Error::invalid(format!("blur kernel of width {d} exceeds image {h}x{w}")));
    }
    let mut out = vec![0.0; image.numel()];
    for p in 0..n * c {
        let src = &image.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for ky in 0..d {
                    let sy = (y + ky).saturating_sub(r).min(h - 1);
                    for kx in 0..d {
                        let sx = (x + kx).saturating_sub(r).min(w - 1);
                        s += k[ky * d + kx] * src[sy * w + sx];
                    }
                }
                dst[y * w + x] = s;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Deblurring pairs `u = K y + eps z`.
pub fn degrade_deblur<R: Rng + ?Sized>(targets: &[Tensor], sigma: f64, eps: f64, rng: &mut R) -> Result<Dataset> {
    let samples = targets
        .iter()
        .map(|y| {
            let mut u = blur(y, sigma)?;
            if eps != 0.0 {
                u.data_mut().iter_mut().for_each(|v| *v += eps * rng.sample::<f64, _>(StandardNormal));
            }
            Ok(Sample { input: u, target: y.clone(), noise_level: None })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

pub fn gen_deblur<R: Rng + ?Sized>(n: usize, size: usize, sigma: f64, rng: &mut R) -> Result<Dataset> {
    check_pow2(size)?;
    let targets = smooth_images(n, size, rng);
    degrade_deblur(&targets, sigma, DEFAULT_BLUR_NOISE, rng)
}

/// Training and evaluation data for one task.
#[derive(Debug, Clone)]
pub struct Task {
    pub kind: TaskKind,
    pub train: Dataset,
    pub eval: Dataset,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub blur_sigma: f64,
    pub blur_noise: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, size: usize, n_train: usize, n_eval: usize, seed: u64) -> Self {
        Self { kind, size, n_train, n_eval, seed, blur_sigma: DEFAULT_BLUR_SIGMA, blur_noise: DEFAULT_BLUR_NOISE }
    }

    fn degrade(&self, targets: &[Tensor], rng: &mut ChaCha8Rng) -> Result<Dataset> {
        match self.kind {
            TaskKind::Denoise => degrade_denoise(targets, rng),
            TaskKind::Deblur => degrade_deblur(targets, self.blur_sigma, self.blur_noise, rng),
        }
    }

    /// Synthetic smooth targets.
    pub fn build(&self) -> Result<Task> {
        check_pow2(self.size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let targets = smooth_images(self.n_train + self.n_eval, self.size, &mut rng);
        self.split(targets, &mut rng)
    }

    /// Targets from raster files, which must all be `size x size`.
    pub fn build_from_rasters(&self, paths: &[&Path]) -> Result<Task> {
        check_pow2(self.size)?;
        let mut targets = Vec::with_capacity(paths.len());
        for p in paths {
            let t = raster::load_raster(p)?;
            let [_, _, h, w] = t.dims4("raster")?;
            if h != self.size || w != self.size {
                return Err(Error::invalid(format!("{} is {h}x{w}, task needs {1}x{1}", p.display(), self.size)));
            }
            targets.push(t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.split(targets, &mut rng)
    }

    fn split(&self, targets: Vec<Tensor>, rng: &mut ChaCha8Rng) -> Result<Task> {
        if self.n_eval == 0 || targets.len() < self.n_eval + 1 {
            return Err(Error::invalid(format!("need at least {} images, have {}", self.n_eval + 1, targets.len())));
        }
        let split = targets.len() - self.n_eval;
        let train = self.degrade(&targets[..split], rng)?;
        let eval = self.degrade(&targets[split..], rng)?;
        Ok(Task { kind: self.kind, train, eval, size: self.size, seed: self.seed })
    }
}
