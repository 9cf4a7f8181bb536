//! Mesh hierarchy: restriction and cropping of images and signals, plus the
//! cross-resolution gradient residual diagnostics.

use rand::Rng;

use crate::autodiff::avgpool2;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{loss_and_grad, Model};
use crate::tensor::{Params, Tensor};

/// Level `j` of the mesh hierarchy; `j = 1` is the finest mesh and each
/// coarser level doubles the pixel size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MeshLevel(usize);

impl MeshLevel {
    pub const FINEST: MeshLevel = MeshLevel(1);

    pub fn new(j: usize) -> Result<Self> {
        if j == 0 {
            return Err(Error::invalid("mesh levels are numbered from 1"));
        }
        Ok(Self(j))
    }

    pub fn index(self) -> usize {
        self.0
    }

    /// Number of 2x restrictions from the finest mesh.
    pub fn depth(self) -> usize {
        self.0 - 1
    }

    /// Pixel size relative to the finest pixel size `h1`.
    pub fn scale(self, h1: f64) -> f64 {
        h1 * (1u64 << self.depth()) as f64
    }

    /// Side length at this level for a finest side length `size`.
    pub fn size_from(self, size: usize) -> Result<usize> {
        let f = 1usize << self.depth();
        if size % f != 0 {
            return Err(Error::invalid(format!(
                "size {size} is not divisible by 2^{} for mesh level {}",
                self.depth(),
                self.0
            )));
        }
        Ok(size / f)
    }

    pub fn coarser(self) -> MeshLevel {
        MeshLevel(self.0 + 1)
    }
}

impl std::fmt::Display for MeshLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Restricts an `[N, C, H, W]` image `levels` times by 2x2 block averaging.
pub fn restrict(image: &Tensor, levels: usize) -> Result<Tensor> {
    let [_, _, h, w] = image.dims4("restrict")?;
    let f = 1usize.checked_shl(levels as u32).unwrap_or(0);
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(
            "restrict",
            format!("spatial size {h}x{w} is not divisible by 2^{levels}"),
        ));
    }
    let mut out = image.clone();
    for _ in 0..levels {
        out = avgpool2(&out)?;
    }
    Ok(out)
}

/// Restricts a 1-D signal `[n]` by repeated pairwise averaging.
pub fn restrict1d(signal: &Tensor, levels: usize) -> Result<Tensor> {
    let [n] = signal.shape()[..] else {
        return Err(Error::shape("restrict1d", format!("expected [n], got {:?}", signal.shape())));
    };
    let f = 1usize.checked_shl(levels as u32).unwrap_or(0);
    if f == 0 || n % f != 0 {
        return Err(Error::shape("restrict1d", format!("length {n} is not divisible by 2^{levels}")));
    }
    let mut data = signal.data().to_vec();
    for _ in 0..levels {
        data = data.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
    }
    Tensor::new(vec![data.len()], data)
}

/// Top-left corner of one crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropOffset {
    pub y: usize,
    pub x: usize,
}

/// Crops a `size x size` window from every batch element, each at an
/// independent uniformly drawn offset.
pub fn crop<R: Rng + ?Sized>(image: &Tensor, size: usize, rng: &mut R) -> Result<(Tensor, Vec<CropOffset>)> {
    let [n, _, h, w] = image.dims4("crop")?;
    if size == 0 || size > h.min(w) {
        return Err(Error::shape("crop", format!("crop size {size} does not fit in {h}x{w}")));
    }
    let offsets: Vec<CropOffset> = (0..n)
        .map(|_| CropOffset { y: rng.random_range(0..=h - size), x: rng.random_range(0..=w - size) })
        .collect();
    Ok((crop_at(image, size, &offsets)?, offsets))
}

/// Crops with explicit per-element offsets.
pub fn crop_at(image: &Tensor, size: usize, offsets: &[CropOffset]) -> Result<Tensor> {
    let [n, c, h, w] = image.dims4("crop")?;
    if offsets.len() != n {
        return Err(Error::shape("crop", format!("{} offsets for batch of {n}", offsets.len())));
    }
    let mut data = Vec::with_capacity(n * c * size * size);
    for (b, off) in offsets.iter().enumerate() {
        if off.y + size > h || off.x + size > w {
            return Err(Error::shape("crop", format!("offset {off:?} with size {size} exceeds {h}x{w}")));
        }
        for ch in 0..c {
            let plane = &image.data()[(b * c + ch) * h * w..][..h * w];
            for y in off.y..off.y + size {
                data.extend_from_slice(&plane[y * w + off.x..y * w + off.x + size]);
            }
        }
    }
    Tensor::new(vec![n, c, size, size], data)
}

/// Per-sample and batch-mean gradient differences between two mesh levels.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResidual {
    /// `||g_i(fine) - g_i(coarse)||` for every sample.
    pub per_sample: Vec<f64>,
    /// Norm of the batch mean of the differences.
    pub mean_diff_norm: f64,
}

impl GradResidual {
    pub fn mean_norm(&self) -> f64 {
        self.per_sample.iter().sum::<f64>() / self.per_sample.len() as f64
    }
}

/// Gradients of the same samples evaluated at two mesh levels, with inputs
/// and labels restricted identically.
pub fn grad_residual(
    model: &Model,
    params: &Params,
    data: &Dataset,
    ids: &[usize],
    fine: MeshLevel,
    coarse: MeshLevel,
) -> Result<GradResidual> {
    if ids.is_empty() {
        return Err(Error::invalid("grad_residual needs at least one sample"));
    }
    let mut per_sample = Vec::with_capacity(ids.len());
    let mut mean_diff = vec![0.0; params.num_scalars()];
    for &i in ids {
        let gf = loss_and_grad(model, params, &data.batch(&[i], fine)?)?.1.flatten();
        let gc = if fine == coarse {
            gf.clone()
        } else {
            loss_and_grad(model, params, &data.batch(&[i], coarse)?)?.1.flatten()
        };
        let mut sq = 0.0;
        for ((m, a), b) in mean_diff.iter_mut().zip(&gf).zip(&gc) {
            let d = a - b;
            sq += d * d;
            *m += d / ids.len() as f64;
        }
        per_sample.push(sq.sqrt());
    }
    let mean_diff_norm = mean_diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(GradResidual { per_sample, mean_diff_norm })
}

/// Least-squares fit of `norm = B * h^p` in log-log space.
#[derive(Debug, Clone, PartialEq)]
pub struct RnormFit {
    pub b: f64,
    pub p: f64,
    pub residuals: Vec<(f64, f64)>,
}

pub fn fit_rnorm(residuals: &[(f64, f64)]) -> Result<RnormFit> {
    if residuals.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 (h, norm) pairs, got {}", residuals.len())));
    }
    if let Some(bad) = residuals.iter().find(|(h, r)| !(*h > 0.0 && *r > 0.0)) {
        return Err(Error::invalid(format!("(h, norm) pairs must be positive, got {bad:?}")));
    }
    let n = residuals.len() as f64;
    let xs: Vec<f64> = residuals.iter().map(|(h, _)| h.ln()).collect();
    let ys: Vec<f64> = residuals.iter().map(|(_, r)| r.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("all mesh sizes are equal; slope is undefined"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let p = sxy / sxx;
    let b = (my - p * mx).exp();
    if !(p > 0.0 && b.is_finite() && b > 0.0) {
        return Err(Error::invalid(format!("fit produced non-positive constants B={b}, p={p}")));
    }
    Ok(RnormFit { b, p, residuals: residuals.to_vec() })
}
