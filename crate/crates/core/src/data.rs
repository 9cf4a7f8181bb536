//! In-memory datasets of (input, target) image pairs with a precomputed
//! restriction pyramid.

use rand::Rng;

use crate::autodiff::avgpool2;
use crate::error::{Error, Result};
use crate::mesh::{crop, CropOffset, MeshLevel};
use crate::tensor::Tensor;

/// One training pair at the finest resolution. `input` and `target` are
/// `[1, C, H, W]`. When `noise_level` is set, the model input carries it as
/// an extra constant channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
    pub noise_level: Option<f64>,
}

/// A batch prepared for one model evaluation at one mesh level.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor,
    pub target: Tensor,
    pub level: MeshLevel,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.input.shape()[2]
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    /// `pyramid[d][i]` is sample `i` restricted `d` times.
    pyramid: Vec<Vec<(Tensor, Tensor)>>,
    size: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
        let [_, c_in, h, w] = first.input.dims4("dataset")?;
        let [_, c_out, ..] = first.target.dims4("dataset")?;
        if h != w {
            return Err(Error::invalid(format!("images must be square, got {h}x{w}")));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.input.shape() != [1, c_in, h, w] || s.target.shape() != [1, c_out, h, w] {
                return Err(Error::shape(
                    "dataset",
                    format!("sample {i} has shapes {:?}/{:?}", s.input.shape(), s.target.shape()),
                ));
            }
            if s.noise_level.is_some() != first.noise_level.is_some() {
                return Err(Error::invalid("noise levels must be set for all samples or none"));
            }
        }
        let mut pyramid = vec![samples.iter().map(|s| (s.input.clone(), s.target.clone())).collect::<Vec<_>>()];
        let mut side = h;
        while side % 2 == 0 && side > 1 {
            let prev = pyramid.last().expect("pyramid has a base level");
            let next = prev
                .iter()
                .map(|(u, y)| Ok((avgpool2(u)?, avgpool2(y)?)))
                .collect::<Result<Vec<_>>>()?;
            pyramid.push(next);
            side /= 2;
        }
        Ok(Self { samples, pyramid, size: h })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Side length at the finest level.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn input_channels(&self) -> usize {
        self.samples[0].input.shape()[1]
    }

    pub fn target_channels(&self) -> usize {
        self.samples[0].target.shape()[1]
    }

    pub fn is_conditioned(&self) -> bool {
        self.samples[0].noise_level.is_some()
    }

    /// Channels the model sees, including the noise-level channel.
    pub fn model_input_channels(&self) -> usize {
        self.input_channels() + usize::from(self.is_conditioned())
    }

    /// Number of mesh levels available (restriction keeps sizes integral).
    pub fn max_levels(&self) -> usize {
        self.pyramid.len()
    }

    /// Stacks samples `ids` restricted to `level`.
    pub fn batch(&self, ids: &[usize], level: MeshLevel) -> Result<Batch> {
        if ids.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let tier = self.pyramid.get(level.depth()).ok_or_else(|| {
            Error::invalid(format!("mesh level {level} is beyond the {} available levels", self.pyramid.len()))
        })?;
        let mut inputs = Vec::with_capacity(ids.len());
        let mut targets = Vec::with_capacity(ids.len());
        for &i in ids {
            let (u, y) = tier
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample id {i} out of range for {} samples", tier.len())))?;
            inputs.push(self.condition(u, i)?);
            targets.push(y);
        }
        Ok(Batch {
            input: Tensor::stack_batch(&inputs.iter().collect::<Vec<_>>())?,
            target: Tensor::stack_batch(&targets)?,
            level,
        })
    }

    /// Finest-level crops of samples `ids`, one independent offset per sample.
    pub fn crop_batch<R: Rng + ?Sized>(
        &self,
        ids: &[usize],
        size: usize,
        rng: &mut R,
    ) -> Result<(Batch, Vec<CropOffset>)> {
        let full = self.batch(ids, MeshLevel::FINEST)?;
        let (input, offsets) = crop(&full.input, size, rng)?;
        let target = crate::mesh::crop_at(&full.target, size, &offsets)?;
        Ok((Batch { input, target, level: MeshLevel::FINEST }, offsets))
    }

    fn condition(&self, u: &Tensor, i: usize) -> Result<Tensor> {
        match self.samples[i].noise_level {
            None => Ok(u.clone()),
            Some(t) => append_constant_channel(u, t),
        }
    }
}

/// Appends a channel filled with `value` to a `[1, C, H, W]` tensor.
pub fn append_constant_channel(u: &Tensor, value: f64) -> Result<Tensor> {
    let [n, c, h, w] = u.dims4("append_constant_channel")?;
    let mut data = Vec::with_capacity(n * (c + 1) * h * w);
    for b in 0..n {
        data.extend_from_slice(&u.data()[b * c * h * w..(b + 1) * c * h * w]);
        data.extend(std::iter::repeat_n(value, h * w));
    }
    Tensor::new(vec![n, c + 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: f64, t: Option<f64>) -> Sample {
        Sample {
            input: Tensor::from_fn(&[1, 1, 4, 4], |i| v + i as f64),
            target: Tensor::full(&[1, 1, 4, 4], v),
            noise_level: t,
        }
    }

    #[test]
    fn batches_are_restricted_and_conditioned() {
        let d = Dataset::new(vec![sample(0.0, Some(0.3)), sample(1.0, Some(0.7))]).unwrap();
        assert_eq!(d.max_levels(), 3);
        let b = d.batch(&[1, 0], MeshLevel::new(2).unwrap()).unwrap();
        assert_eq!(b.input.shape(), &[2, 2, 2, 2]);
        // sample 1, channel 0 block means, then the t channel
        assert_eq!(&b.input.data()[..8], &[3.5, 5.5, 11.5, 13.5, 0.7, 0.7, 0.7, 0.7]);
        assert_eq!(b.target.shape(), &[2, 1, 2, 2]);
        assert!(d.batch(&[], MeshLevel::FINEST).is_err());
        assert!(d.batch(&[2], MeshLevel::FINEST).is_err());
        assert!(d.batch(&[0], MeshLevel::new(4).unwrap()).is_err());
    }

    #[test]
    fn mixed_conditioning_is_rejected() {
        assert!(Dataset::new(vec![sample(0.0, Some(0.3)), sample(1.0, None)]).is_err());
        assert!(Dataset::new(vec![]).is_err());
    }
}
