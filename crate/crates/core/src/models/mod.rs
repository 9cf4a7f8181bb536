//! Resolution-agnostic convolutional models.
//!
//! Every model maps `[N, C_in, H, W]` to `[N, C_out, H, W]` with parameter
//! shapes that do not depend on `H` or `W`, so one parameter set applies at
//! every mesh level.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{ParamVars, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ConvStack,
    ResNet,
    UNet,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::ConvStack => "convstack",
            ModelKind::ResNet => "resnet",
            ModelKind::UNet => "unet",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convstack" => Ok(ModelKind::ConvStack),
            "resnet" => Ok(ModelKind::ResNet),
            "unet" => Ok(ModelKind::UNet),
            other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture description.
///
/// `channels` is interpreted per kind:
/// - convstack: `[in, hidden.., out]`, one conv per consecutive pair;
/// - resnet: `[in, hidden, out]` with `depth` residual blocks;
/// - unet: `[in, f_1, .., f_L, out]`, one encoder/decoder stage per filter count.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub channels: Vec<usize>,
    pub depth: usize,
    pub kernel_size: usize,
    /// Zero-initialize the output layer.
    pub zero_final: bool,
}

impl ModelConfig {
    pub fn convstack(channels: Vec<usize>) -> Self {
        Self { kind: ModelKind::ConvStack, channels, depth: 0, kernel_size: 3, zero_final: true }
    }

    pub fn resnet(c_in: usize, hidden: usize, c_out: usize, blocks: usize) -> Self {
        Self { kind: ModelKind::ResNet, channels: vec![c_in, hidden, c_out], depth: blocks, kernel_size: 3, zero_final: true }
    }

    pub fn unet(c_in: usize, filters: &[usize], c_out: usize) -> Self {
        let mut channels = vec![c_in];
        channels.extend_from_slice(filters);
        channels.push(c_out);
        Self { kind: ModelKind::UNet, channels, depth: 0, kernel_size: 3, zero_final: true }
    }

    /// Desk-scale default architecture for `kind`.
    pub fn default_for(kind: ModelKind, c_in: usize, c_out: usize) -> Self {
        match kind {
            ModelKind::ConvStack => Self::convstack(vec![c_in, 16, 16, c_out]),
            ModelKind::ResNet => Self::resnet(c_in, 32, c_out, 2),
            ModelKind::UNet => Self::unet(c_in, &[8, 16], c_out),
        }
    }

    pub fn with_zero_final(mut self, zero_final: bool) -> Self {
        self.zero_final = zero_final;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated channel list")
    }

    /// Number of pooling stages of a UNet (its filter count).
    pub fn unet_levels(&self) -> usize {
        self.channels.len().saturating_sub(2)
    }

    /// Smallest accepted side length.
    pub fn min_spatial(&self) -> usize {
        match self.kind {
            ModelKind::UNet => 1 << self.unet_levels(),
            _ => self.kernel_size,
        }
    }

    /// Side lengths must be divisible by this.
    pub fn divisor(&self) -> usize {
        match self.kind {
            ModelKind::UNet => 1 << (self.unet_levels() - 1),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid(format!("channel counts must be positive: {:?}", self.channels)));
        }
        match self.kind {
            ModelKind::ConvStack if self.channels.len() < 2 => {
                Err(Error::invalid("convstack needs at least [in, out] channels"))
            }
            ModelKind::ResNet if self.channels.len() != 3 => {
                Err(Error::invalid("resnet channels must be [in, hidden, out]"))
            }
            ModelKind::UNet if self.channels.len() < 3 => {
                Err(Error::invalid("unet channels must be [in, f_1, .., f_L, out] with L >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Checks that an input side length is usable.
    pub fn check_spatial(&self, size: usize) -> Result<()> {
        if size < self.min_spatial() || size % self.divisor() != 0 {
            return Err(Error::invalid(format!(
                "spatial size {size} unsupported by {} (minimum {}, multiple of {})",
                self.kind,
                self.min_spatial(),
                self.divisor()
            )));
        }
        Ok(())
    }
}

/// One convolution layer's parameter names.
#[derive(Debug, Clone)]
struct ConvSpec {
    name: String,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<ConvSpec>,
    ablated_skip: Option<usize>,
}

/// Builds a model and initial parameters. Weights and biases are drawn
/// uniformly from `[-a, a]` with `a = 1/sqrt(fan_in)`; the output layer is
/// zero when `config.zero_final` is set.
pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<(Model, Params)> {
    let model = Model::new(config)?;
    let params = model.init_params(rng);
    Ok((model, params))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let spec = |name: String, c_in: usize, c_out: usize| ConvSpec { name, c_in, c_out };
        let mut layers = Vec::new();
        match config.kind {
            ModelKind::ConvStack => {
                for (i, w) in ch.windows(2).enumerate() {
                    layers.push(spec(format!("conv{i}"), w[0], w[1]));
                }
            }
            ModelKind::ResNet => {
                let hidden = ch[1];
                layers.push(spec("stem".into(), ch[0], hidden));
                for b in 0..config.depth {
                    layers.push(spec(format!("block{b}.conv_a"), hidden, hidden));
                    layers.push(spec(format!("block{b}.conv_b"), hidden, hidden));
                }
                layers.push(spec("head".into(), hidden, ch[2]));
            }
            ModelKind::UNet => {
                let filters = &ch[1..ch.len() - 1];
                let mut prev = ch[0];
                for (l, &f) in filters.iter().enumerate() {
                    layers.push(spec(format!("enc{l}.conv"), prev, f));
                    layers.push(spec(format!("enc{l}.res_a"), f, f));
                    layers.push(spec(format!("enc{l}.res_b"), f, f));
                    prev = f;
                }
                for l in (0..filters.len() - 1).rev() {
                    layers.push(spec(format!("dec{l}.conv"), filters[l + 1], filters[l]));
                    layers.push(spec(format!("dec{l}.res_a"), filters[l], filters[l]));
                    layers.push(spec(format!("dec{l}.res_b"), filters[l], filters[l]));
                }
                layers.push(spec("head".into(), filters[0], ch[ch.len() - 1]));
            }
        }
        Ok(Self { config, layers, ablated_skip: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Drops the additive skip connection of UNet stage `level` (0-based).
    /// Used to check that skips are wired.
    pub fn with_ablated_skip(mut self, level: usize) -> Self {
        self.ablated_skip = Some(level);
        self
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        let k = self.config.kernel_size;
        let last = self.layers.len() - 1;
        let mut params = Params::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let wshape = [layer.c_out, layer.c_in, k, k];
            let a = 1.0 / ((layer.c_in * k * k) as f64).sqrt();
            let (w, b) = if i == last && self.config.zero_final {
                (Tensor::zeros(&wshape), Tensor::zeros(&[layer.c_out]))
            } else {
                (
                    Tensor::from_fn(&wshape, |_| rng.random_range(-a..=a)),
                    Tensor::from_fn(&[layer.c_out], |_| rng.random_range(-a..=a)),
                )
            };
            params.insert(format!("{}.weight", layer.name), w);
            params.insert(format!("{}.bias", layer.name), b);
        }
        params
    }

    fn conv(&self, tape: &mut Tape, pv: &ParamVars, name: &str, x: Var) -> Result<Var> {
        let w = pv.get(&format!("{name}.weight"))?;
        let b = pv.get(&format!("{name}.bias"))?;
        tape.conv2d(x, w, b, (self.config.kernel_size - 1) / 2)
    }

    fn conv_relu(&self, tape: &mut Tape, pv: &ParamVars, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(tape, pv, name, x)?;
        tape.relu(y)
    }

    /// `x + conv_b(relu(conv_a(x)))`
    fn res_block(&self, tape: &mut Tape, pv: &ParamVars, a: &str, b: &str, x: Var) -> Result<Var> {
        let h = self.conv_relu(tape, pv, a, x)?;
        let h = self.conv(tape, pv, b, h)?;
        tape.add(x, h)
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, input: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(input).dims4("forward")?;
        if c != self.config.in_channels() {
            return Err(Error::shape(
                "forward",
                format!("model expects {} input channels, got {c}", self.config.in_channels()),
            ));
        }
        if h != w {
            return Err(Error::shape("forward", format!("input must be square, got {h}x{w}")));
        }
        self.config.check_spatial(h)?;
        match self.config.kind {
            ModelKind::ConvStack => {
                let mut x = input;
                let last = self.layers.len() - 1;
                for (i, layer) in self.layers.iter().enumerate() {
                    x = if i == last {
                        self.conv(tape, pv, &layer.name, x)?
                    } else {
                        self.conv_relu(tape, pv, &layer.name, x)?
                    };
                }
                Ok(x)
            }
            ModelKind::ResNet => {
                let mut x = self.conv_relu(tape, pv, "stem", input)?;
                for b in 0..self.config.depth {
                    x = self.res_block(tape, pv, &format!("block{b}.conv_a"), &format!("block{b}.conv_b"), x)?;
                }
                self.conv(tape, pv, "head", x)
            }
            ModelKind::UNet => {
                let levels = self.config.unet_levels();
                let mut skips = Vec::with_capacity(levels);
                let mut x = input;
                for l in 0..levels {
                    if l > 0 {
                        x = tape.avgpool2(x)?;
                    }
                    x = self.conv_relu(tape, pv, &format!("enc{l}.conv"), x)?;
                    x = self.res_block(tape, pv, &format!("enc{l}.res_a"), &format!("enc{l}.res_b"), x)?;
                    skips.push(x);
                }
                for l in (0..levels - 1).rev() {
                    x = tape.upsample_nearest2(x)?;
                    x = self.conv_relu(tape, pv, &format!("dec{l}.conv"), x)?;
                    if self.ablated_skip != Some(l) {
                        x = tape.add(x, skips[l])?;
                    }
                    x = self.res_block(tape, pv, &format!("dec{l}.res_a"), &format!("dec{l}.res_b"), x)?;
                }
                self.conv(tape, pv, "head", x)
            }
        }
    }

    /// Mean squared error of the prediction for `batch`.
    pub fn loss(&self, tape: &mut Tape, pv: &ParamVars, batch: &Batch) -> Result<Var> {
        let min = self.config.min_spatial();
        if batch.spatial() < min {
            return Err(Error::TooCoarse { level: batch.level.index(), size: batch.spatial(), min });
        }
        let x = tape.constant(batch.input.clone())?;
        let y = tape.constant(batch.target.clone())?;
        let pred = self.forward(tape, pv, x)?;
        tape.mse_loss(pred, y)
    }

    /// Forward pass without keeping a tape for the caller.
    pub fn predict(&self, params: &Params, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = tape.bind_params(params)?;
        let x = tape.constant(input.clone())?;
        let y = self.forward(&mut tape, &pv, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Loss and parameter gradient for one batch on a fresh tape.
pub fn loss_and_grad(model: &Model, params: &Params, batch: &Batch) -> Result<(f64, Params)> {
    let mut tape = Tape::new();
    let pv = tape.bind_params(params)?;
    let loss = model.loss(&mut tape, &pv, batch)?;
    let grads = tape.backward(loss, &pv)?;
    Ok((tape.value(loss).item()?, grads))
}
