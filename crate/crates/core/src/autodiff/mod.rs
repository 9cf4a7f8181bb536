//! Reverse-mode differentiation over a linear tape of primitive operations.
//!
//! A [`Tape`] owns every intermediate value. Operations append nodes whose
//! inputs already exist on the tape, so the node order is a topological order
//! and one reverse sweep computes all adjoints. Each tape is single-threaded;
//! independent tapes share no state.

pub(crate) mod kernels;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Params, Tensor};
use kernels::{Conv1dDims, Conv2dDims};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, dims: Conv2dDims },
    Conv1d { input: Var, kernel: Var, dims: Conv1dDims },
    AvgPool2 { input: Var },
    Upsample2 { input: Var },
    Relu { input: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Sum { input: Var },
    Mse { pred: Var, target: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Test hooks that deliberately corrupt a backward rule. Used only as a
/// negative control for the gradient verification suite.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultInjection {
    /// Multiplies every conv2d kernel gradient by this factor when set.
    pub conv_kernel_grad_scale: Option<f64>,
}

/// Parameter name to tape node mapping produced by [`Tape::bind_params`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name:?} is not bound on this tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    faults: FaultInjection,
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_faults(faults: FaultInjection) -> Self {
        Self { nodes: Vec::new(), faults }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let t = finite(t, "constant")?;
        Ok(self.push(t, Op::Leaf, false))
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        let t = finite(t, "variable")?;
        Ok(self.push(t, Op::Leaf, true))
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind_params(&mut self, params: &Params) -> Result<ParamVars> {
        let mut vars = IndexMap::new();
        for (name, t) in params.iter() {
            let mut t = t.clone();
            t.clear_grad();
            vars.insert(name.to_string(), self.variable(t)?);
        }
        Ok(ParamVars { vars })
    }

    /// Stride-1 cross-correlation (no kernel flip) with zero padding.
    ///
    /// `input` is `[N, C_in, H, W]`, `kernel` is `[C_out, C_in, k, k]` and
    /// `bias` is `[C_out]`. `padding` must equal `(k - 1) / 2`, so the output
    /// keeps the input's spatial size.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let [n, c_in, h, w] = self.value(input).dims4("conv2d")?;
        let ks = self.value(kernel).shape().to_vec();
        let [c_out, kc_in, k, k2] = ks[..] else {
            return Err(Error::shape("conv2d", format!("kernel must be [C_out, C_in, k, k], got {ks:?}")));
        };
        if kc_in != c_in {
            return Err(Error::shape("conv2d", format!("input channels {c_in} but kernel expects {kc_in}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square with odd size, got {k}x{k2}")));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::shape("conv2d", format!("padding {padding} must be (k-1)/2 = {}", (k - 1) / 2)));
        }
        if h <= padding || w <= padding {
            return Err(Error::shape("conv2d", format!("spatial size {h}x{w} too small for kernel {k}")));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{c_out}], got {:?}", self.value(bias).shape()),
            ));
        }
        let dims = Conv2dDims { n, c_in, c_out, h, w, k, pad: padding };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            dims,
        );
        let t = finite(Tensor::new(vec![n, c_out, h, w], out)?, "conv2d")?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(t, Op::Conv2d { input, kernel, bias, dims }, rg))
    }

    /// Stride-1 1-D cross-correlation with zero padding, no bias.
    /// `input` is `[N, C_in, L]`, `kernel` is `[C_out, C_in, k]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        let is = self.value(input).shape().to_vec();
        let [n, c_in, len] = is[..] else {
            return Err(Error::shape("conv1d", format!("input must be [N, C, L], got {is:?}")));
        };
        let ks = self.value(kernel).shape().to_vec();
        let [c_out, kc_in, k] = ks[..] else {
            return Err(Error::shape("conv1d", format!("kernel must be [C_out, C_in, k], got {ks:?}")));
        };
        if kc_in != c_in {
            return Err(Error::shape("conv1d", format!("input channels {c_in} but kernel expects {kc_in}")));
        }
        if k % 2 == 0 || padding != (k - 1) / 2 {
            return Err(Error::shape("conv1d", format!("kernel size {k} with padding {padding}")));
        }
        let dims = Conv1dDims { n, c_in, c_out, len, k, pad: padding };
        let out = kernels::conv1d_forward(self.value(input).data(), self.value(kernel).data(), dims);
        let t = finite(Tensor::new(vec![n, c_out, len], out)?, "conv1d")?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(t, Op::Conv1d { input, kernel, dims }, rg))
    }

    /// Mean over non-overlapping 2x2 blocks of an `[N, C, H, W]` tensor.
    pub fn avgpool2(&mut self, input: Var) -> Result<Var> {
        let t = avgpool2(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::AvgPool2 { input }, rg))
    }

    /// Nearest-neighbour upsampling that doubles both spatial axes.
    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("upsample_nearest2")?;
        let out = kernels::upsample2_forward(self.value(input).data(), n * c, h, w);
        let t = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Upsample2 { input }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Relu { input }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y, op)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        finite(Tensor::new(x.shape().to_vec(), data)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let t = finite(Tensor::new(x.shape().to_vec(), data)?, "scale")?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Scale { input, factor }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let t = finite(Tensor::scalar(self.value(input).sum()), "sum")?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Sum { input }, rg))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, q) = (self.value(pred), self.value(target));
        p.check_same_shape(q, "mse_loss")?;
        let s: f64 = p.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let t = finite(Tensor::scalar(s / p.numel() as f64), "mse_loss")?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(t, Op::Mse { pred, target }, rg))
    }

    /// Reverse sweep from a scalar `loss`; returns the adjoint of every node
    /// that requires a gradient (or `None`).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
            match slot {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                // Leaves keep their adjoint so callers can read it back.
                grads[idx] = Some(g);
                continue;
            }
            let send = |v: Var, gv: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if self.rg(v) {
                    accumulate(&mut grads[v.0], gv);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are handled above"),
                Op::Conv2d { input, kernel, bias, dims } => {
                    if self.rg(*input) {
                        let gx = kernels::conv2d_backward_input(&g, self.value(*kernel).data(), *dims);
                        send(*input, gx, &mut grads);
                    }
                    if self.rg(*kernel) || self.rg(*bias) {
                        let (mut gk, gb) = kernels::conv2d_backward_params(&g, self.value(*input).data(), *dims);
                        if let Some(f) = self.faults.conv_kernel_grad_scale {
                            gk.iter_mut().for_each(|v| *v *= f);
                        }
                        send(*kernel, gk, &mut grads);
                        send(*bias, gb, &mut grads);
                    }
                }
                Op::Conv1d { input, kernel, dims } => {
                    let (gx, gk) =
                        kernels::conv1d_backward(&g, self.value(*input).data(), self.value(*kernel).data(), *dims);
                    send(*input, gx, &mut grads);
                    send(*kernel, gk, &mut grads);
                }
                Op::AvgPool2 { input } => {
                    let [n, c, h, w] = self.value(*input).dims4("avgpool2")?;
                    send(*input, kernels::avgpool2_backward(&g, n * c, h, w), &mut grads);
                }
                Op::Upsample2 { input } => {
                    let [n, c, h, w] = self.value(*input).dims4("upsample_nearest2")?;
                    send(*input, kernels::upsample2_backward(&g, n * c, h, w), &mut grads);
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    let gx = g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    send(*input, gx, &mut grads);
                }
                Op::Add { a, b } => {
                    send(*b, g.clone(), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Sub { a, b } => {
                    send(*b, g.iter().map(|v| -v).collect(), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Mul { a, b } => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    send(*a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect(), &mut grads);
                    send(*b, g.iter().zip(x).map(|(gv, xv)| gv * xv).collect(), &mut grads);
                }
                Op::Scale { input, factor } => {
                    send(*input, g.iter().map(|v| v * factor).collect(), &mut grads);
                }
                Op::Sum { input } => {
                    send(*input, vec![g[0]; self.value(*input).numel()], &mut grads);
                }
                Op::Mse { pred, target } => {
                    let (p, q) = (self.value(*pred).data(), self.value(*target).data());
                    let c = 2.0 * g[0] / p.len() as f64;
                    let gp: Vec<f64> = p.iter().zip(q).map(|(a, b)| c * (a - b)).collect();
                    if self.rg(*target) {
                        send(*target, gp.iter().map(|v| -v).collect(), &mut grads);
                    }
                    send(*pred, gp, &mut grads);
                }
            }
        }
        Ok(grads)
    }

    /// Gradient of `loss` with respect to every bound parameter.
    ///
    /// Parameters that do not influence the loss receive an all-zero
    /// gradient rather than an error.
    pub fn backward(&self, loss: Var, params: &ParamVars) -> Result<Params> {
        let mut grads = self.gradients(loss)?;
        let mut out = Params::new();
        for (name, var) in params.iter() {
            let shape = self.value(var).shape().to_vec();
            let g = match grads.get_mut(var.0).and_then(Option::take) {
                Some(g) => g,
                None => vec![0.0; self.value(var).numel()],
            };
            let t = Tensor::new(shape, g)?;
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            out.insert(name, t);
        }
        Ok(out)
    }

    /// Value of `var` with its adjoint from a reverse sweep attached to the
    /// gradient slot.
    pub fn value_with_grad(&self, loss: Var, var: Var) -> Result<Tensor> {
        let grads = self.gradients(loss)?;
        let mut t = self.value(var).clone();
        let g = grads
            .get(var.0)
            .cloned()
            .flatten()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g)?;
        Ok(t)
    }
}

/// Pure (untaped) 2x2 mean pooling of an `[N, C, H, W]` tensor.
pub fn avgpool2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("avgpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avgpool2", format!("spatial size {h}x{w} must be even")));
    }
    let out = kernels::avgpool2_forward(x.data(), n * c, h, w);
    Tensor::new(vec![n, c, h / 2, w / 2], out)
}

/// Central finite-difference gradient of `loss_fn` at `params`, one
/// coordinate at a time.
pub fn finite_diff_grad<F>(loss_fn: F, params: &Params, step: f64) -> Result<Params>
where
    F: Fn(&Params) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let base = params.flatten();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        let plus = loss_fn(&params.unflatten_like(&probe)?)?;
        probe[i] = base[i] - step;
        let minus = loss_fn(&params.unflatten_like(&probe)?)?;
        probe[i] = base[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    params.unflatten_like(&grad)
}

/// Relative discrepancy between two gradient values, measured against the
/// larger magnitude with a floor of `1e-3` so coordinates with tiny
/// gradients are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[cfg(test)]
mod tests;
