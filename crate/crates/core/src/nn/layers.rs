//! Parameterized building blocks: convolution, batch norm, pointwise linear
//! maps and the conv-BN-ReLU stacks used by the encoder and decoder.

use rand::Rng;

use super::conv::{conv2d, ConvConfig};
use super::norm::{batch_norm_eval, batch_norm_train};
use super::params::{Ctx, Mode, ParamId, ParamKind, ParamStore};
use crate::autodiff::Var;
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Kaiming-normal fan-in initialization, std = √(2 / fan_in).
fn kaiming<T: Element, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cfg: ConvConfig,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        cfg: ConvConfig,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = kaiming(vec![c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng);
        let weight = store.add(format!("{prefix}.weight"), ParamKind::Trainable, w)?;
        let bias = if bias {
            Some(store.add(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros(vec![c_out]))?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, cfg })
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        conv2d(ctx.tape, x, ctx.var(self.weight), self.bias.map(|b| ctx.var(b)), self.cfg)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{prefix}.gamma"), ParamKind::Trainable, Tensor::full(vec![channels], T::one()))?,
            beta: store.add(format!("{prefix}.beta"), ParamKind::Trainable, Tensor::zeros(vec![channels]))?,
            running_mean: store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(vec![channels]))?,
            running_var: store.add(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::full(vec![channels], T::one()))?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = batch_norm_train(ctx.tape, x, gamma, beta, self.eps)?;
                let mo = self.momentum;
                let blend = |old: &Tensor<T>, new: &[f64]| {
                    Tensor::from_fn(old.shape().to_vec(), |i| T::from_f64((1.0 - mo) * old.data()[i].to_f64() + mo * new[i]))
                };
                let mean = blend(ctx.value(self.running_mean), &stats.mean);
                let var = blend(ctx.value(self.running_var), &stats.unbiased_var());
                ctx.record_stat(self.running_mean, mean);
                ctx.record_stat(self.running_var, var);
                Ok(y)
            }
            Mode::Eval => batch_norm_eval(
                ctx.tape,
                x,
                gamma,
                beta,
                ctx.value(self.running_mean),
                ctx.value(self.running_var),
                self.eps,
            ),
        }
    }
}

/// Per-pixel linear map `C_in → C_out` (weight stored C_in×C_out).
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Pointwise {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_weight(store, prefix, kaiming(vec![c_in, c_out], c_in, rng), bias)
    }

    pub fn with_weight<T: Element>(store: &mut ParamStore<T>, prefix: &str, weight: Tensor<T>, bias: bool) -> Result<Self> {
        let c_out = weight.shape()[1];
        let weight = store.add(format!("{prefix}.weight"), ParamKind::Trainable, weight)?;
        let bias = if bias {
            Some(store.add(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros(vec![c_out]))?)
        } else {
            None
        };
        Ok(Pointwise { weight, bias })
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.tape.matmul_1x1(x, ctx.var(self.weight), self.bias.map(|b| ctx.var(b)))
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            store,
            &format!("{prefix}.conv"),
            c_in,
            c_out,
            kernel,
            ConvConfig::same(kernel, dilation),
            true,
            rng,
        )?;
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), c_out)?;
        Ok(ConvBnRelu { conv, bn })
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Two 3×3 conv-BN-ReLU stages.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl DoubleConv {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DoubleConv {
            first: ConvBnRelu::new(store, &format!("{prefix}.conv1"), c_in, c_out, 3, 1, rng)?,
            second: ConvBnRelu::new(store, &format!("{prefix}.conv2"), c_out, c_out, 3, 1, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        self.second.forward(ctx, y)
    }
}
