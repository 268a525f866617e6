//! The four segmentation networks: UNet, Attention UNet, Attention UNet with
//! pyramid pooling (SPP) and Attention UNet with three ASPP blocks.
//!
//! Encoder level l (1-based) has `base·2^(l−1)` channels and is followed by
//! 2×2 max pooling; the bottleneck has `base·2^depth`. Each decoder level
//! upsamples (bilinear ×2, then 3×3 conv-BN-ReLU), optionally gates the skip
//! features with the upsampled signal, concatenates `[skip, upsampled]` and
//! applies a double conv. A 1×1 conv and a sigmoid produce the mask.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    clamp_rates, maxpool2, upsample2, usable_scales, Aspp, AttentionGate, Conv2d, ConvBnRelu, ConvConfig, Ctx,
    DoubleConv, Mode, ParamId, ParamStore, Spp, UpsampleMode, DEFAULT_ASPP_RATES, DEFAULT_SPP_SCALES,
};
use crate::optim::Adam;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unet,
    AttUnet,
    AttUnetSpp,
    AttUnetAspp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Unet, Variant::AttUnet, Variant::AttUnetSpp, Variant::AttUnetAspp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::AttUnet => "att_unet",
            Variant::AttUnetSpp => "att_unet_spp",
            Variant::AttUnetAspp => "att_unet_aspp",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Unet => "UNet",
            Variant::AttUnet => "Att. UNet",
            Variant::AttUnetSpp => "Att. UNet with SPP",
            Variant::AttUnetAspp => "Att. UNet with ASPP",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Variant> {
        Variant::ALL.get(code as usize).copied()
    }

    pub fn has_gates(self) -> bool {
        self != Variant::Unet
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?} (expected unet, att_unet, att_unet_spp or att_unet_aspp)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Number of 2× downsamplings.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Input side length the network is built for; fixes the bottleneck
    /// size that ASPP rates and SPP scales are fitted to.
    pub image_size: usize,
    pub aspp_rates: Vec<usize>,
    pub spp_scales: Vec<usize>,
    pub aspp_repeats: usize,
    pub upsample: UpsampleMode,
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        ModelSpec {
            variant,
            depth: 4,
            base_channels: 16,
            in_channels: 1,
            out_channels: 1,
            image_size: 64,
            aspp_rates: DEFAULT_ASPP_RATES.to_vec(),
            spp_scales: DEFAULT_SPP_SCALES.to_vec(),
            aspp_repeats: 3,
            upsample: UpsampleMode::Bilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("model depth must be at least 1".into());
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.depth > 16 || self.image_size % (1 << self.depth) != 0 || self.image_size == 0 {
            return bad(format!(
                "image size {} is not divisible by 2^{} = {}",
                self.image_size,
                self.depth,
                1usize << self.depth.min(16)
            ));
        }
        if self.variant == Variant::AttUnetAspp && (self.aspp_rates.is_empty() || self.aspp_repeats == 0) {
            return bad("ASPP variant needs at least one rate and one block".into());
        }
        if self.variant == Variant::AttUnetSpp && self.spp_scales.is_empty() {
            return bad("SPP variant needs at least one grid scale".into());
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.depth
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// ASPP rates after fitting to the bottleneck.
    pub fn effective_aspp_rates(&self) -> Vec<usize> {
        let b = self.bottleneck_size();
        clamp_rates(&self.aspp_rates, b, b)
    }

    /// SPP grid scales that divide the bottleneck.
    pub fn effective_spp_scales(&self) -> Vec<usize> {
        let b = self.bottleneck_size();
        usable_scales(&self.spp_scales, b, b)
    }
}

#[derive(Clone, Debug)]
enum Context {
    None,
    Aspp(Vec<Aspp>),
    Spp(Spp),
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: ConvBnRelu,
    gate: Option<AttentionGate>,
    conv: DoubleConv,
}

/// Values recorded by one forward pass.
pub struct Forward {
    /// Per-pixel foreground probabilities, N×out×H×W.
    pub output: Var,
    /// Attention coefficients, coarsest level first.
    pub alphas: Vec<Var>,
    /// Tape leaves of the trainable parameters.
    pub params: Vec<(ParamId, Var)>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Element> {
    spec: ModelSpec,
    store: ParamStore<T>,
    encoders: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    context: Context,
    decoders: Vec<DecoderLevel>,
    head: Conv2d,
}

impl<T: Element> Network<T> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Pcg32::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let depth = spec.depth;

        let mut encoders = Vec::with_capacity(depth);
        let mut c_prev = spec.in_channels;
        for level in 1..=depth {
            let c = spec.channels_at(level);
            encoders.push(DoubleConv::new(&mut store, &format!("enc{level}"), c_prev, c, &mut rng)?);
            c_prev = c;
        }
        let c_bottom = spec.channels_at(depth + 1);
        let bottleneck = DoubleConv::new(&mut store, "bottleneck", c_prev, c_bottom, &mut rng)?;

        let context = match spec.variant {
            Variant::AttUnetAspp => {
                let rates = spec.effective_aspp_rates();
                let blocks = (1..=spec.aspp_repeats)
                    .map(|i| Aspp::new(&mut store, &format!("aspp{i}"), c_bottom, &rates, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                Context::Aspp(blocks)
            }
            Variant::AttUnetSpp => {
                let scales = spec.effective_spp_scales();
                Context::Spp(Spp::new(&mut store, "spp", c_bottom, &scales, &mut rng)?)
            }
            Variant::Unet | Variant::AttUnet => Context::None,
        };

        let mut decoders = Vec::with_capacity(depth);
        for level in (1..=depth).rev() {
            let c = spec.channels_at(level);
            let c_below = spec.channels_at(level + 1);
            let up = ConvBnRelu::new(&mut store, &format!("dec{level}.up"), c_below, c, 3, 1, &mut rng)?;
            let gate = if spec.variant.has_gates() {
                Some(AttentionGate::new(&mut store, &format!("gate{level}"), c, c, (c / 2).max(1), &mut rng)?)
            } else {
                None
            };
            let conv = DoubleConv::new(&mut store, &format!("dec{level}"), 2 * c, c, &mut rng)?;
            decoders.push(DecoderLevel { up, gate, conv });
        }
        let head = Conv2d::new(
            &mut store,
            "head",
            spec.channels_at(1),
            spec.out_channels,
            1,
            ConvConfig::default(),
            true,
            &mut rng,
        )?;

        Ok(Network {
            spec: spec.clone(),
            store,
            encoders,
            bottleneck,
            context,
            decoders,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn gate_count(&self) -> usize {
        self.decoders.iter().filter(|d| d.gate.is_some()).count()
    }

    pub fn aspp_count(&self) -> usize {
        match &self.context {
            Context::Aspp(blocks) => blocks.len(),
            _ => 0,
        }
    }

    pub fn spp_count(&self) -> usize {
        usize::from(matches!(self.context, Context::Spp(_)))
    }

    /// Dilation rates the ASPP blocks were built with (empty otherwise).
    pub fn aspp_rates(&self) -> Vec<usize> {
        match &self.context {
            Context::Aspp(blocks) => blocks[0].rates.clone(),
            _ => Vec::new(),
        }
    }

    pub fn spp_scales(&self) -> Vec<usize> {
        match &self.context {
            Context::Spp(spp) => spp.scales.clone(),
            _ => Vec::new(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::InvalidShape {
                op: "forward",
                reason: format!("expected N×C×H×W input, got {shape:?}"),
            });
        };
        if c != self.spec.in_channels {
            return Err(Error::ChannelMismatch {
                op: "forward",
                expected: self.spec.in_channels,
                actual: c,
            });
        }
        let k = 1usize << self.spec.depth;
        if h % k != 0 || w % k != 0 {
            return Err(Error::InvalidShape {
                op: "forward",
                reason: format!("input {h}×{w} is not divisible by 2^{} = {k}", self.spec.depth),
            });
        }
        Ok(())
    }

    /// Runs the network in an existing binding context.
    pub fn forward_ctx(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(&ctx.tape.shape(x))?;
        let tape = ctx.tape;
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x;
        for enc in &self.encoders {
            let y = enc.forward(ctx, h)?;
            skips.push(y);
            h = maxpool2(tape, y)?;
        }
        h = self.bottleneck.forward(ctx, h)?;
        match &self.context {
            Context::None => {}
            Context::Aspp(blocks) => {
                for block in blocks {
                    h = block.forward(ctx, h)?;
                }
            }
            Context::Spp(spp) => h = spp.forward(ctx, h)?,
        }

        let mut alphas = Vec::new();
        for dec in &self.decoders {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = upsample2(tape, h, self.spec.upsample)?;
            let up = dec.up.forward(ctx, up)?;
            let skip = match &dec.gate {
                Some(gate) => {
                    let (gated, alpha) = gate.forward(ctx, skip, up)?;
                    alphas.push(alpha);
                    gated
                }
                None => skip,
            };
            let cat = tape.concat_channels(&[skip, up])?;
            h = dec.conv.forward(ctx, cat)?;
        }
        let logits = self.head.forward(ctx, h)?;
        Ok((tape.sigmoid(logits), alphas))
    }

    /// Records a forward pass. Training mode also updates batch-norm running
    /// statistics.
    pub fn forward(&mut self, tape: &Tape<T>, x: Var, mode: Mode) -> Result<Forward> {
        let (output, alphas, params, updates) = {
            let ctx = Ctx::bind(tape, &self.store, mode);
            let (output, alphas) = self.forward_ctx(&ctx, x)?;
            (output, alphas, ctx.bound(), ctx.take_stat_updates())
        };
        for (id, value) in updates {
            *self.store.get_mut(id) = value;
        }
        Ok(Forward { output, alphas, params })
    }

    /// Evaluation-mode probabilities for an N×C×H×W batch.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict_with_attention(images)?.0)
    }

    /// Evaluation-mode probabilities plus the attention maps.
    pub fn predict_with_attention(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let tape = Tape::inference();
        let ctx = Ctx::bind(&tape, &self.store, Mode::Eval);
        let x = tape.constant(images.clone());
        let (out, alphas) = self.forward_ctx(&ctx, x)?;
        let out_t = tape.value(out).clone();
        let maps = alphas.iter().map(|&a| tape.value(a).clone()).collect();
        Ok((out_t, maps))
    }

    /// One N×1×h×w coefficient map per attention gate, coarsest first.
    pub fn attention_maps(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if !self.spec.variant.has_gates() {
            return Err(Error::InvalidArgument(format!(
                "variant {} has no attention gates",
                self.spec.variant
            )));
        }
        Ok(self.predict_with_attention(images)?.1)
    }

    /// Gradients of the last backward pass, in registry order.
    pub fn gradients(&self, tape: &Tape<T>, fwd: &Forward) -> Vec<(ParamId, Tensor<T>)> {
        fwd.params.iter().map(|&(id, v)| (id, tape.grad(v))).collect()
    }

    /// Applies one Adam step with the given gradients.
    pub fn apply_adam(&mut self, adam: &mut Adam<T>, lr: f64, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; self.store.len()];
        for (id, g) in grads {
            by_id[*id] = Some(g);
        }
        let updates = self
            .store
            .iter_mut()
            .filter_map(|(id, name, t)| by_id[id].map(|g| (name, t, g)));
        adam.step(lr, updates)
    }

    /// Same network with every tensor converted to another element type.
    pub fn cast<U: Element>(&self) -> Network<U> {
        let mut out = Network::<U>::build(&self.spec, 0).expect("spec already validated");
        for (id, _, _, t) in self.store.iter() {
            *out.store.get_mut(id) = t.cast();
        }
        out
    }
}
