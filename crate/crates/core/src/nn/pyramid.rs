//! Multi-scale bottleneck blocks: atrous spatial pyramid pooling (ASPP) and
//! the pyramid-pooling (SPP) baseline.

use rand::Rng;

use super::conv::ConvConfig;
use super::layers::{Conv2d, ConvBnRelu};
use super::params::{Ctx, ParamStore};
use super::pool::{avg_pool, upsample_nearest};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Element;

pub const DEFAULT_ASPP_RATES: [usize; 4] = [1, 6, 12, 18];
pub const DEFAULT_SPP_SCALES: [usize; 3] = [1, 2, 4];

/// Largest dilation usable on an `h × w` map: `max(1, ⌊min(h, w) / 2⌋)`.
pub fn max_rate(h: usize, w: usize) -> usize {
    (h.min(w) / 2).max(1)
}

/// Clamps rates to [`max_rate`] and drops the duplicates this creates,
/// keeping first-occurrence order. 4×4 maps turn `[1, 6, 12, 18]` into `[1, 2]`.
pub fn clamp_rates(rates: &[usize], h: usize, w: usize) -> Vec<usize> {
    let limit = max_rate(h, w);
    let mut out = Vec::new();
    for &r in rates {
        let r = r.clamp(1, limit);
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

/// Keeps only grid scales that evenly divide the map.
pub fn usable_scales(scales: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &s in scales {
        if s > 0 && h % s == 0 && w % s == 0 && !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Parallel dilated conv branches, concatenated and fused by a 1×1 conv.
///
/// The rate-1 branch is a 1×1 conv; every other branch is 3×3 with
/// padding equal to its rate, so all branches keep H×W.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub rates: Vec<usize>,
    pub branches: Vec<ConvBnRelu>,
    pub fuse: ConvBnRelu,
}

impl Aspp {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rates: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if rates.is_empty() || rates.contains(&0) {
            return Err(Error::InvalidArgument(format!("ASPP rates must be positive and non-empty, got {rates:?}")));
        }
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let kernel = if r == 1 { 1 } else { 3 };
                ConvBnRelu::new(store, &format!("{prefix}.branch{i}"), channels, channels, kernel, r, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvBnRelu::new(store, &format!("{prefix}.fuse"), channels * rates.len(), channels, 1, 1, rng)?;
        Ok(Aspp {
            rates: rates.to_vec(),
            branches,
            fuse,
        })
    }

    pub fn branch_forward<T: Element>(&self, ctx: &Ctx<'_, T>, index: usize, x: Var) -> Result<Var> {
        self.branches[index].forward(ctx, x)
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = ctx.tape.value(x).dims4()?;
        let limit = max_rate(h, w);
        if let Some(&r) = self.rates.iter().find(|&&r| r > limit) {
            return Err(Error::InvalidShape {
                op: "aspp",
                reason: format!("dilation rate {r} needs a map of at least {}×{}, got {h}×{w}", 2 * r, 2 * r),
            });
        }
        let outs = (0..self.branches.len())
            .map(|i| self.branch_forward(ctx, i, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = ctx.tape.concat_channels(&outs)?;
        self.fuse.forward(ctx, cat)
    }
}

/// Pyramid pooling: per scale s, average-pool to s×s, 1×1 conv + ReLU,
/// replicate back to H×W; concatenate with the input and fuse by 1×1 conv.
#[derive(Clone, Debug)]
pub struct Spp {
    pub scales: Vec<usize>,
    pub branches: Vec<Conv2d>,
    pub fuse: ConvBnRelu,
}

impl Spp {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        scales: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if scales.is_empty() || scales.contains(&0) {
            return Err(Error::InvalidArgument(format!("SPP scales must be positive and non-empty, got {scales:?}")));
        }
        let branch_width = (channels / scales.len()).max(1);
        let branches = (0..scales.len())
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("{prefix}.branch{i}"),
                    channels,
                    branch_width,
                    1,
                    ConvConfig::default(),
                    true,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvBnRelu::new(
            store,
            &format!("{prefix}.fuse"),
            channels + branch_width * scales.len(),
            channels,
            1,
            1,
            rng,
        )?;
        Ok(Spp {
            scales: scales.to_vec(),
            branches,
            fuse,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = ctx.tape.value(x).dims4()?;
        let mut parts = vec![x];
        for (&s, conv) in self.scales.iter().zip(&self.branches) {
            if h % s != 0 || w % s != 0 {
                return Err(Error::InvalidShape {
                    op: "spp",
                    reason: format!("{h}×{w} is not divisible by grid scale {s}"),
                });
            }
            let pooled = avg_pool(ctx.tape, x, s, s)?;
            let y = conv.forward(ctx, pooled)?;
            let y = ctx.tape.relu(y);
            parts.push(upsample_nearest(ctx.tape, y, h / s, w / s)?);
        }
        let cat = ctx.tape.concat_channels(&parts)?;
        self.fuse.forward(ctx, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::conv::conv2d;
    use crate::nn::params::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_pcg::Pcg32;

    #[test]
    fn rate_clamping() {
        assert_eq!(clamp_rates(&DEFAULT_ASPP_RATES, 4, 4), vec![1, 2]);
        assert_eq!(clamp_rates(&DEFAULT_ASPP_RATES, 15, 15), vec![1, 6, 7]);
        assert_eq!(clamp_rates(&DEFAULT_ASPP_RATES, 64, 64), vec![1, 6, 12, 18]);
        assert_eq!(clamp_rates(&[3], 1, 1), vec![1]);
        assert_eq!(usable_scales(&DEFAULT_SPP_SCALES, 15, 15), vec![1]);
        assert_eq!(usable_scales(&DEFAULT_SPP_SCALES, 4, 4), vec![1, 2, 4]);
    }

    #[test]
    fn aspp_preserves_shape() {
        let mut rng = Pcg32::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let aspp = Aspp::new(&mut store, "aspp", 3, &[1, 2, 4], &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::bind(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::uniform(vec![2, 3, 16, 16], -1.0, 1.0, &mut rng));
        let y = aspp.forward(&ctx, x).unwrap();
        assert_eq!(tape.shape(y), vec![2, 3, 16, 16]);
    }

    #[test]
    fn aspp_rejects_oversized_rate() {
        let mut rng = Pcg32::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let aspp = Aspp::new(&mut store, "aspp", 2, &[1, 6], &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::bind(&tape, &store, Mode::Eval);
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        assert!(aspp.forward(&ctx, x).is_err());
    }

    #[test]
    fn aspp_branch_matches_plain_conv() {
        let mut rng = Pcg32::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let aspp = Aspp::new(&mut store, "aspp", 2, &[1, 3], &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::bind(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::uniform(vec![1, 2, 8, 8], -1.0, 1.0, &mut rng));
        let conv = &aspp.branches[1].conv;
        let via_layer = conv.forward(&ctx, x).unwrap();
        let direct = conv2d(
            &tape,
            x,
            ctx.var(conv.weight),
            conv.bias.map(|b| ctx.var(b)),
            ConvConfig { stride: 1, padding: 3, dilation: 3 },
        )
        .unwrap();
        assert!(tape.value(via_layer).bit_eq(&tape.value(direct)));
    }

    #[test]
    fn single_rate_with_identity_fusion_is_one_conv_path() {
        let mut rng = Pcg32::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let aspp = Aspp::new(&mut store, "aspp", 3, &[1], &mut rng).unwrap();
        let eye = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        *store.get_mut(aspp.fuse.conv.weight) = eye;
        let tape = Tape::new();
        let ctx = Ctx::bind(&tape, &store, Mode::Eval);
        let x = tape.constant(Tensor::uniform(vec![1, 3, 4, 4], -1.0, 1.0, &mut rng));
        let full = aspp.forward(&ctx, x).unwrap();
        let branch = aspp.branch_forward(&ctx, 0, x).unwrap();
        // eval BN with fresh running stats scales by 1/√(1 + eps)
        let k = 1.0 / (1.0 + crate::nn::layers::BN_EPS).sqrt();
        let (f, b) = (tape.value(full), tape.value(branch));
        for (a, b) in f.data().iter().zip(b.data()) {
            assert!((a - b * k).abs() < 1e-12);
        }
    }

    #[test]
    fn spp_shape_and_divisibility() {
        let mut rng = Pcg32::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let spp = Spp::new(&mut store, "spp", 8, &[1, 2, 4], &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::bind(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::uniform(vec![2, 8, 32, 32], -1.0, 1.0, &mut rng));
        let y = spp.forward(&ctx, x).unwrap();
        assert_eq!(tape.shape(y), vec![2, 8, 32, 32]);
        let bad = tape.constant(Tensor::zeros(vec![1, 8, 6, 6]));
        assert!(spp.forward(&ctx, bad).is_err());
    }
}
