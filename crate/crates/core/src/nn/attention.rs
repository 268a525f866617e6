//! Additive attention gate for skip connections.
//!
//! For each pixel i with skip features x_i and gating features g_i:
//!
//! ```text
//! q_i = ψᵀ · relu(W_xᵀ x_i + W_gᵀ g_i + b_g) + b_ψ
//! α_i = sigmoid(q_i)
//! x̂_{i,c} = x_{i,c} · α_i
//! ```
//!
//! All three maps are 1×1 convolutions. α has one channel and is broadcast
//! over the skip channels.

use rand::Rng;

use super::layers::Pointwise;
use super::params::{Ctx, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Gate parameters as tape values.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    /// F_l × F_int
    pub w_x: Var,
    /// F_g × F_int
    pub w_g: Var,
    /// F_int
    pub b_g: Var,
    /// F_int × 1
    pub psi: Var,
    /// 1
    pub b_psi: Var,
}

/// Returns `(x_hat, alpha)`; `g` must already be on x's spatial grid.
pub fn attention_gate<T: Element>(tape: &Tape<T>, x: Var, g: Var, p: &GateVars) -> Result<(Var, Var)> {
    let (xs, gs) = (tape.value(x).dims4()?, tape.value(g).dims4()?);
    if xs[0] != gs[0] || xs[2] != gs[2] || xs[3] != gs[3] {
        return Err(Error::ShapeMismatch {
            op: "attention_gate",
            left: xs.to_vec(),
            right: gs.to_vec(),
        });
    }
    let theta = tape.matmul_1x1(x, p.w_x, None)?;
    let phi = tape.matmul_1x1(g, p.w_g, Some(p.b_g))?;
    let f = tape.add(theta, phi)?;
    let f = tape.relu(f);
    let q = tape.matmul_1x1(f, p.psi, Some(p.b_psi))?;
    let alpha = tape.sigmoid(q);
    let x_hat = tape.mul(x, alpha)?;
    Ok((x_hat, alpha))
}

#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub w_x: Pointwise,
    pub w_g: Pointwise,
    pub psi: Pointwise,
    pub f_l: usize,
    pub f_g: usize,
    pub f_int: usize,
}

impl AttentionGate {
    /// ψ and b_ψ start at zero, so a fresh gate passes 0.5·x.
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        f_l: usize,
        f_g: usize,
        f_int: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if f_int == 0 {
            return Err(Error::InvalidArgument("attention gate: F_int must be at least 1".into()));
        }
        Ok(AttentionGate {
            w_x: Pointwise::new(store, &format!("{prefix}.w_x"), f_l, f_int, false, rng)?,
            w_g: Pointwise::new(store, &format!("{prefix}.w_g"), f_g, f_int, true, rng)?,
            psi: Pointwise::with_weight(store, &format!("{prefix}.psi"), Tensor::zeros(vec![f_int, 1]), true)?,
            f_l,
            f_g,
            f_int,
        })
    }

    pub fn vars<T: Element>(&self, ctx: &Ctx<'_, T>) -> GateVars {
        GateVars {
            w_x: ctx.var(self.w_x.weight),
            w_g: ctx.var(self.w_g.weight),
            b_g: ctx.var(self.w_g.bias.expect("w_g has a bias")),
            psi: ctx.var(self.psi.weight),
            b_psi: ctx.var(self.psi.bias.expect("psi has a bias")),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: Var, g: Var) -> Result<(Var, Var)> {
        attention_gate(ctx.tape, x, g, &self.vars(ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Mode;
    use rand::SeedableRng;
    use rand_pcg::Pcg32;

    fn scalar_vars(tape: &Tape<f64>, w_x: f64, w_g: f64, b_g: f64, psi: f64, b_psi: f64) -> GateVars {
        let s = |shape: Vec<usize>, v: f64| tape.leaf(Tensor::full(shape, v));
        GateVars {
            w_x: s(vec![1, 1], w_x),
            w_g: s(vec![1, 1], w_g),
            b_g: s(vec![1], b_g),
            psi: s(vec![1, 1], psi),
            b_psi: s(vec![1], b_psi),
        }
    }

    #[test]
    fn scalar_hand_case() {
        // relu(1·1 + 1·(−2) + 0) = 0 → q = 0 → α = 0.5 → x̂ = 0.5
        let tape = Tape::<f64>::new();
        let p = scalar_vars(&tape, 1.0, 1.0, 0.0, 1.0, 0.0);
        let x = tape.leaf(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let g = tape.leaf(Tensor::full(vec![1, 1, 1, 1], -2.0));
        let (x_hat, alpha) = attention_gate(&tape, x, g, &p).unwrap();
        assert_eq!(tape.value(alpha).data(), &[0.5]);
        assert_eq!(tape.value(x_hat).data(), &[0.5]);
    }

    #[test]
    fn zero_psi_gives_half() {
        let mut rng = Pcg32::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let gate = AttentionGate::new(&mut store, "gate", 4, 6, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::bind(&tape, &store, Mode::Eval);
        let xt = Tensor::uniform(vec![2, 4, 3, 3], -2.0, 2.0, &mut rng);
        let x = tape.leaf(xt.clone());
        let g = tape.leaf(Tensor::uniform(vec![2, 6, 3, 3], -2.0, 2.0, &mut rng));
        let (x_hat, alpha) = gate.forward(&ctx, x, g).unwrap();
        assert_eq!(tape.shape(alpha), vec![2, 1, 3, 3]);
        assert!(tape.value(alpha).data().iter().all(|&a| a == 0.5));
        for (a, b) in tape.value(x_hat).data().iter().zip(xt.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let tape = Tape::<f64>::new();
        let p = scalar_vars(&tape, 1.0, 1.0, 0.0, 1.0, 0.0);
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 4, 4]));
        let g = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(matches!(attention_gate(&tape, x, g, &p), Err(Error::ShapeMismatch { .. })));
    }
}
