//! Training loss: an equal blend of binary cross-entropy and soft Dice.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Smoothing constant λ of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// `0.5·BCE + 0.5·(1 − softDice)`, with
/// `softDice = (2Σp·t + λ) / (Σp + Σt + λ)` taken over the whole batch.
///
/// `pred` holds probabilities in (0, 1); `target` is a 0/1 mask of the same shape.
pub fn dice_bce_loss<T: Element>(tape: &Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let value = {
        let (p, t) = (tape.value(pred), tape.value(target));
        if p.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "dice_bce_loss",
                left: p.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let terms = LossTerms::compute(p.data(), t.data());
        Tensor::scalar(T::from_f64(terms.loss()))
    };
    Ok(tape.custom_op(&[pred, target], value, |args| {
        let (p, t) = (args.inputs[0].data(), args.inputs[1].data());
        let terms = LossTerms::compute(p, t);
        let g = args.grad.data()[0].to_f64();
        let m = p.len() as f64;
        let denom = terms.sum_p + terms.sum_t + DICE_SMOOTH;
        let numer = 2.0 * terms.sum_pt + DICE_SMOOTH;
        let dp = args.needs[0].then(|| {
            let data = p
                .iter()
                .zip(t)
                .map(|(&pi, &ti)| {
                    let (pi, ti) = (clamp(pi.to_f64()), ti.to_f64());
                    let d_bce = (-ti / pi + (1.0 - ti) / (1.0 - pi)) / m;
                    let d_dice = (2.0 * ti * denom - numer) / (denom * denom);
                    T::from_f64(g * (0.5 * d_bce - 0.5 * d_dice))
                })
                .collect();
            Tensor::from_parts(args.inputs[0].shape().to_vec(), data)
        });
        vec![dp, None]
    }))
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

struct LossTerms {
    bce: f64,
    sum_p: f64,
    sum_t: f64,
    sum_pt: f64,
}

impl LossTerms {
    fn compute<T: Element>(p: &[T], t: &[T]) -> Self {
        let mut bce = 0.0;
        let (mut sum_p, mut sum_t, mut sum_pt) = (0.0, 0.0, 0.0);
        for (&pi, &ti) in p.iter().zip(t) {
            let (pi, ti) = (pi.to_f64(), ti.to_f64());
            let pc = clamp(pi);
            bce -= ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
            sum_p += pi;
            sum_t += ti;
            sum_pt += pi * ti;
        }
        LossTerms {
            bce: bce / p.len() as f64,
            sum_p,
            sum_t,
            sum_pt,
        }
    }

    fn soft_dice(&self) -> f64 {
        (2.0 * self.sum_pt + DICE_SMOOTH) / (self.sum_p + self.sum_t + DICE_SMOOTH)
    }

    fn loss(&self) -> f64 {
        0.5 * self.bce + 0.5 * (1.0 - self.soft_dice())
    }
}

/// Binary cross-entropy term alone (diagnostics and tests).
pub fn bce<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> f64 {
    LossTerms::compute(pred.data(), target.data()).bce
}
