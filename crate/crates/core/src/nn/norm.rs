//! Per-channel batch normalization over the N, H and W axes.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Batch statistics produced by a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

impl BatchStats {
    pub fn unbiased_var(&self) -> Vec<f64> {
        let m = self.count as f64;
        self.var.iter().map(|v| v * m / (m - 1.0)).collect()
    }
}

fn check_affine<T: Element>(tape: &Tape<T>, x: Var, p: Var, name: &'static str) -> Result<[usize; 4]> {
    let dims = tape.value(x).dims4()?;
    let ps = tape.shape(p);
    if ps != [dims[1]] {
        return Err(Error::ShapeMismatch {
            op: name,
            left: ps,
            right: vec![dims[1]],
        });
    }
    Ok(dims)
}

fn channel_stats<T: Element>(x: &Tensor<T>) -> BatchStats {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let plane = h * w;
    let count = n * plane;
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            s += data[base..base + plane].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mu = s / count as f64;
        let mut ss = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            ss += data[base..base + plane]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / count as f64;
    }
    BatchStats { mean, var, count }
}

/// Applies `y = γ·(x − μ_c)·inv_c + β` and records its gradient.
///
/// `batch` selects whether μ and inv depend on x (training) or are constants.
fn normalize<T: Element>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<T>,
    inv_std: Vec<T>,
    batch: bool,
) -> Var {
    let value = {
        let (tx, tg, tb) = (tape.value(x), tape.value(gamma), tape.value(beta));
        let [_, c, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let plane = h * w;
        let (g, b) = (tg.data(), tb.data());
        let data = tx
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(p, chunk)| {
                let ch = p % c;
                let (mu, inv, gm, bt) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                chunk.iter().map(move |&v| gm * (v - mu) * inv + bt)
            })
            .collect();
        Tensor::from_parts(tx.shape().to_vec(), data)
    };
    tape.custom_op(&[x, gamma, beta], value, move |args| {
        let (tx, tg, g) = (args.inputs[0], args.inputs[1], args.grad);
        let [n, c, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let plane = h * w;
        let m = T::from_usize(n * plane);
        let xd = tx.data();
        let gd = g.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for p in 0..n * c {
            let ch = p % c;
            let (mu, inv) = (mean[ch], inv_std[ch]);
            for i in p * plane..(p + 1) * plane {
                dbeta[ch] += gd[i];
                dgamma[ch] += gd[i] * (xd[i] - mu) * inv;
            }
        }
        let dx = args.needs[0].then(|| {
            let mut dx = vec![T::zero(); xd.len()];
            for p in 0..n * c {
                let ch = p % c;
                let (mu, inv, gm) = (mean[ch], inv_std[ch], tg.data()[ch]);
                for i in p * plane..(p + 1) * plane {
                    dx[i] = if batch {
                        // (γ·inv/m)·(m·g − Σg − x̂·Σ(g·x̂))
                        let xhat = (xd[i] - mu) * inv;
                        gm * inv / m * (m * gd[i] - dbeta[ch] - xhat * dgamma[ch])
                    } else {
                        gm * inv * gd[i]
                    };
                }
            }
            Tensor::from_parts(tx.shape().to_vec(), dx)
        });
        vec![
            dx,
            args.needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            args.needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ]
    })
}

/// Training-mode batch norm: normalizes by the batch statistics.
pub fn batch_norm_train<T: Element>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BatchStats)> {
    let [n, _, h, w] = check_affine(tape, x, gamma, "batch_norm gamma")?;
    check_affine(tape, x, beta, "batch_norm beta")?;
    if n * h * w < 2 {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            reason: "training mode needs at least two values per channel".into(),
        });
    }
    let stats = channel_stats(&tape.value(x));
    let mean = stats.mean.iter().map(|&m| T::from_f64(m)).collect();
    let inv = stats.var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
    Ok((normalize(tape, x, gamma, beta, mean, inv, true), stats))
}

/// Evaluation-mode batch norm with fixed running statistics.
pub fn batch_norm_eval<T: Element>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var> {
    let [_, c, _, _] = check_affine(tape, x, gamma, "batch_norm gamma")?;
    check_affine(tape, x, beta, "batch_norm beta")?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm running stats",
            left: running_mean.shape().to_vec(),
            right: vec![c],
        });
    }
    let mean = running_mean.data().to_vec();
    let inv = running_var
        .data()
        .iter()
        .map(|v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();
    Ok(normalize(tape, x, gamma, beta, mean, inv, false))
}
