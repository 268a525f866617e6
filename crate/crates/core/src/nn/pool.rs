//! Pooling and resampling.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// 2×2 max pooling with stride 2.
///
/// The gradient goes to the window maximum; on ties, to the first element
/// in row-major window order.
pub fn maxpool2<T: Element>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let (value, argmax) = {
        let tx = tape.value(x);
        let [n, c, h, w] = tx.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "maxpool2",
                reason: format!("spatial dims must be even, got {h}×{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let src = tx.data();
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        tape.note_branches(argmax.iter().map(|&i| i as u64));
        (Tensor::from_parts(vec![n, c, oh, ow], out), argmax)
    };
    Ok(tape.custom_op(&[x], value, move |args| {
        let mut dx = Tensor::zeros(args.inputs[0].shape().to_vec());
        let d = dx.data_mut();
        for (&idx, &g) in argmax.iter().zip(args.grad.data()) {
            d[idx] += g;
        }
        vec![Some(dx)]
    }))
}

/// Average pooling onto an `out_h × out_w` grid of equal, non-overlapping cells.
pub fn avg_pool<T: Element>(tape: &Tape<T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let value = {
        let tx = tape.value(x);
        let [n, c, h, w] = tx.dims4()?;
        if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool",
                reason: format!("{h}×{w} is not divisible into a {out_h}×{out_w} grid"),
            });
        }
        let (fh, fw) = (h / out_h, w / out_w);
        let inv = T::one() / T::from_usize(fh * fw);
        let src = tx.data();
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for p in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    out[(p * out_h + i / fh) * out_w + j / fw] += src[(p * h + i) * w + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        Tensor::from_parts(vec![n, c, out_h, out_w], out)
    };
    Ok(tape.custom_op(&[x], value, move |args| {
        let shape = args.inputs[0].shape();
        let (h, w) = (shape[2], shape[3]);
        let (fh, fw) = (h / out_h, w / out_w);
        let inv = T::one() / T::from_usize(fh * fw);
        let g = args.grad.data();
        let dx = Tensor::from_fn(shape.to_vec(), |idx| {
            let j = idx % w;
            let i = (idx / w) % h;
            let p = idx / (h * w);
            g[(p * out_h + i / fh) * out_w + j / fw] * inv
        });
        vec![Some(dx)]
    }))
}

/// Replicates every pixel into an `fh × fw` block.
pub fn upsample_nearest<T: Element>(tape: &Tape<T>, x: Var, fh: usize, fw: usize) -> Result<Var> {
    if fh == 0 || fw == 0 {
        return Err(Error::InvalidArgument("upsample_nearest: factors must be positive".into()));
    }
    let value = {
        let tx = tape.value(x);
        let [n, c, h, w] = tx.dims4()?;
        let (oh, ow) = (h * fh, w * fw);
        let src = tx.data();
        Tensor::from_fn(vec![n, c, oh, ow], |idx| {
            let j = idx % ow;
            let i = (idx / ow) % oh;
            let p = idx / (oh * ow);
            src[(p * h + i / fh) * w + j / fw]
        })
    };
    Ok(tape.custom_op(&[x], value, move |args| {
        let shape = args.inputs[0].shape();
        let (h, w) = (shape[2], shape[3]);
        let (oh, ow) = (h * fh, w * fw);
        let mut dx = Tensor::zeros(shape.to_vec());
        let d = dx.data_mut();
        for (idx, &g) in args.grad.data().iter().enumerate() {
            let j = idx % ow;
            let i = (idx / ow) % oh;
            let p = idx / (oh * ow);
            d[(p * h + i / fh) * w + j / fw] += g;
        }
        vec![Some(dx)]
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Bilinear,
}

/// Source taps for one output coordinate of a ×2 bilinear upsample
/// (align_corners = false): `src = (dst + 0.5) / 2 − 0.5`, clamped at 0.
fn bilinear_taps(dst: usize, len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

/// Doubles H and W.
pub fn upsample2<T: Element>(tape: &Tape<T>, x: Var, mode: UpsampleMode) -> Result<Var> {
    match mode {
        UpsampleMode::Nearest => upsample_nearest(tape, x, 2, 2),
        UpsampleMode::Bilinear => upsample_bilinear2(tape, x),
    }
}

fn upsample_bilinear2<T: Element>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let value = {
        let tx = tape.value(x);
        let [n, c, h, w] = tx.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let rows: Vec<_> = (0..oh).map(|i| bilinear_taps(i, h)).collect();
        let cols: Vec<_> = (0..ow).map(|j| bilinear_taps(j, w)).collect();
        let src = tx.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(r0, r1, ly) in &rows {
                let ly = T::from_f64(ly);
                for &(c0, c1, lx) in &cols {
                    let lx = T::from_f64(lx);
                    let top = plane[r0 * w + c0] * (T::one() - lx) + plane[r0 * w + c1] * lx;
                    let bottom = plane[r1 * w + c0] * (T::one() - lx) + plane[r1 * w + c1] * lx;
                    out.push(top * (T::one() - ly) + bottom * ly);
                }
            }
        }
        Tensor::from_parts(vec![n, c, oh, ow], out)
    };
    Ok(tape.custom_op(&[x], value, |args| {
        let shape = args.inputs[0].shape();
        let (h, w) = (shape[2], shape[3]);
        let planes = shape[0] * shape[1];
        let (oh, ow) = (2 * h, 2 * w);
        let rows: Vec<_> = (0..oh).map(|i| bilinear_taps(i, h)).collect();
        let cols: Vec<_> = (0..ow).map(|j| bilinear_taps(j, w)).collect();
        let mut dx = Tensor::zeros(shape.to_vec());
        let d = dx.data_mut();
        let g = args.grad.data();
        for p in 0..planes {
            let plane = &mut d[p * h * w..(p + 1) * h * w];
            let gp = &g[p * oh * ow..(p + 1) * oh * ow];
            for (i, &(r0, r1, ly)) in rows.iter().enumerate() {
                let ly = T::from_f64(ly);
                for (j, &(c0, c1, lx)) in cols.iter().enumerate() {
                    let lx = T::from_f64(lx);
                    let gv = gp[i * ow + j];
                    let gt = gv * (T::one() - ly);
                    let gb = gv * ly;
                    plane[r0 * w + c0] += gt * (T::one() - lx);
                    plane[r0 * w + c1] += gt * lx;
                    plane[r1 * w + c0] += gb * (T::one() - lx);
                    plane[r1 * w + c1] += gb * lx;
                }
            }
        }
        vec![Some(dx)]
    }))
}
