//! Dilated 2-D convolution via im2col + GEMM.
//!
//! `y[n,o,i,j] = b[o] + Σ_{c,kh,kw} x[n,c, i·s − p + r·kh, j·s − p + r·kw] · w[o,c,kh,kw]`
//! with out-of-range taps reading zero. `r = 1` is ordinary convolution.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvConfig {
    /// Resolution-preserving ("same") config for an odd kernel at `dilation`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvConfig {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    /// Output extent along one axis, `None` when non-positive.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    cfg: ConvConfig,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output positions `[lo, hi)` whose tap `k` lands inside `0..len`.
#[inline]
fn valid_range(k: usize, cfg: &ConvConfig, len: usize, out_len: usize) -> (usize, usize) {
    let off = (k * cfg.dilation) as isize - cfg.padding as isize;
    let s = cfg.stride as isize;
    // smallest o with o·s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // smallest o with o·s + off >= len
    let hi = ((len as isize - off) + s - 1).div_euclid(s).max(0);
    let lo = (lo as usize).min(out_len);
    (lo, (hi as usize).clamp(lo, out_len))
}

/// Unfolds `images` (consecutive C×H×W planes) into a
/// `(C·Kh·Kw) × (images·out_h·out_w)` column matrix.
fn im2col<T: Element>(x: &[T], g: &Geometry, images: usize, col: &mut [T]) {
    let cols = g.col_cols();
    let width = images * cols;
    let in_plane = g.c_in * g.h * g.w;
    let s = g.cfg.stride;
    for c in 0..g.c_in {
        for kh in 0..g.kh {
            let (h_lo, h_hi) = valid_range(kh, &g.cfg, g.h, g.out_h);
            for kw in 0..g.kw {
                let (w_lo, w_hi) = valid_range(kw, &g.cfg, g.w, g.out_w);
                let row = (c * g.kh + kh) * g.kw + kw;
                let dst_row = &mut col[row * width..(row + 1) * width];
                for b in 0..images {
                    let plane = &x[b * in_plane + c * g.h * g.w..b * in_plane + (c + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * cols..(b + 1) * cols];
                    dst[..h_lo * g.out_w].fill(T::zero());
                    dst[h_hi * g.out_w..].fill(T::zero());
                    for oh in h_lo..h_hi {
                        let ih = oh * s + kh * g.cfg.dilation - g.cfg.padding;
                        let src = &plane[ih * g.w..(ih + 1) * g.w];
                        let d = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                        d[..w_lo].fill(T::zero());
                        d[w_hi..].fill(T::zero());
                        if w_hi > w_lo {
                            let iw0 = w_lo * s + kw * g.cfg.dilation - g.cfg.padding;
                            if s == 1 {
                                d[w_lo..w_hi].copy_from_slice(&src[iw0..iw0 + (w_hi - w_lo)]);
                            } else {
                                for (j, v) in d[w_lo..w_hi].iter_mut().enumerate() {
                                    *v = src[iw0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the planes.
fn col2im<T: Element>(col: &[T], g: &Geometry, images: usize, dx: &mut [T]) {
    let cols = g.col_cols();
    let width = images * cols;
    let in_plane = g.c_in * g.h * g.w;
    let s = g.cfg.stride;
    for c in 0..g.c_in {
        for kh in 0..g.kh {
            let (h_lo, h_hi) = valid_range(kh, &g.cfg, g.h, g.out_h);
            for kw in 0..g.kw {
                let (w_lo, w_hi) = valid_range(kw, &g.cfg, g.w, g.out_w);
                if w_hi == w_lo {
                    continue;
                }
                let row = (c * g.kh + kh) * g.kw + kw;
                let src_row = &col[row * width..(row + 1) * width];
                for b in 0..images {
                    let base = b * in_plane + c * g.h * g.w;
                    let plane = &mut dx[base..base + g.h * g.w];
                    let src = &src_row[b * cols..(b + 1) * cols];
                    for oh in h_lo..h_hi {
                        let ih = oh * s + kh * g.cfg.dilation - g.cfg.padding;
                        let iw0 = w_lo * s + kw * g.cfg.dilation - g.cfg.padding;
                        let dst = &mut plane[ih * g.w..(ih + 1) * g.w];
                        let sv = &src[oh * g.out_w + w_lo..oh * g.out_w + w_hi];
                        if s == 1 {
                            for (d, &v) in dst[iw0..iw0 + sv.len()].iter_mut().zip(sv) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in sv.iter().enumerate() {
                                dst[iw0 + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Column-buffer budget (elements) used to group images into one GEMM.
const COL_BUDGET: usize = 1 << 23;

fn images_per_chunk(g: &Geometry, n: usize) -> usize {
    (COL_BUDGET / (g.col_rows() * g.col_cols()).max(1)).clamp(1, n.max(1))
}

/// `[images, C, P]` → `[C, images·P]`.
fn batch_to_channel_major<T: Element>(src: &[T], images: usize, c: usize, plane: usize, dst: &mut [T]) {
    for b in 0..images {
        for ch in 0..c {
            let s = &src[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            dst[ch * images * plane + b * plane..ch * images * plane + (b + 1) * plane].copy_from_slice(s);
        }
    }
}

/// `[C, images·P]` → `[images, C, P]`.
fn channel_major_to_batch<T: Element>(src: &[T], images: usize, c: usize, plane: usize, dst: &mut [T]) {
    for b in 0..images {
        for ch in 0..c {
            let s = &src[ch * images * plane + b * plane..ch * images * plane + (b + 1) * plane];
            dst[(b * c + ch) * plane..(b * c + ch + 1) * plane].copy_from_slice(s);
        }
    }
}

/// Records a dilated convolution. `weight` is C_out×C_in×K_h×K_w.
pub fn conv2d<T: Element>(
    tape: &Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    cfg: ConvConfig,
) -> Result<Var> {
    if cfg.stride == 0 || cfg.dilation == 0 {
        return Err(Error::InvalidArgument(
            "conv2d: stride and dilation must be positive".into(),
        ));
    }
    let (value, geom) = {
        let tx = tape.value(x);
        let tw = tape.value(weight);
        let [n, c_in, h, w] = tx.dims4()?;
        let [c_out, wc_in, kh, kw] = tw.dims4()?;
        if wc_in != c_in {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: wc_in,
                actual: c_in,
            });
        }
        let (Some(out_h), Some(out_w)) = (cfg.output_len(h, kh), cfg.output_len(w, kw)) else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                reason: format!(
                    "input {h}×{w} with kernel {kh}×{kw}, padding {}, dilation {} gives a non-positive output",
                    cfg.padding, cfg.dilation
                ),
            });
        };
        let geom = Geometry {
            c_in,
            h,
            w,
            kh,
            kw,
            out_h,
            out_w,
            cfg,
        };
        let tb = bias.map(|b| tape.value(b));
        if let Some(tb) = &tb {
            if tb.shape() != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: tb.shape().to_vec(),
                    right: vec![c_out],
                });
            }
        }

        let in_plane = c_in * h * w;
        let out_plane = out_h * out_w;
        let rows = geom.col_rows();
        let mut out = vec![T::zero(); n * c_out * out_plane];
        let wmat = MatRef::new(tw.data(), c_out, rows);
        let chunk = images_per_chunk(&geom, n);
        let mut col = Vec::new();
        let mut ybuf = Vec::new();
        let mut xbuf = Vec::new();
        for b0 in (0..n).step_by(chunk) {
            let nb = chunk.min(n - b0);
            let xs = &tx.data()[b0 * in_plane..(b0 + nb) * in_plane];
            let width = nb * out_plane;
            let cols: &[T] = if geom.is_pointwise() {
                if nb == 1 {
                    xs
                } else {
                    xbuf.resize(rows * width, T::zero());
                    batch_to_channel_major(xs, nb, c_in, out_plane, &mut xbuf);
                    &xbuf
                }
            } else {
                col.resize(rows * width, T::zero());
                im2col(xs, &geom, nb, &mut col);
                &col
            };
            ybuf.resize(c_out * width, T::zero());
            match &tb {
                Some(tb) => {
                    for (o, row) in ybuf.chunks_mut(width).enumerate() {
                        row.fill(tb.data()[o]);
                    }
                }
                None => ybuf.fill(T::zero()),
            }
            gemm(T::one(), wmat, MatRef::new(cols, rows, width), T::one(), &mut ybuf);
            channel_major_to_batch(&ybuf, nb, c_out, out_plane, &mut out[b0 * c_out * out_plane..(b0 + nb) * c_out * out_plane]);
        }
        (Tensor::from_parts(vec![n, c_out, out_h, out_w], out), geom)
    };

    let inputs: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
    Ok(tape.custom_op(&inputs, value, move |args| {
        let (tx, tw, g) = (args.inputs[0], args.inputs[1], args.grad);
        let n = tx.shape()[0];
        let c_out = tw.shape()[0];
        let in_plane = geom.c_in * geom.h * geom.w;
        let out_plane = geom.out_h * geom.out_w;
        let rows = geom.col_rows();
        let pointwise = geom.is_pointwise();

        let mut dx = args.needs[0].then(|| vec![T::zero(); tx.numel()]);
        let mut dw = args.needs[1].then(|| vec![T::zero(); tw.numel()]);
        let need_db = args.needs.len() > 2 && args.needs[2];
        let mut db = need_db.then(|| vec![T::zero(); c_out]);
        let chunk = images_per_chunk(&geom, n);
        let (mut col, mut dcol, mut gbuf, mut dxbuf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());

        for b0 in (0..n).step_by(chunk) {
            let nb = chunk.min(n - b0);
            let width = nb * out_plane;
            let gs = &g.data()[b0 * c_out * out_plane..(b0 + nb) * c_out * out_plane];
            gbuf.resize(c_out * width, T::zero());
            batch_to_channel_major(gs, nb, c_out, out_plane, &mut gbuf);
            let gmat = MatRef::new(&gbuf, c_out, width);
            if let Some(dw) = dw.as_mut() {
                let xs = &tx.data()[b0 * in_plane..(b0 + nb) * in_plane];
                col.resize(rows * width, T::zero());
                if pointwise {
                    batch_to_channel_major(xs, nb, geom.c_in, out_plane, &mut col);
                } else {
                    im2col(xs, &geom, nb, &mut col);
                }
                // dW += dY · colᵀ
                gemm(T::one(), gmat, MatRef::new(&col, rows, width).t(), T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[b0 * in_plane..(b0 + nb) * in_plane];
                let wt = MatRef::new(tw.data(), c_out, rows).t();
                if pointwise {
                    dxbuf.resize(rows * width, T::zero());
                    gemm(T::one(), wt, gmat, T::zero(), &mut dxbuf);
                    channel_major_to_batch(&dxbuf, nb, geom.c_in, out_plane, dxs);
                } else {
                    dcol.resize(rows * width, T::zero());
                    gemm(T::one(), wt, gmat, T::zero(), &mut dcol);
                    col2im(&dcol, &geom, nb, dxs);
                }
            }
            if let Some(db) = db.as_mut() {
                for (o, row) in gbuf.chunks(width).enumerate() {
                    db[o] += row.iter().copied().sum::<T>();
                }
            }
        }

        let mut grads = vec![
            dx.map(|d| Tensor::from_parts(tx.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(tw.shape().to_vec(), d)),
        ];
        if args.inputs.len() > 2 {
            grads.push(db.map(|d| Tensor::from_parts(vec![c_out], d)));
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, w: Tensor<f64>, b: Option<Tensor<f64>>, cfg: ConvConfig) -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let bv = b.map(|b| tape.leaf(b));
        let y = conv2d(&tape, xv, wv, bv, cfg)?;
        let out = tape.value(y).clone();
        Ok(out)
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::from_fn(vec![2, 1, 3, 5], |i| i as f64 - 7.0);
        let y = run(x.clone(), Tensor::full(vec![1, 1, 1, 1], 1.0), Some(Tensor::zeros(vec![1])), ConvConfig::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_row_example() {
        // [1,2,3,4,5] ⊛ [1,1] with r = 2: y[i] = x[i] + x[i+2]
        let x = Tensor::new(vec![1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let cfg = ConvConfig { stride: 1, padding: 0, dilation: 2 };
        let y = run(x, w, None, cfg).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 3]);
        assert_eq!(y.data(), &[4.0, 6.0, 8.0]);
    }

    #[test]
    fn channel_mismatch_and_empty_output() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let err = run(x.clone(), Tensor::zeros(vec![1, 3, 3, 3]), None, ConvConfig::default());
        assert!(matches!(err, Err(Error::ChannelMismatch { expected: 3, actual: 2, .. })));
        let cfg = ConvConfig { stride: 1, padding: 0, dilation: 3 };
        let err = run(x, Tensor::zeros(vec![1, 2, 3, 3]), None, cfg);
        assert!(matches!(err, Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn same_padding_preserves_size() {
        for r in [1, 2, 6] {
            let cfg = ConvConfig::same(3, r);
            assert_eq!(cfg.output_len(16, 3), Some(16));
        }
        assert_eq!(ConvConfig::same(1, 1).output_len(7, 1), Some(7));
    }
}
