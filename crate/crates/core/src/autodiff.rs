//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its output value and a backward
//! rule. Nodes are only ever appended, so node order is a topological order
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! A tape lives for one training step; build a fresh one per step.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: forward inputs and output, the incoming
/// gradient, and which inputs actually need a gradient.
pub struct BackwardArgs<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: &'a [bool],
}

/// Returns one gradient per input (`None` where `needs` is false).
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    recording: bool,
    branch_trace: Option<RefCell<u64>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            recording: true,
            branch_trace: None,
        }
    }

    /// A tape that evaluates values but records no backward rules.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    /// An inference tape that fingerprints every discrete branch decision
    /// (ReLU signs, max-pool winners). Finite-difference probes compare
    /// fingerprints to detect steps that cross a kink.
    pub fn branch_tracking() -> Self {
        Tape {
            branch_trace: Some(RefCell::new(0xcbf2_9ce4_8422_2325)),
            ..Self::inference()
        }
    }

    pub fn tracks_branches(&self) -> bool {
        self.branch_trace.is_some()
    }

    /// Folds branch decisions into the fingerprint (FNV-1a style).
    pub fn note_branches(&self, decisions: impl IntoIterator<Item = u64>) {
        if let Some(trace) = &self.branch_trace {
            let mut h = trace.borrow_mut();
            for d in decisions {
                *h ^= d;
                *h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }

    pub fn branch_fingerprint(&self) -> Option<u64> {
        self.branch_trace.as_ref().map(|t| *t.borrow())
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input (a parameter or a checked input).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, self.recording, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, false, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom_op(
        &self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = self.recording && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(
            value,
            inputs.iter().map(|v| v.0).collect(),
            backward,
            requires_grad,
            false,
        )
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        inputs: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
        leaf: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
            leaf,
        });
        Var(nodes.len() - 1)
    }

    /// Populates gradients of `root` with respect to every leaf.
    ///
    /// Gradients from an earlier call are discarded first, so repeated calls
    /// produce identical results. Intermediate gradients are released during
    /// the sweep; only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                reason: format!("root must be scalar, got shape {:?}", root_node.value.shape()),
            });
        }
        if !root_node.requires_grad {
            return Err(Error::InvalidArgument(
                "backward: root is detached from the tape (no differentiable inputs)".into(),
            ));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_node.value.shape().to_vec(), T::one()));

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = backward(&BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            });
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if !node.leaf {
                grads[id] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`.
    ///
    /// Leaves unreachable from the root get an all-zero gradient.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        if let Some(Some(g)) = self.grads.borrow().get(v.0) {
            return g.clone();
        }
        Tensor::zeros(self.shape(v))
    }

    /// Clears stored gradients.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output index with the matching offsets into two operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down onto the broadcast operand `shape`.
fn reduce_to<T: Element>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let strides = broadcast_strides(shape, grad.shape());
    let mut acc = Tensor::zeros(shape.to_vec());
    let src = grad.data();
    let dst = acc.data_mut();
    for_each_broadcast(grad.shape(), &strides, &strides, |o, i, _| dst[i] += src[o]);
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
}

pub fn sigmoid<T: Element>(r: T) -> T {
    T::one() / (T::one() + (-r).exp())
}

// ---------------------------------------------------------------------------
// Core operations

impl<T: Element> Tape<T> {
    /// Elementwise binary op with singleton-dimension broadcasting.
    pub fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            let name = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            };
            let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            })?;
            let f = |x: T, y: T| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            };
            if ta.shape() == tb.shape() {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(out_shape, data)
            } else {
                let sa = broadcast_strides(ta.shape(), &out_shape);
                let sb = broadcast_strides(tb.shape(), &out_shape);
                let mut out = Tensor::zeros(out_shape.clone());
                let (da, db) = (ta.data(), tb.data());
                let dst = out.data_mut();
                for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| dst[o] = f(da[i], db[j]));
                out
            }
        };
        Ok(self.custom_op(&[a, b], value, move |args| {
            let (ta, tb, g) = (args.inputs[0], args.inputs[1], args.grad);
            match kind {
                BinaryKind::Add => vec![
                    args.needs[0].then(|| reduce_to(g, ta.shape())),
                    args.needs[1].then(|| reduce_to(g, tb.shape())),
                ],
                BinaryKind::Sub => vec![
                    args.needs[0].then(|| reduce_to(g, ta.shape())),
                    args.needs[1].then(|| reduce_to(&g.map(|v| -v), tb.shape())),
                ],
                BinaryKind::Mul => {
                    let out = g.shape();
                    let sa = broadcast_strides(ta.shape(), out);
                    let sb = broadcast_strides(tb.shape(), out);
                    let mut ga = args.needs[0].then(|| Tensor::zeros(ta.shape().to_vec()));
                    let mut gb = args.needs[1].then(|| Tensor::zeros(tb.shape().to_vec()));
                    let (da, db, dg) = (ta.data(), tb.data(), g.data());
                    for_each_broadcast(out, &sa, &sb, |o, i, j| {
                        if let Some(ga) = ga.as_mut() {
                            ga.data_mut()[i] += dg[o] * db[j];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb.data_mut()[j] += dg[o] * da[i];
                        }
                    });
                    vec![ga, gb]
                }
            }
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&self, kind: UnaryKind, a: Var) -> Var {
        let value = {
            let ta = self.value(a);
            if kind == UnaryKind::Relu && self.tracks_branches() {
                self.note_branches(ta.data().iter().map(|&r| u64::from(r > T::zero())));
            }
            match kind {
                UnaryKind::Relu => ta.map(|r| if r > T::zero() { r } else { T::zero() }),
                UnaryKind::Sigmoid => ta.map(sigmoid),
            }
        };
        self.custom_op(&[a], value, move |args| {
            let g = args.grad.data();
            let data: Vec<T> = match kind {
                // relu'(r) = 1 if r > 0 else 0
                UnaryKind::Relu => args.inputs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&r, &g)| if r > T::zero() { g } else { T::zero() })
                    .collect(),
                // sigmoid'(r) = s(1 - s) in terms of the output s
                UnaryKind::Sigmoid => args
                    .output
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect(),
            };
            vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), data))]
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let value = self.value(a).map(|v| v * c);
        self.custom_op(&[a], value, move |args| vec![Some(args.grad.map(|g| g * c))])
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom_op(&[a], value, |args| {
            let g = args.grad.data()[0];
            vec![Some(Tensor::full(args.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenation of N×C_i×H×W tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_channels: no inputs".into()));
        }
        let value = {
            let tensors: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let [n, _, h, w] = tensors[0].dims4()?;
            let mut channels = Vec::with_capacity(tensors.len());
            for t in &tensors {
                let [tn, tc, th, tw] = t.dims4()?;
                if (tn, th, tw) != (n, h, w) {
                    return Err(Error::ShapeMismatch {
                        op: "concat_channels",
                        left: tensors[0].shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                channels.push(tc);
            }
            let c_total: usize = channels.iter().sum();
            let plane = h * w;
            let mut data = Vec::with_capacity(n * c_total * plane);
            for b in 0..n {
                for (t, &c) in tensors.iter().zip(&channels) {
                    data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
                }
            }
            Tensor::from_parts(vec![n, c_total, h, w], data)
        };
        Ok(self.custom_op(parts, value, |args| {
            let [n, c_total, h, w] = [
                args.grad.shape()[0],
                args.grad.shape()[1],
                args.grad.shape()[2],
                args.grad.shape()[3],
            ];
            let plane = h * w;
            let g = args.grad.data();
            let mut offset = 0;
            args.inputs
                .iter()
                .zip(args.needs)
                .map(|(t, &need)| {
                    let c = t.shape()[1];
                    let start = offset;
                    offset += c;
                    need.then(|| {
                        let mut data = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let base = (b * c_total + start) * plane;
                            data.extend_from_slice(&g[base..base + c * plane]);
                        }
                        Tensor::from_parts(t.shape().to_vec(), data)
                    })
                })
                .collect()
        }))
    }

    /// Per-pixel linear map across channels (a 1×1 convolution).
    ///
    /// `out[n,j,h,w] = Σ_i x[n,i,h,w]·W[i,j] + b[j]` with `W` shaped C_in×C_out.
    pub fn matmul_1x1(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = {
            let tx = self.value(x);
            let tw = self.value(weight);
            let [n, c_in, h, w] = tx.dims4()?;
            let &[w_in, c_out] = tw.shape() else {
                return Err(Error::InvalidShape {
                    op: "matmul_1x1",
                    reason: format!("weight must be C_in×C_out, got {:?}", tw.shape()),
                });
            };
            if w_in != c_in {
                return Err(Error::ChannelMismatch {
                    op: "matmul_1x1",
                    expected: w_in,
                    actual: c_in,
                });
            }
            let bias_t = bias.map(|b| self.value(b));
            if let Some(bt) = &bias_t {
                if bt.shape() != [c_out] {
                    return Err(Error::ShapeMismatch {
                        op: "matmul_1x1 bias",
                        left: bt.shape().to_vec(),
                        right: vec![c_out],
                    });
                }
            }
            let plane = h * w;
            let mut out = vec![T::zero(); n * c_out * plane];
            for b in 0..n {
                let xs = &tx.data()[b * c_in * plane..(b + 1) * c_in * plane];
                let os = &mut out[b * c_out * plane..(b + 1) * c_out * plane];
                if let Some(bt) = &bias_t {
                    for (j, chunk) in os.chunks_mut(plane).enumerate() {
                        chunk.fill(bt.data()[j]);
                    }
                }
                gemm(
                    T::one(),
                    MatRef::new(tw.data(), c_in, c_out).t(),
                    MatRef::new(xs, c_in, plane),
                    T::one(),
                    os,
                );
            }
            Tensor::from_parts(vec![n, c_out, h, w], out)
        };
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(weight)).chain(bias).collect();
        Ok(self.custom_op(&inputs, value, |args| {
            let (tx, tw, g) = (args.inputs[0], args.inputs[1], args.grad);
            let [n, c_in, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
            let c_out = tw.shape()[1];
            let plane = h * w;
            let mut dx = args.needs[0].then(|| vec![T::zero(); n * c_in * plane]);
            let mut dw = args.needs[1].then(|| vec![T::zero(); c_in * c_out]);
            let mut db = (args.needs.len() > 2 && args.needs[2]).then(|| vec![T::zero(); c_out]);
            for b in 0..n {
                let gs = &g.data()[b * c_out * plane..(b + 1) * c_out * plane];
                let xs = &tx.data()[b * c_in * plane..(b + 1) * c_in * plane];
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        T::one(),
                        MatRef::new(tw.data(), c_in, c_out),
                        MatRef::new(gs, c_out, plane),
                        T::zero(),
                        &mut dx[b * c_in * plane..(b + 1) * c_in * plane],
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    gemm(
                        T::one(),
                        MatRef::new(xs, c_in, plane),
                        MatRef::new(gs, c_out, plane).t(),
                        T::one(),
                        dw,
                    );
                }
                if let Some(db) = db.as_mut() {
                    for (j, chunk) in gs.chunks(plane).enumerate() {
                        db[j] += chunk.iter().copied().sum::<T>();
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
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(tape.value(tape.relu(x)).data(), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(t(&[1], &[0.0]));
        assert_eq!(tape.value(tape.sigmoid(z)).data(), &[0.5]);
    }

    #[test]
    fn broadcast_mul_matches_loop_oracle() {
        let tape = Tape::<f64>::new();
        let alpha = Tensor::from_fn(vec![2, 1, 4, 4], |i| (i as f64) * 0.1);
        let x = Tensor::from_fn(vec![2, 8, 4, 4], |i| (i as f64).sin());
        let a = tape.leaf(alpha.clone());
        let xv = tape.leaf(x.clone());
        let y = tape.mul(a, xv).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 8, 4, 4]);
        for n in 0..2 {
            for c in 0..8 {
                for h in 0..4 {
                    for w in 0..4 {
                        let want = alpha.at4(n, 0, h, w) * x.at4(n, c, h, w);
                        assert_eq!(out.at4(n, c, h, w).to_bits(), want.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn non_broadcastable_shapes_are_named() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 4]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[2.0, -1.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[4.0, -2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1], &[3.0]));
        let y = tape.add(a, a).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_roots() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::InvalidShape { .. })));
        let c = tape.constant(t(&[1], &[1.0]));
        let z = tape.scale(c, 2.0);
        assert!(matches!(tape.backward(z), Err(Error::InvalidArgument(_))));
        let inf = Tape::<f64>::inference();
        let l = inf.leaf(t(&[1], &[1.0]));
        let s = inf.sum(l);
        assert!(inf.backward(s).is_err());
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![1, 2, 3, 3], |i| (i as f64 * 0.7).cos()));
        let w = tape.leaf(Tensor::from_fn(vec![2, 3], |i| (i as f64 * 1.3).sin()));
        let y = tape.matmul_1x1(x, w, None).unwrap();
        let y = tape.sigmoid(y);
        let y = tape.mul(y, y).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let (g1x, g1w) = (tape.grad(x), tape.grad(w));
        tape.backward(s).unwrap();
        assert!(g1x.bit_eq(&tape.grad(x)));
        assert!(g1w.bit_eq(&tape.grad(w)));
    }

    #[test]
    fn matmul_1x1_identity_and_summation() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f64);
        let xv = tape.leaf(x.clone());
        let eye = tape.leaf(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero_b = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.matmul_1x1(xv, eye, Some(zero_b)).unwrap();
        assert_eq!(*tape.value(y), x);

        let px = tape.leaf(t(&[1, 2, 1, 1], &[3.0, 4.0]));
        let ones = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
        let y = tape.matmul_1x1(px, ones, None).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
    }

    #[test]
    fn matmul_1x1_channel_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3, 2, 2]));
        let w = tape.leaf(Tensor::zeros(vec![2, 4]));
        assert!(matches!(
            tape.matmul_1x1(x, w, None),
            Err(Error::ChannelMismatch { expected: 2, actual: 3, .. })
        ));
    }

    #[test]
    fn concat_channels_routes_gradients() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(vec![2, 1, 2, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(vec![2, 2, 2, 2], |i| 100.0 + i as f64));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), vec![2, 3, 2, 2]);
        let cv = tape.value(c).clone();
        assert_eq!(cv.at4(1, 0, 1, 1), 7.0);
        assert_eq!(cv.at4(1, 2, 0, 0), 100.0 + 12.0);
        let weights = tape.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64));
        let y = tape.mul(c, weights).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).data()[4], 12.0);
        assert_eq!(tape.grad(b).data()[0], 4.0);
    }
}
