//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of recorded operations. [`Var`] is a
//! value plus an optional handle to the node that produced it. Operations on
//! untracked vars compute values only and never touch a tape, so the same
//! model code serves training (parameters registered with [`Tape::param`])
//! and inference (parameters wrapped with [`Var::constant`]).

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::gemm::{gemm, Layout};
use super::tensor::{axis_split, layernorm_forward, Tensor};
use crate::error::{bail, Result};

/// Backward rule for an operation defined outside this module.
pub trait CustomBackward {
    /// Returns one gradient per recorded input. Entries whose `needs` flag is
    /// false may be `None`.
    fn backward(&self, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add { a_shape: Vec<usize>, b_shape: Vec<usize> },
    Sub { a_shape: Vec<usize>, b_shape: Vec<usize> },
    Mul { a: Rc<Tensor>, b: Rc<Tensor> },
    Scale(f64),
    AddScalar,
    Exp { out: Rc<Tensor> },
    Log { x: Rc<Tensor> },
    MatMul { a: Rc<Tensor>, b: Rc<Tensor> },
    AddBias { width: usize },
    Softmax { axis: usize, out: Rc<Tensor> },
    LogSoftmax { axis: usize, out: Rc<Tensor> },
    LayerNorm { xhat: Tensor, rstd: Vec<f64>, gain: Rc<Tensor> },
    Sum { shape: Vec<usize> },
    Mean { shape: Vec<usize> },
    SumAxis { axis: usize, shape: Vec<usize> },
    MaxAxis { axis: usize, shape: Vec<usize>, argmax: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
    Gelu { x: Rc<Tensor> },
    Silu { x: Rc<Tensor> },
    Gather { rows: usize, ids: Vec<usize> },
    BroadcastMul { x: Rc<Tensor>, s: Rc<Tensor> },
    BroadcastAdd { s_shape: Vec<usize> },
    Custom(Box<dyn CustomBackward>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Gelu { .. } => "gelu",
            Op::Silu { .. } => "silu",
            Op::Gather { .. } => "gather",
            Op::BroadcastMul { .. } => "broadcast_mul",
            Op::BroadcastAdd { .. } => "broadcast_add",
            Op::Custom(_) => "custom",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    inputs: Vec<Option<usize>>,
    op: Op,
}

/// Gradient tape. Cloning yields another handle to the same tape.
#[derive(Clone, Default)]
pub struct Tape(Rc<RefCell<Vec<Node>>>);

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tracked leaf whose gradient will be reported by backward.
    pub fn param(&self, value: Tensor) -> Var {
        let id = self.push(Node {
            inputs: Vec::new(),
            op: Op::Leaf,
        });
        Var {
            value: Rc::new(value),
            node: Some((self.clone(), id)),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.0.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// A value that may be tracked on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<(Tape, usize)>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|(_, id)| *id))
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node.as_ref().and_then(|(_, id)| self.grads.get(id))
    }

    /// Gradient for `var`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn scalar_like(shape: &[usize], v: f64) -> Tensor {
    Tensor::full(shape.to_vec(), v)
}

impl Var {
    /// Wraps a value that is never differentiated.
    pub fn constant(value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Copies the value out, dropping any tape association.
    pub fn detach(&self) -> Var {
        Var::constant((*self.value).clone())
    }

    fn record(inputs: &[&Var], value: Tensor, op: impl FnOnce() -> Op) -> Result<Var> {
        let mut tape: Option<&Tape> = None;
        for v in inputs {
            if let Some((t, _)) = &v.node {
                match tape {
                    None => tape = Some(t),
                    Some(existing) if !existing.same(t) => {
                        bail!(Contract, "operation mixes vars from two different tapes")
                    }
                    _ => {}
                }
            }
        }
        let node = match tape {
            None => None,
            Some(t) => {
                let ids = inputs.iter().map(|v| v.node.as_ref().map(|(_, id)| *id)).collect();
                let id = t.push(Node {
                    inputs: ids,
                    op: op(),
                });
                Some((t.clone(), id))
            }
        };
        Ok(Var {
            value: Rc::new(value),
            node,
        })
    }

    /// Records an operation whose backward rule lives elsewhere.
    pub fn custom(
        inputs: &[&Var],
        value: Tensor,
        backward: impl CustomBackward + 'static,
    ) -> Result<Var> {
        Var::record(inputs, value, || Op::Custom(Box::new(backward)))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value.add(&other.value)?;
        Var::record(&[self, other], v, || Op::Add {
            a_shape: self.shape().to_vec(),
            b_shape: other.shape().to_vec(),
        })
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value.sub(&other.value)?;
        Var::record(&[self, other], v, || Op::Sub {
            a_shape: self.shape().to_vec(),
            b_shape: other.shape().to_vec(),
        })
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value.mul(&other.value)?;
        Var::record(&[self, other], v, || Op::Mul {
            a: self.value.clone(),
            b: other.value.clone(),
        })
    }

    pub fn scale(&self, k: f64) -> Result<Var> {
        Var::record(&[self], self.value.scale(k), || Op::Scale(k))
    }

    pub fn add_scalar(&self, k: f64) -> Result<Var> {
        Var::record(&[self], self.value.add_scalar(k), || Op::AddScalar)
    }

    pub fn exp(&self) -> Result<Var> {
        let out = Rc::new(self.value.exp());
        let saved = out.clone();
        Var::record(&[self], (*out).clone(), || Op::Exp { out: saved })
    }

    pub fn log(&self) -> Result<Var> {
        let v = self.value.log()?;
        Var::record(&[self], v, || Op::Log {
            x: self.value.clone(),
        })
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let v = self.value.matmul(&other.value)?;
        Var::record(&[self, other], v, || Op::MatMul {
            a: self.value.clone(),
            b: other.value.clone(),
        })
    }

    /// Adds `bias` (shape `[D]`) along the last axis.
    pub fn add_bias(&self, bias: &Var) -> Result<Var> {
        let width = *self.shape().last().unwrap_or(&1);
        if bias.value.len() != width || self.value.rank() == 0 {
            bail!(
                Dimension,
                "bias {:?} does not match last axis of {:?}",
                bias.shape(),
                self.shape()
            );
        }
        let mut out = (*self.value).clone();
        for row in out.data_mut().chunks_exact_mut(width) {
            for (o, b) in row.iter_mut().zip(bias.value.data()) {
                *o += b;
            }
        }
        Var::record(&[self, bias], out, || Op::AddBias { width })
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let out = Rc::new(self.value.softmax(axis)?);
        let saved = out.clone();
        Var::record(&[self], (*out).clone(), || Op::Softmax { axis, out: saved })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var> {
        let out = Rc::new(self.value.log_softmax(axis)?);
        let saved = out.clone();
        Var::record(&[self], (*out).clone(), || Op::LogSoftmax { axis, out: saved })
    }

    pub fn layernorm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (y, xhat, rstd) = layernorm_forward(&self.value, &gain.value, &bias.value, eps)?;
        Var::record(&[self, gain, bias], y, || Op::LayerNorm {
            xhat,
            rstd,
            gain: gain.value.clone(),
        })
    }

    /// Sum of all elements as a rank-0 var.
    pub fn sum(&self) -> Result<Var> {
        let shape = self.shape().to_vec();
        Var::record(&[self], Tensor::scalar(self.value.sum()), || Op::Sum { shape })
    }

    pub fn mean(&self) -> Result<Var> {
        let shape = self.shape().to_vec();
        Var::record(&[self], Tensor::scalar(self.value.mean()), || Op::Mean { shape })
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let v = self.value.sum_axis(axis)?;
        let shape = self.shape().to_vec();
        Var::record(&[self], v, || Op::SumAxis { axis, shape })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let n = self.value.shape().get(axis).copied().unwrap_or(1) as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }

    pub fn max_axis(&self, axis: usize) -> Result<Var> {
        let v = self.value.max_axis(axis)?;
        let shape = self.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let data = self.value.data();
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..n {
                    if data[(o * n + j) * inner + i] > data[(o * n + best) * inner + i] {
                        best = j;
                    }
                }
                argmax[o * inner + i] = best;
            }
        }
        Var::record(&[self], v, || Op::MaxAxis { axis, shape, argmax })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value.reshape(shape)?;
        let old = self.shape().to_vec();
        Var::record(&[self], v, || Op::Reshape { shape: old })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let v = self.value.permute(perm)?;
        Var::record(&[self], v, || Op::Permute {
            perm: perm.to_vec(),
        })
    }

    pub fn transpose(&self) -> Result<Var> {
        if self.value.rank() != 2 {
            bail!(Dimension, "transpose needs rank 2, got {:?}", self.shape());
        }
        self.permute(&[1, 0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var> {
        let v = self.value.map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        Var::record(&[self], v, || Op::Gelu {
            x: self.value.clone(),
        })
    }

    pub fn silu(&self) -> Result<Var> {
        let v = self.value.map(|x| x * sigmoid(x));
        Var::record(&[self], v, || Op::Silu {
            x: self.value.clone(),
        })
    }

    /// Selects rows of a rank-2 table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var> {
        if self.value.rank() != 2 {
            bail!(Dimension, "gather_rows needs a rank-2 table, got {:?}", self.shape());
        }
        let (rows, width) = (self.shape()[0], self.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            bail!(Contract, "row id {bad} out of range for table with {rows} rows");
        }
        if ids.is_empty() {
            bail!(Dimension, "gather_rows with no ids");
        }
        let src = self.value.data();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let v = Tensor::new(vec![ids.len(), width], data)?;
        Var::record(&[self], v, || Op::Gather {
            rows,
            ids: ids.to_vec(),
        })
    }

    /// `x[b, m, k] * s[b, k]` where `x` has leading extent `B` and `s` has
    /// shape `[B, K]`, with `K` either 1 or the last extent of `x`.
    pub fn broadcast_mul(&self, s: &Var) -> Result<Var> {
        let (_, m, k) = broadcast_dims(self.value.shape(), s.value.shape())?;
        let mut out = (*self.value).clone();
        let sd = s.value.data();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let (bi, ki) = (i / (m * k), i % k);
            *o *= sd[bi * k + ki];
        }
        Var::record(&[self, s], out, || Op::BroadcastMul {
            x: self.value.clone(),
            s: s.value.clone(),
        })
    }

    /// `x[b, m, k] + s[b, k]`; see [`Var::broadcast_mul`].
    pub fn broadcast_add(&self, s: &Var) -> Result<Var> {
        let (_, m, k) = broadcast_dims(self.value.shape(), s.value.shape())?;
        let mut out = (*self.value).clone();
        let sd = s.value.data();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let (bi, ki) = (i / (m * k), i % k);
            *o += sd[bi * k + ki];
        }
        let s_shape = s.shape().to_vec();
        Var::record(&[self, s], out, || Op::BroadcastAdd { s_shape })
    }

    /// Reverse pass from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        if !self.value.is_scalar() {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape());
        }
        let (tape, root) = match &self.node {
            Some((t, id)) => (t.clone(), *id),
            None => bail!(Contract, "backward on an untracked value"),
        };
        let nodes = tape.0.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::full(self.shape().to_vec(), 1.0));
        let mut out = Gradients::default();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                out.grads.insert(id, g);
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = node_backward(&node.op, &g, &needs)?;
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(pid), Some(ig)) = (slot, ig) {
                    match &mut grads[*pid] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                                *a += b;
                            }
                        }
                        empty => *empty = Some(ig),
                    }
                }
            }
        }
        Ok(out)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn broadcast_dims(x: &[usize], s: &[usize]) -> Result<(usize, usize, usize)> {
    let ok = s.len() == 2 && !x.is_empty() && x[0] == s[0];
    let k = if ok { s[1] } else { 0 };
    let total: usize = x.iter().product();
    if !ok || !(k == 1 || Some(&k) == x.last()) || x.len() < 2 {
        bail!(Dimension, "cannot broadcast {s:?} over {x:?}");
    }
    Ok((x[0], total / (x[0] * k), k))
}

/// Folds a gradient back onto an operand that may have been a broadcast scalar.
fn unbroadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g.clone()
    } else {
        Tensor::full(shape.to_vec(), g.sum())
    }
}

fn node_backward(op: &Op, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let one = |t: Tensor| Ok(vec![Some(t)]);
    match op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::Add { a_shape, b_shape } => Ok(vec![
            Some(unbroadcast(g, a_shape)),
            Some(unbroadcast(g, b_shape)),
        ]),
        Op::Sub { a_shape, b_shape } => Ok(vec![
            Some(unbroadcast(g, a_shape)),
            Some(unbroadcast(g, b_shape).scale(-1.0)),
        ]),
        Op::Mul { a, b } => {
            let ga = needs[0].then(|| g.mul(b).map(|t| unbroadcast(&t, a.shape()))).transpose()?;
            let gb = needs[1].then(|| g.mul(a).map(|t| unbroadcast(&t, b.shape()))).transpose()?;
            Ok(vec![ga, gb])
        }
        Op::Scale(k) => one(g.scale(*k)),
        Op::AddScalar => one(g.clone()),
        Op::Exp { out } => one(g.mul(out)?),
        Op::Log { x } => one(g.zip_div(x)),
        Op::MatMul { a, b } => {
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g.data(), Layout::Normal, b.data(), Layout::Transposed, &mut d, false);
                Tensor::zeros(vec![m, k]).with_data(d)
            });
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, a.data(), Layout::Transposed, g.data(), Layout::Normal, &mut d, false);
                Tensor::zeros(vec![k, n]).with_data(d)
            });
            Ok(vec![ga, gb])
        }
        Op::AddBias { width } => {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; *width];
                for row in g.data().chunks_exact(*width) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_vec(acc)
            });
            Ok(vec![Some(g.clone()), gb])
        }
        Op::Softmax { axis, out } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| y[idx(j)] * gd[idx(j)]).sum();
                    for j in 0..n {
                        dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                    }
                }
            }
            one(out.as_ref().clone().with_data(dx))
        }
        Op::LogSoftmax { axis, out } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let total: f64 = (0..n).map(|j| gd[idx(j)]).sum();
                    for j in 0..n {
                        dx[idx(j)] = gd[idx(j)] - y[idx(j)].exp() * total;
                    }
                }
            }
            one(out.as_ref().clone().with_data(dx))
        }
        Op::LayerNorm { xhat, rstd, gain } => {
            let d = gain.len();
            let (h, gd, gn) = (xhat.data(), g.data(), gain.data());
            let mut dx = vec![0.0; h.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for (r, &rs) in rstd.iter().enumerate() {
                let base = r * d;
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..d {
                    let dh = gd[base + j] * gn[j];
                    mean_dh += dh;
                    mean_dh_h += dh * h[base + j];
                    dgain[j] += gd[base + j] * h[base + j];
                    dbias[j] += gd[base + j];
                }
                mean_dh /= d as f64;
                mean_dh_h /= d as f64;
                for j in 0..d {
                    let dh = gd[base + j] * gn[j];
                    dx[base + j] = rs * (dh - mean_dh - h[base + j] * mean_dh_h);
                }
            }
            Ok(vec![
                Some(xhat.clone().with_data(dx)),
                Some(gain.as_ref().clone().with_data(dgain)),
                Some(gain.as_ref().clone().with_data(dbias)),
            ])
        }
        Op::Sum { shape } => one(scalar_like(shape, g.data()[0])),
        Op::Mean { shape } => {
            let n: usize = shape.iter().product();
            one(scalar_like(shape, g.data()[0] / n as f64))
        }
        Op::SumAxis { axis, shape } => {
            let (outer, n, inner) = axis_split(shape, *axis);
            let mut dx = vec![0.0; outer * n * inner];
            let gd = g.data();
            for o in 0..outer {
                for j in 0..n {
                    dx[(o * n + j) * inner..(o * n + j + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            one(Tensor::new(shape.clone(), dx)?)
        }
        Op::MaxAxis { axis, shape, argmax } => {
            let (outer, n, inner) = axis_split(shape, *axis);
            let mut dx = vec![0.0; outer * n * inner];
            let gd = g.data();
            for o in 0..outer {
                for i in 0..inner {
                    dx[(o * n + argmax[o * inner + i]) * inner + i] = gd[o * inner + i];
                }
            }
            one(Tensor::new(shape.clone(), dx)?)
        }
        Op::Reshape { shape } => one(g.reshape(shape.clone())?),
        Op::Permute { perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            one(g.permute(&inverse)?)
        }
        Op::Gelu { x } => {
            let dx = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gv)| {
                    let inner = GELU_C * (x + 0.044715 * x * x * x);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                })
                .collect();
            one(g.clone().with_data(dx))
        }
        Op::Silu { x } => {
            let dx = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gv)| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            one(g.clone().with_data(dx))
        }
        Op::Gather { rows, ids } => {
            let width = g.shape()[1];
            let mut dt = vec![0.0; rows * width];
            for (r, &i) in ids.iter().enumerate() {
                for (a, v) in dt[i * width..(i + 1) * width]
                    .iter_mut()
                    .zip(&g.data()[r * width..(r + 1) * width])
                {
                    *a += v;
                }
            }
            one(Tensor::new(vec![*rows, width], dt)?)
        }
        Op::BroadcastMul { x, s } => {
            let (_, m, k) = broadcast_dims(x.shape(), s.shape())?;
            let sd = s.data();
            let gx = needs[0].then(|| {
                let d = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * sd[(i / (m * k)) * k + i % k])
                    .collect();
                g.clone().with_data(d)
            });
            let gs = needs[1].then(|| {
                let mut d = vec![0.0; sd.len()];
                for (i, (gv, xv)) in g.data().iter().zip(x.data()).enumerate() {
                    d[(i / (m * k)) * k + i % k] += gv * xv;
                }
                s.as_ref().clone().with_data(d)
            });
            Ok(vec![gx, gs])
        }
        Op::BroadcastAdd { s_shape } => {
            let (_, m, k) = broadcast_dims(g.shape(), s_shape)?;
            let gs = needs[1].then(|| {
                let mut d = vec![0.0; s_shape.iter().product()];
                for (i, gv) in g.data().iter().enumerate() {
                    d[(i / (m * k)) * k + i % k] += gv;
                }
                Tensor::zeros(s_shape.clone()).with_data(d)
            });
            Ok(vec![Some(g.clone()), gs])
        }
        Op::Custom(f) => f.backward(g, needs),
    }
}

impl Tensor {
    pub(crate) fn with_data(self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.len());
        let shape = self.shape().to_vec();
        Tensor::new(shape, data).expect("with_data preserves length")
    }

    fn zip_div(&self, other: &Tensor) -> Tensor {
        let d = self.data().iter().zip(other.data()).map(|(a, b)| a / b).collect();
        self.clone().with_data(d)
    }
}
