use std::cell::{Cell, RefCell};
use std::ops::Range;
use std::rc::Rc;

use super::{AutodiffError, Tensor};

/// Layer-norm variance floor: constant rows normalise to zero.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Gelu(usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    NormLast(usize),
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation record for one forward pass. Values are recorded in topological
/// order as ops are applied; `backward` walks the records once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Only leaves created with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Clears accumulated gradients so that `backward` may run again.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// A second call without an intervening [`Tape::zero_grad`] is rejected
    /// rather than silently double-counting.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), AutodiffError> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AutodiffError::Contract("loss belongs to a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(AutodiffError::Contract(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            } else if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    /// Gradient of a leaf after `backward`; `None` for leaves without `requires_grad`.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(var.id).and_then(|g| g.clone())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adds `g` into the input slot, building a zero tensor on first touch.
fn accumulate_with(
    grads: &mut [Option<Tensor>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape().to_vec()));
    f(slot.data_mut());
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            if sa == sb {
                accumulate(grads, nodes, *a, g.clone());
                accumulate(grads, nodes, *b, g.map(|x| sign * x));
            } else {
                let (_, oa, ob) = broadcast_offsets(sa, sb).expect("checked in forward");
                accumulate_with(grads, nodes, *a, |ga| {
                    for (i, &o) in oa.iter().enumerate() {
                        ga[o] += gd[i];
                    }
                });
                accumulate_with(grads, nodes, *b, |gb| {
                    for (i, &o) in ob.iter().enumerate() {
                        gb[o] += sign * gd[i];
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if va.shape() == vb.shape() {
                accumulate_with(grads, nodes, *a, |ga| {
                    for ((s, &gi), &bi) in ga.iter_mut().zip(gd).zip(vb.data()) {
                        *s += gi * bi;
                    }
                });
                accumulate_with(grads, nodes, *b, |gb| {
                    for ((s, &gi), &ai) in gb.iter_mut().zip(gd).zip(va.data()) {
                        *s += gi * ai;
                    }
                });
            } else {
                let (_, oa, ob) = broadcast_offsets(va.shape(), vb.shape()).expect("checked");
                let (ad, bd) = (va.data(), vb.data());
                accumulate_with(grads, nodes, *a, |ga| {
                    for i in 0..gd.len() {
                        ga[oa[i]] += gd[i] * bd[ob[i]];
                    }
                });
                accumulate_with(grads, nodes, *b, |gb| {
                    for i in 0..gd.len() {
                        gb[ob[i]] += gd[i] * ad[oa[i]];
                    }
                });
            }
        }
        Op::Scale(x, s) => accumulate(grads, nodes, *x, g.map(|v| v * s)),
        Op::AddScalar(x) => accumulate(grads, nodes, *x, g.clone()),
        Op::Exp(x) => accumulate_with(grads, nodes, *x, |gx| {
            for ((s, &gi), &y) in gx.iter_mut().zip(gd).zip(out.data()) {
                *s += gi * y;
            }
        }),
        Op::Log(x) => {
            let xv = &nodes[*x].value;
            accumulate_with(grads, nodes, *x, |gx| {
                for ((s, &gi), &xi) in gx.iter_mut().zip(gd).zip(xv.data()) {
                    *s += gi / xi;
                }
            })
        }
        Op::Sqrt(x) => accumulate_with(grads, nodes, *x, |gx| {
            for ((s, &gi), &y) in gx.iter_mut().zip(gd).zip(out.data()) {
                *s += gi * 0.5 / y;
            }
        }),
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            accumulate_with(grads, nodes, *x, |gx| {
                for ((s, &gi), &xi) in gx.iter_mut().zip(gd).zip(xv.data()) {
                    *s += gi * gelu_grad(xi);
                }
            })
        }
        Op::Clamp(x, lo, hi) => {
            let xv = &nodes[*x].value;
            accumulate_with(grads, nodes, *x, |gx| {
                for ((s, &gi), &xi) in gx.iter_mut().zip(gd).zip(xv.data()) {
                    if xi >= *lo && xi <= *hi {
                        *s += gi;
                    }
                }
            })
        }
        Op::Softmax(x) => {
            let d = out.last_dim();
            accumulate_with(grads, nodes, *x, |gx| {
                for ((grow, yrow), srow) in gd
                    .chunks_exact(d)
                    .zip(out.data().chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((s, &gi), &yi) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += yi * (gi - dot);
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = out.last_dim();
            let gainv = &nodes[*gain].value;
            accumulate_with(grads, nodes, *gain, |gg| {
                for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((s, &gi), &hi) in gg.iter_mut().zip(grow).zip(hrow) {
                        *s += gi * hi;
                    }
                }
            });
            accumulate_with(grads, nodes, *bias, |gb| {
                for grow in gd.chunks_exact(d) {
                    for (s, &gi) in gb.iter_mut().zip(grow) {
                        *s += gi;
                    }
                }
            });
            accumulate_with(grads, nodes, *x, |gx| {
                let mut dxhat = vec![0.0; d];
                for (r, ((grow, hrow), srow)) in gd
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    for ((dh, &gi), &w) in dxhat.iter_mut().zip(grow).zip(gainv.data()) {
                        *dh = gi * w;
                    }
                    let mean_dh = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh_h =
                        dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((s, &dh), &hi) in srow.iter_mut().zip(&dxhat).zip(hrow) {
                        *s += rstd[r] * (dh - mean_dh - hi * mean_dh_h);
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &id in inputs {
                let width = nodes[id].value.shape()[*axis] * inner;
                accumulate_with(grads, nodes, id, |gx| {
                    for o in 0..outer {
                        let src = &gd[o * total + offset..o * total + offset + width];
                        for (s, &v) in gx[o * width..(o + 1) * width].iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                });
                offset += width;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let total = in_shape[*axis] * inner;
            let width = out.shape()[*axis] * inner;
            accumulate_with(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    let dst = &mut gx[o * total + start * inner..o * total + start * inner + width];
                    for (s, &v) in dst.iter_mut().zip(&gd[o * width..(o + 1) * width]) {
                        *s += v;
                    }
                }
            });
        }
        Op::Reshape(x) => accumulate_with(grads, nodes, *x, |gx| {
            for (s, &v) in gx.iter_mut().zip(gd) {
                *s += v;
            }
        }),
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            accumulate_with(grads, nodes, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] += gd[i * c + j];
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            // dA += G · Bᵀ
            accumulate_with(grads, nodes, *a, |ga| {
                gemm(m, n, k, gd, (n, 1), vb.data(), (1, n), ga, 1.0);
            });
            // dB += Aᵀ · G
            accumulate_with(grads, nodes, *b, |gb| {
                gemm(k, m, n, va.data(), (1, k), gd, (n, 1), gb, 1.0);
            });
        }
        Op::GatherRows { x, rows } => {
            let d = out.last_dim();
            accumulate_with(grads, nodes, *x, |gx| {
                for (i, &r) in rows.iter().enumerate() {
                    for (s, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                        *s += v;
                    }
                }
            });
        }
        Op::Sum(x) => {
            let gi = gd[0];
            accumulate_with(grads, nodes, *x, |gx| gx.iter_mut().for_each(|s| *s += gi));
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.numel() as f64;
            let gi = gd[0] / n;
            accumulate_with(grads, nodes, *x, |gx| gx.iter_mut().for_each(|s| *s += gi));
        }
        Op::NormLast(x) => {
            let xv = &nodes[*x].value;
            let d = xv.last_dim();
            accumulate_with(grads, nodes, *x, |gx| {
                for (r, (xrow, srow)) in xv
                    .data()
                    .chunks_exact(d)
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let n = out.data()[r];
                    // subgradient 0 at the origin
                    if n > 0.0 {
                        let f = gd[r] / n;
                        for (s, &xi) in srow.iter_mut().zip(xrow) {
                            *s += f * xi;
                        }
                    }
                }
            });
        }
    }
}

/// `c (m×n) = beta·c + a (m×k) · b (k×n)` with explicit (row, col) strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slices cover the addressed ranges for the given strides and
    // dimensions; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numpy-style broadcast of two shapes; returns the output shape and, for
/// every output element, the flat offsets into each input.
fn broadcast_offsets(
    a: &[usize],
    b: &[usize],
) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let nd = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(nd);
    for (&x, &y) in pa.iter().zip(&pb) {
        out.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return None,
        });
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; nd];
        let mut acc = 1;
        for i in (0..nd).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let numel: usize = out.iter().product();
    let mut oa = Vec::with_capacity(numel);
    let mut ob = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    let (mut fa, mut fb) = (0usize, 0usize);
    for _ in 0..numel {
        oa.push(fa);
        ob.push(fb);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            fa += sa[ax];
            fb += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            fa -= sa[ax] * out[ax];
            fb -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Some((out, oa, ob))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, rg, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, AutodiffError> {
        let (va, vb) = (self.value(), other.value());
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let (shape, oa, ob) =
                broadcast_offsets(va.shape(), vb.shape()).ok_or_else(|| AutodiffError::Shape {
                    op: op_name,
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                })?;
            let (ad, bd) = (va.data(), vb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, rg, op))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                value: *bad,
            });
        }
        let v = x.map(f64::ln);
        Ok(self.unary(v, Op::Log(self.id)))
    }

    pub fn sqrt(self) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                value: *bad,
            });
        }
        let v = x.map(f64::sqrt);
        Ok(self.unary(v, Op::Sqrt(self.id)))
    }

    /// tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let d = x.last_dim();
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(v, Op::Softmax(self.id))
    }

    /// Layer normalisation over the last axis with learnable gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        let d = x.last_dim();
        for p in [gain, bias] {
            if p.value().numel() != d {
                return Err(AutodiffError::Shape {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: p.shape(),
                });
            }
        }
        let (gv, bv) = (gain.value(), bias.value());
        let rows = x.numel() / d.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            rg,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, AutodiffError> {
        let first = parts.first().ok_or_else(|| {
            AutodiffError::Contract("concat of an empty list".into())
        })?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::Axis { op: "concat", axis, ndim: base.len() });
        }
        let mut shape = base.clone();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let value = Tensor::new(shape, data)?;
        Ok(tape.push(
            value,
            rg,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Sub-range along `axis`.
    pub fn slice(self, axis: usize, range: Range<usize>) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::Axis { op: "slice", axis, ndim: shape.len() });
        }
        if range.start > range.end || range.end > shape[axis] {
            return Err(AutodiffError::Range {
                start: range.start,
                end: range.end,
                len: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis] * inner;
        let width = range.len() * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let s = o * total + range.start * inner;
            data.extend_from_slice(&x.data()[s..s + width]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = range.len();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.unary(
            value,
            Op::Slice {
                x: self.id,
                axis,
                start: range.start,
            },
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>, AutodiffError> {
        let value = (*self.value()).clone().reshaped(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Transpose of a 2-D array.
    pub fn transpose(self) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        let [r, c] = two_d(&x, "transpose")?;
        let src = x.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    /// Matrix product of two 2-D arrays.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (a, b) = (self.value(), other.value());
        let [m, k] = two_d(&a, "matmul")?;
        let [k2, n] = two_d(&b, "matmul")?;
        if k != k2 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut data, 0.0);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, rg, Op::MatMul(self.id, other.id)))
    }

    /// Selects rows of a 2-D array (rows may repeat).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        let [n, d] = two_d(&x, "gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(AutodiffError::Range { start: r, end: r + 1, len: n });
            }
            data.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.unary(
            value,
            Op::GatherRows {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.numel() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    /// Euclidean norm over the last axis; the axis is dropped.
    pub fn norm_last(self) -> Var<'t> {
        let x = self.value();
        let d = x.last_dim();
        let data: Vec<f64> = x
            .data()
            .chunks_exact(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut shape = x.shape().to_vec();
        shape.pop();
        let value = Tensor::new(shape, data).expect("row count");
        self.unary(value, Op::NormLast(self.id))
    }
}

fn two_d(t: &Tensor, op: &'static str) -> Result<[usize; 2], AutodiffError> {
    match t.shape() {
        &[r, c] => Ok([r, c]),
        s => Err(AutodiffError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}
