//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is created, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. Nodes that cannot reach a trainable leaf are skipped
//! during the backward sweep, so frozen sub-networks cost nothing there.
//!
//! Shape mismatches inside the graph are contract violations and panic with
//! the offending shapes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sparse per-channel linear map from the spatial positions of an NCHW
/// source to a set of output bins (used for bilinear region pooling).
///
/// Output shape is `[rois, channels, bin_h, bin_w]`; bin `k` of roi `r`
/// reads `Σ w · src[batch, c, idx]` over its taps.
#[derive(Debug, Clone)]
pub struct SpatialTaps<T> {
    pub rois: usize,
    pub bin_h: usize,
    pub bin_w: usize,
    /// `(batch index, tap range)` per `(roi, bin)`, roi-major.
    pub bins: Vec<(usize, std::ops::Range<usize>)>,
    /// `(flat spatial index y*W + x, weight)`.
    pub taps: Vec<(usize, T)>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(#[allow(dead_code)] usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Relu(usize),
    Sigmoid(usize),
    Powf(usize, T),
    Clamp(usize, T, T),
    Minimum(usize, usize),
    Maximum(usize, usize),
    Sum(usize),
    SumLast(usize),
    Reshape(usize),
    Narrow { src: usize, axis: usize, start: usize },
    Concat { srcs: Vec<usize>, axis: usize },
    IndexSelect { src: usize, idx: Vec<usize> },
    Conv2d { input: usize, weight: usize, bias: Option<usize>, stride: usize, pad: usize },
    DwXcorr { kernel: usize, search: usize },
    Gather { src: usize, taps: Arc<SpatialTaps<T>> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    grad: bool,
}

/// Operation tape.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, usize>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    id: usize,
    graph: &'g Graph<T>,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, usize>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter registered through [`Graph::param`].
    pub fn param(&self, param_id: usize) -> Option<&Tensor<T>> {
        self.params.get(&param_id).and_then(|&n| self.by_node[n].as_ref())
    }

    /// Ids of all parameters that received a gradient.
    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params
            .iter()
            .filter(|(_, &n)| self.by_node[n].is_some())
            .map(|(&p, _)| p)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op, grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, grad });
        Var { id: nodes.len() - 1, graph: self }
    }

    fn val(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].grad
    }

    /// A value that gradients flow into.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that gradients never flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    /// Registers parameter `id`. Repeated calls within one graph return the
    /// same node, so shared weights accumulate one gradient.
    pub fn param(&self, id: usize, value: &Arc<Tensor<T>>, trainable: bool) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { id: node, graph: self };
        }
        let v = self.push_arc(value.clone(), Op::Param(id), trainable);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let vals: Vec<_> = parts.iter().map(|p| self.val(p.id)).collect();
        let first = vals[0].shape();
        let mut shape = first.to_vec();
        shape[axis] = 0;
        for v in &vals {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let grad = parts.iter().any(|p| self.needs(p.id));
        let srcs = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Concat { srcs, axis }, grad)
    }

    /// Sparse spatial gather, see [`SpatialTaps`].
    pub fn gather<'g>(&'g self, src: Var<'g, T>, taps: Arc<SpatialTaps<T>>) -> Var<'g, T> {
        let x = self.val(src.id);
        let (n, c, h, w) = x.dims4();
        let bins = taps.bin_h * taps.bin_w;
        assert_eq!(taps.bins.len(), taps.rois * bins, "gather: bin table size");
        let mut out = vec![T::zero(); taps.rois * c * bins];
        for r in 0..taps.rois {
            for k in 0..bins {
                let (b, range) = &taps.bins[r * bins + k];
                assert!(*b < n, "gather: batch index {b} out of {n}");
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    let mut acc = T::zero();
                    for &(idx, wt) in &taps.taps[range.clone()] {
                        acc += wt * x.data()[base + idx];
                    }
                    out[(r * c + ch) * bins + k] = acc;
                }
            }
        }
        let shape = [taps.rois, c, taps.bin_h, taps.bin_w];
        let grad = self.needs(src.id);
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::Gather { src: src.id, taps }, grad)
    }

    fn unary(&self, a: usize, f: impl Fn(T) -> T, op: Op<T>) -> Var<'_, T> {
        let v = self.val(a).map(f);
        self.push(v, op, self.needs(a))
    }

    fn binary(&self, a: usize, b: usize, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'_, T> {
        let (x, y) = (self.val(a), self.val(b));
        let v = broadcast2(&x, &y, f);
        let grad = self.needs(a) || self.needs(b);
        self.push(v, op, grad)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            if !nodes[id].grad || matches!(nodes[id].op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let send = |target: usize, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !nodes[target].grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, nodes[*a].value.shape()), &mut grads);
                    send(*b, reduce_to(&g, nodes[*b].value.shape()), &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, nodes[*a].value.shape()), &mut grads);
                    let neg = g.map(|v| -v);
                    send(*b, reduce_to(&neg, nodes[*b].value.shape()), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].grad {
                        let ga = broadcast2(&g, y, |g, y| g * y);
                        send(*a, reduce_to(&ga, x.shape()), &mut grads);
                    }
                    if nodes[*b].grad {
                        let gb = broadcast2(&g, x, |g, x| g * x);
                        send(*b, reduce_to(&gb, y.shape()), &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let (x, y) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].grad {
                        let ga = broadcast2(&g, y, |g, y| g / y);
                        send(*a, reduce_to(&ga, x.shape()), &mut grads);
                    }
                    if nodes[*b].grad {
                        // d(x/y)/dy = -out / y
                        let q = broadcast2(out, y, |o, y| -o / y);
                        let gb = broadcast2(&g, &q, |g, q| g * q);
                        send(*b, reduce_to(&gb, y.shape()), &mut grads);
                    }
                }
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::MulScalar(a, s) => {
                    let s = *s;
                    send(*a, g.map(|v| v * s), &mut grads)
                }
                Op::Exp(a) => send(*a, zip(&g, out, |g, o| g * o), &mut grads),
                Op::Ln(a) => send(*a, zip(&g, &nodes[*a].value, |g, x| g / x), &mut grads),
                Op::Sqrt(a) => {
                    let half = T::lit(0.5);
                    send(*a, zip(&g, out, |g, o| g * half / o), &mut grads)
                }
                Op::Relu(a) => send(
                    *a,
                    zip(&g, &nodes[*a].value, |g, x| if x > T::zero() { g } else { T::zero() }),
                    &mut grads,
                ),
                Op::Sigmoid(a) => {
                    send(*a, zip(&g, out, |g, o| g * o * (T::one() - o)), &mut grads)
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    send(
                        *a,
                        zip(&g, &nodes[*a].value, |g, x| g * p * x.powf(p - T::one())),
                        &mut grads,
                    )
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send(
                        *a,
                        zip(&g, &nodes[*a].value, |g, x| {
                            if x >= lo && x <= hi {
                                g
                            } else {
                                T::zero()
                            }
                        }),
                        &mut grads,
                    )
                }
                Op::Minimum(a, b) | Op::Maximum(a, b) => {
                    let is_min = matches!(node.op, Op::Minimum(..));
                    let (x, y) = (&nodes[*a].value, &nodes[*b].value);
                    // ties route the gradient to the left operand
                    let pick_a = |x: T, y: T| if is_min { x <= y } else { x >= y };
                    let ga = zip3(&g, x, y, |g, x, y| if pick_a(x, y) { g } else { T::zero() });
                    let gb = zip3(&g, x, y, |g, x, y| if pick_a(x, y) { T::zero() } else { g });
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    send(*a, Tensor::full(nodes[*a].value.shape(), s), &mut grads)
                }
                Op::SumLast(a) => {
                    let src = &nodes[*a].value;
                    let d = *src.shape().last().unwrap();
                    let data = src
                        .data()
                        .chunks(d)
                        .zip(g.data())
                        .flat_map(|(row, &gv)| std::iter::repeat_n(gv, row.len()))
                        .collect();
                    send(*a, Tensor::from_vec(src.shape(), data).unwrap(), &mut grads)
                }
                Op::Reshape(a) => {
                    send(*a, g.reshape(nodes[*a].value.shape()).unwrap(), &mut grads)
                }
                Op::Narrow { src, axis, start } => {
                    let s = nodes[*src].value.shape();
                    let (outer, inner) = outer_inner(s, *axis);
                    let len = out.shape()[*axis];
                    let mut full = Tensor::zeros(s);
                    for o in 0..outer {
                        let dst = (o * s[*axis] + start) * inner;
                        full.data_mut()[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    send(*src, full, &mut grads)
                }
                Op::Concat { srcs, axis } => {
                    let (outer, inner) = outer_inner(out.shape(), *axis);
                    let total = out.shape()[*axis];
                    let mut offset = 0;
                    for &s in srcs {
                        let shape = nodes[s].value.shape().to_vec();
                        let len = shape[*axis];
                        if nodes[s].grad {
                            let mut part = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let from = (o * total + offset) * inner;
                                part.extend_from_slice(&g.data()[from..from + len * inner]);
                            }
                            send(s, Tensor::from_vec(&shape, part).unwrap(), &mut grads);
                        }
                        offset += len;
                    }
                }
                Op::IndexSelect { src, idx } => {
                    let s = nodes[*src].value.shape();
                    let row: usize = s[1..].iter().product();
                    let mut full = Tensor::zeros(s);
                    for (i, &r) in idx.iter().enumerate() {
                        let dst = &mut full.data_mut()[r * row..(r + 1) * row];
                        for (d, v) in dst.iter_mut().zip(&g.data()[i * row..(i + 1) * row]) {
                            *d += *v;
                        }
                    }
                    send(*src, full, &mut grads)
                }
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    let x = &nodes[*input].value;
                    let w = &nodes[*weight].value;
                    let (gx, gw, gb) = conv2d_backward(
                        x,
                        w,
                        &g,
                        *stride,
                        *pad,
                        nodes[*input].grad,
                        nodes[*weight].grad,
                        bias.map(|b| nodes[b].grad).unwrap_or(false),
                    );
                    if let Some(gx) = gx {
                        send(*input, gx, &mut grads);
                    }
                    if let Some(gw) = gw {
                        send(*weight, gw, &mut grads);
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::DwXcorr { kernel, search } => {
                    let (gk, gs) = dw_xcorr_backward(
                        &nodes[*kernel].value,
                        &nodes[*search].value,
                        &g,
                        nodes[*kernel].grad,
                        nodes[*search].grad,
                    );
                    if let Some(gk) = gk {
                        send(*kernel, gk, &mut grads);
                    }
                    if let Some(gs) = gs {
                        send(*search, gs, &mut grads);
                    }
                }
                Op::Gather { src, taps } => {
                    let x = &nodes[*src].value;
                    let (_, c, h, w) = x.dims4();
                    let bins = taps.bin_h * taps.bin_w;
                    let mut gx = Tensor::zeros(x.shape());
                    for r in 0..taps.rois {
                        for k in 0..bins {
                            let (b, range) = &taps.bins[r * bins + k];
                            for ch in 0..c {
                                let gv = g.data()[(r * c + ch) * bins + k];
                                let base = (b * c + ch) * h * w;
                                for &(idx, wt) in &taps.taps[range.clone()] {
                                    gx.data_mut()[base + idx] += wt * gv;
                                }
                            }
                        }
                    }
                    send(*src, gx, &mut grads)
                }
            }
        }
        drop(nodes);
        Grads { by_node: grads, params: self.params.borrow().clone() }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

fn zip3<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

/// Elementwise op with equal shapes or a single-element operand on either side.
fn broadcast2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        zip(a, b, f)
    } else if b.numel() == 1 {
        let y = b.data()[0];
        a.map(|x| f(x, y))
    } else if a.numel() == 1 {
        let x = a.data()[0];
        b.map(|y| f(x, y))
    } else {
        panic!("incompatible shapes {:?} and {:?}", a.shape(), b.shape());
    }
}

/// Sums a broadcast gradient back to an operand's shape.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g.clone()
    } else {
        let s: T = g.data().iter().copied().sum();
        Tensor::full(shape, s)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "conv kernel {k} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let hw = ho * wo;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, ci, k, k2) = w.dims4();
    assert_eq!(c, ci, "conv2d: input has {c} channels, weight expects {ci}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let kk = ci * k * k;
    let hw = ho * wo;
    let mut out = vec![T::zero(); n * co * hw];
    let mut cols = if is_pointwise(k, stride, pad) { Vec::new() } else { vec![T::zero(); kk * hw] };
    for i in 0..n {
        let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        let src: &[T] = if is_pointwise(k, stride, pad) {
            xi
        } else {
            im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        let oi = &mut out[i * co * hw..(i + 1) * co * hw];
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                oi[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(co, kk, hw, T::one(), w.data(), kk as isize, 1, src, hw as isize, 1, beta, oi, hw as isize, 1);
    }
    Tensor::from_vec(&[n, co, ho, wo], out).unwrap()
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (co, ci, k, _) = w.dims4();
    let (_, _, ho, wo) = g.dims4();
    let kk = ci * k * k;
    let hw = ho * wo;
    let pointwise = is_pointwise(k, stride, pad);
    let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = want_w.then(|| Tensor::zeros(w.shape()));
    let mut gb = want_b.then(|| Tensor::zeros(&[co]));
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * hw }];
    let mut gcols = vec![T::zero(); if want_x { kk * hw } else { 0 }];
    for i in 0..n {
        let gi = &g.data()[i * co * hw..(i + 1) * co * hw];
        let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        if let Some(gb) = gb.as_mut() {
            for (o, acc) in gb.data_mut().iter_mut().enumerate() {
                *acc += gi[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let src: &[T] = if pointwise {
                xi
            } else {
                im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            // gw (co x kk) += g (co x hw) * cols^T (hw x kk)
            T::gemm(co, hw, kk, T::one(), gi, hw as isize, 1, src, 1, hw as isize, T::one(), gw.data_mut(), kk as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            let gxi = &mut gx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd];
            if pointwise {
                // gx (kk x hw) = w^T (kk x co) * g (co x hw)
                T::gemm(kk, co, hw, T::one(), w.data(), 1, kk as isize, gi, hw as isize, 1, T::zero(), gxi, hw as isize, 1);
            } else {
                T::gemm(kk, co, hw, T::one(), w.data(), 1, kk as isize, gi, hw as isize, 1, T::zero(), &mut gcols, hw as isize, 1);
                col2im(&gcols, c, h, wd, k, stride, pad, ho, wo, gxi);
            }
        }
    }
    (gx, gw, gb)
}

fn dw_xcorr_forward<T: Scalar>(kernel: &Tensor<T>, search: &Tensor<T>) -> Tensor<T> {
    let (n, c, kh, kw) = kernel.dims4();
    let (n2, c2, h, w) = search.dims4();
    assert_eq!((n, c), (n2, c2), "dw_xcorr: kernel {:?} vs search {:?}", kernel.shape(), search.shape());
    assert!(kh <= h && kw <= w, "dw_xcorr: kernel {kh}x{kw} larger than map {h}x{w}");
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let kp = &kernel.data()[p * kh * kw..(p + 1) * kh * kw];
        let sp = &search.data()[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for u in 0..kh {
            for v in 0..kw {
                let kv = kp[u * kw + v];
                for i in 0..ho {
                    let srow = &sp[(i + u) * w + v..(i + u) * w + v + wo];
                    for (o, &s) in op[i * wo..(i + 1) * wo].iter_mut().zip(srow) {
                        *o += kv * s;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out).unwrap()
}

fn dw_xcorr_backward<T: Scalar>(
    kernel: &Tensor<T>,
    search: &Tensor<T>,
    g: &Tensor<T>,
    want_k: bool,
    want_s: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, kh, kw) = kernel.dims4();
    let (_, _, h, w) = search.dims4();
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut gk = want_k.then(|| Tensor::zeros(kernel.shape()));
    let mut gs = want_s.then(|| Tensor::zeros(search.shape()));
    for p in 0..n * c {
        let gp = &g.data()[p * ho * wo..(p + 1) * ho * wo];
        let sp = &search.data()[p * h * w..(p + 1) * h * w];
        let kp = &kernel.data()[p * kh * kw..(p + 1) * kh * kw];
        for u in 0..kh {
            for v in 0..kw {
                if let Some(gk) = gk.as_mut() {
                    let mut acc = T::zero();
                    for i in 0..ho {
                        let srow = &sp[(i + u) * w + v..(i + u) * w + v + wo];
                        for (&gv, &s) in gp[i * wo..(i + 1) * wo].iter().zip(srow) {
                            acc += gv * s;
                        }
                    }
                    gk.data_mut()[p * kh * kw + u * kw + v] = acc;
                }
                if let Some(gs) = gs.as_mut() {
                    let kv = kp[u * kw + v];
                    let gsp = &mut gs.data_mut()[p * h * w..(p + 1) * h * w];
                    for i in 0..ho {
                        let row = &mut gsp[(i + u) * w + v..(i + u) * w + v + wo];
                        for (d, &gv) in row.iter_mut().zip(&gp[i * wo..(i + 1) * wo]) {
                            *d += kv * gv;
                        }
                    }
                }
            }
        }
    }
    (gk, gs)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    /// Same value, cut off from the gradient.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.push_arc(self.value(), Op::Leaf, false)
    }

    pub fn add_scalar(self, s: T) -> Self {
        self.graph.unary(self.id, |x| x + s, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, s: T) -> Self {
        self.graph.unary(self.id, |x| x * s, Op::MulScalar(self.id, s))
    }

    pub fn exp(self) -> Self {
        self.graph.unary(self.id, |x| x.exp(), Op::Exp(self.id))
    }

    pub fn ln(self) -> Self {
        self.graph.unary(self.id, |x| x.ln(), Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Self {
        self.graph.unary(self.id, |x| x.sqrt(), Op::Sqrt(self.id))
    }

    pub fn relu(self) -> Self {
        self.graph.unary(self.id, |x| x.max(T::zero()), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Self {
        self.graph.unary(self.id, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn powf(self, p: T) -> Self {
        self.graph.unary(self.id, |x| x.powf(p), Op::Powf(self.id, p))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn clamp(self, lo: T, hi: T) -> Self {
        self.graph.unary(self.id, |x| x.max(lo).min(hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn minimum(self, other: Self) -> Self {
        self.graph.binary(self.id, other.id, |a, b| a.min(b), Op::Minimum(self.id, other.id))
    }

    pub fn maximum(self, other: Self) -> Self {
        self.graph.binary(self.id, other.id, |a, b| a.max(b), Op::Maximum(self.id, other.id))
    }

    pub fn sum(self) -> Self {
        let s: T = self.value().data().iter().copied().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Self {
        let n = self.value().numel();
        self.sum().mul_scalar(T::one() / T::lit(n as f64))
    }

    /// Sums over the last axis.
    pub fn sum_last(self) -> Self {
        let v = self.value();
        let shape = v.shape();
        let d = *shape.last().expect("sum_last of rank-0");
        let data: Vec<T> = v.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.graph.push(
            Tensor::from_vec(&out_shape, data).unwrap(),
            Op::SumLast(self.id),
            self.requires_grad(),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = (*self.value()).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.graph.push(v, Op::Reshape(self.id), self.requires_grad())
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let v = self.value();
        let s = v.shape();
        assert!(start + len <= s[axis], "narrow {start}+{len} beyond axis {axis} of {s:?}");
        let (outer, inner) = outer_inner(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * s[axis] + start) * inner;
            data.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.graph.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::Narrow { src: self.id, axis, start },
            self.requires_grad(),
        )
    }

    /// Centre crop of the two spatial axes of an NCHW tensor.
    pub fn center_crop(self, size: usize) -> Self {
        let s = self.shape();
        let (h, w) = (s[2], s[3]);
        if h <= size && w <= size {
            return self;
        }
        let (y0, x0) = ((h - size.min(h)) / 2, (w - size.min(w)) / 2);
        self.narrow(2, y0, size.min(h)).narrow(3, x0, size.min(w))
    }

    /// Rows `idx` of the leading axis (repeats allowed).
    pub fn index_select(self, idx: &[usize]) -> Self {
        let v = self.value();
        let s = v.shape();
        let row: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &r in idx {
            assert!(r < s[0], "index {r} out of {}", s[0]);
            data.extend_from_slice(&v.data()[r * row..(r + 1) * row]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        self.graph.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::IndexSelect { src: self.id, idx: idx.to_vec() },
            self.requires_grad(),
        )
    }

    /// 2-D convolution (cross-correlation) of an NCHW input with an
    /// `[out, in, k, k]` weight.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, stride: usize, pad: usize) -> Self {
        let out = conv2d_forward(
            &self.value(),
            &weight.value(),
            bias.map(|b| b.value()).as_deref(),
            stride,
            pad,
        );
        let grad = self.requires_grad()
            || weight.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        self.graph.push(
            out,
            Op::Conv2d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), stride, pad },
            grad,
        )
    }

    /// Depthwise valid cross-correlation: `self` is the per-sample,
    /// per-channel kernel, `search` the map it slides over.
    pub fn dw_xcorr(self, search: Self) -> Self {
        let out = dw_xcorr_forward(&self.value(), &search.value());
        let grad = self.requires_grad() || search.requires_grad();
        self.graph.push(out, Op::DwXcorr { kernel: self.id, search: search.id }, grad)
    }
}

macro_rules! impl_binop {
    ($tr:ident, $m:ident, $variant:ident, $f:expr) => {
        impl<'g, T: Scalar> $tr for Var<'g, T> {
            type Output = Var<'g, T>;
            fn $m(self, rhs: Self) -> Self::Output {
                self.graph.binary(self.id, rhs.id, $f, Op::$variant(self.id, rhs.id))
            }
        }
    };
}

impl_binop!(Add, add, Add, |a, b| a + b);
impl_binop!(Sub, sub, Sub, |a, b| a - b);
impl_binop!(Mul, mul, Mul, |a, b| a * b);
impl_binop!(Div, div, Div, |a, b| a / b);

impl<'g, T: Scalar> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        self.mul_scalar(-T::one())
    }
}

#[cfg(test)]
pub(crate) mod check {
    //! Central finite-difference oracle for graph functions.
    use super::*;

    /// Compares analytic gradients of `f` at `inputs` against central
    /// differences with step `h`; returns the worst relative error.
    pub fn max_rel_error(
        inputs: &[Tensor<f64>],
        h: f64,
        f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    ) -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.numel() {
                let eval = |delta: f64| {
                    let g2 = Graph::new();
                    let vs: Vec<_> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == k {
                                u.data_mut()[i] += delta;
                            }
                            g2.leaf(u)
                        })
                        .collect();
                    f(&g2, &vs).value().item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max((a - fd).abs() / denom);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::check::max_rel_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]).map(|v| v.abs() + 0.5);
        let err = max_rel_error(&[a, b], 1e-5, |g, v| {
            let s = g.scalar(0.3);
            let x = (v[0] * v[1] + v[0].exp() - v[1].ln() + v[0] / v[1]).sigmoid();
            (x * s + v[1].sqrt() + v[1].powf(1.7) + v[0].minimum(v[1]) + v[0].maximum(v[1])).sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[4]);
        let w = rand_tensor(&mut rng, &[1]);
        let err = max_rel_error(&[a, w], 1e-5, |_, v| (v[0] * v[1] + v[1] / v[0].add_scalar(3.0)).sum());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let b = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let err = max_rel_error(&[a, b], 1e-5, |g, v| {
            let c = g.concat(&[v[0], v[1]], 1);
            let n = c.narrow(1, 1, 3).center_crop(2);
            let r = n.reshape(&[2, 12]).index_select(&[1, 0, 1]);
            (r.sum_last().square()).sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_gradients_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 0), (1, 1, 0), (2, 1, 0)] {
            let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let b = rand_tensor(&mut rng, &[4]);
            let err = max_rel_error(&[x.clone(), w.clone(), b.clone()], 1e-5, |_, v| {
                v[0].conv2d(v[1], Some(v[2]), stride, pad).square().sum()
            });
            assert!(err < 1e-6, "k={k} s={stride} p={pad}: {err}");

            // direct loop oracle
            let out = conv2d_forward(&x, &w, Some(&b), stride, pad);
            let (_, _, ho, wo) = out.dims4();
            for n in 0..2 {
                for o in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b.data()[o];
                            for c in 0..3 {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                            acc += w.at4(o, c, ky, kx) * x.at4(n, c, iy as usize, ix as usize);
                                        }
                                    }
                                }
                            }
                            assert!((acc - out.at4(n, o, oy, ox)).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dw_xcorr_examples_and_gradients() {
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let x = Tensor::full(&[1, 1, 4, 4], 3.0);
        assert!(dw_xcorr_forward(&k, &x).data().iter().all(|&v| v == 6.0));

        let mut delta = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0; // centre tap: output(i,j) = x(i+1, j+1)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 1, 6, 6]);
        let out = dw_xcorr_forward(&delta, &x);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(out.at4(0, 0, i, j), x.at4(0, 0, i + 1, j + 1));
            }
        }

        let z = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let s = rand_tensor(&mut rng, &[2, 3, 6, 5]);
        let err = max_rel_error(&[z, s], 1e-5, |_, v| v[0].dw_xcorr(v[1]).square().sum());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let taps = Arc::new(SpatialTaps {
            rois: 2,
            bin_h: 1,
            bin_w: 2,
            bins: vec![(0, 0..2), (0, 2..3), (1, 3..5), (1, 5..6)],
            taps: vec![(0, 0.5), (4, 0.5), (8, 1.0), (1, 0.25), (2, 0.75), (7, 1.0)],
        });
        let err = max_rel_error(&[x], 1e-5, |g, v| g.gather(v[0], taps.clone()).square().sum());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shared_param_accumulates_once() {
        let g = Graph::<f64>::new();
        let w = Arc::new(Tensor::scalar(2.0));
        let a = g.param(0, &w, true);
        let b = g.param(0, &w, true);
        let x = g.constant(Tensor::scalar(3.0));
        let y = a * x + b * x;
        let grads = g.backward(y);
        assert_eq!(grads.param(0).unwrap().item(), 6.0);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let g = Graph::<f64>::new();
        let w = Arc::new(Tensor::scalar(2.0));
        let a = g.param(0, &w, false);
        let b = g.leaf(Tensor::scalar(1.0));
        let grads = g.backward((a * b).sum());
        assert!(grads.param(0).is_none());
        assert_eq!(grads.wrt(b).unwrap().item(), 2.0);
    }
}
