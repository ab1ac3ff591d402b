//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of
//! a scalar with respect to every node that depends on a parameter or on a
//! leaf created with `requires_grad`.

use std::cell::{Ref, RefCell};

use crate::kernels::{conv2d_backward, conv2d_forward, ConvGeom, Resample2d};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind<T> {
    Affine(T, T),
    Sigmoid,
    Relu,
    Relu6,
    HardSwish,
    LeakyRelu(T),
    Abs,
    Square,
    Sqrt,
    Clamp01,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Binary { a: usize, b: usize, kind: BinKind },
    Unary { a: usize, kind: UnaryKind<T> },
    SumAll { a: usize },
    SumAxis { a: usize },
    Concat { parts: Vec<usize> },
    Narrow { a: usize, start: usize },
    Resample { a: usize, map: Resample2d },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'p, T: Float> {
    params: Option<&'p ParamStore<T>>,
    param_nodes: RefCell<Vec<Option<usize>>>,
    nodes: RefCell<Vec<Node<T>>>,
    track_params: bool,
}

fn broadcast_shape(a: Shape, b: Shape) -> Shape {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

fn strides_for(s: Shape, out: Shape) -> [usize; 4] {
    let full = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut st = [0; 4];
    for d in 0..4 {
        st[d] = if s[d] == 1 && out[d] != 1 { 0 } else { full[d] };
    }
    st
}

/// Visits `(out_index, a_index, b_index)` in row-major output order.
fn for_each_bcast(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            let (a_nc, b_nc) = (n * sa[0] + c * sa[1], n * sb[0] + c * sb[1]);
            for h in 0..out[2] {
                let (a_h, b_h) = (a_nc + h * sa[2], b_nc + h * sb[2]);
                for w in 0..out[3] {
                    f(o, a_h + w * sa[3], b_h + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

fn binary_forward<T: Float>(a: &Tensor<T>, b: &Tensor<T>, kind: BinKind) -> Tensor<T> {
    let f = |x: T, y: T| match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    };
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let mut out = Tensor::zeros(out_shape);
    let (sa, sb) = (strides_for(a.shape(), out_shape), strides_for(b.shape(), out_shape));
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_bcast(out_shape, sa, sb, |o, i, j| od[o] = f(ad[i], bd[j]));
    out
}

fn unary_forward<T: Float>(x: T, kind: UnaryKind<T>) -> T {
    let six = T::lit(6.0);
    let three = T::lit(3.0);
    match kind {
        UnaryKind::Affine(m, c) => m * x + c,
        UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Relu6 => x.max(T::zero()).min(six),
        UnaryKind::HardSwish => x * (x + three).max(T::zero()).min(six) / six,
        UnaryKind::LeakyRelu(s) => {
            if x > T::zero() {
                x
            } else {
                s * x
            }
        }
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Clamp01 => x.max(T::zero()).min(T::one()),
    }
}

/// Local derivative given input `x` and output `y`.
fn unary_derivative<T: Float>(x: T, y: T, kind: UnaryKind<T>) -> T {
    let zero = T::zero();
    let one = T::one();
    let three = T::lit(3.0);
    match kind {
        UnaryKind::Affine(m, _) => m,
        UnaryKind::Sigmoid => y * (one - y),
        UnaryKind::Relu => {
            if x > zero {
                one
            } else {
                zero
            }
        }
        UnaryKind::Relu6 => {
            if x > zero && x < T::lit(6.0) {
                one
            } else {
                zero
            }
        }
        UnaryKind::HardSwish => {
            if x <= -three {
                zero
            } else if x >= three {
                one
            } else {
                (T::lit(2.0) * x + three) / T::lit(6.0)
            }
        }
        UnaryKind::LeakyRelu(s) => {
            if x > zero {
                one
            } else {
                s
            }
        }
        UnaryKind::Abs => {
            if x > zero {
                one
            } else if x < zero {
                -one
            } else {
                zero
            }
        }
        UnaryKind::Square => T::lit(2.0) * x,
        UnaryKind::Sqrt => T::lit(0.5) / y,
        UnaryKind::Clamp01 => {
            if x >= zero && x <= one {
                one
            } else {
                zero
            }
        }
    }
}

fn sum_axis<T: Float>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let mut shape = x.shape();
    shape[axis] = 1;
    let mut out = Tensor::zeros(shape);
    let (sx, so) = (strides_for(x.shape(), x.shape()), strides_for(shape, x.shape()));
    let xd = x.data();
    let od = out.data_mut();
    for_each_bcast(x.shape(), sx, so, |_, i, j| od[j] += xd[i]);
    out
}

/// Sums `g` (shaped like the broadcast output) down to `target`.
fn reduce_to<T: Float>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target);
    let (sg, st) = (strides_for(g.shape(), g.shape()), strides_for(target, g.shape()));
    let gd = g.data();
    let od = out.data_mut();
    for_each_bcast(g.shape(), sg, st, |_, i, j| od[j] += gd[i]);
    out
}

/// Broadcasts `small` against `big`'s shape.
fn expand_to<T: Float>(small: &Tensor<T>, shape: Shape) -> Tensor<T> {
    if small.shape() == shape {
        return small.clone();
    }
    let mut out = Tensor::zeros(shape);
    let ss = strides_for(small.shape(), shape);
    let sd = small.data();
    let od = out.data_mut();
    for_each_bcast(shape, ss, ss, |o, i, _| od[o] = sd[i]);
    out
}

impl<'p, T: Float> Tape<'p, T> {
    /// Tape whose parameter leaves require gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_params(Some(params), true)
    }

    /// Tape whose parameter leaves are constants; for inference.
    pub fn frozen(params: &'p ParamStore<T>) -> Self {
        Self::with_params(Some(params), false)
    }

    /// Tape without any parameter store.
    pub fn detached() -> Self {
        Self::with_params(None, false)
    }

    fn with_params(params: Option<&'p ParamStore<T>>, track_params: bool) -> Self {
        let n = params.map_or(0, ParamStore::len);
        Tape {
            params,
            param_nodes: RefCell::new(vec![None; n]),
            nodes: RefCell::new(Vec::new()),
            track_params,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes.borrow()[v].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Copies out a node's value.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        self.value(v).clone()
    }

    /// Linear piece index of every input element of every piecewise op,
    /// in tape order. Two evaluations with equal patterns lie on the same
    /// smooth branch.
    pub fn piece_pattern(&self) -> Vec<u8> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            let Op::Unary { a, kind } = &node.op else { continue };
            let piece: fn(f64) -> u8 = match kind {
                UnaryKind::Relu | UnaryKind::LeakyRelu(_) => |x| (x > 0.0) as u8,
                UnaryKind::Abs => |x| (x >= 0.0) as u8,
                UnaryKind::Relu6 => |x| (x > 0.0) as u8 + (x >= 6.0) as u8,
                UnaryKind::HardSwish => |x| (x > -3.0) as u8 + (x >= 3.0) as u8,
                UnaryKind::Clamp01 => |x| (x > 0.0) as u8 + (x >= 1.0) as u8,
                _ => continue,
            };
            out.extend(nodes[*a].value.data().iter().map(|v| piece(v.as_f64())));
        }
        out
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls with the same id share one node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(idx) = self.param_nodes.borrow()[id.0] {
            return Var(idx);
        }
        let params = self.params.expect("tape has no parameter store");
        let v = self.push(params.get(id).clone(), Op::Leaf, self.track_params);
        self.param_nodes.borrow_mut()[id.0] = Some(v.0);
        v
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            conv2d_forward(&nodes[x.0].value, &nodes[w.0].value, b.map(|b| &nodes[b.0].value), &geom)
        };
        let rg = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|b| self.needs(b.0));
        self.push(out, Op::Conv { x: x.0, w: w.0, b: b.map(|b| b.0), geom }, rg)
    }

    fn binary(&self, a: Var, b: Var, kind: BinKind) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            binary_forward(&nodes[a.0].value, &nodes[b.0].value, kind)
        };
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Binary { a: a.0, b: b.0, kind }, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Div)
    }

    fn unary(&self, a: Var, kind: UnaryKind<T>) -> Var {
        let out = self.value(a).map(|x| unary_forward(x, kind));
        let rg = self.needs(a.0);
        self.push(out, Op::Unary { a: a.0, kind }, rg)
    }

    /// `scale * a + shift`.
    pub fn affine(&self, a: Var, scale: T, shift: T) -> Var {
        self.unary(a, UnaryKind::Affine(scale, shift))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        self.affine(a, T::one(), s)
    }

    /// `1 - a`.
    pub fn one_minus(&self, a: Var) -> Var {
        self.affine(a, -T::one(), T::one())
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn relu6(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Relu6)
    }

    pub fn hardswish(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::HardSwish)
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        self.unary(a, UnaryKind::LeakyRelu(slope))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Abs)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Square)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sqrt)
    }

    /// Clamp to `[0, 1]`; zero gradient outside the range.
    pub fn clamp01(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Clamp01)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a.0);
        self.push(out, Op::SumAll { a: a.0 }, rg)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Sum over one axis, keeping it with size one.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        assert!(axis < 4);
        let out = sum_axis(&self.value(a), axis);
        let rg = self.needs(a.0);
        self.push(out, Op::SumAxis { a: a.0 }, rg)
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis];
        let s = self.sum_axis(a, axis);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Concatenation along the channel axis.
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape();
            let c_total: usize = parts.iter().map(|p| nodes[p.0].value.shape()[1]).sum();
            let [n, _, h, w] = first;
            let mut out = Tensor::zeros([n, c_total, h, w]);
            let hw = h * w;
            for ni in 0..n {
                let mut c_off = 0;
                for p in parts {
                    let v = &nodes[p.0].value;
                    let [pn, pc, ph, pw] = v.shape();
                    assert_eq!((pn, ph, pw), (n, h, w), "concat shape mismatch");
                    let src = &v.data()[ni * pc * hw..(ni + 1) * pc * hw];
                    let dst_start = (ni * c_total + c_off) * hw;
                    out.data_mut()[dst_start..dst_start + pc * hw].copy_from_slice(src);
                    c_off += pc;
                }
            }
            out
        };
        let rg = parts.iter().any(|p| self.needs(p.0));
        self.push(out, Op::Concat { parts: parts.iter().map(|p| p.0).collect() }, rg)
    }

    /// Channels `start..start + len`.
    pub fn narrow(&self, a: Var, start: usize, len: usize) -> Var {
        let out = {
            let v = self.value(a);
            let [n, c, h, w] = v.shape();
            assert!(start + len <= c, "narrow out of range");
            let hw = h * w;
            let mut data = Vec::with_capacity(n * len * hw);
            for ni in 0..n {
                data.extend_from_slice(&v.data()[(ni * c + start) * hw..(ni * c + start + len) * hw]);
            }
            Tensor::from_vec([n, len, h, w], data)
        };
        let rg = self.needs(a.0);
        self.push(out, Op::Narrow { a: a.0, start }, rg)
    }

    pub fn resample(&self, a: Var, map: &Resample2d) -> Var {
        let out = map.apply(&self.value(a));
        let rg = self.needs(a.0);
        self.push(out, Op::Resample { a: a.0, map: map.clone() }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        fn accum<T: Float>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, geom } => {
                    let need_dx = nodes[*x].requires_grad;
                    let need_b = b.is_some_and(|b| nodes[b].requires_grad);
                    let (dx, dw, db) =
                        conv2d_backward(&nodes[*x].value, &nodes[*w].value, &g, geom, need_dx, need_b);
                    if let Some(dx) = dx {
                        accum(&mut grads, *x, dx);
                    }
                    if nodes[*w].requires_grad {
                        accum(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        accum(&mut grads, *b, db);
                    }
                }
                Op::Binary { a, b, kind } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let out_shape = g.shape();
                    let (ga, gb) = match kind {
                        BinKind::Add => (Some(g.clone()), Some(g.clone())),
                        BinKind::Sub => (Some(g.clone()), Some(g.map(|v| -v))),
                        BinKind::Mul => {
                            let ga = nodes[*a].requires_grad.then(|| g.zip_map(&expand_to(bv, out_shape), |g, b| g * b));
                            let gb = nodes[*b].requires_grad.then(|| g.zip_map(&expand_to(av, out_shape), |g, a| g * a));
                            (ga, gb)
                        }
                        BinKind::Div => {
                            let bx = expand_to(bv, out_shape);
                            let ga = nodes[*a].requires_grad.then(|| g.zip_map(&bx, |g, b| g / b));
                            let gb = nodes[*b].requires_grad.then(|| {
                                let ax = expand_to(av, out_shape);
                                let t = g.zip_map(&ax, |g, a| g * a);
                                t.zip_map(&bx, |t, b| -t / (b * b))
                            });
                            (ga, gb)
                        }
                    };
                    if let Some(ga) = ga.filter(|_| nodes[*a].requires_grad) {
                        accum(&mut grads, *a, reduce_to(&ga, av.shape()));
                    }
                    if let Some(gb) = gb.filter(|_| nodes[*b].requires_grad) {
                        accum(&mut grads, *b, reduce_to(&gb, bv.shape()));
                    }
                }
                Op::Unary { a, kind } => {
                    let x = &nodes[*a].value;
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&g, (&x, &y))| g * unary_derivative(x, y, *kind))
                        .collect();
                    accum(&mut grads, *a, Tensor::from_vec(x.shape(), data));
                }
                Op::SumAll { a } => {
                    let shape = nodes[*a].value.shape();
                    accum(&mut grads, *a, Tensor::full(shape, g.data()[0]));
                }
                Op::SumAxis { a } => {
                    let shape = nodes[*a].value.shape();
                    accum(&mut grads, *a, expand_to(&g, shape));
                }
                Op::Concat { parts } => {
                    let [n, c_total, h, w] = g.shape();
                    let hw = h * w;
                    let mut c_off = 0;
                    for &p in parts {
                        let pc = nodes[p].value.shape()[1];
                        if nodes[p].requires_grad {
                            let mut data = Vec::with_capacity(n * pc * hw);
                            for ni in 0..n {
                                let s = (ni * c_total + c_off) * hw;
                                data.extend_from_slice(&g.data()[s..s + pc * hw]);
                            }
                            accum(&mut grads, p, Tensor::from_vec([n, pc, h, w], data));
                        }
                        c_off += pc;
                    }
                }
                Op::Narrow { a, start } => {
                    let shape = nodes[*a].value.shape();
                    let [n, c, h, w] = shape;
                    let len = g.shape()[1];
                    let hw = h * w;
                    let mut full = Tensor::zeros(shape);
                    for ni in 0..n {
                        let d = (ni * c + start) * hw;
                        full.data_mut()[d..d + len * hw]
                            .copy_from_slice(&g.data()[ni * len * hw..(ni + 1) * len * hw]);
                    }
                    accum(&mut grads, *a, full);
                }
                Op::Resample { a, map } => {
                    accum(&mut grads, *a, map.apply_transpose(&g));
                }
            }
        }
        Grads { grads, param_nodes: self.param_nodes.borrow().clone() }
    }
}

/// Result of [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: Vec<Option<usize>>,
}

impl<T: Float> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter; `None` when it was not used in the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_nodes.get(id.0).copied().flatten().and_then(|i| self.grads[i].as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec())
    }

    #[test]
    fn broadcast_mul_reduces_gradient_to_operand_shape() {
        let tape = Tape::<f64>::detached();
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let a = tape.leaf(t([1, 1, 2, 1], &[10.0, 20.0]));
        let y = tape.mul(x, a);
        assert_eq!(tape.value(y).data(), &[10.0, 20.0, 60.0, 80.0]);
        let s = tape.sum_all(y);
        let g = tape.backward(s);
        assert_eq!(g.wrt(a).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(g.wrt(x).unwrap().data(), &[10.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::detached();
        let x = tape.constant(t([1, 1, 1, 2], &[1.0, 2.0]));
        let y = tape.leaf(t([1, 1, 1, 2], &[3.0, 4.0]));
        let z = tape.mul(x, y);
        let s = tape.sum_all(z);
        let g = tape.backward(s);
        assert!(g.wrt(x).is_none());
        assert_eq!(g.wrt(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_and_narrow_route_gradients() {
        let tape = Tape::<f64>::detached();
        let a = tape.leaf(Tensor::full([2, 1, 1, 2], 1.0));
        let b = tape.leaf(Tensor::full([2, 2, 1, 2], 2.0));
        let c = tape.concat(&[a, b]);
        assert_eq!(tape.shape(c), [2, 3, 1, 2]);
        let back = tape.narrow(c, 1, 2);
        assert_eq!(*tape.value(back), *tape.value(b));
        let w = tape.constant(Tensor::from_fn([1, 2, 1, 2], |_, c, _, _| (c + 1) as f64));
        let s = tape.sum_all(tape.mul(back, w));
        let g = tape.backward(s);
        assert!(g.wrt(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn shared_node_accumulates_gradient() {
        let tape = Tape::<f64>::detached();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }
}
