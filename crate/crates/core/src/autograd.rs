//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes whose
//! inputs do not require gradients store no backward closure, so the same
//! model code serves inference (cheap) and training (taped).

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{numel, strides, Real, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    train_params: bool,
    // (store uid, param index) -> node id
    params: RefCell<HashMap<(u64, usize), usize>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    /// Graph whose parameter leaves are constants.
    pub fn inference() -> Self {
        Self::new(false)
    }

    /// Graph that tracks gradients for every parameter it loads.
    pub fn training() -> Self {
        Self::new(true)
    }

    fn new(train_params: bool) -> Self {
        Self { nodes: RefCell::new(Vec::new()), train_params, params: RefCell::new(HashMap::new()) }
    }

    pub fn tracks_params(&self) -> bool {
        self.train_params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), true)
    }

    /// Load a parameter. Repeated loads of the same parameter share one node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let key = (store.uid(), id.index());
        if let Some(&node) = self.params.borrow().get(&key) {
            return Var { graph: self, id: node };
        }
        let v = self.leaf(store.shared(id), self.train_params);
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: &[usize],
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let node = if requires_grad {
            Node {
                value: Arc::new(value),
                parents: parents.to_vec(),
                backward: Some(Box::new(backward)),
                requires_grad,
            }
        } else {
            Node { value: Arc::new(value), parents: Vec::new(), backward: None, requires_grad }
        };
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let v = self.value_of(root.id);
        if v.numel() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", v.shape())));
        }
        self.backward_with(root, Tensor::full(v.shape().to_vec(), T::one()))
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_with(&self, root: Var<'_, T>, seed: Tensor<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        seed.expect_same_shape(&nodes[root.id].value)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let parent_grads = backward(&g, &inputs, &node.value);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, params: self.params.borrow().clone() })
    }
}

/// Gradients of leaves after a reverse pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<(u64, usize), usize>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients for `store`, `None` where a parameter was unused.
    pub fn for_store(&mut self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let uid = store.uid();
        (0..store.len())
            .map(|i| self.params.get(&(uid, i)).and_then(|&node| self.grads[node].take()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("broadcast rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn bstrides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape.iter().zip(out).zip(s).map(|((&d, &o), s)| if d == 1 && o != 1 { 0 } else { s }).collect()
}

/// Visit every output offset together with the matching offsets in `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        let mut ax = nd;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = bstrides(a.shape(), &out);
    let sb = bstrides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::from_vec(out, data)
}

/// Sum `g` down to `shape` (the inverse of broadcasting).
fn reduce_to<T: Real>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g;
    }
    let out = g.shape().to_vec();
    let st = bstrides(shape, &out);
    let mut acc = vec![T::zero(); numel(shape)];
    let gd = g.data();
    for_each_broadcast(&out, &st, &st, |o, i, _| acc[i] += gd[o]);
    Tensor::from_vec(shape.to_vec(), acc).expect("reduced shape")
}

// ---------------------------------------------------------------------------
// Convolution kernels

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!("conv kernel {k} does not fit {h}x{w} (pad {pad})")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c, h, w, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ki as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kj as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s) as isize + kj as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// ---------------------------------------------------------------------------
// Operations

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| n[self.id].value.as_ref())
    }

    /// Owned copy of the current value.
    pub fn tensor(&self) -> Tensor<T> {
        self.graph.value_of(self.id).as_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn val(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    fn same_graph(&self, other: &Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(Error::Shape("operands belong to different graphs".into()));
        }
        Ok(())
    }

    fn binary(
        self,
        other: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let (a, b) = (self.val(), other.val());
        let out = broadcast_zip(&a, &b, f)?;
        Ok(self.graph.push(out, &[self.id, other.id], move |g, ins, _| {
            let (a, b) = (ins[0], ins[1]);
            let shape = g.shape().to_vec();
            let sa = bstrides(a.shape(), &shape);
            let sb = bstrides(b.shape(), &shape);
            let mut ga = vec![T::zero(); g.numel()];
            let mut gb = vec![T::zero(); g.numel()];
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| {
                ga[o] = da(ad[ia], bd[ib], gd[o]);
                gb[o] = db(ad[ia], bd[ib], gd[o]);
            });
            let ga = reduce_to(Tensor::from_vec(shape.clone(), ga).unwrap(), a.shape());
            let gb = reduce_to(Tensor::from_vec(shape, gb).unwrap(), b.shape());
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        if self.shape() == other.shape() {
            self.same_graph(&other)?;
            let out = self.val().add(&other.val())?;
            return Ok(self.graph.push(out, &[self.id, other.id], |g, _, _| {
                vec![Some(g.clone()), Some(g.clone())]
            }));
        }
        self.binary(other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        if self.shape() == other.shape() {
            self.same_graph(&other)?;
            let out = self.val().sub(&other.val())?;
            return Ok(self.graph.push(out, &[self.id, other.id], |g, _, _| {
                vec![Some(g.clone()), Some(g.map(|v| -v))]
            }));
        }
        self.binary(other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a / b, |_, b, g| g / b, |a, b, g| -g * a / (b * b))
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let out = self.val().scale(s);
        self.graph.push(out, &[self.id], move |g, _, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let out = self.val().map(|v| v + s);
        self.graph.push(out, &[self.id], |g, _, _| vec![Some(g.clone())])
    }

    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let out = self.val().map(f);
        self.graph.push(out, &[self.id], move |g, ins, y| {
            let d = ins[0]
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape().to_vec(), d).unwrap())]
        })
    }

    pub fn silu(self) -> Var<'g, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let shape = shape.into();
        let in_shape = self.shape();
        let out = self.val().as_ref().clone().reshape(shape)?;
        Ok(self.graph.push(out, &[self.id], move |g, _, _| {
            vec![Some(g.clone().reshape(in_shape.clone()).unwrap())]
        }))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let out = self.val().permute(perm)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.graph.push(out, &[self.id], move |g, _, _| vec![Some(g.permute(&inv).unwrap())]))
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Result<Var<'g, T>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let out = self.val().narrow(axis, start, len)?;
        let in_shape = self.shape();
        Ok(self.graph.push(out, &[self.id], move |g, _, _| {
            let mut parts: Vec<Tensor<T>> = Vec::new();
            if start > 0 {
                let mut s = in_shape.clone();
                s[axis] = start;
                parts.push(Tensor::zeros(s));
            }
            parts.push(g.clone());
            let rest = in_shape[axis] - start - len;
            if rest > 0 {
                let mut s = in_shape.clone();
                s[axis] = rest;
                parts.push(Tensor::zeros(s));
            }
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            vec![Some(Tensor::concat(&refs, axis).unwrap())]
        }))
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        for p in parts {
            first.same_graph(p)?;
        }
        let vals: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.val()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.graph.push(out, &ids, move |g, _, _| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let piece = g.narrow(axis, start, len).unwrap();
                    start += len;
                    Some(piece)
                })
                .collect()
        }))
    }

    pub fn sum(self) -> Var<'g, T> {
        let v = self.val();
        let out = Tensor::scalar(v.sum());
        let shape = v.shape().to_vec();
        self.graph.push(out, &[self.id], move |g, _, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))])
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let v = self.val();
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.push(out, &[self.id], move |g, _, _| {
            let gd = g.data();
            let mut back = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    back[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_vec(shape.clone(), back).unwrap())]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let n = self.shape()[axis];
        Ok(self.sum_axis(axis)?.scale(T::one() / T::lit(n as f64)))
    }

    /// Batched matrix product of `[b, m, k] x [b, k, n]` with optional
    /// transposition of either operand's last two axes.
    pub fn bmm(self, other: Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let (a, b) = (self.val(), other.val());
        if a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) {
            return Err(Error::Shape(format!("bmm operands {:?} x {:?}", a.shape(), b.shape())));
        }
        let batch = a.dim(0);
        let (m, k) = if ta { (a.dim(2), a.dim(1)) } else { (a.dim(1), a.dim(2)) };
        let (k2, n) = if tb { (b.dim(2), b.dim(1)) } else { (b.dim(1), b.dim(2)) };
        if k != k2 {
            return Err(Error::Shape(format!("bmm inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                ta,
                tb,
                m,
                n,
                k,
                T::one(),
                &a.data()[i * m * k..],
                &b.data()[i * k * n..],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::from_vec([batch, m, n], out)?;
        Ok(self.graph.push(out, &[self.id, other.id], move |g, ins, _| {
            let (a, b) = (ins[0], ins[1]);
            let mut ga = vec![T::zero(); a.numel()];
            let mut gb = vec![T::zero(); b.numel()];
            let gd = g.data();
            for i in 0..batch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let gai = &mut ga[i * m * k..(i + 1) * m * k];
                if ta {
                    T::gemm(tb, true, k, m, n, T::one(), bi, gi, T::zero(), gai);
                } else {
                    T::gemm(false, !tb, m, k, n, T::one(), gi, bi, T::zero(), gai);
                }
                let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                if tb {
                    T::gemm(true, ta, n, k, m, T::one(), gi, ai, T::zero(), gbi);
                } else {
                    T::gemm(!ta, false, k, n, m, T::one(), ai, gi, T::zero(), gbi);
                }
            }
            vec![
                Some(Tensor::from_vec(a.shape().to_vec(), ga).unwrap()),
                Some(Tensor::from_vec(b.shape().to_vec(), gb).unwrap()),
            ]
        }))
    }

    /// `x W^T + b` over the last axis; `weight` is `[out, in]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        self.same_graph(&weight)?;
        let (x, w) = (self.val(), weight.val());
        let shape = x.shape().to_vec();
        let fan_in = *shape.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        if w.ndim() != 2 || w.dim(1) != fan_in {
            return Err(Error::Shape(format!("linear weight {:?} for input {shape:?}", w.shape())));
        }
        let fan_out = w.dim(0);
        let rows = x.numel() / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        T::gemm(false, true, rows, fan_out, fan_in, T::one(), x.data(), w.data(), T::zero(), &mut out);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = fan_out;
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_graph(&b)?;
            let bv = b.val();
            if bv.shape() != [fan_out] {
                return Err(Error::Shape(format!("linear bias {:?}, want [{fan_out}]", bv.shape())));
            }
            for row in out.chunks_mut(fan_out) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        let out = Tensor::from_vec(out_shape, out)?;
        Ok(self.graph.push(out, &parents, move |g, ins, _| {
            let (x, w) = (ins[0], ins[1]);
            let mut gx = vec![T::zero(); x.numel()];
            T::gemm(false, false, rows, fan_in, fan_out, T::one(), g.data(), w.data(), T::zero(), &mut gx);
            let mut gw = vec![T::zero(); w.numel()];
            T::gemm(true, false, fan_out, fan_in, rows, T::one(), g.data(), x.data(), T::zero(), &mut gw);
            let mut grads = vec![
                Some(Tensor::from_vec(x.shape().to_vec(), gx).unwrap()),
                Some(Tensor::from_vec(w.shape().to_vec(), gw).unwrap()),
            ];
            if has_bias {
                let mut gb = vec![T::zero(); fan_out];
                for row in g.data().chunks(fan_out) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads.push(Some(Tensor::from_vec([fan_out], gb).unwrap()));
            }
            grads
        }))
    }

    /// 2-D convolution of an NCHW input with a `[out, in, k, k]` kernel.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&weight)?;
        let (x, w) = (self.val(), weight.val());
        if x.ndim() != 4 || w.ndim() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) {
            return Err(Error::Shape(format!("conv2d input {:?} kernel {:?}", x.shape(), w.shape())));
        }
        let (batch, cout) = (x.dim(0), w.dim(0));
        let geom = ConvGeom::new(x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad)?;
        let (rows, cols) = (geom.rows(), geom.cols());
        let in_plane = geom.c * geom.h * geom.w;
        let mut out = vec![T::zero(); batch * cout * cols];
        let mut scratch = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        for b in 0..batch {
            let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
            let colsb: &[T] = if geom.is_pointwise() {
                xb
            } else {
                im2col(xb, &geom, &mut scratch);
                &scratch
            };
            T::gemm(false, false, cout, cols, rows, T::one(), w.data(), colsb, T::zero(), &mut out[b * cout * cols..(b + 1) * cout * cols]);
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(bv) = bias {
            self.same_graph(&bv)?;
            let bt = bv.val();
            if bt.shape() != [cout] {
                return Err(Error::Shape(format!("conv bias {:?}, want [{cout}]", bt.shape())));
            }
            for plane in out.chunks_mut(cols).enumerate() {
                let c = plane.0 % cout;
                let bb = bt.data()[c];
                plane.1.iter_mut().for_each(|v| *v += bb);
            }
            parents.push(bv.id);
        }
        let has_bias = bias.is_some();
        let out = Tensor::from_vec([batch, cout, geom.ho, geom.wo], out)?;
        Ok(self.graph.push(out, &parents, move |g, ins, _| {
            let (x, w) = (ins[0], ins[1]);
            let gd = g.data();
            let mut gx = vec![T::zero(); x.numel()];
            let mut gw = vec![T::zero(); w.numel()];
            let mut scratch = vec![T::zero(); rows * cols];
            let mut dcols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
            for b in 0..batch {
                let gb = &gd[b * cout * cols..(b + 1) * cout * cols];
                let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
                let colsb: &[T] = if geom.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geom, &mut scratch);
                    &scratch
                };
                T::gemm(false, true, cout, rows, cols, T::one(), gb, colsb, T::one(), &mut gw);
                let gxb = &mut gx[b * in_plane..(b + 1) * in_plane];
                if geom.is_pointwise() {
                    T::gemm(true, false, rows, cols, cout, T::one(), w.data(), gb, T::zero(), gxb);
                } else {
                    T::gemm(true, false, rows, cols, cout, T::one(), w.data(), gb, T::zero(), &mut dcols);
                    col2im(&dcols, &geom, gxb);
                }
            }
            let mut grads = vec![
                Some(Tensor::from_vec(x.shape().to_vec(), gx).unwrap()),
                Some(Tensor::from_vec(w.shape().to_vec(), gw).unwrap()),
            ];
            if has_bias {
                let mut gbias = vec![T::zero(); cout];
                for (i, plane) in gd.chunks(cols).enumerate() {
                    gbias[i % cout] += plane.iter().copied().sum::<T>();
                }
                grads.push(Some(Tensor::from_vec([cout], gbias).unwrap()));
            }
            grads
        }))
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(self) -> Result<Var<'g, T>> {
        let x = self.val();
        if x.ndim() != 4 {
            return Err(Error::Shape(format!("upsample2x on {:?}", x.shape())));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for (p, plane) in x.data().chunks(h * w).enumerate() {
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_vec([n, c, 2 * h, 2 * w], out)?;
        Ok(self.graph.push(out, &[self.id], move |g, _, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (p, plane) in g.data().chunks(4 * h * w).enumerate() {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                    }
                }
            }
            vec![Some(Tensor::from_vec([n, c, h, w], gx).unwrap())]
        }))
    }

    /// Normalize `groups` contiguous blocks per sample, then apply per-channel
    /// affine. Input is `[n, c, ...]`.
    pub fn group_norm(self, groups: usize, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.val();
        let shape = x.shape().to_vec();
        if shape.len() < 2 || !shape[1].is_multiple_of(groups) {
            return Err(Error::Shape(format!("group_norm({groups}) on {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let (gm, bt) = (gamma.val(), beta.val());
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(Error::Shape(format!("group_norm affine {:?} for {c} channels", gm.shape())));
        }
        let cpg = c / groups;
        let block = cpg * spatial;
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); x.numel()];
        for (bi, blk) in x.data().chunks(block).enumerate() {
            let cnt = T::lit(block as f64);
            let mean = blk.iter().copied().sum::<T>() / cnt;
            let var = blk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[bi] = is;
            let g0 = (bi % groups) * cpg;
            for (j, &v) in blk.iter().enumerate() {
                let ch = g0 + j / spatial;
                let xh = (v - mean) * is;
                xhat[bi * block + j] = xh;
                out[bi * block + j] = xh * gm.data()[ch] + bt.data()[ch];
            }
        }
        let out = Tensor::from_vec(shape.clone(), out)?;
        Ok(self.graph.push(out, &[self.id, gamma.id, beta.id], move |g, ins, _| {
            let gm = ins[1];
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            let cnt = T::lit(block as f64);
            for bi in 0..n * groups {
                let g0 = (bi % groups) * cpg;
                let range = bi * block..(bi + 1) * block;
                let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
                for j in 0..block {
                    let ch = g0 + j / spatial;
                    let gv = gd[range.start + j];
                    let xh = xhat[range.start + j];
                    ggamma[ch] += gv * xh;
                    gbeta[ch] += gv;
                    let d = gv * gm.data()[ch];
                    sum_d += d;
                    sum_dx += d * xh;
                }
                let (md, mdx) = (sum_d / cnt, sum_dx / cnt);
                for j in 0..block {
                    let ch = g0 + j / spatial;
                    let d = gd[range.start + j] * gm.data()[ch];
                    gx[range.start + j] = inv_std[bi] * (d - md - xhat[range.start + j] * mdx);
                }
            }
            vec![
                Some(Tensor::from_vec(shape.clone(), gx).unwrap()),
                Some(Tensor::from_vec([c], ggamma).unwrap()),
                Some(Tensor::from_vec([c], gbeta).unwrap()),
            ]
        }))
    }

    /// Normalize over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        let rows = numel(&shape) / d;
        let xv = self.val();
        let (gm, bt) = (gamma.val(), beta.val());
        if gm.shape() != [d] || bt.shape() != [d] {
            return Err(Error::Shape(format!("layer_norm affine {:?} for width {d}", gm.shape())));
        }
        let eps = T::lit(eps);
        let cnt = T::lit(d as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / cnt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gm.data()[j] + bt.data()[j];
            }
        }
        let out = Tensor::from_vec(shape.clone(), out)?;
        Ok(self.graph.push(out, &[self.id, gamma.id, beta.id], move |g, ins, _| {
            let gm = ins[1];
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let mut ggamma = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            for r in 0..rows {
                let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
                for j in 0..d {
                    let gv = gd[r * d + j];
                    let xh = xhat[r * d + j];
                    ggamma[j] += gv * xh;
                    gbeta[j] += gv;
                    let dd = gv * gm.data()[j];
                    sum_d += dd;
                    sum_dx += dd * xh;
                }
                let (md, mdx) = (sum_d / cnt, sum_dx / cnt);
                for j in 0..d {
                    let dd = gd[r * d + j] * gm.data()[j];
                    gx[r * d + j] = inv_std[r] * (dd - md - xhat[r * d + j] * mdx);
                }
            }
            vec![
                Some(Tensor::from_vec(shape.clone(), gx).unwrap()),
                Some(Tensor::from_vec([d], ggamma).unwrap()),
                Some(Tensor::from_vec([d], gbeta).unwrap()),
            ]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        let x = self.val();
        let d = *x.shape().last().ok_or_else(|| Error::Shape("softmax on scalar".into()))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::from_vec(x.shape().to_vec(), out)?;
        Ok(self.graph.push(out, &[self.id], move |g, _, y| {
            let mut gx = vec![T::zero(); g.numel()];
            for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(Tensor::from_vec(g.shape().to_vec(), gx).unwrap())]
        }))
    }

    /// Scale each vector along the last axis to unit L2 norm.
    pub fn l2_normalize(self, eps: f64) -> Result<Var<'g, T>> {
        let x = self.val();
        let d = *x.shape().last().ok_or_else(|| Error::Shape("normalize scalar".into()))?;
        let eps = T::lit(eps);
        let norms: Vec<T> = x
            .data()
            .chunks(d)
            .map(|r| (r.iter().map(|&v| v * v).sum::<T>() + eps).sqrt())
            .collect();
        let mut out = x.data().to_vec();
        for (row, &nrm) in out.chunks_mut(d).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let out = Tensor::from_vec(x.shape().to_vec(), out)?;
        Ok(self.graph.push(out, &[self.id], move |g, _, y| {
            let mut gx = vec![T::zero(); g.numel()];
            for (((gr, yr), out), &nrm) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)).zip(&norms) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    out[j] = (gr[j] - yr[j] * dot) / nrm;
                }
            }
            vec![Some(Tensor::from_vec(g.shape().to_vec(), gx).unwrap())]
        }))
    }

    /// Rows of `self` (a `[vocab, d]` table) selected by `ids`; output `[ids.len(), d]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'g, T>> {
        let table = self.val();
        if table.ndim() != 2 {
            return Err(Error::Shape(format!("gather_rows on {:?}", table.shape())));
        }
        let (rows, d) = (table.dim(0), table.dim(1));
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("row {bad} out of range for table of {rows}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec([ids.len(), d], out)?;
        let ids = ids.to_vec();
        Ok(self.graph.push(out, &[self.id], move |g, _, _| {
            let mut gt = vec![T::zero(); rows * d];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g.data()[r * d + j];
                }
            }
            vec![Some(Tensor::from_vec([rows, d], gt).unwrap())]
        }))
    }

    /// Mean cross-entropy of `[n, classes]` logits against integer targets.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'g, T>> {
        let x = self.val();
        if x.ndim() != 2 || x.dim(0) != targets.len() {
            return Err(Error::Shape(format!("cross_entropy logits {:?} for {} targets", x.shape(), targets.len())));
        }
        let (n, c) = (x.dim(0), x.dim(1));
        if targets.iter().any(|&t| t >= c) {
            return Err(Error::Shape("cross_entropy target out of range".into()));
        }
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (r, row) in x.data().chunks(c).enumerate() {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            loss += lse - row[targets[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let nn = T::lit(n as f64);
        let targets = targets.to_vec();
        Ok(self.graph.push(Tensor::scalar(loss / nn), &[self.id], move |g, _, _| {
            let s = g.data()[0] / nn;
            let mut gx = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                gx[r * c + t] -= T::one();
            }
            gx.iter_mut().for_each(|v| *v *= s);
            vec![Some(Tensor::from_vec([n, c], gx).unwrap())]
        }))
    }

    /// Mean binary cross-entropy with logits against fixed 0/1 targets.
    pub fn bce_with_logits(self, targets: &Tensor<T>) -> Result<Var<'g, T>> {
        let x = self.val();
        x.expect_same_shape(targets)?;
        let n = T::lit(x.numel() as f64);
        let loss: T = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let targets = targets.clone();
        Ok(self.graph.push(Tensor::scalar(loss / n), &[self.id], move |g, ins, _| {
            let s = g.data()[0] / n;
            let gx = ins[0].zip_map(&targets, |z, y| (sigmoid(z) - y) * s).unwrap();
            vec![Some(gx)]
        }))
    }

    /// Mean squared difference between two equally shaped values.
    pub fn mse(self, target: Var<'g, T>) -> Result<Var<'g, T>> {
        if self.shape() != target.shape() {
            return Err(Error::Shape(format!("mse {:?} vs {:?}", self.shape(), target.shape())));
        }
        Ok(self.sub(target)?.square().mean())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` at `x` in f64.
    fn check_grad(x: Tensor<f64>, f: impl Fn(Var<'_, f64>) -> Var<'_, f64>) {
        let g = Graph::<f64>::training();
        let xv = g.input(x.clone());
        let y = f(xv);
        let grads = g.backward(y).unwrap();
        let analytic = grads.wrt(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.numel() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let g = Graph::<f64>::inference();
                let v = f(g.constant(xp)).value().data()[0];
                v
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() < 1e-5 * (1.0 + fd.abs()), "coord {i}: fd {fd} vs analytic {a}");
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let other = rand(&[2, 1, 3], 2);
        check_grad(rand(&[2, 4, 3], 1), |x| {
            let o = x.graph().constant(other.clone());
            x.mul(o).unwrap().silu().add(o).unwrap().tanh().sum()
        });
        // broadcast operand receiving the gradient
        let big = rand(&[2, 4, 3], 3);
        check_grad(rand(&[1, 4, 1], 4), |x| {
            let b = x.graph().constant(big.clone());
            b.div(x.exp()).unwrap().sub(x).unwrap().square().sum()
        });
    }

    #[test]
    fn matmul_grads_all_transpose_modes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let bshape = if tb { [2, 5, 4] } else { [2, 4, 5] };
            let other = rand(&bshape, 7);
            let ashape = if ta { [2, 4, 3] } else { [2, 3, 4] };
            check_grad(rand(&ashape, 8), |x| {
                let b = x.graph().constant(other.clone());
                x.bmm(b, ta, tb).unwrap().square().sum()
            });
            let a = rand(&ashape, 9);
            check_grad(other.clone(), |y| {
                let av = y.graph().constant(a.clone());
                av.bmm(y, ta, tb).unwrap().tanh().sum()
            });
        }
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let w = rand(&[3, 2, 3, 3], 11);
        check_grad(rand(&[2, 2, 5, 5], 12), |x| {
            let wv = x.graph().constant(w.clone());
            x.conv2d(wv, None, 2, 1).unwrap().square().sum()
        });
        let x = rand(&[2, 2, 5, 5], 13);
        check_grad(w.clone(), |wv| {
            let xv = wv.graph().constant(x.clone());
            xv.conv2d(wv, None, 1, 1).unwrap().tanh().sum()
        });
        let w1 = rand(&[4, 2, 1, 1], 14);
        check_grad(rand(&[1, 2, 3, 3], 15), |x| {
            let wv = x.graph().constant(w1.clone());
            x.conv2d(wv, None, 1, 0).unwrap().upsample2x().unwrap().square().sum()
        });
    }

    #[test]
    fn norm_softmax_and_loss_grads() {
        let gamma = rand(&[4], 21);
        let beta = rand(&[4], 22);
        check_grad(rand(&[2, 4, 3, 2], 23), |x| {
            let g = x.graph();
            x.group_norm(2, g.constant(gamma.clone()), g.constant(beta.clone()), 1e-5)
                .unwrap()
                .tanh()
                .sum()
        });
        check_grad(rand(&[3, 4], 24), |x| {
            let g = x.graph();
            x.layer_norm(g.constant(gamma.clone()), g.constant(beta.clone()), 1e-5).unwrap().square().sum()
        });
        let w = rand(&[3, 4], 25);
        check_grad(rand(&[3, 4], 26), |x| {
            x.softmax().unwrap().mul(x.graph().constant(w.clone())).unwrap().sum()
        });
        check_grad(rand(&[3, 4], 27), |x| {
            x.l2_normalize(0.0).unwrap().mul(x.graph().constant(w.clone())).unwrap().sum()
        });
        check_grad(rand(&[3, 4], 28), |x| x.cross_entropy(&[1, 0, 3]).unwrap());
        let targets = Tensor::from_vec([3, 4], vec![1., 0., 1., 0., 0., 0., 1., 1., 0., 1., 0., 0.]).unwrap();
        check_grad(rand(&[3, 4], 29), |x| x.bce_with_logits(&targets).unwrap());
    }

    #[test]
    fn shape_ops_grads() {
        let w = rand(&[2, 3, 4], 31);
        check_grad(rand(&[2, 4, 3], 32), |x| {
            let p = x.permute(&[0, 2, 1]).unwrap();
            let c = Var::concat(&[p, x.graph().constant(w.clone())], 1).unwrap();
            c.narrow(1, 1, 4).unwrap().square().sum_axis(2).unwrap().tanh().sum()
        });
        let table = rand(&[5, 3], 33);
        check_grad(table, |t| t.gather_rows(&[4, 1, 4]).unwrap().square().mean_axis(0).unwrap().sum());
        let lw = rand(&[3, 4], 34);
        let lb = rand(&[3], 35);
        check_grad(rand(&[2, 2, 4], 36), |x| {
            let g = x.graph();
            x.linear(g.constant(lw.clone()), Some(g.constant(lb.clone()))).unwrap().square().sum()
        });
    }

    #[test]
    fn inference_graph_keeps_no_tape() {
        let g = Graph::<f32>::inference();
        let x = g.constant(Tensor::full([2, 2], 1.0));
        let y = x.silu().sum();
        assert!(!y.requires_grad());
        assert!(g.nodes.borrow().iter().all(|n| n.backward.is_none()));
    }
}
