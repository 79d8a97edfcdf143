//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] and enter the tape through [`Graph::param`]; calling
//! [`Graph::backward`] yields gradients keyed by [`ParamId`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor under a unique hierarchical name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    CondConv { x: Var, v: Var, w: Var, b: Option<Var>, pad: usize },
    LeakyRelu { x: Var, slope: f64 },
    Prelu { x: Var, a: Var },
    Sigmoid(Var),
    Log(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Stretch(Var),
    Gap(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    Reshape(Var),
    Blur { x: Var, k: Var },
    Resample { x: Var, rows: Arc<Tensor<T>>, cols: Arc<Tensor<T>> },
    Mse(Var, Var),
    L1(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    params: Vec<Option<Tensor<T>>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

const LOG_FLOOR: f64 = 1e-300;

/// A single-sample computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item().as_f64()
    }

    /// Smallest distance of any rectifier input or L1 residual to its kink.
    pub fn kink_margin(&self) -> f64 {
        let min_abs = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64().abs()).fold(f64::INFINITY, f64::min);
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::LeakyRelu { x, .. } | Op::Prelu { x, .. } => min_abs(self.value(x)),
                Op::L1(a, b) => self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(p, q)| (p.as_f64() - q.as_f64()).abs())
                    .fold(f64::INFINITY, f64::min),
                _ => f64::INFINITY,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Grads::leaf`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), &[])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Conv { x, w, b, stride, pad }, &parents)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::ConvT { x, w, b, stride, pad }, &parents)
    }

    /// Stride-1 "same" convolution of `concat(x, stretch(v))` without
    /// materialising the stretched planes. `w` is `[co, cx + d, k, k]`.
    pub fn cond_conv2d(&mut self, x: Var, v: Var, w: Var, b: Option<Var>) -> Var {
        let (cx, h, wd) = self.value(x).dims3();
        let d = self.value(v).numel();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws[1], cx + d, "conditioned conv expects {} input channels", ws[1]);
        assert_eq!(ws[2], ws[3]);
        assert_eq!(ws[2] % 2, 1, "conditioned conv needs an odd kernel");
        let (co, k) = (ws[0], ws[2]);
        let pad = k / 2;
        let g = kernels::ConvGeom::new(cx, h, wd, k, k, 1, pad).expect("bad geometry");
        let mut out = Tensor::zeros(&[co, h, wd]);
        {
            let wt = self.value(w).data();
            let wmat = MatRef::with_ld(wt, co, cx * k * k, (cx + d) * k * k);
            kernels::conv2d_into(self.value(x).data(), wmat, &g, out.data_mut());
            kernels::stretch_conv_accumulate(self.value(v).data(), wt, co, cx + d, k, k, h, wd, pad, out.data_mut());
        }
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            for (o, bv) in bias.into_iter().enumerate() {
                for val in &mut out.data_mut()[o * h * wd..(o + 1) * h * wd] {
                    *val += bv;
                }
            }
        }
        let mut parents = vec![x, v, w];
        parents.extend(b);
        self.push(out, Op::CondConv { x, v, w, b, pad }, &parents)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Parametric rectifier with a single learnable slope `a` (shape `[1]`).
    pub fn prelu(&mut self, x: Var, a: Var) -> Var {
        let s = self.value(a).item();
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::Prelu { x, a }, &[x, a])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let floor = T::of(LOG_FLOOR);
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::Log(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let s = T::of(c);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let rest = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &rest[..], "concat trailing shape mismatch");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(rest);
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Broadcasts a `[d]` vector to `[d, h, w]` constant planes.
    pub fn stretch(&mut self, v: Var, h: usize, w: usize) -> Var {
        let vals = self.value(v).data().to_vec();
        let mut data = Vec::with_capacity(vals.len() * h * w);
        for val in vals.iter() {
            data.extend(std::iter::repeat_n(*val, h * w));
        }
        self.push(Tensor::from_vec(&[vals.len(), h, w], data), Op::Stretch(v), &[v])
    }

    /// Global average pooling `[c, h, w] -> [c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        let n = T::of((h * w) as f64);
        let data = (0..c).map(|ch| t.channel(ch).iter().copied().sum::<T>() / n).collect();
        self.push(Tensor::from_vec(&[c], data), Op::Gap(x), &[x])
    }

    /// `w x + b` with `w: [out, in]`, `x: [in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (wt, xt) = (self.value(w), self.value(x));
        let (o, i) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xt.numel(), i, "linear input size mismatch");
        let mut out = match b {
            Some(b) => self.value(b).clone().reshaped(&[o]),
            None => Tensor::zeros(&[o]),
        };
        gemm(T::one(), MatRef::new(wt.data(), o, i), MatRef::new(xt.data(), i, 1), T::one(), out.data_mut());
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Linear { x, w, b }, &parents)
    }

    /// Softmax over all elements.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Reflect-padded convolution of every channel of `x` with kernel `k`.
    pub fn blur(&mut self, x: Var, k: Var) -> Var {
        let out = kernels::blur_reflect(self.value(x), self.value(k).data());
        self.push(out, Op::Blur { x, k }, &[x, k])
    }

    pub fn resample(&mut self, x: Var, rows: Arc<Tensor<T>>, cols: Arc<Tensor<T>>) -> Var {
        let out = kernels::resample(self.value(x), &rows, &cols);
        self.push(out, Op::Resample { x, rows, cols }, &[x])
    }

    /// Mean squared difference, shape `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let n = T::of(ta.numel() as f64);
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// Mean absolute difference, shape `[1]`.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.numel(), tb.numel(), "l1 size mismatch");
        let n = T::of(ta.numel() as f64);
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        self.push(Tensor::scalar(s / n), Op::L1(a, b), &[a, b])
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, w)| self.value(v).item() * T::of(w)).fold(T::zero(), |a, b| a + b);
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), &parents)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads { params: Vec::new(), leaves: HashMap::new() };
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out);
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], out: &mut Grads<T>) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &self.nodes[i].op {
            Op::Leaf => {
                out.leaves.insert(Var(i), g);
            }
            Op::Param(id) => {
                if out.params.len() <= id.0 {
                    out.params.resize_with(id.0 + 1, || None);
                }
                match &mut out.params[id.0] {
                    Some(e) => e.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            &Op::Conv { x, w, b, stride, pad } => {
                let (xt, wt) = (self.value(x), self.value(w));
                let (ci, h, wd) = xt.dims3();
                let ws = wt.shape();
                let geom = kernels::ConvGeom::new(ci, h, wd, ws[2], ws[3], stride, pad).unwrap();
                let wmat = MatRef::new(wt.data(), ws[0], geom.col_rows());
                let (dx, dw) = kernels::conv2d_backward(xt.data(), wmat, &geom, g.data(), self.needs(x));
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    acc(grads, b, kernels::conv_bias_grad(&g));
                }
                if self.needs(w) {
                    acc(grads, w, Tensor::from_vec(ws, dw));
                }
                if let Some(dx) = dx {
                    acc(grads, x, Tensor::from_vec(xt.shape(), dx));
                }
            }
            &Op::ConvT { x, w, b, stride, pad } => {
                let (dx, dw) =
                    kernels::conv_transpose2d_backward(self.value(x), self.value(w), stride, pad, &g, self.needs(x));
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    acc(grads, b, kernels::conv_bias_grad(&g));
                }
                if self.needs(w) {
                    acc(grads, w, dw);
                }
                if let Some(dx) = dx {
                    acc(grads, x, dx);
                }
            }
            &Op::CondConv { x, v, w, b, pad } => {
                let (xt, vt, wt) = (self.value(x), self.value(v), self.value(w));
                let (cx, h, wd) = xt.dims3();
                let ws = wt.shape();
                let (co, k, d) = (ws[0], ws[2], vt.numel());
                let geom = kernels::ConvGeom::new(cx, h, wd, k, k, 1, pad).unwrap();
                let row = (cx + d) * k * k;
                let wmat = MatRef::with_ld(wt.data(), co, cx * k * k, row);
                let (dx, dwx) = kernels::conv2d_backward(xt.data(), wmat, &geom, g.data(), self.needs(x));
                let mut dw = vec![T::zero(); co * row];
                for o in 0..co {
                    dw[o * row..o * row + cx * k * k].copy_from_slice(&dwx[o * cx * k * k..(o + 1) * cx * k * k]);
                }
                let dv = kernels::stretch_conv_backward(vt.data(), wt.data(), co, cx + d, k, k, h, wd, pad, g.data(), &mut dw);
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    acc(grads, b, kernels::conv_bias_grad(&g));
                }
                if self.needs(w) {
                    acc(grads, w, Tensor::from_vec(ws, dw));
                }
                if self.needs(v) {
                    acc(grads, v, Tensor::from_vec(vt.shape(), dv));
                }
                if let Some(dx) = dx {
                    acc(grads, x, Tensor::from_vec(xt.shape(), dx));
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let s = T::of(slope);
                let d = self.value(x).zip_map(&g, |xv, gv| if xv > T::zero() { gv } else { gv * s });
                acc(grads, x, d);
            }
            &Op::Prelu { x, a } => {
                let xt = self.value(x);
                let s = self.value(a).item();
                if self.needs(a) {
                    let da: T = xt.data().iter().zip(g.data()).filter(|(&xv, _)| xv <= T::zero()).map(|(&xv, &gv)| xv * gv).sum();
                    acc(grads, a, Tensor::from_vec(self.value(a).shape(), vec![da]));
                }
                if self.needs(x) {
                    acc(grads, x, xt.zip_map(&g, |xv, gv| if xv > T::zero() { gv } else { gv * s }));
                }
            }
            &Op::Sigmoid(x) => {
                let d = self.nodes[i].value.zip_map(&g, |y, gv| gv * y * (T::one() - y));
                acc(grads, x, d);
            }
            &Op::Log(x) => {
                let floor = T::of(LOG_FLOOR);
                let d = self.value(x).zip_map(&g, |xv, gv| gv / xv.max(floor));
                acc(grads, x, d);
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.clone());
                }
                if self.needs(b) {
                    acc(grads, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.clone());
                }
                if self.needs(b) {
                    acc(grads, b, g.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.zip_map(self.value(b), |gv, bv| gv * bv));
                }
                if self.needs(b) {
                    acc(grads, b, g.zip_map(self.value(a), |gv, av| gv * av));
                }
            }
            &Op::Scale(x, c) => {
                let s = T::of(c);
                acc(grads, x, g.map(|v| v * s));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let n = t.numel();
                    if self.needs(p) {
                        acc(grads, p, Tensor::from_vec(t.shape(), g.data()[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            &Op::Stretch(v) => {
                let d = self.value(v).numel();
                let plane = g.numel() / d;
                let dv = (0..d).map(|c| g.data()[c * plane..(c + 1) * plane].iter().copied().sum()).collect();
                acc(grads, v, Tensor::from_vec(self.value(v).shape(), dv));
            }
            &Op::Gap(x) => {
                let (c, h, w) = self.value(x).dims3();
                let n = T::of((h * w) as f64);
                let mut d = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let v = g.data()[ch] / n;
                    d.data_mut()[ch * h * w..(ch + 1) * h * w].fill(v);
                }
                acc(grads, x, d);
            }
            &Op::Linear { x, w, b } => {
                let (wt, xt) = (self.value(w), self.value(x));
                let (o, inp) = (wt.shape()[0], wt.shape()[1]);
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    acc(grads, b, g.clone().reshaped(self.value(b).shape()));
                }
                if self.needs(w) {
                    let mut dw = Tensor::zeros(&[o, inp]);
                    gemm(T::one(), MatRef::new(g.data(), o, 1), MatRef::new(xt.data(), 1, inp), T::zero(), dw.data_mut());
                    acc(grads, w, dw);
                }
                if self.needs(x) {
                    let mut dx = vec![T::zero(); inp];
                    gemm(T::one(), MatRef::new(wt.data(), o, inp).t(), MatRef::new(g.data(), o, 1), T::zero(), &mut dx);
                    acc(grads, x, Tensor::from_vec(xt.shape(), dx));
                }
            }
            &Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let dot: T = y.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                acc(grads, x, y.zip_map(&g, |yv, gv| yv * (gv - dot)));
            }
            &Op::Reshape(x) => {
                acc(grads, x, g.reshaped(self.value(x).shape()));
            }
            &Op::Blur { x, k } => {
                let kt = self.value(k);
                let (dx, dk) = kernels::blur_reflect_backward(self.value(x), kt.data(), &g, self.needs(x));
                if self.needs(k) {
                    acc(grads, k, Tensor::from_vec(kt.shape(), dk));
                }
                if let Some(dx) = dx {
                    acc(grads, x, dx);
                }
            }
            Op::Resample { x, rows, cols } => {
                acc(grads, *x, kernels::resample_backward(&g, rows, cols));
            }
            &Op::Mse(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let c = g.item() * T::of(2.0 / ta.numel() as f64);
                let d = ta.zip_map(tb, |x, y| (x - y) * c);
                if self.needs(b) {
                    acc(grads, b, d.map(|v| -v));
                }
                if self.needs(a) {
                    acc(grads, a, d);
                }
            }
            &Op::L1(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let c = g.item() / T::of(ta.numel() as f64);
                let sign = |v: T| if v > T::zero() { c } else if v < T::zero() { -c } else { T::zero() };
                let d: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| sign(x - y)).collect();
                if self.needs(b) {
                    acc(grads, b, Tensor::from_vec(tb.shape(), d.iter().map(|&v| -v).collect()));
                }
                if self.needs(a) {
                    acc(grads, a, Tensor::from_vec(ta.shape(), d));
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        acc(grads, v, Tensor::scalar(g.item() * T::of(w)));
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax over all elements.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let m = x.data().iter().copied().fold(T::neg_infinity(), T::max);
    let e = x.map(|v| (v - m).exp());
    let s = e.sum();
    e.map(|v| v / s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameters_used_twice_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::from_vec(&[2], vec![1.5, -2.0]));
        let mut g = Graph::new();
        let a = g.param(&store, p);
        let b = g.param(&store, p);
        let prod = g.mul(a, b);
        let z = g.input(Tensor::zeros(&[2]));
        let loss = g.mse(prod, z);
        let grads = g.backward(loss);
        // d/dp mean(p^4) = 4 p^3 / 2
        let gp = grads.param(p).unwrap();
        assert!((gp.data()[0] - 2.0 * 1.5f64.powi(3)).abs() < 1e-12);
        assert!((gp.data()[1] - 2.0 * (-2.0f64).powi(3)).abs() < 1e-12);
    }

    #[test]
    fn constants_do_not_propagate() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1, 2, 2], 1.0));
        let y = g.input_with_grad(Tensor::full(&[1, 2, 2], 2.0));
        let z = g.mse(x, y);
        let grads = g.backward(z);
        assert!(grads.leaf(x).is_none());
        assert!(grads.leaf(y).is_some());
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let t = Tensor::from_vec(&[4], vec![1000.0f64, 1001.0, 999.0, 1000.5]);
        let s = softmax(&t);
        assert!((s.sum() - 1.0).abs() < 1e-12);
        let s2 = softmax(&t.map(|v| v - 1000.0));
        assert!(s.max_abs_diff(&s2) < 1e-15);
    }
}
