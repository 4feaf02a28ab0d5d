//! A small reverse-mode tape. Every forward pass builds a fresh [`Graph`];
//! parameters enter as leaves and their gradients are read back after
//! [`Graph::backward`].

use std::sync::Arc;

use super::resample::SparseMap;
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    MulPlane {
        x: Var,
        g: Var,
    },
    AddPlane {
        x: Var,
        g: Var,
    },
    MulRow {
        x: Var,
        r: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Flatten(Var),
    Resample {
        x: Var,
        map: Arc<SparseMap<T>>,
    },
    ConcatCols(Var, Var),
    SumAll(Var),
    SmoothedCe {
        logits: Var,
        probs: Tensor<T>,
        targets: Vec<usize>,
        eps: T,
    },
    L1Loss {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (trainable parameters, or inputs
    /// under a gradient check).
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), pad);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Conv2d { x, w, b, pad }, ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (bsz, n_in) = self.value(x).dims2();
        let (n_out, n_in_w) = self.value(w).dims2();
        assert_eq!(n_in, n_in_w, "linear input width mismatch");
        let mut out = Tensor::zeros(&[bsz, n_out]);
        T::gemm(
            bsz,
            n_in,
            n_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            out.data_mut(),
            false,
        );
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n_out) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| v * scale + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine { x, scale }, ng)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1);
        let k = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ScaleBy { x, s }, ng)
    }

    /// `x[b,c,i,j] · g[b,0,i,j]`: a one-channel plane broadcast over channels.
    pub fn mul_plane(&mut self, x: Var, g: Var) -> Var {
        let out = plane_broadcast(self.value(x), self.value(g), |a, b| a * b);
        let ng = self.ng(x) || self.ng(g);
        self.push(out, Op::MulPlane { x, g }, ng)
    }

    /// `x[b,c,i,j] + g[b,0,i,j]`.
    pub fn add_plane(&mut self, x: Var, g: Var) -> Var {
        let out = plane_broadcast(self.value(x), self.value(g), |a, b| a + b);
        let ng = self.ng(x) || self.ng(g);
        self.push(out, Op::AddPlane { x, g }, ng)
    }

    /// `x[b,n] · r[n]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let (_, n) = self.value(x).dims2();
        assert_eq!(self.value(r).len(), n, "row broadcast width mismatch");
        let rv = self.value(r).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &k) in row.iter_mut().zip(&rv) {
                *o *= k;
            }
        }
        let ng = self.ng(x) || self.ng(r);
        self.push(out, Op::MulRow { x, r }, ng)
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0usize; b * c * oh * ow];
        let src = self.value(x).data();
        let dst = out.data_mut();
        for p in 0..b * c {
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
                    let o = p * oh * ow + i * ow + j;
                    dst[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxPool2 { x, argmax }, ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let hw = T::from_usize(h * w).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() / hw)
            .collect();
        let out = Tensor::from_vec(&[b, c], data).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::GlobalAvgPool(x), ng)
    }

    /// `[b, ...] → [b, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let b = t.shape()[0];
        let out = t.clone().reshape(&[b, t.len() / b]).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::Flatten(x), ng)
    }

    /// Applies a fixed linear map to every trailing plane of `x`. The leading
    /// `lead` axes are kept; the remaining axes are replaced by `out_shape`.
    pub fn resample(&mut self, x: Var, map: Arc<SparseMap<T>>, lead: usize, out_shape: &[usize]) -> Var {
        let t = self.value(x);
        let planes: usize = t.shape()[..lead].iter().product();
        assert_eq!(planes * map.in_len, t.len(), "resample input mismatch");
        assert_eq!(out_shape.iter().product::<usize>(), map.out_len);
        let mut shape = t.shape()[..lead].to_vec();
        shape.extend_from_slice(out_shape);
        let mut out = Tensor::zeros(&shape);
        for (src, dst) in t.data().chunks(map.in_len).zip(out.data_mut().chunks_mut(map.out_len)) {
            map.apply(src, dst);
        }
        let ng = self.ng(x);
        self.push(out, Op::Resample { x, map }, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ba, na) = self.value(a).dims2();
        let (bb, nb) = self.value(b).dims2();
        assert_eq!(ba, bb, "concat batch mismatch");
        let mut data = Vec::with_capacity(ba * (na + nb));
        for i in 0..ba {
            data.extend_from_slice(self.value(a).item(i));
            data.extend_from_slice(self.value(b).item(i));
        }
        let out = Tensor::from_vec(&[ba, na + nb], data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(total), Op::SumAll(x), ng)
    }

    /// Mean cross-entropy against label-smoothed targets
    /// `(1 - eps)·onehot + eps/K`.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[usize], eps: T) -> Var {
        let (b, k) = self.value(logits).dims2();
        assert_eq!(b, targets.len());
        let probs = softmax_rows(self.value(logits));
        let kk = T::from_usize(k).unwrap();
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = self.value(logits).item(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            for (c, &z) in row.iter().enumerate() {
                let target = eps / kk + if c == t { T::one() - eps } else { T::zero() };
                loss += target * (lse - z);
            }
        }
        loss = loss / T::from_usize(b).unwrap();
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SmoothedCe {
                logits,
                probs,
                targets: targets.to_vec(),
                eps,
            },
            ng,
        )
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "l1 target shape mismatch");
        let n = T::from_usize(p.len()).unwrap();
        let loss = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
        let ng = self.ng(pred);
        self.push(Tensor::scalar(loss), Op::L1Loss { pred, target }, ng)
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        if !self.ng(out) {
            return;
        }
        self.nodes[out.0].grad = Some(Tensor::scalar(T::one()));
        for idx in (0..=out.0).rev() {
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let grads = self.local_grads(idx, &gy);
            self.nodes[idx].grad = Some(gy);
            for (v, g) in grads {
                self.accumulate(v, g);
            }
        }
    }

    fn local_grads(&self, idx: usize, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), gy, *pad, self.ng(*x), self.ng(*w));
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
                if self.ng(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (bsz, n_in) = self.value(*x).dims2();
                let (n_out, _) = self.value(*w).dims2();
                if self.ng(*x) {
                    let mut gx = Tensor::zeros(&[bsz, n_in]);
                    T::gemm(
                        bsz,
                        n_out,
                        n_in,
                        gy.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        gx.data_mut(),
                        false,
                    );
                    out.push((*x, gx));
                }
                if self.ng(*w) {
                    let mut gw = Tensor::zeros(&[n_out, n_in]);
                    T::gemm(
                        n_out,
                        bsz,
                        n_in,
                        gy.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        gw.data_mut(),
                        false,
                    );
                    out.push((*w, gw));
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(&[n_out]);
                    for row in gy.data().chunks(n_out) {
                        for (g, &r) in gb.data_mut().iter_mut().zip(row) {
                            *g += r;
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::from_vec(xv.shape(), data).unwrap()));
            }
            Op::Sigmoid(x) => {
                let data = gy.data().iter().zip(y.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                out.push((*x, Tensor::from_vec(y.shape(), data).unwrap()));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.map(|g| -g)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = gy.data().iter().zip(vb.data()).map(|(&g, &v)| g * v).collect();
                    out.push((*a, Tensor::from_vec(gy.shape(), d).unwrap()));
                }
                if self.ng(*b) {
                    let d = gy.data().iter().zip(va.data()).map(|(&g, &v)| g * v).collect();
                    out.push((*b, Tensor::from_vec(gy.shape(), d).unwrap()));
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                out.push((*x, gy.map(|g| g * s)));
            }
            Op::ScaleBy { x, s } => {
                let k = self.value(*s).data()[0];
                if self.ng(*x) {
                    out.push((*x, gy.map(|g| g * k)));
                }
                if self.ng(*s) {
                    let d: T = gy.data().iter().zip(self.value(*x).data()).map(|(&g, &v)| g * v).sum();
                    out.push((*s, Tensor::scalar(d)));
                }
            }
            Op::MulPlane { x, g } => {
                let (xv, gv) = (self.value(*x), self.value(*g));
                let (b, c, h, w) = xv.dims4();
                let hw = h * w;
                if self.ng(*x) {
                    out.push((*x, plane_broadcast(gy, gv, |a, b| a * b)));
                }
                if self.ng(*g) {
                    let mut gg = Tensor::zeros(&[b, 1, h, w]);
                    for bi in 0..b {
                        let dst = &mut gg.data_mut()[bi * hw..(bi + 1) * hw];
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            for ((d, &gyv), &xvv) in dst.iter_mut().zip(&gy.data()[off..off + hw]).zip(&xv.data()[off..off + hw]) {
                                *d += gyv * xvv;
                            }
                        }
                    }
                    out.push((*g, gg));
                }
            }
            Op::AddPlane { x, g } => {
                let (b, c, h, w) = gy.dims4();
                let hw = h * w;
                out.push((*x, gy.clone()));
                if self.ng(*g) {
                    let mut gg = Tensor::zeros(&[b, 1, h, w]);
                    for bi in 0..b {
                        let dst = &mut gg.data_mut()[bi * hw..(bi + 1) * hw];
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            for (d, &gyv) in dst.iter_mut().zip(&gy.data()[off..off + hw]) {
                                *d += gyv;
                            }
                        }
                    }
                    out.push((*g, gg));
                }
            }
            Op::MulRow { x, r } => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                let (_, n) = xv.dims2();
                if self.ng(*x) {
                    let mut gx = gy.clone();
                    for row in gx.data_mut().chunks_mut(n) {
                        for (o, &k) in row.iter_mut().zip(rv.data()) {
                            *o *= k;
                        }
                    }
                    out.push((*x, gx));
                }
                if self.ng(*r) {
                    let mut gr = Tensor::zeros(rv.shape());
                    for (grow, xrow) in gy.data().chunks(n).zip(xv.data().chunks(n)) {
                        for ((o, &g), &v) in gr.data_mut().iter_mut().zip(grow).zip(xrow) {
                            *o += g * v;
                        }
                    }
                    out.push((*r, gr));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let d = gx.data_mut();
                for (&g, &src) in gy.data().iter().zip(argmax) {
                    d[src] += g;
                }
                out.push((*x, gx));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = T::from_usize(h * w).unwrap();
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (plane, &g) in gx.data_mut().chunks_mut(h * w).zip(gy.data()) {
                    plane.iter_mut().for_each(|v| *v = g / hw);
                }
                out.push((*x, gx));
            }
            Op::Flatten(x) => {
                out.push((*x, gy.clone().reshape(self.value(*x).shape()).unwrap()));
            }
            Op::Resample { x, map } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (src, dst) in gy.data().chunks(map.out_len).zip(gx.data_mut().chunks_mut(map.in_len)) {
                    map.apply_transpose(src, dst);
                }
                out.push((*x, gx));
            }
            Op::ConcatCols(a, b) => {
                let (bsz, na) = self.value(*a).dims2();
                let (_, nb) = self.value(*b).dims2();
                let mut ga = Vec::with_capacity(bsz * na);
                let mut gb = Vec::with_capacity(bsz * nb);
                for row in gy.data().chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                out.push((*a, Tensor::from_vec(&[bsz, na], ga).unwrap()));
                out.push((*b, Tensor::from_vec(&[bsz, nb], gb).unwrap()));
            }
            Op::SumAll(x) => {
                let g = gy.data()[0];
                out.push((*x, Tensor::full(self.value(*x).shape(), g)));
            }
            Op::SmoothedCe {
                logits,
                probs,
                targets,
                eps,
            } => {
                let (b, k) = probs.dims2();
                let scale = gy.data()[0] / T::from_usize(b).unwrap();
                let kk = T::from_usize(k).unwrap();
                let mut g = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    for (c, v) in g.item_mut(i).iter_mut().enumerate() {
                        let target = *eps / kk + if c == t { T::one() - *eps } else { T::zero() };
                        *v = (*v - target) * scale;
                    }
                }
                out.push((*logits, g));
            }
            Op::L1Loss { pred, target } => {
                let p = self.value(*pred);
                let scale = gy.data()[0] / T::from_usize(p.len()).unwrap();
                let d = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| {
                        let diff = a - b;
                        if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*pred, Tensor::from_vec(p.shape(), d).unwrap()));
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (_, k) = logits.dims2();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

fn plane_broadcast<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    assert_eq!(g.shape(), &[b, 1, h, w], "plane broadcast shape mismatch");
    let hw = h * w;
    let mut out = x.clone();
    for bi in 0..b {
        let plane = &g.data()[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for (o, &p) in out.data_mut()[off..off + hw].iter_mut().zip(plane) {
                *o = f(*o, p);
            }
        }
    }
    out
}

/// Unfolds one `[c, h, w]` image into a `[c·k·k, oh·ow]` patch matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [T]) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    // valid ox range: 0 <= ox + kj - pad < w
                    let lo = pad.saturating_sub(kj).min(ow);
                    let hi = (w + pad).saturating_sub(kj).min(ow).max(lo);
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = lo + kj - pad;
                    line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let lo = pad.saturating_sub(kj).min(ow);
                    let hi = (w + pad).saturating_sub(kj).min(ow).max(lo);
                    let start = lo + kj - pad;
                    let dst = &mut plane[iy as usize * w + start..iy as usize * w + start + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Stride-1 convolution; `w` is `[out, in, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (bsz, c, h, wd) = x.dims4();
    let (o, ci, k, k2) = w.dims4();
    assert_eq!(ci, c, "conv input channels mismatch");
    assert_eq!(k, k2, "conv kernel must be square");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv input smaller than kernel");
    let oh = h + 2 * pad + 1 - k;
    let ow = wd + 2 * pad + 1 - k;
    let ckk = c * k * k;
    let mut col = vec![T::zero(); ckk * oh * ow];
    let mut out = Tensor::zeros(&[bsz, o, oh, ow]);
    for bi in 0..bsz {
        im2col(x.item(bi), c, h, wd, k, pad, &mut col);
        let dst = out.item_mut(bi);
        for (oc, plane) in dst.chunks_mut(oh * ow).enumerate() {
            plane.fill(b.data()[oc]);
        }
        T::gemm(o, ckk, oh * ow, w.data(), false, &col, false, dst, true);
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (bsz, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let (_, _, oh, ow) = gy.dims4();
    let ckk = c * k * k;
    let mut gb = Tensor::zeros(&[o]);
    for bi in 0..bsz {
        for (oc, plane) in gy.item(bi).chunks(oh * ow).enumerate() {
            gb.data_mut()[oc] += plane.iter().copied().sum::<T>();
        }
    }
    let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = want_w.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![T::zero(); ckk * oh * ow];
    for bi in 0..bsz {
        let g = gy.item(bi);
        if let Some(gw) = gw.as_mut() {
            im2col(x.item(bi), c, h, wd, k, pad, &mut col);
            T::gemm(o, oh * ow, ckk, g, false, &col, true, gw.data_mut(), true);
        }
        if let Some(gx) = gx.as_mut() {
            T::gemm(ckk, o, oh * ow, w.data(), true, g, false, &mut col, false);
            col2im(&col, c, h, wd, k, pad, gx.item_mut(bi));
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(sum(out · probe))/d(input) for a graph
    /// built by `build`.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            rand_tensor(g.value(out).shape(), &mut rng)
        };
        let objective = |inputs: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let p = g.constant(probe.clone());
        let prod = g.mul(out, p);
        let total = g.sum_all(prod);
        g.backward(total);
        for (vi, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[vi].shape()));
            for e in 0..inputs[vi].len() {
                let h = 1e-6;
                let mut plus = inputs.clone();
                plus[vi].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[e] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs().max(a.abs()),
                    "input {vi} elem {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, pad) in [(3, 1), (3, 0), (1, 0), (5, 2)] {
            let x = rand_tensor(&[2, 3, 5, 6], &mut rng);
            let w = rand_tensor(&[4, 3, k, k], &mut rng);
            let b = rand_tensor(&[4], &mut rng);
            check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], pad));
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[1, 2, 4, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let y = conv2d_forward(&x, &w, &b, 1);
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (yi, xj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if (0..4).contains(&yi) && (0..5).contains(&xj) {
                                    acc += w.data()[((o * 2 + c) * 3 + ki) * 3 + kj] * x.data()[(c * 4 + yi as usize) * 5 + xj as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(o * 4 + i) * 5 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let b = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let p = rand_tensor(&[2, 1, 4, 4], &mut rng);
        check(vec![a.clone(), b.clone()], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sub(m, v[1]);
            let t = g.sigmoid(s);
            g.add(t, v[0])
        });
        check(vec![a.clone(), p.clone()], |g, v| {
            let m = g.mul_plane(v[0], v[1]);
            g.add_plane(m, v[1])
        });
        check(vec![a.clone()], |g, v| {
            let r = g.relu(v[0]);
            let m = g.max_pool2(r);
            g.affine(m, 1.5, -0.2)
        });
        check(vec![a, Tensor::scalar(0.7)], |g, v| {
            let p = g.global_avg_pool(v[0]);
            let s = g.scale_by(v[0], v[1]);
            let q = g.global_avg_pool(s);
            g.add(p, q)
        });
    }

    #[test]
    fn dense_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 5], &mut rng);
        let w = rand_tensor(&[4, 10], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let r = rand_tensor(&[5], &mut rng);
        check(vec![x.clone(), w, b, r], |g, v| {
            let xr = g.mul_row(v[0], v[3]);
            let cat = g.concat_cols(xr, v[0]);
            let y = g.linear(cat, v[1], v[2]);
            g.smoothed_cross_entropy(y, &[0, 3, 1], 0.1)
        });
        let target = rand_tensor(&[3, 5], &mut rng);
        check(vec![x], move |g, v| g.l1_loss(v[0], target.clone()));
    }

    #[test]
    fn resample_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 1, 6, 6], &mut rng);
        let map = Arc::new(SparseMap::resize2d(6, 6, 3, 4, super::super::resample::Interp::Bicubic));
        check(vec![x], move |g, v| g.resample(v[0], map.clone(), 2, &[3, 4]));
    }
}
