//! Reverse-mode tape.
//!
//! A [`Tape`] records every op applied to its [`Var`]s. Nodes only keep a
//! backward closure when gradients are enabled and at least one input
//! requires a gradient, so inference and frozen sub-networks cost nothing
//! beyond the forward kernels.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
    watched: bool,
}

pub struct Tape {
    grad_enabled: bool,
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
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

/// Gradients produced by [`Tape::backward`].
#[derive(Default, Debug)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    watched: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient with respect to a leaf created by [`Tape::watch`].
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.watched.get(&v.id)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.watched.is_empty()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            grad_enabled: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape for pure evaluation.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool, param: Option<ParamId>, watched: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            param,
            watched,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false, None, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn watch(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true, None, true)
    }

    /// Reads a parameter. Frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let trainable = store.is_trainable(id);
        self.push_leaf(store.value(id).clone(), trainable, Some(id), false)
    }

    fn push_op<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires = self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires { Some(Box::new(backward)) } else { None },
            requires_grad: requires,
            param: None,
            watched: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagates from a scalar.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                accumulate(out.params.entry(pid), g.clone());
            }
            if node.watched {
                accumulate(out.watched.entry(id), g.clone());
            }
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let pgrads = bw(&g, &needs);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(&needs) {
                    if let (Some(pg), true) = (pg, *need) {
                        grads[p] = Some(match grads[p].take() {
                            Some(acc) => acc.add(&pg),
                            None => pg,
                        });
                    }
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<K>(entry: std::collections::hash_map::Entry<'_, K, Tensor>, g: Tensor) {
    use std::collections::hash_map::Entry;
    match entry {
        Entry::Occupied(mut o) => {
            let sum = o.get().add(&g);
            o.insert(sum);
        }
        Entry::Vacant(v) => {
            v.insert(g);
        }
    }
}

/// Output shape and per-output input offsets for a same-rank broadcast.
fn broadcast_plan(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<u32>, Vec<u32>) {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
    let out: Vec<usize> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect();
    let strides = |s: &[usize]| {
        let mut st = vec![0usize; s.len()];
        let mut acc = 1;
        for i in (0..s.len()).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let sa = strides(a);
    let sb = strides(b);
    let n: usize = out.iter().product();
    let mut ia = Vec::with_capacity(n);
    let mut ib = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..n {
        ia.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum::<usize>() as u32);
        ib.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum::<usize>() as u32);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, ia, ib)
}

fn scatter_sum(g: &[f32], map: &[u32], shape: &[usize]) -> Tensor {
    let mut acc = vec![0.0f32; shape.iter().product()];
    for (v, &i) in g.iter().zip(map) {
        acc[i as usize] += v;
    }
    Tensor::new(shape, acc)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// `(∂out/∂a, ∂out/∂b)` at `(a, b)`.
    fn partials(self, a: f32, b: f32) -> (f32, f32) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dims3()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f32 {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn binary(self, other: Var<'t>, op: BinOp) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        if a.shape() == b.shape() {
            let out = a.zip_map(&b, move |x, y| op.apply(x, y));
            return self.tape.push_op(out, &[self, other], move |g, needs| {
                let ga = needs[0].then(|| match op {
                    BinOp::Add | BinOp::Sub => g.clone(),
                    BinOp::Mul => g.zip_map(&b, |gv, bv| gv * bv),
                    BinOp::Div => g.zip_map(&b, |gv, bv| gv / bv),
                });
                let gb = needs[1].then(|| match op {
                    BinOp::Add => g.clone(),
                    BinOp::Sub => g.scale(-1.0),
                    BinOp::Mul => g.zip_map(&a, |gv, av| gv * av),
                    BinOp::Div => {
                        let t = g.zip_map(&a, |gv, av| gv * av);
                        t.zip_map(&b, |tv, bv| -tv / (bv * bv))
                    }
                });
                vec![ga, gb]
            });
        }
        let (out_shape, ia, ib) = broadcast_plan(a.shape(), b.shape());
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<f32> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| op.apply(ad[i as usize], bd[j as usize]))
            .collect();
        let out = Tensor::new(&out_shape, out);
        self.tape.push_op(out, &[self, other], move |g, needs| {
            let (ad, bd) = (a.data(), b.data());
            let mut ga = vec![0.0f32; g.len()];
            let mut gb = vec![0.0f32; g.len()];
            for (k, gv) in g.data().iter().enumerate() {
                let (pa, pb) = op.partials(ad[ia[k] as usize], bd[ib[k] as usize]);
                ga[k] = gv * pa;
                gb[k] = gv * pb;
            }
            vec![
                needs[0].then(|| scatter_sum(&ga, &ia, a.shape())),
                needs[1].then(|| scatter_sum(&gb, &ib, b.shape())),
            ]
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinOp::Div)
    }

    /// Elementwise op with derivative `df(x, y)` evaluated at input `x` and output `y`.
    fn unary<F, D>(self, f: F, df: D) -> Var<'t>
    where
        F: Fn(f32) -> f32 + Send + Sync,
        D: Fn(f32, f32) -> f32 + Send + Sync + 'static,
    {
        let x = self.value();
        let y = x.map(f);
        let y2 = y.clone();
        self.tape.push_op(y, &[self], move |g, _| {
            let d = x.zip_map(&y2, &df);
            vec![Some(g.zip_map(&d, |a, b| a * b))]
        })
    }

    pub fn scale(self, s: f32) -> Var<'t> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f32) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f32::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f32::ln, |x, _| 1.0 / x)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(
            |x| if x > 20.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn sqr(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f32::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f32::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f32, hi: f32) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Clamp whose gradient passes outside `[lo, hi]` when it would move
    /// `x` back towards the interval.
    pub fn clamp_st(self, lo: f32, hi: f32) -> Var<'t> {
        let x = self.value();
        let y = x.map(move |v| v.clamp(lo, hi));
        self.tape.push_op(y, &[self], move |g, _| {
            let gd = g.zip_map(&x, move |gv, xv| {
                if (xv < lo && gv > 0.0) || (xv > hi && gv < 0.0) {
                    0.0
                } else {
                    gv
                }
            });
            vec![Some(gd)]
        })
    }

    /// `max(x, lo)`; below the bound the gradient still passes when it
    /// would move `x` upwards.
    pub fn lower_bound(self, lo: f32) -> Var<'t> {
        let x = self.value();
        let y = x.map(move |v| v.max(lo));
        self.tape.push_op(y, &[self], move |g, _| {
            let gd = g.zip_map(&x, move |gv, xv| if xv >= lo || gv < 0.0 { gv } else { 0.0 });
            vec![Some(gd)]
        })
    }

    /// Rounding with a straight-through (identity) gradient.
    pub fn round_st(self) -> Var<'t> {
        self.unary(f32::round, |_, _| 1.0)
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s = x.sum() as f32;
        self.tape
            .push_op(Tensor::scalar(s), &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f32;
        self.sum().scale(1.0 / n)
    }

    /// Mean squared error between two equally shaped vars.
    pub fn mse(self, other: Var<'t>) -> Var<'t> {
        self.sub(other).sqr().mean()
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let orig = x.shape().to_vec();
        self.tape
            .push_op(x.reshape(shape), &[self], move |g, _| vec![Some(g.reshape(&orig))])
    }

    /// Slice `[start, start + len)` along axis 0.
    pub fn narrow(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let full = x.shape().to_vec();
        let inner: usize = full[1..].iter().product();
        self.tape.push_op(x.narrow0(start, len), &[self], move |g, _| {
            let mut gd = vec![0.0f32; full.iter().product()];
            gd[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(Tensor::new(&full, gd))]
        })
    }

    /// Top-left spatial crop of `[C,H,W]`.
    pub fn crop(self, h: usize, w: usize) -> Var<'t> {
        let x = self.value();
        let (c, ih, iw) = x.dims3();
        if ih == h && iw == w {
            return self;
        }
        self.tape.push_op(x.crop(h, w), &[self], move |g, _| {
            let mut gd = vec![0.0f32; c * ih * iw];
            for ch in 0..c {
                for y in 0..h {
                    let dst = ch * ih * iw + y * iw;
                    let src = ch * h * w + y * w;
                    gd[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
                }
            }
            vec![Some(Tensor::new(&[c, ih, iw], gd))]
        })
    }

    /// Dense 2-D convolution of a `[Cin,H,W]` input with `[Cout,Cin,k,k]`
    /// weights and zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (cin, h, wd) = x.dims3();
        let ws = w.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [cout,cin,k,k]");
        assert_eq!(ws[1], cin, "conv: input has {cin} channels, weight expects {}", ws[1]);
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(x.data(), w.data(), bv.as_ref().map(|b| b.data()), &geom);
        let out = Tensor::new(&[geom.cout, ho, wo], out);
        let wshape = ws.to_vec();
        let backward = move |g: &Tensor, needs: &[bool]| {
            let need_b = needs.get(2).copied().unwrap_or(false);
            let gr = kernels::conv2d_backward(x.data(), w.data(), g.data(), &geom, needs[0], needs[1], need_b);
            let mut v = vec![
                gr.x.map(|d| Tensor::new(&[cin, h, wd], d)),
                gr.weight.map(|d| Tensor::new(&wshape, d)),
            ];
            if needs.len() == 3 {
                v.push(gr.bias.map(|d| Tensor::new(&[geom.cout], d)));
            }
            v
        };
        match bias {
            Some(b) => self.tape.push_op(out, &[self, weight, b], backward),
            None => self.tape.push_op(out, &[self, weight], backward),
        }
    }

    /// Depthwise "same" convolution with `[C,1,k,k]` weights.
    pub fn depthwise_conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (c, h, wd) = x.dims3();
        let k = w.shape()[2];
        assert_eq!(w.shape(), &[c, 1, k, k], "depthwise weight shape");
        let pad = k / 2;
        let bv = bias.map(|b| b.value());
        let out = kernels::depthwise_forward(x.data(), w.data(), bv.as_ref().map(|b| b.data()), c, h, wd, k, pad);
        let out = Tensor::new(&[c, h, wd], out);
        let backward = move |g: &Tensor, needs: &[bool]| {
            let (gx, gw, gb) = kernels::depthwise_backward(x.data(), w.data(), g.data(), c, h, wd, k, pad);
            let mut v = vec![
                needs[0].then(|| Tensor::new(&[c, h, wd], gx)),
                needs[1].then(|| Tensor::new(&[c, 1, k, k], gw)),
            ];
            if needs.len() == 3 {
                v.push(needs[2].then(|| Tensor::new(&[c], gb)));
            }
            v
        };
        match bias {
            Some(b) => self.tape.push_op(out, &[self, weight, b], backward),
            None => self.tape.push_op(out, &[self, weight], backward),
        }
    }

    /// Sub-pixel rearrangement `[C·r², H, W] → [C, H·r, W·r]`.
    pub fn pixel_shuffle(self, r: usize) -> Var<'t> {
        let x = self.value();
        let (cr, h, w) = x.dims3();
        assert_eq!(cr % (r * r), 0, "pixel_shuffle: {cr} channels not divisible by {}", r * r);
        let c = cr / (r * r);
        let out = Tensor::new(&[c, h * r, w * r], kernels::pixel_shuffle(x.data(), c, h, w, r));
        self.tape.push_op(out, &[self], move |g, _| {
            vec![Some(Tensor::new(&[cr, h, w], kernels::pixel_unshuffle(g.data(), c, h, w, r)))]
        })
    }

    /// Backward bilinear warp of a `[C,H,W]` feature by a `[2,H,W]` flow
    /// (x displacement first) with border replication.
    pub fn warp(self, flow: Var<'t>) -> Var<'t> {
        let f = self.value();
        let fl = flow.value();
        let (c, h, w) = f.dims3();
        assert_eq!(fl.shape(), &[2, h, w], "warp: flow shape must be [2,{h},{w}]");
        let out = Tensor::new(&[c, h, w], kernels::warp_forward(f.data(), fl.data(), c, h, w));
        self.tape.push_op(out, &[self, flow], move |g, needs| {
            let (gf, gfl) = kernels::warp_backward(f.data(), fl.data(), g.data(), c, h, w, needs[0], needs[1]);
            vec![
                gf.map(|d| Tensor::new(&[c, h, w], d)),
                gfl.map(|d| Tensor::new(&[2, h, w], d)),
            ]
        })
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize_bilinear(self, ho: usize, wo: usize) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        if (h, w) == (ho, wo) {
            return self;
        }
        let out = Tensor::new(&[c, ho, wo], kernels::resize_forward(x.data(), c, h, w, ho, wo));
        self.tape.push_op(out, &[self], move |g, _| {
            vec![Some(Tensor::new(&[c, h, w], kernels::resize_backward(g.data(), c, h, w, ho, wo)))]
        })
    }

    /// Batched matmul `[B,M,K] · [B,K,N]`.
    pub fn bmm(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1], "bmm shapes {sa:?} {sb:?}");
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let out = Tensor::new(&[bt, m, n], kernels::bmm(a.data(), b.data(), bt, m, k, n));
        self.tape.push_op(out, &[self, other], move |g, needs| {
            let (ga, gb) = kernels::bmm_backward(a.data(), b.data(), g.data(), bt, m, k, n);
            vec![
                needs[0].then(|| Tensor::new(&[bt, m, k], ga)),
                needs[1].then(|| Tensor::new(&[bt, k, n], gb)),
            ]
        })
    }

    /// Per-element bits `-log2 P(x)` where `P` is the mass of the unit bin
    /// around `x` under Laplace(`mu`, `scale`), floored at `floor`.
    pub fn laplace_bits(self, mu: Var<'t>, scale: Var<'t>, floor: f64) -> Var<'t> {
        let x = self.value();
        let m = mu.value();
        let b = scale.value();
        assert!(x.shape() == m.shape() && x.shape() == b.shape(), "laplace_bits shape mismatch");
        let (bits, du, db) = kernels::laplace_bits(x.data(), m.data(), b.data(), floor);
        let shape = x.shape().to_vec();
        let du = Tensor::new(&shape, du);
        let db = Tensor::new(&shape, db);
        self.tape.push_op(Tensor::new(&shape, bits), &[self, mu, scale], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&du, |a, d| a * d)),
                needs[1].then(|| g.zip_map(&du, |a, d| -a * d)),
                needs[2].then(|| g.zip_map(&db, |a, d| a * d)),
            ]
        })
    }
}

/// Concatenates vars along axis 0.
pub fn concat<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of nothing");
    if parts.len() == 1 {
        return parts[0];
    }
    let tape = parts[0].tape;
    let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().collect();
    let out = Tensor::concat0(&refs);
    let sizes: Vec<(usize, Vec<usize>)> = values
        .iter()
        .map(|v| (v.len(), v.shape().to_vec()))
        .collect();
    tape.push_op(out, parts, move |g, needs| {
        let mut off = 0;
        sizes
            .iter()
            .zip(needs)
            .map(|((len, shape), need)| {
                let r = need.then(|| Tensor::new(shape, g.data()[off..off + len].to_vec()));
                off += len;
                r
            })
            .collect()
    })
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'t> std::ops::Mul<f32> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f32) -> Self::Output {
        self.scale(rhs)
    }
}
