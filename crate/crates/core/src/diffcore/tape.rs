//! Reverse-mode autodiff on a flat operation list.
//!
//! A `Tape` is rebuilt for every forward pass. Each op appends one node
//! holding its output tensor; `backward` sweeps the list in reverse and
//! accumulates gradients into the `Param` leaves. Ops panic on shape
//! mismatch and on any non-finite forward value, so a diverging run fails
//! at the op that produced the bad number instead of ten steps later.
//!
//! Conventions baked into the ops:
//! - image-like tensors are `[C, H, W]`, row batches are `[N, K]`;
//! - `dense` uses a fixed per-element summation order, so evaluating rows
//!   one at a time is bitwise identical to evaluating them batched;
//! - `grid_sample` coordinates are constants: gradients flow into the
//!   sampled feature map only;
//! - `upsample2x` bilinear uses half-pixel centers (weights 3/4 and 1/4)
//!   with edge clamping.

use std::collections::HashMap;

use super::params::{Gradients, ParamStore};
use super::tensor::{Element, Tensor};

/// Handle to a node on a `Tape`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Element> {
    Source,
    Param(String),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Relu(usize),
    Tanh(usize),
    Abs(usize),
    Sqrt(usize),
    Acos(usize),
    Clamp(usize, T, T),
    Sum(usize),
    Mean(usize),
    /// `[C, H, W] -> [H, W]` sum over the channel axis.
    SumChannels(usize),
    Concat(Vec<usize>, usize),
    Dense { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, w: usize, b: Option<usize>, k: usize, stride: usize },
    Upsample2x { x: usize, bilinear: bool },
    GridSample { fm: usize, coords: Tensor<T> },
    GroupNorm { x: usize, weight: usize, bias: usize, groups: usize },
    NormalizeChannels { x: usize },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Source => "source",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Sqrt(_) => "sqrt",
            Op::Acos(_) => "acos",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumChannels(_) => "sum_channels",
            Op::Concat(..) => "concat",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x { .. } => "upsample2x",
            Op::GridSample { .. } => "grid_sample",
            Op::GroupNorm { .. } => "group_norm",
            Op::NormalizeChannels { .. } => "normalize_channels",
        }
    }
}

struct Node<T: Element> {
    op: Op<T>,
    value: Tensor<T>,
    /// Op-specific scratch kept for backward (e.g. per-group mean/rstd).
    saved: Vec<T>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<String, usize>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, saved: Vec<T>) -> Var {
        assert!(value.all_finite(), "non-finite value produced by op {:?}", op.name());
        self.nodes.push(Node { op, value, saved });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Source, value, Vec::new())
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::from_f64(v)))
    }

    /// Leaf tied to a named parameter. Repeated requests for the same name
    /// return the same node so its gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&id) = self.param_nodes.get(name) {
            return Var(id);
        }
        let value = store.get(name).clone();
        let v = self.push(Op::Param(name.to_string()), value, Vec::new());
        self.param_nodes.insert(name.to_string(), v.0);
        v
    }

    fn binary(&mut self, a: Var, b: Var, op: fn(usize, usize) -> Op<T>, f: fn(T, T) -> T) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "shape mismatch in binary op");
        let out = va.zip(vb, f);
        self.push(op(a.0, b.0), out, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, T::add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, T::sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, T::mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div, T::div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.nodes[a.0].value.map(|v| v.mul(c));
        self.push(Op::Scale(a.0, c), out, Vec::new())
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.nodes[a.0].value.map(|v| v.add(c));
        self.push(Op::AddScalar(a.0, c), out, Vec::new())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v.max(T::ZERO));
        self.push(Op::Relu(a.0), out, Vec::new())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v.tanh());
        self.push(Op::Tanh(a.0), out, Vec::new())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v.abs());
        self.push(Op::Abs(a.0), out, Vec::new())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v.sqrt());
        self.push(Op::Sqrt(a.0), out, Vec::new())
    }

    pub fn acos(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v.acos());
        self.push(Op::Acos(a.0), out, Vec::new())
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds out of order");
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.nodes[a.0].value.map(|v| v.max(lo).min(hi));
        self.push(Op::Clamp(a.0, lo, hi), out, Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            acc = acc.add(v);
        }
        self.push(Op::Sum(a.0), Tensor::scalar(acc), Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        assert!(n > 0, "mean of empty tensor");
        let mut acc = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            acc = acc.add(v);
        }
        let out = acc.div(T::from_f64(n as f64));
        self.push(Op::Mean(a.0), Tensor::scalar(out), Vec::new())
    }

    /// `[C, H, W] -> [H, W]`, summing over channels in index order.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let sh = va.shape();
        assert_eq!(sh.len(), 3, "sum_channels expects [C, H, W]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let mut out: Tensor<T> = Tensor::zeros(&[h, w]);
        let hw = h * w;
        for ci in 0..c {
            let plane = &va.data()[ci * hw..(ci + 1) * hw];
            for (o, &v) in out.data_mut().iter_mut().zip(plane) {
                *o = o.add(v);
            }
        }
        self.push(Op::SumChannels(a.0), out, Vec::new())
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        assert!(axis < first.len(), "concat axis out of range");
        let mut axis_total = 0usize;
        for p in parts {
            let sh = self.nodes[p.0].value.shape();
            assert_eq!(sh.len(), first.len(), "concat rank mismatch");
            for d in 0..first.len() {
                if d != axis {
                    assert_eq!(sh[d], first[d], "concat extent mismatch off-axis");
                }
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::ZERO; outer * axis_total * inner];
        let mut offset = 0usize;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let ax = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * ax * inner..(o + 1) * ax * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + ax * inner].copy_from_slice(src);
            }
            offset += ax;
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.push(Op::Concat(ids, axis), Tensor::new(out_shape, data), Vec::new())
    }

    /// `x: [N, K] @ w: [K, M] (+ b: [M]) -> [N, M]`.
    ///
    /// Forward is a plain loop with a fixed reduction order; no BLAS here,
    /// so per-row results do not depend on the batch they ride in.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.nodes[x.0].value.shape();
        let ws = self.nodes[w.0].value.shape();
        assert_eq!(xs.len(), 2, "dense input must be [N, K]");
        assert_eq!(ws.len(), 2, "dense weight must be [K, M]");
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        assert_eq!(xs[1], ws[0], "dense inner extent mismatch");
        if let Some(bv) = b {
            assert_eq!(self.nodes[bv.0].value.shape(), &[m], "dense bias must be [M]");
        }
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = match b {
                    Some(bv) => self.nodes[bv.0].value.data()[j],
                    None => T::ZERO,
                };
                for l in 0..k {
                    acc = acc.add(xd[i * k + l].mul(wd[l * m + j]));
                }
                out[i * m + j] = acc;
            }
        }
        self.push(
            Op::Dense { x: x.0, w: w.0, b: b.map(|v| v.0) },
            Tensor::new(vec![n, m], out),
            Vec::new(),
        )
    }

    /// `x: [C, H, W]` with `w: [O, C, k, k]`, zero padding `k/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, k, k]");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        assert!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        assert!(k % 2 == 1, "conv2d kernel must be odd");
        let pad = k / 2;
        let (ho, wo) = conv_out_hw(h, wd, k, stride, pad);
        let cols = im2col(&self.nodes[x.0].value, k, stride, pad);
        let ckk = c * k * k;
        let mut out = vec![T::ZERO; o * ho * wo];
        T::gemm(
            o,
            ckk,
            ho * wo,
            T::ONE,
            self.nodes[w.0].value.data(),
            cols.data(),
            T::ZERO,
            &mut out,
        );
        if let Some(bv) = b {
            let bd = self.nodes[bv.0].value.data();
            assert_eq!(bd.len(), o, "conv2d bias must be [O]");
            for oc in 0..o {
                for v in &mut out[oc * ho * wo..(oc + 1) * ho * wo] {
                    *v = v.add(bd[oc]);
                }
            }
        }
        self.push(
            Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), k, stride },
            Tensor::new(vec![o, ho, wo], out),
            Vec::new(),
        )
    }

    /// Doubles H and W. Bilinear uses half-pixel sample centers, so interior
    /// weights are 3/4 and 1/4 and borders clamp to the edge texel.
    pub fn upsample2x(&mut self, x: Var, bilinear: bool) -> Var {
        let xs = self.nodes[x.0].value.shape();
        assert_eq!(xs.len(), 3, "upsample2x input must be [C, H, W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (h * 2, w * 2);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::ZERO; c * ho * wo];
        if bilinear {
            let w_hi = T::from_f64(0.75);
            let w_lo = T::from_f64(0.25);
            for ci in 0..c {
                for oy in 0..ho {
                    let (y0, y1, wy0, wy1) = up2_taps(oy, h, w_hi, w_lo);
                    for ox in 0..wo {
                        let (x0, x1, wx0, wx1) = up2_taps(ox, w, w_hi, w_lo);
                        let base = ci * h * w;
                        let v = xd[base + y0 * w + x0]
                            .mul(wy0.mul(wx0))
                            .add(xd[base + y0 * w + x1].mul(wy0.mul(wx1)))
                            .add(xd[base + y1 * w + x0].mul(wy1.mul(wx0)))
                            .add(xd[base + y1 * w + x1].mul(wy1.mul(wx1)));
                        out[(ci * ho + oy) * wo + ox] = v;
                    }
                }
            }
        } else {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[(ci * ho + oy) * wo + ox] = xd[(ci * h + oy / 2) * w + ox / 2];
                    }
                }
            }
        }
        self.push(Op::Upsample2x { x: x.0, bilinear }, Tensor::new(vec![c, ho, wo], out), Vec::new())
    }

    /// Bilinear lookup of `fm: [C, H, W]` at constant continuous pixel
    /// coordinates `coords: [N, 2]` in (x, y) order; integer coordinates hit
    /// texel centers and out-of-range lookups clamp to the border.
    /// Output is `[N, C]`; gradients flow into `fm` only.
    pub fn grid_sample(&mut self, fm: Var, coords: &Tensor<T>) -> Var {
        let fs = self.nodes[fm.0].value.shape();
        assert_eq!(fs.len(), 3, "grid_sample feature map must be [C, H, W]");
        let cs = coords.shape();
        assert_eq!(cs.len(), 2, "grid_sample coords must be [N, 2]");
        assert_eq!(cs[1], 2, "grid_sample coords must be [N, 2]");
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let n = cs[0];
        let fd = self.nodes[fm.0].value.data();
        let mut out = vec![T::ZERO; n * c];
        for i in 0..n {
            let t = bilinear_taps(coords.data()[2 * i], coords.data()[2 * i + 1], w, h);
            for ci in 0..c {
                let base = ci * h * w;
                let v = fd[base + t.y0 * w + t.x0]
                    .mul(t.w00)
                    .add(fd[base + t.y0 * w + t.x1].mul(t.w01))
                    .add(fd[base + t.y1 * w + t.x0].mul(t.w10))
                    .add(fd[base + t.y1 * w + t.x1].mul(t.w11));
                out[i * c + ci] = v;
            }
        }
        self.push(
            Op::GridSample { fm: fm.0, coords: coords.clone() },
            Tensor::new(vec![n, c], out),
            Vec::new(),
        )
    }

    /// Group normalization over `[C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, weight: Var, bias: Var, groups: usize, eps: f64) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3, "group_norm input must be [C, H, W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(groups > 0 && c % groups == 0, "groups must divide channels");
        assert_eq!(self.nodes[weight.0].value.shape(), &[c], "group_norm weight must be [C]");
        assert_eq!(self.nodes[bias.0].value.shape(), &[c], "group_norm bias must be [C]");
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let epst = T::from_f64(eps);
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[weight.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut out = vec![T::ZERO; c * h * w];
        let mut saved = Vec::with_capacity(2 * groups);
        let inv_n = T::from_f64(1.0 / gsize as f64);
        for g in 0..groups {
            let seg = &xd[g * gsize..(g + 1) * gsize];
            let mut mean = T::ZERO;
            for &v in seg {
                mean = mean.add(v);
            }
            mean = mean.mul(inv_n);
            let mut var = T::ZERO;
            for &v in seg {
                let d = v.sub(mean);
                var = var.add(d.mul(d));
            }
            var = var.mul(inv_n);
            let rstd = T::ONE.div(var.add(epst).sqrt());
            saved.push(mean);
            saved.push(rstd);
            for (j, &v) in seg.iter().enumerate() {
                let flat = g * gsize + j;
                let ch = flat / (h * w);
                out[flat] = v.sub(mean).mul(rstd).mul(wd[ch]).add(bd[ch]);
            }
        }
        self.push(
            Op::GroupNorm { x: x.0, weight: weight.0, bias: bias.0, groups },
            Tensor::new(xs, out),
            saved,
        )
    }

    /// Scales each pixel's channel vector of `[C, H, W]` to unit length,
    /// with `eps` inside the square root to keep zero vectors finite.
    pub fn normalize_channels(&mut self, x: Var, eps: f64) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3, "normalize_channels input must be [C, H, W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let epst = T::from_f64(eps);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::ZERO; c * hw];
        let mut saved = vec![T::ZERO; hw];
        for p in 0..hw {
            let mut sq = epst;
            for ci in 0..c {
                let v = xd[ci * hw + p];
                sq = sq.add(v.mul(v));
            }
            let norm = sq.sqrt();
            saved[p] = norm;
            for ci in 0..c {
                out[ci * hw + p] = xd[ci * hw + p].div(norm);
            }
        }
        self.push(Op::NormalizeChannels { x: x.0 }, Tensor::new(xs, out), saved)
    }

    /// Reverse sweep from a scalar root. Returns gradients for every named
    /// parameter reachable from the root; untouched parameters are absent.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert!(self.nodes[root.0].value.is_scalar(), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(T::ONE));
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Source => {}
                Op::Param(name) => out.push((name.clone(), g)),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate_map(&mut grads, *b, &g, |gv| gv.neg());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accumulate(&mut grads, *a, &g.zip(vb, T::mul));
                    accumulate(&mut grads, *b, &g.zip(va, T::mul));
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, &g.zip(vb, T::div));
                    let y = &node.value;
                    let gb = g.zip(&y.zip(vb, T::div), |gv, ydb| gv.mul(ydb).neg());
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate_map(&mut grads, *a, &g, move |gv| gv.mul(c));
                }
                Op::AddScalar(a, _) => accumulate(&mut grads, *a, &g),
                Op::Relu(a) => {
                    let ga = g.zip(&self.nodes[*a].value, |gv, xv| {
                        if xv > T::ZERO {
                            gv
                        } else {
                            T::ZERO
                        }
                    });
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip(&node.value, |gv, yv| gv.mul(T::ONE.sub(yv.mul(yv))));
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip(&self.nodes[*a].value, |gv, xv| {
                        if xv > T::ZERO {
                            gv
                        } else if xv < T::ZERO {
                            gv.neg()
                        } else {
                            T::ZERO
                        }
                    });
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sqrt(a) => {
                    let half = T::from_f64(0.5);
                    let ga = g.zip(&node.value, |gv, yv| gv.mul(half).div(yv));
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Acos(a) => {
                    let ga = g.zip(&self.nodes[*a].value, |gv, xv| {
                        gv.neg().div(T::ONE.sub(xv.mul(xv)).sqrt())
                    });
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip(&self.nodes[*a].value, move |gv, xv| {
                        if xv > lo && xv < hi {
                            gv
                        } else {
                            T::ZERO
                        }
                    });
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    let ga = Tensor::full(self.nodes[*a].value.shape(), gv);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.numel();
                    let gv = g.item().div(T::from_f64(n as f64));
                    let ga = Tensor::full(self.nodes[*a].value.shape(), gv);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SumChannels(a) => {
                    let sh = self.nodes[*a].value.shape();
                    let (c, h, w) = (sh[0], sh[1], sh[2]);
                    let mut ga = Tensor::zeros(sh);
                    let hw = h * w;
                    for ci in 0..c {
                        ga.data_mut()[ci * hw..(ci + 1) * hw].copy_from_slice(g.data());
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Concat(parts, axis) => {
                    let axis = *axis;
                    let gsh = node.value.shape();
                    let outer: usize = gsh[..axis].iter().product();
                    let inner: usize = gsh[axis + 1..].iter().product();
                    let total = gsh[axis];
                    let mut offset = 0usize;
                    for &p in parts {
                        let psh = self.nodes[p].value.shape();
                        let ax = psh[axis];
                        let mut gp = Tensor::zeros(psh);
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            let dst = &mut gp.data_mut()[o * ax * inner..(o + 1) * ax * inner];
                            dst.copy_from_slice(&g.data()[src_start..src_start + ax * inner]);
                        }
                        accumulate(&mut grads, p, &gp);
                        offset += ax;
                    }
                }
                Op::Dense { x, w, b } => {
                    let xs = self.nodes[*x].value.shape();
                    let ws = self.nodes[*w].value.shape();
                    let (n, k, m) = (xs[0], xs[1], ws[1]);
                    let xd = self.nodes[*x].value.data();
                    let wdat = self.nodes[*w].value.data();
                    let gd = g.data();
                    // gx = g . w^T
                    let wt = transpose(wdat, k, m);
                    let mut gx = vec![T::ZERO; n * k];
                    T::gemm(n, m, k, T::ONE, gd, &wt, T::ZERO, &mut gx);
                    accumulate(&mut grads, *x, &Tensor::new(vec![n, k], gx));
                    // gw = x^T . g
                    let xt = transpose(xd, n, k);
                    let mut gw = vec![T::ZERO; k * m];
                    T::gemm(k, n, m, T::ONE, &xt, gd, T::ZERO, &mut gw);
                    accumulate(&mut grads, *w, &Tensor::new(vec![k, m], gw));
                    if let Some(b) = b {
                        let mut gb = vec![T::ZERO; m];
                        for i in 0..n {
                            for j in 0..m {
                                gb[j] = gb[j].add(gd[i * m + j]);
                            }
                        }
                        accumulate(&mut grads, *b, &Tensor::new(vec![m], gb));
                    }
                }
                Op::Conv2d { x, w, b, k, stride } => {
                    let xs = self.nodes[*x].value.shape();
                    let ws = self.nodes[*w].value.shape();
                    let (c, h, wd) = (xs[0], xs[1], xs[2]);
                    let o = ws[0];
                    let pad = k / 2;
                    let (ho, wo) = conv_out_hw(h, wd, *k, *stride, pad);
                    let ckk = c * k * k;
                    let hw_out = ho * wo;
                    let gd = g.data();
                    if let Some(b) = b {
                        let mut gb = vec![T::ZERO; o];
                        for oc in 0..o {
                            for &v in &gd[oc * hw_out..(oc + 1) * hw_out] {
                                gb[oc] = gb[oc].add(v);
                            }
                        }
                        accumulate(&mut grads, *b, &Tensor::new(vec![o], gb));
                    }
                    // Recompute the unfolded input instead of saving it.
                    let cols = im2col(&self.nodes[*x].value, *k, *stride, pad);
                    let colst = transpose(cols.data(), ckk, hw_out);
                    let mut gw = vec![T::ZERO; o * ckk];
                    T::gemm(o, hw_out, ckk, T::ONE, gd, &colst, T::ZERO, &mut gw);
                    accumulate(&mut grads, *w, &Tensor::new(ws.to_vec(), gw));
                    let wt = transpose(self.nodes[*w].value.data(), o, ckk);
                    let mut gcols = vec![T::ZERO; ckk * hw_out];
                    T::gemm(ckk, o, hw_out, T::ONE, &wt, gd, T::ZERO, &mut gcols);
                    let gx = col2im(&gcols, c, h, wd, *k, *stride, pad);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Upsample2x { x, bilinear } => {
                    let xs = self.nodes[*x].value.shape();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (ho, wo) = (h * 2, w * 2);
                    let mut gx: Tensor<T> = Tensor::zeros(xs);
                    let gd = g.data();
                    let gxd = gx.data_mut();
                    if *bilinear {
                        let w_hi = T::from_f64(0.75);
                        let w_lo = T::from_f64(0.25);
                        for ci in 0..c {
                            for oy in 0..ho {
                                let (y0, y1, wy0, wy1) = up2_taps(oy, h, w_hi, w_lo);
                                for ox in 0..wo {
                                    let (x0, x1, wx0, wx1) = up2_taps(ox, w, w_hi, w_lo);
                                    let gv = gd[(ci * ho + oy) * wo + ox];
                                    let base = ci * h * w;
                                    gxd[base + y0 * w + x0] =
                                        gxd[base + y0 * w + x0].add(gv.mul(wy0.mul(wx0)));
                                    gxd[base + y0 * w + x1] =
                                        gxd[base + y0 * w + x1].add(gv.mul(wy0.mul(wx1)));
                                    gxd[base + y1 * w + x0] =
                                        gxd[base + y1 * w + x0].add(gv.mul(wy1.mul(wx0)));
                                    gxd[base + y1 * w + x1] =
                                        gxd[base + y1 * w + x1].add(gv.mul(wy1.mul(wx1)));
                                }
                            }
                        }
                    } else {
                        for ci in 0..c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let src = (ci * h + oy / 2) * w + ox / 2;
                                    gxd[src] = gxd[src].add(gd[(ci * ho + oy) * wo + ox]);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::GridSample { fm, coords } => {
                    let fs = self.nodes[*fm].value.shape();
                    let (c, h, w) = (fs[0], fs[1], fs[2]);
                    let n = coords.shape()[0];
                    let mut gf: Tensor<T> = Tensor::zeros(fs);
                    let gd = g.data();
                    let gfd = gf.data_mut();
                    for i in 0..n {
                        let t = bilinear_taps(coords.data()[2 * i], coords.data()[2 * i + 1], w, h);
                        for ci in 0..c {
                            let base = ci * h * w;
                            let gv = gd[i * c + ci];
                            gfd[base + t.y0 * w + t.x0] =
                                gfd[base + t.y0 * w + t.x0].add(gv.mul(t.w00));
                            gfd[base + t.y0 * w + t.x1] =
                                gfd[base + t.y0 * w + t.x1].add(gv.mul(t.w01));
                            gfd[base + t.y1 * w + t.x0] =
                                gfd[base + t.y1 * w + t.x0].add(gv.mul(t.w10));
                            gfd[base + t.y1 * w + t.x1] =
                                gfd[base + t.y1 * w + t.x1].add(gv.mul(t.w11));
                        }
                    }
                    accumulate(&mut grads, *fm, &gf);
                }
                Op::GroupNorm { x, weight, bias, groups } => {
                    let xs = self.nodes[*x].value.shape();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let cpg = c / groups;
                    let gsize = cpg * h * w;
                    let hw = h * w;
                    let xd = self.nodes[*x].value.data();
                    let wd = self.nodes[*weight].value.data();
                    let gd = g.data();
                    let mut gx = Tensor::zeros(xs);
                    let mut gw = vec![T::ZERO; c];
                    let mut gb = vec![T::ZERO; c];
                    let inv_n = T::from_f64(1.0 / gsize as f64);
                    for gi in 0..*groups {
                        let mean = node.saved[2 * gi];
                        let rstd = node.saved[2 * gi + 1];
                        let start = gi * gsize;
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for j in 0..gsize {
                            let flat = start + j;
                            let ch = flat / hw;
                            let xhat = xd[flat].sub(mean).mul(rstd);
                            let dxhat = gd[flat].mul(wd[ch]);
                            s1 = s1.add(dxhat);
                            s2 = s2.add(dxhat.mul(xhat));
                            gw[ch] = gw[ch].add(gd[flat].mul(xhat));
                            gb[ch] = gb[ch].add(gd[flat]);
                        }
                        let gxd = gx.data_mut();
                        for j in 0..gsize {
                            let flat = start + j;
                            let ch = flat / hw;
                            let xhat = xd[flat].sub(mean).mul(rstd);
                            let dxhat = gd[flat].mul(wd[ch]);
                            let v = dxhat.sub(s1.mul(inv_n)).sub(xhat.mul(s2).mul(inv_n));
                            gxd[flat] = v.mul(rstd);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *weight, &Tensor::new(vec![c], gw));
                    accumulate(&mut grads, *bias, &Tensor::new(vec![c], gb));
                }
                Op::NormalizeChannels { x } => {
                    let xs = self.nodes[*x].value.shape();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let hw = h * w;
                    let yd = node.value.data();
                    let gd = g.data();
                    let mut gx = Tensor::zeros(xs);
                    let gxd = gx.data_mut();
                    for p in 0..hw {
                        let norm = node.saved[p];
                        let mut dot = T::ZERO;
                        for ci in 0..c {
                            dot = dot.add(yd[ci * hw + p].mul(gd[ci * hw + p]));
                        }
                        for ci in 0..c {
                            let idx = ci * hw + p;
                            gxd[idx] = gd[idx].sub(yd[idx].mul(dot)).div(norm);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
            }
        }
        Gradients::from_entries(out)
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], idx: usize, g: &Tensor<T>) {
    match &mut grads[idx] {
        Some(acc) => {
            assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch");
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = a.add(b);
            }
        }
        slot => *slot = Some(g.clone()),
    }
}

fn accumulate_map<T: Element>(
    grads: &mut [Option<Tensor<T>>],
    idx: usize,
    g: &Tensor<T>,
    f: impl Fn(T) -> T,
) {
    let mapped = g.map(f);
    accumulate(grads, idx, &mapped);
}

fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Unfold `[C, H, W]` into `[C*k*k, Ho*Wo]` with zero padding.
fn im2col<T: Element>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Tensor<T> {
    let sh = x.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let (ho, wo) = conv_out_hw(h, w, k, stride, pad);
    let mut out = vec![T::ZERO; c * k * k * ho * wo];
    let xd = x.data();
    let hw_out = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[row * hw_out + oy * wo + ox] =
                            xd[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * k * k, hw_out], out)
}

/// Adjoint of `im2col`: scatter-add columns back into `[C, H, W]`.
fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (ho, wo) = conv_out_hw(h, w, k, stride, pad);
    let hw_out = ho * wo;
    let mut out: Tensor<T> = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (ci * h + iy as usize) * w + ix as usize;
                        od[dst] = od[dst].add(cols[row * hw_out + oy * wo + ox]);
                    }
                }
            }
        }
    }
    out
}

/// Source taps for one output index of a 2x half-pixel bilinear upsample.
fn up2_taps<T: Element>(o: usize, len: usize, w_hi: T, w_lo: T) -> (usize, usize, T, T) {
    if o % 2 == 0 {
        let j = o / 2;
        let lo = j.saturating_sub(1);
        (lo, j, w_lo, w_hi)
    } else {
        let j = o / 2;
        let hi = (j + 1).min(len - 1);
        (j, hi, w_hi, w_lo)
    }
}

struct Taps<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    w00: T,
    w01: T,
    w10: T,
    w11: T,
}

fn bilinear_taps<T: Element>(x: T, y: T, w: usize, h: usize) -> Taps<T> {
    let xf = x.to_f64();
    let yf = y.to_f64();
    let x0f = xf.floor();
    let y0f = yf.floor();
    let fx = T::from_f64(xf - x0f);
    let fy = T::from_f64(yf - y0f);
    let clampi = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
    let x0 = clampi(x0f, w);
    let x1 = clampi(x0f + 1.0, w);
    let y0 = clampi(y0f, h);
    let y1 = clampi(y0f + 1.0, h);
    let one = T::ONE;
    Taps {
        x0,
        x1,
        y0,
        y1,
        w00: one.sub(fy).mul(one.sub(fx)),
        w01: one.sub(fy).mul(fx),
        w10: fy.mul(one.sub(fx)),
        w11: fy.mul(fx),
    }
}
