//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every network function is written once against [`Tape`]. Training records
//! the graph and calls [`Tape::backward`]; inference uses
//! [`Tape::inference`], which skips all gradient bookkeeping.

use crate::conv::{col2im, im2col, ConvGeom};
use crate::real::{matmul, normal_cdf, normal_pdf, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Square,
    Sqrt,
    Rsqrt,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Silu,
    LeakyRelu(f64),
    Relu,
    Abs,
    NormalCdf,
    Powf(f64),
}

impl Unary {
    fn forward<T: Real>(self, x: T) -> T {
        match self {
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Rsqrt => x.sqrt().recip(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::LeakyRelu(a) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(a)
                }
            }
            Unary::Relu => x.max(T::zero()),
            Unary::Abs => x.abs(),
            Unary::NormalCdf => normal_cdf(x),
            Unary::Powf(p) => {
                if x == T::zero() {
                    T::zero()
                } else {
                    x.powf(T::lit(p))
                }
            }
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Square => T::lit(2.0) * x,
            Unary::Sqrt => T::lit(0.5) / y,
            Unary::Rsqrt => T::lit(-0.5) * y * y * y,
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Tanh => one - y * y,
            Unary::Sigmoid => y * (one - y),
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            Unary::LeakyRelu(a) => {
                if x > T::zero() {
                    one
                } else {
                    T::lit(a)
                }
            }
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Abs => {
                if x > T::zero() {
                    one
                } else if x < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            Unary::NormalCdf => normal_pdf(x),
            Unary::Powf(p) => {
                if x == T::zero() {
                    T::zero()
                } else {
                    T::lit(p) * y / x
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Copy, Debug)]
enum Axis {
    Rows,
    Cols,
}

enum Op<T> {
    Leaf,
    Unary(usize, Unary),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Offset(usize),
    /// `x[i] + b[i / group]`
    AddGroup(usize, usize),
    /// `x[i] * b[i / group]`
    MulGroup(usize, usize),
    BatchMatmul { a: usize, x: usize, batch: usize, m: usize, k: usize, n: usize },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, cout: usize, cols: Option<Vec<T>> },
    ConvT { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, cin: usize },
    Upsample { x: usize, factor: usize },
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Sum(usize),
    Mean(usize),
    LowerBound { x: usize, bound: T },
    AvgPool2(usize),
    Blur { x: usize, taps: Vec<T>, axis: Axis },
    Reshape(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), record: true }
    }

    /// A tape that evaluates values only.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar");
        t.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let requires_grad = self.record && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A differentiable leaf (a parameter).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.record;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let v = self.value(x).map(|a| f.forward(a));
        self.push(v, Op::Unary(x.0, f), &[x.0])
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn rsqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Rsqrt)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn normal_cdf(&mut self, x: Var) -> Var {
        self.unary(x, Unary::NormalCdf)
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Unary::Powf(p))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x.0, c), &[x.0])
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::Offset(x.0), &[x.0])
    }

    fn group_size(&self, x: Var, b: Var) -> usize {
        let (nx, nb) = (self.value(x).len(), self.value(b).len());
        assert!(nb > 0 && nx % nb == 0, "group broadcast: {nb} does not divide {nx}");
        nx / nb
    }

    /// Adds `b[j]` to each consecutive block `j` of `x` (per-channel bias).
    pub fn add_group(&mut self, x: Var, b: Var) -> Var {
        let g = self.group_size(x, b);
        let bv = self.value(b).data();
        let mut v = self.value(x).clone();
        for (chunk, &bj) in v.data_mut().chunks_mut(g).zip(bv) {
            chunk.iter_mut().for_each(|e| *e += bj);
        }
        self.push(v, Op::AddGroup(x.0, b.0), &[x.0, b.0])
    }

    /// Multiplies each consecutive block `j` of `x` by `b[j]`.
    pub fn mul_group(&mut self, x: Var, b: Var) -> Var {
        let g = self.group_size(x, b);
        let bv = self.value(b).data();
        let mut v = self.value(x).clone();
        for (chunk, &bj) in v.data_mut().chunks_mut(g).zip(bv) {
            chunk.iter_mut().for_each(|e| *e *= bj);
        }
        self.push(v, Op::MulGroup(x.0, b.0), &[x.0, b.0])
    }

    /// `a: [B, M, K]`, `x: [B, K, N]` -> `[B, M, N]`.
    pub fn batch_matmul(&mut self, a: Var, x: Var) -> Var {
        let (sa, sx) = (self.shape(a).to_vec(), self.shape(x).to_vec());
        assert!(sa.len() == 3 && sx.len() == 3 && sa[0] == sx[0] && sa[2] == sx[1], "batch_matmul shapes {sa:?} {sx:?}");
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sx[2]);
        let mut out = Tensor::zeros(&[batch, m, n]);
        {
            let (av, xv) = (self.value(a).data(), self.value(x).data());
            for (bi, o) in out.data_mut().chunks_mut(m * n).enumerate() {
                matmul(m, k, n, &av[bi * m * k..(bi + 1) * m * k], false, &xv[bi * k * n..(bi + 1) * k * n], false, o, false);
            }
        }
        self.push(out, Op::BatchMatmul { a: a.0, x: x.0, batch, m, k, n }, &[a.0, x.0])
    }

    /// 2-D convolution. `x: (Cin, H, W)`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[1] == cin && ws[2] == ws[3], "conv weight {ws:?} vs input channels {cin}");
        let (cout, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad);
        let np = geom.out_pixels();
        let mut out = Tensor::zeros(&[cout, geom.ho, geom.wo]);
        let cols = if geom.is_pointwise() {
            matmul(cout, cin, np, self.value(w).data(), false, self.value(x).data(), false, out.data_mut(), false);
            None
        } else {
            let mut cols = vec![T::zero(); geom.col_rows() * np];
            im2col(&geom, self.value(x).data(), &mut cols);
            matmul(cout, geom.col_rows(), np, self.value(w).data(), false, &cols, false, out.data_mut(), false);
            Some(cols)
        };
        if let Some(b) = b {
            add_bias(out.data_mut(), self.value(b).data(), np);
        }
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        let keep = self.record && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let cols = if keep { cols } else { None };
        self.push(out, Op::Conv { x: x.0, w: w.0, b: b.map(|b| b.0), geom, cout, cols }, &parents)
    }

    /// Transposed convolution (the adjoint of a stride-`s` convolution).
    /// `x: (Cin, H, W)`, `w: [Cin, Cout, k, k]`; output spatial size
    /// `(H - 1) * s - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, out_pad: usize) -> Var {
        let (cin, hi, wi) = self.value(x).dims3();
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[0] == cin && ws[2] == ws[3], "deconv weight {ws:?} vs input channels {cin}");
        let (cout, k) = (ws[1], ws[2]);
        let ho = (hi - 1) * stride + k + out_pad - 2 * pad;
        let wo = (wi - 1) * stride + k + out_pad - 2 * pad;
        let geom = ConvGeom::new(cout, ho, wo, k, stride, pad);
        assert_eq!((geom.ho, geom.wo), (hi, wi), "transposed conv geometry mismatch");
        let np = hi * wi;
        let mut cols = vec![T::zero(); geom.col_rows() * np];
        matmul(geom.col_rows(), cin, np, self.value(w).data(), true, self.value(x).data(), false, &mut cols, false);
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        col2im(&geom, &cols, out.data_mut());
        if let Some(b) = b {
            add_bias(out.data_mut(), self.value(b).data(), ho * wo);
        }
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(out, Op::ConvT { x: x.0, w: w.0, b: b.map(|b| b.0), geom, cin }, &parents)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        if factor == 1 {
            return x;
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for ch in 0..c {
                for y in 0..ho {
                    let src = &xv[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                    let dst = &mut o[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        *d = src[xo / factor];
                    }
                }
            }
        }
        self.push(out, Op::Upsample { x: x.0, factor }, &[x.0])
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rest = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(&s[1..], &rest[..], "concat trailing dims mismatch");
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(rest);
        let out = Tensor::new(&shape, data).expect("concat size");
        let parents: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(out, Op::Concat(parents.clone()), &parents)
    }

    /// Leading-axis slice `[start, start + len)`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[0], "slice out of range");
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let out = Tensor::new(&shape, data).expect("slice size");
        self.push(out, Op::Slice { x: x.0, start }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x.0), &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    /// `max(x, bound)` whose gradient also passes below the bound whenever
    /// it points upward (descent would raise `x`).
    pub fn lower_bound(&mut self, x: Var, bound: f64) -> Var {
        let bound = T::lit(bound);
        let v = self.value(x).map(|a| a.max(bound));
        self.push(v, Op::LowerBound { x: x.0, bound }, &[x.0])
    }

    /// 2x2 average pooling; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            let q = T::lit(0.25);
            for ch in 0..c {
                for y in 0..ho {
                    for xo in 0..wo {
                        let base = (ch * h + 2 * y) * w + 2 * xo;
                        o[(ch * ho + y) * wo + xo] = (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]) * q;
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2(x.0), &[x.0])
    }

    /// Separable, per-channel, unpadded ("valid") correlation with `taps`.
    pub fn blur_valid(&mut self, x: Var, taps: &[f64]) -> Var {
        let taps: Vec<T> = taps.iter().map(|&t| T::lit(t)).collect();
        let rows = self.blur_axis(x, taps.clone(), Axis::Rows);
        self.blur_axis(rows, taps, Axis::Cols)
    }

    fn blur_axis(&mut self, x: Var, taps: Vec<T>, axis: Axis) -> Var {
        let out = blur_forward(self.value(x), &taps, axis);
        self.push(out, Op::Blur { x: x.0, taps, axis }, &[x.0])
    }

    /// Reverse pass from scalar `out`.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert!(self.record, "backward on an inference tape");
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, f) => {
                let xv = &self.nodes[*x].value;
                let mut d = g.clone();
                for ((dv, &a), &b) in d.data_mut().iter_mut().zip(xv.data()).zip(y.data()) {
                    *dv *= f.derivative(a, b);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(&self.nodes[*b].value, |u, v| u * v));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(&self.nodes[*a].value, |u, v| u * v));
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |u, v| u / v));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -y / b
                    let mut d = g.zip_map(y, |u, v| -u * v);
                    for (dv, &bb) in d.data_mut().iter_mut().zip(bv.data()) {
                        *dv /= bb;
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Offset(x) | Op::Reshape(x) => {
                let d = Tensor::new(self.nodes[*x].value.shape(), g.data().to_vec()).expect("same size");
                self.accumulate(grads, *x, d);
            }
            Op::AddGroup(x, b) => {
                let bl = self.nodes[*b].value.len();
                let group = g.len() / bl;
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let data: Vec<T> = g.data().chunks(group).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, Tensor::new(self.nodes[*b].value.shape(), data).expect("bias grad"));
                }
            }
            Op::MulGroup(x, b) => {
                let bt = &self.nodes[*b].value;
                let group = g.len() / bt.len();
                if self.needs(*x) {
                    let mut d = g.clone();
                    for (chunk, &bj) in d.data_mut().chunks_mut(group).zip(bt.data()) {
                        chunk.iter_mut().for_each(|e| *e *= bj);
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.needs(*b) {
                    let xv = self.nodes[*x].value.data();
                    let data: Vec<T> = g
                        .data()
                        .chunks(group)
                        .zip(xv.chunks(group))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&u, &v)| u * v).sum())
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(bt.shape(), data).expect("scale grad"));
                }
            }
            Op::BatchMatmul { a, x, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.nodes[*a].value.data();
                let xv = self.nodes[*x].value.data();
                if self.needs(*a) {
                    let mut d = Tensor::zeros(self.nodes[*a].value.shape());
                    for b in 0..batch {
                        let gb = &g.data()[b * m * n..(b + 1) * m * n];
                        let xb = &xv[b * k * n..(b + 1) * k * n];
                        matmul(m, n, k, gb, false, xb, true, &mut d.data_mut()[b * m * k..(b + 1) * m * k], false);
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*x) {
                    let mut d = Tensor::zeros(self.nodes[*x].value.shape());
                    for b in 0..batch {
                        let gb = &g.data()[b * m * n..(b + 1) * m * n];
                        let ab = &av[b * m * k..(b + 1) * m * k];
                        matmul(k, m, n, ab, true, gb, false, &mut d.data_mut()[b * k * n..(b + 1) * k * n], false);
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Conv { x, w, b, geom, cout, cols } => {
                let np = geom.out_pixels();
                let kk = geom.col_rows();
                let cols_data: &[T] = match cols {
                    Some(c) => c,
                    None => self.nodes[*x].value.data(),
                };
                if self.needs(*w) {
                    let mut d = Tensor::zeros(self.nodes[*w].value.shape());
                    matmul(*cout, np, kk, g.data(), false, cols_data, true, d.data_mut(), false);
                    self.accumulate(grads, *w, d);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accumulate(grads, *b, bias_grad(g, *cout, np));
                    }
                }
                if self.needs(*x) {
                    let wv = self.nodes[*w].value.data();
                    let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                    if geom.is_pointwise() {
                        matmul(kk, *cout, np, wv, true, g.data(), false, dx.data_mut(), false);
                    } else {
                        let mut dcols = vec![T::zero(); kk * np];
                        matmul(kk, *cout, np, wv, true, g.data(), false, &mut dcols, false);
                        col2im(geom, &dcols, dx.data_mut());
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConvT { x, w, b, geom, cin } => {
                let np = geom.out_pixels();
                let kk = geom.col_rows();
                let mut dcols = vec![T::zero(); kk * np];
                im2col(geom, g.data(), &mut dcols);
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                    matmul(*cin, kk, np, self.nodes[*w].value.data(), false, &dcols, false, dx.data_mut(), false);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(self.nodes[*w].value.shape());
                    matmul(*cin, np, kk, self.nodes[*x].value.data(), false, &dcols, true, dw.data_mut(), false);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accumulate(grads, *b, bias_grad(g, geom.cin, geom.h * geom.w));
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let f = *factor;
                let xs = self.nodes[*x].value.shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (h * f, w * f);
                let mut d = Tensor::zeros(&xs);
                let dd = d.data_mut();
                let gd = g.data();
                for ch in 0..c {
                    for yo in 0..ho {
                        let dst = &mut dd[(ch * h + yo / f) * w..(ch * h + yo / f + 1) * w];
                        let src = &gd[(ch * ho + yo) * wo..(ch * ho + yo + 1) * wo];
                        for (xo, &s) in src.iter().enumerate() {
                            dst[xo / f] += s;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if self.needs(p) {
                        let d = Tensor::new(self.nodes[p].value.shape(), g.data()[offset..offset + n].to_vec()).expect("concat grad");
                        self.accumulate(grads, p, d);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.nodes[*x].value.shape();
                let inner: usize = xs[1..].iter().product();
                let mut d = Tensor::zeros(xs);
                d.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let g0 = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.nodes[*x].value.shape(), g0));
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                let g0 = g.data()[0] / T::lit(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.nodes[*x].value.shape(), g0));
            }
            Op::LowerBound { x, bound } => {
                let xv = &self.nodes[*x].value;
                let mut d = g.clone();
                for (dv, &a) in d.data_mut().iter_mut().zip(xv.data()) {
                    if !(a >= *bound || *dv < T::zero()) {
                        *dv = T::zero();
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool2(x) => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (h / 2, w / 2);
                let mut d = Tensor::zeros(&xs);
                let dd = d.data_mut();
                let q = T::lit(0.25);
                for ch in 0..c {
                    for yy in 0..ho {
                        for xo in 0..wo {
                            let gv = g.data()[(ch * ho + yy) * wo + xo] * q;
                            let base = (ch * h + 2 * yy) * w + 2 * xo;
                            dd[base] += gv;
                            dd[base + 1] += gv;
                            dd[base + w] += gv;
                            dd[base + w + 1] += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Blur { x, taps, axis } => {
                let d = blur_backward(g, self.nodes[*x].value.shape(), taps, *axis);
                self.accumulate(grads, *x, d);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], i: usize, d: Tensor<T>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(g: &Tensor<T>, channels: usize, plane: usize) -> Tensor<T> {
    let data: Vec<T> = g.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
    debug_assert_eq!(data.len(), channels);
    Tensor::new(&[channels], data).expect("bias grad")
}

fn blur_forward<T: Real>(x: &Tensor<T>, taps: &[T], axis: Axis) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let k = taps.len();
    let (ho, wo) = match axis {
        Axis::Rows => (h, w + 1 - k),
        Axis::Cols => (h + 1 - k, w),
    };
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let xv = x.data();
    let o = out.data_mut();
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = T::zero();
                for (t, &tap) in taps.iter().enumerate() {
                    let v = match axis {
                        Axis::Rows => xv[(ch * h + y) * w + xo + t],
                        Axis::Cols => xv[(ch * h + y + t) * w + xo],
                    };
                    acc += tap * v;
                }
                o[(ch * ho + y) * wo + xo] = acc;
            }
        }
    }
    out
}

fn blur_backward<T: Real>(g: &Tensor<T>, in_shape: &[usize], taps: &[T], axis: Axis) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (_, ho, wo) = g.dims3();
    let mut d = Tensor::zeros(in_shape);
    let dd = d.data_mut();
    let gv = g.data();
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let gval = gv[(ch * ho + y) * wo + xo];
                for (t, &tap) in taps.iter().enumerate() {
                    match axis {
                        Axis::Rows => dd[(ch * h + y) * w + xo + t] += tap * gval,
                        Axis::Cols => dd[(ch * h + y + t) * w + xo] += tap * gval,
                    }
                }
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Checks d(sum(f(leaves) * probe))/d(leaf) against central differences.
    fn check_grad(leaves: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |ls: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> (f64, Tensor<f64>, Option<Vec<Tensor<f64>>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ls.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars);
            let out_val = tape.value(out).clone();
            let Some(p) = probe else { return (0.0, out_val, None) };
            let pv = tape.constant(p.clone());
            let prod = tape.mul(out, pv);
            let s = tape.sum(prod);
            let grads = tape.backward(s);
            let gs = vars.iter().zip(ls).map(|(v, l)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(l.shape()))).collect();
            (tape.scalar(s), out_val, Some(gs))
        };
        let (_, out0, _) = eval(&leaves, None);
        let probe = rand_tensor(&mut rng, out0.shape(), -1.0, 1.0);
        let (_, _, Some(analytic)) = eval(&leaves, Some(&probe)) else { unreachable!() };
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for idx in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[idx] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[idx] -= h;
                let fp = eval(&plus, Some(&probe)).0;
                let fm = eval(&minus, Some(&probe)).0;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[li].data()[idx];
                let tol = 1e-6 * (1.0 + numeric.abs().max(a.abs()));
                assert!((numeric - a).abs() < tol * 100.0, "leaf {li}[{idx}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn conv_and_deconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 6, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 5, 5], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        check_grad(vec![x.clone(), w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 2));
        let w1 = rand_tensor(&mut rng, &[3, 2, 1, 1], -0.5, 0.5);
        check_grad(vec![x.clone(), w1], |t, v| t.conv2d(v[0], v[1], None, 1, 0));
        let wt = rand_tensor(&mut rng, &[2, 3, 5, 5], -0.5, 0.5);
        let bt = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        check_grad(vec![x, wt, bt], |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 2, 1));
    }

    #[test]
    fn deconv_doubles_spatial_size() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(&[4, 3, 5]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 5, 5]));
        let y = tape.conv_transpose2d(x, w, None, 2, 2, 1);
        assert_eq!(tape.shape(y), &[2, 6, 10]);
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[2, 4, 4], 0.2, 2.0);
        let b = rand_tensor(&mut rng, &[2, 4, 4], -2.0, 2.0);
        for f in [
            Unary::Square,
            Unary::Sqrt,
            Unary::Rsqrt,
            Unary::Exp,
            Unary::Log,
            Unary::Tanh,
            Unary::Sigmoid,
            Unary::Softplus,
            Unary::Silu,
            Unary::NormalCdf,
            Unary::Powf(0.7),
        ] {
            check_grad(vec![a.clone()], move |t, v| t.unary(v[0], f));
        }
        check_grad(vec![a.clone(), b.clone()], |t, v| {
            let m = t.mul(v[0], v[1]);
            let d = t.div(m, v[0]);
            let s = t.sub(d, v[1]);
            let q = t.add(s, v[0]);
            t.scale(q, 1.5)
        });
        check_grad(vec![a.clone(), b.clone()], |t, v| {
            let c = t.concat(&[v[0], v[1]]);
            let s = t.slice(c, 1, 2);
            let u = t.upsample_nearest(s, 2);
            t.avg_pool2(u)
        });
        let bias = rand_tensor(&mut rng, &[2], -1.0, 1.0);
        check_grad(vec![b.clone(), bias.clone()], |t, v| {
            let x = t.add_group(v[0], v[1]);
            t.mul_group(x, v[1])
        });
        let big = rand_tensor(&mut rng, &[2, 13, 12], -1.0, 1.0);
        check_grad(vec![big], |t, v| t.blur_valid(v[0], &[0.25, 0.5, 0.25, 0.1, 0.3]));
        let m = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let x = rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0);
        check_grad(vec![m, x], |t, v| t.batch_matmul(v[0], v[1]));
    }

    #[test]
    fn lower_bound_passes_upward_gradient_only() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3], vec![-1.0, 0.5, 2.0]).unwrap());
        let y = tape.lower_bound(x, 1.0);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0]);
        // loss = -sum(y): gradient -1 everywhere, which points "upward"
        let n = tape.scale(y, -1.0);
        let s = tape.sum(n);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, -1.0, -1.0]);
        // loss = sum(y): below-bound entries get no gradient
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3], vec![-1.0, 0.5, 2.0]).unwrap());
        let y = tape.lower_bound(x, 1.0);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn inference_tape_records_nothing_differentiable() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.param(Tensor::full(&[2], 1.0));
        let y = tape.square(x);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
        assert!(!tape.is_recording());
    }
}
