//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node to the [`Graph`]; `backward` walks the
//! nodes in exact reverse order of creation and accumulates vector-Jacobian
//! products into the inputs. A graph supports exactly one backward pass.

use std::borrow::Cow;

use rand::{Rng, RngCore};

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

enum Op<E> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    Relu(usize),
    Dropout(usize, Vec<E>),
    Reshape(usize),
    Conv2d { x: usize, w: usize, b: usize, cols: Vec<E>, geom: ConvGeom },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Softmax(usize),
    LogSoftmax(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<E> },
}

struct Node<'a, E: Element> {
    value: Cow<'a, Tensor<E>>,
    op: Op<E>,
    requires_grad: bool,
}

/// Recording of a forward computation.
///
/// Leaves may borrow their tensors (`leaf_ref`) so model parameters are not
/// copied on every forward pass.
pub struct Graph<'a, E: Element = f32> {
    nodes: Vec<Node<'a, E>>,
    grads: Vec<Option<Vec<E>>>,
    consumed: bool,
}

impl<E: Element> Default for Graph<'_, E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, E: Element> Graph<'a, E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::NoGraph)
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); n * m];
        E::gemm(n, k, m, self.data(a), (k as isize, 1), self.data(b), (m as isize, 1), E::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new([n, m], out)?, Op::MatMul(a.0, b.0), rg)
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(shape, data)?, Op::Add(a.0, b.0), rg)
    }

    /// Adds a bias vector `[m]` to every row of `[n, m]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("add_row {sx:?} + {sb:?}")));
        }
        let m = sx[1];
        let b = self.data(bias);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + b[i % m]).collect();
        let rg = self.rg(x) || self.rg(bias);
        let shape = sx.to_vec();
        self.push("add_row", Tensor::new(shape, data)?, Op::AddRow(x.0, bias.0), rg)
    }

    /// Elementwise product of two equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("mul {:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(shape, data)?, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, x: Var, factor: E) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push("scale", t, Op::Scale(x.0, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        let rg = self.rg(x);
        self.push("relu", t, Op::Relu(x.0), rg)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut dyn RngCore) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        let keep = E::of(1.0 / (1.0 - rate));
        let mask: Vec<E> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { E::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("dropout", Tensor::new(shape, data)?, Op::Dropout(x.0, mask), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        self.push("reshape", t, Op::Reshape(x.0), rg)
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    /// Valid (unpadded) stride-1 convolution.
    ///
    /// `x: [n, c, h, w]`, `weight: [o, c, kh, kw]`, `bias: [o]` -> `[n, o, h-kh+1, w-kw+1]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        self.check(bias)?;
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] || sw[2] > sx[2] || sw[3] > sx[3] {
            return Err(Error::ShapeMismatch(format!("conv2d x{sx:?} w{sw:?} b{sb:?}")));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh: sx[2] - sw[2] + 1,
            ow: sx[3] - sw[3] + 1,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let cols = im2col(self.data(x), &geom);
        let wdata = self.data(weight);
        let bdata = self.data(bias);
        let mut out = vec![E::zero(); geom.batch * geom.out_ch * pos];
        for s in 0..geom.batch {
            let dst = &mut out[s * geom.out_ch * pos..(s + 1) * geom.out_ch * pos];
            for (o, chunk) in dst.chunks_mut(pos).enumerate() {
                chunk.fill(bdata[o]);
            }
            let src = &cols[s * patch * pos..(s + 1) * patch * pos];
            E::gemm(geom.out_ch, patch, pos, wdata, (patch as isize, 1), src, (pos as isize, 1), E::one(), dst);
        }
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        let t = Tensor::new([geom.batch, geom.out_ch, geom.oh, geom.ow], out)?;
        self.push("conv2d", t, Op::Conv2d { x: x.0, w: weight.0, b: bias.0, cols, geom }, rg)
    }

    /// 2x2 max pooling with stride 2 over `[n, c, h, w]` (odd edges dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::ShapeMismatch(format!("max_pool2 on {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ph, pw) = (h / 2, w / 2);
        let data = self.data(x);
        let mut out = Vec::with_capacity(n * c * ph * pw);
        let mut argmax = Vec::with_capacity(n * c * ph * pw);
        for plane in 0..n * c {
            let base = plane * h * w;
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = base + 2 * py * w + 2 * px;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * py + dy) * w + 2 * px + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        self.push("max_pool2", Tensor::new([n, c, ph, pw], out)?, Op::MaxPool2 { x: x.0, argmax }, rg)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| Error::ShapeMismatch("softmax on scalar".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        let shape = t.shape().to_vec();
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax(x.0), rg)
    }

    /// Log-softmax over the last dimension via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| Error::ShapeMismatch("log_softmax on scalar".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(width) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let rg = self.rg(x);
        let shape = t.shape().to_vec();
        self.push("log_softmax", Tensor::new(shape, out)?, Op::LogSoftmax(x.0), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).map(|v| v.ln());
        let rg = self.rg(x);
        self.push("log", t, Op::Log(x.0), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: E = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let s: E = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s / E::of(n as f64)), Op::Mean(x.0), rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!("cross_entropy logits {s:?} with {} labels", labels.len())));
        }
        let (n, classes) = (s[0], s[1]);
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("cross_entropy needs at least 2 classes, got {classes}")));
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0;
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            let lse = log_sum_exp(row);
            total += (lse - row[y]).f64();
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(logits);
        let loss = Tensor::scalar(E::of(total / n as f64));
        self.push("cross_entropy", loss, Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs }, rg)
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        self.backward_with_seed(loss, &[E::one()])
    }

    /// Backpropagates an explicit upstream gradient from `out`.
    pub fn backward_with_seed(&mut self, out: Var, seed: &[E]) -> Result<()> {
        self.check(out)?;
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        if seed.len() != self.value(out).len() {
            return Err(Error::ShapeMismatch(format!("seed of length {} for {:?}", seed.len(), self.shape(out))));
        }
        self.consumed = true;
        let Graph { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[out.0] = Some(seed.to_vec());

        for i in (0..=out.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |j: usize| nodes[j].value.data();
            let wants = |j: usize| nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    let (n, k, m) = (sa[0], sa[1], sb[1]);
                    if wants(*a) {
                        let mut da = vec![E::zero(); n * k];
                        E::gemm(n, m, k, &g, (m as isize, 1), val(*b), (1, m as isize), E::zero(), &mut da);
                        accumulate(grads, *a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![E::zero(); k * m];
                        E::gemm(k, n, m, val(*a), (1, k as isize), &g, (m as isize, 1), E::zero(), &mut db);
                        accumulate(grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(grads, *a, g.clone());
                    }
                    if wants(*b) {
                        accumulate(grads, *b, g);
                    }
                }
                Op::AddRow(x, b) => {
                    if wants(*b) {
                        let m = nodes[*b].value.len();
                        let mut db = vec![E::zero(); m];
                        for row in g.chunks(m) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                        }
                        accumulate(grads, *b, db);
                    }
                    if wants(*x) {
                        accumulate(grads, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let da = g.iter().zip(val(*b)).map(|(&u, &v)| u * v).collect();
                        accumulate(grads, *a, da);
                    }
                    if wants(*b) {
                        let db = g.iter().zip(val(*a)).map(|(&u, &v)| u * v).collect();
                        accumulate(grads, *b, db);
                    }
                }
                Op::Scale(x, f) => {
                    if wants(*x) {
                        accumulate(grads, *x, g.iter().map(|&u| u * *f).collect());
                    }
                }
                Op::Relu(x) => {
                    if wants(*x) {
                        let out = node.value.data();
                        let dx = g.iter().zip(out).map(|(&u, &y)| if y > E::zero() { u } else { E::zero() }).collect();
                        accumulate(grads, *x, dx);
                    }
                }
                Op::Dropout(x, mask) => {
                    if wants(*x) {
                        accumulate(grads, *x, g.iter().zip(mask).map(|(&u, &m)| u * m).collect());
                    }
                }
                Op::Reshape(x) => {
                    if wants(*x) {
                        accumulate(grads, *x, g);
                    }
                }
                Op::Conv2d { x, w, b, cols, geom } => {
                    let (patch, pos, oc) = (geom.patch(), geom.positions(), geom.out_ch);
                    if wants(*b) {
                        let mut db = vec![E::zero(); oc];
                        for s in 0..geom.batch {
                            for (o, d) in db.iter_mut().enumerate() {
                                let start = (s * oc + o) * pos;
                                *d = *d + g[start..start + pos].iter().copied().sum();
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                    if wants(*w) {
                        let mut dw = vec![E::zero(); oc * patch];
                        for s in 0..geom.batch {
                            let gs = &g[s * oc * pos..(s + 1) * oc * pos];
                            let cs = &cols[s * patch * pos..(s + 1) * patch * pos];
                            E::gemm(oc, pos, patch, gs, (pos as isize, 1), cs, (1, pos as isize), E::one(), &mut dw);
                        }
                        accumulate(grads, *w, dw);
                    }
                    if wants(*x) {
                        let wdata = val(*w);
                        let mut dcols = vec![E::zero(); patch * pos];
                        let mut dx = vec![E::zero(); geom.batch * geom.in_ch * geom.height * geom.width];
                        for s in 0..geom.batch {
                            let gs = &g[s * oc * pos..(s + 1) * oc * pos];
                            E::gemm(patch, oc, pos, wdata, (1, patch as isize), gs, (pos as isize, 1), E::zero(), &mut dcols);
                            col2im_add(&dcols, geom, s, &mut dx);
                        }
                        accumulate(grads, *x, dx);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if wants(*x) {
                        let mut dx = vec![E::zero(); nodes[*x].value.len()];
                        for (&src, &u) in argmax.iter().zip(&g) {
                            dx[src] = dx[src] + u;
                        }
                        accumulate(grads, *x, dx);
                    }
                }
                Op::Softmax(x) => {
                    if wants(*x) {
                        let y = node.value.data();
                        let width = *node.value.shape().last().unwrap();
                        let mut dx = Vec::with_capacity(y.len());
                        for (yr, gr) in y.chunks(width).zip(g.chunks(width)) {
                            let dot: E = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                        }
                        accumulate(grads, *x, dx);
                    }
                }
                Op::LogSoftmax(x) => {
                    if wants(*x) {
                        let y = node.value.data();
                        let width = *node.value.shape().last().unwrap();
                        let mut dx = Vec::with_capacity(y.len());
                        for (yr, gr) in y.chunks(width).zip(g.chunks(width)) {
                            let total: E = gr.iter().copied().sum();
                            dx.extend(yr.iter().zip(gr).map(|(&a, &b)| b - a.exp() * total));
                        }
                        accumulate(grads, *x, dx);
                    }
                }
                Op::Log(x) => {
                    if wants(*x) {
                        accumulate(grads, *x, g.iter().zip(val(*x)).map(|(&u, &v)| u / v).collect());
                    }
                }
                Op::Sum(x) => {
                    if wants(*x) {
                        accumulate(grads, *x, vec![g[0]; nodes[*x].value.len()]);
                    }
                }
                Op::Mean(x) => {
                    if wants(*x) {
                        let n = nodes[*x].value.len();
                        accumulate(grads, *x, vec![g[0] / E::of(n as f64); n]);
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    if wants(*logits) {
                        let classes = nodes[*logits].value.shape()[1];
                        let scale = g[0] / E::of(labels.len() as f64);
                        let mut dx: Vec<E> = probs.iter().map(|&p| p * scale).collect();
                        for (r, &y) in labels.iter().enumerate() {
                            dx[r * classes + y] = dx[r * classes + y] - scale;
                        }
                        accumulate(grads, *logits, dx);
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after `backward`; `None` if it never received one.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<E>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros when the backward pass never reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<E> {
        self.grad(v).map(<[E]>::to_vec).unwrap_or_else(|| vec![E::zero(); self.value(v).len()])
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Vec<E>>], idx: usize, contribution: Vec<E>) {
    match &mut grads[idx] {
        Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e = *e + c),
        slot @ None => *slot = Some(contribution),
    }
}

fn im2col<E: Element>(x: &[E], g: &ConvGeom) -> Vec<E> {
    let (patch, pos) = (g.patch(), g.positions());
    let mut cols = vec![E::zero(); g.batch * patch * pos];
    for s in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &x[(s * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[(s * patch + row) * pos..][..pos];
                    for oy in 0..g.oh {
                        let src = &plane[(oy + ki) * g.width + kj..][..g.ow];
                        dst[oy * g.ow..(oy + 1) * g.ow].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<E: Element>(dcols: &[E], g: &ConvGeom, sample: usize, dx: &mut [E]) {
    let pos = g.positions();
    for c in 0..g.in_ch {
        let plane = &mut dx[(sample * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &dcols[row * pos..][..pos];
                for oy in 0..g.oh {
                    let dst = &mut plane[(oy + ki) * g.width + kj..][..g.ow];
                    for (d, &v) in dst.iter_mut().zip(&src[oy * g.ow..(oy + 1) * g.ow]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let s: E = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<E: Element>(row: &mut [E]) {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut total = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}
