//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients only into nodes that
//! transitively depend on a leaf created with [`Tape::param`]; constants
//! never receive gradients, which is how frozen parameters stay untouched.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Square(usize),
    ClampMasked(usize, f64, f64),
    ClampStraight(usize),
    Sum(usize),
    Mean(usize),
    SumChannels(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry, batch: usize, out_channels: usize },
    Upsample2x(usize),
    Concat(usize, usize),
    Reshape(usize),
    TransposeLast2(usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    SoftmaxLast(usize),
    StraightThrough(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn add_grad(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: Var<'_>, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let value = a.value().map(f);
        let rg = self.requires(&[a.id]);
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        op: Op,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'_>> {
        let value = a
            .value()
            .zip_map(&b.value(), f)
            .map_err(|_| shape_err(context, a.shape().as_slice(), b.shape().as_slice()))?;
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(value, op, rg))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(shape_err("Tape::backward root", &[1], nodes[root.id].value.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let rg = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &nodes[i].value;
            match node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    if rg(a) {
                        add_grad(&mut grads, a, g.clone());
                    }
                    if rg(b) {
                        add_grad(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(a) {
                        add_grad(&mut grads, a, g.clone());
                    }
                    if rg(b) {
                        add_grad(&mut grads, b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        add_grad(&mut grads, a, g.zip_map(val(b), |x, y| x * y)?);
                    }
                    if rg(b) {
                        add_grad(&mut grads, b, g.zip_map(val(a), |x, y| x * y)?);
                    }
                }
                Op::Scale(a, c) => add_grad(&mut grads, a, g.map(|v| v * c)),
                Op::ScaleBy(a, s) => {
                    let sv = val(s).data()[0];
                    if rg(a) {
                        add_grad(&mut grads, a, g.map(|v| v * sv));
                    }
                    if rg(s) {
                        let ds: f64 = g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                        add_grad(&mut grads, s, Tensor::scalar(ds));
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let d = g.zip_map(val(a), |gv, x| if x > 0.0 { gv } else { gv * slope })?;
                    add_grad(&mut grads, a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                    add_grad(&mut grads, a, d);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y)?;
                    add_grad(&mut grads, a, d);
                }
                Op::Log(a) => {
                    let d = g.zip_map(val(a), |gv, x| gv / x)?;
                    add_grad(&mut grads, a, d);
                }
                Op::Abs(a) => {
                    let d = g.zip_map(val(a), |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })?;
                    add_grad(&mut grads, a, d);
                }
                Op::Square(a) => {
                    let d = g.zip_map(val(a), |gv, x| 2.0 * gv * x)?;
                    add_grad(&mut grads, a, d);
                }
                Op::ClampMasked(a, lo, hi) => {
                    let d = g.zip_map(val(a), |gv, x| if x >= lo && x <= hi { gv } else { 0.0 })?;
                    add_grad(&mut grads, a, d);
                }
                Op::ClampStraight(a) | Op::StraightThrough(a) => add_grad(&mut grads, a, g),
                Op::Sum(a) => {
                    add_grad(&mut grads, a, Tensor::full(val(a).shape(), g.data()[0]));
                }
                Op::Mean(a) => {
                    let n = val(a).numel() as f64;
                    add_grad(&mut grads, a, Tensor::full(val(a).shape(), g.data()[0] / n));
                }
                Op::SumChannels(a) => {
                    let s = val(a).shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut d = Tensor::zeros(s);
                    let dd = d.data_mut();
                    for b in 0..n {
                        let src = &g.data()[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            dd[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(src);
                        }
                    }
                    add_grad(&mut grads, a, d);
                }
                Op::Conv2d { x, w, b, geom, batch, out_channels } => {
                    let cg = conv2d_backward(
                        val(x).data(),
                        batch,
                        &geom,
                        val(w).data(),
                        out_channels,
                        g.data(),
                        rg(x),
                        rg(w),
                        b.is_some_and(rg),
                    );
                    if let Some(dx) = cg.dx {
                        add_grad(&mut grads, x, Tensor::from_vec(val(x).shape(), dx)?);
                    }
                    if let Some(dw) = cg.dw {
                        add_grad(&mut grads, w, Tensor::from_vec(val(w).shape(), dw)?);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        add_grad(&mut grads, b, Tensor::from_vec(val(b).shape(), db)?);
                    }
                }
                Op::Upsample2x(a) => {
                    let s = val(a).shape();
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let mut d = Tensor::zeros(s);
                    let dd = d.data_mut();
                    let gd = g.data();
                    for p in 0..nc {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dd[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    add_grad(&mut grads, a, d);
                }
                Op::Concat(a, b) => {
                    let sa = val(a).shape();
                    let sb = val(b).shape();
                    let n = sa[0];
                    let la: usize = sa[1..].iter().product();
                    let lb: usize = sb[1..].iter().product();
                    let gd = g.data();
                    if rg(a) {
                        let mut d = Vec::with_capacity(n * la);
                        for i in 0..n {
                            d.extend_from_slice(&gd[i * (la + lb)..i * (la + lb) + la]);
                        }
                        add_grad(&mut grads, a, Tensor::from_vec(sa, d)?);
                    }
                    if rg(b) {
                        let mut d = Vec::with_capacity(n * lb);
                        for i in 0..n {
                            d.extend_from_slice(&gd[i * (la + lb) + la..(i + 1) * (la + lb)]);
                        }
                        add_grad(&mut grads, b, Tensor::from_vec(sb, d)?);
                    }
                }
                Op::Reshape(a) => add_grad(&mut grads, a, g.reshape(val(a).shape())?),
                Op::TransposeLast2(a) => {
                    add_grad(&mut grads, a, transpose_last2(&g));
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                    let n = val(b).shape()[1];
                    if rg(a) {
                        let mut d = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, val(b).data(), true, &mut d, 0.0);
                        add_grad(&mut grads, a, Tensor::from_vec(&[m, k], d)?);
                    }
                    if rg(b) {
                        let mut d = vec![0.0; k * n];
                        gemm(k, m, n, val(a).data(), true, g.data(), false, &mut d, 0.0);
                        add_grad(&mut grads, b, Tensor::from_vec(&[k, n], d)?);
                    }
                }
                Op::Bmm(a, b) => {
                    let sa = val(a).shape();
                    let (bt, m, k) = (sa[0], sa[1], sa[2]);
                    let n = val(b).shape()[2];
                    if rg(a) {
                        let mut d = vec![0.0; bt * m * k];
                        for i in 0..bt {
                            gemm(
                                m,
                                n,
                                k,
                                &g.data()[i * m * n..],
                                false,
                                &val(b).data()[i * k * n..],
                                true,
                                &mut d[i * m * k..],
                                0.0,
                            );
                        }
                        add_grad(&mut grads, a, Tensor::from_vec(sa, d)?);
                    }
                    if rg(b) {
                        let mut d = vec![0.0; bt * k * n];
                        for i in 0..bt {
                            gemm(
                                k,
                                m,
                                n,
                                &val(a).data()[i * m * k..],
                                true,
                                &g.data()[i * m * n..],
                                false,
                                &mut d[i * k * n..],
                                0.0,
                            );
                        }
                        add_grad(&mut grads, b, Tensor::from_vec(val(b).shape(), d)?);
                    }
                }
                Op::SoftmaxLast(a) => {
                    let s = node.value.shape();
                    let last = s[s.len() - 1];
                    let y = node.value.data();
                    let gd = g.data();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.len() / last {
                        let ys = &y[r * last..(r + 1) * last];
                        let gs = &gd[r * last..(r + 1) * last];
                        let dotp = math::dot(ys, gs);
                        for j in 0..last {
                            d[r * last + j] = ys[j] * (gs[j] - dotp);
                        }
                    }
                    add_grad(&mut grads, a, Tensor::from_vec(s, d)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let nd = s.len();
    let (r, c) = (s[nd - 2], s[nd - 1]);
    let batch: usize = s[..nd - 2].iter().product();
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::from_vec(&shape, out).expect("transpose preserves element count")
}

// Arithmetic returns `Result` for shape errors, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self, Op::Scale(self.id, c), |v| v * c)
    }

    /// Multiplies every element by a single-element variable.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        if s.value().numel() != 1 {
            return Err(shape_err("scale_by", &[1], &s.shape()));
        }
        let sv = s.item();
        let value = self.value().map(|v| v * sv);
        let rg = self.tape.requires(&[self.id, s.id]);
        Ok(self.tape.push(value, Op::ScaleBy(self.id, s.id), rg))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.tape.unary(self, Op::LeakyRelu(self.id, slope), |v| if v > 0.0 { v } else { v * slope })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self, Op::Sigmoid(self.id), math::sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, Op::Exp(self.id), math::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self, Op::Log(self.id), math::ln)
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self, Op::Abs(self.id), math::abs)
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self, Op::Square(self.id), |v| v * v)
    }

    /// Clamp whose gradient vanishes outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self, Op::ClampMasked(self.id, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Clamp whose gradient passes through unchanged.
    pub fn clamp_straight(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self, Op::ClampStraight(self.id), |v| v.clamp(lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(v), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value().mean();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(v), Op::Mean(self.id), rg)
    }

    /// `[N, C, H, W] -> [N, 1, H, W]` by summing channels.
    pub fn sum_channels(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(shape_err("sum_channels", &[0, 0, 0, 0], &s));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![0.0; n * hw];
        {
            let v = self.value();
            let d = v.data();
            for b in 0..n {
                for ch in 0..c {
                    let src = &d[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for (o, x) in out[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                        *o += x;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, 1, s[2], s[3]], out)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::SumChannels(self.id), rg))
    }

    /// NCHW convolution with square kernel `w: [Cout, Cin, k, k]`.
    pub fn conv2d(self, w: Var<'t>, b: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", &ws, &xs));
        }
        if let Some(b) = b {
            if b.shape() != [ws[0]] {
                return Err(shape_err("conv2d bias", &[ws[0]], &b.shape()));
            }
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::InvalidArgument("conv2d kernel larger than padded input".into()));
        }
        let geom = ConvGeometry { in_channels: xs[1], height: xs[2], width: xs[3], kernel: ws[2], stride, pad };
        let out = {
            let xv = self.value();
            let wv = w.value();
            let bv = b.map(|b| b.value());
            conv2d_forward(xv.data(), xs[0], &geom, wv.data(), bv.as_ref().map(|t| t.data()), ws[0])
        };
        let value = Tensor::from_vec(&[xs[0], ws[0], geom.out_height(), geom.out_width()], out)?;
        let mut ids = vec![self.id, w.id];
        if let Some(b) = b {
            ids.push(b.id);
        }
        let rg = self.tape.requires(&ids);
        Ok(self.tape.push(
            value,
            Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom, batch: xs[0], out_channels: ws[0] },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", &[0, 0, 0, 0], &s));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; nc * 4 * h * w];
        {
            let v = self.value();
            let d = v.data();
            for p in 0..nc {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        out[(p * 2 * h + y) * 2 * w + x] = d[(p * h + y / 2) * w + x / 2];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Upsample2x(self.id), rg))
    }

    /// Concatenates along axis 1.
    pub fn concat(self, other: Var<'t>) -> Result<Var<'t>> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat", &sa, &sb));
        }
        let n = sa[0];
        let la: usize = sa[1..].iter().product();
        let lb: usize = sb[1..].iter().product();
        let mut out = Vec::with_capacity(n * (la + lb));
        {
            let va = self.value();
            let vb = other.value();
            for i in 0..n {
                out.extend_from_slice(&va.data()[i * la..(i + 1) * la]);
                out.extend_from_slice(&vb.data()[i * lb..(i + 1) * lb]);
            }
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::Concat(self.id, other.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.to_tensor().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    pub fn transpose_last2(self) -> Result<Var<'t>> {
        if self.shape().len() < 2 {
            return Err(shape_err("transpose_last2", &[0, 0], &self.shape()));
        }
        let value = transpose_last2(&self.value());
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::TransposeLast2(self.id), rg))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value().data(), false, other.value().data(), false, &mut out, 0.0);
        let value = Tensor::from_vec(&[m, n], out)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Batched product `[b, m, k] x [b, k, n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        {
            let va = self.value();
            let vb = other.value();
            for i in 0..bt {
                gemm(
                    m,
                    k,
                    n,
                    &va.data()[i * m * k..],
                    false,
                    &vb.data()[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    0.0,
                );
            }
        }
        let value = Tensor::from_vec(&[bt, m, n], out)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::Bmm(self.id, other.id), rg))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let mut value = self.to_tensor();
        let last = *value.shape().last().expect("non-empty shape");
        for row in value.data_mut().chunks_mut(last) {
            softmax_in_place(row);
        }
        let rg = self.requires_grad();
        self.tape.push(value, Op::SoftmaxLast(self.id), rg)
    }

    /// Forward value `replacement`, backward identity (straight-through).
    pub fn straight_through(self, replacement: Tensor) -> Result<Var<'t>> {
        replacement.expect_shape(&self.shape(), "straight_through")?;
        let rg = self.requires_grad();
        Ok(self.tape.push(replacement, Op::StraightThrough(self.id), rg))
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>, input: Tensor) {
        let tape = Tape::new();
        let x = tape.param(input.clone());
        let y = build(&tape, x);
        let grads = tape.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let eps = 1e-6;
        for i in 0..input.numel() {
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            let tp = Tape::new();
            let fp = build(&tp, tp.constant(plus)).item();
            let tm = Tape::new();
            let fm = build(&tm, tm.constant(minus)).item();
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()), "index {i}: analytic {a} numeric {numeric}");
        }
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| math::sin(i as f64 * 1.7 + 0.3)).collect()).unwrap()
    }

    #[test]
    fn conv_upsample_concat_gradients() {
        let w = ramp(&[3, 4, 3, 3]);
        let b = ramp(&[3]);
        fd_check(
            |t, x| {
                let other = t.constant(ramp(&[2, 2, 5, 4]));
                let y = x.concat(other).unwrap();
                let y = y.conv2d(t.constant(w.clone()), Some(t.constant(b.clone())), 2, 1).unwrap();
                y.upsample2x().unwrap().leaky_relu(0.2).square().mean()
            },
            ramp(&[2, 2, 5, 4]),
        );
    }

    #[test]
    fn attention_chain_gradients() {
        fd_check(
            |t, x| {
                let k = t.constant(ramp(&[2, 4, 3]));
                let scores = x.bmm(k.transpose_last2().unwrap()).unwrap().softmax_last();
                let v = t.constant(ramp(&[2, 4, 3]));
                scores.bmm(v).unwrap().reshape(&[6, 3]).unwrap().sigmoid().sum()
            },
            ramp(&[2, 3, 3]),
        );
    }

    #[test]
    fn elementwise_gradients() {
        fd_check(
            |t, x| {
                let c = t.constant(ramp(&[2, 3, 2, 2]).map(|v| v + 2.0));
                let y = x.mul(c).unwrap().exp().add(c).unwrap().ln();
                let z = y.sub(x).unwrap().abs().sum_channels().unwrap();
                let s = t.constant(Tensor::scalar(0.7));
                z.scale_by(s).unwrap().scale(3.0).mean()
            },
            ramp(&[2, 3, 2, 2]),
        );
    }

    #[test]
    fn scale_by_gradient_reaches_scalar() {
        fd_check(|t, s| t.constant(ramp(&[5])).scale_by(s).unwrap().square().sum(), Tensor::scalar(0.4));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(ramp(&[4]));
        let p = tape.param(ramp(&[4]));
        let y = c.mul(p).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), c.value().data());
    }
}
