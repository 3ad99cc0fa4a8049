//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op pushes its result
//! after its operands, so index order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are cheap and are
//! rebuilt for every training step; parameters live outside in
//! [`crate::params::ParamSet`] and enter as leaves.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, log_softmax_in_place, numel, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv2dSpec,
    },
    CrossEntropy(Var, Vec<usize>),
    BceWithLogits(Var, Tensor),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// ---------------------------------------------------------------------------
// broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for (i, o) in out.iter_mut().enumerate() {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        *o = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed at the rank of `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + r - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element in order.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let r = out.len();
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        // carry into the leading axes
        let mut d = r - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn permuted_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

/// Materialize `x` with its axes reordered by `axes`.
fn permute_data(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let out_shape = permuted_shape(shape, axes);
    let in_strides = broadcast_strides(shape, shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![0.0; x.len()];
    let data = x.data();
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, s, _| {
        out[o] = data[s];
    });
    Tensor::new(out_shape, out).expect("permute preserves size")
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// convolution kernels

fn conv_out(size: usize, k: usize, spec: Conv2dSpec) -> usize {
    (size + 2 * spec.padding - k) / spec.stride + 1
}

/// Unfold one `[cin, h, w]` image into `[cin·kh·kw, ho·wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    cols: &mut [f64],
) {
    let ho = conv_out(h, kh, spec);
    let wo = conv_out(w, kw, spec);
    let pad = spec.padding as isize;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - pad;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - pad;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                        {
                            img[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    img: &mut [f64],
) {
    let ho = conv_out(h, kh, spec);
    let wo = conv_out(w, kw, spec);
    let pad = spec.padding as isize;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - pad;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - pad;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        img[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], b: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (&[batch, cin, h, wd], &[cout, cin2, kh, kw]) = (x, w) else {
            return Err(Error::dim(format!(
                "conv2d expects x [B,C,H,W] and w [O,C,kh,kw], got {x:?} and {w:?}"
            )));
        };
        if cin != cin2 {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input has {cin}, weight expects {cin2}"
            )));
        }
        if b != [cout] {
            return Err(Error::dim(format!("conv2d bias must be [{cout}], got {b:?}")));
        }
        if spec.stride == 0 || h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(Error::dim("conv2d kernel larger than padded input"));
        }
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho: conv_out(h, kh, spec),
            wo: conv_out(wd, kw, spec),
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), b.shape(), spec)?;
    let in_size = g.cin * g.h * g.w;
    let out_size = g.cout * g.spatial_out();
    let mut out = vec![0.0; g.batch * out_size];
    out.par_chunks_mut(out_size.max(1))
        .zip(x.data().par_chunks(in_size.max(1)))
        .for_each(|(o, img)| {
            let mut cols = vec![0.0; g.patch() * g.spatial_out()];
            im2col(img, g.cin, g.h, g.w, g.kh, g.kw, spec, &mut cols);
            for (c, chunk) in o.chunks_mut(g.spatial_out()).enumerate() {
                chunk.fill(b.data()[c]);
            }
            gemm(w.data(), &cols, o, g.cout, g.patch(), g.spatial_out());
        });
    Tensor::new(vec![g.batch, g.cout, g.ho, g.wo], out)
}

/// Returns `(dx, dw, db)`. Per-sample weight gradients are computed
/// independently and summed in sample order, so the result does not depend
/// on the worker count.
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    spec: Conv2dSpec,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let g = ConvGeom::new(x.shape(), w.shape(), &[w.shape()[0]], spec).expect("checked in forward");
    let in_size = g.cin * g.h * g.w;
    let out_size = g.cout * g.spatial_out();
    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = x
        .data()
        .par_chunks(in_size.max(1))
        .zip(grad.data().par_chunks(out_size.max(1)))
        .map(|(img, gout)| {
            let mut cols = vec![0.0; g.patch() * g.spatial_out()];
            im2col(img, g.cin, g.h, g.w, g.kh, g.kw, spec, &mut cols);
            let mut dw = vec![0.0; g.cout * g.patch()];
            gemm_nt(gout, &cols, &mut dw, g.cout, g.spatial_out(), g.patch());
            let db: Vec<f64> = gout
                .chunks(g.spatial_out())
                .map(|c| c.iter().fold(0.0, |a, &v| a + v))
                .collect();
            let mut dx = Vec::new();
            if need_dx {
                let mut dcols = vec![0.0; g.patch() * g.spatial_out()];
                gemm_tn(w.data(), gout, &mut dcols, g.patch(), g.cout, g.spatial_out());
                dx = vec![0.0; in_size];
                col2im(&dcols, g.cin, g.h, g.w, g.kh, g.kw, spec, &mut dx);
            }
            (dx, dw, db)
        })
        .collect();
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[g.cout]);
    let mut dx = need_dx.then(|| Vec::with_capacity(x.len()));
    for (px, pw, pb) in parts {
        for (a, v) in dw.data_mut().iter_mut().zip(&pw) {
            *a += v;
        }
        for (a, v) in db.data_mut().iter_mut().zip(&pb) {
            *a += v;
        }
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&px);
        }
    }
    let dx = dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("same size"));
    (dx, dw, db)
}

// ---------------------------------------------------------------------------

fn last_axis(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1).max(1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros if it did not influence the root.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // -- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else {
            let out = broadcast_shape(ta.shape(), tb.shape())?;
            let sa = broadcast_strides(ta.shape(), &out);
            let sb = broadcast_strides(tb.shape(), &out);
            let mut data = vec![0.0; numel(&out)];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
            Tensor::new(out, data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    // -- linear algebra ----------------------------------------------------

    /// `[.., m, k] × [k, n] -> [.., m, n]`; leading axes of `a` are folded
    /// into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[k2, n], true) = (&sb[..], sa.len() >= 2) else {
            return Err(Error::dim(format!("matmul expects [..,m,k] x [k,n], got {sa:?} x {sb:?}")));
        };
        let k = sa[sa.len() - 1];
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims differ: {sa:?} x {sb:?}")));
        }
        let rows = numel(&sa) / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().expect("rank >= 2") = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// `[B, m, k] × [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[bs, m, k], &[bs2, k2, n]) = (&sa[..], &sb[..]) else {
            return Err(Error::dim(format!("bmm expects rank-3 operands, got {sa:?} x {sb:?}")));
        };
        if bs != bs2 || k != k2 {
            return Err(Error::dim(format!("bmm shape mismatch {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim(format!("invalid permutation {axes:?} for {shape:?}")));
        }
        let value = permute_data(self.value(a), axes);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a), rg))
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // -- normalizations ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let n = last_axis(&value);
        value.data_mut().chunks_mut(n).for_each(softmax_in_place);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let n = last_axis(&value);
        value.data_mut().chunks_mut(n).for_each(log_softmax_in_place);
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Unit-normalize along the last axis. A zero row becomes the uniform
    /// unit vector (with a logged warning) and passes no gradient.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let n = last_axis(&value);
        let mut norms = Vec::with_capacity(value.len() / n);
        for row in value.data_mut().chunks_mut(n) {
            let norm = row.iter().fold(0.0, |acc, &x| acc + x * x).sqrt();
            if norm > 0.0 && norm.is_finite() {
                row.iter_mut().for_each(|x| *x /= norm);
            } else {
                log::warn!("l2_normalize: zero vector replaced by uniform unit vector");
                row.fill(1.0 / (n as f64).sqrt());
            }
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::L2Normalize(a, norms), rg)
    }

    // -- network layers ----------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let value = conv_forward(self.value(x), self.value(w), self.value(b), spec)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let [bsz, c] = t.dims2()?;
        if labels.len() != bsz {
            return Err(Error::dim(format!("{} labels for batch of {bsz}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::param(format!("label {bad} out of range for {c} classes")));
        }
        let mut total = 0.0;
        for (row, &l) in t.data().chunks(c).zip(labels) {
            let mut r = row.to_vec();
            log_softmax_in_place(&mut r);
            total += -r[l];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / bsz as f64),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        ))
    }

    /// Mean sigmoid binary cross-entropy over every entry.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(Error::dim(format!(
                "bce targets {:?} vs logits {:?}",
                targets.shape(),
                t.shape()
            )));
        }
        let total = t.data().iter().zip(targets.data()).fold(0.0, |acc, (&x, &y)| {
            acc + x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
        });
        let value = Tensor::scalar(total / t.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::BceWithLogits(logits, targets.clone()), rg))
    }

    // -- backward ----------------------------------------------------------

    /// Accumulates `∂root/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (parent, g) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Sum `grad` (shaped like the broadcast output) down to `shape`.
    fn unbroadcast(grad: &Tensor, shape: &[usize], scale: impl Fn(usize, usize) -> f64) -> Tensor {
        let out = grad.shape();
        let s = broadcast_strides(shape, out);
        let zeros = vec![0; out.len()];
        let mut acc = vec![0.0; numel(shape)];
        let g = grad.data();
        for_each_broadcast(out, &s, &zeros, |o, i, _| acc[i] += g[o] * scale(o, i));
        Tensor::new(shape.to_vec(), acc).expect("shape")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, grad: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    res.push((*a, Self::reduce_to(grad, self.shape(*a), 1.0)));
                }
                if self.needs(*b) {
                    res.push((*b, Self::reduce_to(grad, self.shape(*b), sign)));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let shape = out.shape().to_vec();
                let sa = broadcast_strides(ta.shape(), &shape);
                let sb = broadcast_strides(tb.shape(), &shape);
                let is_div = matches!(node.op, Op::Div(..));
                let (da, db, g) = (ta.data(), tb.data(), grad.data());
                if self.needs(*a) {
                    let mut acc = vec![0.0; ta.len()];
                    for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| {
                        acc[ia] += if is_div { g[o] / db[ib] } else { g[o] * db[ib] };
                    });
                    res.push((*a, Tensor::new(ta.shape().to_vec(), acc).expect("shape")));
                }
                if self.needs(*b) {
                    let mut acc = vec![0.0; tb.len()];
                    for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| {
                        acc[ib] += if is_div {
                            -g[o] * da[ia] / (db[ib] * db[ib])
                        } else {
                            g[o] * da[ia]
                        };
                    });
                    res.push((*b, Tensor::new(tb.shape().to_vec(), acc).expect("shape")));
                }
            }
            Op::Scale(a, c) => res.push((*a, grad.scale(*c))),
            Op::AddScalar(a) => res.push((*a, grad.clone())),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [k, n] = tb.dims2().expect("checked");
                let rows = ta.len() / k.max(1);
                if self.needs(*a) {
                    let mut da = vec![0.0; ta.len()];
                    gemm_nt(grad.data(), tb.data(), &mut da, rows, n, k);
                    res.push((*a, Tensor::new(ta.shape().to_vec(), da).expect("shape")));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; tb.len()];
                    gemm_tn(ta.data(), grad.data(), &mut db, k, rows, n);
                    res.push((*b, Tensor::new(tb.shape().to_vec(), db).expect("shape")));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                let g = grad.data();
                if self.needs(*a) {
                    let mut da = vec![0.0; ta.len()];
                    for s in 0..bs {
                        gemm_nt(
                            &g[s * m * n..(s + 1) * m * n],
                            &tb.data()[s * k * n..(s + 1) * k * n],
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    res.push((*a, Tensor::new(ta.shape().to_vec(), da).expect("shape")));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; tb.len()];
                    for s in 0..bs {
                        gemm_tn(
                            &ta.data()[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut db[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    res.push((*b, Tensor::new(tb.shape().to_vec(), db).expect("shape")));
                }
            }
            Op::Permute(a, axes) => res.push((*a, permute_data(grad, &inverse_axes(axes)))),
            Op::Reshape(a) => {
                let g = grad.clone().reshape(self.shape(*a)).expect("reshape");
                res.push((*a, g));
            }
            Op::SumAll(a) => res.push((*a, Tensor::full(self.shape(*a), grad.item()))),
            Op::SumAxis(a) => {
                res.push((*a, Self::expand_to(grad, self.shape(*a))));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                res.push((*a, x.zip_map(grad, |x, g| if x > 0.0 { g } else { 0.0 }).expect("shape")));
            }
            Op::Exp(a) => res.push((*a, out.zip_map(grad, |y, g| y * g).expect("shape"))),
            Op::Log(a) => {
                let x = self.value(*a);
                res.push((*a, x.zip_map(grad, |x, g| g / x).expect("shape")));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                res.push((*a, x.zip_map(grad, |x, g| 2.0 * x * g).expect("shape")));
            }
            Op::Softmax(a) => {
                let n = last_axis(out);
                let mut dx = grad.clone();
                for (d, y) in dx.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot = d.iter().zip(y).fold(0.0, |acc, (&g, &y)| acc + g * y);
                    for (dv, &yv) in d.iter_mut().zip(y) {
                        *dv = yv * (*dv - dot);
                    }
                }
                res.push((*a, dx));
            }
            Op::LogSoftmax(a) => {
                let n = last_axis(out);
                let mut dx = grad.clone();
                for (d, ly) in dx.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let total = d.iter().fold(0.0, |acc, &g| acc + g);
                    for (dv, &l) in d.iter_mut().zip(ly) {
                        *dv -= l.exp() * total;
                    }
                }
                res.push((*a, dx));
            }
            Op::L2Normalize(a, norms) => {
                let n = last_axis(out);
                let mut dx = grad.clone();
                for ((d, y), &norm) in dx.data_mut().chunks_mut(n).zip(out.data().chunks(n)).zip(norms) {
                    if !(norm > 0.0 && norm.is_finite()) {
                        d.fill(0.0);
                        continue;
                    }
                    let dot = d.iter().zip(y).fold(0.0, |acc, (&g, &y)| acc + g * y);
                    for (dv, &yv) in d.iter_mut().zip(y) {
                        *dv = (*dv - yv * dot) / norm;
                    }
                }
                res.push((*a, dx));
            }
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = conv_backward(self.value(*x), self.value(*w), grad, *spec, self.needs(*x));
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                res.push((*w, dw));
                res.push((*b, db));
            }
            Op::CrossEntropy(a, labels) => {
                let t = self.value(*a);
                let c = t.shape()[1];
                let scale = grad.item() / labels.len() as f64;
                let mut dx = t.clone();
                for (row, &l) in dx.data_mut().chunks_mut(c).zip(labels) {
                    softmax_in_place(row);
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                res.push((*a, dx));
            }
            Op::BceWithLogits(a, targets) => {
                let t = self.value(*a);
                let scale = grad.item() / t.len() as f64;
                let dx = t.zip_map(targets, |x, y| (sigmoid(x) - y) * scale).expect("shape");
                res.push((*a, dx));
            }
        }
        res
    }

    fn reduce_to(grad: &Tensor, shape: &[usize], sign: f64) -> Tensor {
        if grad.shape() == shape {
            if sign == 1.0 {
                grad.clone()
            } else {
                grad.scale(sign)
            }
        } else {
            Self::unbroadcast(grad, shape, |_, _| sign)
        }
    }

    /// Broadcast a kept-dim gradient back up to `shape`.
    fn expand_to(grad: &Tensor, shape: &[usize]) -> Tensor {
        let s = broadcast_strides(grad.shape(), shape);
        let zeros = vec![0; shape.len()];
        let mut out = vec![0.0; numel(shape)];
        let g = grad.data();
        for_each_broadcast(shape, &s, &zeros, |o, i, _| out[o] = g[i]);
        Tensor::new(shape.to_vec(), out).expect("shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::Rng;

    const TOL: f64 = 1e-6;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(rand(&[2, 3], 1));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn dot_gives_twice_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(rand(&[3], 2));
        let x = g.param(rand(&[3], 3));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), g.value(c));
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_add_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![10., 20.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11., 22., 13., 24.]);
        let col = g.constant(Tensor::new(vec![2, 1], vec![100., 200.]).unwrap());
        let d = g.add(a, col).unwrap();
        assert_eq!(g.value(d).data(), &[101., 102., 203., 204.]);
    }

    #[test]
    fn permute_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let t = g.transpose(x).unwrap();
        assert_eq!(g.value(t).data(), &[0., 3., 1., 4., 2., 5.]);
        assert!(g.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn grad_elementwise_broadcast() {
        let r = check_gradients(
            &[rand(&[2, 3, 4], 1), rand(&[3, 1], 2)],
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let m = g.mul(a, v[1])?;
                let s = g.sub(m, v[0])?;
                let q = g.square(s);
                let shifted = g.add_scalar(v[1], 5.0);
                let e = g.square(shifted);
                let d = g.div(q, e)?;
                Ok(g.sum(d))
            },
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn grad_matmul_and_bmm() {
        let r = check_gradients(&[rand(&[2, 3, 4], 3), rand(&[4, 5], 4)], |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let q = g.square(p);
            Ok(g.sum(q))
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
        let r = check_gradients(&[rand(&[2, 3, 4], 5), rand(&[2, 4, 2], 6)], |g, v| {
            let p = g.bmm(v[0], v[1])?;
            let q = g.square(p);
            Ok(g.sum(q))
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn grad_permute_reshape_reductions() {
        let w = rand(&[2, 3, 4], 8);
        let r = check_gradients(&[rand(&[2, 3, 4], 7)], move |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            let rs = g.reshape(p, &[4, 6])?;
            let m = g.mean_axis(rs, 0)?;
            let s2 = g.sum_axis(v[0], 1)?;
            let wc = g.constant(w.clone());
            let prod = g.mul(s2, wc)?;
            let a = g.square(m);
            let sa = g.sum(a);
            let sb = g.sum(prod);
            let sq = g.mul(sb, sb)?;
            let tot = g.add(sa, sq)?;
            Ok(g.mean(tot))
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn grad_nonlinearities() {
        let x = rand(&[3, 4], 9).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        let r = check_gradients(&[x], |g, v| {
            let a = g.relu(v[0]);
            let e = g.exp(v[0]);
            let sq = g.square(v[0]);
            let pos = g.add_scalar(sq, 1.0);
            let l = g.log(pos);
            let sm = g.softmax(v[0]);
            let ls = g.log_softmax(v[0]);
            let n = g.l2_normalize(v[0]);
            let w = g.constant(rand(&[3, 4], 10));
            let mut acc = g.add(a, e)?;
            for t in [l, sm, ls, n] {
                let tw = g.mul(t, w)?;
                acc = g.add(acc, tw)?;
            }
            let s = g.square(acc);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn grad_conv2d() {
        let r = check_gradients(
            &[rand(&[2, 2, 5, 5], 11), rand(&[3, 2, 3, 3], 12), rand(&[3], 13)],
            |g, v| {
                let c = g.conv2d(v[0], v[1], v[2], Conv2dSpec { stride: 2, padding: 1 })?;
                let q = g.square(c);
                Ok(g.sum(q))
            },
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let x = rand(&[1, 2, 4, 4], 21);
        let w = rand(&[3, 2, 3, 3], 22);
        let b = rand(&[3], 23);
        let spec = Conv2dSpec { stride: 2, padding: 1 };
        let out = conv_forward(&x, &w, &b, spec).unwrap();
        assert_eq!(out.shape(), &[1, 3, 2, 2]);
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    acc += w.get(&[o, c, ky, kx]) * x.get(&[0, c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((out.get(&[0, o, oy, ox]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.param(Tensor::zeros(&[2, 2, 3, 3]));
        let b = g.param(Tensor::zeros(&[2]));
        assert!(matches!(
            g.conv2d(x, w, b, Conv2dSpec { stride: 1, padding: 1 }),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn grad_fused_losses() {
        let labels = vec![2, 0, 1];
        let r = check_gradients(&[rand(&[3, 4], 14)], |g, v| g.cross_entropy(v[0], &labels)).unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
        let targets = Tensor::new(vec![2, 3], vec![1., 0., 1., 0., 0., 1.]).unwrap();
        let r = check_gradients(&[rand(&[2, 3], 15)], |g, v| g.bce_with_logits(v[0], &targets)).unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn zero_vector_normalizes_to_uniform() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 4]));
        let n = g.l2_normalize(x);
        assert!(g.value(n).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let s = g.sum(n);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::zeros(&[1, 4]));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(rand(&[4, 2, 6, 6], 30));
            let w = g.param(rand(&[3, 2, 3, 3], 31));
            let b = g.param(rand(&[3], 32));
            let c = g.conv2d(x, w, b, Conv2dSpec { stride: 2, padding: 1 }).unwrap();
            let s = g.softmax(c);
            let q = g.square(s);
            let r = g.sum(q);
            g.backward(r).unwrap();
            (g.grad(w).unwrap().clone(), g.grad(x).unwrap().clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
    }
}
