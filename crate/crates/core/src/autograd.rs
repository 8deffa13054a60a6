//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and the
//! ids of its inputs. [`Graph::backward`] walks the tape in reverse. Nodes that
//! do not depend on any parameter are never differentiated.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm, numel, reduce_to_shape, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Silu,
    Tanh,
    Sigmoid,
    Exp,
    Sqrt,
    Square,
    Abs,
    /// `acos` of the input clamped to `[-1, 1]`.
    Acos,
    Clamp(f64, f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumAxis(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Upsample2x(Var),
    AvgPool(Var, usize),
    Concat(Vec<Var>, usize),
    SoftmaxLast(Var),
    SelectBatch(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            ta.zip_map(tb, f)?
        } else {
            let out = broadcast_shape(ta.shape(), tb.shape())?;
            let sa = broadcast_strides(ta.shape(), &out);
            let sb = broadcast_strides(tb.shape(), &out);
            let mut res = Tensor::zeros(&out);
            let (da, db) = (ta.data(), tb.data());
            let r = res.data_mut();
            for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
                let (x, y) = (da[ia], db[ib]);
                r[o] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                };
            });
            res
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Binary(kind, a, b), ng))
    }

    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f = |v: f64| match kind {
            Unary::Silu => v / (1.0 + libm::exp(-v)),
            Unary::Tanh => libm::tanh(v),
            Unary::Sigmoid => sigmoid(v),
            Unary::Exp => libm::exp(v),
            Unary::Sqrt => libm::sqrt(v),
            Unary::Square => v * v,
            Unary::Abs => v.abs(),
            Unary::Acos => libm::acos(v.clamp(-1.0, 1.0)),
            Unary::Clamp(lo, hi) => v.clamp(lo, hi),
        };
        let value = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(value, Op::Unary(kind, x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    /// `acos(clamp(x, -1, 1))`. The derivative is capped near `|x| = 1`.
    pub fn acos(&mut self, x: Var) -> Var {
        self.unary(Unary::Acos, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(value, Op::AddScalar(x), ng)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {} out of range for {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = Tensor::zeros(&out_shape);
        let (d, o) = (t.data(), out.data_mut());
        for a in 0..outer {
            for m in 0..mid {
                let src = &d[(a * mid + m) * inner..(a * mid + m + 1) * inner];
                let dst = &mut o[a * inner..(a + 1) * inner];
                for (dv, sv) in dst.iter_mut().zip(src) {
                    *dv += sv;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SumAxis(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if perm.len() != t.rank() || !is_permutation(perm) {
            return Err(Error::dim(format!(
                "invalid permutation {:?} for {:?}",
                perm,
                t.shape()
            )));
        }
        let value = permute_tensor(t, perm);
        let ng = self.ng(x);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), ng))
    }

    /// `x @ w^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let ws = tw.shape();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(Error::dim(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xs, ws
            )));
        }
        let (fan_in, fan_out) = (ws[1], ws[0]);
        let rows = tx.len() / fan_in;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = fan_out;
        let mut out = Tensor::zeros(&out_shape);
        gemm(
            rows,
            fan_in,
            fan_out,
            1.0,
            tx.data(),
            fan_in,
            1,
            tw.data(),
            1,
            fan_in,
            0.0,
            out.data_mut(),
        );
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [fan_out] {
                return Err(Error::dim(format!(
                    "linear bias {:?} should be [{}]",
                    tb.shape(),
                    fan_out
                )));
            }
            let bd = tb.data().to_vec();
            for row in out.data_mut().chunks_mut(fan_out) {
                for (v, bv) in row.iter_mut().zip(&bd) {
                    *v += bv;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map_or(false, |b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]`
    /// (or `[B, N, K]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!("bmm: {:?} x {:?}", sa, sb)));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim(format!("bmm inner dims: {:?} x {:?}", sa, sb)));
        }
        let mut out = Tensor::zeros(&[batch, m, n]);
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &ta.data()[i * m * k..(i + 1) * m * k],
                k,
                1,
                &tb.data()[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                0.0,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, ng))
    }

    /// 2-D convolution, NCHW input and `[C_out, C_in, k, k]` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let [batch, cin, h, wd] = tx.dims4()?;
        let ws = tw.shape();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::dim(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                tx.shape(),
                ws
            )));
        }
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::dim(format!("conv2d: kernel {} larger than input {:?}", k, tx.shape())));
        }
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let spatial = geo.ho * geo.wo;
        let rows = cin * k * k;
        let mut out = Tensor::zeros(&[batch, cout, geo.ho, geo.wo]);
        let mut cols = vec![0.0; rows * spatial];
        let img = cin * h * wd;
        for i in 0..batch {
            geo.im2col(&tx.data()[i * img..(i + 1) * img], &mut cols);
            gemm(
                cout,
                rows,
                spatial,
                1.0,
                tw.data(),
                rows,
                1,
                &cols,
                spatial,
                1,
                0.0,
                &mut out.data_mut()[i * cout * spatial..(i + 1) * cout * spatial],
            );
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [cout] {
                return Err(Error::dim(format!("conv2d bias {:?} should be [{}]", tb.shape(), cout)));
            }
            let bd = tb.data().to_vec();
            for (j, plane) in out.data_mut().chunks_mut(spatial).enumerate() {
                let bv = bd[j % cout];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map_or(false, |b| self.ng(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Group normalization over `[B, C, ...]` with optional per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Option<Var>,
        beta: Option<Var>,
    ) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() < 2 || groups == 0 || s[1] % groups != 0 {
            return Err(Error::dim(format!(
                "group_norm: {} groups do not divide channels of {:?}",
                groups, s
            )));
        }
        let (batch, ch) = (s[0], s[1]);
        let spatial = tx.len() / (batch * ch);
        let per_group = ch / groups * spatial;
        let mut mean = vec![0.0; batch * groups];
        let mut rstd = vec![0.0; batch * groups];
        let mut out = Tensor::zeros(s);
        let d = tx.data();
        for (gi, chunk) in d.chunks(per_group).enumerate() {
            let m = chunk.iter().sum::<f64>() / per_group as f64;
            let var = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / per_group as f64;
            mean[gi] = m;
            rstd[gi] = 1.0 / libm::sqrt(var + GROUP_NORM_EPS);
        }
        let gdata = gamma.map(|g| self.value(g).data().to_vec());
        let bdata = beta.map(|b| self.value(b).data().to_vec());
        for v in [&gdata, &bdata].into_iter().flatten() {
            if v.len() != ch {
                return Err(Error::dim(format!("group_norm affine needs {} channels", ch)));
            }
        }
        let o = out.data_mut();
        for (idx, (ov, xv)) in o.iter_mut().zip(d).enumerate() {
            let gi = idx / per_group;
            let c = (idx / spatial) % ch;
            let mut y = (xv - mean[gi]) * rstd[gi];
            if let Some(gd) = &gdata {
                y *= gd[c];
            }
            if let Some(bd) = &bdata {
                y += bd[c];
            }
            *ov = y;
        }
        let ng = self.ng(x)
            || gamma.map_or(false, |g| self.ng(g))
            || beta.map_or(false, |b| self.ng(b));
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            ng,
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [b, c, h, w] = tx.dims4()?;
        let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
        let (d, o) = (tx.data(), out.data_mut());
        for p in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    o[(p * 2 * h + y) * 2 * w + xx] = d[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Upsample2x(x), ng))
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        let [b, c, h, w] = tx.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim(format!("avg_pool: {} does not tile {}x{}", k, h, w)));
        }
        let (ho, wo) = (h / k, w / k);
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let (d, o) = (tx.data(), out.data_mut());
        let norm = 1.0 / (k * k) as f64;
        for p in 0..b * c {
            for y in 0..h {
                for xx in 0..w {
                    o[(p * ho + y / k) * wo + xx / k] += d[(p * h + y) * w + xx] * norm;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::AvgPool(x, k), ng))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {} for {:?}", axis, base)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!("concat: {:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(value, Op::Concat(inputs.to_vec(), axis), ng))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax of a scalar"))?;
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SoftmaxLast(x), ng))
    }

    /// Rows `indices` of axis 0.
    pub fn select_batch(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let b = *tx.shape().first().ok_or_else(|| Error::dim("select of a scalar"))?;
        if indices.iter().any(|&i| i >= b) {
            return Err(Error::dim(format!("select_batch index out of range {}", b)));
        }
        let per = tx.len() / b.max(1);
        let mut shape = tx.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&tx.data()[i * per..(i + 1) * per]);
        }
        let value = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SelectBatch(x, indices.to_vec()), ng))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => self.backprop_binary(*kind, *a, *b, g, grads),
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let gx = Tensor::from_fn(xv.shape(), |j| {
                    let (xi, yi, gi) = (xv.data()[j], y.data()[j], g.data()[j]);
                    gi * match *kind {
                        Unary::Silu => {
                            let s = sigmoid(xi);
                            s * (1.0 + xi * (1.0 - s))
                        }
                        Unary::Tanh => 1.0 - yi * yi,
                        Unary::Sigmoid => yi * (1.0 - yi),
                        Unary::Exp => yi,
                        Unary::Sqrt => 0.5 / yi,
                        Unary::Square => 2.0 * xi,
                        Unary::Abs => {
                            if xi > 0.0 {
                                1.0
                            } else if xi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Acos => {
                            if xi.abs() >= 1.0 {
                                0.0
                            } else {
                                -1.0 / libm::sqrt(1.0 - xi * xi).max(1e-6)
                            }
                        }
                        Unary::Clamp(lo, hi) => {
                            if xi >= lo && xi <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::SumAxis(x) => {
                let xs = self.shape(*x).to_vec();
                let gx = reduce_broadcast_back(g, &xs);
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x)).expect("reshape grad");
                self.accumulate(grads, *x, gx);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, permute_tensor(g, &inv));
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, g, grads),
            Op::Bmm { a, b, trans_b } => self.backprop_bmm(*a, *b, *trans_b, g, grads),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.backprop_conv(*x, *w, *b, *stride, *pad, g, grads),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => self.backprop_group_norm(*x, *gamma, *beta, *groups, mean, rstd, g, grads),
            Op::Upsample2x(x) => {
                let [b, c, h, w] = self.value(*x).dims4().expect("rank 4");
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let (gd, o) = (g.data(), gx.data_mut());
                for p in 0..b * c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            o[(p * h + yy / 2) * w + xx / 2] += gd[(p * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool(x, k) => {
                let [b, c, h, w] = self.value(*x).dims4().expect("rank 4");
                let (ho, wo) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let gd = g.data();
                let gx = Tensor::from_fn(&[b, c, h, w], |j| {
                    let xx = j % w;
                    let yy = (j / w) % h;
                    let p = j / (w * h);
                    gd[(p * ho + yy / k) * wo + xx / k] * norm
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(inputs, axis) => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let vs = self.shape(v).to_vec();
                    let chunk = vs[*axis] * inner;
                    if self.ng(v) {
                        let mut data = Vec::with_capacity(numel(&vs));
                        for o in 0..outer {
                            let start = o * total + offset;
                            data.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        self.accumulate(grads, v, Tensor::new(&vs, data).expect("concat grad"));
                    }
                    offset += chunk;
                }
            }
            Op::SoftmaxLast(x) => {
                let n = *y.shape().last().unwrap();
                let mut gx = Tensor::zeros(y.shape());
                for ((gr, yr), out) in g
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(gx.data_mut().chunks_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SelectBatch(x, indices) => {
                let xs = self.shape(*x).to_vec();
                let per = numel(&xs) / xs[0].max(1);
                let mut gx = Tensor::zeros(&xs);
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut gx.data_mut()[src * per..(src + 1) * per];
                    for (d, s) in dst.iter_mut().zip(&g.data()[r * per..(r + 1) * per]) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }

    fn backprop_binary(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = g.shape().to_vec();
        match kind {
            Binary::Add | Binary::Sub => {
                if self.ng(a) {
                    self.accumulate(grads, a, reduce_to_shape(g, ta.shape()));
                }
                if self.ng(b) {
                    let mut gb = reduce_to_shape(g, tb.shape());
                    if matches!(kind, Binary::Sub) {
                        gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Binary::Mul | Binary::Div => {
                let sa = broadcast_strides(ta.shape(), &out);
                let sb = broadcast_strides(tb.shape(), &out);
                let (da, db, gd) = (ta.data(), tb.data(), g.data());
                if self.ng(a) {
                    let mut ga = Tensor::zeros(ta.shape());
                    let gad = ga.data_mut();
                    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
                        gad[ia] += match kind {
                            Binary::Mul => gd[o] * db[ib],
                            _ => gd[o] / db[ib],
                        };
                    });
                    self.accumulate(grads, a, ga);
                }
                if self.ng(b) {
                    let mut gb = Tensor::zeros(tb.shape());
                    let gbd = gb.data_mut();
                    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
                        gbd[ib] += match kind {
                            Binary::Mul => gd[o] * da[ia],
                            _ => -gd[o] * da[ia] / (db[ib] * db[ib]),
                        };
                    });
                    self.accumulate(grads, b, gb);
                }
            }
        }
    }

    fn backprop_linear(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (fan_out, fan_in) = (tw.shape()[0], tw.shape()[1]);
        let rows = tx.len() / fan_in;
        if self.ng(x) {
            let mut gx = Tensor::zeros(tx.shape());
            gemm(
                rows,
                fan_out,
                fan_in,
                1.0,
                g.data(),
                fan_out,
                1,
                tw.data(),
                fan_in,
                1,
                0.0,
                gx.data_mut(),
            );
            self.accumulate(grads, x, gx);
        }
        if self.ng(w) {
            let mut gw = Tensor::zeros(tw.shape());
            gemm(
                fan_out,
                rows,
                fan_in,
                1.0,
                g.data(),
                1,
                fan_out,
                tx.data(),
                fan_in,
                1,
                0.0,
                gw.data_mut(),
            );
            self.accumulate(grads, w, gw);
        }
        if let Some(b) = b {
            if self.ng(b) {
                let mut gb = Tensor::zeros(&[fan_out]);
                for row in g.data().chunks(fan_out) {
                    gb.data_mut().iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                self.accumulate(grads, b, gb);
            }
        }
    }

    fn backprop_bmm(&self, a: Var, b: Var, trans_b: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let n = g.shape()[2];
        if self.ng(a) {
            // ga = g @ b^T  ([M,N] x [N,K])
            let mut ga = Tensor::zeros(ta.shape());
            let (rsb, csb) = if trans_b { (k, 1) } else { (1, n) };
            for i in 0..batch {
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    &g.data()[i * m * n..(i + 1) * m * n],
                    n,
                    1,
                    &tb.data()[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    0.0,
                    &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                );
            }
            self.accumulate(grads, a, ga);
        }
        if self.ng(b) {
            let mut gb = Tensor::zeros(tb.shape());
            for i in 0..batch {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                let out = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // gb [N,K] = g^T @ a
                    gemm(n, m, k, 1.0, gi, 1, n, ai, k, 1, 0.0, out);
                } else {
                    // gb [K,N] = a^T @ g
                    gemm(k, m, n, 1.0, ai, 1, k, gi, n, 1, 0.0, out);
                }
            }
            self.accumulate(grads, b, gb);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let [batch, cin, h, wd] = tx.dims4().expect("rank 4");
        let (cout, k) = (tw.shape()[0], tw.shape()[2]);
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: g.shape()[2],
            wo: g.shape()[3],
        };
        let spatial = geo.ho * geo.wo;
        let rows = cin * k * k;
        let img = cin * h * wd;
        let mut cols = vec![0.0; rows * spatial];
        let mut gw = self.ng(w).then(|| Tensor::zeros(tw.shape()));
        let mut gx = self.ng(x).then(|| Tensor::zeros(tx.shape()));
        for i in 0..batch {
            let gi = &g.data()[i * cout * spatial..(i + 1) * cout * spatial];
            if let Some(gw) = gw.as_mut() {
                geo.im2col(&tx.data()[i * img..(i + 1) * img], &mut cols);
                gemm(cout, spatial, rows, 1.0, gi, spatial, 1, &cols, 1, spatial, 1.0, gw.data_mut());
            }
            if let Some(gx) = gx.as_mut() {
                gemm(rows, cout, spatial, 1.0, tw.data(), 1, rows, gi, spatial, 1, 0.0, &mut cols);
                geo.col2im(&cols, &mut gx.data_mut()[i * img..(i + 1) * img]);
            }
        }
        if let Some(gw) = gw {
            self.accumulate(grads, w, gw);
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, gx);
        }
        if let Some(b) = b {
            if self.ng(b) {
                let mut gb = Tensor::zeros(&[cout]);
                for (j, plane) in g.data().chunks(spatial).enumerate() {
                    gb.data_mut()[j % cout] += plane.iter().sum::<f64>();
                }
                self.accumulate(grads, b, gb);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_group_norm(
        &self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        mean: &[f64],
        rstd: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let tx = self.value(x);
        let s = tx.shape();
        let (batch, ch) = (s[0], s[1]);
        let spatial = tx.len() / (batch * ch);
        let per_group = ch / groups * spatial;
        let gdata = gamma.map(|v| self.value(v).data());
        let (xd, gd) = (tx.data(), g.data());
        let xhat = |idx: usize| (xd[idx] - mean[idx / per_group]) * rstd[idx / per_group];
        if gamma.map_or(false, |v| self.ng(v)) || beta.map_or(false, |v| self.ng(v)) {
            let mut ggamma = Tensor::zeros(&[ch]);
            let mut gbeta = Tensor::zeros(&[ch]);
            for idx in 0..xd.len() {
                let c = (idx / spatial) % ch;
                ggamma.data_mut()[c] += gd[idx] * xhat(idx);
                gbeta.data_mut()[c] += gd[idx];
            }
            if let Some(v) = gamma {
                self.accumulate(grads, v, ggamma);
            }
            if let Some(v) = beta {
                self.accumulate(grads, v, gbeta);
            }
        }
        if self.ng(x) {
            let mut gx = Tensor::zeros(s);
            let n = per_group as f64;
            let gxd = gx.data_mut();
            for gi in 0..batch * groups {
                let range = gi * per_group..(gi + 1) * per_group;
                let dxhat = |idx: usize| {
                    let c = (idx / spatial) % ch;
                    gd[idx] * gdata.map_or(1.0, |gm| gm[c])
                };
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for idx in range.clone() {
                    let d = dxhat(idx);
                    sum_d += d;
                    sum_dx += d * xhat(idx);
                }
                for idx in range {
                    gxd[idx] = rstd[gi] * (dxhat(idx) - sum_d / n - xhat(idx) * sum_dx / n);
                }
            }
            self.accumulate(grads, x, gx);
        }
    }
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    /// Output columns `lo..hi` whose input column `ox + kx - pad` is in
    /// bounds, for stride 1.
    fn valid_span(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo).max(lo);
        (lo, hi)
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let spatial = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * spatial;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_span(kx);
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            if lo < hi {
                                let start = lo + kx - self.pad;
                                dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            }
                            continue;
                        }
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let spatial = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * spatial;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        let src = &cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_span(kx);
                            if lo < hi {
                                let start = lo + kx - self.pad;
                                for (d, s) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                    *d += s;
                                }
                            }
                            continue;
                        }
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < perm.len() && !core::mem::replace(&mut seen[p], true))
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let src_shape = t.shape();
    let rank = src_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let mut src_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let zero = vec![0; rank];
    let mut out = Tensor::zeros(&out_shape);
    let (d, o) = (t.data(), out.data_mut());
    for_each_broadcast(&out_shape, &strides, &zero, |oi, si, _| o[oi] = d[si]);
    out
}

/// Broadcasts a keep-dim reduction gradient back to `shape`.
fn reduce_broadcast_back(g: &Tensor, shape: &[usize]) -> Tensor {
    let strides = broadcast_strides(g.shape(), shape);
    let zero = vec![0; shape.len()];
    let mut out = Tensor::zeros(shape);
    let (gd, o) = (g.data(), out.data_mut());
    for_each_broadcast(shape, &strides, &zero, |oi, gi, _| o[oi] = gd[gi]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn(shape, f)
    }

    /// Central differences of `loss` w.r.t. every element of `x`.
    fn numeric_grad(x: &Tensor, loss: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (loss(&p) - loss(&m)) / (2.0 * h)
        })
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale < tol, "{} vs {}", x, y);
        }
    }

    /// Runs `build` once with `x` as a parameter and compares the analytic
    /// gradient of the weighted sum of outputs against finite differences.
    fn check(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let weights = |shape: &[usize]| t(shape, |i| 0.3 + ((i * 7919) % 13) as f64 / 10.0);
        let eval = |xv: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(xv.clone());
            let y = build(&mut g, v);
            let w = weights(g.shape(y));
            g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let y = build(&mut g, v);
        let w = g.constant(weights(g.shape(y)));
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        assert_close(grads.get(v).unwrap(), &numeric_grad(x, eval), 1e-5);
    }

    #[test]
    fn conv_gradients() {
        let x = t(&[2, 3, 5, 5], |i| ((i * 37) % 17) as f64 / 17.0 - 0.5);
        let w = t(&[4, 3, 3, 3], |i| ((i * 13) % 11) as f64 / 11.0 - 0.5);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let wc = w.clone();
            check(&x, |g, v| {
                let w = g.constant(wc.clone());
                g.conv2d(v, w, None, stride, pad).unwrap()
            });
            let xc = x.clone();
            check(&w, |g, v| {
                let x = g.constant(xc.clone());
                g.conv2d(x, v, None, stride, pad).unwrap()
            });
        }
    }

    #[test]
    fn group_norm_gradients() {
        let x = t(&[2, 4, 3, 3], |i| libm::sin(i as f64 * 0.7));
        let gamma = t(&[4], |i| 1.0 + i as f64 * 0.2);
        let gc = gamma.clone();
        check(&x, |g, v| {
            let gm = g.constant(gc.clone());
            g.group_norm(v, 2, Some(gm), None).unwrap()
        });
        let xc = x.clone();
        check(&gamma, |g, v| {
            let x = g.constant(xc.clone());
            g.group_norm(x, 2, Some(v), None).unwrap()
        });
    }

    #[test]
    fn softmax_bmm_permute_gradients() {
        let x = t(&[2, 3, 4], |i| libm::cos(i as f64 * 0.3));
        check(&x, |g, v| g.softmax_last(v).unwrap());
        let other = t(&[2, 5, 4], |i| libm::sin(i as f64));
        let oc = other.clone();
        check(&x, |g, v| {
            let o = g.constant(oc.clone());
            g.bmm(v, o, true).unwrap()
        });
        check(&x, |g, v| g.permute(v, &[2, 0, 1]).unwrap());
        let xc = x.clone();
        check(&other, |g, v| {
            let a = g.constant(xc.clone());
            g.bmm(a, v, true).unwrap()
        });
        let m = t(&[2, 4, 3], |i| i as f64 * 0.1);
        check(&x, |g, v| {
            let c = g.constant(m.clone());
            g.bmm(v, c, false).unwrap()
        });
    }

    #[test]
    fn broadcast_binary_gradients() {
        let a = t(&[2, 3, 4], |i| 0.5 + i as f64 * 0.05);
        let b = t(&[3, 1], |i| 1.0 + i as f64);
        let bc = b.clone();
        check(&a, |g, v| {
            let c = g.constant(bc.clone());
            g.div(v, c).unwrap()
        });
        let ac = a.clone();
        check(&b, |g, v| {
            let c = g.constant(ac.clone());
            let p = g.mul(c, v).unwrap();
            g.div(p, v).unwrap()
        });
        check(&b, |g, v| {
            let c = g.constant(ac.clone());
            g.div(c, v).unwrap()
        });
    }

    #[test]
    fn pooling_concat_linear_gradients() {
        let x = t(&[1, 2, 4, 4], |i| libm::sin(i as f64));
        check(&x, |g, v| g.avg_pool(v, 2).unwrap());
        check(&x, |g, v| g.upsample2x(v).unwrap());
        check(&x, |g, v| {
            let s = g.silu(v);
            g.concat(&[v, s], 1).unwrap()
        });
        check(&x, |g, v| g.sum_axis(v, 1).unwrap());
        let w = t(&[3, 4], |i| libm::cos(i as f64));
        check(&x, |g, v| {
            let w = g.constant(w.clone());
            g.linear(v, w, None).unwrap()
        });
        let xc = x.clone();
        check(&w, |g, v| {
            let x = g.constant(xc.clone());
            let b = g.constant(Tensor::full(&[3], 0.5));
            g.linear(x, v, Some(b)).unwrap()
        });
        check(&x, |g, v| g.select_batch(v, &[0, 0]).unwrap());
    }

    #[test]
    fn unary_gradients() {
        let x = t(&[10], |i| i as f64 * 0.17 - 0.8);
        check(&x, |g, v| g.tanh(v));
        check(&x, |g, v| g.sigmoid(v));
        check(&x, |g, v| g.exp(v));
        check(&x, |g, v| g.acos(v));
        check(&x, |g, v| {
            let s = g.square(v);
            let s = g.add_scalar(s, 0.1);
            g.sqrt(s)
        });
        check(&x, |g, v| g.clamp(v, -0.5, 0.5));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[3], 2.0));
        let p = g.param(Tensor::full(&[3], 1.0));
        let y = g.mul(c, p).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
