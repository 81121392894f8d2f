//! Eager reverse-mode automatic differentiation.
//!
//! Every operation is evaluated immediately and appended to a [`Tape`]. Node
//! indices are assigned in creation order, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Convolutions use the cross-correlation convention (no kernel flip) with
//! zero "same" padding, consistently in forward, backward and the FLOP tally.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward FLOPs executed on a tape, split by operation family.
///
/// One multiply-accumulate counts as two FLOPs; softmax is charged five FLOPs
/// per element. Elementwise arithmetic is not tallied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub conv2d: u64,
    pub matmul: u64,
    pub softmax: u64,
    pub conv1d: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.conv2d + self.matmul + self.softmax + self.conv1d
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Softmax { x: usize, axis: usize },
    Conv2d { x: usize, w: usize, b: Option<usize> },
    Conv1dRows { x: usize, k: usize },
    FilterValid { x: usize, kernel: Tensor<T> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Abs(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder and gradient store. One tape per thread of execution.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    check_finite: bool,
    flops: FlopTally,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, cin: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let kdim = kh * kw * cin;
    let mut col = vec![T::zero(); h * w * kdim];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col[(y * w + xx) * kdim..(y * w + xx + 1) * kdim];
            for dy in 0..kh {
                let sy = y as isize + dy as isize - ph as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let sx = xx as isize + dx as isize - pw as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * cin;
                    let dst = (dy * kw + dx) * cin;
                    row[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], h: usize, w: usize, cin: usize, kh: usize, kw: usize, dx_out: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let kdim = kh * kw * cin;
    for y in 0..h {
        for xx in 0..w {
            let row = &col[(y * w + xx) * kdim..(y * w + xx + 1) * kdim];
            for dy in 0..kh {
                let sy = y as isize + dy as isize - ph as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let sx = xx as isize + dx as isize - pw as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * cin;
                    let src = (dy * kw + dx) * cin;
                    for c in 0..cin {
                        dx_out[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// Row-wise 1-D cross-correlation with zero padding, accumulated into `out`.
fn conv1d_rows_into<T: Scalar>(x: &[T], rows: usize, len: usize, k: &[T], out: &mut [T]) {
    let pad = (k.len() / 2) as isize;
    for r in 0..rows {
        let xr = &x[r * len..(r + 1) * len];
        let yr = &mut out[r * len..(r + 1) * len];
        for (j, &kj) in k.iter().enumerate() {
            let shift = j as isize - pad;
            let lo = (-shift).max(0) as usize;
            let hi = (len as isize - shift).min(len as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src = &xr[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
            for (y, &v) in yr[lo..hi].iter_mut().zip(src) {
                *y += kj * v;
            }
        }
    }
}

fn softmax_forward<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for j in 0..n {
                y[base + j * inner] *= inv;
            }
        }
    }
    y
}

impl<T: Scalar> Tape<T> {
    /// A new tape; finite-value guards follow `debug_assertions`.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), check_finite: cfg!(debug_assertions), flops: FlopTally::default() }
    }

    /// Enables or disables the non-finite output guard (disabled for benchmarks).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopTally {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `[m x k] x [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        self.flops.matmul += 2 * (m * k * n) as u64;
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        self.push("transpose", value, Op::Transpose(x.0), &[x.0])
    }

    /// Numerically stable softmax along `axis`. NaN input is rejected.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let y = softmax_forward(self.value(x).data(), outer, n, inner);
        self.flops.softmax += 5 * y.len() as u64;
        let value = Tensor::new(&shape, y)?;
        self.push("softmax", value, Op::Softmax { x: x.0, axis }, &[x.0])
    }

    // ── convolutions ────────────────────────────────────────────────

    /// Same-padded, stride-1 2-D cross-correlation.
    ///
    /// `x: H x W x Cin`, `w: kh x kw x Cin x Cout`, optional `bias: Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (h, wd, cin) = match *sx.as_slice() {
            [h, w, c] => (h, w, c),
            _ => return Err(Error::shape("conv2d", &sx, &sw)),
        };
        let (kh, kw, wcin, cout) = match *sw.as_slice() {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape("conv2d", &sx, &sw)),
        };
        if wcin != cin {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel sides must be odd, got {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let kdim = kh * kw * cin;
        let mut out = vec![T::zero(); h * wd * cout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let xv = self.value(x).data();
        if kh == 1 && kw == 1 {
            T::gemm(false, false, h * wd, kdim, cout, T::one(), xv, self.value(w).data(), beta, &mut out);
        } else {
            let col = im2col(xv, h, wd, cin, kh, kw);
            T::gemm(false, false, h * wd, kdim, cout, T::one(), &col, self.value(w).data(), beta, &mut out);
        }
        self.flops.conv2d += 2 * (h * wd * kdim * cout) as u64;
        let value = Tensor::new(&[h, wd, cout], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        self.push("conv2d", value, Op::Conv2d { x: x.0, w: w.0, b: bias.map(|b| b.0) }, &inputs)
    }

    /// Convolves every row of `x: R x L` with one shared odd-length kernel
    /// (`kw` or `1 x kw`), zero "same" padding.
    pub fn conv1d_rows(&mut self, x: Var, k: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        let (rows, len) = match *sx.as_slice() {
            [r, l] => (r, l),
            _ => return Err(Error::shape("conv1d_rows", &sx, &sk)),
        };
        let kw = match *sk.as_slice() {
            [kw] | [1, kw] => kw,
            _ => return Err(Error::shape("conv1d_rows", &sx, &sk)),
        };
        if kw % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel length must be odd, got {kw}")));
        }
        let mut out = vec![T::zero(); rows * len];
        conv1d_rows_into(self.value(x).data(), rows, len, self.value(k).data(), &mut out);
        self.flops.conv1d += 2 * (rows * len * kw) as u64;
        let value = Tensor::new(&[rows, len], out)?;
        self.push("conv1d_rows", value, Op::Conv1dRows { x: x.0, k: k.0 }, &[x.0, k.0])
    }

    /// Per-channel "valid" correlation of `x: H x W x C` with a fixed
    /// `kh x kw` kernel. Differentiable with respect to `x` only.
    pub fn filter_valid(&mut self, x: Var, kernel: &Tensor<T>) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let (kh, kw) = match *kernel.shape() {
            [a, b] => (a, b),
            _ => return Err(Error::shape("filter_valid", &[h, w, c], kernel.shape())),
        };
        if kh > h || kw > w {
            return Err(Error::shape("filter_valid", &[h, w, c], kernel.shape()));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let xv = self.value(x).data();
        let kv = kernel.data();
        let mut out = vec![T::zero(); oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                let o = &mut out[(y * ow + xx) * c..(y * ow + xx + 1) * c];
                for i in 0..kh {
                    for j in 0..kw {
                        let kij = kv[i * kw + j];
                        let src = &xv[((y + i) * w + xx + j) * c..((y + i) * w + xx + j + 1) * c];
                        for (ov, &sv) in o.iter_mut().zip(src) {
                            *ov += kij * sv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[oh, ow, c], out)?;
        self.push("filter_valid", value, Op::FilterValid { x: x.0, kernel: kernel.clone() }, &[x.0])
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(name, value, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x.0, s), &[x.0])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + s);
        self.push("add_scalar", value, Op::AddScalar(x.0), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(x.0), &[x.0])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.abs());
        self.push("abs", value, Op::Abs(x.0), &[x.0])
    }

    /// Elementwise square root; the derivative is unbounded at zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.sqrt());
        self.push("sqrt", value, Op::Sqrt(x.0), &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push("mean", value, Op::Mean(x.0), &[x.0])
    }

    // ── shape algebra ───────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push("concat", value, Op::Concat { inputs: ids.clone(), axis }, &ids)
    }

    /// `x[..., start..end, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid("slice", format!("range {start}..{end} on axis {axis} invalid for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        let xv = self.value(x).data();
        for o in 0..outer {
            let off = o * n * inner + start * inner;
            out.extend_from_slice(&xv[off..off + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let value = Tensor::new(&new_shape, out)?;
        self.push("slice", value, Op::Slice { x: x.0, axis, start }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x.0), &[x.0])
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populates gradients of the scalar `root` with respect to every node
    /// that (transitively) depends on a `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[root.0].requires_grad {
            return Ok(());
        }
        grads[root.0] = Some(Tensor::ones(&root_shape));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop_node(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    contribution: impl FnOnce() -> Tensor<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let c = contribution();
    match &mut grads[id] {
        Some(g) => {
            for (a, &b) in g.data_mut().iter_mut().zip(c.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(c),
    }
}

fn accumulate_with<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    f(slot.as_mut().unwrap().data_mut());
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], node: &Node<T>, g: &Tensor<T>) {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            // dA = dY B^T, dB = A^T dY
            accumulate_with(nodes, grads, *a, |da| {
                T::gemm(false, true, m, n, k, T::one(), g.data(), val(*b).data(), T::one(), da)
            });
            accumulate_with(nodes, grads, *b, |db| {
                T::gemm(true, false, k, m, n, T::one(), val(*a).data(), g.data(), T::one(), db)
            });
        }
        Op::Transpose(x) => {
            accumulate(nodes, grads, *x, || g.transpose2().expect("rank-2 gradient"));
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            accumulate_with(nodes, grads, *x, |dx| {
                let gd = g.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..n {
                            let p = base + j * inner;
                            dx[p] += y[p] * (gd[p] - dot);
                        }
                    }
                }
            });
        }
        Op::Conv2d { x, w, b } => {
            let (h, wd, cin) = val(*x).hwc().expect("conv input is HWC");
            let ws = val(*w).shape();
            let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
            let kdim = kh * kw * cin;
            let pointwise = kh == 1 && kw == 1;
            let need_w = nodes[*w].requires_grad;
            let need_x = nodes[*x].requires_grad;
            if need_w {
                let col_owned;
                let col: &[T] = if pointwise {
                    val(*x).data()
                } else {
                    col_owned = im2col(val(*x).data(), h, wd, cin, kh, kw);
                    &col_owned
                };
                accumulate_with(nodes, grads, *w, |dw| {
                    T::gemm(true, false, kdim, h * wd, cout, T::one(), col, g.data(), T::one(), dw)
                });
            }
            if need_x {
                if pointwise {
                    accumulate_with(nodes, grads, *x, |dx| {
                        T::gemm(false, true, h * wd, cout, kdim, T::one(), g.data(), val(*w).data(), T::one(), dx)
                    });
                } else {
                    let mut dcol = vec![T::zero(); h * wd * kdim];
                    T::gemm(false, true, h * wd, cout, kdim, T::one(), g.data(), val(*w).data(), T::zero(), &mut dcol);
                    accumulate_with(nodes, grads, *x, |dx| col2im(&dcol, h, wd, cin, kh, kw, dx));
                }
            }
            if let Some(b) = b {
                accumulate_with(nodes, grads, *b, |db| {
                    for row in g.data().chunks(cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
        }
        Op::Conv1dRows { x, k } => {
            let (rows, len) = (val(*x).shape()[0], val(*x).shape()[1]);
            let kv = val(*k).data();
            let kw = kv.len();
            let pad = (kw / 2) as isize;
            let gd = g.data();
            accumulate_with(nodes, grads, *x, |dx| {
                // adjoint of correlation: correlate with the reversed kernel
                let rev: Vec<T> = kv.iter().rev().copied().collect();
                conv1d_rows_into(gd, rows, len, &rev, dx);
            });
            accumulate_with(nodes, grads, *k, |dk| {
                let xv = val(*x).data();
                for r in 0..rows {
                    let xr = &xv[r * len..(r + 1) * len];
                    let gr = &gd[r * len..(r + 1) * len];
                    for (j, dkj) in dk.iter_mut().enumerate() {
                        let shift = j as isize - pad;
                        let lo = (-shift).max(0) as usize;
                        let hi = (len as isize - shift).min(len as isize).max(0) as usize;
                        let mut acc = T::zero();
                        for l in lo..hi {
                            acc += gr[l] * xr[(l as isize + shift) as usize];
                        }
                        *dkj += acc;
                    }
                }
            });
        }
        Op::FilterValid { x, kernel } => {
            let (h, w, c) = val(*x).hwc().expect("filter input is HWC");
            let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let kv = kernel.data();
            let gd = g.data();
            accumulate_with(nodes, grads, *x, |dx| {
                for y in 0..oh {
                    for xx in 0..ow {
                        let go = &gd[(y * ow + xx) * c..(y * ow + xx + 1) * c];
                        for i in 0..kh {
                            for j in 0..kw {
                                let kij = kv[i * kw + j];
                                let base = ((y + i) * w + xx + j) * c;
                                for (d, &gv) in dx[base..base + c].iter_mut().zip(go) {
                                    *d += kij * gv;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, || g.clone());
            accumulate(nodes, grads, *b, || g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, || g.clone());
            accumulate(nodes, grads, *b, || g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, || g.zip_map(val(*b), |gv, bv| gv * bv).unwrap());
            accumulate(nodes, grads, *b, || g.zip_map(val(*a), |gv, av| gv * av).unwrap());
        }
        Op::Div(a, b) => {
            accumulate(nodes, grads, *a, || g.zip_map(val(*b), |gv, bv| gv / bv).unwrap());
            accumulate(nodes, grads, *b, || {
                // d(a/b)/db = -y/b
                let t = g.zip_map(&node.value, |gv, yv| -gv * yv).unwrap();
                t.zip_map(val(*b), |tv, bv| tv / bv).unwrap()
            });
        }
        Op::Scale(x, s) => {
            let s = *s;
            accumulate(nodes, grads, *x, || g.map(|v| v * s));
        }
        Op::AddScalar(x) => accumulate(nodes, grads, *x, || g.clone()),
        Op::Relu(x) => {
            accumulate(nodes, grads, *x, || {
                g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() }).unwrap()
            });
        }
        Op::Abs(x) => {
            accumulate(nodes, grads, *x, || g.zip_map(val(*x), |gv, xv| gv * xv.signum_or_zero()).unwrap());
        }
        Op::Sqrt(x) => {
            let two = T::one() + T::one();
            accumulate(nodes, grads, *x, || g.zip_map(&node.value, |gv, yv| gv / (two * yv)).unwrap());
        }
        Op::Sum(x) => {
            let gv = g.item();
            accumulate(nodes, grads, *x, || Tensor::full(val(*x).shape(), gv));
        }
        Op::Mean(x) => {
            let gv = g.item() / T::from_usize(val(*x).numel()).unwrap();
            accumulate(nodes, grads, *x, || Tensor::full(val(*x).shape(), gv));
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for &id in inputs {
                let len = val(id).shape()[*axis];
                accumulate_with(nodes, grads, id, |dx| {
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        let dst = o * len * inner;
                        for (d, &v) in dx[dst..dst + len * inner].iter_mut().zip(&g.data()[src..src + len * inner]) {
                            *d += v;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
            let width = node.value.shape()[*axis] * inner;
            accumulate_with(nodes, grads, *x, |dx| {
                for o in 0..outer {
                    let off = o * n * inner + start * inner;
                    for (d, &v) in dx[off..off + width].iter_mut().zip(&g.data()[o * width..(o + 1) * width]) {
                        *d += v;
                    }
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, || g.reshape(val(*x).shape()).unwrap());
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Scalar> SignumOrZero for T {
    fn signum_or_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}
