//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in strict reverse order
//! and accumulates vector-Jacobian products into the inputs. A tape is
//! confined to one thread; independent tapes never share gradient state.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_map, broadcast_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Matmul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    SampleLinear {
        x: Var,
        pos: Var,
        axis: usize,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Split `shape` around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, `c: k×n`.
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

struct MatmulDims {
    batch: Vec<usize>,
    a_map: Vec<usize>,
    b_map: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", format!("operands need rank >= 2: {a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", format!("inner extents differ: {a:?} x {b:?}")));
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let batch = broadcast_shape(a_lead, b_lead)
        .ok_or_else(|| Error::dim("matmul", format!("leading extents do not broadcast: {a:?} x {b:?}")))?;
    Ok(MatmulDims {
        a_map: broadcast_map(a_lead, &batch),
        b_map: broadcast_map(b_lead, &batch),
        batch,
        m,
        k,
        n,
    })
}

fn conv1d_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, ext, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * ext + j) * inner + i;
            let max = (0..ext).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..ext {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..ext {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("softmax preserves shape")
}

/// Clamped linear interpolation weights for a fractional position on `0..len`.
/// Returns (lower index, upper index, fraction, whether the position was clamped).
fn interp(pos: f64, len: usize) -> (usize, usize, f64, bool) {
    let hi = (len - 1) as f64;
    if pos < 0.0 {
        return (0, 0, 0.0, true);
    }
    if pos >= hi {
        return (len - 1, len - 1, 0.0, pos > hi);
    }
    let lo = pos.floor();
    let i0 = lo as usize;
    (i0, (i0 + 1).min(len - 1), pos - lo, false)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
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
        self.rg(v)
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::dim(op, format!("shapes {sa:?} and {sb:?} do not broadcast")))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(sa, &out_shape);
            let mb = broadcast_map(sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok((Tensor::new(&out_shape, data)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..ext {
                let row = &src[(o * ext + j) * inner..(o * ext + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SumAxis { x, axis }, rg))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", self.shape(x), axis)?;
        let ext = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / ext as f64))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over the leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let nb = d.a_map.len();
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        let mut out = vec![0.0; nb * sc];
        for bi in 0..nb {
            gemm_acc(
                &ad[d.a_map[bi] * sa..(d.a_map[bi] + 1) * sa],
                &bd[d.b_map[bi] * sb..(d.b_map[bi] + 1) * sb],
                &mut out[bi * sc..(bi + 1) * sc],
                d.m,
                d.k,
                d.n,
            );
        }
        let mut shape = d.batch.clone();
        shape.extend([d.m, d.n]);
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Matmul(a, b), rg))
    }

    /// Cross-correlation of `x: [B, L, C_in]` with `w: [K, C_in, C_out]`,
    /// zero padding on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] {
            return Err(Error::dim(
                "conv1d",
                format!("input {xs:?} incompatible with kernel {ws:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        let (b, l, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[2]);
        let lout = conv1d_out_len(l, k, stride, padding).ok_or_else(|| {
            Error::dim(
                "conv1d",
                format!(
                    "kernel of length {k} exceeds padded input {} (input {xs:?})",
                    l + 2 * padding
                ),
            )
        })?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * lout * cout];
        for bi in 0..b {
            for o in 0..lout {
                let orow = &mut out[(bi * lout + o) * cout..(bi * lout + o + 1) * cout];
                for kk in 0..k {
                    let t = (o * stride + kk) as isize - padding as isize;
                    if t < 0 || t as usize >= l {
                        continue;
                    }
                    let xrow = &xd[(bi * l + t as usize) * cin..(bi * l + t as usize + 1) * cin];
                    gemm_acc(xrow, &wd[kk * cin * cout..(kk + 1) * cin * cout], orow, 1, cin, cout);
                }
            }
        }
        let t = Tensor::new(&[b, lout, cout], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv1d { x, w, stride, padding }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(x), axis)?;
        let t = softmax_forward(self.value(x), axis);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Linear interpolation of `x` at fractional indices along `axis`.
    ///
    /// `pos` has the same rank as `x`; its extent on `axis` is the number of
    /// samples drawn, every other extent equals `x`'s or is 1 (broadcast).
    /// Positions are clamped to `[0, T - 1]`.
    pub fn sample_linear(&mut self, x: Var, pos: Var, axis: usize) -> Result<Var> {
        let (xs, ps) = (self.shape(x).to_vec(), self.shape(pos).to_vec());
        check_axis("sample_linear", &xs, axis)?;
        if ps.len() != xs.len() {
            return Err(Error::dim(
                "sample_linear",
                format!("positions {ps:?} vs input {xs:?}: rank differs"),
            ));
        }
        let mut out_shape = xs.clone();
        out_shape[axis] = ps[axis];
        if broadcast_shape(&ps, &out_shape).as_deref() != Some(&out_shape[..]) {
            return Err(Error::dim(
                "sample_linear",
                format!("positions {ps:?} do not broadcast to {out_shape:?}"),
            ));
        }
        let pd = self.value(pos).data();
        if let Some(bad) = pd.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sample_linear position {bad}")));
        }
        let pmap = broadcast_map(&ps, &out_shape);
        let (outer, t_len, inner) = axis_split(&xs, axis);
        let m = ps[axis];
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for j in 0..m {
                for i in 0..inner {
                    let flat = (o * m + j) * inner + i;
                    let (i0, i1, fr, _) = interp(pd[pmap[flat]], t_len);
                    let base = o * t_len * inner + i;
                    out[flat] = (1.0 - fr) * xd[base + i0 * inner] + fr * xd[base + i1 * inner];
                }
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.rg(x) || self.rg(pos);
        Ok(self.push(t, Op::SampleLinear { x, pos, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} out of bounds for {shape:?} axis {axis}", start + len),
            ));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let t = Tensor::new(&out_shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.nodes[v.0].value.shape(), g).expect("gradient shape"));
            }
        }
    }

    /// Reduce a gradient over the broadcast output back to `input`'s shape.
    fn unbroadcast(&self, input: Var, out_shape: &[usize], g: &[f64], scale: Option<&[f64]>) -> Vec<f64> {
        let in_shape = self.shape(input);
        if in_shape == out_shape {
            return match scale {
                Some(s) => g.iter().zip(s).map(|(a, b)| a * b).collect(),
                None => g.to_vec(),
            };
        }
        let map = broadcast_map(in_shape, out_shape);
        let mut acc = vec![0.0; self.value(input).numel()];
        for (j, &i) in map.iter().enumerate() {
            acc[i] += match scale {
                Some(s) => g[j] * s[j],
                None => g[j],
            };
        }
        acc
    }

    /// Gradient of `other` broadcast to the output shape, for the product rule.
    fn broadcast_values(&self, other: Var, out_shape: &[usize]) -> Vec<f64> {
        let s = self.shape(other);
        let d = self.value(other).data();
        if s == out_shape {
            d.to_vec()
        } else {
            broadcast_map(s, out_shape).into_iter().map(|i| d[i]).collect()
        }
    }

    /// Back-propagate from a one-element `loss`. Gradients accumulate into any
    /// gradients already present; call [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        // propagate into a fresh buffer so earlier gradients are not re-propagated
        let previous = std::mem::replace(&mut self.grads, vec![None; self.nodes.len()]);
        self.accumulate(loss, vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gt) = self.grads[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            self.backprop_node(idx, &op, gt.data());
            self.grads[idx] = Some(gt);
        }
        for (slot, old) in self.grads.iter_mut().zip(previous) {
            match (slot.as_mut(), old) {
                (Some(new), Some(old)) => {
                    for (a, b) in new.data_mut().iter_mut().zip(old.data()) {
                        *a += b;
                    }
                }
                (None, Some(old)) => *slot = Some(old),
                _ => {}
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, op: &Op, g: &[f64]) {
        let out_shape = self.nodes[idx].value.shape().to_vec();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = self.unbroadcast(a, &out_shape, g, None);
                let gb = self.unbroadcast(b, &out_shape, g, None);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.unbroadcast(a, &out_shape, g, None);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                let gb = self.unbroadcast(b, &out_shape, &neg, None);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.broadcast_values(b, &out_shape);
                    let ga = self.unbroadcast(a, &out_shape, g, Some(&bv));
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let av = self.broadcast_values(a, &out_shape);
                    let gb = self.unbroadcast(b, &out_shape, g, Some(&av));
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(x, g.iter().map(|v| v * c).collect());
            }
            Op::Relu(x) => {
                let xd = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Tanh(x) => {
                let y = self.nodes[idx].value.data();
                let gx = g.iter().zip(y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
                self.accumulate(x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, ext, inner) = axis_split(self.shape(x), axis);
                let mut gx = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    for j in 0..ext {
                        gx[(o * ext + j) * inner..(o * ext + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Matmul(a, b) => {
                let d = matmul_dims(self.shape(a), self.shape(b)).expect("validated in forward");
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                let nb = d.a_map.len();
                if self.rg(a) {
                    let bd = self.value(b).data();
                    let mut ga = vec![0.0; self.value(a).numel()];
                    for bi in 0..nb {
                        let (ai, bj) = (d.a_map[bi], d.b_map[bi]);
                        gemm_nt_acc(
                            &g[bi * sc..(bi + 1) * sc],
                            &bd[bj * sb..(bj + 1) * sb],
                            &mut ga[ai * sa..(ai + 1) * sa],
                            d.m,
                            d.n,
                            d.k,
                        );
                    }
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let ad = self.value(a).data();
                    let mut gb = vec![0.0; self.value(b).numel()];
                    for bi in 0..nb {
                        let (ai, bj) = (d.a_map[bi], d.b_map[bi]);
                        gemm_tn_acc(
                            &ad[ai * sa..(ai + 1) * sa],
                            &g[bi * sc..(bi + 1) * sc],
                            &mut gb[bj * sb..(bj + 1) * sb],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::Conv1d { x, w, stride, padding } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (b, l, cin) = (xs[0], xs[1], xs[2]);
                let (k, cout) = (ws[0], ws[2]);
                let lout = out_shape[1];
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for o in 0..lout {
                        let grow = &g[(bi * lout + o) * cout..(bi * lout + o + 1) * cout];
                        for kk in 0..k {
                            let t = (o * stride + kk) as isize - padding as isize;
                            if t < 0 || t as usize >= l {
                                continue;
                            }
                            let xoff = (bi * l + t as usize) * cin;
                            let woff = kk * cin * cout;
                            gemm_nt_acc(
                                grow,
                                &wd[woff..woff + cin * cout],
                                &mut gx[xoff..xoff + cin],
                                1,
                                cout,
                                cin,
                            );
                            gemm_tn_acc(
                                &xd[xoff..xoff + cin],
                                grow,
                                &mut gw[woff..woff + cin * cout],
                                1,
                                cin,
                                cout,
                            );
                        }
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(w, gw);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[idx].value.data();
                let (outer, ext, inner) = axis_split(&out_shape, axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * ext + j) * inner + i;
                        let dot: f64 = (0..ext).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..ext {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::SampleLinear { x, pos, axis } => {
                let xs = self.shape(x).to_vec();
                let ps = self.shape(pos).to_vec();
                let pmap = broadcast_map(&ps, &out_shape);
                let (outer, t_len, inner) = axis_split(&xs, axis);
                let m = out_shape[axis];
                let (xd, pd) = (self.value(x).data(), self.value(pos).data());
                let mut gx = vec![0.0; xd.len()];
                let mut gp = vec![0.0; pd.len()];
                for o in 0..outer {
                    for j in 0..m {
                        for i in 0..inner {
                            let flat = (o * m + j) * inner + i;
                            let (i0, i1, fr, clamped) = interp(pd[pmap[flat]], t_len);
                            let base = o * t_len * inner + i;
                            gx[base + i0 * inner] += (1.0 - fr) * g[flat];
                            gx[base + i1 * inner] += fr * g[flat];
                            if !clamped {
                                gp[pmap[flat]] += g[flat] * (xd[base + i1 * inner] - xd[base + i0 * inner]);
                            }
                        }
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(pos, gp);
            }
            Op::Reshape(x) => {
                self.accumulate(x, g.to_vec());
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(x).to_vec();
                let (outer, ext, inner) = axis_split(&xs, axis);
                let len = out_shape[axis];
                let mut gx = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    gx[(o * ext + start) * inner..(o * ext + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(x, gx);
            }
            Op::Concat { ref parts, axis } => {
                let (outer, total, inner) = axis_split(&out_shape, axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[s..s + ext * inner]);
                        }
                        self.accumulate(p, gp);
                    }
                    offset += ext;
                }
            }
        }
    }
}
