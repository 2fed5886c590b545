use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, MatRef};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Primitive identifiers, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Permute,
    Reshape,
    Conv2d,
    AddBias,
    Add,
    Sub,
    Mul,
    Minimum,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Clamp,
    Softmax,
    LogSoftmax,
    Concat,
    Narrow,
    Sum,
    Mean,
    SumLast,
}

enum Op {
    Leaf,
    MatMul,
    BatchMatMul,
    Permute(Vec<usize>),
    Reshape,
    Conv2d {
        geom: ConvGeom,
        batch: usize,
        out_ch: usize,
        // im2col buffers, kept only when the kernel needs a gradient
        cols: Vec<f64>,
    },
    AddBias,
    Add,
    Sub,
    Mul,
    Minimum,
    Scale(f64),
    AddScalar,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Clamp(f64, f64),
    Softmax,
    LogSoftmax,
    Concat(usize),
    Narrow { axis: usize, start: usize },
    Sum,
    Mean,
    SumLast,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul => OpKind::MatMul,
            Op::BatchMatMul => OpKind::BatchMatMul,
            Op::Permute(_) => OpKind::Permute,
            Op::Reshape => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AddBias => OpKind::AddBias,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Minimum => OpKind::Minimum,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar => OpKind::AddScalar,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Tanh => OpKind::Tanh,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Softmax => OpKind::Softmax,
            Op::LogSoftmax => OpKind::LogSoftmax,
            Op::Concat(_) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::SumLast => OpKind::SumLast,
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Optional attributes for [`Tape::eval_primitive`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub factor: Option<f64>,
    pub sizes: Option<Vec<usize>>,
}

/// Append-only record of one forward pass.
///
/// Nodes are pushed in evaluation order, so the node list is always a
/// topological order. [`Tape::backward`] sweeps it once in reverse and then
/// freezes the tape.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    frozen: bool,
    faults: Vec<(OpKind, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, out: &[f64], inputs: &[&[f64]]) -> Result<()> {
    if cfg!(debug_assertions)
        && !out.iter().all(|v| v.is_finite())
        && inputs.iter().all(|d| d.iter().all(|v| v.is_finite()))
    {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

fn split_outer(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            frozen: false,
            faults: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Scale the backward rule of every `kind` node by `factor`.
    ///
    /// Only meant for checking that gradient oracles catch broken rules.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.faults.push((kind, factor));
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.index
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[self.idx(v)]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    /// Gradient of the last backward output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.idx(v);
        self.grads
            .get(i)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g.clone()))
    }

    fn ensure_live(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::State("tape is frozen after backward".into()));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: &[usize], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        assert!(!self.frozen, "leaf added to a frozen tape");
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ----------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        kernels::gemm(
            n,
            k,
            m,
            MatRef::row_major(self.nodes[ia].value.data(), k),
            MatRef::row_major(self.nodes[ib].value.data(), m),
            0.0,
            &mut out,
        );
        check_finite(
            "matmul",
            &out,
            &[self.nodes[ia].value.data(), self.nodes[ib].value.data()],
        )?;
        Ok(self.push(Op::MatMul, &[ia, ib], Tensor::from_parts(vec![n, m], out)))
    }

    /// Batched matmul `(B, n, k) x (B, k, m) -> (B, n, m)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bsz, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * n * m];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for bi in 0..bsz {
            kernels::gemm(
                n,
                k,
                m,
                MatRef::row_major(&da[bi * n * k..(bi + 1) * n * k], k),
                MatRef::row_major(&db[bi * k * m..(bi + 1) * k * m], m),
                0.0,
                &mut out[bi * n * m..(bi + 1) * n * m],
            );
        }
        check_finite("bmm", &out, &[da, db])?;
        Ok(self.push(
            Op::BatchMatMul,
            &[ia, ib],
            Tensor::from_parts(vec![bsz, n, m], out),
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let ix = self.idx(x);
        let shape = self.nodes[ix].value.shape();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for shape {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = kernels::permute(self.nodes[ix].value.data(), shape, axes);
        Ok(self.push(
            Op::Permute(axes.to_vec()),
            &[ix],
            Tensor::from_parts(out_shape, out),
        ))
    }

    /// Swap the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let ix = self.idx(x);
        let value = self.nodes[ix].value.reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape, &[ix], value))
    }

    /// 2-D convolution of `x (B, C, H, W)` with `w (O, C, kh, kw)` and an
    /// optional per-channel bias `(O)`, zero padding `pad` on every side.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.ensure_live()?;
        let (ix, iw) = (self.idx(x), self.idx(w));
        let ib = bias.map(|b| self.idx(b));
        let (sx, sw) = (self.nodes[ix].value.shape(), self.nodes[iw].value.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (batch, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_ch, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(ib) = ib {
            let sb = self.nodes[ib].value.shape();
            if sb != [out_ch] {
                return Err(Error::shape("conv2d", format!("bias {sb:?} for {out_ch} channels")));
            }
        }
        let (oh, ow) = match (
            kernels::conv_out_size(h, kh, stride, pad),
            kernels::conv_out_size(wd, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "kernel {kh}x{kw} (stride {stride}) does not fit input {h}x{wd} with padding {pad}"
                    ),
                ))
            }
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let keep_cols = self.nodes[iw].requires_grad;
        let mut cols_all = vec![0.0; if keep_cols { batch * rows * ncols } else { 0 }];
        let mut scratch = vec![0.0; if keep_cols { 0 } else { rows * ncols }];
        let mut out = vec![0.0; batch * out_ch * ncols];
        {
            let xd = self.nodes[ix].value.data();
            let wdata = self.nodes[iw].value.data();
            for b in 0..batch {
                let img = &xd[b * c * h * wd..(b + 1) * c * h * wd];
                let cols: &mut [f64] = if keep_cols {
                    &mut cols_all[b * rows * ncols..(b + 1) * rows * ncols]
                } else {
                    &mut scratch
                };
                kernels::im2col(img, &geom, cols);
                let dst = &mut out[b * out_ch * ncols..(b + 1) * out_ch * ncols];
                kernels::gemm(
                    out_ch,
                    rows,
                    ncols,
                    MatRef::row_major(wdata, rows),
                    MatRef::row_major(cols, ncols),
                    0.0,
                    dst,
                );
                if let Some(ib) = ib {
                    let bd = self.nodes[ib].value.data();
                    for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
                        for v in chunk {
                            *v += bd[o];
                        }
                    }
                }
            }
            check_finite("conv2d", &out, &[xd, wdata])?;
        }
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        Ok(self.push(
            Op::Conv2d {
                geom,
                batch,
                out_ch,
                cols: cols_all,
            },
            &inputs,
            Tensor::from_parts(vec![batch, out_ch, oh, ow], out),
        ))
    }

    // ----------------------------------------------------------------------
    // elementwise

    /// `x (..., n) + b (n)`, the only broadcasting add.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        let (ix, ib) = (self.idx(x), self.idx(b));
        let (sx, sb) = (self.nodes[ix].value.shape(), self.nodes[ib].value.shape());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sb[0];
        let bd = self.nodes[ib].value.data();
        let mut out = self.nodes[ix].value.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(Op::AddBias, &[ix, ib], Tensor::from_parts(shape, out)))
    }

    fn binary(
        &mut self,
        op: Op,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.ensure_live()?;
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        check_finite(name, &out, &[va.data(), vb.data()])?;
        let shape = va.shape().to_vec();
        Ok(self.push(op, &[ia, ib], Tensor::from_parts(shape, out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Minimum, "minimum", a, b, |x, y| if x <= y { x } else { y })
    }

    fn unary(
        &mut self,
        op: Op,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        self.ensure_live()?;
        let ix = self.idx(x);
        let vx = &self.nodes[ix].value;
        let out: Vec<f64> = vx.data().iter().map(|&v| f(v)).collect();
        check_finite(name, &out, &[vx.data()])?;
        let shape = vx.shape().to_vec();
        Ok(self.push(op, &[ix], Tensor::from_parts(shape, out)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Op::Scale(s), "scale", x, |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Op::AddScalar, "add_scalar", x, |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu, "relu", x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, "sigmoid", x, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Tanh, "tanh", x, f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, "exp", x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Log, "log", x, f64::ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::shape("clamp", format!("empty range [{lo}, {hi}]")));
        }
        self.unary(Op::Clamp(lo, hi), "clamp", x, |v| v.clamp(lo, hi))
    }

    // ----------------------------------------------------------------------
    // last-axis normalisation

    fn rowwise(
        &mut self,
        op: Op,
        name: &'static str,
        x: Var,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<Var> {
        self.ensure_live()?;
        let ix = self.idx(x);
        let vx = &self.nodes[ix].value;
        let n = *vx.shape().last().ok_or_else(|| Error::shape(name, "scalar input"))?;
        if n == 0 {
            return Err(Error::shape(name, "empty last axis"));
        }
        let mut out = vec![0.0; vx.len()];
        for (row, dst) in vx.data().chunks(n).zip(out.chunks_mut(n)) {
            f(row, dst);
        }
        check_finite(name, &out, &[vx.data()])?;
        let shape = vx.shape().to_vec();
        Ok(self.push(op, &[ix], Tensor::from_parts(shape, out)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise(Op::Softmax, "softmax", x, |row, dst| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        })
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise(Op::LogSoftmax, "log_softmax", x, |row, dst| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        })
    }

    // ----------------------------------------------------------------------
    // structure

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let ids: Vec<usize> = xs.iter().map(|&v| self.idx(v)).collect();
        let base = self.nodes[self.idx(first)].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_outer(&base, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &i in &ids {
                let v = &self.nodes[i].value;
                let w = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        Ok(self.push(Op::Concat(axis), &ids, Tensor::from_parts(out_shape, out)))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.ensure_live()?;
        let ix = self.idx(x);
        let shape = self.nodes[ix].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_outer(&shape, axis);
        let data = self.nodes[ix].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Op::Narrow { axis, start },
            &[ix],
            Tensor::from_parts(out_shape, out),
        ))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} on axis {axis} of {shape:?}"),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    // ----------------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        let ix = self.idx(x);
        let s = self.nodes[ix].value.data().iter().sum();
        Ok(self.push(Op::Sum, &[ix], Tensor::scalar(s)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        let ix = self.idx(x);
        let v = &self.nodes[ix].value;
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Op::Mean, &[ix], Tensor::scalar(m)))
    }

    /// Sum over the last axis: `(..., n) -> (...)`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        let ix = self.idx(x);
        let v = &self.nodes[ix].value;
        let shape = v.shape();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("sum_last", "scalar input"))?;
        let out: Vec<f64> = if n == 0 {
            vec![0.0; numel(&shape[..shape.len() - 1])]
        } else {
            v.data().chunks(n).map(|r| r.iter().sum()).collect()
        };
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.push(Op::SumLast, &[ix], Tensor::from_parts(out_shape, out)))
    }

    // ----------------------------------------------------------------------
    // name-based dispatch

    /// Evaluate a primitive by name. Returns several outputs for `split`.
    pub fn eval_primitive(&mut self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Vec<Var>> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Contract(format!(
                    "{name} takes {n} input(s), got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        let one = |r: Result<Var>| r.map(|v| vec![v]);
        match name {
            "matmul" => {
                arity(2)?;
                one(self.matmul(inputs[0], inputs[1]))
            }
            "bmm" => {
                arity(2)?;
                one(self.bmm(inputs[0], inputs[1]))
            }
            "conv2d" => {
                if !(2..=3).contains(&inputs.len()) {
                    return Err(Error::Contract("conv2d takes 2 or 3 inputs".into()));
                }
                one(self.conv2d(
                    inputs[0],
                    inputs[1],
                    inputs.get(2).copied(),
                    attrs.stride.unwrap_or(1),
                    attrs.padding.unwrap_or(0),
                ))
            }
            "relu" => {
                arity(1)?;
                one(self.relu(inputs[0]))
            }
            "sigmoid" => {
                arity(1)?;
                one(self.sigmoid(inputs[0]))
            }
            "tanh" => {
                arity(1)?;
                one(self.tanh(inputs[0]))
            }
            "softmax" => {
                arity(1)?;
                one(self.softmax(inputs[0]))
            }
            "log_softmax" => {
                arity(1)?;
                one(self.log_softmax(inputs[0]))
            }
            "concat" => one(self.concat(inputs, attrs.axis.unwrap_or(0))),
            "split" => {
                arity(1)?;
                let sizes = attrs
                    .sizes
                    .as_ref()
                    .ok_or_else(|| Error::Contract("split needs sizes".into()))?;
                self.split(inputs[0], attrs.axis.unwrap_or(0), sizes)
            }
            "add" => {
                arity(2)?;
                one(self.add(inputs[0], inputs[1]))
            }
            "sub" => {
                arity(2)?;
                one(self.sub(inputs[0], inputs[1]))
            }
            "mul" => {
                arity(2)?;
                one(self.mul(inputs[0], inputs[1]))
            }
            "scale" => {
                arity(1)?;
                let s = attrs
                    .factor
                    .ok_or_else(|| Error::Contract("scale needs a factor".into()))?;
                one(self.scale(inputs[0], s))
            }
            "mean" => {
                arity(1)?;
                one(self.mean(inputs[0]))
            }
            "sum" => {
                arity(1)?;
                one(self.sum(inputs[0]))
            }
            "exp" => {
                arity(1)?;
                one(self.exp(inputs[0]))
            }
            "log" => {
                arity(1)?;
                one(self.log(inputs[0]))
            }
            other => Err(Error::UnsupportedOp(other.to_string())),
        }
    }

    // ----------------------------------------------------------------------
    // reverse sweep

    /// Populate gradients of `output` with respect to every node that
    /// requires one, then freeze the tape.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.ensure_live()?;
        let out = self.idx(output);
        if self.nodes[out].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[out].requires_grad {
            grads[out] = Some(vec![1.0]);
        }
        for i in (0..=out).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let kind = self.nodes[i].op.kind();
            for &(k, factor) in &self.faults {
                if k == kind {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.node_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.frozen = true;
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let nodes = &self.nodes;
        let val = |j: usize| nodes[ins[j]].value.data();
        let shape = |j: usize| nodes[ins[j]].value.shape();

        // Gradient buffer of input j, or None if it needs no gradient.
        macro_rules! buf {
            ($j:expr) => {{
                let id = ins[$j];
                if nodes[id].requires_grad {
                    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
                } else {
                    None
                }
            }};
        }

        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (n, k) = (shape(0)[0], shape(0)[1]);
                let m = shape(1)[1];
                if let Some(da) = buf!(0) {
                    kernels::gemm(
                        n,
                        m,
                        k,
                        MatRef::row_major(g, m),
                        MatRef::transposed(val(1), m),
                        1.0,
                        da,
                    );
                }
                if let Some(db) = buf!(1) {
                    kernels::gemm(
                        k,
                        n,
                        m,
                        MatRef::transposed(val(0), k),
                        MatRef::row_major(g, m),
                        1.0,
                        db,
                    );
                }
            }
            Op::BatchMatMul => {
                let (bsz, n, k) = (shape(0)[0], shape(0)[1], shape(0)[2]);
                let m = shape(1)[2];
                if let Some(da) = buf!(0) {
                    for b in 0..bsz {
                        kernels::gemm(
                            n,
                            m,
                            k,
                            MatRef::row_major(&g[b * n * m..], m),
                            MatRef::transposed(&val(1)[b * k * m..], m),
                            1.0,
                            &mut da[b * n * k..(b + 1) * n * k],
                        );
                    }
                }
                if let Some(db) = buf!(1) {
                    for b in 0..bsz {
                        kernels::gemm(
                            k,
                            n,
                            m,
                            MatRef::transposed(&val(0)[b * n * k..], k),
                            MatRef::row_major(&g[b * n * m..], m),
                            1.0,
                            &mut db[b * k * m..(b + 1) * k * m],
                        );
                    }
                }
            }
            Op::Permute(axes) => {
                if let Some(dx) = buf!(0) {
                    let back = kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
                    add_into(dx, &back);
                }
            }
            Op::Reshape | Op::AddScalar => {
                if let Some(dx) = buf!(0) {
                    add_into(dx, g);
                }
            }
            Op::Conv2d {
                geom,
                batch,
                out_ch,
                cols,
            } => {
                let (rows, ncols) = (geom.rows(), geom.cols());
                let img = geom.c * geom.h * geom.w;
                if let Some(dw) = buf!(1) {
                    for b in 0..*batch {
                        kernels::gemm(
                            *out_ch,
                            ncols,
                            rows,
                            MatRef::row_major(&g[b * out_ch * ncols..], ncols),
                            MatRef::transposed(&cols[b * rows * ncols..], ncols),
                            1.0,
                            dw,
                        );
                    }
                }
                if let Some(dx) = buf!(0) {
                    let mut dcols = vec![0.0; rows * ncols];
                    for b in 0..*batch {
                        kernels::gemm(
                            rows,
                            *out_ch,
                            ncols,
                            MatRef::transposed(val(1), rows),
                            MatRef::row_major(&g[b * out_ch * ncols..], ncols),
                            0.0,
                            &mut dcols,
                        );
                        kernels::col2im(&dcols, geom, &mut dx[b * img..(b + 1) * img]);
                    }
                }
                if ins.len() == 3 {
                    if let Some(db) = buf!(2) {
                        for b in 0..*batch {
                            for (o, chunk) in g[b * out_ch * ncols..(b + 1) * out_ch * ncols]
                                .chunks(ncols)
                                .enumerate()
                            {
                                db[o] += chunk.iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::AddBias => {
                if let Some(dx) = buf!(0) {
                    add_into(dx, g);
                }
                if let Some(db) = buf!(1) {
                    let n = db.len();
                    if n > 0 {
                        for row in g.chunks(n) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Add => {
                if let Some(da) = buf!(0) {
                    add_into(da, g);
                }
                if let Some(db) = buf!(1) {
                    add_into(db, g);
                }
            }
            Op::Sub => {
                if let Some(da) = buf!(0) {
                    add_into(da, g);
                }
                if let Some(db) = buf!(1) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul => {
                if let Some(da) = buf!(0) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(1)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = buf!(1) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(0)) {
                        *d += gv * av;
                    }
                }
            }
            Op::Minimum => {
                let (a, b) = (val(0), val(1));
                if let Some(da) = buf!(0) {
                    for k in 0..g.len() {
                        if a[k] <= b[k] {
                            da[k] += g[k];
                        }
                    }
                }
                if let Some(db) = buf!(1) {
                    for k in 0..g.len() {
                        if a[k] > b[k] {
                            db[k] += g[k];
                        }
                    }
                }
            }
            Op::Scale(s) => {
                if let Some(dx) = buf!(0) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += s * gv);
                }
            }
            Op::Relu => {
                let x = val(0);
                if let Some(dx) = buf!(0) {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid => {
                if let Some(dx) = buf!(0) {
                    for k in 0..g.len() {
                        dx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Tanh => {
                if let Some(dx) = buf!(0) {
                    for k in 0..g.len() {
                        dx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
            }
            Op::Exp => {
                if let Some(dx) = buf!(0) {
                    for k in 0..g.len() {
                        dx[k] += g[k] * y[k];
                    }
                }
            }
            Op::Log => {
                let x = val(0);
                if let Some(dx) = buf!(0) {
                    for k in 0..g.len() {
                        dx[k] += g[k] / x[k];
                    }
                }
            }
            Op::Clamp(lo, hi) => {
                let x = val(0);
                if let Some(dx) = buf!(0) {
                    for k in 0..g.len() {
                        if x[k] >= *lo && x[k] <= *hi {
                            dx[k] += g[k];
                        }
                    }
                }
            }
            Op::Softmax => {
                let n = *node.value.shape().last().unwrap();
                if let Some(dx) = buf!(0) {
                    for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            dr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax => {
                let n = *node.value.shape().last().unwrap();
                if let Some(dx) = buf!(0) {
                    for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                        let total: f64 = gr.iter().sum();
                        for k in 0..n {
                            dr[k] += gr[k] - yr[k].exp() * total;
                        }
                    }
                }
            }
            Op::Concat(axis) => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_outer(out_shape, *axis);
                let mut offset = 0;
                for j in 0..ins.len() {
                    let width = shape(j)[*axis] * inner;
                    if let Some(dx) = buf!(j) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..][..width];
                            add_into(&mut dx[o * width..(o + 1) * width], src);
                        }
                    }
                    offset += width;
                }
            }
            Op::Narrow { axis, start } => {
                let in_shape = shape(0);
                let (outer, dim, inner) = split_outer(in_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(dx) = buf!(0) {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        add_into(
                            &mut dx[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Sum => {
                if let Some(dx) = buf!(0) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean => {
                if let Some(dx) = buf!(0) {
                    let scale = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += scale);
                }
            }
            Op::SumLast => {
                if let Some(dx) = buf!(0) {
                    let n = *shape(0).last().unwrap();
                    if n > 0 {
                        for (row, &gv) in dx.chunks_mut(n).zip(g) {
                            row.iter_mut().for_each(|d| *d += gv);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
