//! Primitive operations: forward kernels and their vector-Jacobian products.
//!
//! Binary elementwise ops accept equal shapes or a one-element operand on
//! either side. Nothing else broadcasts; use [`OpKind::Expand`] instead.
//! Subgradients at kinks (relu at 0, clamp at its bounds, the std floor) are 0.

use crate::error::{AutogradError, Result};
use crate::tensor::{axis_split, Tensor};

/// Variance floor applied inside [`OpKind::StdAxis`] before the square root.
pub const STD_VARIANCE_FLOOR: f64 = 1e-8;

/// Every differentiable primitive the graph can record.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n] -> [m, n]`.
    Matmul,
    /// Inputs `x: [c_in, len]`, `w: [c_out, c_in, k]` and an optional bias `[c_out]`.
    Conv1d { padding: usize, dilation: usize },
    Relu,
    Log,
    Exp,
    Sqrt,
    /// Mean over `axis`, keeping it with extent 1.
    MeanAxis { axis: usize },
    /// Population standard deviation over `axis` (kept with extent 1).
    StdAxis { axis: usize },
    SumAxis { axis: usize },
    /// Sum of all elements into a `[1]` tensor.
    Sum,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Scale(f64),
    Shift(f64),
    Clamp { lo: f64, hi: f64 },
    /// Rank-2 transpose.
    Transpose,
    Reshape(Vec<usize>),
    /// Repeats an extent-1 `axis` to `extent`.
    Expand { axis: usize, extent: usize },
    /// Overlapping frames of a rank-1 signal: `[n] -> [frames, len]`.
    Frames { len: usize, hop: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Matmul => "matmul",
            OpKind::Conv1d { .. } => "conv1d",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sqrt => "sqrt",
            OpKind::MeanAxis { .. } => "mean-axis",
            OpKind::StdAxis { .. } => "std-axis",
            OpKind::SumAxis { .. } => "sum-axis",
            OpKind::Sum => "sum",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::Expand { .. } => "expand",
            OpKind::Frames { .. } => "frames",
        }
    }

    fn arity(&self) -> Option<(usize, usize)> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Matmul => Some((2, 2)),
            OpKind::Conv1d { .. } => Some((2, 3)),
            OpKind::Concat { .. } => None,
            _ => Some((1, 1)),
        }
    }
}

fn mismatch(op: &'static str, inputs: &[&Tensor]) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> AutogradError {
    AutogradError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(invalid(
            op,
            format!("axis {} out of range for shape {:?}", axis, t.shape()),
        ));
    }
    Ok(())
}

/// Output shape of a scalar-broadcasting binary op.
fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(mismatch(op, &[a, b]))
    }
}

fn binary_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = binary_shape(op, a, b)?;
    let data = if a.numel() == b.numel() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.numel() == 1 {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a.data()[0];
        b.data().iter().map(|&y| f(x, y)).collect()
    };
    Tensor::new(shape, data)
}

/// Reduces a gradient back to the operand's shape (summing when it was broadcast).
fn unbroadcast(grad: Vec<f64>, like: &Tensor) -> Tensor {
    if like.numel() == grad.len() {
        Tensor::new(like.shape().to_vec(), grad).expect("shape preserved")
    } else {
        Tensor::new(like.shape().to_vec(), vec![grad.iter().sum()]).expect("scalar operand")
    }
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(mismatch("matmul", &[a, b]));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

/// `out[m, n] += a[m, k] * b[k, n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

struct ConvGeom {
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    out_len: usize,
}

fn conv_geom(inputs: &[&Tensor], padding: usize, dilation: usize) -> Result<ConvGeom> {
    let (x, w) = (inputs[0], inputs[1]);
    if x.rank() != 2 || w.rank() != 3 || w.shape()[1] != x.shape()[0] {
        return Err(mismatch("conv1d", inputs));
    }
    if dilation == 0 {
        return Err(invalid("conv1d", "dilation must be at least 1"));
    }
    let (c_in, len) = (x.shape()[0], x.shape()[1]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    if let Some(b) = inputs.get(2) {
        if b.numel() != c_out {
            return Err(mismatch("conv1d", inputs));
        }
    }
    let span = dilation * (k.max(1) - 1) + 1;
    if len + 2 * padding < span || k == 0 {
        return Err(mismatch("conv1d", inputs));
    }
    Ok(ConvGeom {
        c_in,
        len,
        c_out,
        k,
        out_len: len + 2 * padding - span + 1,
    })
}

/// Range of output positions `t` for which `t + shift` indexes into `0..len`.
fn valid_range(shift: isize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = ((len as isize - shift).min(out_len as isize)).max(0) as usize;
    (lo.min(hi), hi)
}

fn frames_count(n: usize, len: usize, hop: usize) -> Result<usize> {
    if hop == 0 || len == 0 {
        return Err(invalid("frames", "frame length and hop must be positive"));
    }
    if n < len {
        return Err(invalid(
            "frames",
            format!("signal of {} samples is shorter than one frame of {}", n, len),
        ));
    }
    Ok((n - len) / hop + 1)
}

/// Evaluates `kind` on `inputs`.
pub fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let op = kind.name();
    match kind.arity() {
        Some((lo, hi)) if inputs.len() < lo || inputs.len() > hi => {
            return Err(AutogradError::Arity {
                op,
                expected: lo,
                got: inputs.len(),
            })
        }
        None if inputs.is_empty() => {
            return Err(AutogradError::Arity {
                op,
                expected: 1,
                got: 0,
            })
        }
        _ => {}
    }
    match kind {
        OpKind::Add => binary_map(op, inputs[0], inputs[1], |a, b| a + b),
        OpKind::Sub => binary_map(op, inputs[0], inputs[1], |a, b| a - b),
        OpKind::Mul => binary_map(op, inputs[0], inputs[1], |a, b| a * b),
        OpKind::Div => binary_map(op, inputs[0], inputs[1], |a, b| a / b),
        OpKind::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = matmul_dims(a, b)?;
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)
        }
        OpKind::Conv1d { padding, dilation } => {
            let g = conv_geom(inputs, *padding, *dilation)?;
            let (x, w) = (inputs[0].data(), inputs[1].data());
            let mut out = vec![0.0; g.c_out * g.out_len];
            for o in 0..g.c_out {
                let row = &mut out[o * g.out_len..(o + 1) * g.out_len];
                if let Some(b) = inputs.get(2) {
                    row.iter_mut().for_each(|v| *v = b.data()[o]);
                }
                for i in 0..g.c_in {
                    let xrow = &x[i * g.len..(i + 1) * g.len];
                    for kk in 0..g.k {
                        let wv = w[(o * g.c_in + i) * g.k + kk];
                        let shift = (kk * dilation) as isize - *padding as isize;
                        let (lo, hi) = valid_range(shift, g.len, g.out_len);
                        let src = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        for (r, &xv) in row[lo..hi].iter_mut().zip(src) {
                            *r += wv * xv;
                        }
                    }
                }
            }
            Tensor::new(vec![g.c_out, g.out_len], out)
        }
        OpKind::Relu => Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        OpKind::Log => Ok(inputs[0].map(f64::ln)),
        OpKind::Exp => Ok(inputs[0].map(f64::exp)),
        OpKind::Sqrt => Ok(inputs[0].map(f64::sqrt)),
        OpKind::MeanAxis { axis } | OpKind::SumAxis { axis } | OpKind::StdAxis { axis } => {
            let x = inputs[0];
            check_axis(op, x, *axis)?;
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = 1;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |a: usize| x.data()[(o * n + a) * inner + j];
                    let sum: f64 = (0..n).map(at).sum();
                    out[o * inner + j] = match kind {
                        OpKind::SumAxis { .. } => sum,
                        OpKind::MeanAxis { .. } => sum / n as f64,
                        _ => {
                            let mean = sum / n as f64;
                            let var = (0..n).map(|a| (at(a) - mean).powi(2)).sum::<f64>() / n as f64;
                            var.max(STD_VARIANCE_FLOOR).sqrt()
                        }
                    };
                }
            }
            Tensor::new(shape, out)
        }
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::Concat { axis } => {
            let first = inputs[0];
            check_axis(op, first, *axis)?;
            for t in inputs.iter().skip(1) {
                let compatible = t.rank() == first.rank()
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(d, (a, b))| d == *axis || a == b);
                if !compatible {
                    return Err(mismatch(op, inputs));
                }
            }
            let (outer, _, inner) = axis_split(first.shape(), *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::new(shape, out)
        }
        OpKind::Slice { axis, start, end } => {
            let x = inputs[0];
            check_axis(op, x, *axis)?;
            if start >= end || *end > x.shape()[*axis] {
                return Err(invalid(
                    op,
                    format!("range {}..{} invalid for shape {:?}", start, end, x.shape()),
                ));
            }
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            Tensor::new(shape, out)
        }
        OpKind::Scale(c) => Ok(inputs[0].map(|v| v * c)),
        OpKind::Shift(c) => Ok(inputs[0].map(|v| v + c)),
        OpKind::Clamp { lo, hi } => {
            if lo > hi {
                return Err(invalid(op, format!("lower bound {} exceeds upper bound {}", lo, hi)));
            }
            Ok(inputs[0].map(|v| v.clamp(*lo, *hi)))
        }
        OpKind::Transpose => {
            let x = inputs[0];
            if x.rank() != 2 {
                return Err(mismatch(op, inputs));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)
        }
        OpKind::Reshape(shape) => inputs[0].clone().reshaped(shape.clone()),
        OpKind::Expand { axis, extent } => {
            let x = inputs[0];
            check_axis(op, x, *axis)?;
            if x.shape()[*axis] != 1 {
                return Err(invalid(
                    op,
                    format!("axis {} of shape {:?} must have extent 1", axis, x.shape()),
                ));
            }
            let (outer, _, inner) = axis_split(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = *extent;
            let mut out = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                let block = &x.data()[o * inner..(o + 1) * inner];
                for _ in 0..*extent {
                    out.extend_from_slice(block);
                }
            }
            Tensor::new(shape, out)
        }
        OpKind::Frames { len, hop } => {
            let x = inputs[0];
            if x.rank() != 1 {
                return Err(mismatch(op, inputs));
            }
            let count = frames_count(x.numel(), *len, *hop)?;
            let mut out = Vec::with_capacity(count * len);
            for f in 0..count {
                out.extend_from_slice(&x.data()[f * hop..f * hop + len]);
            }
            Tensor::new(vec![count, *len], out)
        }
    }
}

/// Vector-Jacobian product of `kind`: gradients for every input with `needs[i]` set.
pub fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let g = grad.data();
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let mut out: Vec<Option<Tensor>> = vec![None; inputs.len()];
    let elementwise = |f: &dyn Fn(usize) -> f64, like: &Tensor| -> Tensor {
        let v: Vec<f64> = (0..g.len()).map(f).collect();
        unbroadcast(v, like)
    };
    // Value of operand `t` at output position `i`, honouring scalar broadcast.
    let at = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
    match kind {
        OpKind::Add | OpKind::Sub => {
            if need(0) {
                out[0] = Some(elementwise(&|i| g[i], inputs[0]));
            }
            if need(1) {
                let sign = if *kind == OpKind::Add { 1.0 } else { -1.0 };
                out[1] = Some(elementwise(&|i| sign * g[i], inputs[1]));
            }
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if need(0) {
                out[0] = Some(elementwise(&|i| g[i] * at(b, i), a));
            }
            if need(1) {
                out[1] = Some(elementwise(&|i| g[i] * at(a, i), b));
            }
        }
        OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            if need(0) {
                out[0] = Some(elementwise(&|i| g[i] / at(b, i), a));
            }
            if need(1) {
                out[1] = Some(elementwise(&|i| -g[i] * at(a, i) / (at(b, i) * at(b, i)), b));
            }
        }
        OpKind::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if need(0) {
                // ga = g * b^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b.data()[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                out[0] = Some(Tensor::new(vec![m, k], ga).expect("matmul grad"));
            }
            if need(1) {
                // gb = a^T * g
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                out[1] = Some(Tensor::new(vec![k, n], gb).expect("matmul grad"));
            }
        }
        OpKind::Conv1d { padding, dilation } => {
            let geom = conv_geom(inputs, *padding, *dilation).expect("validated in forward");
            let (x, w) = (inputs[0].data(), inputs[1].data());
            let mut gx = if need(0) { Some(vec![0.0; geom.c_in * geom.len]) } else { None };
            let mut gw = if need(1) { Some(vec![0.0; w.len()]) } else { None };
            for o in 0..geom.c_out {
                let grow = &g[o * geom.out_len..(o + 1) * geom.out_len];
                for i in 0..geom.c_in {
                    for kk in 0..geom.k {
                        let widx = (o * geom.c_in + i) * geom.k + kk;
                        let shift = (kk * dilation) as isize - *padding as isize;
                        let (lo, hi) = valid_range(shift, geom.len, geom.out_len);
                        let s0 = (lo as isize + shift) as usize;
                        let s1 = (hi as isize + shift) as usize;
                        if let Some(gx) = gx.as_mut() {
                            let wv = w[widx];
                            let dst = &mut gx[i * geom.len + s0..i * geom.len + s1];
                            for (d, &gv) in dst.iter_mut().zip(&grow[lo..hi]) {
                                *d += wv * gv;
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            let src = &x[i * geom.len + s0..i * geom.len + s1];
                            gw[widx] += src.iter().zip(&grow[lo..hi]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            out[0] = gx.map(|v| Tensor::new(inputs[0].shape().to_vec(), v).expect("conv grad"));
            out[1] = gw.map(|v| Tensor::new(inputs[1].shape().to_vec(), v).expect("conv grad"));
            if inputs.len() == 3 && need(2) {
                let gb: Vec<f64> = (0..geom.c_out)
                    .map(|o| g[o * geom.out_len..(o + 1) * geom.out_len].iter().sum())
                    .collect();
                out[2] = Some(Tensor::new(inputs[2].shape().to_vec(), gb).expect("conv grad"));
            }
        }
        OpKind::Relu => {
            if need(0) {
                let x = inputs[0].data();
                out[0] = Some(elementwise(&|i| if x[i] > 0.0 { g[i] } else { 0.0 }, inputs[0]));
            }
        }
        OpKind::Log => {
            if need(0) {
                let x = inputs[0].data();
                out[0] = Some(elementwise(&|i| g[i] / x[i], inputs[0]));
            }
        }
        OpKind::Exp => {
            if need(0) {
                let y = output.data();
                out[0] = Some(elementwise(&|i| g[i] * y[i], inputs[0]));
            }
        }
        OpKind::Sqrt => {
            if need(0) {
                let y = output.data();
                out[0] = Some(elementwise(&|i| g[i] / (2.0 * y[i]), inputs[0]));
            }
        }
        OpKind::MeanAxis { axis } | OpKind::SumAxis { axis } | OpKind::StdAxis { axis } => {
            if need(0) {
                let x = inputs[0];
                let (outer, n, inner) = axis_split(x.shape(), *axis);
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let gv = g[o * inner + j];
                        let idx = |a: usize| (o * n + a) * inner + j;
                        match kind {
                            OpKind::SumAxis { .. } => (0..n).for_each(|a| gx[idx(a)] = gv),
                            OpKind::MeanAxis { .. } => (0..n).for_each(|a| gx[idx(a)] = gv / n as f64),
                            _ => {
                                let mean = (0..n).map(|a| x.data()[idx(a)]).sum::<f64>() / n as f64;
                                let var = (0..n)
                                    .map(|a| (x.data()[idx(a)] - mean).powi(2))
                                    .sum::<f64>()
                                    / n as f64;
                                if var > STD_VARIANCE_FLOOR {
                                    let sd = output.data()[o * inner + j];
                                    for a in 0..n {
                                        gx[idx(a)] = gv * (x.data()[idx(a)] - mean) / (n as f64 * sd);
                                    }
                                }
                            }
                        }
                    }
                }
                out[0] = Some(Tensor::new(x.shape().to_vec(), gx).expect("reduce grad"));
            }
        }
        OpKind::Sum => {
            if need(0) {
                out[0] = Some(Tensor::full(inputs[0].shape().to_vec(), g[0]));
            }
        }
        OpKind::Concat { axis } => {
            let (outer, _, inner) = axis_split(output.shape(), *axis);
            let total = output.shape()[*axis];
            let mut offset = 0;
            for (idx, t) in inputs.iter().enumerate() {
                let ext = t.shape()[*axis];
                if need(idx) {
                    let mut gt = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gt.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    out[idx] = Some(Tensor::new(t.shape().to_vec(), gt).expect("concat grad"));
                }
                offset += ext;
            }
        }
        OpKind::Slice { axis, start, end } => {
            if need(0) {
                let x = inputs[0];
                let (outer, n, inner) = axis_split(x.shape(), *axis);
                let width = (end - start) * inner;
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                out[0] = Some(Tensor::new(x.shape().to_vec(), gx).expect("slice grad"));
            }
        }
        OpKind::Scale(c) => {
            if need(0) {
                out[0] = Some(grad.map(|v| v * c));
            }
        }
        OpKind::Shift(_) => {
            if need(0) {
                out[0] = Some(grad.clone());
            }
        }
        OpKind::Clamp { lo, hi } => {
            if need(0) {
                let x = inputs[0].data();
                out[0] = Some(elementwise(
                    &|i| if x[i] > *lo && x[i] < *hi { g[i] } else { 0.0 },
                    inputs[0],
                ));
            }
        }
        OpKind::Transpose => {
            if need(0) {
                let t = forward(&OpKind::Transpose, &[grad]).expect("transpose grad");
                out[0] = Some(t);
            }
        }
        OpKind::Reshape(_) => {
            if need(0) {
                out[0] = Some(grad.clone().reshaped(inputs[0].shape().to_vec()).expect("reshape grad"));
            }
        }
        OpKind::Expand { axis, .. } => {
            if need(0) {
                let t = forward(&OpKind::SumAxis { axis: *axis }, &[grad]).expect("expand grad");
                out[0] = Some(t);
            }
        }
        OpKind::Frames { len, hop } => {
            if need(0) {
                let mut gx = vec![0.0; inputs[0].numel()];
                let count = output.shape()[0];
                for f in 0..count {
                    for (d, &gv) in gx[f * hop..f * hop + len].iter_mut().zip(&g[f * len..(f + 1) * len]) {
                        *d += gv;
                    }
                }
                out[0] = Some(Tensor::new(inputs[0].shape().to_vec(), gx).expect("frames grad"));
            }
        }
    }
    out
}

/// Per-element branch codes for ops with kinks; `None` for smooth ops.
///
/// Two evaluations with identical codes took the same piecewise-smooth branch.
pub(crate) fn branch_codes(kind: &OpKind, inputs: &[&Tensor]) -> Option<Vec<u8>> {
    match kind {
        OpKind::Relu => Some(inputs[0].data().iter().map(|&v| (v > 0.0) as u8).collect()),
        OpKind::Clamp { lo, hi } => Some(
            inputs[0]
                .data()
                .iter()
                .map(|&v| if v <= *lo { 0 } else if v >= *hi { 2 } else { 1 })
                .collect(),
        ),
        OpKind::StdAxis { axis } => {
            let x = inputs[0];
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let mut codes = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for j in 0..inner {
                    let at = |a: usize| x.data()[(o * n + a) * inner + j];
                    let mean = (0..n).map(at).sum::<f64>() / n as f64;
                    let var = (0..n).map(|a| (at(a) - mean).powi(2)).sum::<f64>() / n as f64;
                    codes.push((var > STD_VARIANCE_FLOOR) as u8);
                }
            }
            Some(codes)
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let y = forward(&OpKind::Add, &[&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])]).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_rejects_mismatch() {
        let err = forward(&OpKind::Add, &[&t(&[2], &[1.0, 2.0]), &t(&[3], &[1.0; 3])]).unwrap_err();
        match err {
            AutogradError::ShapeMismatch { op, shapes } => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2], vec![3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let y = forward(&OpKind::Div, &[&t(&[1], &[6.0]), &t(&[3], &[1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(y.data(), &[6.0, 3.0, 2.0]);
        let y = forward(&OpKind::Sub, &[&t(&[3], &[1.0, 2.0, 3.0]), &t(&[1], &[1.0])]).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn matmul_row_sums() {
        let y = forward(&OpKind::Matmul, &[&Tensor::full(vec![2, 3], 1.0), &Tensor::full(vec![3, 1], 1.0)]).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn relu_definition() {
        let y = forward(&OpKind::Relu, &[&t(&[3], &[-1.0, 0.0, 2.0])]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv1d_same_padding_identity_kernel() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 3], &[0.0, 1.0, 0.0]);
        let b = t(&[1], &[0.5]);
        let y = forward(&OpKind::Conv1d { padding: 1, dilation: 1 }, &[&x, &w, &b]).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn conv1d_dilated_shift() {
        // kernel picks x[t + 2] with dilation 2, padding 2
        let x = t(&[1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = t(&[1, 1, 3], &[0.0, 0.0, 1.0]);
        let y = forward(&OpKind::Conv1d { padding: 2, dilation: 2 }, &[&x, &w]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn std_axis_population_with_floor() {
        let y = forward(&OpKind::StdAxis { axis: 1 }, &[&t(&[2, 2], &[1.0, 3.0, 5.0, 5.0])]).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!((y.data()[1] - STD_VARIANCE_FLOOR.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = forward(&OpKind::Concat { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = forward(&OpKind::Slice { axis: 1, start: 1, end: 3 }, &[&c]).unwrap();
        assert_eq!(s, b);
    }

    #[test]
    fn frames_boundaries() {
        let x = Tensor::vector((0..10).map(f64::from).collect());
        let f = forward(&OpKind::Frames { len: 4, hop: 3 }, &[&x]).unwrap();
        assert_eq!(f.shape(), &[3, 4]);
        assert_eq!(&f.data()[8..], &[6.0, 7.0, 8.0, 9.0]);
        assert!(forward(&OpKind::Frames { len: 11, hop: 3 }, &[&x]).is_err());
    }

    #[test]
    fn expand_repeats_axis() {
        let y = forward(&OpKind::Expand { axis: 1, extent: 3 }, &[&t(&[2, 1], &[1.0, 2.0])]).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn arity_checked() {
        assert!(matches!(
            forward(&OpKind::Add, &[&Tensor::scalar(1.0)]),
            Err(AutogradError::Arity { .. })
        ));
    }
}
