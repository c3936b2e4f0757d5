//! Primitive operations and their forward kernels.
//!
//! `eval` is the single source of truth for forward values: recording and
//! replay both go through it, so a replayed graph is bit-identical.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Constant,
    /// `a · b`
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    /// `aᵀ · b`
    MatMulTN(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[m x n] + [1 x n]`, the row broadcast over the batch.
    AddRow(NodeId, NodeId),
    /// `[m x n] * [m x 1]`, each row scaled by its own factor.
    MulCol(NodeId, NodeId),
    /// `[m x n] / [m x 1]`; rows with a zero divisor map to zero.
    DivCol(NodeId, NodeId),
    /// `[m x n] * [1 x 1]`
    MulScalar(NodeId, NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    /// `1/x`, with `0` mapped to `0`.
    SafeRecip(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    RowNorm(NodeId),
    ClampMin(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    PadCols {
        input: NodeId,
        start: usize,
        total: usize,
    },
    Softmax(NodeId),
    LogSumExp(NodeId),
    /// Mean over rows of `logsumexp(row) - row[label]`.
    SoftmaxXent(NodeId, Rc<[usize]>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::MatMulTN(..) => "matmul_tn",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::DivCol(..) => "div_col",
            Op::MulScalar(..) => "mul_scalar",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::SafeRecip(..) => "safe_recip",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::RowNorm(..) => "row_norm",
            Op::ClampMin(..) => "clamp_min",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::SoftmaxXent(..) => "softmax_xent",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::MatMulTN(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::DivCol(a, b)
            | Op::MulScalar(a, b)
            | Op::ConcatCols(a, b) => vec![a, b],
            Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::SafeRecip(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::RowNorm(a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a)
            | Op::LogSumExp(a)
            | Op::SoftmaxXent(a, _) => vec![a],
            Op::SliceCols { input, .. } | Op::PadCols { input, .. } => vec![input],
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    a.map(f)
}

fn zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    let (r, c) = a.dims()?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(r, c, data))
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims()?;
    let (k2, n) = b.dims()?;
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(m, n, out))
}

fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims()?;
    let (n, k2) = b.dims()?;
    if k != k2 {
        return Err(mismatch("matmul_nt", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::from_parts(m, n, out))
}

fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims()?;
    let (k2, n) = b.dims()?;
    if k != k2 {
        return Err(mismatch("matmul_tn", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(Tensor::from_parts(m, n, out))
}

fn row_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn row_logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluates `op` given the values of its inputs, in `Op::inputs` order.
pub fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let a = || inputs[0];
    let b = || inputs[1];
    Ok(match op {
        Op::Leaf | Op::Constant => unreachable!("leaves and constants are not evaluated"),
        Op::MatMul(..) => matmul(a(), b())?,
        Op::MatMulNT(..) => matmul_nt(a(), b())?,
        Op::MatMulTN(..) => matmul_tn(a(), b())?,
        Op::Add(..) => zip("add", a(), b(), |x, y| x + y)?,
        Op::Sub(..) => zip("sub", a(), b(), |x, y| x - y)?,
        Op::Mul(..) => zip("mul", a(), b(), |x, y| x * y)?,
        Op::AddRow(..) => {
            let (m, n) = a().dims()?;
            if b().shape() != [1, n] {
                return Err(mismatch("add_row", a(), b()));
            }
            let row = b().data();
            let mut data = a().data().to_vec();
            for chunk in data.chunks_mut(n) {
                for (v, r) in chunk.iter_mut().zip(row) {
                    *v += r;
                }
            }
            Tensor::from_parts(m, n, data)
        }
        Op::MulCol(..) => {
            let (m, n) = a().dims()?;
            if b().shape() != [m, 1] {
                return Err(mismatch("mul_col", a(), b()));
            }
            let col = b().data();
            let mut data = a().data().to_vec();
            for (chunk, &f) in data.chunks_mut(n).zip(col) {
                for v in chunk.iter_mut() {
                    *v *= f;
                }
            }
            Tensor::from_parts(m, n, data)
        }
        Op::DivCol(..) => {
            let (m, n) = a().dims()?;
            if b().shape() != [m, 1] {
                return Err(mismatch("div_col", a(), b()));
            }
            let col = b().data();
            let mut data = a().data().to_vec();
            for (chunk, &d) in data.chunks_mut(n).zip(col) {
                for v in chunk.iter_mut() {
                    *v = if d == 0.0 { 0.0 } else { *v / d };
                }
            }
            Tensor::from_parts(m, n, data)
        }
        Op::MulScalar(..) => {
            if b().shape() != [1, 1] {
                return Err(mismatch("mul_scalar", a(), b()));
            }
            let s = b().item();
            let (m, n) = a().dims()?;
            Tensor::from_parts(m, n, a().data().iter().map(|v| v * s).collect())
        }
        Op::SumRows(..) => {
            let (_, n) = a().dims()?;
            let mut out = vec![0.0; n];
            for chunk in a().data().chunks(n) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            Tensor::from_parts(1, n, out)
        }
        Op::SumCols(..) => {
            let (m, n) = a().dims()?;
            Tensor::from_parts(m, 1, a().data().chunks(n).map(|c| c.iter().sum()).collect())
        }
        Op::Sum(..) => Tensor::scalar(a().data().iter().sum()),
        Op::Mean(..) => Tensor::scalar(a().data().iter().sum::<f64>() / a().len() as f64),
        Op::Scale(_, c) => map(a(), |x| x * c),
        Op::AddScalar(_, c) => map(a(), |x| x + c),
        Op::Tanh(_) => map(a(), f64::tanh),
        Op::LeakyRelu(_, slope) => map(a(), |x| if x > 0.0 { x } else { slope * x }),
        Op::Exp(_) => map(a(), f64::exp),
        Op::Log(_) => map(a(), f64::ln),
        Op::Recip(_) => map(a(), |x| 1.0 / x),
        Op::SafeRecip(_) => map(a(), |x| if x == 0.0 { 0.0 } else { 1.0 / x }),
        Op::Sigmoid(_) => map(a(), sigmoid),
        Op::Square(_) => map(a(), |x| x * x),
        Op::Sqrt(_) => map(a(), f64::sqrt),
        Op::RowNorm(_) => {
            let (m, _) = a().dims()?;
            Tensor::from_parts(m, 1, a().row_norms())
        }
        Op::ClampMin(_, lo) => map(a(), |x| if x > *lo { x } else { *lo }),
        Op::ConcatCols(..) => {
            let (m, na) = a().dims()?;
            let (m2, nb) = b().dims()?;
            if m != m2 {
                return Err(mismatch("concat", a(), b()));
            }
            let mut data = Vec::with_capacity(m * (na + nb));
            for i in 0..m {
                data.extend_from_slice(a().row(i));
                data.extend_from_slice(b().row(i));
            }
            Tensor::from_parts(m, na + nb, data)
        }
        Op::SliceCols { start, len, .. } => {
            let (m, n) = a().dims()?;
            if *len == 0 || start + len > n {
                return Err(Error::InvalidTensor(format!(
                    "slice_cols: columns {start}..{} out of range for width {n}",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&a().row(i)[*start..start + len]);
            }
            Tensor::from_parts(m, *len, data)
        }
        Op::PadCols { start, total, .. } => {
            let (m, n) = a().dims()?;
            if start + n > *total {
                return Err(Error::InvalidTensor(format!(
                    "pad_cols: width {n} at offset {start} exceeds {total}"
                )));
            }
            let mut data = vec![0.0; m * total];
            for i in 0..m {
                data[i * total + start..i * total + start + n].copy_from_slice(a().row(i));
            }
            Tensor::from_parts(m, *total, data)
        }
        Op::Softmax(_) => {
            let (m, n) = a().dims()?;
            let mut data = vec![0.0; m * n];
            for (i, out) in data.chunks_mut(n).enumerate() {
                row_softmax(a().row(i), out);
            }
            Tensor::from_parts(m, n, data)
        }
        Op::LogSumExp(_) => {
            let (m, _) = a().dims()?;
            Tensor::from_parts(m, 1, (0..m).map(|i| row_logsumexp(a().row(i))).collect())
        }
        Op::SoftmaxXent(_, labels) => {
            let (m, n) = a().dims()?;
            if labels.len() != m {
                return Err(Error::ShapeMismatch {
                    op: "softmax_xent",
                    left: a().shape().to_vec(),
                    right: vec![labels.len()],
                });
            }
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= n {
                    return Err(Error::LabelOutOfRange {
                        label: y,
                        classes: n,
                    });
                }
                let row = a().row(i);
                total += row_logsumexp(row) - row[y];
            }
            Tensor::scalar(total / m as f64)
        }
    })
}
