//! Vector-Jacobian products, written with recorded graph operations so that
//! a gradient can be differentiated again.
//!
//! Piecewise-constant derivatives (leaky-relu slopes, clamp masks) enter as
//! constants; their own derivative is zero almost everywhere.

use super::graph::Var;
use super::ops::{NodeId, Op};
use crate::error::Result;
use crate::tensor::Tensor;

fn ones_like<'g>(v: Var<'g>) -> Var<'g> {
    let (r, c) = v.dims();
    v.graph().constant(Tensor::ones(r, c))
}

fn input<'g>(node: Var<'g>, id: NodeId) -> Var<'g> {
    Var::from_id(node.graph(), id)
}

/// Gradients for each input of `node` (None where the input needs none).
pub(super) fn vjp<'g>(
    node: Var<'g>,
    op: &Op,
    g: Var<'g>,
    inputs: &[NodeId],
    needs: &[bool],
) -> Result<Vec<Option<Var<'g>>>> {
    let want = |k: usize| needs[inputs[k]];
    let x = |k: usize| input(node, inputs[k]);
    let graph = node.graph();

    let mut out: Vec<Option<Var<'g>>> = vec![None; inputs.len()];
    macro_rules! set {
        ($k:expr, $e:expr) => {
            if want($k) {
                out[$k] = Some($e);
            }
        };
    }

    match op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(..) => {
            set!(0, g.matmul_nt(x(1))?);
            set!(1, x(0).matmul_tn(g)?);
        }
        Op::MatMulNT(..) => {
            set!(0, g.matmul(x(1))?);
            set!(1, g.matmul_tn(x(0))?);
        }
        Op::MatMulTN(..) => {
            set!(0, x(1).matmul_nt(g)?);
            set!(1, x(0).matmul(g)?);
        }
        Op::Add(..) => {
            set!(0, g);
            set!(1, g);
        }
        Op::Sub(..) => {
            set!(0, g);
            set!(1, g.neg());
        }
        Op::Mul(..) => {
            set!(0, g.mul(x(1))?);
            set!(1, g.mul(x(0))?);
        }
        Op::AddRow(..) => {
            set!(0, g);
            set!(1, g.sum_rows());
        }
        Op::MulCol(..) => {
            set!(0, g.mul_col(x(1))?);
            set!(1, g.mul(x(0))?.sum_cols());
        }
        Op::DivCol(..) => {
            set!(0, g.div_col(x(1))?);
            set!(1, g.mul(node)?.sum_cols().neg().div_col(x(1))?);
        }
        Op::MulScalar(..) => {
            set!(0, g.mul_scalar(x(1))?);
            set!(1, g.mul(x(0))?.sum());
        }
        Op::SumRows(..) => {
            // Broadcast the [1 x n] adjoint back over rows.
            let (r, c) = x(0).dims();
            set!(0, graph.constant(Tensor::zeros(r, c)).add_row(g)?);
        }
        Op::SumCols(..) => {
            let (r, c) = x(0).dims();
            set!(0, graph.constant(Tensor::ones(r, c)).mul_col(g)?);
        }
        Op::Sum(..) => {
            set!(0, ones_like(x(0)).mul_scalar(g)?);
        }
        Op::Mean(..) => {
            let n = x(0).value().len() as f64;
            set!(0, ones_like(x(0)).mul_scalar(g.scale(1.0 / n))?);
        }
        Op::Scale(_, c) => set!(0, g.scale(*c)),
        Op::AddScalar(..) => set!(0, g),
        Op::Tanh(_) => {
            // 1 - y²
            set!(0, g.mul(node.square().neg().add_scalar(1.0))?);
        }
        Op::LeakyRelu(_, slope) => {
            let mask = x(0).value().map(|v| if v > 0.0 { 1.0 } else { *slope });
            set!(0, g.mul(graph.constant(mask))?);
        }
        Op::Exp(_) => set!(0, g.mul(node)?),
        Op::Log(_) => set!(0, g.mul(x(0).recip())?),
        Op::Recip(_) | Op::SafeRecip(_) => {
            // d(1/x) = -1/x², written in terms of the output so the zero
            // branch of SafeRecip stays zero.
            set!(0, g.mul(node.square().neg())?);
        }
        Op::Sigmoid(_) => {
            set!(0, g.mul(node.mul(node.neg().add_scalar(1.0))?)?);
        }
        Op::Square(_) => set!(0, g.mul(x(0).scale(2.0))?),
        Op::Sqrt(_) => set!(0, g.mul(node.safe_recip().scale(0.5))?),
        Op::RowNorm(_) => {
            set!(0, x(0).mul_col(g)?.div_col(node)?);
        }
        Op::ClampMin(_, lo) => {
            let mask = x(0).value().map(|v| if v > *lo { 1.0 } else { 0.0 });
            set!(0, g.mul(graph.constant(mask))?);
        }
        Op::ConcatCols(..) => {
            let na = x(0).dims().1;
            let nb = x(1).dims().1;
            set!(0, g.slice_cols(0, na)?);
            set!(1, g.slice_cols(na, nb)?);
        }
        Op::SliceCols { start, .. } => {
            let total = x(0).dims().1;
            set!(0, g.pad_cols(*start, total)?);
        }
        Op::PadCols { start, .. } => {
            let len = x(0).dims().1;
            set!(0, g.slice_cols(*start, len)?);
        }
        Op::Softmax(_) => {
            // y ⊙ (g - Σ_j g_j y_j)
            let inner = g.mul(node)?.sum_cols();
            let ones = ones_like(node);
            set!(0, node.mul(g.sub(ones.mul_col(inner)?)?)?);
        }
        Op::LogSumExp(_) => {
            set!(0, x(0).softmax().mul_col(g)?);
        }
        Op::SoftmaxXent(_, labels) => {
            let logits = x(0);
            let (r, c) = logits.dims();
            let mut onehot = Tensor::zeros(r, c);
            for (i, &y) in labels.iter().enumerate() {
                onehot.data_mut()[i * c + y] = 1.0;
            }
            let diff = logits.softmax().sub(graph.constant(onehot))?;
            set!(0, diff.mul_scalar(g.scale(1.0 / r as f64))?);
        }
    }
    Ok(out)
}
