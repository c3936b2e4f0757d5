use std::cell::RefCell;
use std::rc::Rc;

use super::ops::{eval, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Leaf,
    Constant,
    Computed,
}

struct Node {
    op: Op,
    kind: Kind,
    value: Rc<Tensor>,
}

/// Append-only record of a computation.
///
/// Node ids are positions in the record, so every input id precedes the node
/// that consumes it. A graph is single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, kind: Kind, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            kind,
            value: Rc::new(value),
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input: parameters, or inputs whose gradient is needed.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, Kind::Leaf, value)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Constant, Kind::Constant, value)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn apply(&self, op: Op) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let inputs: Vec<&Tensor> = op.inputs().iter().map(|&i| &*nodes[i].value).collect();
            eval(&op, &inputs)?
        };
        Ok(self.push(op, Kind::Computed, value))
    }

    fn apply_unary(&self, op: Op) -> Var<'_> {
        self.apply(op).expect("unary ops accept any rank-2 input")
    }

    pub fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Recomputes every non-input node from its inputs, in record order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Rc<Tensor>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.kind {
                Kind::Leaf | Kind::Constant => Rc::clone(&node.value),
                Kind::Computed => {
                    let inputs: Vec<&Tensor> =
                        node.op.inputs().iter().map(|&i| &*values[i]).collect();
                    Rc::new(eval(&node.op, &inputs)?)
                }
            };
            values.push(v);
        }
        Ok(values.iter().map(|v| (**v).clone()).collect())
    }

    /// True when replaying reproduces every stored value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        let nodes = self.nodes.borrow();
        Ok(nodes.iter().zip(&replayed).all(|(n, r)| n.value.bit_eq(r)))
    }

    /// Whether `output` was computed from `input`.
    pub fn depends_on(&self, output: Var<'_>, input: Var<'_>) -> bool {
        if input.id > output.id {
            return false;
        }
        let nodes = self.nodes.borrow();
        let mut reach = vec![false; output.id + 1];
        reach[input.id] = true;
        for i in input.id + 1..=output.id {
            reach[i] = nodes[i].op.inputs().iter().any(|&j| reach[j]);
        }
        reach[output.id]
    }

    /// Gradients of scalar `output` with respect to each leaf in `wrt`.
    pub fn grad(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let vars = self.grad_graph(output, wrt)?;
        Ok(vars.iter().map(|v| v.value().as_ref().clone()).collect())
    }

    /// Like [`Graph::grad`], but the gradients are themselves recorded, so
    /// they can be differentiated again.
    pub fn grad_graph<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let out_shape = output.shape();
        if out_shape != [1, 1] {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let (ops, kinds): (Vec<Op>, Vec<Kind>) = {
            let nodes = self.nodes.borrow();
            nodes[..=output.id]
                .iter()
                .map(|n| (n.op.clone(), n.kind))
                .unzip()
        };
        for w in wrt {
            if kinds.get(w.id) != Some(&Kind::Leaf) {
                if w.id > output.id && self.nodes.borrow()[w.id].kind == Kind::Leaf {
                    // A leaf created after the output cannot influence it.
                    continue;
                }
                return Err(Error::NotALeaf(w.id));
            }
        }

        // Which nodes depend on a requested leaf.
        let mut needs = vec![false; output.id + 1];
        for w in wrt {
            if w.id <= output.id {
                needs[w.id] = true;
            }
        }
        for (i, op) in ops.iter().enumerate() {
            if !needs[i] && op.inputs().iter().any(|&j| needs[j]) {
                needs[i] = true;
            }
        }

        let mut adjoint: Vec<Option<Var<'g>>> = vec![None; output.id + 1];
        if needs[output.id] {
            adjoint[output.id] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for id in (0..=output.id).rev() {
            let Some(g) = adjoint[id] else { continue };
            if kinds[id] != Kind::Computed {
                continue;
            }
            let node = Var { graph: self, id };
            let inputs = ops[id].inputs();
            let grads = super::backward::vjp(node, &ops[id], g, &inputs, &needs)?;
            for (input, ginput) in inputs.into_iter().zip(grads) {
                let Some(ginput) = ginput else { continue };
                adjoint[input] = Some(match adjoint[input] {
                    None => ginput,
                    Some(acc) => acc.add(ginput)?,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = w.dims();
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }
}

impl<'g> Var<'g> {
    pub(super) fn from_id(graph: &'g Graph, id: NodeId) -> Self {
        Var { graph, id }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims(&self) -> (usize, usize) {
        let v = self.value();
        (v.rows(), v.cols())
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.graph.nodes.borrow()[self.id].kind == Kind::Leaf
    }

    fn bin(self, other: Var<'g>, f: fn(NodeId, NodeId) -> Op) -> Result<Var<'g>> {
        self.graph.apply(f(self.id, other.id))
    }

    fn un(self, op: Op) -> Var<'g> {
        self.graph.apply_unary(op)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, Op::MatMul)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, Op::MatMulNT)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, Op::MatMulTN)
    }

    /// Elementwise add. A `[1 x n]` right-hand side is broadcast over rows.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.dims(), other.dims());
        if a != b && b.0 == 1 && b.1 == a.1 {
            return self.add_row(other);
        }
        self.bin(other, Op::Add)
    }

    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        self.bin(row, Op::AddRow)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, Op::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, Op::Mul)
    }

    pub fn mul_col(self, col: Var<'g>) -> Result<Var<'g>> {
        self.bin(col, Op::MulCol)
    }

    /// Divides each row by its entry in `col`; zero divisors give zero rows.
    pub fn div_col(self, col: Var<'g>) -> Result<Var<'g>> {
        self.bin(col, Op::DivCol)
    }

    pub fn mul_scalar(self, s: Var<'g>) -> Result<Var<'g>> {
        self.bin(s, Op::MulScalar)
    }

    pub fn concat(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, Op::ConcatCols)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g>> {
        self.graph.apply(Op::SliceCols {
            input: self.id,
            start,
            len,
        })
    }

    pub fn pad_cols(self, start: usize, total: usize) -> Result<Var<'g>> {
        self.graph.apply(Op::PadCols {
            input: self.id,
            start,
            total,
        })
    }

    pub fn softmax_xent(self, labels: &[usize]) -> Result<Var<'g>> {
        self.graph.apply(Op::SoftmaxXent(self.id, labels.into()))
    }

    pub fn sum_rows(self) -> Var<'g> {
        self.un(Op::SumRows(self.id))
    }

    pub fn sum_cols(self) -> Var<'g> {
        self.un(Op::SumCols(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        self.un(Op::Sum(self.id))
    }

    /// Mean over every element; for a `[n x 1]` column this is the batch mean.
    pub fn mean(self) -> Var<'g> {
        self.un(Op::Mean(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.un(Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.un(Op::AddScalar(self.id, c))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn tanh(self) -> Var<'g> {
        self.un(Op::Tanh(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.un(Op::LeakyRelu(self.id, slope))
    }

    pub fn exp(self) -> Var<'g> {
        self.un(Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'g> {
        self.un(Op::Log(self.id))
    }

    pub fn recip(self) -> Var<'g> {
        self.un(Op::Recip(self.id))
    }

    pub fn safe_recip(self) -> Var<'g> {
        self.un(Op::SafeRecip(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.un(Op::Sigmoid(self.id))
    }

    pub fn square(self) -> Var<'g> {
        self.un(Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.un(Op::Sqrt(self.id))
    }

    pub fn clamp_min(self, lo: f64) -> Var<'g> {
        self.un(Op::ClampMin(self.id, lo))
    }

    /// Row-wise L2 norm, `[n x d] -> [n x 1]`.
    pub fn row_norm(self) -> Var<'g> {
        self.un(Op::RowNorm(self.id))
    }

    pub fn softmax(self) -> Var<'g> {
        self.un(Op::Softmax(self.id))
    }

    pub fn logsumexp(self) -> Var<'g> {
        self.un(Op::LogSumExp(self.id))
    }

    /// Scales each row to unit L2 norm. Rows with zero norm are rejected.
    pub fn l2_normalize(self) -> Result<Var<'g>> {
        let norm = self.row_norm();
        if let Some(row) = norm.value().data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("norm of row {row}")));
        }
        if let Some(row) = norm.value().data().iter().position(|&v| v == 0.0) {
            return Err(Error::ZeroNormRow { row });
        }
        self.div_col(norm)
    }
}
