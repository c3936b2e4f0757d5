//! Reverse-mode differentiation over a recorded graph of rank-2 tensors.
//!
//! The reverse pass is itself recorded ([`Graph::grad_graph`]), which is what
//! makes the gradient-penalty term differentiable with respect to critic
//! parameters: the input gradient `∇ₓ f` is an ordinary node of the graph.

mod backward;
mod graph;
mod ops;

pub use graph::{Graph, Var};
pub use ops::{NodeId, Op};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Penalty value and its pieces, as produced by [`grad_of_gradnorm`].
#[derive(Clone, Debug)]
pub struct GradNormPenalty {
    pub penalty: f64,
    /// `∇ₓ f` for each row of the input.
    pub input_grads: Tensor,
    /// `∂ penalty / ∂θ` for each requested parameter.
    pub param_grads: Vec<Tensor>,
}

/// Records `mean_i (‖∇ₓ f(x_i)‖₂ − 1)²` and returns `(penalty, ∇ₓ f)`.
///
/// `scores` must be `f` applied row-wise to `input`, shape `[n x 1]`. Rows are
/// independent, so the gradient of `Σ f(x_i)` with respect to `input` gives
/// every per-row input gradient in one reverse pass.
pub fn gradnorm_penalty<'g>(scores: Var<'g>, input: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    if !input.is_leaf() {
        return Err(Error::InputGradientDisabled);
    }
    let (n, k) = scores.dims();
    if k != 1 || n != input.dims().0 {
        return Err(Error::ShapeMismatch {
            op: "gradnorm_penalty",
            left: scores.shape(),
            right: input.shape(),
        });
    }
    let graph = scores.graph();
    let input_grad = graph.grad_graph(scores.sum(), &[input])?[0];
    let penalty = input_grad.row_norm().add_scalar(-1.0).square().mean();
    Ok((penalty, input_grad))
}

/// Second-order gradients of the gradient penalty with respect to `params`.
///
/// `critic` maps an `[n x d]` input to `[n x 1]` scores inside `graph`;
/// `input` must be a leaf so its gradient is tracked.
pub fn grad_of_gradnorm<'g, F>(
    graph: &'g Graph,
    critic: F,
    input: Var<'g>,
    params: &[Var<'g>],
) -> Result<GradNormPenalty>
where
    F: Fn(Var<'g>) -> Result<Var<'g>>,
{
    if !input.is_leaf() {
        return Err(Error::InputGradientDisabled);
    }
    let scores = critic(input)?;
    let (penalty, input_grad) = gradnorm_penalty(scores, input)?;
    let param_grads = graph.grad(penalty, params)?;
    Ok(GradNormPenalty {
        penalty: penalty.item(),
        input_grads: input_grad.value().as_ref().clone(),
        param_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn concat_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(5, 4));
        let b = g.constant(Tensor::zeros(5, 3));
        assert_eq!(a.concat(b).unwrap().shape(), vec![5, 7]);
        let c = g.constant(Tensor::zeros(4, 3));
        assert!(matches!(
            a.concat(c),
            Err(Error::ShapeMismatch { op: "concat", .. })
        ));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let g = Graph::new();
        let x = g.constant(t(&[vec![3.0, 4.0]]));
        let y = x.l2_normalize().unwrap();
        assert_eq!(y.value().data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let g = Graph::new();
        let x = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        assert!(matches!(x.l2_normalize(), Err(Error::ZeroNormRow { row: 1 })));
    }

    #[test]
    fn uniform_softmax_xent_is_log3() {
        let g = Graph::new();
        let x = g.constant(t(&[vec![0.0, 0.0, 0.0]]));
        let l = x.softmax_xent(&[1]).unwrap();
        assert!((l.item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let g = Graph::new();
        let x = g.leaf(t(&[vec![1.0, 2.0, 3.0]]));
        let y = x.square().sum();
        let gx = g.grad(y, &[x]).unwrap();
        assert_eq!(gx[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let gx = g.grad(x.tanh().sum(), &[x]).unwrap();
        assert_eq!(gx[0].item(), 1.0);
    }

    #[test]
    fn grad_rejects_non_scalar_and_non_leaf() {
        let g = Graph::new();
        let x = g.leaf(t(&[vec![1.0, 2.0]]));
        let y = x.square();
        assert!(matches!(g.grad(y, &[x]), Err(Error::NonScalarOutput(_))));
        let s = y.sum();
        assert!(matches!(g.grad(s, &[y]), Err(Error::NotALeaf(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.grad(s, &[c]), Err(Error::NotALeaf(_))));
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let z = g.leaf(t(&[vec![1.0, 1.0]]));
        let gz = g.grad(x.square().sum(), &[x, z]).unwrap();
        assert_eq!(gz[0].item(), 4.0);
        assert_eq!(gz[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_penalty_of_linear_map() {
        // f(x) = x·w with w = [3, 4]: penalty (5 − 1)², gradient 2·4·w/‖w‖.
        let g = Graph::new();
        let w = g.leaf(t(&[vec![3.0], vec![4.0]]));
        let x = g.leaf(t(&[vec![0.3, -1.0], vec![2.0, 0.5]]));
        let out = grad_of_gradnorm(&g, |x| x.matmul(w), x, &[w]).unwrap();
        assert_eq!(out.penalty, 16.0);
        assert_eq!(out.param_grads[0].data(), &[4.8, 6.4]);
        assert_eq!(out.input_grads.data(), &[3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn identity_map_sits_at_the_fixed_point() {
        let g = Graph::new();
        let w = g.leaf(Tensor::scalar(1.0));
        let x = g.leaf(t(&[vec![0.7], vec![-2.0]]));
        let out = grad_of_gradnorm(&g, |x| x.matmul(w), x, &[w]).unwrap();
        assert_eq!(out.penalty, 0.0);
        assert_eq!(out.param_grads[0].item(), 0.0);
    }

    #[test]
    fn penalty_requires_tracked_input() {
        let g = Graph::new();
        let w = g.leaf(t(&[vec![1.0], vec![0.0]]));
        let x = g.constant(t(&[vec![1.0, 2.0]]));
        let err = grad_of_gradnorm(&g, |x| x.matmul(w), x, &[w]).unwrap_err();
        assert!(matches!(err, Error::InputGradientDisabled));
        assert!(err.to_string().contains("Graph::leaf"));
    }

    #[test]
    fn replay_is_bit_identical() {
        let g = Graph::new();
        let x = g.leaf(t(&[vec![0.1, -0.2], vec![0.3, 0.4]]));
        let w = g.leaf(t(&[vec![0.5, -1.5, 0.2], vec![2.0, 0.1, -0.7]]));
        let h = x.matmul(w).unwrap().tanh().l2_normalize().unwrap();
        let l = h.softmax_xent(&[0, 2]).unwrap();
        g.grad_graph(l, &[x, w]).unwrap();
        assert!(g.replay_matches().unwrap());
    }
}
