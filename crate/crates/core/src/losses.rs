//! Training objectives.
//!
//! Graph-level losses return a scalar [`Var`] so callers can differentiate
//! them; value-level helpers (`*_estimate`) work on plain slices.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradnorm_penalty, Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{Architecture, Bound, MlpSpec};
use crate::rng;
use crate::tensor::Tensor;

const UNIT_TOL: f64 = 1e-6;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_w: f64,
    pub lambda_a: f64,
    pub lambda_g: f64,
    /// Additive angular margin, radians.
    pub margin: f64,
    /// Logit scale of the margin softmax.
    pub scale: f64,
    pub age_bins: usize,
    /// Upper end of the age range; bins split `[0, age_max]` evenly.
    pub age_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_w: 0.1,
            lambda_a: 1.0,
            lambda_g: 10.0,
            margin: 0.5,
            scale: 64.0,
            age_bins: 16,
            age_max: 80.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lambda_w >= 0.0, "lambda_w must be >= 0"),
            (self.lambda_a >= 0.0, "lambda_a must be >= 0"),
            (self.lambda_g >= 0.0, "lambda_g must be >= 0"),
            (self.margin >= 0.0, "margin must be >= 0"),
            (self.scale > 0.0, "scale must be > 0"),
            (self.age_bins >= 1, "age_bins must be positive"),
            (self.age_max > 0.0, "age_max must be > 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

fn check_unit_rows(what: &'static str, t: &Tensor) -> Result<()> {
    for (row, norm) in t.row_norms().into_iter().enumerate() {
        if !((norm - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::NotUnitNorm { what, row, norm });
        }
    }
    Ok(())
}

fn onehot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

/// Additive angular margin softmax loss, averaged over the batch.
///
/// The target logit is `s·cos(min(θ_y + m, π))`, the rest `s·cos θ_j`.
/// `embeddings` `[n x d]` and `centres` `[C x d]` must have unit rows.
pub fn margin_softmax_loss<'g>(
    embeddings: Var<'g>,
    centres: Var<'g>,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<Var<'g>> {
    check_unit_rows("margin_softmax embeddings", &embeddings.value())?;
    check_unit_rows("margin_softmax class centres", &centres.value())?;
    let (n, _) = embeddings.dims();
    let (classes, _) = centres.dims();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "margin_softmax_loss",
            left: embeddings.shape(),
            right: vec![labels.len()],
        });
    }
    let graph = embeddings.graph();
    let cosines = embeddings.matmul_nt(centres)?;
    if margin == 0.0 {
        return cosines.scale(scale).softmax_xent(labels);
    }
    let hot = graph.constant(onehot(labels, classes)?);
    let target = cosines.mul(hot)?.sum_cols();
    // cos(θ + m) = cos θ cos m − sin θ sin m, with sin θ = √(1 − cos²θ) ≥ 0.
    let sine = target.square().neg().add_scalar(1.0).clamp_min(0.0).sqrt();
    let shifted = target.scale(margin.cos()).sub(sine.scale(margin.sin()))?;
    // Past θ + m = π the cosine would turn back up; hold it at −1.
    let limit = (PI - margin).cos();
    let keep = target.value().map(|c| if c > limit { 1.0 } else { 0.0 });
    let shifted = shifted
        .mul(graph.constant(keep.clone()))?
        .add(graph.constant(keep.map(|k| k - 1.0)))?;
    let delta = shifted.sub(target)?;
    let logits = cosines.add(hot.mul_col(delta)?)?;
    logits.scale(scale).softmax_xent(labels)
}

/// Bin index of `age`: `floor(age / (age_max / bins))`, clipped to the last bin.
pub fn age_bin(age: f64, age_max: f64, bins: usize) -> Result<usize> {
    if age < 0.0 || age.is_nan() {
        return Err(Error::NegativeAge(age));
    }
    let width = age_max / bins as f64;
    Ok(((age / width).floor() as usize).min(bins - 1))
}

/// Softmax cross-entropy of age-bin logits against the binned ages.
pub fn age_xent<'g>(logits: Var<'g>, ages: &[f64], age_max: f64, bins: usize) -> Result<Var<'g>> {
    if logits.dims().1 != bins {
        return Err(Error::ShapeMismatch {
            op: "age_loss",
            left: logits.shape(),
            right: vec![bins],
        });
    }
    let labels = ages
        .iter()
        .map(|&a| age_bin(a, age_max, bins))
        .collect::<Result<Vec<_>>>()?;
    logits.softmax_xent(&labels)
}

/// Age head applied to attribute embeddings, then [`age_xent`].
pub fn age_loss<'g>(
    bound: &Bound<'g>,
    embeddings: Var<'g>,
    ages: &[f64],
    weights: &LossWeights,
) -> Result<Var<'g>> {
    let logits = crate::nets::age_logits(bound, embeddings)?;
    age_xent(logits, ages, weights.age_max, weights.age_bins)
}

fn check_pair(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa[1] != 1 || sb[1] != 1 || sa[0] != sb[0] {
        return Err(Error::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        });
    }
    Ok(())
}

/// `mean(joint) − mean(product)` over critic scores.
pub fn wasserstein_loss<'g>(joint: Var<'g>, product: Var<'g>) -> Result<Var<'g>> {
    check_pair("wasserstein_loss", joint, product)?;
    joint.mean().sub(product.mean())
}

/// Value-level [`wasserstein_loss`].
pub fn wasserstein_estimate(joint: &[f64], product: &[f64]) -> Result<f64> {
    if joint.is_empty() || product.is_empty() {
        return Err(Error::EmptyBatch("wasserstein_loss"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(joint) - mean(product))
}

/// Interpolates `ε_i·joint_i + (1 − ε_i)·product_i` with `ε_i ~ U[0, 1]`
/// drawn from `seed`.
pub fn interpolate(joint: &Tensor, product: &Tensor, seed: u64) -> Result<Tensor> {
    if joint.shape() != product.shape() {
        return Err(Error::ShapeMismatch {
            op: "gradient_penalty",
            left: joint.shape().to_vec(),
            right: product.shape().to_vec(),
        });
    }
    let (n, d) = joint.dims()?;
    let mut rng = rng::stream(seed, &[0x6770]);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let eps: f64 = rng.gen();
        data.extend(
            joint
                .row(i)
                .iter()
                .zip(product.row(i))
                .map(|(j, p)| eps * j + (1.0 - eps) * p),
        );
    }
    Tensor::matrix(n, d, data)
}

/// Gradient penalty `mean_i (‖∇ f(x̃_i)‖₂ − 1)²` at random interpolates.
/// Returns the penalty and the interpolates' input gradients.
pub fn gradient_penalty<'g>(
    arch: &Architecture,
    bound: &Bound<'g>,
    joint: &Tensor,
    product: &Tensor,
    seed: u64,
) -> Result<(Var<'g>, Var<'g>)> {
    network_gradient_penalty(&arch.critic, "critic", bound, joint, product, seed)
}

/// [`gradient_penalty`] for any scalar network bound under `prefix`.
pub fn network_gradient_penalty<'g>(
    spec: &MlpSpec,
    prefix: &str,
    bound: &Bound<'g>,
    joint: &Tensor,
    product: &Tensor,
    seed: u64,
) -> Result<(Var<'g>, Var<'g>)> {
    let mixed = interpolate(joint, product, seed)?;
    let graph: &'g Graph = bound.get(&format!("{prefix}.0.w"))?.graph();
    let x = graph.leaf(mixed);
    let scores = spec.forward(prefix, bound, x)?;
    gradnorm_penalty(scores, x)
}

/// Result of the discriminator loss, with a flag raised when an output sat
/// on the boundary of (0, 1) and had to be floored inside a log.
pub struct DiscriminatorLoss<'g> {
    pub loss: Var<'g>,
    pub clamped: bool,
}

fn check_probabilities(what: &'static str, t: &Tensor) -> Result<bool> {
    let mut clamped = false;
    for &v in t.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::ProbabilityOutOfRange { what, value: v });
        }
        clamped |= v == 0.0 || v == 1.0;
    }
    Ok(clamped)
}

/// `½·mean(log(1 − D(joint))) + ½·mean(log D(product))`.
///
/// The discriminator is pushed towards 1 on product samples and towards 0 on
/// joint samples; maximizing this over D gives `JSD − log 2`.
pub fn jsd_discriminator_loss<'g>(d_joint: Var<'g>, d_product: Var<'g>) -> Result<DiscriminatorLoss<'g>> {
    check_pair("jsd_discriminator_loss", d_joint, d_product)?;
    let c1 = check_probabilities("D(joint)", &d_joint.value())?;
    let c2 = check_probabilities("D(product)", &d_product.value())?;
    let joint_term = d_joint.neg().add_scalar(1.0).clamp_min(LOG_FLOOR).log().mean();
    let product_term = d_product.clamp_min(LOG_FLOOR).log().mean();
    Ok(DiscriminatorLoss {
        loss: joint_term.add(product_term)?.scale(0.5),
        clamped: c1 || c2,
    })
}

/// Value-level discriminator loss.
pub fn jsd_discriminator_value(d_joint: &[f64], d_product: &[f64]) -> Result<f64> {
    if d_joint.is_empty() || d_product.is_empty() {
        return Err(Error::EmptyBatch("jsd_discriminator_loss"));
    }
    for &v in d_joint.iter().chain(d_product) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::ProbabilityOutOfRange {
                what: "discriminator output",
                value: v,
            });
        }
    }
    let mean = |it: &mut dyn Iterator<Item = f64>, n: usize| it.sum::<f64>() / n as f64;
    let j = mean(&mut d_joint.iter().map(|&d| (1.0 - d).max(LOG_FLOOR).ln()), d_joint.len());
    let p = mean(&mut d_product.iter().map(|&d| d.max(LOG_FLOOR).ln()), d_product.len());
    Ok(0.5 * (j + p))
}

/// `log 2 + L_d`, clamped to `[0, log 2]`: the JSD between joint and product
/// distributions when D is the optimal discriminator.
pub fn jsd_estimate(d_joint: &[f64], d_product: &[f64]) -> Result<f64> {
    Ok((LN_2 + jsd_discriminator_value(d_joint, d_product)?).clamp(0.0, LN_2))
}

/// How the attribute channel is trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeMode {
    /// The attribute encoder learns from age labels alongside the identity task.
    #[default]
    Supervised,
    /// A frozen, separately trained attribute encoder supplies `x̂_a`.
    Pretrained,
}

impl std::str::FromStr for AgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(AgeMode::Supervised),
            "pretrained" => Ok(AgeMode::Pretrained),
            other => Err(Error::Config(format!(
                "mode must be `supervised` or `pretrained`, got `{other}`"
            ))),
        }
    }
}

/// `L_id + λ_w·L_w + λ_a·L_a`; the age term is dropped in pretrained mode.
pub fn total_loss(l_id: f64, l_w: f64, l_a: f64, weights: &LossWeights, mode: AgeMode) -> f64 {
    match mode {
        AgeMode::Supervised => l_id + weights.lambda_w * l_w + weights.lambda_a * l_a,
        AgeMode::Pretrained => l_id + weights.lambda_w * l_w,
    }
}

/// Graph form of [`total_loss`]. `l_a` may be absent in pretrained mode.
pub fn total_loss_var<'g>(
    l_id: Var<'g>,
    l_w: Var<'g>,
    l_a: Option<Var<'g>>,
    weights: &LossWeights,
    mode: AgeMode,
) -> Result<Var<'g>> {
    let base = l_id.add(l_w.scale(weights.lambda_w))?;
    match (mode, l_a) {
        (AgeMode::Supervised, Some(l_a)) => base.add(l_a.scale(weights.lambda_a)),
        (AgeMode::Supervised, None) => Err(Error::Config("supervised mode needs an age loss".into())),
        (AgeMode::Pretrained, _) => Ok(base),
    }
}
