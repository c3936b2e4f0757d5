//! Finite-difference oracles shared by the integration targets.

#![allow(dead_code)]

use disentangle::autodiff::{Graph, Var};
use disentangle::losses::{
    age_loss, jsd_discriminator_loss, margin_softmax_loss, wasserstein_loss, LossWeights,
};
use disentangle::nets::{
    critic_score, embed_age, encode_age, encode_id, Activation, Architecture, Bound, MlpSpec, ModelParams,
};
use disentangle::{Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Builder = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>>;

pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Normal entries at least `gap` away from `kink`.
pub fn away_from(rng: &mut ChaCha8Rng, r: usize, c: usize, kink: f64, gap: f64) -> Tensor {
    let data = (0..r * c)
        .map(|_| loop {
            let v: f64 = rng.sample(StandardNormal);
            if (v - kink).abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::matrix(r, c, data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// Scalar `Σ out ⊙ R` for a fixed random `R`, or `out` itself if scalar.
fn scalar_output(inst: &Instance, inputs: &[Tensor], weights: &Option<Tensor>) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (inst.build)(&g, &vars)?;
    Ok(match weights {
        None => out.item(),
        Some(w) => out.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
    })
}

pub struct Check {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over
    /// entries whose difference exceeds the absolute floor.
    pub worst_rel: f64,
    pub entries: usize,
    /// (input, entry, analytic, numeric) at the worst relative error.
    pub worst_at: Option<(usize, usize, f64, f64)>,
}

/// Central differences with step `h` against reverse mode. Differences below
/// `abs_floor` count as agreement; they are rounding noise around zero
/// gradients.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng, h: f64, abs_floor: f64) -> Result<Check> {
    let g = Graph::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (inst.build)(&g, &vars)?;
    let weights = if out.shape() == [1, 1] {
        None
    } else {
        let (r, c) = out.dims();
        Some(randn(rng, r, c))
    };
    let scalar = match &weights {
        None => out,
        Some(w) => out.mul(g.constant(w.clone()))?.sum(),
    };
    let analytic = g.grad(scalar, &vars)?;

    let mut worst_rel: f64 = 0.0;
    let mut worst_at = None;
    let mut entries = 0;
    for (k, input) in inst.inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut plus = inst.inputs.clone();
            plus[k].data_mut()[e] += h;
            let mut minus = inst.inputs.clone();
            minus[k].data_mut()[e] -= h;
            let numeric = (scalar_output(inst, &plus, &weights)? - scalar_output(inst, &minus, &weights)?) / (2.0 * h);
            let a = analytic[k].data()[e];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs());
            if diff > abs_floor && rel > worst_rel {
                worst_rel = rel;
                worst_at = Some((k, e, a, numeric));
            }
            entries += 1;
        }
    }
    Ok(Check { worst_rel, entries, worst_at })
}

pub type CaseFn = fn(&mut ChaCha8Rng) -> Instance;

fn inst(inputs: Vec<Tensor>, build: Builder) -> Instance {
    Instance { inputs, build }
}

/// One generator per differentiable primitive.
pub fn primitive_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            inst(vec![randn(r, m, k), randn(r, k, n)], Box::new(|_, v| v[0].matmul(v[1])))
        }),
        ("matmul_nt", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            inst(vec![randn(r, m, k), randn(r, n, k)], Box::new(|_, v| v[0].matmul_nt(v[1])))
        }),
        ("matmul_tn", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            inst(vec![randn(r, k, m), randn(r, k, n)], Box::new(|_, v| v[0].matmul_tn(v[1])))
        }),
        ("add", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n), randn(r, m, n)], Box::new(|_, v| v[0].add(v[1])))
        }),
        ("add_row", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n), randn(r, 1, n)], Box::new(|_, v| v[0].add_row(v[1])))
        }),
        ("sub", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n), randn(r, m, n)], Box::new(|_, v| v[0].sub(v[1])))
        }),
        ("mul", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n), randn(r, m, n)], Box::new(|_, v| v[0].mul(v[1])))
        }),
        ("mul_col", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n), randn(r, m, 1)], Box::new(|_, v| v[0].mul_col(v[1])))
        }),
        ("div_col", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n), uniform(r, m, 1, 0.5, 2.0)], Box::new(|_, v| v[0].div_col(v[1])))
        }),
        ("mul_scalar", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n), randn(r, 1, 1)], Box::new(|_, v| v[0].mul_scalar(v[1])))
        }),
        ("concat", |r| {
            let (m, a, b) = (dim(r), dim(r), dim(r));
            inst(vec![randn(r, m, a), randn(r, m, b)], Box::new(|_, v| v[0].concat(v[1])))
        }),
        ("slice_cols", |r| {
            let m = dim(r);
            inst(vec![randn(r, m, 5)], Box::new(|_, v| v[0].slice_cols(1, 3)))
        }),
        ("pad_cols", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(move |_, v| v[0].pad_cols(2, v[0].dims().1 + 3)))
        }),
        ("softmax_xent", |r| {
            let m = dim(r);
            inst(
                vec![randn(r, m, 4)],
                Box::new(move |_, v| {
                    let labels: Vec<usize> = (0..v[0].dims().0).map(|i| (i * 3 + 1) % 4).collect();
                    v[0].softmax_xent(&labels)
                }),
            )
        }),
        ("sum_rows", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].sum_rows())))
        }),
        ("sum_cols", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].sum_cols())))
        }),
        ("sum", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].square().sum())))
        }),
        ("mean", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].tanh().mean())))
        }),
        ("scale", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].scale(-2.5))))
        }),
        ("add_scalar", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].add_scalar(0.7).square())))
        }),
        ("neg", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].neg())))
        }),
        ("tanh", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].tanh())))
        }),
        ("leaky_relu", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![away_from(r, m, n, 0.0, 1e-3)], Box::new(|_, v| Ok(v[0].leaky_relu(0.2))))
        }),
        ("exp", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].exp())))
        }),
        ("log", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![uniform(r, m, n, 0.2, 3.0)], Box::new(|_, v| Ok(v[0].log())))
        }),
        ("recip", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![uniform(r, m, n, 0.3, 3.0)], Box::new(|_, v| Ok(v[0].recip())))
        }),
        ("safe_recip", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![away_from(r, m, n, 0.0, 0.3)], Box::new(|_, v| Ok(v[0].safe_recip())))
        }),
        ("sigmoid", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].scale(3.0).sigmoid())))
        }),
        ("square", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].square())))
        }),
        ("sqrt", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![uniform(r, m, n, 0.2, 3.0)], Box::new(|_, v| Ok(v[0].sqrt())))
        }),
        ("clamp_min", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![away_from(r, m, n, 0.1, 1e-3)], Box::new(|_, v| Ok(v[0].clamp_min(0.1))))
        }),
        ("row_norm", |r| {
            let m = dim(r);
            inst(vec![randn(r, m, 3)], Box::new(|_, v| Ok(v[0].row_norm())))
        }),
        ("softmax", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            inst(vec![randn(r, m, n)], Box::new(|_, v| Ok(v[0].softmax())))
        }),
        ("logsumexp", |r| {
            let (m, n) = (dim(r), dim(r));
            inst(vec![randn(r, m, n).map(|x| 4.0 * x)], Box::new(|_, v| Ok(v[0].logsumexp())))
        }),
        ("l2_normalize", |r| {
            let m = dim(r);
            inst(vec![randn(r, m, 4)], Box::new(|_, v| v[0].l2_normalize()))
        }),
    ]
}

/// Small architecture so finite differences over every parameter stay cheap.
pub fn small_arch() -> Architecture {
    let (d_x, d_id, d_a) = (5, 3, 2);
    Architecture {
        d_x,
        d_id,
        d_a,
        classes: 4,
        age_bins: 4,
        f_id: MlpSpec::new(vec![d_x, 4, d_id], Activation::Tanh, true),
        f_a: MlpSpec::new(vec![d_x, 3, d_a], Activation::Tanh, true),
        critic: MlpSpec::new(vec![d_id + d_a, 4, 3, 1], Activation::LeakyRelu { slope: 0.2 }, false),
    }
}

fn small_weights() -> LossWeights {
    LossWeights {
        age_bins: 4,
        ..LossWeights::default()
    }
}

fn random_params(arch: &Architecture, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::new();
    for (name, [r, c]) in arch.param_shapes() {
        p.insert(name, randn(rng, r, c));
    }
    p
}

fn rebind<'g>(names: &[String], vars: &[Var<'g>]) -> Bound<'g> {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// Composite objectives: margin softmax, age, Wasserstein, discriminator,
/// and the full encoder objective over every encoder parameter.
pub fn composite_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("margin_softmax_loss", |r| {
            let n = dim(r) + 1;
            inst(
                vec![randn(r, n, 3), randn(r, 5, 3)],
                Box::new(move |_, v| {
                    let labels: Vec<usize> = (0..v[0].dims().0).map(|i| (2 * i + 1) % 5).collect();
                    let e = v[0].l2_normalize()?;
                    let c = v[1].l2_normalize()?;
                    margin_softmax_loss(e, c, &labels, 8.0, 0.5)
                }),
            )
        }),
        ("margin_softmax_loss_s64", |r| {
            let n = dim(r) + 1;
            inst(
                vec![randn(r, n, 3), randn(r, 5, 3)],
                Box::new(move |_, v| {
                    let labels: Vec<usize> = (0..v[0].dims().0).map(|i| i % 5).collect();
                    let e = v[0].l2_normalize()?;
                    let c = v[1].l2_normalize()?;
                    margin_softmax_loss(e, c, &labels, 64.0, 0.5)
                }),
            )
        }),
        ("wasserstein_critic", |r| {
            let arch = small_arch();
            let names: Vec<String> = arch.critic.param_shapes("critic").into_iter().map(|(n, _)| n).collect();
            let mut inputs: Vec<Tensor> = arch
                .critic
                .param_shapes("critic")
                .into_iter()
                .map(|(_, [a, b])| randn(r, a, b))
                .collect();
            let n = dim(r) + 1;
            inputs.push(randn(r, n, 5));
            inputs.push(randn(r, n, 5));
            inst(
                inputs,
                Box::new(move |_, v| {
                    let k = names.len();
                    let bound = rebind(&names, &v[..k]);
                    let arch = small_arch();
                    wasserstein_loss(critic_score(&arch, &bound, v[k])?, critic_score(&arch, &bound, v[k + 1])?)
                }),
            )
        }),
        ("jsd_discriminator_loss", |r| {
            let n = dim(r) + 1;
            inst(
                vec![randn(r, n, 1), randn(r, n, 1)],
                Box::new(|_, v| Ok(jsd_discriminator_loss(v[0].sigmoid(), v[1].sigmoid())?.loss)),
            )
        }),
        ("encoder_objective", |r| {
            let arch = small_arch();
            let params = random_params(&arch, r);
            let trainable: Vec<String> = params
                .names()
                .filter(|n| !n.starts_with("critic."))
                .map(String::from)
                .collect();
            let critic_names: Vec<String> = params.names().filter(|n| n.starts_with("critic.")).map(String::from).collect();
            let critic: Vec<Tensor> = critic_names.iter().map(|n| params.get(n).unwrap().clone()).collect();
            let inputs: Vec<Tensor> = trainable.iter().map(|n| params.get(n).unwrap().clone()).collect();
            let n = dim(r) + 2;
            let x = randn(r, n, arch.d_x);
            let labels: Vec<usize> = (0..n).map(|i| i % arch.classes).collect();
            let ages: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..80.0)).collect();
            let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
            // x̂_a enters L_w as a constant, fixed at the unperturbed parameters.
            let a_val = embed_age(&arch, &params, &x).unwrap();
            inst(
                inputs,
                Box::new(move |g, v| {
                    let arch = small_arch();
                    let w = small_weights();
                    let mut names = trainable.clone();
                    names.extend(critic_names.iter().cloned());
                    let mut vars = v.to_vec();
                    vars.extend(critic.iter().map(|t| g.constant(t.clone())));
                    let bound = rebind(&names, &vars);
                    let xv = g.constant(x.clone());
                    let e_id = encode_id(&arch, &bound, xv)?;
                    let e_a = encode_age(&arch, &bound, xv)?;
                    let centres = bound.get("g_id.w")?.l2_normalize()?;
                    let l_id = margin_softmax_loss(e_id, centres, &labels, 8.0, 0.5)?;
                    let l_a = age_loss(&bound, e_a, &ages, &w)?;
                    let joint = e_id.concat(g.constant(a_val.clone()))?;
                    let product = e_id.concat(g.constant(a_val.select_rows(&perm)?))?;
                    let l_w = wasserstein_loss(critic_score(&arch, &bound, joint)?, critic_score(&arch, &bound, product)?)?;
                    l_id.add(l_w.scale(w.lambda_w))?.add(l_a.scale(w.lambda_a))
                }),
            )
        }),
    ]
}
