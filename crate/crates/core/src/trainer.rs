//! Alternating adversarial training.
//!
//! Each encoder step: embed the batch, run `n_critic` ascent steps of the
//! critic on `L_w − λ_g·L_grad` with the encoders frozen, then update the
//! encoders with the critic frozen. The identity side descends
//! `L_id + λ_w·L_w`; the attribute side descends `λ_a·L_a` only, because
//! `x̂_a` enters `L_w` as a constant.

use std::io::Write;

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{
    age_loss, jsd_discriminator_loss, jsd_estimate, margin_softmax_loss, network_gradient_penalty,
    wasserstein_loss, AgeMode,
};
use crate::nets::{
    critic_score, critic_spec, embed_age, embed_id, encode_age, encode_id, init_mlp, init_params,
    Architecture, Checkpoint, Group, MlpSpec, ModelParams,
};
use crate::optim::{OptimizerState, RmsProp};
use crate::rng;
use crate::synthdata::{batch_iter, derangement, joint_pairs, shuffle_pairs, Batch, Dataset};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,L_id,L_a,L_w,L_grad,jsd_probe,lr_encoder";

const TAG_CRITIC: u64 = 0xc1;
const TAG_ENCODER: u64 = 0xe1;
const TAG_PROBE: u64 = 0x9b;
const TAG_PROBE_SET: u64 = 0x95;

const ENCODERS: [Group; 4] = [Group::IdEncoder, Group::IdHead, Group::AgeEncoder, Group::AgeHead];
const AGE_GROUPS: [Group; 2] = [Group::AgeEncoder, Group::AgeHead];

/// One encoder step. Missing values are written as empty CSV fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub l_id: f64,
    pub l_a: f64,
    pub l_w: Option<f64>,
    pub l_grad: Option<f64>,
    pub jsd_probe: Option<f64>,
    pub lr_encoder: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.l_id,
            self.l_a,
            opt(self.l_w),
            opt(self.l_grad),
            opt(self.jsd_probe),
            self.lr_encoder
        )
    }
}

pub fn write_metrics(rows: &[MetricsRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_metrics(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

fn ensure_finite(what: impl Into<String>, v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            tensor: what.into(),
            step,
        })
    }
}

fn ensure_finite_tensor(what: impl Into<String>, t: &Tensor, step: usize) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            tensor: what.into(),
            step,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStats {
    pub l_w: f64,
    pub l_grad: f64,
}

/// One RMSprop ascent step on `L_w − λ_g·L_grad` for a critic-shaped
/// network stored under the `critic.` prefix of `params`. Returns the
/// objective terms before the update.
#[allow(clippy::too_many_arguments)]
pub fn critic_step(
    spec: &MlpSpec,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    joint: &Tensor,
    product: &Tensor,
    lambda_g: f64,
    lr: f64,
    rms: RmsProp,
    seed: u64,
    step: usize,
) -> Result<CriticStats> {
    let g = Graph::new();
    let bound = params.bind(&g, &[Group::Critic], &[]);
    let sj = spec.forward("critic", &bound, g.constant(joint.clone()))?;
    let sp = spec.forward("critic", &bound, g.constant(product.clone()))?;
    let l_w = wasserstein_loss(sj, sp)?;
    let (pen, _) = network_gradient_penalty(spec, "critic", &bound, joint, product, seed)?;
    let objective = l_w.sub(pen.scale(lambda_g))?;
    let stats = CriticStats {
        l_w: ensure_finite("L_w", l_w.item(), step)?,
        l_grad: ensure_finite("L_grad", pen.item(), step)?,
    };
    let grads = g.grad(objective, &bound.leaf_vars())?;
    for ((name, _), grad) in bound.leaves().iter().zip(&grads) {
        ensure_finite_tensor(format!("gradient of {name}"), grad, step)?;
    }
    for ((name, _), grad) in bound.leaves().iter().zip(&grads) {
        opt.rmsprop_step(name, params.get_mut(name)?, grad, -lr, rms)?;
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct W1Estimate {
    /// `mean f(p) − mean f(q)`.
    pub raw: f64,
    /// Mean `‖∇f‖` at interpolates of `p` and `q`.
    pub lipschitz: f64,
}

impl W1Estimate {
    /// The raw gap of `f / L`, which is 1-Lipschitz where the gradient norm
    /// is near its mean `L`. The soft penalty lets `L` settle above 1, which
    /// inflates the raw gap by the same factor.
    pub fn normalized(&self) -> f64 {
        self.raw / self.lipschitz
    }
}

/// Wasserstein-1 estimate from a critic-shaped network under the `critic.`
/// prefix of `params`.
pub fn critic_w1(spec: &MlpSpec, params: &ModelParams, p: &Tensor, q: &Tensor, seed: u64) -> Result<W1Estimate> {
    let g = Graph::new();
    let bound = params.bind(&g, &[], &[Group::Critic]);
    let sp = spec.forward("critic", &bound, g.constant(p.clone()))?;
    let sq = spec.forward("critic", &bound, g.constant(q.clone()))?;
    let raw = wasserstein_loss(sp, sq)?.item();
    let (_, grads) = network_gradient_penalty(spec, "critic", &bound, p, q, seed)?;
    let lipschitz = grads.row_norm().mean().item();
    if !(lipschitz > 0.0) {
        return Err(Error::NonFiniteValue("critic gradient norm".into()));
    }
    Ok(W1Estimate { raw, lipschitz })
}

/// Trained model and optimizer buffers.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub arch: Architecture,
    pub params: ModelParams,
    pub opt: OptimizerState,
}

impl TrainState {
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let arch = Architecture::desk(
            dataset.d_x(),
            config.model.d_id,
            config.model.d_a,
            dataset.header.identities,
            config.loss.age_bins,
        );
        let params = init_params(&arch, config.seeds.params)?;
        Ok(TrainState {
            arch,
            params,
            opt: OptimizerState::default(),
        })
    }
}

/// `n_critic` critic updates against frozen embeddings of `x`, each with a
/// fresh derangement and fresh interpolation points. Returns the terms of
/// the last iteration.
pub fn critic_phase(
    state: &mut TrainState,
    x: &Tensor,
    config: &TrainConfig,
    seed: u64,
    step: usize,
) -> Result<CriticStats> {
    let id = embed_id(&state.arch, &state.params, x)
        .map_err(|e| at_step(name_tensor(e, "identity embedding"), step))?;
    let age = embed_age(&state.arch, &state.params, x)
        .map_err(|e| at_step(name_tensor(e, "attribute embedding"), step))?;
    let joint = joint_pairs(&id, &age)?;
    let frozen = state.params.subset(&ENCODERS);
    let mut stats = CriticStats { l_w: 0.0, l_grad: 0.0 };
    for it in 0..config.schedule.n_critic {
        let it_seed = rng::derive(seed, &[it as u64]);
        let (product, _) = shuffle_pairs(&id, &age, it_seed)?;
        stats = critic_step(
            &state.arch.critic,
            &mut state.params,
            &mut state.opt,
            &joint,
            &product,
            config.loss.lambda_g,
            config.optim.lr_critic,
            config.optim.rmsprop(),
            it_seed,
            step,
        )?;
    }
    if !state.params.groups_bit_eq(&frozen, &ENCODERS) {
        return Err(Error::Config("critic phase modified encoder parameters".into()));
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderStats {
    pub l_id: f64,
    pub l_a: f64,
    pub l_w: Option<f64>,
}

/// One SGD step of the encoders and heads with the critic frozen. In
/// pretrained mode the attribute encoder and head are frozen too. With
/// `use_critic` false the adversarial term is not built at all.
pub fn encoder_phase(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    lr_factor: f64,
    use_critic: bool,
    seed: u64,
    step: usize,
) -> Result<EncoderStats> {
    encoder_phase_inner(state, batch, config, lr_factor, use_critic, seed, step).map_err(|e| at_step(e, step))
}

fn name_tensor(e: Error, what: &str) -> Error {
    match e {
        Error::NonFiniteValue(inner) => Error::NonFiniteValue(format!("{what}, {inner}")),
        other => other,
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFiniteValue(tensor) => Error::NonFinite { tensor, step },
        other => other,
    }
}

fn encoder_phase_inner(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    lr_factor: f64,
    use_critic: bool,
    seed: u64,
    step: usize,
) -> Result<EncoderStats> {
    let w = &config.loss;
    let supervised = config.mode == AgeMode::Supervised;
    let (trainable, frozen): (&[Group], &[Group]) = if supervised {
        (&ENCODERS, &[Group::Critic])
    } else {
        (
            &[Group::IdEncoder, Group::IdHead],
            &[Group::AgeEncoder, Group::AgeHead, Group::Critic],
        )
    };
    let g = Graph::new();
    let bound = state.params.bind(&g, trainable, frozen);
    let x = g.constant(batch.x.clone());

    let e_id = encode_id(&state.arch, &bound, x).map_err(|e| name_tensor(e, "identity embedding"))?;
    let centres = bound.get("g_id.w")?.l2_normalize()?;
    let l_id = margin_softmax_loss(e_id, centres, &batch.labels, w.scale, w.margin)?;
    let e_a = encode_age(&state.arch, &bound, x).map_err(|e| name_tensor(e, "attribute embedding"))?;
    let l_a = age_loss(&bound, e_a, &batch.ages, w)?;

    let mut total = l_id;
    if supervised {
        total = total.add(l_a.scale(w.lambda_a))?;
    }
    let l_w = if use_critic {
        let age_value = e_a.value();
        let perm = derangement(batch.indices.len(), seed)?;
        let joint = e_id.concat(g.constant(age_value.as_ref().clone()))?;
        let product = e_id.concat(g.constant(age_value.select_rows(&perm)?))?;
        let l_w = wasserstein_loss(
            critic_score(&state.arch, &bound, joint)?,
            critic_score(&state.arch, &bound, product)?,
        )?;
        for (name, leaf) in bound.leaves() {
            if matches!(Group::of(name), Some(Group::AgeEncoder | Group::AgeHead)) && g.depends_on(l_w, *leaf) {
                return Err(Error::Config(format!("L_w reaches attribute parameter {name}")));
            }
        }
        if w.lambda_w != 0.0 {
            total = total.add(l_w.scale(w.lambda_w))?;
        }
        Some(ensure_finite("L_w", l_w.item(), step)?)
    } else {
        None
    };
    let stats = EncoderStats {
        l_id: ensure_finite("L_id", l_id.item(), step)?,
        l_a: ensure_finite("L_a", l_a.item(), step)?,
        l_w,
    };

    let grads = g.grad(total, &bound.leaf_vars())?;
    for ((name, _), grad) in bound.leaves().iter().zip(&grads) {
        ensure_finite_tensor(format!("gradient of {name}"), grad, step)?;
    }
    let critic_before = state.params.subset(&[Group::Critic]);
    let sgd = config.optim.sgd();
    for ((name, _), grad) in bound.leaves().iter().zip(&grads) {
        let base = match Group::of(name) {
            Some(Group::AgeEncoder | Group::AgeHead) => config.optim.lr_age,
            _ => config.optim.lr_encoder,
        };
        let p = state.params.get_mut(name)?;
        state.opt.sgd_step(name, p, grad, base * lr_factor, sgd)?;
        ensure_finite_tensor(name.clone(), p, step)?;
    }
    if !state.params.groups_bit_eq(&critic_before, &[Group::Critic]) {
        return Err(Error::Config("encoder phase modified critic parameters".into()));
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub rms: RmsProp,
}

/// Jensen-Shannon divergence between the distributions behind the rows of
/// `p` and `q`, from a freshly initialized sigmoid discriminator. The
/// discriminator trains on the first half of each sample and is scored on
/// the second half, so an overfit probe cannot report spurious divergence.
pub fn jsd_probe(p: &Tensor, q: &Tensor, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let (n, d) = p.dims()?;
    let (m, dq) = q.dims()?;
    if d != dq {
        return Err(Error::ShapeMismatch {
            op: "jsd_probe",
            left: p.shape().to_vec(),
            right: q.shape().to_vec(),
        });
    }
    if n < 2 || m < 2 {
        return Err(Error::EmptyBatch("jsd_probe"));
    }
    let halves = |t: &Tensor, k: usize| -> Result<(Tensor, Tensor)> {
        let h = k / 2;
        Ok((
            t.select_rows(&(0..h).collect::<Vec<_>>())?,
            t.select_rows(&(h..k).collect::<Vec<_>>())?,
        ))
    };
    let (p_fit, p_eval) = halves(p, n)?;
    let (q_fit, q_eval) = halves(q, m)?;

    let spec = critic_spec(d);
    let mut params = init_mlp(&spec, "critic", rng::derive(seed, &[TAG_PROBE]))?;
    let mut opt = OptimizerState::default();
    for _ in 0..cfg.steps {
        let g = Graph::new();
        let bound = params.bind(&g, &[Group::Critic], &[]);
        let dj = spec.forward("critic", &bound, g.constant(p_fit.clone()))?.sigmoid();
        let dp = spec.forward("critic", &bound, g.constant(q_fit.clone()))?.sigmoid();
        let loss = jsd_discriminator_loss(dj, dp)?.loss;
        let grads = g.grad(loss, &bound.leaf_vars())?;
        for ((name, _), grad) in bound.leaves().iter().zip(&grads) {
            opt.rmsprop_step(name, params.get_mut(name)?, grad, -cfg.lr, cfg.rms)?;
        }
    }
    let score = |t: &Tensor| -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound = params.bind(&g, &[], &[Group::Critic]);
        let s = spec.forward("critic", &bound, g.constant(t.clone()))?.sigmoid();
        Ok(s.value().data().to_vec())
    };
    jsd_estimate(&score(&p_eval)?, &score(&q_eval)?)
}

/// JSD between joint and deranged embedding pairs of `x`. Each half of the
/// sample is deranged within itself.
pub fn embedding_jsd(
    arch: &Architecture,
    params: &ModelParams,
    x: &Tensor,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let id = embed_id(arch, params, x)?;
    let age = embed_age(arch, params, x)?;
    let n = id.rows();
    let h = n / 2;
    let mut product_rows = Vec::with_capacity(n);
    for (half, range) in [(0..h), (h..n)].into_iter().enumerate() {
        let idx: Vec<usize> = range.collect();
        let perm = derangement(idx.len(), rng::derive(seed, &[half as u64]))?;
        product_rows.extend(perm.iter().map(|&k| idx[k]));
    }
    let joint = joint_pairs(&id, &age)?;
    let product = joint_pairs(&id, &age.select_rows(&product_rows)?)?;
    jsd_probe(&joint, &product, cfg, seed)
}

pub struct TrainOptions<'a> {
    /// Source of the frozen attribute encoder and head in pretrained mode.
    pub pretrained_age: Option<&'a ModelParams>,
    /// Run the critic and the adversarial term.
    pub critic: bool,
    pub progress: Option<&'a mut dyn FnMut(&MetricsRow)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            pretrained_age: None,
            critic: true,
            progress: None,
        }
    }
}

pub struct TrainOutput {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub config_hash: String,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            self.state.arch.clone(),
            self.state.params.clone(),
            self.config_hash.clone(),
        );
        ck.optimizer = Some(self.state.opt.clone());
        ck
    }
}

/// Endless seeded batches, one shuffled epoch after another.
struct Batches<'d> {
    dataset: &'d Dataset,
    size: usize,
    seed: u64,
    epoch: u64,
    current: Box<dyn Iterator<Item = Result<Batch>> + 'd>,
}

impl<'d> Batches<'d> {
    fn new(dataset: &'d Dataset, size: usize, seed: u64) -> Result<Self> {
        let current = Box::new(batch_iter(dataset, size, rng::derive(seed, &[0]))?);
        Ok(Batches {
            dataset,
            size,
            seed,
            epoch: 0,
            current,
        })
    }

    fn next_batch(&mut self) -> Result<Batch> {
        loop {
            if let Some(b) = self.current.next() {
                return b;
            }
            self.epoch += 1;
            self.current = Box::new(batch_iter(
                self.dataset,
                self.size,
                rng::derive(self.seed, &[self.epoch]),
            )?);
        }
    }
}

fn probe_sample(config: &TrainConfig, dataset: &Dataset) -> Result<Tensor> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng::stream(config.seeds.shuffle, &[TAG_PROBE_SET]));
    idx.truncate(config.schedule.probe_samples.min(dataset.len()));
    dataset.features(&idx)
}

fn probe_config(config: &TrainConfig) -> ProbeConfig {
    ProbeConfig {
        steps: config.schedule.probe_steps,
        lr: config.schedule.probe_lr,
        rms: config.optim.rmsprop(),
    }
}

fn check_dataset(config: &TrainConfig, dataset: &Dataset) -> Result<()> {
    if config.schedule.batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {}",
            config.schedule.batch_size,
            dataset.len()
        )));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.age < 0.0) {
        return Err(Error::NegativeAge(s.age));
    }
    Ok(())
}

/// Full training run. The JSD probe is measured before the update of every
/// step divisible by `probe_every`, and after the final update on the last
/// row.
pub fn train(config: &TrainConfig, dataset: &Dataset, mut opts: TrainOptions<'_>) -> Result<TrainOutput> {
    config.validate()?;
    check_dataset(config, dataset)?;
    let mut state = TrainState::new(config, dataset)?;
    if config.mode == AgeMode::Pretrained {
        let source = opts.pretrained_age.ok_or_else(|| {
            Error::Config("pretrained mode needs a pretrained attribute encoder".into())
        })?;
        let age = source.subset(&AGE_GROUPS);
        for name in state.params.group_names(Group::AgeEncoder) {
            let (want, got) = (state.params.get(&name)?.shape(), age.get(&name)?.shape());
            if want != got {
                return Err(Error::ShapeMismatch {
                    op: "pretrained attribute encoder",
                    left: want.to_vec(),
                    right: got.to_vec(),
                });
            }
        }
        state.params.overlay(&age);
    }
    let frozen_age = state.params.subset(&AGE_GROUPS);

    let s = &config.schedule;
    let probe_x = if s.probe_every > 0 { Some(probe_sample(config, dataset)?) } else { None };
    let probe_cfg = probe_config(config);
    let probe = |state: &TrainState, t: usize| -> Result<f64> {
        let x = probe_x.as_ref().expect("probe enabled");
        embedding_jsd(
            &state.arch,
            &state.params,
            x,
            &probe_cfg,
            rng::derive(config.seeds.shuffle, &[TAG_PROBE, t as u64]),
        )
    };

    let mut batches = Batches::new(dataset, s.batch_size, config.seeds.data)?;
    let mut rows = Vec::with_capacity(s.steps);
    for t in 0..s.steps {
        let jsd = if s.probe_every > 0 && t % s.probe_every == 0 {
            Some(probe(&state, t)?)
        } else {
            None
        };
        let batch = batches.next_batch()?;
        let factor = config.lr_factor(t);
        let critic = if opts.critic {
            Some(critic_phase(
                &mut state,
                &batch.x,
                config,
                rng::derive(config.seeds.shuffle, &[TAG_CRITIC, t as u64]),
                t,
            )?)
        } else {
            None
        };
        let enc = encoder_phase(
            &mut state,
            &batch,
            config,
            factor,
            opts.critic,
            rng::derive(config.seeds.shuffle, &[TAG_ENCODER, t as u64]),
            t,
        )?;
        let row = MetricsRow {
            step: t,
            l_id: enc.l_id,
            l_a: enc.l_a,
            l_w: enc.l_w,
            l_grad: critic.map(|c| c.l_grad),
            jsd_probe: jsd,
            lr_encoder: config.optim.lr_encoder * factor,
        };
        if t + 1 < s.steps {
            if let Some(f) = opts.progress.as_mut() {
                f(&row);
            }
        }
        rows.push(row);
    }
    if s.probe_every > 0 {
        let last = rows.last_mut().expect("steps >= 1");
        last.jsd_probe = Some(probe(&state, s.steps)?);
    }
    if let (Some(f), Some(last)) = (opts.progress.as_mut(), rows.last()) {
        f(last);
    }
    if config.mode == AgeMode::Pretrained && !state.params.groups_bit_eq(&frozen_age, &AGE_GROUPS) {
        return Err(Error::Config("pretrained attribute encoder changed during training".into()));
    }
    Ok(TrainOutput {
        state,
        metrics: rows,
        config_hash: config.hash(),
    })
}

/// Trains the attribute encoder and head alone on `L_a`, for use as the
/// frozen attribute channel of a pretrained-mode run.
pub fn pretrain_age_encoder(config: &TrainConfig, dataset: &Dataset) -> Result<(TrainState, Vec<f64>)> {
    config.validate()?;
    check_dataset(config, dataset)?;
    let mut state = TrainState::new(config, dataset)?;
    let mut batches = Batches::new(dataset, config.schedule.batch_size, config.seeds.data)?;
    let sgd = config.optim.sgd();
    let mut history = Vec::with_capacity(config.schedule.steps);
    for t in 0..config.schedule.steps {
        let batch = batches.next_batch()?;
        let g = Graph::new();
        let bound = state.params.bind(&g, &AGE_GROUPS, &[]);
        let e_a = encode_age(&state.arch, &bound, g.constant(batch.x.clone()))?;
        let l_a = age_loss(&bound, e_a, &batch.ages, &config.loss)?;
        history.push(ensure_finite("L_a", l_a.item(), t)?);
        let grads = g.grad(l_a, &bound.leaf_vars())?;
        let lr = config.optim.lr_age * config.lr_factor(t);
        for ((name, _), grad) in bound.leaves().iter().zip(&grads) {
            ensure_finite_tensor(format!("gradient of {name}"), grad, t)?;
            state.opt.sgd_step(name, state.params.get_mut(name)?, grad, lr, sgd)?;
        }
    }
    Ok((state, history))
}
