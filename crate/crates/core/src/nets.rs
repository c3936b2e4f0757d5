//! Encoders, heads and critic.
//!
//! Dense networks stand in for the convolutional backbones: the identity
//! encoder `f_id`, the attribute (age) encoder `f_a`, the identity head
//! `g_id` (class-centre matrix for the margin-softmax loss), the age head
//! `g_a` (linear layer over age bins) and the critic, which scores the
//! concatenation of one identity and one attribute embedding.
//!
//! Parameters live in [`ModelParams`], a flat name → tensor map. Each forward
//! pass binds the tensors it needs into a [`Graph`], as leaves when they
//! should receive gradients and as constants when they are frozen.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::rng;
use crate::tensor::Tensor;

pub const CRITIC_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    LeakyRelu { slope: f64 },
}

impl Activation {
    fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu { slope } => x.leaky_relu(slope),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    /// One per hidden layer.
    pub activations: Vec<Activation>,
    /// L2-normalize the output rows.
    pub normalize: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, normalize: bool) -> Self {
        let hidden = widths.len().saturating_sub(2);
        MlpSpec {
            widths,
            activations: vec![activation; hidden],
            normalize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Config(format!(
                "mlp needs at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("mlp widths must be positive: {:?}", self.widths)));
        }
        if self.activations.len() != self.widths.len() - 2 {
            return Err(Error::Config(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                self.widths.len() - 2
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `(name, shape)` of every parameter under `prefix`.
    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, [usize; 2])> {
        (0..self.layers())
            .flat_map(|l| {
                let (i, o) = (self.widths[l], self.widths[l + 1]);
                [
                    (format!("{prefix}.{l}.w"), [i, o]),
                    (format!("{prefix}.{l}.b"), [1, o]),
                ]
            })
            .collect()
    }

    /// Runs the network on `x` with parameters bound under `prefix`.
    pub fn forward<'g>(&self, prefix: &str, bound: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let (_, d) = x.dims();
        if d != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp input",
                left: x.shape(),
                right: vec![self.input_dim()],
            });
        }
        let mut h = x;
        for l in 0..self.layers() {
            let w = bound.get(&format!("{prefix}.{l}.w"))?;
            let b = bound.get(&format!("{prefix}.{l}.b"))?;
            h = h.matmul(w)?.add_row(b)?;
            if let Some(act) = self.activations.get(l) {
                h = act.apply(h);
            }
        }
        if self.normalize {
            h = h.l2_normalize()?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_x: usize,
    pub d_id: usize,
    pub d_a: usize,
    pub classes: usize,
    pub age_bins: usize,
    pub f_id: MlpSpec,
    pub f_a: MlpSpec,
    pub critic: MlpSpec,
}

impl Architecture {
    /// Identity encoder `d_x → 64 → 64 → d_id`, attribute encoder
    /// `d_x → 32 → d_a`, critic `d_id + d_a → 64 → 32 → 1`.
    pub fn desk(d_x: usize, d_id: usize, d_a: usize, classes: usize, age_bins: usize) -> Self {
        Architecture {
            d_x,
            d_id,
            d_a,
            classes,
            age_bins,
            f_id: MlpSpec::new(vec![d_x, 64, 64, d_id], Activation::Tanh, true),
            f_a: MlpSpec::new(vec![d_x, 32, d_a], Activation::Tanh, true),
            critic: critic_spec(d_id + d_a),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.f_id.validate()?;
        self.f_a.validate()?;
        self.critic.validate()?;
        let checks = [
            (self.f_id.input_dim() == self.d_x, "f_id input must be d_x"),
            (self.f_a.input_dim() == self.d_x, "f_a input must be d_x"),
            (self.f_id.output_dim() == self.d_id, "f_id output must be d_id"),
            (self.f_a.output_dim() == self.d_a, "f_a output must be d_a"),
            (self.critic.input_dim() == self.d_id + self.d_a, "critic input must be d_id + d_a"),
            (self.critic.output_dim() == 1, "critic output must be 1"),
            (self.classes >= 1 && self.age_bins >= 1, "classes and age bins must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, [usize; 2])> {
        let mut v = self.f_id.param_shapes("f_id");
        v.extend(self.f_a.param_shapes("f_a"));
        v.push(("g_id.w".into(), [self.classes, self.d_id]));
        v.push(("g_a.w".into(), [self.d_a, self.age_bins]));
        v.push(("g_a.b".into(), [1, self.age_bins]));
        v.extend(self.critic.param_shapes("critic"));
        v
    }
}

/// Critic-shaped network `d → 64 → 32 → 1` with leaky-relu hidden layers.
pub fn critic_spec(d_in: usize) -> MlpSpec {
    MlpSpec::new(vec![d_in, 64, 32, 1], Activation::LeakyRelu { slope: CRITIC_SLOPE }, false)
}

/// Parameter groups, by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    IdEncoder,
    AgeEncoder,
    IdHead,
    AgeHead,
    Critic,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::IdEncoder,
        Group::AgeEncoder,
        Group::IdHead,
        Group::AgeHead,
        Group::Critic,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::IdEncoder => "f_id.",
            Group::AgeEncoder => "f_a.",
            Group::IdHead => "g_id.",
            Group::AgeHead => "g_a.",
            Group::Critic => "critic.",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Names belonging to `group`, in order.
    pub fn group_names(&self, group: Group) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| k.starts_with(group.prefix()))
            .cloned()
            .collect()
    }

    /// A copy holding only the tensors of `groups`.
    pub fn subset(&self, groups: &[Group]) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| Group::of(k).is_some_and(|g| groups.contains(&g)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites (or adds) every tensor of `other`.
    pub fn overlay(&mut self, other: &ModelParams) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// True when every tensor of `groups` is bit-identical in both sets.
    pub fn groups_bit_eq(&self, other: &ModelParams, groups: &[Group]) -> bool {
        let a = self.subset(groups);
        let b = other.subset(groups);
        a.tensors.len() == b.tensors.len()
            && a.tensors
                .iter()
                .all(|(k, v)| b.tensors.get(k).is_some_and(|w| v.bit_eq(w)))
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .all(|(k, v)| other.tensors.get(k).is_some_and(|w| v.bit_eq(w)))
    }

    /// Registers the tensors of `trainable` groups as leaves and the tensors
    /// of `frozen` groups as constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: &[Group], frozen: &[Group]) -> Bound<'g> {
        let mut vars = HashMap::new();
        let mut leaves = Vec::new();
        for (name, t) in &self.tensors {
            let Some(group) = Group::of(name) else { continue };
            if trainable.contains(&group) {
                let v = graph.leaf(t.clone());
                leaves.push((name.clone(), v));
                vars.insert(name.clone(), v);
            } else if frozen.contains(&group) {
                vars.insert(name.clone(), graph.constant(t.clone()));
            }
        }
        Bound { vars, leaves }
    }

    /// Checks every tensor against the architecture's expected shapes.
    pub fn check_shapes(&self, arch: &Architecture) -> Result<()> {
        for (name, shape) in arch.param_shapes() {
            let t = self.get(&name)?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "parameter",
                    left: t.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Parameters registered in one graph.
pub struct Bound<'g> {
    vars: HashMap<String, Var<'g>>,
    leaves: Vec<(String, Var<'g>)>,
}

impl<'g> Bound<'g> {
    /// Binds explicit variables by name; leaves among them are trainable.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'g>)>) -> Self {
        let mut map = HashMap::new();
        let mut leaves = Vec::new();
        for (name, v) in vars {
            if v.is_leaf() {
                leaves.push((name.clone(), v));
            }
            map.insert(name, v);
        }
        leaves.sort_by(|a, b| a.0.cmp(&b.0));
        Bound { vars: map, leaves }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Trainable leaves, ordered by name.
    pub fn leaves(&self) -> &[(String, Var<'g>)] {
        &self.leaves
    }

    pub fn leaf_vars(&self) -> Vec<Var<'g>> {
        self.leaves.iter().map(|(_, v)| *v).collect()
    }
}

fn gaussian_tensor(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut rng = rng::named(seed, name);
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_parts(rows, cols, data)
}

/// Weights ~ N(0, 1/fan_in), biases zero. Each tensor draws from its own
/// stream derived from `(seed, name)`.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut p = ModelParams::new();
    for (name, [r, c]) in arch.param_shapes() {
        let t = if name.ends_with(".b") {
            Tensor::zeros(r, c)
        } else if name == "g_id.w" {
            // Class centres are normalized on use; only directions matter.
            gaussian_tensor(seed, &name, r, c, 1.0)
        } else {
            gaussian_tensor(seed, &name, r, c, 1.0 / (r as f64).sqrt())
        };
        p.insert(name, t);
    }
    Ok(p)
}

/// Fresh parameters for a standalone MLP under `prefix`.
pub fn init_mlp(spec: &MlpSpec, prefix: &str, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut p = ModelParams::new();
    for (name, [r, c]) in spec.param_shapes(prefix) {
        let t = if name.ends_with(".b") {
            Tensor::zeros(r, c)
        } else {
            gaussian_tensor(seed, &name, r, c, 1.0 / (r as f64).sqrt())
        };
        p.insert(name, t);
    }
    Ok(p)
}

fn check_input(x: Var<'_>, d: usize) -> Result<()> {
    if x.dims().1 != d {
        return Err(Error::ShapeMismatch {
            op: "encoder input",
            left: x.shape(),
            right: vec![d],
        });
    }
    Ok(())
}

/// Identity embedding, unit-norm rows `[n x d_id]`.
pub fn encode_id<'g>(arch: &Architecture, bound: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
    check_input(x, arch.d_x)?;
    arch.f_id.forward("f_id", bound, x)
}

/// Attribute embedding, unit-norm rows `[n x d_a]`.
pub fn encode_age<'g>(arch: &Architecture, bound: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
    check_input(x, arch.d_x)?;
    arch.f_a.forward("f_a", bound, x)
}

/// Cosines between identity embeddings and normalized class centres, `[n x C]`.
pub fn id_cosines<'g>(bound: &Bound<'g>, emb: Var<'g>) -> Result<Var<'g>> {
    let centres = bound.get("g_id.w")?.l2_normalize()?;
    emb.matmul_nt(centres)
}

/// Age-bin logits, `[n x bins]`.
pub fn age_logits<'g>(bound: &Bound<'g>, emb: Var<'g>) -> Result<Var<'g>> {
    emb.matmul(bound.get("g_a.w")?)?.add_row(bound.get("g_a.b")?)
}

/// Unbounded critic scores `[n x 1]` for rows `[x̂_id, x̂_a]`.
pub fn critic_score<'g>(arch: &Architecture, bound: &Bound<'g>, pair: Var<'g>) -> Result<Var<'g>> {
    arch.critic.forward("critic", bound, pair)
}

/// Sigmoid-squashed scores of a probe network bound under `prefix`.
pub fn jsd_discriminator_score<'g>(
    spec: &MlpSpec,
    prefix: &str,
    bound: &Bound<'g>,
    pair: Var<'g>,
) -> Result<Var<'g>> {
    Ok(spec.forward(prefix, bound, pair)?.sigmoid())
}

/// Value-level identity embedding (no gradients).
pub fn embed_id(arch: &Architecture, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let b = params.bind(&g, &[], &[Group::IdEncoder]);
    let e = encode_id(arch, &b, g.constant(x.clone()))?;
    Ok(e.value().as_ref().clone())
}

/// Value-level attribute embedding (no gradients).
pub fn embed_age(arch: &Architecture, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let b = params.bind(&g, &[], &[Group::AgeEncoder]);
    let e = encode_age(arch, &b, g.constant(x.clone()))?;
    Ok(e.value().as_ref().clone())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: architecture, parameters and the hash of the config that
/// produced them. Serialized as JSON; floats round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub arch: Architecture,
    pub params: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(arch: Architecture, params: ModelParams, config_hash: String) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash,
            arch,
            params,
            optimizer: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.arch.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
