//! Synthetic identity/age data and cross-age verification folds.
//!
//! Each identity `c` owns a latent `u_c ∈ R⁸ ~ N(0, I)`. An image at age `a`
//! is rendered as
//!
//! ```text
//! x = tanh(W₂·tanh(W₁·[u_c; φ(a)] + b₁) + b₂) + 0.05·ε,   ε ~ N(0, I)
//! φ(a) = [a/80, sin(πa/40), cos(πa/40)]
//! ```
//!
//! with fixed mixing parameters drawn once from the dataset seed. Identity
//! and age are independent in the data but entangled in `x`, so an encoder
//! has to work to separate them. Every sample is a pure function of
//! `(seed, identity, image index)`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 2;
pub const D_X: usize = 32;
pub const LATENT_DIM: usize = 8;
pub const AGE_MAX: f64 = 80.0;
pub const NOISE_STD: f64 = 0.05;
const MIX_HIDDEN: usize = 64;
const AGE_FEATURES: usize = 3;
/// Gain on the age columns of `W₁`.
const AGE_GAIN: f64 = 6.0;
/// Hidden units of the first mixing layer driven by age alone. Age and
/// identity only meet in the second layer, so part of the age signal in `x`
/// is carried along directions identity also uses.
const AGE_UNITS: usize = 32;

pub const FOLDS: usize = 10;
pub const DEFAULT_MIN_GAP: f64 = 30.0;
pub const NEGATIVE_MAX_GAP: f64 = 10.0;
pub const DEFAULT_PAIRS_PER_FOLD: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub x: Vec<f64>,
    pub identity: usize,
    pub age: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub seed: u64,
    pub identities: usize,
    pub images_per_id: usize,
    pub d_x: usize,
    pub generator_version: u32,
    /// Global index of local identity 0; held-out splits use a nonzero offset.
    pub identity_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<SynthSample>,
}

/// Fixed mixing network of the generator.
pub struct Generator {
    seed: u64,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

fn normals(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn age_features(age: f64) -> [f64; AGE_FEATURES] {
    [age / AGE_MAX, (PI * age / 40.0).sin(), (PI * age / 40.0).cos()]
}

impl Generator {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::named(seed, "mixing");
        let d_in = LATENT_DIM + AGE_FEATURES;
        let mut w1 = normals(&mut r, MIX_HIDDEN * d_in, 1.0 / (d_in as f64).sqrt());
        for h in 0..MIX_HIDDEN {
            for k in 0..d_in {
                let age_col = k >= LATENT_DIM;
                // The first AGE_UNITS hidden units see age only, the rest identity only.
                if (h < AGE_UNITS) != age_col {
                    w1[h * d_in + k] = 0.0;
                } else if age_col {
                    w1[h * d_in + k] *= AGE_GAIN;
                }
            }
        }
        let b1 = normals(&mut r, MIX_HIDDEN, 0.1);
        let w2 = normals(&mut r, D_X * MIX_HIDDEN, 1.5 / (MIX_HIDDEN as f64).sqrt());
        let b2 = normals(&mut r, D_X, 0.1);
        Generator { seed, w1, b1, w2, b2 }
    }

    /// Identity latent for a global identity index.
    pub fn latent(&self, identity: usize) -> Vec<f64> {
        let mut r = rng::stream(self.seed, &[0x1d, identity as u64]);
        normals(&mut r, LATENT_DIM, 1.0)
    }

    /// Noise-free rendering of `(u, age)`.
    pub fn render(&self, latent: &[f64], age: f64) -> Vec<f64> {
        let d_in = LATENT_DIM + AGE_FEATURES;
        let mut z = latent.to_vec();
        z.extend_from_slice(&age_features(age));
        let hidden: Vec<f64> = (0..MIX_HIDDEN)
            .map(|h| {
                let row = &self.w1[h * d_in..(h + 1) * d_in];
                (row.iter().zip(&z).map(|(w, v)| w * v).sum::<f64>() + self.b1[h]).tanh()
            })
            .collect();
        (0..D_X)
            .map(|o| {
                let row = &self.w2[o * MIX_HIDDEN..(o + 1) * MIX_HIDDEN];
                (row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>() + self.b2[o]).tanh()
            })
            .collect()
    }

    /// Image `index` of global identity `identity`, with its own age and noise.
    pub fn sample(&self, identity: usize, index: usize) -> (f64, Vec<f64>) {
        let mut r = rng::stream(self.seed, &[0x1a, identity as u64, index as u64]);
        let age = r.gen_range(0.0..AGE_MAX);
        let noise = normals(&mut r, D_X, NOISE_STD);
        let mut x = self.render(&self.latent(identity), age);
        x.iter_mut().zip(&noise).for_each(|(v, e)| *v += e);
        (age, x)
    }
}

/// `identities` identities with `images_per_id` images each, identity-major.
pub fn generate_dataset(seed: u64, identities: usize, images_per_id: usize) -> Result<Dataset> {
    generate_split(seed, 0, identities, images_per_id)
}

/// Like [`generate_dataset`], drawing identities `offset..offset + identities`
/// of the same generator. Local labels still start at zero.
pub fn generate_split(
    seed: u64,
    offset: usize,
    identities: usize,
    images_per_id: usize,
) -> Result<Dataset> {
    if identities < 2 || images_per_id < 2 {
        return Err(Error::Config(format!(
            "need at least 2 identities and 2 images per identity, got {identities} x {images_per_id}"
        )));
    }
    let gen = Generator::new(seed);
    let mut samples = Vec::with_capacity(identities * images_per_id);
    for c in 0..identities {
        for k in 0..images_per_id {
            let (age, x) = gen.sample(offset + c, k);
            samples.push(SynthSample { x, identity: c, age });
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            seed,
            identities,
            images_per_id,
            d_x: D_X,
            generator_version: GENERATOR_VERSION,
            identity_offset: offset,
        },
        samples,
    })
}

const MAGIC: &[u8; 8] = b"SYNTHDS1";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.header.d_x
    }

    /// Feature rows for the given sample indices.
    pub fn features(&self, idx: &[usize]) -> Result<Tensor> {
        let d = self.d_x();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            let s = self.samples.get(i).ok_or_else(|| {
                Error::InvalidTensor(format!("sample index {i} out of range ({})", self.len()))
            })?;
            data.extend_from_slice(&s.x);
        }
        Tensor::matrix(idx.len(), d, data)
    }

    pub fn all_features(&self) -> Result<Tensor> {
        self.features(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Binary encoding: magic, header fields, then `(identity, age, x)` records,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(64 + self.len() * (12 + 8 * h.d_x));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.generator_version.to_le_bytes());
        out.extend_from_slice(&h.seed.to_le_bytes());
        for v in [h.identities, h.images_per_id, h.d_x, h.identity_offset] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&(s.identity as u64).to_le_bytes());
            out.extend_from_slice(&s.age.to_le_bytes());
            for v in &s.x {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Format("dataset file truncated".into()));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != GENERATOR_VERSION {
            return Err(Error::Format(format!("unsupported generator version {version}")));
        }
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut u = || -> Result<usize> { Ok(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize) };
        let identities = u()?;
        let images_per_id = u()?;
        let d_x = u()?;
        let identity_offset = u()?;
        let n = u()?;
        drop(u);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let identity = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let age = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let raw = take(8 * d_x)?;
            let x = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            samples.push(SynthSample { x, identity, age });
        }
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes after dataset records".into()));
        }
        Ok(Dataset {
            header: DatasetHeader {
                seed,
                identities,
                images_per_id,
                d_x,
                generator_version: version,
                identity_offset,
            },
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One verification pair; `label` is true for same-identity pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub idx_a: usize,
    pub idx_b: usize,
    pub label: bool,
    pub age_a: f64,
    pub age_b: f64,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairFolds {
    pub folds: Vec<Vec<Pair>>,
}

impl PairFolds {
    pub fn pairs(&self) -> impl Iterator<Item = &Pair> {
        self.folds.iter().flatten()
    }

    /// One JSON object per line, fold-major.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for p in self.pairs() {
            out.push_str(&serde_json::to_string(p)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut folds: Vec<Vec<Pair>> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Pair = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("pair file line {}: {e}", i + 1)))?;
            if folds.len() <= p.fold {
                folds.resize_with(p.fold + 1, Vec::new);
            }
            folds[p.fold].push(p);
        }
        Ok(PairFolds { folds })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Ten identity-disjoint folds, each with `pairs_per_fold` same-identity
/// pairs at least `min_gap` apart in age and as many different-identity
/// pairs at most [`NEGATIVE_MAX_GAP`] apart.
pub fn build_folds(dataset: &Dataset, min_gap: f64, pairs_per_fold: usize, seed: u64) -> Result<PairFolds> {
    let mut ids: Vec<usize> = dataset
        .samples
        .iter()
        .map(|s| s.identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut r = rng::stream(seed, &[0xf01d]);
    ids.shuffle(&mut r);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); FOLDS];
    for (slot, id) in ids.iter().enumerate() {
        let fold = slot % FOLDS;
        members[fold].extend(
            dataset
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.identity == *id)
                .map(|(i, _)| i),
        );
    }

    let mut folds = Vec::with_capacity(FOLDS);
    for (fold, idx) in members.iter().enumerate() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (a_pos, &a) in idx.iter().enumerate() {
            for &b in &idx[a_pos + 1..] {
                let (sa, sb) = (&dataset.samples[a], &dataset.samples[b]);
                let gap = (sa.age - sb.age).abs();
                if sa.identity == sb.identity {
                    if gap >= min_gap {
                        pos.push((a, b));
                    }
                } else if gap <= NEGATIVE_MAX_GAP {
                    neg.push((a, b));
                }
            }
        }
        if pos.len() < pairs_per_fold || neg.len() < pairs_per_fold {
            return Err(Error::InfeasibleFolds(format!(
                "fold {fold} has {} cross-age positive and {} age-matched negative candidates, needs {pairs_per_fold} of each",
                pos.len(),
                neg.len()
            )));
        }
        let mut r = rng::stream(seed, &[0xfa, fold as u64]);
        let make = |(a, b): (usize, usize), label| Pair {
            idx_a: a,
            idx_b: b,
            label,
            age_a: dataset.samples[a].age,
            age_b: dataset.samples[b].age,
            fold,
        };
        let mut pairs: Vec<Pair> = pos
            .choose_multiple(&mut r, pairs_per_fold)
            .map(|&p| make(p, true))
            .collect();
        pairs.extend(neg.choose_multiple(&mut r, pairs_per_fold).map(|&p| make(p, false)));
        folds.push(pairs);
    }
    Ok(PairFolds { folds })
}

/// Uniformly random permutation of `0..n` without fixed points.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(format!("derangement needs n >= 2, got {n}")));
    }
    let mut r = rng::stream(seed, &[0xde, n as u64]);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut r);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Product-distribution rows `[x̂_id^i, x̂_a^{π(i)}]` for a seeded derangement π.
pub fn shuffle_pairs(id_emb: &Tensor, age_emb: &Tensor, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let n = id_emb.rows();
    if age_emb.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "shuffle_pairs",
            left: id_emb.shape().to_vec(),
            right: age_emb.shape().to_vec(),
        });
    }
    let perm = derangement(n, seed)?;
    Ok((concat_rows(id_emb, &age_emb.select_rows(&perm)?)?, perm))
}

/// Joint rows `[x̂_id^i, x̂_a^i]`.
pub fn joint_pairs(id_emb: &Tensor, age_emb: &Tensor) -> Result<Tensor> {
    concat_rows(id_emb, age_emb)
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, da) = a.dims()?;
    let (m, db) = b.dims()?;
    if n != m {
        return Err(Error::ShapeMismatch {
            op: "concat",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::matrix(n, da + db, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ages: Vec<f64>,
}

impl Batch {
    pub fn from_indices(dataset: &Dataset, indices: Vec<usize>) -> Result<Self> {
        let x = dataset.features(&indices)?;
        let labels = indices.iter().map(|&i| dataset.samples[i].identity).collect();
        let ages = indices.iter().map(|&i| dataset.samples[i].age).collect();
        Ok(Batch {
            indices,
            x,
            labels,
            ages,
        })
    }
}

/// One epoch of seeded, shuffled batches; the final partial batch is dropped.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in 1..={}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(epoch_seed, &[0xba7c]));
    let full = order.len() / batch_size;
    Ok((0..full).map(move |b| {
        Batch::from_indices(dataset, order[b * batch_size..(b + 1) * batch_size].to_vec())
    }))
}
