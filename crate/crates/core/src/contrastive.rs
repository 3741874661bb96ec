//! NCE pair loss, summed contrastive loss, and the two negative stores.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, HasParams, Param, Real};

const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveVariant {
    /// Per-instance memory bank with sampled negatives.
    Instdisc,
    /// FIFO key queue fed by a momentum-updated key encoder.
    Moco,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub variant: ContrastiveVariant,
    pub temperature: f64,
    /// Negatives per query (memory bank variant).
    pub num_negatives: usize,
    pub bank_momentum: f64,
    pub queue_size: usize,
    pub key_momentum: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            variant: ContrastiveVariant::Instdisc,
            temperature: 0.07,
            num_negatives: 512,
            bank_momentum: 0.5,
            queue_size: 4096,
            key_momentum: 0.999,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be > 0"));
        }
        if self.num_negatives == 0 {
            return Err(Error::config("num_negatives must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) || !(0.0..=1.0).contains(&self.key_momentum) {
            return Err(Error::config("momentum values must lie in [0, 1]"));
        }
        if self.variant == ContrastiveVariant::Moco && self.queue_size == 0 {
            return Err(Error::config("queue_size must be ≥ 1"));
        }
        Ok(())
    }
}

fn dot<S: Real>(u: &[S], v: &[S]) -> S {
    u.iter().zip(v).map(|(a, b)| *a * *b).sum()
}

fn norm<S: Real>(u: &[S]) -> S {
    dot(u, u).sqrt()
}

pub fn cosine_similarity<S: Real>(u: &[S], v: &[S]) -> Result<S> {
    if u.len() != v.len() {
        return Err(Error::shape(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == S::zero() || nv == S::zero() {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).max(-S::one()).min(S::one()))
}

fn check_unit<S: Real>(v: &[S]) -> Result<()> {
    let n = norm(v).to_f64().unwrap_or(f64::NAN);
    if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::NotNormalized { norm: n });
    }
    Ok(())
}

/// Row-major `[K][d]` block of negatives.
#[derive(Clone, Copy, Debug)]
pub struct Negatives<'a, S> {
    pub data: &'a [S],
    pub dim: usize,
}

impl<'a, S: Real> Negatives<'a, S> {
    pub fn new(data: &'a [S], dim: usize) -> Self {
        Self { data, dim }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a [S]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Loss and gradients of one (augmented, original) pair.
#[derive(Clone, Debug)]
pub struct PairLoss<S> {
    pub loss: S,
    pub d_aug: Vec<S>,
    pub d_orig: Vec<S>,
    /// Softmax weight of the positive.
    pub positive_prob: S,
}

fn validate_pair<S: Real>(z_aug: &[S], z_orig: &[S], negatives: &Negatives<'_, S>, tau: S) -> Result<()> {
    if !(tau > S::zero()) {
        return Err(Error::config("temperature must be > 0"));
    }
    if z_aug.len() != z_orig.len() || negatives.dim != z_aug.len() || negatives.data.len() % negatives.dim != 0 {
        return Err(Error::shape(z_aug.len(), format!("{} / {}", z_orig.len(), negatives.dim)));
    }
    if negatives.is_empty() {
        return Err(Error::config("at least one negative is required"));
    }
    check_unit(z_aug)?;
    check_unit(z_orig)?;
    for n in negatives.iter() {
        check_unit(n)?;
    }
    Ok(())
}

fn pair_logits<S: Real>(z_aug: &[S], z_orig: &[S], negatives: &Negatives<'_, S>, tau: S) -> Result<Vec<S>> {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine_similarity(z_aug, z_orig)? / tau);
    for n in negatives.iter() {
        logits.push(cosine_similarity(z_aug, n)? / tau);
    }
    Ok(logits)
}

/// `−log( exp(sim(z_aug, z_orig)/τ) / Σ_j exp(sim(z_aug, z_j)/τ) )`, the positive
/// included in the denominator. Stabilized by max subtraction.
pub fn nce_pair_loss<S: Real>(z_aug: &[S], z_orig: &[S], negatives: &Negatives<'_, S>, tau: S) -> Result<S> {
    validate_pair(z_aug, z_orig, negatives, tau)?;
    let logits = pair_logits(z_aug, z_orig, negatives, tau)?;
    Ok(log_sum_exp(&logits) - logits[0])
}

/// Same quantity without max subtraction; overflows for small τ in low precision.
pub fn nce_pair_loss_unstabilized<S: Real>(
    z_aug: &[S],
    z_orig: &[S],
    negatives: &Negatives<'_, S>,
    tau: S,
) -> Result<S> {
    validate_pair(z_aug, z_orig, negatives, tau)?;
    let logits = pair_logits(z_aug, z_orig, negatives, tau)?;
    let denom: S = logits.iter().map(|l| l.exp()).sum();
    Ok(-(logits[0].exp() / denom).ln())
}

/// Gradient of `cos(u, v)` with respect to `u`.
fn cosine_grad_u<S: Real>(u: &[S], v: &[S]) -> Vec<S> {
    let (nu, nv) = (norm(u), norm(v));
    let cos = dot(u, v) / (nu * nv);
    u.iter()
        .zip(v)
        .map(|(a, b)| *b / (nu * nv) - cos * *a / (nu * nu))
        .collect()
}

pub fn nce_pair_loss_with_grad<S: Real>(
    z_aug: &[S],
    z_orig: &[S],
    negatives: &Negatives<'_, S>,
    tau: S,
) -> Result<PairLoss<S>> {
    validate_pair(z_aug, z_orig, negatives, tau)?;
    let logits = pair_logits(z_aug, z_orig, negatives, tau)?;
    let lse = log_sum_exp(&logits);
    let probs: Vec<S> = logits.iter().map(|l| (*l - lse).exp()).collect();
    // ∂loss/∂logit_j = p_j − [j = 0]
    let mut d_aug = vec![S::zero(); z_aug.len()];
    let coef0 = (probs[0] - S::one()) / tau;
    for (d, g) in d_aug.iter_mut().zip(cosine_grad_u(z_aug, z_orig)) {
        *d += coef0 * g;
    }
    for (n, p) in negatives.iter().zip(&probs[1..]) {
        let coef = *p / tau;
        for (d, g) in d_aug.iter_mut().zip(cosine_grad_u(z_aug, n)) {
            *d += coef * g;
        }
    }
    let d_orig = cosine_grad_u(z_orig, z_aug).into_iter().map(|g| coef0 * g).collect();
    Ok(PairLoss {
        loss: lse - logits[0],
        d_aug,
        d_orig,
        positive_prob: probs[0],
    })
}

/// Sum of pair losses over every transformed view of one video.
pub fn contrast_loss<S: Real>(
    augmented: &[&[S]],
    original: &[S],
    negatives: &Negatives<'_, S>,
    tau: S,
) -> Result<S> {
    if augmented.is_empty() {
        return Err(Error::config("contrast loss needs at least one transformed view"));
    }
    augmented
        .iter()
        .map(|z| nce_pair_loss(z, original, negatives, tau))
        .sum()
}

fn normalize_in_place(v: &mut [f32]) -> Result<()> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
    Ok(())
}

/// One unit vector per dataset video, updated as a running average.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    momentum: f64,
    vectors: Vec<f32>,
}

impl MemoryBank {
    /// Random unit vectors, one per slot.
    pub fn random<R: Rng + ?Sized>(size: usize, dim: usize, momentum: f64, rng: &mut R) -> Self {
        let mut vectors: Vec<f32> = (0..size * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        for row in vectors.chunks_exact_mut(dim) {
            if normalize_in_place(row).is_err() {
                row[0] = 1.0;
            }
        }
        Self { dim, momentum, vectors }
    }

    pub fn from_vectors(vectors: Vec<f32>, dim: usize, momentum: f64) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::shape(format!("multiple of {dim}"), vectors.len()));
        }
        for row in vectors.chunks_exact(dim) {
            check_unit(row)?;
        }
        Ok(Self { dim, momentum, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }

    pub fn get(&self, id: usize) -> Result<&[f32]> {
        if id >= self.len() {
            return Err(Error::Index {
                index: id,
                size: self.len(),
            });
        }
        Ok(&self.vectors[id * self.dim..(id + 1) * self.dim])
    }

    /// `slot ← normalize(μ·slot + (1−μ)·z)`.
    pub fn update(&mut self, id: usize, z: &[f32]) -> Result<()> {
        self.get(id)?;
        if z.len() != self.dim {
            return Err(Error::shape(self.dim, z.len()));
        }
        let mu = self.momentum;
        let slot = &mut self.vectors[id * self.dim..(id + 1) * self.dim];
        let mixed: Vec<f32> = slot
            .iter()
            .zip(z)
            .map(|(old, new)| (mu * f64::from(*old) + (1.0 - mu) * f64::from(*new)) as f32)
            .collect();
        let mut mixed = mixed;
        match normalize_in_place(&mut mixed) {
            Ok(()) => slot.copy_from_slice(&mixed),
            // antipodal update with μ = ½ cancels out; keep the new direction
            Err(_) => {
                slot.copy_from_slice(z);
                normalize_in_place(slot)?;
            }
        }
        Ok(())
    }

    /// `min(k, len − 1)` distinct slot ids other than `exclude`, without replacement.
    pub fn sample_ids<R: Rng + ?Sized>(&self, exclude: usize, k: usize, rng: &mut R) -> Vec<usize> {
        let pool = self.len().saturating_sub(1);
        let k = k.min(pool);
        rand::seq::index::sample(rng, pool, k)
            .into_iter()
            .map(|i| if i >= exclude { i + 1 } else { i })
            .collect()
    }

    pub fn gather(&self, ids: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            out.extend_from_slice(&self.vectors[id * self.dim..(id + 1) * self.dim]);
        }
        out
    }
}

/// FIFO of key embeddings with a fixed capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumQueue {
    capacity: usize,
    dim: usize,
    keys: VecDeque<Vec<f32>>,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            keys: VecDeque::with_capacity(capacity),
        }
    }

    /// A full queue of random unit vectors.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Self {
        let bank = MemoryBank::random(capacity, dim, 0.0, rng);
        Self {
            capacity,
            dim,
            keys: bank.as_slice().chunks_exact(dim).map(|k| k.to_vec()).collect(),
        }
    }

    /// Rebuilds a queue from `[len][dim]` keys, oldest first.
    pub fn from_keys(capacity: usize, dim: usize, keys: &[f32]) -> Result<Self> {
        if dim == 0 || keys.len() % dim != 0 || keys.len() / dim > capacity {
            return Err(Error::shape(format!("at most {capacity}×{dim}"), keys.len()));
        }
        let mut q = Self::new(capacity, dim);
        q.push(&keys.chunks_exact(dim).map(|k| k.to_vec()).collect::<Vec<_>>())?;
        Ok(q)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_full(&self) -> bool {
        self.keys.len() == self.capacity
    }

    /// Appends keys, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, keys: &[Vec<f32>]) -> Result<()> {
        for k in keys {
            if k.len() != self.dim {
                return Err(Error::shape(self.dim, k.len()));
            }
            check_unit(k)?;
        }
        for k in keys {
            if self.keys.len() == self.capacity {
                self.keys.pop_front();
            }
            self.keys.push_back(k.clone());
        }
        Ok(())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.keys.iter().map(|k| k.as_slice())
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.keys.iter().flatten().copied().collect()
    }
}

/// Source of negatives for a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub enum NegativeStore {
    Bank(MemoryBank),
    Queue(MomentumQueue),
}

impl NegativeStore {
    pub fn dim(&self) -> usize {
        match self {
            NegativeStore::Bank(b) => b.dim(),
            NegativeStore::Queue(q) => q.dim(),
        }
    }

    /// All stored vectors, row-major.
    pub fn vectors(&self) -> Vec<f32> {
        match self {
            NegativeStore::Bank(b) => b.as_slice().to_vec(),
            NegativeStore::Queue(q) => q.flatten(),
        }
    }

    /// Every vector unit norm within `tol`; a queue is filled to capacity.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        if let NegativeStore::Queue(q) = self {
            if !q.is_full() {
                return Err(Error::Structure(format!(
                    "queue holds {} keys, capacity {}",
                    q.len(),
                    q.capacity()
                )));
            }
        }
        for v in self.vectors().chunks_exact(self.dim()) {
            let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > tol {
                return Err(Error::NotNormalized { norm: n });
            }
        }
        Ok(())
    }
}

/// `key ← m·key + (1−m)·query` for every parameter.
pub fn momentum_encoder_update<S: Real>(
    key: &mut impl HasParams<S>,
    query: &impl HasParams<S>,
    m: S,
) -> Result<()> {
    if m < S::zero() || m > S::one() {
        return Err(Error::config("key momentum must lie in [0, 1]"));
    }
    let mut source: Vec<(String, Vec<usize>, Vec<S>)> = Vec::new();
    query.visit("", &mut |name, p: &Param<S>| source.push((name.to_string(), p.shape.clone(), p.value.clone())));
    let mut names = Vec::new();
    key.visit("", &mut |name, p| names.push((name.to_string(), p.shape.clone())));
    if names.len() != source.len()
        || names
            .iter()
            .zip(&source)
            .any(|((n, s), (qn, qs, _))| n != qn || s != qs)
    {
        return Err(Error::Structure(format!(
            "key has {} parameters, query has {}",
            names.len(),
            source.len()
        )));
    }
    let one_minus = S::one() - m;
    let mut i = 0;
    key.visit_mut("", &mut |_, p| {
        for (k, q) in p.value.iter_mut().zip(&source[i].2) {
            *k = m * *k + one_minus * *q;
        }
        i += 1;
    });
    Ok(())
}
