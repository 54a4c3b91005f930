//! Loss and reward kernels for pretraining, SFT and group-relative RL on a
//! dual-AR codec model. Everything here is a pure function of its arrays.

mod stt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use stt::{stt_reward_mock, token_count as stt_token_count, SttPenalties};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MathError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Domain(String),
    #[error("codebook weight normalizer is zero")]
    ZeroNormalizer,
    #[error("group needs at least 2 candidates, got {0}")]
    GroupTooSmall(usize),
    #[error("empty sequence")]
    Empty,
    #[error("zero-norm vector")]
    ZeroVector,
}

type Result<T> = std::result::Result<T, MathError>;

fn shape(what: &str, expected: usize, got: usize) -> MathError {
    MathError::Shape(format!("{what}: expected {expected}, got {got}"))
}

/// Realized slow-token log-probs with the per-token mask and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowLogProbs<T> {
    pub logp: Vec<T>,
    pub mask: Vec<T>,
    pub weight: Vec<T>,
}

impl<T: Scalar> SlowLogProbs<T> {
    pub fn new(logp: Vec<T>, mask: Vec<T>, weight: Vec<T>) -> Result<Self> {
        let s = Self { logp, mask, weight };
        s.validate()?;
        Ok(s)
    }

    /// Unmasked, unit-weighted.
    pub fn unweighted(logp: Vec<T>) -> Result<Self> {
        let n = logp.len();
        Self::new(logp, vec![T::one(); n], vec![T::one(); n])
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.logp.len();
        if self.mask.len() != t {
            return Err(shape("mask length", t, self.mask.len()));
        }
        if self.weight.len() != t {
            return Err(shape("weight length", t, self.weight.len()));
        }
        if self.logp.iter().any(|&x| !x.is_finite() || x > T::zero()) {
            return Err(MathError::Domain("log-probs must be finite and <= 0".into()));
        }
        if self.mask.iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(MathError::Domain("mask entries must be 0 or 1".into()));
        }
        if self.weight.iter().any(|&w| !w.is_finite() || w <= T::zero()) {
            return Err(MathError::Domain("per-token weights must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Row-major `T x N` grid of per-codebook log-probs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbGrid<T> {
    pub frames: usize,
    pub codebooks: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> LogProbGrid<T> {
    pub fn new(frames: usize, codebooks: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * codebooks {
            return Err(shape("grid size", frames * codebooks, data.len()));
        }
        if data.iter().any(|&x| !x.is_finite() || x > T::zero()) {
            return Err(MathError::Domain("log-probs must be finite and <= 0".into()));
        }
        Ok(Self { frames, codebooks, data })
    }

    pub fn get(&self, t: usize, k: usize) -> T {
        self.data[t * self.codebooks + k]
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.codebooks..(t + 1) * self.codebooks]
    }
}

/// Fast-transformer log-probs with per-codebook loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FastLogProbs<T> {
    pub logp: LogProbGrid<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> FastLogProbs<T> {
    pub fn new(logp: LogProbGrid<T>, weights: Vec<T>) -> Result<Self> {
        if weights.len() != logp.codebooks {
            return Err(shape("codebook weights", logp.codebooks, weights.len()));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < T::zero()) {
            return Err(MathError::Domain("codebook weights must be finite and >= 0".into()));
        }
        Ok(Self { logp, weights })
    }
}

/// How `loss_fast` picks its codebook weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastLossMode {
    /// Every codebook, the semantic one included, weighs 1.
    Pretrain,
    /// Semantic codebook dropped, acoustic codebook k weighs `decay^(k-1)`.
    Sft { decay: f64 },
    /// Use the weights stored on the input.
    Given,
}

impl FastLossMode {
    pub const DEFAULT_SFT_DECAY: f64 = 0.8;

    pub fn sft() -> Self {
        FastLossMode::Sft { decay: Self::DEFAULT_SFT_DECAY }
    }

    pub fn weights<T: Scalar>(&self, n: usize, given: &[T]) -> Vec<T> {
        match *self {
            FastLossMode::Pretrain => vec![T::one(); n],
            FastLossMode::Sft { decay } => {
                let d = T::lit(decay);
                (0..n).map(|k| if k == 0 { T::zero() } else { d.powi(k as i32 - 1) }).collect()
            }
            FastLossMode::Given => given.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights<T> {
    pub lambda_slow: T,
    pub lambda_fast: T,
    /// KL coefficient.
    pub beta: T,
    /// Weight of the fast-model RL loss.
    pub gamma: T,
}

impl<T: Scalar> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_slow", self.lambda_slow), ("lambda_fast", self.lambda_fast), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < T::zero() {
                return Err(MathError::Domain(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        Self { lambda_slow: T::one(), lambda_fast: T::one(), beta: T::lit(0.04), gamma: T::one() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights<T> {
    pub stt: T,
    pub pref: T,
    pub sim: T,
}

impl<T: Scalar> RewardWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let all = [self.stt, self.pref, self.sim];
        if all.iter().any(|&w| !w.is_finite() || w < T::zero()) {
            return Err(MathError::Domain("reward weights must be finite and >= 0".into()));
        }
        if all.iter().all(|&w| w == T::zero()) {
            return Err(MathError::Domain("reward weights are all zero".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for RewardWeights<T> {
    fn default() -> Self {
        Self { stt: T::lit(0.4), pref: T::lit(0.3), sim: T::lit(0.3) }
    }
}

/// Current- and reference-policy log-probs of one sampled candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateLogProbs<T> {
    pub slow: Vec<T>,
    pub slow_ref: Vec<T>,
    pub fast: LogProbGrid<T>,
    pub fast_ref: LogProbGrid<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout<T> {
    pub rewards: Vec<T>,
    pub advantages: Vec<T>,
    pub candidates: Vec<CandidateLogProbs<T>>,
}

impl<T: Scalar> GroupRollout<T> {
    /// Computes advantages from `rewards` and checks shapes.
    pub fn new(rewards: Vec<T>, candidates: Vec<CandidateLogProbs<T>>) -> Result<Self> {
        if candidates.len() != rewards.len() {
            return Err(shape("candidates", rewards.len(), candidates.len()));
        }
        for c in &candidates {
            if c.slow.len() != c.slow_ref.len() {
                return Err(shape("reference slow log-probs", c.slow.len(), c.slow_ref.len()));
            }
            if (c.fast.frames, c.fast.codebooks) != (c.fast_ref.frames, c.fast_ref.codebooks) {
                return Err(MathError::Shape("fast and reference grids differ".into()));
            }
        }
        let advantages = grpo_advantages(&rewards)?;
        Ok(Self { rewards, advantages, candidates })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn candidate(&self, i: usize) -> Result<(&CandidateLogProbs<T>, T)> {
        match (self.candidates.get(i), self.advantages.get(i)) {
            (Some(c), Some(&a)) => Ok((c, a)),
            _ => Err(MathError::Shape(format!("candidate {i} out of range for group of {}", self.len()))),
        }
    }
}

/// `-sum_t m_t * lambda_t * logp_t`, not length-normalized.
pub fn loss_slow<T: Scalar>(s: &SlowLogProbs<T>) -> Result<T> {
    s.validate()?;
    Ok(-s.logp.iter().zip(&s.mask).zip(&s.weight).map(|((&l, &m), &w)| m * w * l).sum::<T>())
}

/// Weighted per-codebook NLL summed over frames, divided by the sum of the
/// acoustic (k >= 1) weights.
pub fn loss_fast<T: Scalar>(f: &FastLogProbs<T>, mode: FastLossMode) -> Result<T> {
    let n = f.logp.codebooks;
    let w = mode.weights(n, &f.weights);
    let norm: T = w.iter().skip(1).copied().sum();
    if norm <= T::zero() {
        return Err(MathError::ZeroNormalizer);
    }
    let mut acc = T::zero();
    for t in 0..f.logp.frames {
        acc = acc + f.logp.row(t).iter().zip(&w).map(|(&l, &wk)| wk * l).sum::<T>();
    }
    Ok(-acc / norm)
}

pub fn loss_total<T: Scalar>(ls: T, lf: T, w: &LossWeights<T>) -> T {
    w.lambda_slow * ls + w.lambda_fast * lf
}

/// Reward minus the group mean. No division by the group std.
pub fn grpo_advantages<T: Scalar>(rewards: &[T]) -> Result<Vec<T>> {
    if rewards.len() < 2 {
        return Err(MathError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(MathError::Domain("non-finite reward".into()));
    }
    let mean = rewards.iter().copied().sum::<T>() / T::from_usize(rewards.len()).expect("group size");
    Ok(rewards.iter().map(|&r| r - mean).collect())
}

/// Largest log-ratio fed to `exp` in the KL estimator.
pub const KL_LOG_RATIO_CLAMP: f64 = 30.0;

/// `exp(r) - r - 1` for `r = min(ref - cur, 30)`.
pub fn kl_k3<T: Scalar>(logp_cur: T, logp_ref: T) -> T {
    let r = (logp_ref - logp_cur).min(T::lit(KL_LOG_RATIO_CLAMP));
    if r.abs() < T::lit(0.1) {
        // Series r^2/2! + ... + r^13/13!, which avoids cancellation near 0.
        let mut acc = T::zero();
        for n in (2..=13).rev() {
            acc = (acc + T::lit(1.0 / factorial(n))) * r;
        }
        return (acc * r).max(T::zero());
    }
    (r.exp_m1() - r).max(T::zero())
}

fn factorial(n: u32) -> f64 {
    (2..=n).map(f64::from).product()
}

pub fn kl_schulman<T: Scalar>(logp_cur: &[T], logp_ref: &[T]) -> Result<Vec<T>> {
    if logp_cur.len() != logp_ref.len() {
        return Err(shape("reference log-probs", logp_cur.len(), logp_ref.len()));
    }
    if logp_cur.iter().chain(logp_ref).any(|x| !x.is_finite()) {
        return Err(MathError::Domain("non-finite log-prob".into()));
    }
    Ok(logp_cur.iter().zip(logp_ref).map(|(&c, &r)| kl_k3(c, r)).collect())
}

/// `(1/T) * sum_t (-A * logp_t + beta * kl_t)` for candidate `i`.
pub fn rl_loss_slow<T: Scalar>(g: &GroupRollout<T>, i: usize, beta: T) -> Result<T> {
    let (c, a) = g.candidate(i)?;
    if c.slow.is_empty() {
        return Err(MathError::Empty);
    }
    let kl = kl_schulman(&c.slow, &c.slow_ref)?;
    let t = T::from_usize(c.slow.len()).expect("length");
    let pg: T = c.slow.iter().map(|&l| -a * l).sum();
    let kl: T = kl.into_iter().sum();
    Ok(pg / t + beta * kl / t)
}

/// Per-term normalization of the fast RL loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastRlNorm {
    /// Each (t, k) term divided by the vocabulary size of codebook k.
    #[default]
    CodebookSize,
    /// Mean over the `T * (N-1)` acoustic tokens.
    TokenCount,
}

/// Sum over frames t and acoustic codebooks k = 1..N-1 of
/// `-A * logp[t][k] + beta * kl[t][k]`, normalized per `norm`.
/// `vocab_sizes[k-1]` is the size of acoustic codebook k.
pub fn rl_loss_fast<T: Scalar>(
    g: &GroupRollout<T>,
    i: usize,
    beta: T,
    vocab_sizes: &[usize],
    norm: FastRlNorm,
) -> Result<T> {
    let (c, a) = g.candidate(i)?;
    let n = c.fast.codebooks;
    if n < 2 {
        return Err(MathError::Shape("fast grid needs at least 2 codebooks".into()));
    }
    if vocab_sizes.len() != n - 1 {
        return Err(shape("acoustic vocab sizes", n - 1, vocab_sizes.len()));
    }
    if vocab_sizes.contains(&0) {
        return Err(MathError::Domain("codebook size 0".into()));
    }
    let kl = kl_schulman(&c.fast.data, &c.fast_ref.data)?;
    let mut acc = T::zero();
    for t in 0..c.fast.frames {
        for k in 1..n {
            let term = -a * c.fast.get(t, k) + beta * kl[t * n + k];
            acc = acc
                + match norm {
                    FastRlNorm::CodebookSize => term / T::from_usize(vocab_sizes[k - 1]).expect("vocab"),
                    FastRlNorm::TokenCount => term,
                };
        }
    }
    Ok(match norm {
        FastRlNorm::CodebookSize => acc,
        FastRlNorm::TokenCount => {
            let count = c.fast.frames * (n - 1);
            if count == 0 {
                return Err(MathError::Empty);
            }
            acc / T::from_usize(count).expect("count")
        }
    })
}

pub fn rl_loss_total<T: Scalar>(slow: T, fast: T, gamma: T) -> T {
    slow + gamma * fast
}

pub fn reward_fuse<T: Scalar>(r_stt: T, r_pref: T, r_sim: T, w: &RewardWeights<T>) -> T {
    w.stt * r_stt + w.pref * r_pref + w.sim * r_sim
}

/// Cosine similarity.
pub fn sim_reward<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(shape("embedding dims", a.len(), b.len()));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(MathError::ZeroVector);
    }
    if !(dot.is_finite() && na.is_finite() && nb.is_finite()) {
        return Err(MathError::Domain("non-finite embedding".into()));
    }
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}
