//! Synthetic contexts, a frozen teacher, and batch samplers.
//!
//! Every example draws from its own ChaCha8 stream (`seed`, stream = example index), so a
//! batch depends only on its seed and on the policy it samples from, never on how many
//! random numbers earlier examples consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{forward_unchecked, Labeled, PolicyShape, PreferencePair};

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn sample_context(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Inverse-CDF draw from `probs` with `u` in `[0, 1)`, skipping index `skip`.
/// `mass` is the total probability of the non-skipped entries.
fn inverse_cdf(probs: &[f64], u: f64, skip: Option<usize>, mass: f64) -> usize {
    let allowed = |k: &usize| Some(*k) != skip;
    if !(mass > 0.0) {
        // All remaining mass underflowed: fall back to a uniform choice.
        let candidates: Vec<usize> = (0..probs.len()).filter(allowed).collect();
        return candidates[((u * candidates.len() as f64) as usize).min(candidates.len() - 1)];
    }
    let target = u * mass;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate().filter(|(k, _)| allowed(k)) {
        acc += p;
        last = k;
        if target < acc {
            return k;
        }
    }
    last
}

/// Draws one action from `probs`.
pub fn sample_action(probs: &[f64], u: f64) -> usize {
    inverse_cdf(probs, u, None, probs.iter().sum())
}

/// Draws two distinct actions: the first from `probs`, the second from `probs` conditioned
/// on differing from the first (the distribution rejection resampling would produce).
pub fn sample_distinct_pair(probs: &[f64], u1: f64, u2: f64) -> (usize, usize) {
    let first = sample_action(probs, u1);
    let rest: f64 = probs
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != first)
        .map(|(_, p)| p)
        .sum();
    (first, inverse_cdf(probs, u2, Some(first), rest))
}

/// Frozen random network that labels preferences and supplies off-policy targets.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub shape: PolicyShape,
    pub params: Vec<f64>,
    /// Softmax temperature applied to the teacher logits for supervised targets.
    pub temperature: f64,
}

impl Teacher {
    pub fn new(shape: PolicyShape, seed: u64, scale: f64, temperature: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..shape.num_params())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Teacher {
            shape,
            params,
            temperature,
        }
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        forward_unchecked(&self.shape, &self.params, x).log_probs
    }

    /// Tempered teacher distribution `softmax(scores / temperature)`.
    pub fn target_probs(&self, x: &[f64]) -> Vec<f64> {
        let s = self.scores(x);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| ((v - max) / self.temperature).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }
}

/// Preference pairs in the in-distribution regime: contexts from the fixed context
/// distribution, both actions sampled from the current policy, the teacher's higher-scored
/// action labelled chosen.
pub fn sample_preference_batch(
    shape: &PolicyShape,
    policy: &[f64],
    teacher: &Teacher,
    n: usize,
    seed: u64,
) -> Vec<PreferencePair> {
    (0..n)
        .map(|i| {
            let mut rng = example_rng(seed, i);
            let x = sample_context(&mut rng, shape.input_dim);
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            let probs: Vec<f64> = forward_unchecked(shape, policy, &x).probs().collect();
            let (a, b) = sample_distinct_pair(&probs, u1, u2);
            let s = teacher.scores(&x);
            let (chosen, rejected) = if s[a] >= s[b] { (a, b) } else { (b, a) };
            PreferencePair { x, chosen, rejected }
        })
        .collect()
}

/// Supervised examples whose targets come from the tempered teacher rather than the
/// policy: an off-policy, out-of-distribution target stream.
pub fn sample_sft_batch(input_dim: usize, teacher: &Teacher, n: usize, seed: u64) -> Vec<Labeled> {
    (0..n)
        .map(|i| {
            let mut rng = example_rng(seed, i);
            let x = sample_context(&mut rng, input_dim);
            let u: f64 = rng.random();
            let _: f64 = rng.random();
            let target = sample_action(&teacher.target_probs(&x), u);
            Labeled { x, target }
        })
        .collect()
}
