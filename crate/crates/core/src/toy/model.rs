//! Two-layer tanh policy over a discrete action set, with hand-written backprop in `f64`.
//!
//! Parameters are one flat vector laid out as `[W1 (hidden x input), b1, W2 (actions x hidden), b2]`,
//! matrices row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_actions: usize,
}

/// Tensor names used when toy parameters are written as checkpoints.
pub const TENSOR_NAMES: [&str; 4] = [
    "policy.fc1.weight",
    "policy.fc1.bias",
    "policy.fc2.weight",
    "policy.fc2.bias",
];

impl PolicyShape {
    pub fn num_params(&self) -> usize {
        let (i, h, a) = (self.input_dim, self.hidden_dim, self.num_actions);
        h * i + h + a * h + a
    }

    /// `(name, shape, offset)` for each parameter tensor in the flat layout.
    pub fn tensors(&self) -> [(&'static str, Vec<usize>, usize); 4] {
        let (i, h, a) = (self.input_dim, self.hidden_dim, self.num_actions);
        [
            (TENSOR_NAMES[0], vec![h, i], 0),
            (TENSOR_NAMES[1], vec![h], h * i),
            (TENSOR_NAMES[2], vec![a, h], h * i + h),
            (TENSOR_NAMES[3], vec![a], h * i + h + a * h),
        ]
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let (i, h, a) = (self.input_dim, self.hidden_dim, self.num_actions);
        (h * i, h * i + h, h * i + h + a * h)
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch(format!(
                "expected input of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Forward {
    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_probs.iter().map(|l| l.exp())
    }
}

fn log_softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in z {
        *v -= lse;
    }
}

pub fn forward(shape: &PolicyShape, params: &[f64], x: &[f64]) -> Result<Forward> {
    shape.check(params, x)?;
    Ok(forward_unchecked(shape, params, x))
}

pub(crate) fn forward_unchecked(shape: &PolicyShape, params: &[f64], x: &[f64]) -> Forward {
    let (i_dim, h_dim, a_dim) = (shape.input_dim, shape.hidden_dim, shape.num_actions);
    let (b1, w2, b2) = shape.offsets();
    let hidden: Vec<f64> = (0..h_dim)
        .map(|j| {
            let row = &params[j * i_dim..(j + 1) * i_dim];
            let pre = params[b1 + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            pre.tanh()
        })
        .collect();
    let mut z: Vec<f64> = (0..a_dim)
        .map(|k| {
            let row = &params[w2 + k * h_dim..w2 + (k + 1) * h_dim];
            params[b2 + k] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
        })
        .collect();
    log_softmax(&mut z);
    Forward { hidden, log_probs: z }
}

/// Action log-probabilities of the policy at `x`.
pub fn policy_forward(shape: &PolicyShape, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(shape, params, x)?.log_probs)
}

/// Adds `sum_j c_j * d log pi(y_j | x) / d params` into `grad`.
pub(crate) fn accumulate_log_prob_grad(
    shape: &PolicyShape,
    params: &[f64],
    x: &[f64],
    fwd: &Forward,
    coeffs: &[(usize, f64)],
    grad: &mut [f64],
) {
    let (i_dim, h_dim, a_dim) = (shape.input_dim, shape.hidden_dim, shape.num_actions);
    let (b1, w2, b2) = shape.offsets();
    // d/dz of sum_j c_j log_softmax(z)[y_j] = sum_j c_j (e_{y_j} - p).
    let c_total: f64 = coeffs.iter().map(|(_, c)| c).sum();
    let mut dz: Vec<f64> = fwd.probs().map(|p| -c_total * p).collect();
    for &(y, c) in coeffs {
        dz[y] += c;
    }
    let mut dh = vec![0.0; h_dim];
    for k in 0..a_dim {
        let g = dz[k];
        grad[b2 + k] += g;
        let row = w2 + k * h_dim;
        for j in 0..h_dim {
            grad[row + j] += g * fwd.hidden[j];
            dh[j] += g * params[row + j];
        }
    }
    for j in 0..h_dim {
        let da = dh[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
        grad[b1 + j] += da;
        let row = j * i_dim;
        for (g, v) in grad[row..row + i_dim].iter_mut().zip(x) {
            *g += da * v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub x: Vec<f64>,
    pub chosen: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub x: Vec<f64>,
    pub target: usize,
}

/// `log(1 + e^v)` without overflow.
fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Mean DPO loss `-log sigmoid(beta * (margin_policy - margin_ref))` over the batch and its
/// gradient with respect to the policy parameters. The reference parameters are frozen.
pub fn dpo_loss_and_grad(
    shape: &PolicyShape,
    policy: &[f64],
    reference: &[f64],
    batch: &[PreferencePair],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; shape.num_params()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.chosen == ex.rejected {
            return Err(Error::DegeneratePair(i));
        }
        if ex.chosen >= shape.num_actions || ex.rejected >= shape.num_actions {
            return Err(Error::DimMismatch(format!("action out of range in example {i}")));
        }
        let f = forward(shape, policy, &ex.x)?;
        let r = forward(shape, reference, &ex.x)?;
        let margin = beta
            * ((f.log_probs[ex.chosen] - r.log_probs[ex.chosen])
                - (f.log_probs[ex.rejected] - r.log_probs[ex.rejected]));
        loss += softplus(-margin) / n;
        // dL/dmargin = -sigmoid(-margin).
        let c = -sigmoid(-margin) * beta / n;
        accumulate_log_prob_grad(shape, policy, &ex.x, &f, &[(ex.chosen, c), (ex.rejected, -c)], &mut grad);
    }
    Ok((loss, grad))
}

/// Mean negative log-likelihood of the targets and its gradient.
pub fn sft_loss_and_grad(shape: &PolicyShape, params: &[f64], batch: &[Labeled]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; shape.num_params()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.target >= shape.num_actions {
            return Err(Error::DimMismatch(format!("target out of range in example {i}")));
        }
        let f = forward(shape, params, &ex.x)?;
        loss -= f.log_probs[ex.target] / n;
        accumulate_log_prob_grad(shape, params, &ex.x, &f, &[(ex.target, -1.0 / n)], &mut grad);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SHAPE: PolicyShape = PolicyShape {
        input_dim: 5,
        hidden_dim: 7,
        num_actions: 4,
    };

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    // Direct softmax oracle, computed without the log-sum-exp path.
    fn softmax_oracle(params: &[f64], x: &[f64]) -> Vec<f64> {
        let (i, h, a) = (SHAPE.input_dim, SHAPE.hidden_dim, SHAPE.num_actions);
        let mut hid = vec![0.0; h];
        for j in 0..h {
            let mut s = params[h * i + j];
            for k in 0..i {
                s += params[j * i + k] * x[k];
            }
            hid[j] = s.tanh();
        }
        let mut z = vec![0.0; a];
        for k in 0..a {
            let mut s = params[h * i + h + a * h + k];
            for j in 0..h {
                s += params[h * i + h + k * h + j] * hid[j];
            }
            z[k] = s.exp();
        }
        let total: f64 = z.iter().sum();
        z.iter().map(|v| v / total).collect()
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = vec![0.0; SHAPE.num_params()];
        let lp = policy_forward(&SHAPE, &p, &[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        for v in lp {
            assert!((v + (4f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_vec(&mut rng, SHAPE.num_params(), 1.0);
            let x = random_vec(&mut rng, SHAPE.input_dim, 2.0);
            let lp = policy_forward(&SHAPE, &p, &x).unwrap();
            let probs = softmax_oracle(&p, &x);
            let sum: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for (a, b) in lp.iter().zip(&probs) {
                assert!((a.exp() - b).abs() < 1e-12);
            }
            assert_eq!(lp, policy_forward(&SHAPE, &p, &x).unwrap());
        }
    }

    #[test]
    fn dimension_errors() {
        let p = vec![0.0; SHAPE.num_params()];
        assert!(matches!(policy_forward(&SHAPE, &p, &[1.0]), Err(Error::DimMismatch(_))));
        assert!(matches!(policy_forward(&SHAPE, &p[1..], &[0.0; 5]), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn dpo_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_vec(&mut rng, SHAPE.num_params(), 0.5);
        let q = random_vec(&mut rng, SHAPE.num_params(), 0.5);
        let batch = vec![
            PreferencePair { x: random_vec(&mut rng, 5, 1.0), chosen: 0, rejected: 2 },
            PreferencePair { x: random_vec(&mut rng, 5, 1.0), chosen: 3, rejected: 1 },
        ];
        let (loss, grad) = dpo_loss_and_grad(&SHAPE, &p, &q, &batch, 0.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(grad.iter().all(|&g| g == 0.0));
        let (loss, _) = dpo_loss_and_grad(&SHAPE, &p, &p, &batch, 0.7).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let bad = vec![PreferencePair { x: vec![0.0; 5], chosen: 1, rejected: 1 }];
        assert!(matches!(dpo_loss_and_grad(&SHAPE, &p, &q, &bad, 0.1), Err(Error::DegeneratePair(0))));
    }

    #[test]
    fn sft_uniform_and_saturated() {
        let p = vec![0.0; SHAPE.num_params()];
        let batch = vec![Labeled { x: vec![0.3; 5], target: 2 }];
        let (loss, _) = sft_loss_and_grad(&SHAPE, &p, &batch).unwrap();
        assert!((loss - (4f64).ln()).abs() < 1e-15);
        // Output bias of +60 on the target saturates the softmax.
        let mut sat = vec![0.0; SHAPE.num_params()];
        let b2 = SHAPE.num_params() - SHAPE.num_actions;
        sat[b2 + 2] = 60.0;
        let (loss, _) = sft_loss_and_grad(&SHAPE, &sat, &batch).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-300)
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, p: &[f64], h: f64) -> Vec<f64> {
        let mut q = p.to_vec();
        (0..p.len())
            .map(|i| {
                q[i] = p[i] + h;
                let up = f(&q);
                q[i] = p[i] - h;
                let down = f(&q);
                q[i] = p[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_vec(&mut rng, SHAPE.num_params(), 0.8);
        let r = random_vec(&mut rng, SHAPE.num_params(), 0.8);
        let batch: Vec<_> = (0..3)
            .map(|k| PreferencePair { x: random_vec(&mut rng, 5, 1.5), chosen: k, rejected: 3 - k })
            .collect();
        let (_, g) = dpo_loss_and_grad(&SHAPE, &p, &r, &batch, 0.5).unwrap();
        let fd = central_diff(|q| dpo_loss_and_grad(&SHAPE, q, &r, &batch, 0.5).unwrap().0, &p, 1e-5);
        assert!(rel_err(&g, &fd) < 1e-6, "{}", rel_err(&g, &fd));
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_vec(&mut rng, SHAPE.num_params(), 0.8);
        let batch: Vec<_> = (0..4)
            .map(|k| Labeled { x: random_vec(&mut rng, 5, 1.5), target: k })
            .collect();
        let (_, g) = sft_loss_and_grad(&SHAPE, &p, &batch).unwrap();
        let fd = central_diff(|q| sft_loss_and_grad(&SHAPE, q, &batch).unwrap().0, &p, 1e-5);
        assert!(rel_err(&g, &fd) < 1e-6, "{}", rel_err(&g, &fd));
    }
}
