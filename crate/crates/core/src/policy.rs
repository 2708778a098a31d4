//! Policies: the Gaussian MLP policy used on continuous tasks and a tabular
//! softmax policy used by the exact oracles.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{Action, State};
use crate::error::{check_dim, Error, Result};
use crate::flow::stack_rows;
use crate::nn::{GradVector, Mlp, Tape, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal Gaussian policy. The network maps a state to `2·action_dim`
/// outputs: the mean, then raw scales squashed into `[sigma_min, sigma_max]`
/// by a scaled logistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub action_dim: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl GaussianPolicy {
    pub const SIGMA_BOUNDS: (f64, f64) = (0.01, 0.1);

    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        GaussianPolicy {
            net: Mlp::new(&sizes, rng),
            action_dim,
            sigma_min: Self::SIGMA_BOUNDS.0,
            sigma_max: Self::SIGMA_BOUNDS.1,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn params(&self) -> &[f64] {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.net.params
    }

    fn squash(&self, raw: f64) -> f64 {
        self.sigma_min + (self.sigma_max - self.sigma_min) * logistic(raw)
    }

    /// Mean and standard deviation of the action distribution at `s`.
    pub fn mean_std(&self, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.forward(s)?;
        let (mu, raw) = out.split_at(self.action_dim);
        Ok((mu.to_vec(), raw.iter().map(|&r| self.squash(r)).collect()))
    }

    pub fn log_prob(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        check_dim(self.action_dim, a.len())?;
        let (mu, sigma) = self.mean_std(s)?;
        Ok(mu
            .iter()
            .zip(&sigma)
            .zip(a)
            .map(|((m, sd), x)| {
                let z = (x - m) / sd;
                -0.5 * z * z - sd.ln() - HALF_LN_2PI
            })
            .sum())
    }

    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R, deterministic: bool) -> Result<Action> {
        let (mu, sigma) = self.mean_std(s)?;
        if deterministic {
            return Ok(Action(mu));
        }
        Ok(Action(mu.iter().zip(&sigma).map(|(m, sd)| m + sd * rng.sample::<f64, _>(StandardNormal)).collect()))
    }

    /// Per-row log-probabilities of actions `a` (`B x action_dim`) at states
    /// `s` (`B x state_dim`), recorded on `tape` with parameters `p`.
    pub fn log_prob_tape(&self, tape: &mut Tape, p: Var, s: Var, a: Var) -> Var {
        let k = self.action_dim;
        let out = self.net.forward_tape(tape, p, s);
        let mu = tape.slice_cols(out, 0, k);
        let raw = tape.slice_cols(out, k, 2 * k);
        let sq = tape.sigmoid(raw);
        let sq = tape.scale(sq, self.sigma_max - self.sigma_min);
        let sigma = tape.add_scalar(sq, self.sigma_min);
        tape.gaussian_log_density(a, mu, sigma)
    }

    /// Mean log-probability over a batch and its gradient.
    pub fn mean_log_prob_grad(&self, s: &Array2<f64>, a: &Array2<f64>) -> Result<(f64, GradVector)> {
        let mut tape = Tape::new();
        let p = tape.flat(&self.net.params);
        let sv = tape.leaf(s.clone());
        let av = tape.leaf(a.clone());
        let lp = self.log_prob_tape(&mut tape, p, sv, av);
        let m = tape.mean(lp);
        let value = tape.scalar(m);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("policy log-likelihood = {value}")));
        }
        tape.backward(m);
        Ok((value, GradVector(tape.grad(p).into_raw_vec_and_offset().0)))
    }

    /// Gradient of `log π(a|s)` for one pair.
    pub fn score(&self, s: &State, a: &Action) -> Result<GradVector> {
        let sb = stack_rows([&s[..]], self.state_dim());
        let ab = stack_rows([&a[..]], self.action_dim);
        Ok(self.mean_log_prob_grad(&sb, &ab)?.1)
    }
}

/// Tabular policy `π(a|s) = softmax(logits[s])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub logits: Vec<Vec<f64>>,
}

impl SoftmaxPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.is_empty() || logits[0].is_empty() {
            return Err(Error::InvalidArgument("empty logit table".into()));
        }
        let m = logits[0].len();
        for row in &logits {
            check_dim(m, row.len())?;
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("policy logits".into()));
            }
        }
        Ok(SoftmaxPolicy { logits })
    }

    pub fn n_states(&self) -> usize {
        self.logits.len()
    }

    pub fn n_actions(&self) -> usize {
        self.logits[0].len()
    }

    /// Number of logits; gradients are indexed by `s * n_actions + a`.
    pub fn num_params(&self) -> usize {
        self.n_states() * self.n_actions()
    }

    pub fn flat_logits(&self) -> Vec<f64> {
        self.logits.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], n_actions: usize) -> Result<Self> {
        Self::new(flat.chunks(n_actions).map(<[f64]>::to_vec).collect())
    }

    /// The policy table `π[s][a]`.
    pub fn table(&self) -> Vec<Vec<f64>> {
        self.logits
            .iter()
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect()
    }

    /// `∇_logits log π(a|s)`: nonzero only in row `s`, where it equals
    /// `onehot(a) - π(·|s)`.
    pub fn score(&self, s: usize, a: usize) -> Vec<f64> {
        let m = self.n_actions();
        let pi = self.table();
        let mut g = vec![0.0; self.num_params()];
        for b in 0..m {
            g[s * m + b] = f64::from(u8::from(a == b)) - pi[s][b];
        }
        g
    }
}
