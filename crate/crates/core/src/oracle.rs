//! Exact ground truth on tabular MDPs.
//!
//! For a softmax policy on a finite ergodic MDP this module computes the
//! stationary distribution, the time-reversed one-step kernel, the
//! discounted long-term predecessor distribution, and the gradient of the
//! log stationary distribution in two independent ways: central finite
//! differences through the stationary solver, and the discounted
//! predecessor-weighted score sum. Gradients are matrices with one row per
//! target state and one column per logit (`s * n_actions + a`).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::env::TabularMdp;
use crate::error::{check_dim, Error, Result};
use crate::policy::SoftmaxPolicy;

/// Residual `‖dP − d‖∞` the power iteration must reach.
pub const STATIONARY_TOL: f64 = 1e-13;
pub const MAX_POWER_ITERS: usize = 1_000_000;

/// State-to-state kernel under a policy, as a matrix.
pub fn state_kernel(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> DMatrix<f64> {
    let k = mdp.state_kernel(&policy.table());
    DMatrix::from_fn(mdp.n_states, mdp.n_states, |i, j| k[i][j])
}

fn residual(d: &DVector<f64>, kernel: &DMatrix<f64>) -> f64 {
    let next = kernel.tr_mul(d);
    (next - d).amax()
}

/// Stationary distribution of a state kernel by power iteration on the lazy
/// chain `½(I + P)`, which has the same fixed point and is aperiodic.
///
/// Iteration continues past [`STATIONARY_TOL`] while the residual keeps
/// shrinking, so the result is accurate to rounding.
pub fn stationary_of_kernel(kernel: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = kernel.nrows();
    let adj: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| kernel[(i, j)] > 0.0).collect()).collect();
    if !crate::env::strongly_connected(&adj) {
        return Err(Error::NotErgodic("state kernel is reducible".into()));
    }
    let mut d = DVector::from_element(n, 1.0 / n as f64);
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..MAX_POWER_ITERS {
        let next = (kernel.tr_mul(&d) + &d) * 0.5;
        d = &next / next.sum();
        let r = residual(&d, kernel);
        if r <= STATIONARY_TOL {
            if r < best {
                best = r;
                stalled = 0;
            } else {
                stalled += 1;
            }
            if r == 0.0 || stalled >= 8 {
                return Ok(d);
            }
        }
    }
    let r = residual(&d, kernel);
    if r <= STATIONARY_TOL {
        return Ok(d);
    }
    Err(Error::NotErgodic(format!("power iteration stalled at residual {r:e}")))
}

pub fn stationary(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<DVector<f64>> {
    check_dim(mdp.n_states, policy.n_states())?;
    check_dim(mdp.n_actions, policy.n_actions())?;
    stationary_of_kernel(&state_kernel(mdp, policy))
}

/// Everything the tabular identities need, computed once per policy.
#[derive(Debug, Clone)]
pub struct TabularOracle {
    pub mdp: TabularMdp,
    pub policy: SoftmaxPolicy,
    pub pi: Vec<Vec<f64>>,
    pub d: DVector<f64>,
    /// `ρ(s, a) = d(s)·π(a|s)`, rows are states.
    pub rho: DMatrix<f64>,
    /// `q[(s', s·A + a)] = P(s_t = s, a_t = a | s_{t+1} = s')`.
    pub q: DMatrix<f64>,
    /// One-step reversed state kernel `Q[(s', s)] = Σ_a q`.
    pub q_state: DMatrix<f64>,
}

impl TabularOracle {
    pub fn new(mdp: TabularMdp, policy: SoftmaxPolicy) -> Result<Self> {
        let d = stationary(&mdp, &policy)?;
        let pi = policy.table();
        let (n, m) = (mdp.n_states, mdp.n_actions);
        let rho = DMatrix::from_fn(n, m, |s, a| d[s] * pi[s][a]);
        let q = reversed_kernel(&mdp, &pi, &d)?;
        let q_state = DMatrix::from_fn(n, n, |sn, s| (0..m).map(|a| q[(sn, s * m + a)]).sum());
        Ok(TabularOracle { mdp, policy, pi, d, rho, q, q_state })
    }

    pub fn n_states(&self) -> usize {
        self.mdp.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.mdp.n_actions
    }

    fn n_pairs(&self) -> usize {
        self.n_states() * self.n_actions()
    }

    /// Score vectors `∇ log π(a|s)` as rows indexed by `s·A + a`.
    pub fn scores(&self) -> DMatrix<f64> {
        let (n, m) = (self.n_states(), self.n_actions());
        let mut out = DMatrix::zeros(n * m, n * m);
        for s in 0..n {
            for a in 0..m {
                let g = self.policy.score(s, a);
                out.row_mut(s * m + a).copy_from_slice(&g);
            }
        }
        out
    }

    /// Discounted predecessor distribution
    /// `B_γ[(s̄, s·A + a)] = (1−γ) Σ_j γ^j P(s_t=s, a_t=a | s_{t+j+1}=s̄)`,
    /// summed in closed form as `(1−γ)(I − γQ)^{-1} q`.
    pub fn predecessor_dist(&self, gamma: f64) -> Result<DMatrix<f64>> {
        check_gamma(gamma)?;
        let n = self.n_states();
        let lhs = DMatrix::identity(n, n) - &self.q_state * gamma;
        let lu = lhs.lu();
        let sol = lu
            .solve(&self.q)
            .ok_or_else(|| Error::InvalidArgument("I − γQ is singular".into()))?;
        Ok(sol * (1.0 - gamma))
    }

    /// Same quantity by summing the series to `j_max`. Returns the partial
    /// sum and the bound `γ^{j_max+1}` on the omitted mass.
    pub fn predecessor_dist_truncated(&self, gamma: f64, j_max: usize) -> Result<(DMatrix<f64>, f64)> {
        check_gamma(gamma)?;
        let mut lag = self.q.clone();
        let mut acc = DMatrix::zeros(self.n_states(), self.n_pairs());
        let mut w = 1.0 - gamma;
        for _ in 0..=j_max {
            acc += &lag * w;
            lag = &self.q_state * lag;
            w *= gamma;
        }
        Ok((acc, gamma.powi(j_max as i32 + 1)))
    }

    /// `(1/(1−γ)) Σ_{s,a} B_γ[s̄](s,a) ∇ log π(a|s)` for every target `s̄`.
    pub fn grad_log_stationary_disc(&self, gamma: f64) -> Result<DMatrix<f64>> {
        let b = self.predecessor_dist(gamma)?;
        Ok(b * self.scores() / (1.0 - gamma))
    }

    /// Central finite differences of `log d(s̄)` in every logit.
    pub fn grad_log_stationary_fd(&self, h: f64) -> Result<DMatrix<f64>> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
        }
        let n = self.n_states();
        let m = self.n_actions();
        let base = self.policy.flat_logits();
        let mut out = DMatrix::zeros(n, n * m);
        for k in 0..n * m {
            let eval = |delta: f64| -> Result<DVector<f64>> {
                let mut th = base.clone();
                th[k] += delta;
                let d = stationary(&self.mdp, &SoftmaxPolicy::from_flat(&th, m)?)?;
                Ok(d.map(f64::ln))
            };
            let col = (eval(h)? - eval(-h)?) / (2.0 * h);
            out.set_column(k, &col);
        }
        Ok(out)
    }

    /// Left minus right side of the one-step recursion
    /// `∇log d(s̄) = Σ_{s,a} q(s,a|s̄)(∇log d(s) + ∇log π(a|s))`, evaluated
    /// with the supplied `∇ log d` (one row per state).
    pub fn recursion_residual(&self, grad_log_d: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.n_actions();
        let scores = self.scores();
        // Repeat each state's ∇log d once per action, then add the scores.
        let expanded = DMatrix::from_fn(self.n_pairs(), grad_log_d.ncols(), |r, c| grad_log_d[(r / m, c)]);
        let rhs = &self.q * (expanded + scores);
        grad_log_d - rhs
    }

    /// Both sides of the policy-gradient equivalence at a demonstrated pair.
    ///
    /// `lhs = ∇log π(ā|s̄) + grad_log_stationary_disc(γ)[s̄]`.
    ///
    /// `rhs` is the exact policy gradient `Σ_{s,a} ρ(s,a) ∇log π(a|s) G(s,a)`
    /// for the reward `R = 1(s=s̄, a=ā)/ρ(s̄,ā)` with the return
    /// `G(s,a) = R(s,a) + Σ_{t≥1} γ^{t−1} E[R(s_t,a_t) | s, a]`, computed
    /// forward in time from a value solve `(I − γP_π) V = r_π`.
    pub fn policy_gradient_equiv(&self, gamma: f64, s_bar: usize, a_bar: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        check_gamma(gamma)?;
        let (n, m) = (self.n_states(), self.n_actions());
        if s_bar >= n || a_bar >= m {
            return Err(Error::InvalidArgument("demonstrated pair out of range".into()));
        }
        let rho_bar = self.rho[(s_bar, a_bar)];
        if !(rho_bar > 0.0) {
            return Err(Error::InvalidArgument(format!("ρ({s_bar},{a_bar}) = 0")));
        }
        let scores = self.scores();
        let disc = self.grad_log_stationary_disc(gamma)?;
        let lhs = scores.row(s_bar * m + a_bar).transpose() + disc.row(s_bar).transpose();

        let reward = |s: usize, a: usize| if (s, a) == (s_bar, a_bar) { 1.0 / rho_bar } else { 0.0 };
        let r_pi = DVector::from_fn(n, |s, _| (0..m).map(|a| self.pi[s][a] * reward(s, a)).sum());
        let p_pi = DMatrix::from_fn(n, n, |s, sn| (0..m).map(|a| self.pi[s][a] * self.mdp.transition[s][a][sn]).sum());
        let v = (DMatrix::identity(n, n) - p_pi * gamma)
            .lu()
            .solve(&r_pi)
            .ok_or_else(|| Error::InvalidArgument("I − γP_π is singular".into()))?;
        let mut rhs = DVector::zeros(n * m);
        for s in 0..n {
            for a in 0..m {
                let future: f64 = (0..n).map(|sn| self.mdp.transition[s][a][sn] * v[sn]).sum();
                let ret = reward(s, a) + future;
                rhs += scores.row(s * m + a).transpose() * (self.rho[(s, a)] * ret);
            }
        }
        Ok((lhs, rhs))
    }

    /// Monte-Carlo estimate of `grad_log_stationary_disc(γ)[s̄]` from
    /// `n_samples` draws of the exact predecessor distribution. Returns the
    /// estimate and per-coordinate standard errors.
    pub fn monte_carlo_grad<R: Rng + ?Sized>(
        &self,
        gamma: f64,
        s_bar: usize,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let b = self.predecessor_dist(gamma)?;
        let probs: Vec<f64> = b.row(s_bar).iter().copied().collect();
        let scores = self.scores();
        let dim = scores.ncols();
        let mut sum = DVector::zeros(dim);
        let mut sq = DVector::zeros(dim);
        let sampler = CategoricalSampler::new(&probs);
        for _ in 0..n_samples {
            let k = sampler.sample(rng);
            let g = scores.row(k).transpose() / (1.0 - gamma);
            sq += g.component_mul(&g);
            sum += g;
        }
        let nf = n_samples as f64;
        let mean = &sum / nf;
        let var = (sq / nf - mean.component_mul(&mean)) * (nf / (nf - 1.0));
        let se = var.map(|v| (v.max(0.0) / nf).sqrt());
        Ok((mean, se))
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// `q[(s', s·A + a)] = d(s) π(a|s) P[s][a][s'] / d(s')`.
pub fn reversed_kernel(mdp: &TabularMdp, pi: &[Vec<f64>], d: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (mdp.n_states, mdp.n_actions);
    if let Some(s) = (0..n).find(|&s| !(d[s] > 0.0)) {
        return Err(Error::NotErgodic(format!("d({s}) = 0")));
    }
    Ok(DMatrix::from_fn(n, n * m, |sn, k| {
        let (s, a) = (k / m, k % m);
        d[s] * pi[s][a] * mdp.transition[s][a][sn] / d[sn]
    }))
}

/// Inverse-CDF sampler over a fixed categorical distribution.
#[derive(Debug, Clone)]
pub struct CategoricalSampler {
    cdf: Vec<f64>,
}

impl CategoricalSampler {
    pub fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p.max(0.0);
                acc
            })
            .collect();
        CategoricalSampler { cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().expect("nonempty");
        let u = rng.random::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Sampler of the exact discounted predecessor distribution. States and
/// actions are single-element index vectors.
#[derive(Debug, Clone)]
pub struct ExactPredecessor {
    n_actions: usize,
    per_target: Vec<CategoricalSampler>,
}

impl ExactPredecessor {
    pub fn new(oracle: &TabularOracle, gamma: f64) -> Result<Self> {
        let b = oracle.predecessor_dist(gamma)?;
        let per_target = (0..oracle.n_states())
            .map(|r| CategoricalSampler::new(&b.row(r).iter().copied().collect::<Vec<_>>()))
            .collect();
        Ok(ExactPredecessor { n_actions: oracle.n_actions(), per_target })
    }
}

impl crate::gpril::PredecessorModel for ExactPredecessor {
    fn sample_predecessors<R: Rng + ?Sized>(
        &self,
        targets: &ndarray::Array2<f64>,
        rng: &mut R,
    ) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
        check_dim(1, targets.ncols())?;
        let n = targets.nrows();
        let mut s = ndarray::Array2::zeros((n, 1));
        let mut a = ndarray::Array2::zeros((n, 1));
        for (r, t) in targets.column(0).iter().enumerate() {
            let sampler = self
                .per_target
                .get(*t as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("target state {t} out of range")))?;
            let k = sampler.sample(rng);
            s[(r, 0)] = (k / self.n_actions) as f64;
            a[(r, 0)] = (k % self.n_actions) as f64;
        }
        Ok((s, a))
    }
}

/// The shipped 4-state, 2-action fixture.
pub fn fixture_4state() -> (TabularMdp, SoftmaxPolicy) {
    let fixture: crate::env::TabularFixture =
        serde_json::from_str(include_str!("../fixtures/mdp4.json")).expect("shipped fixture parses");
    let mdp = fixture.mdp().expect("shipped fixture is valid");
    let policy = SoftmaxPolicy::new(fixture.policy_logits.expect("fixture carries logits")).expect("finite logits");
    (mdp, policy)
}
