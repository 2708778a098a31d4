//! Training by predecessor-likelihood matching.
//!
//! Each outer iteration collects experience with the current policy, fits
//! the predecessor model (two conditional flows over normalized states and
//! raw actions) to geometric-gap triples from the replay buffer, and then
//! takes policy steps on a mix of demonstrated pairs and pairs generated by
//! the predecessor model from demonstrated states. With `beta_d = 0` the
//! loop reduces to behavioral cloning and touches neither the environment
//! nor the flows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::demos::{DemoSet, Normalizer};
use crate::env::{rollout, Action, PointMass, PointMassConfig, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::flow::{stack_rows, FlowSpec, MafStack};
use crate::nn::{clip_by_global_norm, grad, read_checkpoint, write_checkpoint, Adam, GradVector};
use crate::policy::{GaussianPolicy, SoftmaxPolicy};
use crate::replay::{ReplayBuffer, SharedReplay};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorMode {
    /// Rollouts run inline on the learner thread; fully deterministic.
    Sync,
    /// A separate actor thread fills the replay buffer with a policy snapshot.
    Async,
}

/// Hyperparameters of the training loop. `Default` holds the full-scale
/// values; [`GprilConfig::desk_scale`] is sized for a single CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GprilConfig {
    pub gamma: f64,
    pub batch_size: usize,
    /// Predecessor-model steps per outer iteration.
    pub n_b: usize,
    /// Policy steps per outer iteration.
    pub n_pi: usize,
    pub replay_capacity: usize,
    pub beta_pi: f64,
    pub beta_d: f64,
    /// Model-only steps before the first policy step.
    pub burnin: usize,
    pub lr_model: f64,
    pub lr_policy: f64,
    pub total_iterations: usize,
    pub seed: u64,
    pub actor_mode: ActorMode,
    pub episodes_per_iter: usize,
    pub clip_norm: f64,
    pub flow_l2: f64,
    pub flow_hidden: Vec<usize>,
    pub n_transforms: usize,
    pub sigma_floor: f64,
    pub policy_hidden: Vec<usize>,
    /// Iterations between metrics rows; row 0 and the last row are always written.
    pub eval_interval: usize,
    pub eval_rollouts: usize,
    /// Iterations between checkpoints in the run directory; 0 keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for GprilConfig {
    fn default() -> Self {
        GprilConfig {
            gamma: 0.9,
            batch_size: 256,
            n_b: 15_000,
            n_pi: 5_000,
            replay_capacity: 50_000,
            beta_pi: 1.0,
            beta_d: 1.0,
            burnin: 50_000,
            lr_model: 2e-5,
            lr_policy: 1e-4,
            total_iterations: 100,
            seed: 0,
            actor_mode: ActorMode::Sync,
            episodes_per_iter: 1,
            clip_norm: 100.0,
            flow_l2: 1e-2,
            flow_hidden: vec![500, 500],
            n_transforms: 2,
            sigma_floor: 0.1,
            policy_hidden: vec![300, 200],
            eval_interval: 10,
            eval_rollouts: 100,
            checkpoint_interval: 0,
        }
    }
}

impl GprilConfig {
    /// Smaller networks and schedule for single-core runs of the
    /// point-mass task.
    pub fn desk_scale() -> Self {
        GprilConfig {
            gamma: 0.7,
            batch_size: 64,
            n_b: 200,
            n_pi: 50,
            burnin: 2_000,
            lr_model: 1e-3,
            lr_policy: 1e-3,
            total_iterations: 300,
            flow_l2: 1e-4,
            flow_hidden: vec![64, 64],
            policy_hidden: vec![64, 64],
            episodes_per_iter: 10,
            sigma_floor: 0.03,
            eval_interval: 50,
            ..GprilConfig::default()
        }
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(0.0..1.0).contains(&self.gamma) {
            p.push(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.beta_pi >= 0.0 && self.beta_pi.is_finite()) {
            p.push(format!("beta_pi must be a nonnegative number, got {}", self.beta_pi));
        }
        if !(self.beta_d >= 0.0 && self.beta_d.is_finite()) {
            p.push(format!("beta_d must be a nonnegative number, got {}", self.beta_d));
        }
        if !(self.beta_pi + self.beta_d > 0.0) {
            p.push("beta_pi + beta_d must be positive".into());
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("n_b", self.n_b),
            ("n_pi", self.n_pi),
            ("replay_capacity", self.replay_capacity),
            ("episodes_per_iter", self.episodes_per_iter),
            ("n_transforms", self.n_transforms),
            ("eval_interval", self.eval_interval),
            ("eval_rollouts", self.eval_rollouts),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lr_model", self.lr_model), ("lr_policy", self.lr_policy), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.flow_l2 >= 0.0) {
            p.push(format!("flow_l2 must be nonnegative, got {}", self.flow_l2));
        }
        if !(self.sigma_floor >= 0.0) {
            p.push(format!("sigma_floor must be nonnegative, got {}", self.sigma_floor));
        }
        if self.flow_hidden.is_empty() || self.flow_hidden.contains(&0) {
            p.push("flow_hidden needs at least one positive layer size".into());
        }
        if self.policy_hidden.contains(&0) {
            p.push("policy_hidden sizes must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Extra checks that depend on the demonstrations.
    pub fn problems_with_demos(&self, demos: &DemoSet) -> Vec<String> {
        let mut p = Vec::new();
        if demos.is_empty() {
            p.push("demonstration set is empty".into());
        }
        if !demos.has_actions() && self.beta_pi > 0.0 {
            p.push(format!(
                "demonstrations carry no actions, so beta_pi must be 0 (got {}); use beta_pi = 0 with beta_d > 0",
                self.beta_pi
            ));
        }
        p
    }
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// Independent generators derived from one seed. Keeping them apart lets
/// the behavioral-cloning path reproduce the policy stream exactly.
#[derive(Debug, Clone)]
pub struct Streams {
    pub model: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub generate: ChaCha8Rng,
    pub actor: ChaCha8Rng,
}

pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams { model: stream(seed, 1), policy: stream(seed, 2), generate: stream(seed, 3), actor: stream(seed, 4) }
    }
}

/// Seeds for the training and evaluation environments.
fn actor_env_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(11)
}

fn eval_env_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(23)
}

// ---------------------------------------------------------------------------
// Predecessor model
// ---------------------------------------------------------------------------

/// Draws `(s, a)` pairs that lead to given target states.
pub trait PredecessorModel {
    /// One predecessor pair per row of `targets`. Returns the states and
    /// actions stacked row-wise.
    fn sample_predecessors<R: Rng + ?Sized>(&self, targets: &Array2<f64>, rng: &mut R) -> Result<(Array2<f64>, Array2<f64>)>;
}

/// Gradient of `log π(a|s)` with respect to the policy parameters.
pub trait ScoreFunction {
    fn num_params(&self) -> usize;
    fn score(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>>;
}

impl ScoreFunction for GaussianPolicy {
    fn num_params(&self) -> usize {
        GaussianPolicy::num_params(self)
    }

    fn score(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let sb = stack_rows([s], self.state_dim());
        let ab = stack_rows([a], self.action_dim);
        Ok(self.mean_log_prob_grad(&sb, &ab)?.1 .0)
    }
}

/// States and actions are single-element index vectors.
impl ScoreFunction for SoftmaxPolicy {
    fn num_params(&self) -> usize {
        SoftmaxPolicy::num_params(self)
    }

    fn score(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        check_dim(1, s.len())?;
        check_dim(1, a.len())?;
        let (s, a) = (s[0] as usize, a[0] as usize);
        if s >= self.n_states() || a >= self.n_actions() {
            return Err(Error::InvalidArgument(format!("pair ({s}, {a}) out of range")));
        }
        Ok(SoftmaxPolicy::score(self, s, a))
    }
}

/// `B^s(s | s̄)` over normalized states and `B^a(a | s, s̄)` over actions,
/// with the normalizer that maps raw buffer states into the flows' space.
#[derive(Debug, Clone)]
pub struct FlowPair {
    pub state: MafStack,
    pub action: MafStack,
    pub normalizer: Normalizer,
}

impl FlowPair {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: &GprilConfig, normalizer: Normalizer, rng: &mut R) -> Self {
        let spec = |dim, cond_dim| FlowSpec {
            dim,
            cond_dim,
            hidden: cfg.flow_hidden.clone(),
            n_transforms: cfg.n_transforms,
            sigma_floor: cfg.sigma_floor,
        };
        let state = MafStack::new(spec(state_dim, state_dim), rng);
        let action = MafStack::new(spec(action_dim, 2 * state_dim), rng);
        FlowPair { state, action, normalizer }
    }

    pub fn state_dim(&self) -> usize {
        self.state.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action.dim()
    }
}

impl PredecessorModel for FlowPair {
    /// Targets and returned states are normalized.
    fn sample_predecessors<R: Rng + ?Sized>(&self, targets: &Array2<f64>, rng: &mut R) -> Result<(Array2<f64>, Array2<f64>)> {
        check_dim(self.state_dim(), targets.ncols())?;
        let s = self.state.sample_batch(targets, rng);
        let cond = concatenate![Axis(1), s, *targets];
        let a = self.action.sample_batch(&cond, rng);
        Ok((s, a))
    }
}

/// Mean of `∇ log π(a|s)` over generated predecessors of `demo_states`,
/// drawing `batch` targets uniformly from the rows of `demo_states`.
///
/// Up to the factor `1/(1−γ)` and the discount bias, this is the gradient
/// of the log stationary state distribution averaged over the targets.
pub fn estimate_state_dist_grad<M, P, R>(model: &M, policy: &P, demo_states: &Array2<f64>, batch: usize, rng: &mut R) -> Result<GradVector>
where
    M: PredecessorModel,
    P: ScoreFunction,
    R: Rng + ?Sized,
{
    if demo_states.nrows() == 0 || batch == 0 {
        return Err(Error::InvalidArgument("need demo states and a positive batch".into()));
    }
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..demo_states.nrows())).collect();
    let targets = demo_states.select(Axis(0), &idx);
    let (s, a) = model.sample_predecessors(&targets, rng)?;
    mean_score(policy, &s, &a)
}

/// Row-wise mean of `∇ log π(a|s)`.
pub fn mean_score<P: ScoreFunction>(policy: &P, s: &Array2<f64>, a: &Array2<f64>) -> Result<GradVector> {
    check_dim(s.nrows(), a.nrows())?;
    let mut acc = vec![0.0; policy.num_params()];
    for (sr, ar) in s.rows().into_iter().zip(a.rows()) {
        let g = policy.score(&sr.to_vec(), &ar.to_vec())?;
        acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
    }
    let n = s.nrows() as f64;
    Ok(GradVector(acc.into_iter().map(|x| x / n).collect()))
}

// ---------------------------------------------------------------------------
// Update steps
// ---------------------------------------------------------------------------

/// Adam state for both flows.
#[derive(Debug, Clone)]
pub struct FlowOptimizers {
    pub state: Adam,
    pub action: Adam,
}

impl FlowOptimizers {
    pub fn new(flows: &FlowPair, lr: f64) -> Self {
        FlowOptimizers { state: Adam::new(flows.state.num_params(), lr), action: Adam::new(flows.action.num_params(), lr) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelStepStats {
    /// Mean log-density of the batch before the step, without the L2 term.
    pub loglik_s: f64,
    pub loglik_a: f64,
    pub grad_norm_s: f64,
    pub grad_norm_a: f64,
    pub clipped_norm_s: f64,
    pub clipped_norm_a: f64,
}

fn l2_term(params: &[f64], l2: f64) -> f64 {
    0.5 * l2 * params.iter().map(|p| p * p).sum::<f64>()
}

/// One ascent step on the predecessor log-likelihood of a fresh batch of
/// geometric-gap triples.
pub fn model_update_step<R: Rng + ?Sized>(
    flows: &mut FlowPair,
    opt: &mut FlowOptimizers,
    buffer: &ReplayBuffer,
    cfg: &GprilConfig,
    rng: &mut R,
) -> Result<ModelStepStats> {
    let triples = buffer.sample_triples(cfg.gamma, cfg.batch_size, rng)?;
    let norm = &flows.normalizer;
    let d = flows.state_dim();
    let s_rows: Vec<Vec<f64>> = triples.iter().map(|t| norm.apply(&t.s)).collect();
    let f_rows: Vec<Vec<f64>> = triples.iter().map(|t| norm.apply(&t.s_future)).collect();
    let s = stack_rows(s_rows.iter().map(Vec::as_slice), d);
    let sf = stack_rows(f_rows.iter().map(Vec::as_slice), d);
    let a = stack_rows(triples.iter().map(|t| &t.a[..]), flows.action_dim());
    let cond_a = concatenate![Axis(1), s, sf];

    let (loss_s, g_s) = flows.state.nll_grad(&s, &sf, None, cfg.flow_l2)?;
    let (loss_a, g_a) = flows.action.nll_grad(&a, &cond_a, None, cfg.flow_l2)?;
    let loglik_s = -(loss_s - l2_term(&flows.state.params, cfg.flow_l2));
    let loglik_a = -(loss_a - l2_term(&flows.action.params, cfg.flow_l2));
    let (g_s, grad_norm_s) = clip_by_global_norm(g_s, cfg.clip_norm);
    let (g_a, grad_norm_a) = clip_by_global_norm(g_a, cfg.clip_norm);
    let stats = ModelStepStats {
        loglik_s,
        loglik_a,
        grad_norm_s,
        grad_norm_a,
        clipped_norm_s: g_s.norm(),
        clipped_norm_a: g_a.norm(),
    };
    opt.state.step(&mut flows.state.params, &g_s);
    opt.action.step(&mut flows.action.params, &g_a);
    Ok(stats)
}

/// Demonstrations in the policy's input space.
#[derive(Debug, Clone)]
pub struct PreparedDemos {
    /// Normalized states, one row per sample.
    pub states: Array2<f64>,
    pub actions: Option<Array2<f64>>,
}

impl PreparedDemos {
    pub fn new(demos: &DemoSet) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::InvalidArgument("demonstration set is empty".into()));
        }
        let rows: Vec<Vec<f64>> = demos.samples.iter().map(|s| demos.normalize(&s.state)).collect::<Result<_>>()?;
        let states = stack_rows(rows.iter().map(Vec::as_slice), demos.state_dim);
        let actions = if demos.has_actions() {
            let acts: Vec<&[f64]> = demos
                .samples
                .iter()
                .map(|s| s.action.as_deref().map(|a| &a[..]))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::InvalidArgument("state-action demos with a missing action".into()))?;
            Some(stack_rows(acts, demos.action_dim))
        } else {
            None
        };
        Ok(PreparedDemos { states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean `log π(ā|s̄)` over all demonstrated pairs, when actions exist.
    pub fn mean_loglik(&self, policy: &GaussianPolicy) -> Option<f64> {
        let a = self.actions.as_ref()?;
        let mut total = 0.0;
        for (s, a) in self.states.rows().into_iter().zip(a.rows()) {
            total += policy.log_prob(s.as_slice()?, a.as_slice()?).ok()?;
        }
        Some(total / self.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStepStats {
    /// Weighted objective before the step.
    pub objective: f64,
    /// Generated pairs consumed by this step.
    pub generated: usize,
    pub grad_norm: f64,
}

/// One ascent step on
/// `β_π · mean log π(ā|s̄) + β_d · mean log π(a|s)` with `B` demonstrated
/// pairs drawn with replacement and one generated predecessor pair per
/// drawn demo state.
///
/// Demo indices come from `rng_policy` and flow samples from `rng_gen`, so
/// with `β_d = 0` the parameter trajectory depends on `rng_policy` alone.
pub fn policy_update_step<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    policy: &mut GaussianPolicy,
    opt: &mut Adam,
    flows: Option<&FlowPair>,
    demos: &PreparedDemos,
    cfg: &GprilConfig,
    rng_policy: &mut R1,
    rng_gen: &mut R2,
) -> Result<PolicyStepStats> {
    if demos.is_empty() {
        return Err(Error::InvalidArgument("demonstration set is empty".into()));
    }
    if cfg.beta_pi > 0.0 && demos.actions.is_none() {
        return Err(Error::InvalidArgument("demonstrations carry no actions; beta_pi must be 0".into()));
    }
    let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng_policy.random_range(0..demos.len())).collect();
    let s_bar = demos.states.select(Axis(0), &idx);
    let demo_pair = match (&demos.actions, cfg.beta_pi > 0.0) {
        (Some(a), true) => Some((s_bar.clone(), a.select(Axis(0), &idx))),
        _ => None,
    };
    let generated = if cfg.beta_d > 0.0 {
        let flows = flows.ok_or_else(|| Error::InvalidArgument("beta_d > 0 needs a predecessor model".into()))?;
        Some(flows.sample_predecessors(&s_bar, rng_gen)?)
    } else {
        None
    };
    let n_generated = generated.as_ref().map_or(0, |(s, _)| s.nrows());
    let net = policy.clone();
    let (loss, g) = grad(policy.params(), |t, p| {
        let mut terms = Vec::new();
        for (pair, beta) in [(demo_pair, cfg.beta_pi), (generated, cfg.beta_d)] {
            if let Some((s, a)) = pair {
                let sv = t.leaf(s);
                let av = t.leaf(a);
                let lp = net.log_prob_tape(t, p, sv, av);
                let m = t.mean(lp);
                terms.push(t.scale(m, -beta));
            }
        }
        terms.into_iter().reduce(|x, y| t.add(x, y)).expect("at least one term")
    })?;
    let (g, grad_norm) = clip_by_global_norm(g, cfg.clip_norm);
    opt.step(policy.params_mut(), &g);
    Ok(PolicyStepStats { objective: -loss, generated: n_generated, grad_norm })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rollouts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_episode_len: f64,
    /// Median number of transitions of successful episodes; `None` without any.
    pub median_success_len: Option<f64>,
}

/// Roll out the deterministic policy `n` times on a freshly seeded
/// environment.
pub fn evaluate(policy: &GaussianPolicy, normalizer: &Normalizer, env_cfg: &PointMassConfig, n: usize, seed: u64) -> Result<EvalReport> {
    let mut env = PointMass::new(env_cfg.clone(), seed);
    let mut lens = Vec::with_capacity(n);
    let mut success_lens = Vec::new();
    for _ in 0..n {
        let traj = run_episode(&mut env, policy, normalizer, None::<&mut ChaCha8Rng>)?;
        lens.push(traj.num_transitions() as f64);
        if traj.success() {
            success_lens.push(traj.num_transitions() as f64);
        }
    }
    success_lens.sort_by(f64::total_cmp);
    let median_success_len = match success_lens.len() {
        0 => None,
        k if k % 2 == 1 => Some(success_lens[k / 2]),
        k => Some(0.5 * (success_lens[k / 2 - 1] + success_lens[k / 2])),
    };
    Ok(EvalReport {
        rollouts: n,
        successes: success_lens.len(),
        success_rate: if n == 0 { 0.0 } else { success_lens.len() as f64 / n as f64 },
        mean_episode_len: if n == 0 { 0.0 } else { lens.iter().sum::<f64>() / n as f64 },
        median_success_len,
    })
}

/// One episode; stochastic when `rng` is given, the policy mean otherwise.
pub fn run_episode<R: Rng + ?Sized>(
    env: &mut PointMass,
    policy: &GaussianPolicy,
    normalizer: &Normalizer,
    mut rng: Option<&mut R>,
) -> Result<Trajectory> {
    let mut failure = None;
    let traj = rollout(env, |s| {
        let x = normalizer.apply(s);
        let a = match rng.as_deref_mut() {
            Some(r) => policy.act(&x, r, false),
            None => policy.act(&x, &mut NoRng, true),
        };
        a.unwrap_or_else(|e| {
            failure.get_or_insert(e);
            Action(vec![0.0; policy.action_dim])
        })
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(traj),
    }
}

/// Placeholder generator for deterministic actions, which draw nothing.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic actions draw no randomness")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic actions draw no randomness")
    }

    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("deterministic actions draw no randomness")
    }
}

// ---------------------------------------------------------------------------
// Metrics and checkpoints
// ---------------------------------------------------------------------------

pub const METRICS_HEADER: &str = "iter,env_steps,demo_loglik,model_loglik_s,model_loglik_a,success_rate,mean_episode_len,wallclock_s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub env_steps: usize,
    pub demo_loglik: f64,
    pub model_loglik_s: f64,
    pub model_loglik_a: f64,
    pub success_rate: f64,
    pub mean_episode_len: f64,
    pub wallclock_s: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.env_steps,
            self.demo_loglik,
            self.model_loglik_s,
            self.model_loglik_a,
            self.success_rate,
            self.mean_episode_len,
            self.wallclock_s
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::InvalidArgument(format!("metrics row needs 8 fields: '{line}'")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::InvalidArgument(format!("bad number '{}' in metrics row", f[i])))
        };
        Ok(MetricsRow {
            iter: num(0)? as usize,
            env_steps: num(1)? as usize,
            demo_loglik: num(2)?,
            model_loglik_s: num(3)?,
            model_loglik_a: num(4)?,
            success_rate: num(5)?,
            mean_episode_len: num(6)?,
            wallclock_s: num(7)?,
        })
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(MetricsRow::parse).collect()
}

/// Save a policy with the normalizer it expects.
pub fn save_policy(path: impl AsRef<Path>, policy: &GaussianPolicy, normalizer: &Normalizer) -> Result<()> {
    let header = json!({
        "kind": "gaussian_policy",
        "layer_sizes": policy.net.layer_sizes(),
        "action_dim": policy.action_dim,
        "sigma_bounds": [policy.sigma_min, policy.sigma_max],
        "normalizer": normalizer,
    });
    write_checkpoint(path, &header, policy.params())
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<(GaussianPolicy, Normalizer)> {
    let ck = read_checkpoint(path)?;
    #[derive(Deserialize)]
    struct Header {
        kind: String,
        layer_sizes: Vec<usize>,
        action_dim: usize,
        sigma_bounds: [f64; 2],
        normalizer: Normalizer,
    }
    let h: Header = serde_json::from_value(ck.header)?;
    if h.kind != "gaussian_policy" {
        return Err(Error::Checkpoint(format!("expected a policy checkpoint, found '{}'", h.kind)));
    }
    if h.layer_sizes.len() < 2 || h.layer_sizes.contains(&0) || *h.layer_sizes.last().unwrap() != 2 * h.action_dim {
        return Err(Error::Checkpoint("inconsistent policy architecture".into()));
    }
    let mut net = crate::nn::Mlp::zeros(&h.layer_sizes);
    check_dim(net.num_params(), ck.params.len()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    net.params = ck.params;
    check_dim(h.layer_sizes[0], h.normalizer.mean.len()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((GaussianPolicy { net, action_dim: h.action_dim, sigma_min: h.sigma_bounds[0], sigma_max: h.sigma_bounds[1] }, h.normalizer))
}

pub fn save_flow(path: impl AsRef<Path>, flow: &MafStack, role: &str) -> Result<()> {
    write_checkpoint(path, &json!({ "kind": "maf", "role": role, "spec": flow.spec() }), &flow.params)
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<MafStack> {
    let ck = read_checkpoint(path)?;
    if ck.header.get("kind").and_then(|k| k.as_str()) != Some("maf") {
        return Err(Error::Checkpoint("expected a flow checkpoint".into()));
    }
    let spec: FlowSpec = serde_json::from_value(ck.header["spec"].clone())?;
    let mut flow = MafStack::zeros(spec);
    check_dim(flow.num_params(), ck.params.len()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    flow.params = ck.params;
    Ok(flow)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: GaussianPolicy,
    /// `None` when `beta_d = 0`.
    pub flows: Option<FlowPair>,
    pub normalizer: Normalizer,
    pub metrics: Vec<MetricsRow>,
    pub env_steps: usize,
}

/// Where and how a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

/// Initial policy, drawn from the policy stream.
pub fn init_policy(cfg: &GprilConfig, state_dim: usize, action_dim: usize, rng: &mut ChaCha8Rng) -> GaussianPolicy {
    GaussianPolicy::new(state_dim, action_dim, &cfg.policy_hidden, rng)
}

/// Behavioral cloning alone: `total_iterations · n_pi` steps on demonstrated
/// pairs, sharing initialization and batches with [`train`] at `beta_d = 0`.
pub fn behavioral_cloning(cfg: &GprilConfig, demos: &DemoSet) -> Result<GaussianPolicy> {
    let cfg = GprilConfig { beta_d: 0.0, ..cfg.clone() };
    cfg.validate()?;
    let prepared = PreparedDemos::new(demos)?;
    let mut streams = Streams::new(cfg.seed);
    let mut policy = init_policy(&cfg, demos.state_dim, demos.action_dim, &mut streams.policy);
    let mut opt = Adam::new(policy.num_params(), cfg.lr_policy);
    for iter in 1..=cfg.total_iterations {
        for _ in 0..cfg.n_pi {
            policy_update_step(&mut policy, &mut opt, None, &prepared, &cfg, &mut streams.policy, &mut streams.generate)
                .map_err(|e| divergence(iter, e))?;
        }
    }
    Ok(policy)
}

fn divergence(iter: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence { iter, what },
        other => other,
    }
}

fn check_finite(iter: usize, what: &str, params: &[f64]) -> Result<()> {
    if params.iter().all(|p| p.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { iter, what: format!("{what} parameters became non-finite") })
    }
}

/// Source of actor experience for the learner.
enum Actor {
    Sync {
        env: PointMass,
        rng: ChaCha8Rng,
    },
    Async {
        allowed: Arc<AtomicUsize>,
        produced: Arc<AtomicUsize>,
        steps: Arc<AtomicUsize>,
        stop: Arc<AtomicBool>,
        snapshot: Arc<RwLock<GaussianPolicy>>,
        handle: Option<std::thread::JoinHandle<Result<()>>>,
    },
}

impl Actor {
    fn start(cfg: &GprilConfig, env_cfg: &PointMassConfig, policy: &GaussianPolicy, normalizer: &Normalizer, buffer: &SharedReplay, rng: ChaCha8Rng) -> Self {
        let env = PointMass::new(env_cfg.clone(), actor_env_seed(cfg.seed));
        match cfg.actor_mode {
            ActorMode::Sync => Actor::Sync { env, rng },
            ActorMode::Async => {
                let allowed = Arc::new(AtomicUsize::new(0));
                let produced = Arc::new(AtomicUsize::new(0));
                let steps = Arc::new(AtomicUsize::new(0));
                let stop = Arc::new(AtomicBool::new(false));
                let snapshot = Arc::new(RwLock::new(policy.clone()));
                let handle = {
                    let (allowed, produced, steps, stop, snapshot) =
                        (allowed.clone(), produced.clone(), steps.clone(), stop.clone(), snapshot.clone());
                    let buffer = buffer.clone();
                    let normalizer = normalizer.clone();
                    let mut env = env;
                    let mut rng = rng;
                    std::thread::spawn(move || -> Result<()> {
                        while !stop.load(Ordering::Acquire) {
                            if produced.load(Ordering::Acquire) >= allowed.load(Ordering::Acquire) {
                                std::thread::sleep(Duration::from_micros(200));
                                continue;
                            }
                            let pol = snapshot.read().expect("policy snapshot lock").clone();
                            let traj = run_episode(&mut env, &pol, &normalizer, Some(&mut rng))?;
                            steps.fetch_add(traj.num_transitions(), Ordering::AcqRel);
                            buffer.write().expect("replay lock").append_episode(traj);
                            produced.fetch_add(1, Ordering::AcqRel);
                        }
                        Ok(())
                    })
                };
                Actor::Async { allowed, produced, steps, stop, snapshot, handle: Some(handle) }
            }
        }
    }

    /// Sync: run `n` episodes now. Async: let the actor run `n` more.
    fn collect(&mut self, n: usize, policy: &GaussianPolicy, normalizer: &Normalizer, buffer: &SharedReplay) -> Result<usize> {
        match self {
            Actor::Sync { env, rng } => {
                let mut steps = 0;
                for _ in 0..n {
                    let traj = run_episode(env, policy, normalizer, Some(rng))?;
                    steps += traj.num_transitions();
                    buffer.write().expect("replay lock").append_episode(traj);
                }
                Ok(steps)
            }
            Actor::Async { allowed, .. } => {
                allowed.fetch_add(n, Ordering::AcqRel);
                Ok(0)
            }
        }
    }

    /// Block until the buffer holds at least one episode.
    fn wait_for_data(&mut self, buffer: &SharedReplay) -> Result<()> {
        loop {
            if !buffer.read().expect("replay lock").is_empty() {
                return Ok(());
            }
            match self {
                Actor::Sync { .. } => return Err(Error::EmptyBuffer),
                Actor::Async { handle, .. } => {
                    if handle.as_ref().is_some_and(|h| h.is_finished()) {
                        return self.finish().and(Err(Error::EmptyBuffer));
                    }
                    std::thread::sleep(Duration::from_micros(200));
                }
            }
        }
    }

    fn publish(&self, policy: &GaussianPolicy) {
        if let Actor::Async { snapshot, .. } = self {
            *snapshot.write().expect("policy snapshot lock") = policy.clone();
        }
    }

    fn async_steps(&self) -> usize {
        match self {
            Actor::Async { steps, .. } => steps.load(Ordering::Acquire),
            Actor::Sync { .. } => 0,
        }
    }

    fn finish(&mut self) -> Result<()> {
        if let Actor::Async { stop, handle, produced, .. } = self {
            stop.store(true, Ordering::Release);
            let _ = produced.load(Ordering::Acquire);
            if let Some(h) = handle.take() {
                return h.join().map_err(|_| Error::InvalidArgument("actor thread panicked".into()))?;
            }
        }
        Ok(())
    }
}

impl Drop for Actor {
    fn drop(&mut self) {
        let _ = self.finish();
    }
}

/// Train on the point-mass task. Writes `metrics.csv`, `timings.csv` and
/// checkpoints into `out.dir` when given.
///
/// In sync mode the `wallclock_s` column is written as 0 so that metrics
/// files of equal runs match byte for byte; real timings go to
/// `timings.csv`.
pub fn train(cfg: &GprilConfig, env_cfg: &PointMassConfig, demos: &DemoSet, out: &RunOutput) -> Result<TrainOutput> {
    let mut problems = cfg.problems();
    problems.extend(cfg.problems_with_demos(demos));
    if demos.state_dim != PointMass::STATE_DIM || demos.action_dim != PointMass::ACTION_DIM {
        problems.push(format!(
            "demos have state/action dims {}/{}, the point-mass task needs {}/{}",
            demos.state_dim,
            demos.action_dim,
            PointMass::STATE_DIM,
            PointMass::ACTION_DIM
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let start = Instant::now();
    let normalizer = demos.normalizer();
    let prepared = PreparedDemos::new(demos)?;
    let mut streams = Streams::new(cfg.seed);
    let mut policy = init_policy(cfg, demos.state_dim, demos.action_dim, &mut streams.policy);
    let mut policy_opt = Adam::new(policy.num_params(), cfg.lr_policy);
    let use_model = cfg.beta_d > 0.0;
    let mut flows = use_model.then(|| FlowPair::new(demos.state_dim, demos.action_dim, cfg, normalizer.clone(), &mut streams.model));
    let mut flow_opt = flows.as_ref().map(|f| FlowOptimizers::new(f, cfg.lr_model));
    let buffer = ReplayBuffer::shared(cfg.replay_capacity);

    let mut writer = match &out.dir {
        Some(dir) => Some(RunWriter::create(dir)?),
        None => None,
    };
    let mut metrics = Vec::new();
    let mut env_steps = 0;
    let mut last_model: Option<(f64, f64)> = None;
    let sync = cfg.actor_mode == ActorMode::Sync;

    let row = |iter: usize, env_steps: usize, policy: &GaussianPolicy, last_model: Option<(f64, f64)>, writer: &mut Option<RunWriter>| -> Result<MetricsRow> {
        let eval = evaluate(policy, &normalizer, env_cfg, cfg.eval_rollouts, eval_env_seed(cfg.seed))?;
        let elapsed = start.elapsed().as_secs_f64();
        let r = MetricsRow {
            iter,
            env_steps,
            demo_loglik: prepared.mean_loglik(policy).unwrap_or(f64::NAN),
            model_loglik_s: last_model.map_or(f64::NAN, |m| m.0),
            model_loglik_a: last_model.map_or(f64::NAN, |m| m.1),
            success_rate: eval.success_rate,
            mean_episode_len: eval.mean_episode_len,
            wallclock_s: if sync { 0.0 } else { elapsed },
        };
        if let Some(w) = writer {
            w.row(&r, elapsed)?;
        }
        Ok(r)
    };

    metrics.push(row(0, 0, &policy, None, &mut writer)?);

    if cfg.total_iterations > 0 {
        let mut actor = use_model.then(|| Actor::start(cfg, env_cfg, &policy, &normalizer, &buffer, streams.actor.clone()));

        // Burnin: model-only steps, with rollouts of the initial policy
        // interleaved at the regular cadence.
        if let (Some(actor), Some(flows), Some(opt)) = (actor.as_mut(), flows.as_mut(), flow_opt.as_mut()) {
            let mut done = 0;
            while done < cfg.burnin {
                env_steps += actor.collect(cfg.episodes_per_iter, &policy, &normalizer, &buffer)?;
                actor.wait_for_data(&buffer)?;
                let chunk = cfg.n_b.min(cfg.burnin - done);
                for _ in 0..chunk {
                    let buf = buffer.read().expect("replay lock");
                    model_update_step(flows, opt, &buf, cfg, &mut streams.model).map_err(|e| divergence(0, e))?;
                }
                done += chunk;
                check_finite(0, "flow", &flows.state.params)?;
                check_finite(0, "flow", &flows.action.params)?;
            }
        }

        for iter in 1..=cfg.total_iterations {
            if let (Some(actor), Some(flows), Some(opt)) = (actor.as_mut(), flows.as_mut(), flow_opt.as_mut()) {
                env_steps += actor.collect(cfg.episodes_per_iter, &policy, &normalizer, &buffer)?;
                actor.wait_for_data(&buffer)?;
                let (mut ls, mut la) = (0.0, 0.0);
                for _ in 0..cfg.n_b {
                    let buf = buffer.read().expect("replay lock");
                    let st = model_update_step(flows, opt, &buf, cfg, &mut streams.model).map_err(|e| divergence(iter, e))?;
                    ls += st.loglik_s;
                    la += st.loglik_a;
                }
                last_model = Some((ls / cfg.n_b as f64, la / cfg.n_b as f64));
                check_finite(iter, "flow", &flows.state.params)?;
                check_finite(iter, "flow", &flows.action.params)?;
            }
            for _ in 0..cfg.n_pi {
                policy_update_step(&mut policy, &mut policy_opt, flows.as_ref(), &prepared, cfg, &mut streams.policy, &mut streams.generate)
                    .map_err(|e| divergence(iter, e))?;
            }
            check_finite(iter, "policy", policy.params())?;
            if let Some(actor) = actor.as_ref() {
                actor.publish(&policy);
            }
            let steps_now = env_steps + actor.as_ref().map_or(0, Actor::async_steps);
            if iter % cfg.eval_interval == 0 || iter == cfg.total_iterations {
                metrics.push(row(iter, steps_now, &policy, last_model, &mut writer)?);
            }
            if let Some(w) = writer.as_mut() {
                if cfg.checkpoint_interval > 0 && iter % cfg.checkpoint_interval == 0 {
                    w.checkpoint(&format!("iter{iter:06}"), &policy, &normalizer, flows.as_ref())?;
                }
            }
        }
        if let Some(actor) = actor.as_mut() {
            actor.finish()?;
            env_steps += actor.async_steps();
        }
    }
    if let Some(w) = writer.as_mut() {
        w.checkpoint("final", &policy, &normalizer, flows.as_ref())?;
        w.flush()?;
    }
    Ok(TrainOutput { policy, flows, normalizer, metrics, env_steps })
}

struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
}

impl RunWriter {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        let mut timings = BufWriter::new(File::create(dir.join("timings.csv"))?);
        writeln!(timings, "iter,wallclock_s")?;
        Ok(RunWriter { dir: dir.to_path_buf(), metrics, timings })
    }

    fn row(&mut self, r: &MetricsRow, elapsed: f64) -> Result<()> {
        writeln!(self.metrics, "{}", r.csv())?;
        writeln!(self.timings, "{},{elapsed}", r.iter)?;
        self.metrics.flush()?;
        self.timings.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, tag: &str, policy: &GaussianPolicy, normalizer: &Normalizer, flows: Option<&FlowPair>) -> Result<()> {
        let ck = self.dir.join("checkpoints");
        save_policy(ck.join(format!("policy_{tag}.ckpt")), policy, normalizer)?;
        if let Some(f) = flows {
            save_flow(ck.join(format!("flow_s_{tag}.ckpt")), &f.state, "state")?;
            save_flow(ck.join(format!("flow_a_{tag}.ckpt")), &f.action, "action")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timings.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{scripted_expert, sparsify, Sparsify};
    use crate::env::{EpisodeEnd, State};
    use crate::oracle::{fixture_4state, ExactPredecessor, TabularOracle};

    fn tiny_cfg() -> GprilConfig {
        GprilConfig {
            batch_size: 16,
            n_b: 5,
            n_pi: 5,
            burnin: 10,
            lr_model: 1e-3,
            lr_policy: 1e-3,
            total_iterations: 3,
            flow_hidden: vec![8, 8],
            policy_hidden: vec![8],
            eval_interval: 1,
            eval_rollouts: 3,
            ..GprilConfig::default()
        }
    }

    fn demo_set(n: usize, regime: Sparsify) -> DemoSet {
        sparsify(&scripted_expert(&PointMassConfig::default(), n, 5).unwrap(), regime).unwrap()
    }

    #[test]
    fn defaults_validate() {
        GprilConfig::default().validate().unwrap();
        GprilConfig::desk_scale().validate().unwrap();
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = GprilConfig { gamma: 1.0, batch_size: 0, beta_pi: 0.0, beta_d: 0.0, ..GprilConfig::default() };
        let p = cfg.problems();
        assert!(p.len() >= 3, "{p:?}");
        assert!(matches!(cfg.validate(), Err(Error::Config(v)) if v.len() == p.len()));
    }

    #[test]
    fn states_only_demos_reject_beta_pi() {
        let demos = demo_set(2, Sparsify::FinalOnly);
        assert!(!GprilConfig::default().problems_with_demos(&demos).is_empty());
        let cfg = GprilConfig { beta_pi: 0.0, ..GprilConfig::default() };
        assert!(cfg.problems_with_demos(&demos).is_empty());
        assert!(matches!(train(&tiny_cfg(), &PointMassConfig::default(), &demos, &RunOutput::default()), Err(Error::Config(_))));
    }

    #[test]
    fn zero_iterations_keep_initial_policy() {
        let demos = demo_set(2, Sparsify::Full);
        let cfg = GprilConfig { total_iterations: 0, ..tiny_cfg() };
        let out = train(&cfg, &PointMassConfig::default(), &demos, &RunOutput::default()).unwrap();
        let init = init_policy(&cfg, 5, 2, &mut Streams::new(cfg.seed).policy);
        assert_eq!(out.policy, init);
        assert_eq!(out.metrics.len(), 1);
    }

    fn synthetic_buffer() -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(10_000);
        for e in 0..20 {
            let n = 30;
            let states = (0..=n).map(|t| State(vec![t as f64 * 0.1, (e % 3) as f64, 0.0, 0.0, 0.1])).collect();
            let actions = (0..n).map(|_| Action(vec![0.5, -0.2])).collect();
            buf.append_episode(Trajectory { states, actions, end: EpisodeEnd::Success });
        }
        buf
    }

    fn flows_for(cfg: &GprilConfig, seed: u64) -> FlowPair {
        let norm = Normalizer { mean: vec![1.5, 1.0, 0.0, 0.0, 0.1], std: vec![1.0, 1.0, 1.0, 1.0, 1.0] };
        FlowPair::new(5, 2, cfg, norm, &mut stream(seed, 1))
    }

    #[test]
    fn model_steps_are_deterministic() {
        let cfg = tiny_cfg();
        let buf = synthetic_buffer();
        let run = || {
            let mut f = flows_for(&cfg, 3);
            let mut opt = FlowOptimizers::new(&f, cfg.lr_model);
            let mut rng = stream(9, 0);
            for _ in 0..5 {
                model_update_step(&mut f, &mut opt, &buf, &cfg, &mut rng).unwrap();
            }
            (f.state.params, f.action.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn model_fit_improves_on_synthetic_chain() {
        let cfg = GprilConfig { batch_size: 64, lr_model: 3e-3, flow_l2: 0.0, ..tiny_cfg() };
        let buf = synthetic_buffer();
        let mut f = flows_for(&cfg, 4);
        let mut opt = FlowOptimizers::new(&f, cfg.lr_model);
        let held_out = buf.sample_triples(cfg.gamma, 512, &mut stream(77, 0)).unwrap();
        let held_ll = |f: &FlowPair| {
            let s: Vec<Vec<f64>> = held_out.iter().map(|t| f.normalizer.apply(&t.s)).collect();
            let sf: Vec<Vec<f64>> = held_out.iter().map(|t| f.normalizer.apply(&t.s_future)).collect();
            let s = stack_rows(s.iter().map(Vec::as_slice), 5);
            let sf = stack_rows(sf.iter().map(Vec::as_slice), 5);
            f.state.log_density_batch(&s, &sf).unwrap().mean().unwrap()
        };
        let mut rng = stream(5, 0);
        let mut prev = held_ll(&f);
        let first = prev;
        let mut violations = 0;
        for _ in 0..100 {
            model_update_step(&mut f, &mut opt, &buf, &cfg, &mut rng).unwrap();
            let ll = held_ll(&f);
            if ll < prev {
                violations += 1;
            }
            prev = ll;
        }
        assert!(prev > first + 1.0, "{first} -> {prev}");
        assert!(violations <= 5, "{violations} decreases");
    }

    #[test]
    fn clipped_norm_is_bounded() {
        let cfg = GprilConfig { clip_norm: 1e-3, ..tiny_cfg() };
        let buf = synthetic_buffer();
        let mut f = flows_for(&cfg, 6);
        let mut opt = FlowOptimizers::new(&f, cfg.lr_model);
        let st = model_update_step(&mut f, &mut opt, &buf, &cfg, &mut stream(1, 0)).unwrap();
        assert!(st.grad_norm_s > cfg.clip_norm);
        assert!(st.clipped_norm_s <= cfg.clip_norm * (1.0 + 1e-12));
        assert!(st.clipped_norm_a <= cfg.clip_norm * (1.0 + 1e-12));
        let default_clip = GprilConfig::default().clip_norm;
        assert_eq!(default_clip, 100.0);
    }

    #[test]
    fn policy_step_consumes_one_generated_pair_per_demo_pair() {
        let cfg = tiny_cfg();
        let demos = PreparedDemos::new(&demo_set(2, Sparsify::Full)).unwrap();
        let flows = flows_for(&cfg, 2);
        let mut policy = init_policy(&cfg, 5, 2, &mut stream(0, 2));
        let mut opt = Adam::new(policy.num_params(), cfg.lr_policy);
        let st = policy_update_step(&mut policy, &mut opt, Some(&flows), &demos, &cfg, &mut stream(0, 5), &mut stream(0, 6)).unwrap();
        assert_eq!(st.generated, cfg.batch_size);
        let bc = GprilConfig { beta_d: 0.0, ..cfg.clone() };
        let st = policy_update_step(&mut policy, &mut opt, Some(&flows), &demos, &bc, &mut stream(0, 5), &mut stream(0, 6)).unwrap();
        assert_eq!(st.generated, 0);
    }

    #[test]
    fn beta_d_zero_ignores_flows() {
        let cfg = GprilConfig { beta_d: 0.0, ..tiny_cfg() };
        let demos = PreparedDemos::new(&demo_set(2, Sparsify::Full)).unwrap();
        let flows = flows_for(&cfg, 2);
        let step = |flows: Option<&FlowPair>, gen_seed: u64| {
            let mut policy = init_policy(&cfg, 5, 2, &mut stream(0, 2));
            let mut opt = Adam::new(policy.num_params(), cfg.lr_policy);
            let mut rp = stream(0, 5);
            for _ in 0..3 {
                policy_update_step(&mut policy, &mut opt, flows, &demos, &cfg, &mut rp, &mut stream(gen_seed, 6)).unwrap();
            }
            policy
        };
        assert_eq!(step(Some(&flows), 1), step(None, 2));
    }

    #[test]
    fn beta_pi_zero_uses_generated_pairs_only() {
        let cfg = GprilConfig { beta_pi: 0.0, ..tiny_cfg() };
        let full = demo_set(2, Sparsify::Full);
        let with_actions = PreparedDemos::new(&full).unwrap();
        let without = PreparedDemos::new(&full.clone().into_states_only()).unwrap();
        let flows = flows_for(&cfg, 2);
        let step = |d: &PreparedDemos| {
            let mut policy = init_policy(&cfg, 5, 2, &mut stream(0, 2));
            let mut opt = Adam::new(policy.num_params(), cfg.lr_policy);
            policy_update_step(&mut policy, &mut opt, Some(&flows), d, &cfg, &mut stream(0, 5), &mut stream(0, 6)).unwrap();
            policy
        };
        assert_eq!(step(&with_actions), step(&without));
        let needs_actions = GprilConfig { beta_pi: 1.0, ..cfg.clone() };
        let mut policy = init_policy(&cfg, 5, 2, &mut stream(0, 2));
        let mut opt = Adam::new(policy.num_params(), 1e-3);
        assert!(policy_update_step(&mut policy, &mut opt, Some(&flows), &without, &needs_actions, &mut stream(0, 5), &mut stream(0, 6)).is_err());
    }

    #[test]
    fn bc_path_matches_training_with_beta_d_zero() {
        let demos = demo_set(3, Sparsify::Full);
        for iters in [0, 1, 4] {
            let cfg = GprilConfig { beta_d: 0.0, total_iterations: iters, ..tiny_cfg() };
            let trained = train(&cfg, &PointMassConfig::default(), &demos, &RunOutput::default()).unwrap();
            let bc = behavioral_cloning(&cfg, &demos).unwrap();
            assert_eq!(trained.policy.params(), bc.params());
            assert!(trained.flows.is_none());
        }
    }

    #[test]
    fn sync_training_is_reproducible() {
        let demos = demo_set(3, Sparsify::Full);
        let cfg = tiny_cfg();
        let a = train(&cfg, &PointMassConfig::default(), &demos, &RunOutput::default()).unwrap();
        let b = train(&cfg, &PointMassConfig::default(), &demos, &RunOutput::default()).unwrap();
        assert_eq!(a.policy, b.policy);
        let csv = |m: &[MetricsRow]| m.iter().map(MetricsRow::csv).collect::<Vec<_>>();
        assert_eq!(csv(&a.metrics), csv(&b.metrics));
        assert_eq!(a.metrics.len(), 4);
        assert!(a.env_steps > 0);
    }

    #[test]
    fn async_training_runs() {
        let demos = demo_set(3, Sparsify::Full);
        let cfg = GprilConfig { actor_mode: ActorMode::Async, ..tiny_cfg() };
        let out = train(&cfg, &PointMassConfig::default(), &demos, &RunOutput::default()).unwrap();
        assert_eq!(out.metrics.len(), 4);
        assert!(out.env_steps > 0);
        assert!(out.policy.params().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn run_directory_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let demos = demo_set(2, Sparsify::Full);
        let cfg = GprilConfig { checkpoint_interval: 2, ..tiny_cfg() };
        let out = train(&cfg, &PointMassConfig::default(), &demos, &RunOutput { dir: Some(dir.path().into()) }).unwrap();
        let rows = read_metrics(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), out.metrics.len());
        assert!(rows.iter().all(|r| r.wallclock_s == 0.0));
        let (p, n) = load_policy(dir.path().join("checkpoints/policy_final.ckpt")).unwrap();
        assert_eq!(p, out.policy);
        assert_eq!(n, out.normalizer);
        assert!(dir.path().join("checkpoints/policy_iter000002.ckpt").exists());
        let f = load_flow(dir.path().join("checkpoints/flow_s_final.ckpt")).unwrap();
        assert_eq!(f.params, out.flows.unwrap().state.params);
    }

    #[test]
    fn metrics_row_round_trip() {
        let r = MetricsRow {
            iter: 3,
            env_steps: 120,
            demo_loglik: -1.25,
            model_loglik_s: f64::NAN,
            model_loglik_a: 0.1,
            success_rate: 0.5,
            mean_episode_len: 77.5,
            wallclock_s: 0.0,
        };
        let back = MetricsRow::parse(&r.csv()).unwrap();
        assert_eq!(back.csv(), r.csv());
    }

    #[test]
    fn untrained_policy_rarely_succeeds() {
        let cfg = GprilConfig::desk_scale();
        let demos = demo_set(3, Sparsify::Full);
        let policy = init_policy(&cfg, 5, 2, &mut Streams::new(1).policy);
        let report = evaluate(&policy, &demos.normalizer(), &PointMassConfig::default(), 100, 1).unwrap();
        assert_eq!(report.rollouts, 100);
        assert!(report.success_rate <= 0.05, "{report:?}");
    }

    #[test]
    fn expert_like_policy_reports_success() {
        // A policy that reproduces the demos is not available in closed form,
        // so check the bookkeeping on the scripted expert directly.
        let cfg = PointMassConfig::default();
        let mut env = PointMass::new(cfg.clone(), 3);
        let traj = rollout(&mut env, |s| crate::demos::expert_action(&cfg, s)).unwrap();
        assert!(traj.success());
    }

    #[test]
    fn mean_score_is_duplication_invariant() {
        let policy = init_policy(&tiny_cfg(), 5, 2, &mut stream(1, 2));
        let s = ndarray::array![[0.1, 0.2, 0.0, -0.3, 0.1], [1.0, -1.0, 0.5, 0.0, 0.0]];
        let a = ndarray::array![[0.3, -0.1], [0.0, 0.2]];
        let g1 = mean_score(&policy, &s, &a).unwrap();
        let s2 = concatenate![Axis(0), s, s];
        let a2 = concatenate![Axis(0), a, a];
        let g2 = mean_score(&policy, &s2, &a2).unwrap();
        assert!(g1.0.iter().zip(&g2.0).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn exact_predecessors_recover_oracle_gradient() {
        // Scores divided by 1 − γ are large, so per-coordinate agreement is
        // judged against the finite differences with the sampling error added.
        let (mdp, policy) = fixture_4state();
        let oracle = TabularOracle::new(mdp, policy.clone()).unwrap();
        let gamma = 0.99;
        let fd = oracle.grad_log_stationary_fd(1e-5).unwrap();
        let model = ExactPredecessor::new(&oracle, gamma).unwrap();
        let n = 1_000_000;
        let mut rng = stream(11, 0);
        for target in 0..oracle.n_states() {
            let targets = Array2::from_elem((n, 1), target as f64);
            let (s, a) = model.sample_predecessors(&targets, &mut rng).unwrap();
            let est = mean_score(&policy, &s, &a).unwrap();
            let mut sq = vec![0.0; policy.num_params()];
            for (sr, ar) in s.rows().into_iter().zip(a.rows()) {
                let g = ScoreFunction::score(&policy, &sr.to_vec(), &ar.to_vec()).unwrap();
                sq.iter_mut().zip(&g).for_each(|(x, y)| *x += y * y);
            }
            for (k, m) in est.0.iter().enumerate() {
                let se = ((sq[k] / n as f64 - m * m) / n as f64).sqrt() / (1.0 - gamma);
                let g = m / (1.0 - gamma);
                let want = fd[(target, k)];
                assert!((g - want).abs() <= 0.05 * want.abs() + 4.0 * se, "target {target}, coord {k}: {g} vs {want} (se {se})");
            }
        }
    }

    #[test]
    fn action_independent_dynamics_give_zero_estimate() {
        let row = |p: [f64; 3]| vec![p.to_vec(), p.to_vec()];
        let mdp = crate::env::TabularMdp::new(
            vec![row([0.2, 0.5, 0.3]), row([0.6, 0.1, 0.3]), row([0.3, 0.3, 0.4])],
            vec![1.0, 0.0, 0.0],
        )
        .unwrap();
        let policy = SoftmaxPolicy::new(vec![vec![0.3, -0.2], vec![1.0, 0.0], vec![-0.5, 0.4]]).unwrap();
        let oracle = TabularOracle::new(mdp, policy.clone()).unwrap();
        let model = ExactPredecessor::new(&oracle, 0.9).unwrap();
        let n = 100_000;
        let mut rng = stream(12, 0);
        let targets = Array2::from_elem((1, 1), 1.0);
        let idx = Array2::from_elem((n, 1), 1.0);
        let (s, a) = model.sample_predecessors(&idx, &mut rng).unwrap();
        let mean = estimate_state_dist_grad(&model, &policy, &targets, n, &mut rng).unwrap();
        // Standard error of each coordinate from the same number of draws.
        let mut sq = vec![0.0; policy.num_params()];
        for (sr, ar) in s.rows().into_iter().zip(a.rows()) {
            let g = ScoreFunction::score(&policy, &sr.to_vec(), &ar.to_vec()).unwrap();
            sq.iter_mut().zip(&g).for_each(|(x, y)| *x += y * y);
        }
        let se: f64 = sq.iter().map(|x| x / n as f64 / n as f64).sum::<f64>().sqrt();
        assert!(mean.norm() <= 3.0 * se, "{} vs {}", mean.norm(), se);
    }
}
