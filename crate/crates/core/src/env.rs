//! Environments, trajectories, and the episodic-to-ergodic wrap.
//!
//! Two environments are provided: [`TabularEnv`], a finite MDP driven by a
//! transition tensor (the substrate for the exact oracles), and [`PointMass`],
//! a continuous 2D insertion task with a rotated slot.

use std::ops::Deref;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Observation vector of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub Vec<f64>);

/// Control vector applied to an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub Vec<f64>);

impl Deref for State {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for Action {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for State {
    fn from(v: Vec<f64>) -> Self {
        State(v)
    }
}

impl From<Vec<f64>> for Action {
    fn from(v: Vec<f64>) -> Self {
        Action(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    /// True terminal state: goal reached or failure.
    pub terminal: bool,
    pub success: bool,
    /// Step budget exhausted without reaching a terminal state.
    pub truncated: bool,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self) -> State;
    fn step(&mut self, action: &Action) -> Result<StepResult>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeEnd {
    Success,
    Failure,
    Truncated,
}

impl EpisodeEnd {
    pub fn is_terminal(self) -> bool {
        !matches!(self, EpisodeEnd::Truncated)
    }
}

/// One episode: `states.len() == actions.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub end: EpisodeEnd,
}

impl Trajectory {
    /// Number of states in the episode.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.actions.len()
    }

    pub fn success(&self) -> bool {
        self.end == EpisodeEnd::Success
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: State,
    /// `None` on artificial terminal-to-initial transitions.
    pub action: Option<Action>,
    pub next_state: State,
    pub terminal: bool,
}

impl Transition {
    pub fn is_wrap(&self) -> bool {
        self.action.is_none()
    }
}

/// Concatenate episodes into one transition stream, linking each terminal
/// state to the initial state of the following episode. Truncated episode
/// ends are not linked.
pub fn ergodic_wrap(trajectories: &[Trajectory]) -> Vec<Transition> {
    let mut out = Vec::new();
    for (k, traj) in trajectories.iter().enumerate() {
        let n = traj.num_transitions();
        for t in 0..n {
            out.push(Transition {
                state: traj.states[t].clone(),
                action: Some(traj.actions[t].clone()),
                next_state: traj.states[t + 1].clone(),
                terminal: t + 1 == n && traj.end.is_terminal(),
            });
        }
        if let (true, Some(next)) = (traj.end.is_terminal(), trajectories.get(k + 1)) {
            if let (Some(last), Some(first)) = (traj.states.last(), next.states.first()) {
                out.push(Transition {
                    state: last.clone(),
                    action: None,
                    next_state: first.clone(),
                    terminal: false,
                });
            }
        }
    }
    out
}

/// Run one episode with `act` choosing actions until the environment
/// reports a terminal state or truncation.
pub fn rollout<E, F>(env: &mut E, mut act: F) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    F: FnMut(&State) -> Action,
{
    let mut states = vec![env.reset()];
    let mut actions = Vec::new();
    loop {
        let s = states.last().expect("nonempty");
        let a = act(s);
        let r = env.step(&a)?;
        actions.push(a);
        states.push(r.next_state);
        if r.terminal {
            let end = if r.success { EpisodeEnd::Success } else { EpisodeEnd::Failure };
            return Ok(Trajectory { states, actions, end });
        }
        if r.truncated {
            return Ok(Trajectory { states, actions, end: EpisodeEnd::Truncated });
        }
    }
}

// ---------------------------------------------------------------------------
// Tabular MDP
// ---------------------------------------------------------------------------

/// Finite MDP with transition tensor `transition[s][a][s']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial: Vec<f64>,
}

const ROW_TOL: f64 = 1e-12;

impl TabularMdp {
    pub fn new(transition: Vec<Vec<Vec<f64>>>, initial: Vec<f64>) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        let mdp = TabularMdp { n_states, n_actions, transition, initial };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let fixture: TabularFixture = serde_json::from_slice(&std::fs::read(path)?)?;
        TabularMdp::new(fixture.transition, fixture.initial)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::InvalidArgument("empty MDP".into()));
        }
        check_dim(self.n_states, self.transition.len())?;
        check_dim(self.n_states, self.initial.len())?;
        for (s, rows) in self.transition.iter().enumerate() {
            check_dim(self.n_actions, rows.len())?;
            for (a, row) in rows.iter().enumerate() {
                check_dim(self.n_states, row.len())?;
                check_distribution(row, &format!("P[{s}][{a}]"))?;
            }
        }
        check_distribution(&self.initial, "initial")
    }

    /// State-to-state kernel under a policy table `pi[s][a]`.
    pub fn state_kernel(&self, pi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.n_states;
        let mut k = vec![vec![0.0; n]; n];
        for s in 0..n {
            for a in 0..self.n_actions {
                for (sn, p) in self.transition[s][a].iter().enumerate() {
                    k[s][sn] += pi[s][a] * p;
                }
            }
        }
        k
    }

    /// True when the graph with an edge wherever some action moves `s` to
    /// `s'` is strongly connected, i.e. the chain is irreducible under every
    /// strictly positive policy.
    pub fn is_irreducible(&self) -> bool {
        let adj: Vec<Vec<bool>> = (0..self.n_states)
            .map(|s| {
                (0..self.n_states)
                    .map(|sn| self.transition[s].iter().any(|row| row[sn] > 0.0))
                    .collect()
            })
            .collect();
        strongly_connected(&adj)
    }
}

/// JSON fixture layout: transition tensor, initial distribution, and
/// optionally the softmax logits of a reference policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularFixture {
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial: Vec<f64>,
    #[serde(default)]
    pub policy_logits: Option<Vec<Vec<f64>>>,
}

impl TabularFixture {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn mdp(&self) -> Result<TabularMdp> {
        TabularMdp::new(self.transition.clone(), self.initial.clone())
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

pub(crate) fn strongly_connected(adj: &[Vec<bool>]) -> bool {
    let n = adj.len();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                let edge = if forward { adj[u][v] } else { adj[v][u] };
                if edge && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|x| x)
    };
    n > 0 && reach(true) && reach(false)
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver of mass past the end: return the last
    // outcome with nonzero probability.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Tabular MDP as an [`Environment`]. States and actions are one-element
/// vectors holding the index.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    rng: ChaCha8Rng,
    state: usize,
    steps: usize,
    max_steps: usize,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, max_steps: usize, seed: u64) -> Self {
        TabularEnv { mdp, rng: ChaCha8Rng::seed_from_u64(seed), state: 0, steps: 0, max_steps }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
}

impl Environment for TabularEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&mut self) -> State {
        self.state = sample_categorical(&self.mdp.initial, &mut self.rng);
        self.steps = 0;
        State(vec![self.state as f64])
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        check_dim(1, action.len())?;
        let a = action[0];
        if a < 0.0 || a.fract() != 0.0 || a as usize >= self.mdp.n_actions {
            return Err(Error::InvalidArgument(format!("action index {a} out of range")));
        }
        let row = &self.mdp.transition[self.state][a as usize];
        self.state = sample_categorical(row, &mut self.rng);
        self.steps += 1;
        Ok(StepResult {
            next_state: State(vec![self.state as f64]),
            terminal: false,
            success: false,
            truncated: self.steps >= self.max_steps,
        })
    }
}

// ---------------------------------------------------------------------------
// Point-mass insertion
// ---------------------------------------------------------------------------

/// Geometry and timing of the point-mass insertion task.
///
/// The slot is a corridor of half-width `slot_half_width` and depth
/// `slot_depth`, rotated by the per-episode angle φ about its bottom point.
/// Its walls block motion. The goal is the bottom `goal_depth` of the slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointMassConfig {
    pub dt: f64,
    pub max_steps: usize,
    /// φ is drawn uniformly from `[-angle_range, angle_range]`.
    pub angle_range: f64,
    pub slot_bottom: [f64; 2],
    pub slot_depth: f64,
    pub slot_half_width: f64,
    pub wall_thickness: f64,
    pub goal_depth: f64,
    pub start_x: [f64; 2],
    pub start_y: [f64; 2],
}

impl Default for PointMassConfig {
    fn default() -> Self {
        PointMassConfig {
            dt: 0.05,
            max_steps: 200,
            angle_range: 0.4,
            slot_bottom: [0.0, -0.6],
            slot_depth: 0.35,
            slot_half_width: 0.06,
            wall_thickness: 0.1,
            goal_depth: 0.05,
            start_x: [-0.6, 0.6],
            start_y: [0.3, 0.7],
        }
    }
}

/// Slot coordinates of a position: depth along the slot axis (0 at the
/// mouth, `slot_depth` at the bottom) and signed lateral offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotFrame {
    pub mouth: [f64; 2],
    /// Unit vector pointing into the slot.
    pub axis: [f64; 2],
    /// Unit vector across the slot.
    pub lateral: [f64; 2],
}

impl SlotFrame {
    pub fn new(cfg: &PointMassConfig, angle: f64) -> Self {
        let axis = [angle.sin(), -angle.cos()];
        let lateral = [angle.cos(), angle.sin()];
        let mouth = [
            cfg.slot_bottom[0] - cfg.slot_depth * axis[0],
            cfg.slot_bottom[1] - cfg.slot_depth * axis[1],
        ];
        SlotFrame { mouth, axis, lateral }
    }

    /// (depth, lateral offset) of position `p`.
    pub fn coords(&self, p: [f64; 2]) -> (f64, f64) {
        let dx = p[0] - self.mouth[0];
        let dy = p[1] - self.mouth[1];
        (dx * self.axis[0] + dy * self.axis[1], dx * self.lateral[0] + dy * self.lateral[1])
    }

    pub fn point(&self, depth: f64, offset: f64) -> [f64; 2] {
        [
            self.mouth[0] + depth * self.axis[0] + offset * self.lateral[0],
            self.mouth[1] + depth * self.axis[1] + offset * self.lateral[1],
        ]
    }
}

/// 2D point mass. State layout: `[x, y, vx, vy, φ]`; action: target velocity
/// per axis, clipped to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct PointMass {
    cfg: PointMassConfig,
    rng: ChaCha8Rng,
    pos: [f64; 2],
    vel: [f64; 2],
    angle: f64,
    steps: usize,
}

impl PointMass {
    pub const STATE_DIM: usize = 5;
    pub const ACTION_DIM: usize = 2;

    pub fn new(cfg: PointMassConfig, seed: u64) -> Self {
        PointMass {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pos: [0.0; 2],
            vel: [0.0; 2],
            angle: 0.0,
            steps: 0,
        }
    }

    pub fn config(&self) -> &PointMassConfig {
        &self.cfg
    }

    pub fn frame(&self) -> SlotFrame {
        SlotFrame::new(&self.cfg, self.angle)
    }

    /// Place the agent at an explicit configuration.
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2], angle: f64) -> State {
        self.pos = pos;
        self.vel = vel;
        self.angle = angle;
        self.steps = 0;
        self.observe()
    }

    fn observe(&self) -> State {
        State(vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.angle])
    }

    /// Positions occupied by the slot walls (side walls and bottom cap).
    pub fn in_wall(&self, p: [f64; 2]) -> bool {
        let c = &self.cfg;
        let (depth, off) = self.frame().coords(p);
        let outer = c.slot_half_width + c.wall_thickness;
        let side = (0.0..=c.slot_depth + c.wall_thickness).contains(&depth)
            && off.abs() > c.slot_half_width
            && off.abs() <= outer;
        let cap = depth > c.slot_depth && depth <= c.slot_depth + c.wall_thickness && off.abs() <= outer;
        side || cap
    }

    pub fn in_goal(&self, p: [f64; 2]) -> bool {
        let c = &self.cfg;
        let (depth, off) = self.frame().coords(p);
        depth >= c.slot_depth - c.goal_depth && depth <= c.slot_depth && off.abs() <= c.slot_half_width
    }
}

impl Environment for PointMass {
    fn state_dim(&self) -> usize {
        Self::STATE_DIM
    }

    fn action_dim(&self) -> usize {
        Self::ACTION_DIM
    }

    fn reset(&mut self) -> State {
        let c = &self.cfg;
        let x = uniform(&mut self.rng, c.start_x[0], c.start_x[1]);
        let y = uniform(&mut self.rng, c.start_y[0], c.start_y[1]);
        let angle = uniform(&mut self.rng, -c.angle_range, c.angle_range);
        self.set_state([x, y], [0.0, 0.0], angle)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        check_dim(Self::ACTION_DIM, action.len())?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        let v = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let next = [self.pos[0] + v[0] * self.cfg.dt, self.pos[1] + v[1] * self.cfg.dt];
        if self.in_wall(next) {
            self.vel = [0.0, 0.0];
        } else {
            self.pos = next;
            self.vel = v;
        }
        self.steps += 1;
        let outside = self.pos.iter().any(|x| x.abs() > 1.0);
        let success = !outside && self.in_goal(self.pos);
        let terminal = outside || success;
        Ok(StepResult {
            next_state: self.observe(),
            terminal,
            success,
            truncated: !terminal && self.steps >= self.cfg.max_steps,
        })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}
