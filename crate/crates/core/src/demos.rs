//! Expert demonstrations: scripted expert, sparsification regimes,
//! observation normalization, and the `.jsonl` + `meta.json` file format.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{rollout, Action, PointMass, PointMassConfig, SlotFrame, State, Trajectory};
use crate::error::{check_dim, Error, Result};

/// Lower bound applied to every normalization standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSample {
    pub episode: usize,
    pub t: usize,
    pub state: State,
    pub action: Option<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoMode {
    StateAction,
    StatesOnly,
}

/// Which demonstrated states the learner gets to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sparsify {
    /// Every (state, action) pair.
    Full,
    /// States at indices 0, k, 2k, ...; actions dropped.
    Stride(usize),
    /// Last state of each trajectory; actions dropped.
    FinalOnly,
}

impl fmt::Display for Sparsify {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sparsify::Full => f.write_str("full"),
            Sparsify::Stride(k) => write!(f, "stride:{k}"),
            Sparsify::FinalOnly => f.write_str("final"),
        }
    }
}

impl FromStr for Sparsify {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Sparsify::Full),
            "final" | "final_only" => Ok(Sparsify::FinalOnly),
            _ => {
                let k = s
                    .strip_prefix("stride:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown sparsify mode '{s}'")))?;
                let k: i64 = k
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad stride '{k}'")))?;
                if k <= 0 {
                    return Err(Error::InvalidArgument(format!("stride must be positive, got {k}")));
                }
                Ok(Sparsify::Stride(k as usize))
            }
        }
    }
}

impl Serialize for Sparsify {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Sparsify {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub samples: Vec<DemoSample>,
    pub mode: DemoMode,
    pub sparsify: Sparsify,
    pub state_dim: usize,
    pub action_dim: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoMeta {
    pub state_dim: usize,
    pub action_dim: usize,
    pub mode: DemoMode,
    pub sparsify: Sparsify,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

/// Proportional controller for the point-mass task: head for a point just
/// above the slot mouth, then descend along the slot axis while nulling the
/// lateral offset.
pub fn expert_action(cfg: &PointMassConfig, state: &State) -> Action {
    let frame = SlotFrame::new(cfg, state[4]);
    let pos = [state[0], state[1]];
    let (depth, offset) = frame.coords(pos);
    let v = if offset.abs() < 0.5 * cfg.slot_half_width && depth > -0.12 {
        let lat = -8.0 * offset;
        [
            0.6 * frame.axis[0] + lat * frame.lateral[0],
            0.6 * frame.axis[1] + lat * frame.lateral[1],
        ]
    } else {
        let target = frame.point(-0.08, 0.0);
        [5.0 * (target[0] - pos[0]), 5.0 * (target[1] - pos[1])]
    };
    Action(vec![v[0].clamp(-1.0, 1.0), v[1].clamp(-1.0, 1.0)])
}

/// Generate `n_demos` successful expert trajectories. Failed episodes are
/// discarded; fewer than `n_demos` successes in `10 * n_demos` attempts is
/// an error.
pub fn scripted_expert(cfg: &PointMassConfig, n_demos: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let mut env = PointMass::new(cfg.clone(), seed);
    let mut out = Vec::with_capacity(n_demos);
    let attempts = 10 * n_demos;
    for _ in 0..attempts {
        if out.len() == n_demos {
            break;
        }
        let traj = rollout(&mut env, |s| expert_action(cfg, s))?;
        if traj.success() {
            out.push(traj);
        }
    }
    if out.len() < n_demos {
        return Err(Error::ExpertFailed { needed: n_demos, got: out.len(), attempts });
    }
    Ok(out)
}

/// Build a demonstration set from trajectories. Normalization statistics
/// come from every recorded state of the trajectories, whatever subset the
/// sparsification keeps.
pub fn sparsify(trajs: &[Trajectory], regime: Sparsify) -> Result<DemoSet> {
    if trajs.is_empty() || trajs.iter().any(Trajectory::is_empty) {
        return Err(Error::InvalidArgument("no demonstration trajectories".into()));
    }
    let state_dim = trajs[0].states[0].len();
    let action_dim = trajs
        .iter()
        .find_map(|t| t.actions.first())
        .map_or(0, |a| a.len());
    let mut samples = Vec::new();
    for (episode, traj) in trajs.iter().enumerate() {
        match regime {
            Sparsify::Full => {
                for (t, a) in traj.actions.iter().enumerate() {
                    samples.push(DemoSample {
                        episode,
                        t,
                        state: traj.states[t].clone(),
                        action: Some(a.clone()),
                    });
                }
            }
            Sparsify::Stride(0) => {
                return Err(Error::InvalidArgument("stride must be positive".into()));
            }
            Sparsify::Stride(k) => {
                for t in (0..traj.states.len()).step_by(k) {
                    samples.push(DemoSample { episode, t, state: traj.states[t].clone(), action: None });
                }
            }
            Sparsify::FinalOnly => {
                let t = traj.states.len() - 1;
                samples.push(DemoSample { episode, t, state: traj.states[t].clone(), action: None });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("sparsification kept no samples".into()));
    }
    let recorded: Vec<&State> = trajs.iter().flat_map(|t| t.states.iter()).collect();
    let (norm_mean, norm_std) = moments(&recorded, state_dim)?;
    let mode = match regime {
        Sparsify::Full => DemoMode::StateAction,
        _ => DemoMode::StatesOnly,
    };
    Ok(DemoSet { samples, mode, sparsify: regime, state_dim, action_dim, norm_mean, norm_std })
}

/// Per-dimension mean and floored population standard deviation.
pub fn moments(states: &[&State], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = states.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in states {
        check_dim(dim, s.len())?;
        for (m, x) in mean.iter_mut().zip(s.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for s in states {
        for ((v, x), m) in var.iter_mut().zip(s.iter()).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok((mean, std))
}

impl DemoSet {
    /// Drop all actions, keeping the states.
    pub fn into_states_only(mut self) -> Self {
        self.samples.iter_mut().for_each(|s| s.action = None);
        self.mode = DemoMode::StatesOnly;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_actions(&self) -> bool {
        self.mode == DemoMode::StateAction
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.state_dim, x.len())?;
        Ok(x.iter()
            .zip(&self.norm_mean)
            .zip(&self.norm_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.state_dim, z.len())?;
        Ok(z.iter()
            .zip(&self.norm_mean)
            .zip(&self.norm_std)
            .map(|((z, m), s)| z * s + m)
            .collect())
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer { mean: self.norm_mean.clone(), std: self.norm_std.clone() }
    }

    pub fn meta(&self) -> DemoMeta {
        DemoMeta {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            mode: self.mode,
            sparsify: self.sparsify,
            norm_mean: self.norm_mean.clone(),
            norm_std: self.norm_std.clone(),
        }
    }

    /// Write `path` (JSON Lines, one sample per line) and `meta.json` in the
    /// same directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let meta = serde_json::to_vec_pretty(&self.meta())?;
        std::fs::write(meta_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta: DemoMeta = serde_json::from_slice(&std::fs::read(meta_path(path))?)?;
        let mut samples = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: DemoSample = serde_json::from_str(&line)?;
            check_dim(meta.state_dim, s.state.len())?;
            match (&s.action, meta.mode) {
                (Some(a), _) => check_dim(meta.action_dim, a.len())?,
                (None, DemoMode::StateAction) => {
                    return Err(Error::InvalidArgument(format!(
                        "sample (episode {}, t {}) has no action in a state-action demo set",
                        s.episode, s.t
                    )))
                }
                (None, DemoMode::StatesOnly) => {}
            }
            samples.push(s);
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!("{} holds no samples", path.display())));
        }
        check_dim(meta.state_dim, meta.norm_mean.len())?;
        check_dim(meta.state_dim, meta.norm_std.len())?;
        if meta.norm_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("norm_std must be positive".into()));
        }
        Ok(DemoSet {
            samples,
            mode: meta.mode,
            sparsify: meta.sparsify,
            state_dim: meta.state_dim,
            action_dim: meta.action_dim,
            norm_mean: meta.norm_mean,
            norm_std: meta.norm_std,
        })
    }
}

pub fn meta_path(demo_path: &Path) -> PathBuf {
    demo_path.with_file_name("meta.json")
}

/// Affine observation normalizer detached from the demo set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }
}
