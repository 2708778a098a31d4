//! Replay buffer over the ergodically wrapped transition stream and the
//! geometric-gap training triples drawn from it.
//!
//! Episodes are kept whole. A terminal episode end is linked to the start of
//! the next stored episode, so walks forward in time may cross episode
//! boundaries exactly as they would along [`crate::env::ergodic_wrap`]'s
//! stream. Truncated ends are not linked; a walk that reaches one, or runs
//! past the newest stored state, is discarded and redrawn.

use std::collections::VecDeque;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::env::{Action, State, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriple {
    pub s: State,
    pub a: Action,
    pub s_future: State,
    /// `s_future` lies `gap + 1` steps after `s`.
    pub gap: usize,
}

/// Draw `j` with `P(j) = (1 - γ) γ^j`, `j = 0, 1, 2, ...`.
pub fn sample_gap<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> Result<usize> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let geom = Geometric::new(1.0 - gamma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(geom.sample(rng) as usize)
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Trajectory>,
    /// `offsets[k]` = number of real transitions stored before episode `k`.
    offsets: Vec<usize>,
    transitions: usize,
}

/// Handle shared between an actor thread (appends) and the learner
/// (samples). Episodes become visible only once fully appended.
pub type SharedReplay = Arc<RwLock<ReplayBuffer>>;

/// Upper bound on redraws before `sample_triples` gives up on a buffer
/// whose stream is too short for the requested gaps.
const MAX_REDRAWS: usize = 1_000_000;

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, episodes: VecDeque::new(), offsets: Vec::new(), transitions: 0 }
    }

    pub fn shared(capacity: usize) -> SharedReplay {
        Arc::new(RwLock::new(Self::new(capacity)))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored real (action-carrying) transitions.
    pub fn len(&self) -> usize {
        self.transitions
    }

    pub fn is_empty(&self) -> bool {
        self.transitions == 0
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Trajectory> {
        self.episodes.iter()
    }

    /// Append one episode, then evict whole episodes oldest-first while the
    /// stored transition count exceeds capacity. The newest episode is
    /// always kept.
    pub fn append_episode(&mut self, traj: Trajectory) {
        assert_eq!(traj.states.len(), traj.actions.len() + 1, "malformed trajectory");
        self.transitions += traj.num_transitions();
        self.episodes.push_back(traj);
        while self.transitions > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("nonempty");
            self.transitions -= old.num_transitions();
        }
        self.reindex();
    }

    fn reindex(&mut self) {
        self.offsets.clear();
        let mut acc = 0;
        for ep in &self.episodes {
            self.offsets.push(acc);
            acc += ep.num_transitions();
        }
    }

    /// Locate the `k`-th stored real transition as (episode, step).
    fn locate(&self, k: usize) -> (usize, usize) {
        let e = self.offsets.partition_point(|&o| o <= k) - 1;
        (e, k - self.offsets[e])
    }

    /// State `steps` transitions after state `t` of episode `e`, following
    /// terminal-to-initial links. `None` if the walk leaves the stored stream.
    pub fn walk(&self, mut e: usize, t: usize, steps: usize) -> Option<&State> {
        let mut pos = t + steps;
        loop {
            let ep = self.episodes.get(e)?;
            let last = ep.states.len() - 1;
            if pos <= last {
                return Some(&ep.states[pos]);
            }
            if !ep.end.is_terminal() {
                return None;
            }
            // The wrap edge from the terminal state to the next start costs one step.
            pos -= last + 1;
            e += 1;
        }
    }

    /// Training triple for an explicit transition index and gap.
    pub fn triple_at(&self, k: usize, gap: usize) -> Option<TrainingTriple> {
        if k >= self.transitions {
            return None;
        }
        let (e, t) = self.locate(k);
        let ep = &self.episodes[e];
        let s_future = self.walk(e, t, gap + 1)?;
        Some(TrainingTriple { s: ep.states[t].clone(), a: ep.actions[t].clone(), s_future: s_future.clone(), gap })
    }

    /// Draw `batch` triples: a uniformly chosen stored transition, a gap
    /// `j ~ Geom(1 - γ)`, and the state `j + 1` steps later.
    pub fn sample_triples<R: Rng + ?Sized>(&self, gamma: f64, batch: usize, rng: &mut R) -> Result<Vec<TrainingTriple>> {
        if self.transitions == 0 {
            return Err(Error::EmptyBuffer);
        }
        let mut out = Vec::with_capacity(batch);
        let mut redraws = 0;
        while out.len() < batch {
            let k = rng.random_range(0..self.transitions);
            let j = sample_gap(gamma, rng)?;
            match self.triple_at(k, j) {
                Some(tr) => out.push(tr),
                None => {
                    redraws += 1;
                    if redraws > MAX_REDRAWS {
                        return Err(Error::InvalidArgument(
                            "replay stream too short for the requested discount".into(),
                        ));
                    }
                }
            }
        }
        Ok(out)
    }
}
