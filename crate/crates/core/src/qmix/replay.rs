use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionMask, IDLE_MASK};

/// One joint step as seen by the learner. Per-slot vectors have one entry
/// per agent slot; `obs` is flattened slot-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub last_actions: Vec<Action>,
    pub masks: Vec<ActionMask>,
    pub actions: Vec<Action>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl Transition {
    pub fn is_active(&self, slot: usize) -> bool {
        self.masks[slot] != IDLE_MASK
    }
}

/// A complete episode; only the last transition is terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<Transition>,
}

impl Episode {
    pub fn terminal_reward(&self) -> f64 {
        self.steps.last().map_or(0.0, |t| t.reward)
    }
}

/// Ring buffer of whole episodes with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: Vec<Episode>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, episodes: Vec::with_capacity(capacity.min(4096)), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores `episode`, evicting the oldest once full. Empty episodes are
    /// dropped since they carry no transition.
    pub fn push(&mut self, episode: Episode) {
        if episode.steps.is_empty() {
            return;
        }
        if self.episodes.len() < self.capacity {
            self.episodes.push(episode);
        } else {
            self.episodes[self.next] = episode;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `count` episodes drawn uniformly with replacement.
    pub fn sample<'a, R: Rng>(&'a self, count: usize, rng: &mut R) -> Vec<&'a Episode> {
        if self.episodes.is_empty() {
            return Vec::new();
        }
        (0..count).map(|_| &self.episodes[rng.gen_range(0..self.episodes.len())]).collect()
    }
}
