use std::collections::VecDeque;

use rand::Rng;

use crate::maze::{State, Transition};
use crate::skills::Window;

/// One skill execution: start state, executed skill, reward summed over
/// the K low-level steps, and whether the goal was reached.
#[derive(Clone, Debug, PartialEq)]
pub struct HlTransition {
    pub s: State,
    pub z: Vec<f64>,
    pub r: f64,
    pub s_next: State,
    pub done: bool,
}

/// Per-task replay: raw env transitions for context windows and skill
/// windows, plus high-level transitions for the critics. Each store evicts
/// its oldest entries beyond `capacity`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBuffer {
    capacity: usize,
    raw: VecDeque<(u64, Transition)>,
    hl: VecDeque<(u64, HlTransition)>,
    episodes: u64,
}

impl TaskBuffer {
    pub fn new(capacity: usize) -> Self {
        TaskBuffer { capacity: capacity.max(1), raw: VecDeque::new(), hl: VecDeque::new(), episodes: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn raw_len(&self) -> usize {
        self.raw.len()
    }

    pub fn hl_len(&self) -> usize {
        self.hl.len()
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn push_episode(&mut self, raw: &[Transition], hl: &[HlTransition]) {
        let ep = self.episodes;
        self.episodes += 1;
        for t in raw {
            if self.raw.len() == self.capacity {
                self.raw.pop_front();
            }
            self.raw.push_back((ep, *t));
        }
        for t in hl {
            if self.hl.len() == self.capacity {
                self.hl.pop_front();
            }
            self.hl.push_back((ep, t.clone()));
        }
    }

    pub fn raw(&self) -> impl ExactSizeIterator<Item = &Transition> {
        self.raw.iter().map(|(_, t)| t)
    }

    pub fn hl(&self) -> impl ExactSizeIterator<Item = &HlTransition> {
        self.hl.iter().map(|(_, t)| t)
    }

    /// High-level entries with their episode index.
    pub fn hl_with_episode(&self) -> impl ExactSizeIterator<Item = (u64, &HlTransition)> {
        self.hl.iter().map(|(e, t)| (*e, t))
    }

    /// `n` high-level transitions drawn uniformly with replacement.
    pub fn sample_hl<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&HlTransition> {
        if self.hl.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.hl[rng.random_range(0..self.hl.len())].1).collect()
    }

    /// Contiguous run of `n` raw transitions starting at `start`.
    pub fn raw_slice(&self, start: usize, n: usize) -> Vec<Transition> {
        self.raw.range(start..start + n).map(|(_, t)| *t).collect()
    }

    /// Uniformly placed contiguous run of `n` raw transitions.
    pub fn random_raw_window<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Option<Vec<Transition>> {
        if self.raw.len() < n || n == 0 {
            return None;
        }
        let start = rng.random_range(0..=self.raw.len() - n);
        Some(self.raw_slice(start, n))
    }

    /// K-step `(s, a)` window lying inside one episode.
    pub fn sample_skill_window<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Option<Window> {
        if self.raw.len() < k || k == 0 {
            return None;
        }
        for _ in 0..64 {
            let start = rng.random_range(0..=self.raw.len() - k);
            if self.raw[start].0 == self.raw[start + k - 1].0 {
                let run = self.raw.range(start..start + k);
                let (states, actions) = run.map(|(_, t)| (t.s, t.a)).unzip();
                return Some(Window { states, actions });
            }
        }
        None
    }

    /// All raw transitions, oldest first.
    pub fn all_raw(&self) -> Vec<Transition> {
        self.raw().copied().collect()
    }
}
