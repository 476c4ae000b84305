//! Hindsight relabelling and a bounded FIFO replay buffer.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{EnvState, Transition};

/// Default buffer capacity.
pub const DEFAULT_CAPACITY: usize = 100_000;

/// A transition paired with a goal taken from its own trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HindsightSample {
    pub transition: Transition,
    pub goal: EnvState,
    /// Context the transition was collected in.
    pub task_id: u32,
}

/// Relabels each transition with `k` goals drawn uniformly from the states
/// reached at or after it (the "future" strategy).
pub fn relabel<R: Rng + ?Sized>(
    trajectory: &[Transition],
    k: usize,
    task_id: u32,
    rng: &mut R,
) -> Vec<HindsightSample> {
    let mut out = Vec::with_capacity(trajectory.len() * k);
    for (t, transition) in trajectory.iter().enumerate() {
        for _ in 0..k {
            let j = rng.random_range(t..trajectory.len());
            out.push(HindsightSample {
                transition: *transition,
                goal: trajectory[j].next_state,
                task_id,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    samples: VecDeque<HindsightSample>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            samples: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, evicting the oldest samples beyond capacity.
    pub fn extend(&mut self, samples: impl IntoIterator<Item = HindsightSample>) {
        for s in samples {
            if self.samples.len() == self.capacity {
                self.samples.pop_front();
            }
            self.samples.push_back(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &HindsightSample> {
        self.samples.iter()
    }

    /// Uniform sampling with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<HindsightSample>> {
        if self.samples.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch_size)
            .map(|_| self.samples[rng.random_range(0..self.samples.len())])
            .collect())
    }
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        ReplayBuffer::new(DEFAULT_CAPACITY)
    }
}
