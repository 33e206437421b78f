use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Sensitivities of one transition, cached when it is stored. Agent `i` only
/// ever reads `gradients[i]` and `hessians[i]`.
#[derive(Debug, Clone)]
pub struct SensitivitySample {
    /// Each agent's own estimate of the TD error (they agree up to consensus
    /// error).
    pub deltas: Vec<f64>,
    pub gradients: Vec<DVector<f64>>,
    pub hessians: Vec<DMatrix<f64>>,
}

/// The most recent `capacity` transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<SensitivitySample>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, sample: SensitivitySample) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(sample);
    }

    pub fn get(&self, idx: usize) -> &SensitivitySample {
        &self.items[idx]
    }

    /// `count` distinct indices drawn uniformly, or `None` while the buffer
    /// holds fewer than `count` transitions.
    pub fn sample_indices<R: Rng>(&self, count: usize, rng: &mut R) -> Option<Vec<usize>> {
        if count == 0 || self.items.len() < count {
            return None;
        }
        Some(rand::seq::index::sample(rng, self.items.len(), count).into_vec())
    }
}
