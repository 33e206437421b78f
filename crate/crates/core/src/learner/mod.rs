//! Q-learning updates of the MPC parameters: TD errors, replay, first-order
//! and second-order steps, exploration.

pub mod replay;
pub mod second_order;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use replay::{ReplayBuffer, SensitivitySample};
pub use second_order::{
    assemble_c_distributed, centralized_second_order_direction, choose_regularizer, local_second_order,
    second_order_direction, second_order_recursive_direction, LocalSecondOrder, RegularizerMode,
};

/// `delta = L + gamma V(s') - Q(s, a)`.
pub fn td_error(cost: f64, gamma: f64, v_next: f64, q: f64) -> f64 {
    cost + gamma * v_next - q
}

/// `theta_i + alpha (1/T) sum_t delta_t g_{i,t}`.
pub fn first_order_local_update(
    theta: &DVector<f64>,
    grads: &[&DVector<f64>],
    deltas: &[f64],
    alpha: f64,
) -> DVector<f64> {
    let mut out = theta.clone();
    if grads.is_empty() {
        return out;
    }
    let scale = alpha / grads.len() as f64;
    for (g, &d) in grads.iter().zip(deltas) {
        out.axpy(scale * d, g, 1.0);
    }
    out
}

/// Geometrically decaying uniform exploration: `eps_t = eps0 * decay^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Exploration {
    pub initial: f64,
    pub decay: f64,
}

impl Default for Exploration {
    fn default() -> Self {
        Exploration {
            initial: 0.2,
            decay: 0.9998,
        }
    }
}

impl Exploration {
    pub fn none() -> Self {
        Exploration {
            initial: 0.0,
            decay: 1.0,
        }
    }

    pub fn magnitude(&self, step: usize) -> f64 {
        self.initial * self.decay.powf(step as f64)
    }

    /// Perturbs every component by `U(-eps_t, eps_t)` and clips to
    /// `[lo, hi]`. One draw per component is taken even when `eps_t = 0`.
    pub fn explore<R: Rng>(
        &self,
        greedy: &DVector<f64>,
        step: usize,
        lo: &[f64],
        hi: &[f64],
        rng: &mut R,
    ) -> DVector<f64> {
        let eps = self.magnitude(step);
        DVector::from_iterator(
            greedy.len(),
            greedy.iter().enumerate().map(|(k, &a)| {
                let u: f64 = rng.gen_range(-1.0..=1.0);
                (a + eps * u).clamp(lo[k], hi[k])
            }),
        )
    }
}

/// Optional componentwise box on the parameters, off by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ThetaBox {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl ThetaBox {
    pub fn project(&self, theta: &mut DVector<f64>) {
        for v in theta.iter_mut() {
            if let Some(lo) = self.lower {
                *v = v.max(lo);
            }
            if let Some(hi) = self.upper {
                *v = v.min(hi);
            }
        }
    }
}
