//! Ground-truth coupled linear network with bounded additive noise and
//! per-agent stage costs. This is the "unknown" system the learners act on.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::Topology;
use crate::{Error, Result};

pub type JointState = Vec<DVector<f64>>;
pub type JointAction = Vec<DVector<f64>>;

/// Independent random streams derived from one master seed.
///
/// Streams are addressed by a purpose tag and an agent index so adding a new
/// consumer never shifts the draws of an existing one.
pub fn rng_stream(seed: u64, purpose: RngPurpose, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | agent as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngPurpose {
    InitialState = 1,
    Noise = 2,
    Exploration = 3,
    /// Replay sampling; every agent uses the same stream so all agents draw
    /// the same sample indices without communicating.
    Replay = 4,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSpec {
    pub lo: f64,
    pub hi: f64,
    /// Per-component multiplier applied to the scalar draw `e_i(t)`.
    pub mask: Vec<f64>,
}

impl NoiseSpec {
    pub fn none(n: usize) -> Self {
        NoiseSpec {
            lo: 0.0,
            hi: 0.0,
            mask: vec![0.0; n],
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        // always consume one draw so streams stay aligned across noise settings
        let u: f64 = rng.gen();
        self.lo + (self.hi - self.lo) * u
    }
}

/// `s_i(t+1) = A_i s_i + sum_j A_ij s_j + B_i a_i + mask * e_i(t)`.
#[derive(Debug, Clone)]
pub struct TrueDynamics {
    pub topology: Topology,
    pub a: Vec<DMatrix<f64>>,
    /// Coupling matrices `A_ij`, indexed like `topology.neighbors(i)`.
    pub a_nb: Vec<Vec<DMatrix<f64>>>,
    pub b: Vec<DMatrix<f64>>,
    pub noise: NoiseSpec,
}

impl TrueDynamics {
    /// Homogeneous network: every agent shares `a`, `b` and every coupling
    /// uses `a_nb`.
    pub fn homogeneous(
        topology: Topology,
        a: DMatrix<f64>,
        a_nb: DMatrix<f64>,
        b: DMatrix<f64>,
        noise: NoiseSpec,
    ) -> Result<Self> {
        let m = topology.agents();
        let dynamics = TrueDynamics {
            a: vec![a; m],
            a_nb: (0..m).map(|i| vec![a_nb.clone(); topology.degree(i)]).collect(),
            b: vec![b; m],
            topology,
            noise,
        };
        dynamics.validate()?;
        Ok(dynamics)
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        for i in 0..self.topology.agents() {
            if self.a[i].shape() != (n, n) {
                return Err(Error::Dimension {
                    context: "A_i",
                    expected: n,
                    got: self.a[i].nrows(),
                });
            }
            if self.b[i].shape() != (n, m) {
                return Err(Error::Dimension {
                    context: "B_i",
                    expected: n,
                    got: self.b[i].nrows(),
                });
            }
            if self.a_nb[i].len() != self.topology.degree(i) {
                return Err(Error::Dimension {
                    context: "coupling matrices per agent",
                    expected: self.topology.degree(i),
                    got: self.a_nb[i].len(),
                });
            }
            if self.a_nb[i].iter().any(|a| a.shape() != (n, n)) {
                return Err(Error::Dimension {
                    context: "A_ij",
                    expected: n,
                    got: 0,
                });
            }
        }
        if self.noise.mask.len() != n {
            return Err(Error::Dimension {
                context: "noise mask",
                expected: n,
                got: self.noise.mask.len(),
            });
        }
        if self.noise.lo > self.noise.hi {
            return Err(Error::Config("noise interval has lo > hi".into()));
        }
        Ok(())
    }

    /// Deterministic part of the transition.
    pub fn mean_next(&self, state: &JointState, action: &JointAction) -> Result<JointState> {
        self.check(state, action)?;
        Ok((0..self.topology.agents())
            .map(|i| {
                let mut next = &self.a[i] * &state[i] + &self.b[i] * &action[i];
                for (k, &j) in self.topology.neighbors(i).iter().enumerate() {
                    next += &self.a_nb[i][k] * &state[j];
                }
                next
            })
            .collect())
    }

    /// Samples the next joint state; `noise_rngs[i]` drives agent `i`'s noise.
    pub fn next_state<R: Rng>(
        &self,
        state: &JointState,
        action: &JointAction,
        noise_rngs: &mut [R],
    ) -> Result<JointState> {
        let mut next = self.mean_next(state, action)?;
        if noise_rngs.len() != next.len() {
            return Err(Error::Dimension {
                context: "noise streams",
                expected: next.len(),
                got: noise_rngs.len(),
            });
        }
        for (s, rng) in next.iter_mut().zip(noise_rngs.iter_mut()) {
            let e = self.noise.draw(rng);
            for (c, w) in self.noise.mask.iter().enumerate() {
                s[c] += w * e;
            }
        }
        Ok(next)
    }

    fn check(&self, state: &JointState, action: &JointAction) -> Result<()> {
        let m = self.topology.agents();
        if state.len() != m || action.len() != m {
            return Err(Error::Dimension {
                context: "joint state/action agent count",
                expected: m,
                got: state.len().min(action.len()),
            });
        }
        for i in 0..m {
            if state[i].len() != self.state_dim() {
                return Err(Error::Dimension {
                    context: "local state",
                    expected: self.state_dim(),
                    got: state[i].len(),
                });
            }
            if action[i].len() != self.input_dim() {
                return Err(Error::Dimension {
                    context: "local action",
                    expected: self.input_dim(),
                    got: action[i].len(),
                });
            }
        }
        Ok(())
    }
}

/// Local cost `||s||^2 + 1/2 ||a||^2 + w' max(0, lb - s) + w' max(0, s - ub)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageCostSpec {
    pub state_lb: Vec<f64>,
    pub state_ub: Vec<f64>,
    pub violation_weight: Vec<f64>,
    #[serde(default = "one")]
    pub state_weight: f64,
    #[serde(default = "half")]
    pub input_weight: f64,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

impl StageCostSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [
            ("state_lb", &self.state_lb),
            ("state_ub", &self.state_ub),
            ("violation_weight", &self.violation_weight),
        ] {
            if v.len() != n {
                return Err(Error::Config(format!("{name} has length {} but n = {n}", v.len())));
            }
        }
        if self.state_lb.iter().zip(&self.state_ub).any(|(l, u)| l >= u) {
            return Err(Error::Config("state bounds need lb < ub component-wise".into()));
        }
        if self.violation_weight.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("violation weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn local_cost(&self, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
        let mut cost = self.state_weight * s.norm_squared() + self.input_weight * a.norm_squared();
        for c in 0..s.len() {
            let w = self.violation_weight[c];
            cost += w * (self.state_lb[c] - s[c]).max(0.0);
            cost += w * (s[c] - self.state_ub[c]).max(0.0);
        }
        cost
    }

    /// Per-agent costs and their arithmetic mean (the global stage cost).
    pub fn costs(&self, state: &JointState, action: &JointAction) -> (Vec<f64>, f64) {
        let local: Vec<f64> = state.iter().zip(action).map(|(s, a)| self.local_cost(s, a)).collect();
        let global = local.iter().sum::<f64>() / local.len() as f64;
        (local, global)
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: JointState,
    pub local_costs: Vec<f64>,
    pub global_cost: f64,
}

/// One observed transition `(s_t, a_t, L(s_t, a_t), s_{t+1})`.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: JointState,
    pub action: JointAction,
    pub local_costs: Vec<f64>,
    pub global_cost: f64,
    pub next_state: JointState,
}

/// The environment: true dynamics plus stage cost.
#[derive(Debug, Clone)]
pub struct Environment {
    pub dynamics: TrueDynamics,
    pub cost: StageCostSpec,
    pub init_lb: Vec<f64>,
    pub init_ub: Vec<f64>,
}

impl Environment {
    pub fn step<R: Rng>(&self, state: &JointState, action: &JointAction, noise_rngs: &mut [R]) -> Result<StepOutcome> {
        let next_state = self.dynamics.next_state(state, action, noise_rngs)?;
        let (local_costs, global_cost) = self.cost.costs(state, action);
        Ok(StepOutcome {
            next_state,
            local_costs,
            global_cost,
        })
    }

    /// Each agent's state uniform over the configured initial box.
    pub fn sample_initial_state<R: Rng>(&self, rngs: &mut [R]) -> JointState {
        rngs.iter_mut()
            .map(|rng| {
                DVector::from_iterator(
                    self.init_lb.len(),
                    self.init_lb
                        .iter()
                        .zip(&self.init_ub)
                        .map(|(&l, &u)| l + (u - l) * rng.gen::<f64>()),
                )
            })
            .collect()
    }
}
