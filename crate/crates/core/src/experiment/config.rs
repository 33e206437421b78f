//! Experiment configuration, read from TOML. Every field has a default and
//! the defaults describe the three-agent chain benchmark.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::admm::AdmmConfig;
use crate::consensus::{Network, SumMode, Topology};
use crate::environment::{Environment, NoiseSpec, StageCostSpec, TrueDynamics};
use crate::learner::{Exploration, RegularizerMode, ThetaBox};
use crate::mpc::theta::matrix_from_rows;
use crate::mpc::{InitialModel, ModelStructure, MpcSpec, ThetaLocal};
use crate::qp::QpOptions;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Distributed first-order.
    Dfo,
    /// Distributed second-order.
    Dso,
    /// Centralized second-order.
    Cso,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Dfo => "dfo",
            Algorithm::Dso => "dso",
            Algorithm::Cso => "cso",
        }
    }

    pub fn is_distributed(self) -> bool {
        !matches!(self, Algorithm::Cso)
    }

    pub fn is_second_order(self) -> bool {
        !matches!(self, Algorithm::Dfo)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub a: Vec<Vec<f64>>,
    pub a_neighbor: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub noise: NoiseSpec,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            a: vec![vec![0.9, 0.35], vec![0.0, 1.1]],
            a_neighbor: vec![vec![0.0, 0.0], vec![0.0, -0.1]],
            b: vec![vec![0.0813], vec![0.2]],
            noise: NoiseSpec {
                lo: -0.1,
                hi: 0.0,
                mask: vec![1.0, 0.0],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub state_lb: Vec<f64>,
    pub state_ub: Vec<f64>,
    pub input_lb: Vec<f64>,
    pub input_ub: Vec<f64>,
    pub structure: ModelStructure,
    pub qp_tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 10,
            gamma: 0.9,
            state_lb: vec![0.0, -1.0],
            state_ub: vec![1.0, 1.0],
            input_lb: vec![-1.0],
            input_ub: vec![1.0],
            structure: ModelStructure::upper_triangular_2x1(),
            qp_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Overrides the per-family step size below when set.
    pub alpha: Option<f64>,
    pub alpha_second_order: f64,
    pub alpha_first_order: f64,
    /// Transitions per update, `T`.
    pub samples: usize,
    pub buffer: usize,
    pub regularizer: RegularizerMode,
    /// Environment steps between updates.
    pub update_period: usize,
    pub exploration: Exploration,
    pub theta_box: ThetaBox,
    /// Check the positive definiteness chain on every second-order update.
    pub certify: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            alpha: None,
            alpha_second_order: 1e-4,
            alpha_first_order: 1e-8,
            samples: 15,
            buffer: 100,
            regularizer: RegularizerMode::NonSingular,
            update_period: 1,
            exploration: Exploration::default(),
            theta_box: ThetaBox::default(),
            certify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub gac_iterations: usize,
    /// Replace GAC by exact sums.
    pub exact: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            gac_iterations: 100,
            exact: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialStateConfig {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    /// Resample the state every this many steps; `None` runs one continuing
    /// episode.
    pub reset_period: Option<usize>,
}

impl Default for InitialStateConfig {
    fn default() -> Self {
        InitialStateConfig {
            lb: vec![0.0, -1.0],
            ub: vec![1.0, 1.0],
            reset_period: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Record the flattened parameters every this many steps (0 disables).
    pub theta_every: usize,
    /// Keep a log of every inter-agent message.
    pub message_log: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            theta_every: 100,
            message_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub topology: Topology,
    pub dynamics: DynamicsConfig,
    pub cost: StageCostSpec,
    pub initial_state: InitialStateConfig,
    pub initial_model: InitialModel,
    pub mpc: MpcConfig,
    pub learner: LearnerConfig,
    pub admm: AdmmConfig,
    pub consensus: ConsensusConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: Algorithm::Dso,
            steps: 20_000,
            seeds: vec![0, 1, 2, 3, 4],
            topology: Topology::chain(3).expect("chain of three"),
            dynamics: DynamicsConfig::default(),
            cost: StageCostSpec {
                state_lb: vec![0.0, -1.0],
                state_ub: vec![1.0, 1.0],
                violation_weight: vec![500.0, 500.0],
                state_weight: 1.0,
                input_weight: 0.5,
            },
            initial_state: InitialStateConfig::default(),
            initial_model: InitialModel {
                a: vec![vec![1.0, 0.25], vec![0.0, 1.0]],
                a_neighbor: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
                b: vec![vec![0.0312], vec![0.25]],
                q: vec![1.0, 1.0],
                r: vec![0.5],
                omega: vec![500.0, 500.0],
            },
            mpc: MpcConfig::default(),
            learner: LearnerConfig::default(),
            admm: AdmmConfig::default(),
            consensus: ConsensusConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The step size for the configured algorithm.
    pub fn alpha(&self) -> f64 {
        self.learner.alpha.unwrap_or(if self.algorithm.is_second_order() {
            self.learner.alpha_second_order
        } else {
            self.learner.alpha_first_order
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mpc_spec().validate()?;
        self.environment()?;
        let n = self.mpc.structure.state_dim;
        self.cost.validate(n)?;
        if self.initial_state.lb.len() != n || self.initial_state.ub.len() != n {
            return Err(Error::Config(format!("initial state box must have length {n}")));
        }
        if self.learner.samples == 0 || self.learner.samples > self.learner.buffer {
            return Err(Error::Config(format!(
                "sample count {} must be in 1..=buffer ({})",
                self.learner.samples, self.learner.buffer
            )));
        }
        if self.learner.update_period == 0 {
            return Err(Error::Config("update period must be positive".into()));
        }
        if self.admm.iterations == 0 || !(self.admm.rho > 0.0) {
            return Err(Error::Config(
                "ADMM needs a positive iteration count and penalty".into(),
            ));
        }
        if !self.consensus.exact && self.consensus.gac_iterations == 0 {
            return Err(Error::Config("GAC needs at least one iteration".into()));
        }
        if self.initial_state.reset_period == Some(0) {
            return Err(Error::Config("reset period must be positive".into()));
        }
        if !(self.alpha() >= 0.0) {
            return Err(Error::Config("step size must be nonnegative".into()));
        }
        for i in 0..self.topology.agents() {
            self.initial_thetas()[i].check(&self.mpc.structure, self.topology.degree(i))?;
        }
        Ok(())
    }

    pub fn mpc_spec(&self) -> MpcSpec {
        MpcSpec {
            horizon: self.mpc.horizon,
            gamma: self.mpc.gamma,
            state_lb: self.mpc.state_lb.clone(),
            state_ub: self.mpc.state_ub.clone(),
            input_lb: self.mpc.input_lb.clone(),
            input_ub: self.mpc.input_ub.clone(),
            structure: self.mpc.structure.clone(),
        }
    }

    pub fn qp_options(&self) -> QpOptions {
        QpOptions {
            tolerance: self.mpc.qp_tolerance,
            ..QpOptions::default()
        }
    }

    pub fn environment(&self) -> Result<Environment> {
        let dynamics = TrueDynamics::homogeneous(
            self.topology.clone(),
            matrix_from_rows(&self.dynamics.a)?,
            matrix_from_rows(&self.dynamics.a_neighbor)?,
            matrix_from_rows(&self.dynamics.b)?,
            self.dynamics.noise.clone(),
        )?;
        Ok(Environment {
            dynamics,
            cost: self.cost.clone(),
            init_lb: self.initial_state.lb.clone(),
            init_ub: self.initial_state.ub.clone(),
        })
    }

    pub fn network(&self) -> Network {
        let mode = if self.consensus.exact {
            SumMode::Exact
        } else {
            SumMode::Gac {
                iterations: self.consensus.gac_iterations,
            }
        };
        Network::new(self.topology.clone(), mode)
    }

    pub fn initial_thetas(&self) -> Vec<ThetaLocal> {
        (0..self.topology.agents())
            .map(|i| self.initial_model.theta(&self.mpc.structure, self.topology.degree(i)))
            .collect()
    }

    /// Initial parameters equal to the true dynamics, for sanity runs.
    pub fn with_exact_model(mut self) -> Self {
        self.initial_model.a = self.dynamics.a.clone();
        self.initial_model.a_neighbor = self.dynamics.a_neighbor.clone();
        self.initial_model.b = self.dynamics.b.clone();
        self
    }

    pub fn without_noise(mut self) -> Self {
        let n = self.mpc.structure.state_dim;
        self.dynamics.noise = NoiseSpec::none(n);
        self
    }

    pub fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_column_slice(&self.mpc.input_lb),
            DVector::from_column_slice(&self.mpc.input_ub),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_describe_the_benchmark() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.topology, Topology::chain(3).unwrap());
        assert_eq!(c.mpc.horizon, 10);
        assert_eq!(c.mpc.gamma, 0.9);
        assert_eq!(c.learner.samples, 15);
        assert_eq!(c.learner.buffer, 100);
        assert_eq!(c.admm.iterations, 100);
        assert_eq!(c.consensus.gac_iterations, 100);
        assert_eq!(c.learner.alpha_second_order, 1e-4);
        assert_eq!(c.learner.alpha_first_order, 1e-8);
        assert_eq!(c.cost.violation_weight, vec![500.0, 500.0]);
        assert_eq!(c.mpc.state_lb, vec![0.0, -1.0]);
        assert_eq!(c.mpc.input_ub, vec![1.0]);
        let th = c.initial_thetas();
        assert_eq!(th[1].a_neighbor.len(), 2);
        assert_eq!(th[0].flatten().len(), 21);
    }

    #[test]
    fn toml_round_trip_and_partial_override() {
        let c = ExperimentConfig::default();
        let s = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), c);
        let partial = "steps = 50\nalgorithm = \"cso\"\n[learner]\nsamples = 5\n";
        let p = ExperimentConfig::from_toml_str(partial).unwrap();
        assert_eq!(p.steps, 50);
        assert_eq!(p.algorithm, Algorithm::Cso);
        assert_eq!(p.learner.samples, 5);
        assert_eq!(p.learner.buffer, 100);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml_str("[learner]\nsamples = 200\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[admm]\nrho = -1.0\niterations = 5\nwarm_start = true\n").is_err());
        assert!(ExperimentConfig::from_toml_str("unknown_field = 1\n").is_err());
    }

    #[test]
    fn alpha_follows_algorithm_family() {
        let mut c = ExperimentConfig::default();
        c.algorithm = Algorithm::Dfo;
        assert_eq!(c.alpha(), 1e-8);
        c.algorithm = Algorithm::Cso;
        assert_eq!(c.alpha(), 1e-4);
        c.learner.alpha = Some(1e-6);
        assert_eq!(c.alpha(), 1e-6);
    }
}
