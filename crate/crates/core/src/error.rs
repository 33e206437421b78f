use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology is not connected ({components} components over {agents} agents)")]
    Disconnected { agents: usize, components: usize },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("agent {agent}: action component {component} = {value} outside input bounds [{lo}, {hi}]")]
    InfeasibleAction {
        agent: usize,
        component: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("QP is unbounded: {0}")]
    Unbounded(String),

    #[error(
        "QP solver did not converge after {iterations} iterations \
         (primal {primal:.3e}, dual {dual:.3e}, gap {gap:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        primal: f64,
        dual: f64,
        gap: f64,
    },

    #[error("agent {agent}: local subproblem failed: {source}")]
    LocalSubproblem {
        agent: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("KKT residual {residual:.3e} exceeds tolerance {tolerance:.1e} ({what})")]
    Kkt {
        what: &'static str,
        residual: f64,
        tolerance: f64,
    },

    #[error("{what} is numerically singular (condition {condition:.3e})")]
    SingularUpdate { what: &'static str, condition: f64 },

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}
