//! The decision process: states, branch values, and the search drivers.

mod config;
mod engine;
mod state;
mod value;

pub use config::{BranchConfig, ConfigError, Gain, Gate, Mode};
pub use engine::{bvs_search, linear_retry, Engine, EnvFactory, TokenCounter, WhitespaceCounter};
pub use state::{State, Step, TerminalKind, TerminalStatus};
pub use value::{branch_posterior, branch_value, combine, info_gain, info_gain_decomposed, BranchMetrics, BranchSet, GainWeights};
