//! Execute-feedback-replan reasoning loop.
//!
//! A policy proposes actions (free text with at most one code block), a
//! sandbox executes them and returns structured feedback, and the search
//! layer decides whether to commit, repair, or abandon each step. Runs are
//! recorded as trajectories that export to the special-token transcript
//! format.

pub mod feedback;
pub mod policy;
pub mod protocol;
pub mod sandbox;
pub mod search;
pub mod trajectory;
pub mod transcript;

#[cfg(feature = "cli")]
pub mod cli;
