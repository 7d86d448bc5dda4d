//! Rendering of problem + history into the dataset transcript shape.
//!
//! The same bytes serve as the prompt for remote generators and as the
//! exported training text, so a model trained on exported data sees at
//! inference exactly what it was trained on:
//!
//! ```text
//! {problem}
//! <|im_start|>think
//! {action text, ending in <|execute_end|>}
//! <|feedback|>
//! {feedback body}<|feedback_end|>
//! {next action text}...
//! ```

use crate::feedback::Feedback;
use crate::protocol::{FEEDBACK, FEEDBACK_END, THINK};

/// Appends one (action, feedback) pair. Actions without an execute block get
/// no feedback block.
pub fn push_step(out: &mut String, action_text: &str, has_code: bool, feedback: &Feedback) {
    out.push_str(action_text);
    if has_code {
        out.push('\n');
        out.push_str(FEEDBACK);
        out.push('\n');
        out.push_str(&feedback.transcript_body());
        out.push_str(FEEDBACK_END);
        out.push('\n');
    } else if !action_text.is_empty() && !action_text.ends_with('\n') {
        out.push('\n');
    }
}

pub fn header(problem: &str) -> String {
    let mut out = String::with_capacity(problem.len() + THINK.len() + 2);
    out.push_str(problem);
    if !problem.is_empty() && !problem.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(THINK);
    out.push('\n');
    out
}
