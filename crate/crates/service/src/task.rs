//! Work items and stream chunks flowing broker -> sequence worker -> client.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// Service priority level; 0 is the most urgent.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct Priority(pub u8);

impl Priority {
    /// Parses a priority from a number or, with exactly three configured
    /// levels, the names `high` / `normal` / `low`.
    pub fn parse(text: &str, levels: u8) -> Result<Priority> {
        let p = match (text, levels) {
            ("high", 3) => 0,
            ("normal", 3) => 1,
            ("low", 3) => 2,
            _ => text.parse::<u8>().map_err(|_| {
                ServiceError::InvalidRequest(format!("unknown priority `{text}`"))
            })?,
        };
        if p >= levels {
            return Err(ServiceError::InvalidRequest(format!(
                "priority {p} out of range (levels: 0..{levels})"
            )));
        }
        Ok(Priority(p))
    }

    pub fn all(levels: u8) -> Vec<Priority> {
        (0..levels).map(Priority).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StopCondition {
    #[default]
    None,
    /// Finish as soon as the generator emits this token id.
    Token(u32),
}

/// One inference request as queued on the broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTask {
    pub task_id: String,
    pub model_name: String,
    pub priority: Priority,
    pub prompt: String,
    pub max_new_tokens: u64,
    pub stop_condition: StopCondition,
    /// Service-clock seconds when the endpoint accepted the request.
    pub submit_time: f64,
}

impl InferenceTask {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(ServiceError::InvalidRequest(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
}

/// One streamed token of a response. Indices are contiguous from 0 and
/// exactly one chunk per task carries a `finish_reason`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamChunk {
    pub task_id: String,
    pub token_text: String,
    pub index: u64,
    pub finish_reason: Option<FinishReason>,
    /// Virtual time at which the token left the pipeline (terminal chunks
    /// reuse the final token's time).
    pub virtual_time: f64,
}

/// Events delivered on a task's response channel.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskEvent {
    Chunk(StreamChunk),
    /// The task could not be admitted (unknown model is rejected earlier,
    /// at submit).
    Rejected { task_id: String, reason: String },
}

pub type TaskEventSender = tokio::sync::mpsc::UnboundedSender<TaskEvent>;
pub type TaskEventReceiver = tokio::sync::mpsc::UnboundedReceiver<TaskEvent>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priority_names_map_on_three_levels() {
        assert_eq!(Priority::parse("high", 3).unwrap(), Priority(0));
        assert_eq!(Priority::parse("normal", 3).unwrap(), Priority(1));
        assert_eq!(Priority::parse("low", 3).unwrap(), Priority(2));
        assert_eq!(Priority::parse("1", 4).unwrap(), Priority(1));
        assert!(Priority::parse("high", 2).is_err());
        assert!(Priority::parse("7", 3).is_err());
    }
}
