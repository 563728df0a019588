//! Newline-delimited JSON wire protocol between the dispatcher and workers.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub type TaskId = u64;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One protocol record. The `type` field selects the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    /// Worker announces itself and is ready for a task.
    Hello,
    /// Dispatcher assigns a task. `epochs = 0` asks for a latency
    /// measurement only.
    Task {
        task_id: TaskId,
        kernel_ir: String,
        epochs: u32,
    },
    /// Accuracy after `epoch` completed epochs.
    Progress {
        task_id: TaskId,
        epoch: u32,
        accuracy: f64,
    },
    /// Dispatcher stops a task early.
    Prune { task_id: TaskId, reason: String },
    /// Final outcome. A `reason` marks a failed task.
    Result {
        task_id: TaskId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        accuracy: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latency_ms: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Bye,
}

impl Message {
    pub fn encode(&self) -> String {
        let mut s = serde_json::to_string(self).expect("messages serialize");
        s.push('\n');
        s
    }

    pub fn decode(line: &str) -> Result<Message, ProtocolError> {
        serde_json::from_str(line.trim()).map_err(|e| ProtocolError::Malformed(format!("{e}: {}", line.trim())))
    }
}

pub fn send(w: &mut impl Write, m: &Message) -> Result<(), ProtocolError> {
    w.write_all(m.encode().as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Next message, `None` at end of stream. Blank lines are skipped.
pub fn recv(r: &mut impl BufRead) -> Result<Option<Message>, ProtocolError> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            return Message::decode(&line).map(Some);
        }
    }
}
