use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::analysis::LogRecord;

use super::{SessionConfig, SessionEvent};

/// Exported session log: config snapshot, full event stream, and records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogDocument {
    pub session_id: String,
    /// True while the session is still running.
    pub partial: bool,
    pub config: SessionConfig,
    pub events: Vec<SessionEvent>,
    pub records: Vec<LogRecord>,
}

impl LogDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log document serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Durable destination for session events. `append` must not return
/// before the batch is persisted.
pub trait EventSink: Send {
    fn append(&mut self, events: &[SessionEvent]) -> io::Result<()>;
}

/// Appends one JSON line per event and syncs after every batch.
#[derive(Debug)]
pub struct JsonlSink {
    file: File,
}

impl JsonlSink {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(JsonlSink { file })
    }

    pub fn read(path: impl AsRef<Path>) -> io::Result<Vec<SessionEvent>> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            );
        }
        Ok(out)
    }
}

impl EventSink for JsonlSink {
    fn append(&mut self, events: &[SessionEvent]) -> io::Result<()> {
        let mut buf = Vec::new();
        for e in events {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        self.file.write_all(&buf)?;
        self.file.sync_data()
    }
}

/// In-memory sink, shareable with the test that inspects it.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    pub events: Arc<Mutex<Vec<SessionEvent>>>,
}

impl EventSink for MemorySink {
    fn append(&mut self, events: &[SessionEvent]) -> io::Result<()> {
        self.events
            .lock()
            .map_err(|_| io::Error::other("sink poisoned"))?
            .extend_from_slice(events);
        Ok(())
    }
}
