//! Line-delimited JSON trace of runs.
//!
//! Each line is one self-describing document carrying a schema version. A
//! record is written with a single `write_all` of the full line including its
//! newline; a trailing fragment without a newline is treated as an
//! interrupted write and ignored by the reader.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{QueryFailure, RunRecord};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEntry {
    Run(RunRecord),
    Failure(QueryFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub schema_version: u32,
    #[serde(flatten)]
    pub entry: TraceEntry,
}

impl TraceLine {
    pub fn new(entry: TraceEntry) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            entry,
        }
    }

    pub fn from_result(r: Result<RunRecord, QueryFailure>) -> Self {
        Self::new(match r {
            Ok(rec) => TraceEntry::Run(rec),
            Err(f) => TraceEntry::Failure(f),
        })
    }

    pub fn run(&self) -> Option<&RunRecord> {
        match &self.entry {
            TraceEntry::Run(r) => Some(r),
            TraceEntry::Failure(_) => None,
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("trace serialization is infallible");
        s.push('\n');
        s
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace line {line}: schema version {found} follows {previous}")]
    SchemaRegression {
        line: usize,
        found: u32,
        previous: u32,
    },
    #[error("unsupported trace schema version {found} on line {line}")]
    UnsupportedVersion { line: usize, found: u32 },
}

/// Serializes appends from any number of threads.
pub struct TraceWriter {
    file: Mutex<File>,
}

impl TraceWriter {
    pub fn open(path: &Path) -> Result<Self, TraceError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, line: &TraceLine) -> Result<(), TraceError> {
        let bytes = line.to_line();
        let mut f = self.file.lock().expect("trace writer poisoned");
        f.write_all(bytes.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceContents {
    pub lines: Vec<TraceLine>,
    /// A final fragment without a newline was skipped.
    pub incomplete_tail: bool,
}

impl TraceContents {
    pub fn runs(&self) -> impl Iterator<Item = &RunRecord> {
        self.lines.iter().filter_map(TraceLine::run)
    }
}

pub fn parse_trace(text: &str) -> Result<TraceContents, TraceError> {
    let mut segments: Vec<&str> = text.split('\n').collect();
    let tail = segments.pop().unwrap_or_default();
    let mut lines = Vec::new();
    let mut previous = 0;
    for (i, seg) in segments.into_iter().enumerate() {
        let line_no = i + 1;
        if seg.trim().is_empty() {
            continue;
        }
        let line: TraceLine = serde_json::from_str(seg).map_err(|source| TraceError::Parse {
            line: line_no,
            source,
        })?;
        if line.schema_version > TRACE_SCHEMA_VERSION || line.schema_version == 0 {
            return Err(TraceError::UnsupportedVersion {
                line: line_no,
                found: line.schema_version,
            });
        }
        if line.schema_version < previous {
            return Err(TraceError::SchemaRegression {
                line: line_no,
                found: line.schema_version,
                previous,
            });
        }
        previous = line.schema_version;
        lines.push(line);
    }
    Ok(TraceContents {
        lines,
        incomplete_tail: !tail.trim().is_empty(),
    })
}

pub fn read_trace(path: &Path) -> Result<TraceContents, TraceError> {
    parse_trace(&std::fs::read_to_string(path)?)
}
