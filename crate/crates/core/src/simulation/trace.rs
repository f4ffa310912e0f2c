//! Structured trace of a training run.
//!
//! A trace file is newline-delimited JSON: one header record, one record
//! per executed phase, and an end record written when the run finishes.
//! Records carry digests rather than texts, which is enough to diff two
//! runs and to check a replay.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::CallDigest;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::ids::{DomainId, ItemId, UserId};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    SampleNegative,
    Infer,
    UpdateSeparated,
    Fuse,
    UpdateItems,
    Broadcast,
    Resegment,
}

/// Which memory a write touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryTarget {
    Separated,
    Fused,
    Item,
    Shared,
    Groups,
}

/// One memory write, identified by owner and domain, with digests of the
/// text before and after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryDiff {
    pub target: MemoryTarget,
    pub owner: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainId>,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub config_digest: String,
    pub dataset_digest: String,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the training interaction.
    pub step: usize,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<UserId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<ItemId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub calls: Vec<CallDigest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diffs: Vec<MemoryDiff>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEnd {
    pub steps: usize,
    pub records: usize,
    pub degraded: usize,
    pub final_snapshot_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum TraceRecord {
    Header(TraceHeader),
    Step(StepRecord),
    End(TraceEnd),
}

impl TraceRecord {
    pub fn as_step(&self) -> Option<&StepRecord> {
        match self {
            TraceRecord::Step(s) => Some(s),
            _ => None,
        }
    }
}

/// Digest over the step records of a trace, ignoring header and end.
pub fn steps_digest<'a>(records: impl IntoIterator<Item = &'a TraceRecord>) -> String {
    let steps: Vec<&StepRecord> = records.into_iter().filter_map(TraceRecord::as_step).collect();
    json_digest(&steps)
}

pub trait TraceSink {
    fn record(&mut self, record: TraceRecord) -> Result<()>;
}

impl TraceSink for Vec<TraceRecord> {
    fn record(&mut self, record: TraceRecord) -> Result<()> {
        self.push(record);
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _: TraceRecord) -> Result<()> {
        Ok(())
    }
}

/// Appends records to a trace file, flushing after each one so an
/// interrupted run leaves a readable prefix.
pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }
}

impl TraceSink for TraceWriter {
    fn record(&mut self, record: TraceRecord) -> Result<()> {
        let line = serde_json::to_string(&record).expect("trace records serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a trace file. A line that does not parse (for example a record
/// cut off by a crash) is a replay error.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| {
            Error::Replay(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(records)
}

/// Rewrites a trace file keeping the header and the records of steps
/// `<= processed`. Used when resuming from a snapshot.
pub fn truncate_trace(path: &Path, processed: usize) -> Result<()> {
    let kept: Vec<TraceRecord> = read_trace(path)?
        .into_iter()
        .filter(|r| match r {
            TraceRecord::Header(_) => true,
            TraceRecord::Step(s) => s.step <= processed,
            TraceRecord::End(_) => false,
        })
        .collect();
    let mut writer = TraceWriter::create(path)?;
    for r in kept {
        writer.record(r)?;
    }
    Ok(())
}
