//! Line-delimited experiment logs.
//!
//! The first line is `{"config": ...}`, then one flat JSON object per
//! completed epoch, and, once the run has ended, `{"summary": ...}`.
//! Each line is flushed as it is written, so an interrupted run keeps
//! every completed epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use latentloop_core::trainer::{EpochRecord, ExperimentLog, RunSummary, SessionConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Line { line: usize, detail: String },
    #[error("log has no config line")]
    MissingConfig,
}

#[derive(Serialize, Deserialize)]
struct ConfigLine<C> {
    config: C,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine<S> {
    summary: S,
}

pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    /// Creates the file and writes the config line.
    pub fn create(path: &Path, config: &SessionConfig) -> Result<Self, LogError> {
        let mut w = LogWriter { out: BufWriter::new(File::create(path)?) };
        w.line(&ConfigLine { config })?;
        Ok(w)
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<(), LogError> {
        serde_json::to_writer(&mut self.out, value).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn record(&mut self, record: &EpochRecord) -> Result<(), LogError> {
        self.line(record)
    }

    pub fn summary(&mut self, summary: &RunSummary) -> Result<(), LogError> {
        self.line(&SummaryLine { summary })
    }
}

pub fn to_jsonl(log: &ExperimentLog) -> String {
    let mut out = serde_json::to_string(&ConfigLine { config: &log.config }).expect("config serializes");
    out.push('\n');
    for r in &log.records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    if let Some(s) = &log.summary {
        out.push_str(&serde_json::to_string(&SummaryLine { summary: s }).expect("summary serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<ExperimentLog, LogError> {
    let mut log: Option<ExperimentLog> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |e: serde_json::Error| LogError::Line { line, detail: e.to_string() };
        let value: serde_json::Value = serde_json::from_str(raw).map_err(err)?;
        match (&mut log, value.get("config"), value.get("summary")) {
            (None, Some(_), _) => {
                let c: ConfigLine<SessionConfig> = serde_json::from_value(value).map_err(err)?;
                log = Some(ExperimentLog::new(c.config));
            }
            (None, None, _) => return Err(LogError::MissingConfig),
            (Some(l), None, Some(_)) => {
                let s: SummaryLine<RunSummary> = serde_json::from_value(value).map_err(err)?;
                l.summary = Some(s.summary);
            }
            (Some(l), None, None) => {
                let r: EpochRecord = serde_json::from_str(raw).map_err(err)?;
                if l.records.last().is_some_and(|p| p.epoch >= r.epoch) {
                    return Err(LogError::Line { line, detail: format!("epoch {} out of order", r.epoch) });
                }
                l.records.push(r);
            }
            (Some(_), Some(_), _) => return Err(LogError::Line { line, detail: "second config line".into() }),
        }
    }
    log.ok_or(LogError::MissingConfig)
}

pub fn read_log(path: &Path) -> Result<ExperimentLog, LogError> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}
