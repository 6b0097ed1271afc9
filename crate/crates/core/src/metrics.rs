//! Per-step scalar logs, one JSON object per line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub step: usize,
    pub values: BTreeMap<String, f64>,
}

impl StepRecord {
    pub fn new(phase: &str, step: usize) -> Self {
        Self { phase: phase.to_string(), step, values: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}

/// Appends records to a JSONL file.
pub struct MetricsLog {
    path: PathBuf,
    out: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| CoreError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: Some(BufWriter::new(f)) })
    }

    /// A log that drops everything.
    pub fn sink() -> Self {
        Self { path: PathBuf::new(), out: None }
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, rec)?;
            out.write_all(b"\n").map_err(|e| CoreError::io(&self.path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| CoreError::io(&self.path, e))?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Drops records at or after `step` for `phase`, so a resumed run does not
/// leave duplicates behind.
pub fn truncate_log(path: &Path, phase: &str, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<StepRecord> =
        read_log(path)?.into_iter().filter(|r| r.phase != phase || r.step < step).collect();
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in &kept {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_round_trip_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut log = MetricsLog::append(&path).unwrap();
        for s in 0..5 {
            log.write(&StepRecord::new("p", s).with("loss", 0.1 * s as f64)).unwrap();
        }
        log.flush().unwrap();
        drop(log);
        let recs = read_log(&path).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[3].get("loss"), Some(0.1 * 3.0));
        truncate_log(&path, "p", 2).unwrap();
        assert_eq!(read_log(&path).unwrap().len(), 2);
    }
}
