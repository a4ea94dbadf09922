use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::MetricReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mdice: f64,
    pub val_miou: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Config { text: String },
    Epoch(EpochRecord),
    PhaseEnd { phase: u8, epochs: usize, best_epoch: usize, best_mdice: f64 },
    Diverged { phase: u8, epoch: usize },
    Report { source: String, report: Box<MetricReport> },
}

/// Append-only run history; each entry is also written as one JSON line when
/// a file is attached.
#[derive(Debug, Default)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
    sink: Option<File>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog::default()
    }

    pub fn with_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RunLog { entries: Vec::new(), sink: Some(f) })
    }

    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(f) = &mut self.sink {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            f.flush()?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Epoch(r) => Some(r),
            _ => None,
        })
    }

    pub fn losses(&self, phase: u8) -> Vec<f64> {
        self.epochs().filter(|r| r.phase == phase).map(|r| r.train_loss).collect()
    }

    /// Entries with wall-clock times zeroed: the part of the log that a
    /// seeded single-threaded run determines.
    pub fn deterministic(&self) -> Vec<LogEntry> {
        self.entries
            .iter()
            .cloned()
            .map(|e| match e {
                LogEntry::Epoch(mut r) => {
                    r.seconds = 0.0;
                    LogEntry::Epoch(r)
                }
                other => other,
            })
            .collect()
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<LogEntry>> {
        let text = std::fs::read_to_string(path)?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = RunLog::with_file(&path).unwrap();
        log.push(LogEntry::Config { text: "lr = 1".into() }).unwrap();
        let rec = EpochRecord { phase: 1, epoch: 0, train_loss: 0.5, val_mdice: 0.25, val_miou: 0.125, seconds: 1.5 };
        log.push(LogEntry::Epoch(rec)).unwrap();
        assert_eq!(RunLog::read_jsonl(&path).unwrap(), log.entries);
        assert_eq!(log.losses(1), vec![0.5]);
        assert!(matches!(&log.deterministic()[1], LogEntry::Epoch(r) if r.seconds == 0.0));
    }
}
