//! Append-only run log: one JSON record per line, synced to disk before the
//! next protocol step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use prefcomp_core::action::CrAdjustment;
use prefcomp_core::agent::EpisodeMetrics;
use prefcomp_core::env::Source;
use prefcomp_core::protocol::{EvalTally, Phase, Progress, ProtocolSink, Query, Side, Stage};
use prefcomp_core::reward::{Choice, LossHistory};
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub pair: u64,
    pub source: Source,
    pub adj_a: CrAdjustment,
    pub adj_b: CrAdjustment,
    pub choice: Choice,
    /// False for NEITHER, which never enters the dataset.
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    RunStarted { config_hash: String, seed: u64 },
    Labels { phase: Phase, pairs: Vec<LabelRecord> },
    RewardTrained { history: LossHistory },
    Finetuned { round: usize, losses: Vec<f64> },
    Episodes { metrics: Vec<EpisodeMetrics> },
    Evaluated { tally: EvalTally, personalized: CrAdjustment, sides: Vec<Side> },
    Suspended { stage: Stage, reason: String },
    Resumed { stage: Stage },
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub at: Progress,
    #[serde(flatten)]
    pub event: LogEvent,
}

pub struct RunLog {
    path: PathBuf,
    file: File,
    records: Vec<LogRecord>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).at(path)?;
        Ok(Self { path: path.to_path_buf(), file, records: Vec::new() })
    }

    /// Opens an existing log, dropping a torn final line left by a crash.
    pub fn open(path: &Path) -> Result<Self> {
        let records = read_records(path)?;
        let mut log = Self { path: path.to_path_buf(), file: File::create(path).at(path)?, records: Vec::new() };
        log.rewrite(records)?;
        Ok(log)
    }

    fn rewrite(&mut self, records: Vec<LogRecord>) -> Result<()> {
        let tmp = self.path.with_extension("tmp");
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).expect("log records serialize"));
            text.push('\n');
        }
        fs::write(&tmp, text).at(&tmp)?;
        fs::rename(&tmp, &self.path).at(&self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path).at(&self.path)?;
        self.records = records;
        Ok(())
    }

    /// Keeps only the first `n` records.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if n < self.records.len() {
            let keep = self.records[..n].to_vec();
            self.rewrite(keep)?;
        }
        Ok(())
    }

    pub fn append(&mut self, at: Progress, event: LogEvent) -> Result<()> {
        let rec = LogRecord { seq: self.records.len() as u64, timestamp_ms: now_ms(), at, event };
        let mut line = serde_json::to_string(&rec).expect("log records serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes()).at(&self.path)?;
        self.file.sync_data().at(&self.path)?;
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parses every complete record; a malformed last line is ignored.
pub fn read_records(path: &Path) -> Result<Vec<LogRecord>> {
    let lines: Vec<String> = BufReader::new(File::open(path).at(path)?).lines().collect::<std::io::Result<_>>().at(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        match serde_json::from_str(l) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(e).at(path),
        }
    }
    Ok(out)
}

impl ProtocolSink for RunLog {
    fn labels(&mut self, at: &Progress, phase: Phase, queries: &[Query], choices: &[Choice]) -> prefcomp_core::Result<()> {
        let pairs = queries
            .iter()
            .zip(choices)
            .map(|(q, &choice)| LabelRecord {
                pair: q.id,
                source: q.source,
                adj_a: q.adj_a.clone(),
                adj_b: q.adj_b.clone(),
                choice,
                included: choice.preference().is_some(),
            })
            .collect();
        self.sink(at, LogEvent::Labels { phase, pairs })
    }

    fn reward_trained(&mut self, at: &Progress, history: &LossHistory) -> prefcomp_core::Result<()> {
        self.sink(at, LogEvent::RewardTrained { history: history.clone() })
    }

    fn finetuned(&mut self, at: &Progress, round: usize, losses: &[f64]) -> prefcomp_core::Result<()> {
        self.sink(at, LogEvent::Finetuned { round, losses: losses.to_vec() })
    }

    fn episodes(&mut self, at: &Progress, metrics: &[EpisodeMetrics]) -> prefcomp_core::Result<()> {
        self.sink(at, LogEvent::Episodes { metrics: metrics.to_vec() })
    }

    fn evaluated(&mut self, at: &Progress, tally: &EvalTally, personalized: &CrAdjustment, sides: &[Side]) -> prefcomp_core::Result<()> {
        self.sink(at, LogEvent::Evaluated { tally: *tally, personalized: personalized.clone(), sides: sides.to_vec() })
    }
}

impl RunLog {
    fn sink(&mut self, at: &Progress, event: LogEvent) -> prefcomp_core::Result<()> {
        self.append(*at, event).map_err(|e| prefcomp_core::Error::Sink(e.to_string()))
    }
}
