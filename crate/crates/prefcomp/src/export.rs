//! Run artifacts derived from the run log. Every file is a pure function of
//! the log records and the configuration, so re-exporting is idempotent.
//!
//! - `reward_loss.csv`: phase,round,epoch,train_loss,val_loss,lr. Initial
//!   training rows have phase `train`; fine-tuning rows have phase
//!   `finetune`, the batch index as epoch and empty val_loss and lr.
//! - `episode_metrics.csv`: episode,mean_reward,mean_q,epsilon,loss,held_out_max_q.
//! - `eval_tally.csv`: counts and percentages of the final A/B test.
//! - `config.json`: the run configuration with its hash.
//! - `dataset_manifest.csv`: one row per answered comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use prefcomp_core::action::CrAdjustment;
use prefcomp_core::protocol::Phase;
use prefcomp_core::reward::Choice;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::runlog::{LogEvent, LogRecord};

pub const REWARD_LOSS: &str = "reward_loss.csv";
pub const EPISODE_METRICS: &str = "episode_metrics.csv";
pub const EVAL_TALLY: &str = "eval_tally.csv";
pub const CONFIG: &str = "config.json";
pub const DATASET_MANIFEST: &str = "dataset_manifest.csv";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn adj(a: &CrAdjustment) -> String {
    a.0.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn choice(c: Choice) -> &'static str {
    match c {
        Choice::A => "A",
        Choice::B => "B",
        Choice::Equal => "EQUAL",
        Choice::Neither => "NEITHER",
    }
}

fn phase(p: Phase) -> (&'static str, String) {
    match p {
        Phase::Warmup => ("warmup", String::new()),
        Phase::Round(r) => ("round", r.to_string()),
        Phase::Evaluation => ("evaluation", String::new()),
    }
}

pub fn reward_loss_csv(records: &[LogRecord]) -> String {
    let mut out = String::from("phase,round,epoch,train_loss,val_loss,lr\n");
    for r in records {
        match &r.event {
            LogEvent::RewardTrained { history } => {
                for e in &history.epochs {
                    writeln!(out, "train,0,{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr).unwrap();
                }
            }
            LogEvent::Finetuned { round, losses } => {
                for (i, l) in losses.iter().enumerate() {
                    writeln!(out, "finetune,{round},{i},{l},,").unwrap();
                }
            }
            _ => {}
        }
    }
    out
}

pub fn episode_metrics_csv(records: &[LogRecord]) -> String {
    let mut out = String::from("episode,mean_reward,mean_q,epsilon,loss,held_out_max_q\n");
    for r in records {
        if let LogEvent::Episodes { metrics } = &r.event {
            for m in metrics {
                writeln!(out, "{},{},{},{},{},{}", m.episode, m.mean_reward, m.mean_q, m.epsilon, opt(m.loss), opt(m.held_out_max_q)).unwrap();
            }
        }
    }
    out
}

/// Empty (header only) until the evaluation has run.
pub fn eval_tally_csv(records: &[LogRecord]) -> String {
    let mut out = String::from("outcome,count,percent\n");
    let last = records.iter().rev().find_map(|r| match &r.event {
        LogEvent::Evaluated { tally, .. } => Some(*tally),
        _ => None,
    });
    if let Some(t) = last {
        let pct = t.percentages();
        for (name, count, p) in [
            ("personalized", t.personalized, pct[0]),
            ("reference", t.reference, pct[1]),
            ("equal", t.equal, pct[2]),
            ("neither", t.neither, pct[3]),
        ] {
            writeln!(out, "{name},{count},{p}").unwrap();
        }
        writeln!(out, "answered,{},{}", t.answered(), if t.answered() > 0 { 100.0 } else { 0.0 }).unwrap();
        writeln!(out, "presented,{},", t.n_pairs).unwrap();
    }
    out
}

pub fn dataset_manifest_csv(records: &[LogRecord]) -> String {
    let mut out = String::from("pair,phase,round,speech,noise,noise_offset,adj_a,adj_b,choice,included\n");
    for r in records {
        if let LogEvent::Labels { phase: p, pairs } = &r.event {
            let (name, round) = phase(*p);
            for l in pairs {
                writeln!(
                    out,
                    "{},{name},{round},{},{},{},{},{},{},{}",
                    l.pair,
                    l.source.speech,
                    l.source.noise.map(|n| n.to_string()).unwrap_or_default(),
                    l.source.noise_offset,
                    adj(&l.adj_a),
                    adj(&l.adj_b),
                    choice(l.choice),
                    l.included
                )
                .unwrap();
            }
        }
    }
    out
}

pub fn config_json(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(&json!({ "config_hash": cfg.hash(), "config": cfg })).expect("configuration serializes") + "\n"
}

/// Writes the five artifact files into `out_dir` and returns their paths.
pub fn export_run_artifacts(records: &[LogRecord], cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Config("run log is empty".into()));
    }
    fs::create_dir_all(out_dir).at(out_dir)?;
    let files = [
        (REWARD_LOSS, reward_loss_csv(records)),
        (EPISODE_METRICS, episode_metrics_csv(records)),
        (EVAL_TALLY, eval_tally_csv(records)),
        (CONFIG, config_json(cfg)),
        (DATASET_MANIFEST, dataset_manifest_csv(records)),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, text) in files {
        let path = out_dir.join(name);
        fs::write(&path, text).at(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
