//! Runs the fitting protocol inside a run directory, checkpointing before
//! every stage so that a crash or a listener timeout can be resumed.
//!
//! Layout: `run.json` (configuration), `log.jsonl` (run log), `state.bin`
//! (protocol checkpoint), `reward.ckpt` and `policy.ckpt` (final models),
//! `actions.json`, `queue.json` and the exported artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use prefcomp_core::action::CrAdjustment;
use prefcomp_core::protocol::{evaluate_ab, EvalTally, Listener, Protocol, ProtocolState, SimListener, Stage};
use prefcomp_core::RunRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{save_policy, save_reward};
use crate::config::{ListenerSource, RunConfig};
use crate::error::{Error, IoContext, Result};
use crate::export::export_run_artifacts;
use crate::runlog::{LogEvent, RunLog};

pub const RUN_CONFIG: &str = "run.json";
pub const LOG: &str = "log.jsonl";
pub const STATE: &str = "state.bin";
pub const REWARD_CKPT: &str = "reward.ckpt";
pub const POLICY_CKPT: &str = "policy.ckpt";
pub const ACTIONS: &str = "actions.json";
pub const QUEUE: &str = "queue.json";

const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SavedState {
    version: u32,
    config_hash: String,
    log_len: usize,
    state: ProtocolState,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed(EvalTally),
    /// The listener stopped answering; `resume` continues from `stage`.
    Suspended { stage: Stage, reason: String },
}

pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub protocol: Protocol,
    pub log: RunLog,
}

/// The configured simulated listener.
pub fn simulated_listener(cfg: &RunConfig) -> Result<SimListener> {
    let seed = match cfg.listener {
        ListenerSource::Simulated { seed, .. } => seed,
        ListenerSource::Service { .. } => return Err(Error::Config("the listener is not simulated".into())),
    };
    Ok(SimListener::new(cfg.profile()?, seed)?)
}

fn new_protocol(cfg: &RunConfig) -> Result<Protocol> {
    Ok(Protocol::new(cfg.protocol.clone(), cfg.environment()?, &cfg.agent, &cfg.reward, cfg.seed)?)
}

impl Run {
    /// Starts a fresh run in `dir`, which must not already hold one.
    pub fn create(cfg: RunConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(dir).at(dir)?;
        if dir.join(RUN_CONFIG).exists() {
            return Err(Error::Config(format!("{} already holds a run; use resume", dir.display())));
        }
        cfg.save(&dir.join(RUN_CONFIG))?;
        let protocol = new_protocol(&cfg)?;
        let dictionary: Vec<_> = protocol.env.action_space().dictionary().into_iter().enumerate().map(|(i, a)| json!({ "action": i, "adjustment": a })).collect();
        let actions = dir.join(ACTIONS);
        fs::write(&actions, serde_json::to_string_pretty(&dictionary).expect("dictionary serializes") + "\n").at(&actions)?;
        let mut log = RunLog::create(&dir.join(LOG))?;
        log.append(protocol.progress(), LogEvent::RunStarted { config_hash: cfg.hash(), seed: cfg.seed })?;
        Ok(Self { cfg, dir: dir.to_path_buf(), protocol, log })
    }

    /// Reopens a run at its last checkpoint, discarding log records written
    /// after it.
    pub fn open(dir: &Path) -> Result<Self> {
        Self::open_inner(dir, true)
    }

    /// Loads a run for inspection or evaluation without marking it resumed.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::open_inner(dir, false)
    }

    fn open_inner(dir: &Path, resume: bool) -> Result<Self> {
        let cfg = RunConfig::load(&dir.join(RUN_CONFIG))?;
        cfg.validate()?;
        let mut log = RunLog::open(&dir.join(LOG))?;
        let state_path = dir.join(STATE);
        let protocol = if state_path.exists() {
            let bytes = fs::read(&state_path).at(&state_path)?;
            let saved: SavedState = bincode::deserialize(&bytes)
                .map_err(|e| Error::Checkpoint { path: state_path.clone(), msg: e.to_string() })?;
            if saved.version != STATE_VERSION || saved.config_hash != cfg.hash() {
                return Err(Error::Checkpoint { path: state_path, msg: "written by a different version or configuration".into() });
            }
            if resume && saved.state.stage != Stage::Done {
                log.truncate(saved.log_len)?;
            }
            Protocol::resume(cfg.protocol.clone(), cfg.environment()?, saved.state)?
        } else {
            if resume {
                log.truncate(1)?;
            }
            new_protocol(&cfg)?
        };
        if resume && !protocol.is_done() {
            log.append(protocol.progress(), LogEvent::Resumed { stage: protocol.state.stage })?;
        }
        Ok(Self { cfg, dir: dir.to_path_buf(), protocol, log })
    }

    pub fn stage(&self) -> Stage {
        self.protocol.state.stage
    }

    fn save_state(&mut self) -> Result<()> {
        let saved = SavedState {
            version: STATE_VERSION,
            config_hash: self.cfg.hash(),
            log_len: self.log.len(),
            state: self.protocol.checkpoint().clone(),
        };
        let bytes = bincode::serialize(&saved).map_err(|e| Error::Checkpoint { path: self.dir.join(STATE), msg: e.to_string() })?;
        let path = self.dir.join(STATE);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).at(&tmp)?;
        fs::rename(&tmp, &path).at(&path)
    }

    /// Executes one stage after checkpointing. Listener failures leave the
    /// checkpoint in place and surface as `Ok(Some(reason))`.
    pub fn step<L: Listener + ?Sized>(&mut self, listener: &mut L) -> Result<Option<String>> {
        self.save_state()?;
        match self.protocol.advance(listener, &mut self.log) {
            Ok(_) => Ok(None),
            Err(e) if e.is_listener() => Ok(Some(e.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    /// Runs every remaining stage, then writes models and artifacts.
    pub fn execute<L: Listener + ?Sized>(&mut self, listener: &mut L) -> Result<RunOutcome> {
        while !self.protocol.is_done() {
            if let Some(reason) = self.step(listener)? {
                let stage = self.stage();
                self.log.append(self.protocol.progress(), LogEvent::Suspended { stage, reason: reason.clone() })?;
                return Ok(RunOutcome::Suspended { stage, reason });
            }
        }
        self.finish()
    }

    fn finish(&mut self) -> Result<RunOutcome> {
        if !matches!(self.log.records().last().map(|r| &r.event), Some(LogEvent::Completed)) {
            self.log.append(self.protocol.progress(), LogEvent::Completed)?;
        }
        self.save_state()?;
        save_reward(&self.dir.join(REWARD_CKPT), &self.protocol.state.predictor)?;
        save_policy(&self.dir.join(POLICY_CKPT), &self.protocol.state.trainer.agent)?;
        let queue: Vec<_> = self.protocol.env.queue().iter().map(|r| json!({ "clip_id": r.clip_id, "adjustment": r.adjustment, "ratios": r.ratios })).collect();
        let qp = self.dir.join(QUEUE);
        fs::write(&qp, serde_json::to_string_pretty(&queue).expect("queue serializes") + "\n").at(&qp)?;
        export_run_artifacts(self.log.records(), &self.cfg, &self.dir)?;
        let tally = self.protocol.state.tally.ok_or_else(|| Error::Config("run finished without an evaluation".into()))?;
        Ok(RunOutcome::Completed(tally))
    }

    /// Re-runs the blinded comparison of the finished policy against the
    /// reference fitting with `n_pairs` fresh sentences.
    pub fn evaluate<L: Listener + ?Sized>(&mut self, n_pairs: usize, listener: &mut L, seed: u64) -> Result<(EvalTally, CrAdjustment)> {
        if !self.protocol.is_done() {
            return Err(Error::Config("the run has not finished".into()));
        }
        let action = match self.protocol.state.personalized_action {
            Some(a) => a,
            None => self.protocol.personalized_action()?,
        };
        let personalized = self.protocol.env.full_adjustment(action)?;
        let reference = CrAdjustment::identity(personalized.len());
        let first = self.protocol.state.next_query_id;
        let mut rng = RunRng::seed_from_u64(seed);
        let (tally, ..) = evaluate_ab(&mut self.protocol.env, &personalized, &reference, n_pairs, first, listener, &mut rng)?;
        Ok((tally, personalized))
    }
}

/// Starts a run, or continues the one already in `dir`.
pub fn run_or_resume<L: Listener + ?Sized>(cfg: Option<RunConfig>, dir: &Path, listener: &mut L) -> Result<RunOutcome> {
    let mut run = match cfg {
        Some(cfg) if !dir.join(RUN_CONFIG).exists() => Run::create(cfg, dir)?,
        _ => Run::open(dir)?,
    };
    run.execute(listener)
}
