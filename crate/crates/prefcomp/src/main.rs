use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use prefcomp::config::{ListenerSource, RunConfig, SessionPlan};
use prefcomp::corpus::write_synthetic_corpus;
use prefcomp::orchestrator::{simulated_listener, Run, RunOutcome, RUN_CONFIG};
use prefcomp::service::{router, PrefService, ServiceConfig, ServiceListener};
use prefcomp::wav::{read_wav, write_wav, WavFormat};
use prefcomp_core::action::build_action_space;
use prefcomp_core::drc::{compress, BandSpec, CompressionParams};
use prefcomp_core::fixtures::SyntheticCorpusConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "prefcomp", version, about = "Personalize hearing-aid compression from pairwise preferences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fitting protocol with the configured simulated listener.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for a new run.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue the run in this directory from its last checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the protocol against a built-in or custom simulated listener.
    Simulate {
        /// Built-in persona, 1 to 5.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
        user: Option<u8>,
        /// Profile JSON file for a custom listener.
        #[arg(long)]
        simulated_user: Option<PathBuf>,
        /// Base configuration; defaults to the desk-scale preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Repeat the blinded A/B comparison of a finished run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 60)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve preference queries over HTTP, optionally driving a run.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        side_seed: u64,
    },
    /// Compress a WAV file with explicit parameters.
    Compress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON document with the compression parameters.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        calibration_db: f64,
    },
    /// Write the synthetic speech and babble corpus as WAV files.
    FixtureCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 5)]
        sentences: usize,
    },
    /// Print the action dictionary as JSON.
    Actions {
        #[arg(long, default_value_t = 5)]
        bands: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,4")]
        scales: Vec<f64>,
    },
    /// Write a configuration template.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Use the small desk-scale preset.
        #[arg(long)]
        desk: bool,
    },
}

fn report(outcome: &RunOutcome, dir: &Path) {
    match outcome {
        RunOutcome::Completed(t) => println!(
            "{}",
            json!({ "status": "completed", "run": dir, "tally": t, "percentages": t.percentages() })
        ),
        RunOutcome::Suspended { stage, reason } => {
            println!("{}", json!({ "status": "suspended", "run": dir, "stage": stage, "reason": reason }))
        }
    }
}

fn execute(mut run: Run) -> anyhow::Result<()> {
    let mut listener = simulated_listener(&run.cfg).context("`run` drives simulated listeners; use `serve --run` for people")?;
    let outcome = run.execute(&mut listener)?;
    report(&outcome, &run.dir);
    Ok(())
}

fn serve(port: u16, run_dir: Option<PathBuf>, side_seed: u64) -> anyhow::Result<()> {
    let (plan, timeout, log) = match &run_dir {
        Some(dir) => {
            let cfg = RunConfig::load(&dir.join(RUN_CONFIG))?;
            let (plan, timeout) = match cfg.listener {
                ListenerSource::Service { timeout_s, plan } => (plan, timeout_s),
                ListenerSource::Simulated { .. } => (SessionPlan::default(), 3600),
            };
            (plan, timeout, Some(dir.join("feedback.jsonl")))
        }
        None => (SessionPlan::default(), 3600, None),
    };
    let service = PrefService::new(ServiceConfig { plan, side_seed, feedback_log: log })?;
    if let Some(dir) = run_dir {
        service.attach();
        let svc = Arc::clone(&service);
        std::thread::spawn(move || {
            let mut listener = ServiceListener { service: Arc::clone(&svc), timeout: Duration::from_secs(timeout) };
            loop {
                let outcome = Run::open(&dir).and_then(|mut r| r.execute(&mut listener));
                match outcome {
                    Ok(RunOutcome::Completed(t)) => {
                        svc.set_results(t);
                        report(&RunOutcome::Completed(t), &dir);
                        break;
                    }
                    Ok(o) => report(&o, &dir),
                    Err(e) => {
                        eprintln!("run failed: {e}");
                        break;
                    }
                }
            }
        });
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let addr = SocketAddr::from(([0, 0, 0, 0], port));
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, router(service)).await
    })?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config, out, resume } => match (config, resume) {
            (_, Some(dir)) => execute(Run::open(&dir)?),
            (Some(cfg), None) => execute(Run::create(RunConfig::load(&cfg)?, &out)?),
            (None, None) => bail!("pass --config for a new run or --resume for an existing one"),
        },
        Command::Simulate { user, simulated_user, config, out, seed } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::desk_scale(),
            };
            if user.is_none() && simulated_user.is_none() {
                bail!("pass --user or --simulated-user");
            }
            let listener_seed = match cfg.listener {
                ListenerSource::Simulated { seed, .. } => seed,
                ListenerSource::Service { .. } => 0,
            };
            cfg.listener = ListenerSource::Simulated { user: user.map(usize::from), profile: simulated_user, seed: listener_seed };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            execute(Run::create(cfg, &out)?)
        }
        Command::Evaluate { run, pairs, seed } => {
            let mut r = Run::load(&run)?;
            let mut listener = simulated_listener(&r.cfg)?;
            let (t, personalized) = r.evaluate(pairs, &mut listener, seed)?;
            println!("{}", json!({ "tally": t, "percentages": t.percentages(), "personalized_adjustment": personalized }));
            Ok(())
        }
        Command::Serve { port, run, side_seed } => serve(port, run, side_seed),
        Command::Compress { input, out, params, calibration_db } => {
            let p: CompressionParams = serde_json::from_str(&std::fs::read_to_string(&params)?)
                .with_context(|| format!("{}", params.display()))?;
            let clip = read_wav(&input)?;
            let y = compress(&clip, &BandSpec::default(), &p, calibration_db)?;
            write_wav(&out, &y, WavFormat::Float32)?;
            Ok(())
        }
        Command::FixtureCorpus { out, seed, speakers, sentences } => {
            let cfg = SyntheticCorpusConfig { n_speakers: speakers, sentences_per_speaker: sentences, ..Default::default() };
            let (s, n) = write_synthetic_corpus(&out, &cfg, seed)?;
            println!("{}", json!({ "speech_dir": s, "noise_dir": n }));
            Ok(())
        }
        Command::Actions { bands, scales } => {
            let space = build_action_space(bands, &scales)?;
            let dict: Vec<_> = space.dictionary().into_iter().enumerate().map(|(i, a)| json!({ "action": i, "adjustment": a })).collect();
            println!("{}", serde_json::to_string_pretty(&dict)?);
            Ok(())
        }
        Command::InitConfig { out, desk } => {
            let cfg = if desk { RunConfig::desk_scale() } else { RunConfig::default() };
            cfg.save(&out)?;
            Ok(())
        }
    }
}
