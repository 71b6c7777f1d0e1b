//! Acceptance checks. Prints one PASS or FAIL line per criterion and exits
//! non-zero if any fails.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use prefcomp::config::{ListenerSource, RunConfig};
use prefcomp::export::{DATASET_MANIFEST, EPISODE_METRICS, EVAL_TALLY, REWARD_LOSS};
use prefcomp::orchestrator::{simulated_listener, Run, RunOutcome};
use prefcomp::runlog::LogEvent;
use prefcomp_core::action::{apply_adjustment, build_action_space, CrAdjustment};
use prefcomp_core::agent::{q_target, Agent, AgentConfig, AgentEnv, AgentState, AgentTrainer, Transition};
use prefcomp_core::audio::AudioClip;
use prefcomp_core::drc::{compress, smooth_gain, BandSpec, CompressionParams};
use prefcomp_core::features::Observation;
use prefcomp_core::protocol::{Protocol, SimListener};
use prefcomp_core::reward::{pair_loss, pair_probability, preference_loss, Origin, Preference, PreferenceTriplet, RewardNetConfig, RewardPredictor};
use prefcomp_core::sim_user::builtin_profile;
use prefcomp_core::stats::ls_slope;
use prefcomp_core::RunRng;
use rand::{Rng, SeedableRng};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn all(parts: Vec<Check>) -> Check {
    let ok = parts.iter().all(Result::is_ok);
    let msg = parts.into_iter().map(|p| p.unwrap_or_else(|e| format!("[failed] {e}"))).collect::<Vec<_>>().join("; ");
    ensure(ok, msg)
}

fn adjustment_fixtures() -> Check {
    // (reference, personalized) compression ratios of five fitted listeners
    let rows: [([f64; 5], [f64; 5]); 5] = [
        ([1.1, 1.2, 1.3, 1.2, 1.3], [1.1, 1.2, 1.3, 4.8, 5.2]),
        ([1.1, 1.2, 1.3, 1.2, 1.2], [4.4, 1.2, 5.2, 1.2, 4.8]),
        ([1.1, 1.2, 1.3, 1.2, 1.4], [4.4, 1.2, 1.3, 4.8, 5.6]),
        ([1.1, 1.3, 1.3, 1.3, 1.3], [4.4, 1.3, 1.3, 5.2, 1.3]),
        ([1.1, 1.2, 1.3, 1.2, 1.4], [1.1, 1.2, 1.3, 4.8, 5.6]),
    ];
    let space = build_action_space(5, &[1.0, 4.0]).map_err(|e| e.to_string())?;
    let mut matched = 0;
    for (reference, personalized) in rows {
        let hit = space.dictionary().into_iter().any(|adj| apply_adjustment(&reference, &adj).map(|r| r == personalized).unwrap_or(false));
        matched += usize::from(hit);
    }
    let example = apply_adjustment(&[1.1, 1.2, 1.3, 1.2, 1.3], &CrAdjustment(vec![1.0, 1.0, 1.0, 4.0, 4.0])).map_err(|e| e.to_string())?;
    all(vec![
        ensure(matched == 5, format!("{matched}/5 personalized rows reproduced exactly")),
        ensure(example == [1.1, 1.2, 1.3, 4.8, 5.2], format!("worked example gives {example:?}")),
    ])
}

fn action_cardinality() -> Check {
    let mut parts = Vec::new();
    for (bands, want) in [(5, 32), (2, 4)] {
        let space = build_action_space(bands, &[1.0, 4.0]).map_err(|e| e.to_string())?;
        let round_trip = (0..space.len()).all(|i| space.adjustment(i).ok().and_then(|a| space.index_of(&a)) == Some(i));
        parts.push(ensure(space.len() == want && round_trip, format!("{bands} bands: {} actions, round trip {round_trip}", space.len())));
    }
    all(parts)
}

fn preference_analytics() -> Check {
    let ln2 = preference_loss(&[(0.3, 0.3, Preference::Equal)]);
    let mut rng = RunRng::seed_from_u64(11);
    let (mut anti, mut swap) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let (a, b) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        anti = anti.max((pair_probability(a, b) + pair_probability(b, a) - 1.0).abs());
        for l in [Preference::A, Preference::B, Preference::Equal] {
            swap = swap.max((pair_loss(a, b, l) - pair_loss(b, a, l.reversed())).abs());
        }
    }
    all(vec![
        ensure((ln2 - std::f64::consts::LN_2).abs() <= 1e-9, format!("equal-label loss at equal latents {ln2:.12}")),
        ensure(anti <= 1e-12, format!("antisymmetry error {anti:.1e}")),
        ensure(swap <= 1e-12, format!("swap invariance error {swap:.1e}")),
    ])
}

fn tone(freq: f64, amp: f64, n: usize) -> AudioClip {
    let s = (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()).collect();
    AudioClip::new("tone", s, 16000).unwrap()
}

fn power_db(x: &[f64]) -> f64 {
    10.0 * (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).log10()
}

fn drc_physics() -> Check {
    let mut parts = Vec::new();
    let n = 16000;
    for cr in [1.0, 2.0, 4.0] {
        let mut p = CompressionParams::new(vec![cr; 5], vec![0.0; 5]);
        p.ct_moderate_db = 40.0;
        p.ct_loud_db = 120.0;
        p.release_s = 0.05;
        let levels = [-30.0, -25.0, -20.0, -15.0, -10.0];
        let mut outs = Vec::new();
        for l in levels {
            let y = compress(&tone(1500.0, 10f64.powf(l / 20.0), n), &BandSpec::default(), &p, 100.0).map_err(|e| e.to_string())?;
            // steady-state region
            outs.push(power_db(&y.samples()[n / 2..n - 1024]));
        }
        let slope = ls_slope(&outs) / 5.0;
        let rel = (slope * cr - 1.0).abs();
        parts.push(ensure(rel <= 0.05, format!("ratio {cr}: slope {slope:.4} ({:.1}% off 1/ratio)", 100.0 * rel)));
    }
    let fs = 16000;
    let tau = 0.01;
    let n_tau = tau * fs as f64;
    let start = 20;
    let mut x = vec![0.0; start];
    x.extend(vec![-10.0; 2000]);
    let y = smooth_gain(&x, tau, 1.0, fs);
    let k = (start..y.len()).find(|&k| y[k] <= -10.0 * 0.632).unwrap_or(usize::MAX);
    let attack_err = (k - start + 1) as f64 - n_tau;
    parts.push(ensure(attack_err.abs() <= 1.0, format!("attack reaches 63.2% after {} samples, time constant {n_tau}", k - start + 1)));
    let mut x = vec![-10.0; start];
    x.extend(vec![0.0; 2000]);
    let y = smooth_gain(&x, 1.0, tau, fs);
    let k = (start..y.len()).find(|&k| y[k] >= -10.0 * 0.368).unwrap_or(usize::MAX);
    let release_err = (k - start + 1) as f64 - n_tau;
    parts.push(ensure(release_err.abs() <= 1.0, format!("release reaches 63.2% after {} samples", k - start + 1)));

    let mut rng = RunRng::seed_from_u64(5);
    let clip = AudioClip::new("w", (0..16000).map(|_| rng.gen_range(-0.3..0.3)).collect(), fs).unwrap();
    let out = compress(&clip, &BandSpec::default(), &CompressionParams::transparent(5), 100.0).map_err(|e| e.to_string())?;
    let err: Vec<f64> = out.samples().iter().zip(clip.samples()).map(|(a, b)| a - b).collect();
    let residual = power_db(&err) - power_db(clip.samples());
    parts.push(ensure(residual <= -40.0, format!("transparent residual {residual:.1} dB")));
    all(parts)
}

fn random_obs(shape: [usize; 3], rng: &mut RunRng) -> Observation {
    let n = shape.iter().product();
    Observation { shape, data: (0..n).map(|_| rng.gen_range(-4.0..0.0)).collect(), source_clip_id: "o".into(), cr_adj_context: None }
}

fn central_differences(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-7)).fold(0.0, f64::max)
}

fn gradient_oracles() -> Check {
    let mut rng = RunRng::seed_from_u64(21);
    let shape = [6, 6, 2];
    let cfg = RewardNetConfig { conv_filters: vec![2, 3], recurrent_hidden: 3, ..Default::default() };
    let net = RewardPredictor::new(&cfg, shape, &mut rng).map_err(|e| e.to_string())?;
    let triplets: Vec<PreferenceTriplet> = [Preference::A, Preference::B, Preference::Equal]
        .into_iter()
        .map(|l| PreferenceTriplet::new(random_obs(shape, &mut rng), random_obs(shape, &mut rng), l, Origin::Simulated).unwrap())
        .collect();
    let at = |p: &[f64]| net.loss_grad_at(p, &triplets, &mut RunRng::seed_from_u64(3)).unwrap();
    let (_, g) = at(&net.params);
    let reward_err = max_relative_error(&g, &central_differences(&net.params, 1e-4, |p| at(p).0));

    let acfg = AgentConfig { conv_filters: vec![2, 3], dense_units: 6, batch_size: 4, target_sync_interval: usize::MAX, ..Default::default() };
    let agent = Agent::new(&acfg, shape, 2, 4, 4.0, &mut rng).map_err(|e| e.to_string())?;
    let batch: Vec<Transition> = (0..4)
        .map(|i| Transition {
            state: Arc::new(AgentState { obs: random_obs(shape, &mut rng), prev_adj: CrAdjustment(vec![1.0, if i % 2 == 0 { 4.0 } else { 1.0 }]) }),
            action: i,
            reward: 0.2 * i as f64,
            next_state: Arc::new(AgentState { obs: random_obs(shape, &mut rng), prev_adj: CrAdjustment(vec![4.0, 1.0]) }),
        })
        .collect();
    let (_, g) = agent.td_loss_grad(&agent.params, &batch).map_err(|e| e.to_string())?;
    let q_err = max_relative_error(&g, &central_differences(&agent.params, 1e-4, |p| agent.td_loss_grad(p, &batch).unwrap().0));
    all(vec![
        ensure(reward_err <= 1e-3, format!("reward model {} params, max relative error {reward_err:.1e}", net.params.len())),
        ensure(q_err <= 1e-3, format!("Q-network {} params, max relative error {q_err:.1e}", agent.params.len())),
    ])
}

struct OneState {
    obs: Observation,
    dict: Vec<CrAdjustment>,
    last: usize,
}

impl AgentEnv for OneState {
    fn current_state(&mut self) -> prefcomp_core::Result<AgentState> {
        Ok(AgentState { obs: self.obs.clone(), prev_adj: self.dict[self.last].clone() })
    }

    fn step(&mut self, action: usize) -> prefcomp_core::Result<AgentState> {
        self.last = action;
        self.current_state()
    }
}

fn q_learning_sanity() -> Check {
    let mut rng = RunRng::seed_from_u64(31);
    let shape = [4, 4, 1];
    let small = AgentConfig { conv_filters: vec![2, 3], dense_units: 6, batch_size: 4, target_sync_interval: usize::MAX, ..Default::default() };

    let cfg = AgentConfig { gamma: 0.99, learning_rate: 1e-2, ..small.clone() };
    let mut agent = Agent::new(&cfg, shape, 1, 4, 4.0, &mut rng).map_err(|e| e.to_string())?;
    let s = Arc::new(AgentState { obs: random_obs(shape, &mut rng), prev_adj: CrAdjustment(vec![1.0]) });
    let t = Transition { state: s.clone(), action: 2, reward: 0.5, next_state: s.clone() };
    let y = q_target(0.5, &agent.q_values(&s).map_err(|e| e.to_string())?, 0.99);
    let mut converged_at = None;
    for step in 1..=200 {
        agent.train_on(std::slice::from_ref(&t)).map_err(|e| e.to_string())?;
        let q = agent.q_values(&s).map_err(|e| e.to_string())?[2];
        if (q - y).abs() <= 1e-2 && converged_at.is_none() {
            converged_at = Some(step);
        }
    }
    let q = agent.q_values(&s).map_err(|e| e.to_string())?[2];

    let dict: Vec<CrAdjustment> = [[1.0, 1.0], [1.0, 4.0], [4.0, 1.0], [4.0, 4.0]].iter().map(|a| CrAdjustment(a.to_vec())).collect();
    let target = dict[2].clone();
    let cfg = AgentConfig { n_episodes: 30, steps_per_episode: 20, train_frequency: 1, batch_size: 16, gamma: 0.5, learning_rate: 3e-3, ..small };
    let mut trainer = AgentTrainer::new(Agent::new(&cfg, shape, 2, 4, 4.0, &mut rng).map_err(|e| e.to_string())?);
    let mut env = OneState { obs: random_obs(shape, &mut rng), dict, last: 0 };
    let reward = |st: &AgentState| Ok(if st.prev_adj == target { 1.0 } else { 0.0 });
    trainer.run_episodes(&mut env, &reward, 30, &mut rng).map_err(|e| e.to_string())?;
    let mut hits = 0;
    let n_final = 100;
    for _ in 0..n_final {
        let st = env.current_state().map_err(|e| e.to_string())?;
        let a = trainer.agent.greedy_action(&st).map_err(|e| e.to_string())?;
        hits += usize::from(a == 2);
        env.step(a).map_err(|e| e.to_string())?;
    }
    all(vec![
        ensure(
            (q - y).abs() <= 1e-2,
            format!("Q {q:.4} vs target {y:.4} after 200 updates, first within 1e-2 at update {}", converged_at.map_or("never".into(), |s| s.to_string())),
        ),
        ensure(hits * 100 >= 95 * n_final, format!("greedy picks the rewarded action in {hits}/{n_final} steps")),
    ])
}

fn desk_config(user: usize) -> RunConfig {
    let mut cfg = RunConfig::desk_scale();
    if let ListenerSource::Simulated { user: u, .. } = &mut cfg.listener {
        *u = Some(user);
    }
    cfg
}

fn desk_run(dir: &Path) -> Result<(Run, RunOutcome), String> {
    let cfg = desk_config(4);
    let mut listener = simulated_listener(&cfg).map_err(|e| e.to_string())?;
    let mut run = Run::create(cfg, dir).map_err(|e| e.to_string())?;
    let out = run.execute(&mut listener).map_err(|e| e.to_string())?;
    Ok((run, out))
}

fn end_to_end(run: &mut Run, out: &RunOutcome) -> Check {
    let RunOutcome::Completed(tally) = out else { return Err(format!("run did not complete: {out:?}")) };
    let profile = builtin_profile(4).unwrap();
    let env = &mut run.protocol.env;
    let n = env.action_space().len();
    let mut rng = RunRng::seed_from_u64(999);
    let mut held_out = Vec::new();
    for _ in 0..100 {
        let src = env.draw_source();
        let noisy = env.noisy_clip(&src).map_err(|e| e.to_string())?;
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let (a, b) = (env.full_adjustment(i).unwrap(), env.full_adjustment(j).unwrap());
        if let Some(label) = profile.preference(&a, &b).unwrap().choice.preference().filter(|l| *l != Preference::Equal) {
            let oa = env.observe(&env.compress(&noisy, &a).unwrap()).unwrap();
            let ob = env.observe(&env.compress(&noisy, &b).unwrap()).unwrap();
            held_out.push(PreferenceTriplet::new(oa, ob, label, Origin::Simulated).unwrap());
        }
    }
    let acc = run.protocol.state.predictor.pairwise_accuracy(&held_out).map_err(|e| e.to_string())?.unwrap_or(0.0);
    let rewards: Vec<f64> = run
        .log
        .records()
        .iter()
        .filter_map(|r| match &r.event {
            LogEvent::Episodes { metrics } => Some(metrics.iter().map(|m| m.mean_reward)),
            _ => None,
        })
        .flatten()
        .collect();
    let slope = ls_slope(&rewards);
    let action = run.protocol.state.personalized_action.ok_or("no personalized action")?;
    let chosen = run.protocol.env.full_adjustment(action).map_err(|e| e.to_string())?;
    let share = tally.personalized_share().unwrap_or(0.0);
    all(vec![
        ensure(acc >= 0.9, format!("held-out accuracy {acc:.3} over {} pairs", held_out.len())),
        ensure(slope > 0.0 && rewards.len() == 50, format!("reward slope {slope:.5} over {} episodes", rewards.len())),
        ensure(chosen == profile.target_adjustment, format!("greedy adjustment {:?}", chosen.0)),
        ensure(share >= 0.7, format!("personalized preferred in {}/{} decisive pairs", tally.personalized, tally.personalized + tally.reference)),
    ])
}

fn reward_stage(user: usize, seed: u64) -> Result<(f64, f64), String> {
    let mut cfg = desk_config(user);
    cfg.seed = seed;
    let mut listener: SimListener = simulated_listener(&cfg).map_err(|e| e.to_string())?;
    let env = cfg.environment().map_err(|e| e.to_string())?;
    let mut p = Protocol::new(cfg.protocol.clone(), env, &cfg.agent, &cfg.reward, cfg.seed).map_err(|e| e.to_string())?;
    p.advance(&mut listener, &mut ()).map_err(|e| e.to_string())?;
    p.advance(&mut listener, &mut ()).map_err(|e| e.to_string())?;
    Ok((p.state.reward_val_losses[0], p.state.dataset.equal_fraction()))
}

fn persona_contrasts() -> Check {
    let mut parts = Vec::new();
    for seed in [1, 2] {
        let (l1, e1) = reward_stage(1, seed)?;
        let (l2, _) = reward_stage(2, seed)?;
        let (_, e3) = reward_stage(3, seed)?;
        parts.push(ensure(l2 > l1, format!("seed {seed}: validation loss user 2 {l2:.3} vs user 1 {l1:.3}")));
        parts.push(ensure(e3 > e1, format!("seed {seed}: EQUAL fraction user 3 {e3:.3} vs user 1 {e1:.3}")));
    }
    all(parts)
}

fn determinism(a: &Path, b: &Path) -> Check {
    let mut parts = Vec::new();
    for f in [REWARD_LOSS, EPISODE_METRICS, EVAL_TALLY, DATASET_MANIFEST] {
        let (x, y) = (fs::read(a.join(f)).map_err(|e| e.to_string())?, fs::read(b.join(f)).map_err(|e| e.to_string())?);
        parts.push(ensure(x == y && !x.is_empty(), format!("{f} {} bytes {}", x.len(), if x == y { "identical" } else { "differ" })));
    }
    all(parts)
}

fn timed(f: impl FnOnce() -> Check) -> (Check, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}

fn main() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let results: Vec<(&str, Check, f64)> = thread::scope(|s| {
        let twin = s.spawn(|| desk_run(dirs[1].path()).map(|_| ()));
        let e2e = s.spawn(|| {
            let t = Instant::now();
            let r = desk_run(dirs[0].path()).and_then(|(mut run, out)| end_to_end(&mut run, &out));
            (r, t.elapsed().as_secs_f64())
        });
        let personas = s.spawn(|| timed(persona_contrasts));
        let quick: Vec<(&str, fn() -> Check)> = vec![
            ("compression adjustment fixtures", adjustment_fixtures),
            ("action space cardinality", action_cardinality),
            ("preference loss analytics", preference_analytics),
            ("compressor physics", drc_physics),
            ("gradient oracles", gradient_oracles),
            ("Q-learning sanity", q_learning_sanity),
        ];
        let mut out: Vec<(&str, Check, f64)> = quick
            .into_iter()
            .map(|(name, f)| {
                let (r, t) = timed(f);
                (name, r, t)
            })
            .collect();
        let (r, t) = e2e.join().unwrap();
        out.push(("end-to-end desk-scale personalization", r, t));
        let (r, t) = personas.join().unwrap();
        out.push(("persona contrasts", r, t));
        let (r, t) = match twin.join().unwrap() {
            Ok(()) => timed(|| determinism(dirs[0].path(), dirs[1].path())),
            Err(e) => (Err(e), 0.0),
        };
        out.push(("determinism", r, t));
        out
    });
    let mut failed = 0;
    for (name, r, secs) in &results {
        match r {
            Ok(msg) => println!("PASS {name} ({secs:.1} s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {msg}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
