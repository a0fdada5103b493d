//! The file-backed pipeline behind the `sfql` binary: data generation, the
//! three training phases, calibration, evaluation, benchmarking and the grid
//! oracle. Every command reads a [`RunConfig`] and writes JSON or CSV under
//! the configured output directory.

mod bench;
mod config;
mod eval;
mod store;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use bench::{run_bench, time_calls, BenchInputs, BenchReport, ForwardRows, Latency, RejectionLatency};
pub use config::{apply_override, BenchConfig, EnvConfig, EvalConfig, OracleRunConfig, PathsConfig, RunConfig};
pub use eval::{
    initial_states, policy_action, run_episodes, summarize, uniform_actions, uniform_states, EpisodeResult,
    EvalReport, InitialStateSource, Policies, PolicyMode, EPISODE_CSV_HEADER,
};
pub use store::{
    actor_present, critics_present, flow_present, load_actor, load_critics, load_flow, save_actor, save_critics,
    save_flow, ACTOR_DIR, CRITICS_DIR, FLOW_DIR,
};

use crate::actor::{deploy_action, train_actor_from, OneStepActor};
use crate::conformal::{calibrate_delta, policy_safety_score, CalibrationProblem, CalibrationReport};
use crate::critics::{train_critics_from, CriticBundle};
use crate::env::{generate_dataset, BoatAction, BoatState, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::flow::{train_flow_teacher_from, FlowTeacher};
use crate::oracle::{sign_agreement, value_iteration, SignAgreement};
use crate::rng;

use store::{create_dir, read_json, write_csv, write_json};

pub const CALIBRATION_FILE: &str = "calibration.json";
pub const CALIBRATION_INFEASIBLE_FILE: &str = "calibration_infeasible.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Critics,
    Flow,
    Actor,
    All,
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "critics" => Ok(Phase::Critics),
            "flow" => Ok(Phase::Flow),
            "actor" => Ok(Phase::Actor),
            "all" => Ok(Phase::All),
            _ => Err(Error::Usage(format!("unknown phase `{s}` (critics, flow, actor, all)"))),
        }
    }
}

fn ordering(requested: &str, missing: &str, path: PathBuf) -> Error {
    Error::Ordering {
        requested: requested.into(),
        missing: missing.into(),
        path,
    }
}

/// Generates the offline dataset and writes it with its JSON sidecar.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, TrajectoryDataset)> {
    let e = &cfg.env;
    let ds = generate_dataset(e.n_traj, e.horizon, e.dt, e.seed)?;
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.save(&path)?;
    Ok((path, ds))
}

fn load_dataset(cfg: &RunConfig, requested: &str) -> Result<TrajectoryDataset> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(ordering(requested, "gen-data", path));
    }
    TrajectoryDataset::load(&path)
}

fn load_critics_for(cfg: &RunConfig, requested: &str) -> Result<CriticBundle> {
    let dir = cfg.checkpoint_dir();
    if !critics_present(&dir) {
        return Err(ordering(requested, "train critics", dir.join(CRITICS_DIR)));
    }
    load_critics(&dir)
}

fn load_flow_for(cfg: &RunConfig, requested: &str) -> Result<FlowTeacher> {
    let dir = cfg.checkpoint_dir();
    if !flow_present(&dir) {
        return Err(ordering(requested, "train flow", dir.join(FLOW_DIR)));
    }
    load_flow(&dir)
}

fn load_actor_for(cfg: &RunConfig, requested: &str) -> Result<OneStepActor> {
    let dir = cfg.checkpoint_dir();
    if !actor_present(&dir) {
        return Err(ordering(requested, "train actor", dir.join(ACTOR_DIR)));
    }
    load_actor(&dir)
}

/// Final losses of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub steps: usize,
    /// Optimizer steps the checkpoint carries in total.
    pub total_steps: u64,
    pub final_losses: Vec<(String, f64)>,
    pub metrics_csv: PathBuf,
}

/// Runs one phase, or all three in order. With `resume`, an existing
/// checkpoint for the phase is trained further instead of replaced.
pub fn train(cfg: &RunConfig, phase: Phase, resume: bool) -> Result<Vec<PhaseSummary>> {
    let out = cfg.out_dir();
    let ckpt = cfg.checkpoint_dir();
    let phases: &[Phase] = match phase {
        Phase::All => &[Phase::Critics, Phase::Flow, Phase::Actor],
        Phase::Critics => &[Phase::Critics],
        Phase::Flow => &[Phase::Flow],
        Phase::Actor => &[Phase::Actor],
    };
    // fail fast on ordering before any work
    let name = |p: Phase| match p {
        Phase::Critics => "train critics",
        Phase::Flow => "train flow",
        Phase::Actor => "train actor",
        Phase::All => "train all",
    };
    let requested = name(phase);
    if !cfg.dataset_path().exists() {
        return Err(ordering(requested, "gen-data", cfg.dataset_path()));
    }
    if phase == Phase::Flow && !critics_present(&ckpt) {
        return Err(ordering(requested, "train critics", ckpt.join(CRITICS_DIR)));
    }
    if phase == Phase::Actor {
        load_critics_for(cfg, requested)?;
        load_flow_for(cfg, requested)?;
    }
    let ds = load_dataset(cfg, requested)?;
    create_dir(&out)?;
    create_dir(&ckpt)?;

    let mut summaries = Vec::new();
    for &p in phases {
        let summary = match p {
            Phase::Critics => {
                let start = if resume && critics_present(&ckpt) {
                    load_critics(&ckpt)?
                } else {
                    CriticBundle::new(&cfg.critics)?
                };
                let offset = start.v_r.step as usize;
                let t = train_critics_from(start, &ds, &cfg.critics)?;
                save_critics(&ckpt, &t.bundle)?;
                let csv = out.join("critics_metrics.csv");
                write_csv(
                    &csv,
                    "step,L_Vr,L_Qr,L_Qc,L_Vc",
                    t.metrics
                        .iter()
                        .map(|m| format!("{},{},{},{},{}", offset + m.step, m.v_r, m.q_r, m.q_c, m.v_c)),
                )?;
                let last = t.metrics.last();
                PhaseSummary {
                    phase: "critics".into(),
                    steps: cfg.critics.steps,
                    total_steps: t.bundle.v_r.step,
                    final_losses: last
                        .map(|m| {
                            vec![
                                ("L_Vr".into(), m.v_r),
                                ("L_Qr".into(), m.q_r),
                                ("L_Qc".into(), m.q_c),
                                ("L_Vc".into(), m.v_c),
                            ]
                        })
                        .unwrap_or_default(),
                    metrics_csv: csv,
                }
            }
            Phase::Flow => {
                load_critics_for(cfg, name(p))?;
                let start = if resume && flow_present(&ckpt) {
                    load_flow(&ckpt)?
                } else {
                    FlowTeacher::new(cfg.flow.hidden.clone(), cfg.flow.k_steps, cfg.flow.seed.wrapping_add(0x51))?
                };
                let offset = start.net.step as usize;
                let t = train_flow_teacher_from(start, &ds, &cfg.flow)?;
                save_flow(&ckpt, &t.teacher)?;
                let csv = out.join("flow_metrics.csv");
                write_csv(
                    &csv,
                    "step,loss",
                    t.metrics.iter().map(|m| format!("{},{}", offset + m.step, m.loss)),
                )?;
                PhaseSummary {
                    phase: "flow".into(),
                    steps: cfg.flow.steps,
                    total_steps: t.teacher.net.step,
                    final_losses: t.metrics.last().map(|m| vec![("loss".into(), m.loss)]).unwrap_or_default(),
                    metrics_csv: csv,
                }
            }
            Phase::Actor => {
                let critics = load_critics_for(cfg, name(p))?;
                let teacher = load_flow_for(cfg, name(p))?;
                let a = &cfg.actor;
                let start = if resume && actor_present(&ckpt) {
                    load_actor(&ckpt)?
                } else {
                    OneStepActor::new(a.hidden.clone(), a.lambda, a.eta, a.seed.wrapping_add(0xac))?
                };
                let offset = start.net.step as usize;
                let t = train_actor_from(start, &ds, &critics, &teacher, teacher.k_steps, a, |_, _| {})?;
                save_actor(&ckpt, &t.actor)?;
                let csv = out.join("actor_metrics.csv");
                write_csv(
                    &csv,
                    "step,gate_open_fraction,distill_loss,reward_term,safety_term",
                    t.metrics.iter().map(|m| {
                        format!(
                            "{},{},{},{},{}",
                            offset + m.step,
                            m.gate_open_fraction,
                            m.distill_loss,
                            m.reward_term,
                            m.safety_term
                        )
                    }),
                )?;
                PhaseSummary {
                    phase: "actor".into(),
                    steps: a.steps,
                    total_steps: t.actor.net.step,
                    final_losses: t
                        .metrics
                        .last()
                        .map(|m| {
                            vec![
                                ("distill".into(), m.distill_loss),
                                ("reward_term".into(), m.reward_term),
                                ("safety_term".into(), m.safety_term),
                                ("gate_open_fraction".into(), m.gate_open_fraction),
                            ]
                        })
                        .unwrap_or_default(),
                    metrics_csv: csv,
                }
            }
            Phase::All => unreachable!("expanded above"),
        };
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Calibration on the boat: proposals uniform over `X`, value `V_c`, score
/// the worst margin of an actor rollout.
pub struct BoatCalibration<'a> {
    pub critics: &'a CriticBundle,
    pub actor: &'a OneStepActor,
    pub horizon: usize,
    pub dt: f64,
}

impl CalibrationProblem for BoatCalibration<'_> {
    type State = BoatState;

    fn propose(&self, rng: &mut rng::Rng) -> BoatState {
        BoatState::sample_uniform(rng)
    }

    fn value(&self, x: &BoatState) -> f64 {
        self.critics.safety_value(&x.to_f32()) as f64
    }

    fn score(&self, x: &BoatState, rng: &mut rng::Rng) -> f64 {
        policy_safety_score(
            |s| BoatAction::from_f32(&deploy_action(self.actor, &s.to_f32(), rng)),
            *x,
            self.horizon,
            self.dt,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InfeasibleReport {
    reason: String,
    min_epsilon: Option<f64>,
    epsilon_s: f64,
    beta_s: f64,
    n_samples: usize,
}

/// Calibrates `δ*` for the trained actor. Writes `calibration.json`, or
/// `calibration_infeasible.json` and an error when no level certifies.
pub fn calibrate(cfg: &RunConfig) -> Result<CalibrationReport> {
    let critics = load_critics_for(cfg, "calibrate")?;
    let actor = load_actor_for(cfg, "calibrate")?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let problem = BoatCalibration {
        critics: &critics,
        actor: &actor,
        horizon: cfg.calibration.rollout_horizon,
        dt: cfg.env.dt,
    };
    let ok_path = out.join(CALIBRATION_FILE);
    let bad_path = out.join(CALIBRATION_INFEASIBLE_FILE);
    match calibrate_delta(&problem, &cfg.calibration) {
        Ok(report) => {
            write_json(&ok_path, &report)?;
            remove_if_present(&bad_path)?;
            Ok(report)
        }
        Err(Error::CalibrationInfeasible { reason, min_epsilon }) => {
            write_json(
                &bad_path,
                &InfeasibleReport {
                    reason: reason.clone(),
                    min_epsilon,
                    epsilon_s: cfg.calibration.epsilon_s,
                    beta_s: cfg.calibration.beta_s,
                    n_samples: cfg.calibration.n_samples,
                },
            )?;
            // a stale certificate must not outlive a failed calibration
            remove_if_present(&ok_path)?;
            Err(Error::CalibrationInfeasible { reason, min_epsilon })
        }
        Err(e) => Err(e),
    }
}

fn remove_if_present(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

/// `δ*` from an existing calibration report, if any.
pub fn load_delta_star(cfg: &RunConfig) -> Result<Option<f64>> {
    let path = cfg.out_dir().join(CALIBRATION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let r: CalibrationReport = read_json(&path)?;
    Ok(Some(r.delta_star))
}

/// Modes run by `eval all`: the deployed actor, each configured rejection N,
/// and both baselines.
pub fn all_modes(cfg: &RunConfig) -> Vec<PolicyMode> {
    let mut m = vec![PolicyMode::SafeFql];
    m.extend(cfg.eval.rejection_n.iter().map(|&n| PolicyMode::Rejection(n)));
    m.extend([PolicyMode::Random, PolicyMode::Zero]);
    m
}

/// Evaluates each mode on one shared set of initial states and writes
/// `eval_<mode>.json` and `eval_<mode>.csv`.
pub fn evaluate(cfg: &RunConfig, modes: &[PolicyMode]) -> Result<Vec<EvalReport>> {
    let needs_actor = modes.contains(&PolicyMode::SafeFql);
    let needs_rejection = modes.iter().any(|m| matches!(m, PolicyMode::Rejection(_)));
    let actor = needs_actor.then(|| load_actor_for(cfg, "eval")).transpose()?;
    let teacher = needs_rejection.then(|| load_flow_for(cfg, "eval")).transpose()?;
    let delta_star = load_delta_star(cfg)?;
    // calibrated starts need the critic; without a report the critic is only
    // required by rejection sampling
    let critics = if needs_rejection || delta_star.is_some() {
        Some(load_critics_for(cfg, "eval")?)
    } else {
        None
    };
    let calibrated = delta_star.zip(critics.as_ref()).map(|(d, c)| (c, d));
    let ev = &cfg.eval;
    let (starts, source) = initial_states(ev.n_episodes, ev.seed, calibrated)?;
    let policies = Policies {
        actor: actor.as_ref(),
        teacher: teacher.as_ref(),
        critics: critics.as_ref(),
        rejection_delta: ev.rejection_delta,
    };
    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let (episodes, seconds) = run_episodes(mode, &policies, &starts, ev.horizon, cfg.env.dt, ev.seed)?;
        let latency = ev
            .timing
            .then(|| 1e6 * seconds / (episodes.len() * ev.horizon).max(1) as f64);
        let report = summarize(mode, episodes, ev.horizon, ev.seed, source, delta_star, latency);
        let slug = mode.slug();
        write_json(&out.join(format!("eval_{slug}.json")), &report)?;
        write_csv(&out.join(format!("eval_{slug}.csv")), EPISODE_CSV_HEADER, report.csv_rows())?;
        reports.push(report);
    }
    Ok(reports)
}

/// Latency benchmark over the trained checkpoints; writes `bench.json`.
pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    let critics = load_critics_for(cfg, "bench")?;
    let teacher = load_flow_for(cfg, "bench")?;
    let actor = load_actor_for(cfg, "bench")?;
    let b = &cfg.bench;
    let report = run_bench(
        &BenchInputs {
            actor: &actor,
            teacher: &teacher,
            critics: &critics,
            rejection_delta: cfg.eval.rejection_delta,
        },
        b.calls,
        b.warmup,
        &b.rejection_n,
        b.seed,
    )?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    write_json(&out.join("bench.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n1: usize,
    pub n2: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub iterations: usize,
    pub final_residual: f64,
    pub feasible_fraction: f64,
    pub dead_band: f64,
    /// Present when critics were available to compare against.
    pub agreement: Option<SignAgreement>,
    pub agreement_rate: Option<f64>,
}

/// Solves the grid oracle, writes `oracle_grid.bin`, `oracle_grid.csv` and
/// `oracle.json`, and compares signs with the learned `Q_c` when a critic
/// checkpoint exists. Probe actions are uniform over the disk, matching the
/// behavior policy of the dataset.
pub fn oracle(cfg: &RunConfig) -> Result<OracleReport> {
    let grid = value_iteration(&cfg.oracle.grid(cfg.env.dt))?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    grid.save_binary(&out.join("oracle_grid.bin"))?;
    grid.save_csv(&out.join("oracle_grid.csv"))?;
    let ckpt = cfg.checkpoint_dir();
    let agreement = if critics_present(&ckpt) {
        let critics = load_critics(&ckpt)?;
        Some(oracle_agreement(&grid, &critics, cfg))
    } else {
        None
    };
    let report = OracleReport {
        n1: grid.n1,
        n2: grid.n2,
        n_actions: grid.n_actions,
        gamma: grid.gamma,
        iterations: grid.iterations,
        final_residual: grid.residuals.last().copied().unwrap_or(0.0),
        feasible_fraction: grid.feasible_fraction(),
        dead_band: cfg.oracle.dead_band,
        agreement_rate: agreement.map(|a| a.rate()),
        agreement,
    };
    write_json(&out.join("oracle.json"), &report)?;
    Ok(report)
}

/// Sign agreement of `Q_c(x, a)` with the grid on uniform probes, `a` uniform
/// over the disk.
pub fn oracle_agreement(grid: &crate::oracle::GridValue, critics: &CriticBundle, cfg: &RunConfig) -> SignAgreement {
    let o = &cfg.oracle;
    let probes = uniform_states(o.probes, o.seed, 6);
    let actions = uniform_actions(o.probes, o.seed, 9);
    let mut i = 0;
    sign_agreement(grid, &probes, o.dead_band, |x| {
        let a = actions[i];
        i += 1;
        critics.safety_q(&x.to_f32(), &a.to_f32()) as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> RunConfig {
        let text = format!(
            r#"
[env]
n_traj = 20
horizon = 20
[critics]
hidden = [8, 8]
steps = 30
batch_size = 16
log_every = 10
[flow]
hidden = [8, 8]
steps = 30
batch_size = 16
log_every = 10
[actor]
hidden = [8, 8]
steps = 30
batch_size = 16
log_every = 10
lambda = 0.05
[calibration]
n_samples = 20
rollout_horizon = 20
[eval]
n_episodes = 6
horizon = 20
rejection_n = [2]
[bench]
calls = 5
warmup = 1
[oracle]
n1 = 12
n2 = 12
probes = 50
[paths]
out_dir = "{}"
"#,
            dir.display()
        );
        RunConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn phases_refuse_to_run_out_of_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let missing = |e: Error| match e {
            Error::Ordering { missing, .. } => missing,
            other => panic!("expected ordering error, got {other}"),
        };
        assert_eq!(missing(train(&cfg, Phase::Critics, false).unwrap_err()), "gen-data");
        gen_data(&cfg).unwrap();
        assert_eq!(missing(train(&cfg, Phase::Actor, false).unwrap_err()), "train critics");
        assert_eq!(missing(train(&cfg, Phase::Flow, false).unwrap_err()), "train critics");
        train(&cfg, Phase::Critics, false).unwrap();
        assert_eq!(missing(train(&cfg, Phase::Actor, false).unwrap_err()), "train flow");
        assert_eq!(missing(calibrate(&cfg).unwrap_err()), "train actor");
    }

    #[test]
    fn tiny_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let (path, ds) = gen_data(&cfg).unwrap();
        assert_eq!(ds.len(), 400);
        assert!(crate::env::sidecar_path(&path).exists());
        let s = train(&cfg, Phase::All, false).unwrap();
        assert_eq!(s.len(), 3);
        for f in ["critics_metrics.csv", "flow_metrics.csv", "actor_metrics.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let resumed = train(&cfg, Phase::Critics, true).unwrap();
        assert_eq!(resumed[0].total_steps, 60);

        // an untrained actor may or may not certify; both outcomes leave
        // exactly one calibration file behind
        match calibrate(&cfg) {
            Ok(_) => assert!(!dir.path().join(CALIBRATION_INFEASIBLE_FILE).exists()),
            Err(Error::CalibrationInfeasible { .. }) => {
                assert!(!dir.path().join(CALIBRATION_FILE).exists())
            }
            Err(e) => panic!("{e}"),
        }
        let reports = evaluate(&cfg, &all_modes(&cfg)).unwrap();
        assert_eq!(reports.len(), 4);
        let starts = |r: &EvalReport| r.episodes.iter().map(|e| (e.x1, e.x2)).collect::<Vec<_>>();
        assert!(reports.iter().all(|r| starts(r) == starts(&reports[0])));
        assert!(reports.iter().all(|r| r.n_episodes == 6));

        let b = bench(&cfg).unwrap();
        assert_eq!(b.rejection.len(), 2);
        let o = oracle(&cfg).unwrap();
        assert!(o.agreement.is_some());
        assert!(dir.path().join("oracle_grid.bin").exists());
    }

    #[test]
    fn evaluation_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        gen_data(&cfg).unwrap();
        let a = evaluate(&cfg, &[PolicyMode::Random, PolicyMode::Zero]).unwrap();
        let b = evaluate(&cfg, &[PolicyMode::Random, PolicyMode::Zero]).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
