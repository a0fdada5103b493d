//! Closed-loop evaluation of the deployed policy and its baselines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actor::{deploy_action, rejection_sampling_action, OneStepActor};
use crate::critics::CriticBundle;
use crate::env::{rollout, safety_margin, sample_disk_action, BoatAction, BoatState};
use crate::error::{Error, Result};
use crate::flow::FlowTeacher;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PolicyMode {
    SafeFql,
    /// Best of `N` flow samples by critic score.
    Rejection(usize),
    Random,
    Zero,
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyMode::SafeFql => write!(f, "safefql"),
            PolicyMode::Rejection(n) => write!(f, "rejection:{n}"),
            PolicyMode::Random => write!(f, "random"),
            PolicyMode::Zero => write!(f, "zero"),
        }
    }
}

impl FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "safefql" => Ok(PolicyMode::SafeFql),
            "random" => Ok(PolicyMode::Random),
            "zero" => Ok(PolicyMode::Zero),
            _ => {
                let n = s
                    .strip_prefix("rejection:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| {
                        Error::Usage(format!("unknown policy mode `{s}` (safefql, rejection:N, random, zero)"))
                    })?;
                Ok(PolicyMode::Rejection(n))
            }
        }
    }
}

impl From<PolicyMode> for String {
    fn from(m: PolicyMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for PolicyMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl PolicyMode {
    /// File-name friendly label.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "_")
    }
}

/// Trained components a policy mode may need.
#[derive(Default)]
pub struct Policies<'a> {
    pub actor: Option<&'a OneStepActor>,
    pub teacher: Option<&'a FlowTeacher>,
    pub critics: Option<&'a CriticBundle>,
    pub rejection_delta: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStateSource {
    /// `{V_c < δ*, ℓ < 0}`
    Calibrated,
    /// `{ℓ < 0}`
    Safe,
}

/// Uniform states over `X` restricted to `ℓ < 0` and, when a value and level
/// are given, to `V_c < δ`.
pub fn initial_states(
    n: usize,
    seed: u64,
    calibrated: Option<(&CriticBundle, f64)>,
) -> Result<(Vec<BoatState>, InitialStateSource)> {
    let mut r = rng::stream(seed, 5);
    let cap = n.saturating_mul(10_000).max(1_000_000);
    let mut out = Vec::with_capacity(n);
    let mut proposals = 0usize;
    while out.len() < n {
        if proposals == cap {
            return Err(Error::Usage(format!(
                "found only {} of {n} initial states in {cap} proposals",
                out.len()
            )));
        }
        proposals += 1;
        let x = BoatState::sample_uniform(&mut r);
        if safety_margin(x) >= 0.0 {
            continue;
        }
        if let Some((c, delta)) = calibrated {
            if c.safety_value(&x.to_f32()) as f64 >= delta {
                continue;
            }
        }
        out.push(x);
    }
    let src = if calibrated.is_some() {
        InitialStateSource::Calibrated
    } else {
        InitialStateSource::Safe
    };
    Ok((out, src))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub index: usize,
    pub x1: f64,
    pub x2: f64,
    pub cumulative_reward: f64,
    pub violations: usize,
    pub max_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: PolicyMode,
    pub n_episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    pub initial_states: InitialStateSource,
    pub delta_star: Option<f64>,
    pub mean_reward: f64,
    pub total_violations: usize,
    /// Percentage of episodes without any violation.
    pub safety_rate: f64,
    /// Mean wall-clock time per action, only when timing is enabled.
    pub mean_action_latency_us: Option<f64>,
    pub episodes: Vec<EpisodeResult>,
}

impl EvalReport {
    pub fn csv_rows(&self) -> Vec<String> {
        self.episodes
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{},{},{}",
                    e.index, e.x1, e.x2, e.cumulative_reward, e.violations, e.max_margin
                )
            })
            .collect()
    }
}

pub const EPISODE_CSV_HEADER: &str = "episode,x1,x2,cumulative_reward,violations,max_margin";

fn require<'a, T>(v: Option<&'a T>, what: &str, mode: PolicyMode) -> Result<&'a T> {
    v.ok_or_else(|| Error::Usage(format!("policy mode `{mode}` needs the {what}")))
}

/// Action for `x` under `mode`.
pub fn policy_action(mode: PolicyMode, p: &Policies<'_>, x: BoatState, r: &mut rng::Rng) -> Result<BoatAction> {
    let s = x.to_f32();
    Ok(match mode {
        PolicyMode::SafeFql => BoatAction::from_f32(&deploy_action(require(p.actor, "actor", mode)?, &s, r)),
        PolicyMode::Rejection(n) => {
            let teacher = require(p.teacher, "flow teacher", mode)?;
            let critics = require(p.critics, "critics", mode)?;
            let a = rejection_sampling_action(teacher, teacher.k_steps, critics, &s, n, p.rejection_delta, r)?;
            BoatAction::from_f32(&a)
        }
        PolicyMode::Random => sample_disk_action(r),
        PolicyMode::Zero => BoatAction::ZERO,
    })
}

/// Runs one episode per initial state. Episode `i` draws from its own stream,
/// so results do not depend on scheduling.
pub fn run_episodes(
    mode: PolicyMode,
    policies: &Policies<'_>,
    starts: &[BoatState],
    horizon: usize,
    dt: f64,
    seed: u64,
) -> Result<(Vec<EpisodeResult>, f64)> {
    // validate component availability once up front
    policy_action(mode, policies, starts.first().copied().unwrap_or(BoatState::new(0.0, 0.0)), &mut rng::stream(0, 0))?;
    let out: Vec<Result<(EpisodeResult, f64)>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, &x0)| {
            let mut r = rng::stream(seed, 100 + i as u64);
            let mut err = None;
            let mut seconds = 0.0;
            let traj = rollout(
                |x| {
                    let t = Instant::now();
                    let a = policy_action(mode, policies, x, &mut r);
                    seconds += t.elapsed().as_secs_f64();
                    a.unwrap_or_else(|e| {
                        err.get_or_insert(e);
                        BoatAction::ZERO
                    })
                },
                x0,
                horizon,
                dt,
            );
            if let Some(e) = err {
                return Err(e);
            }
            Ok((
                EpisodeResult {
                    index: i,
                    x1: x0.x1,
                    x2: x0.x2,
                    cumulative_reward: traj.cumulative_reward,
                    violations: traj.violations,
                    max_margin: traj.max_margin,
                },
                seconds,
            ))
        })
        .collect();
    let mut episodes = Vec::with_capacity(out.len());
    let mut total_seconds = 0.0;
    for o in out {
        let (e, s) = o?;
        episodes.push(e);
        total_seconds += s;
    }
    Ok((episodes, total_seconds))
}

pub fn summarize(
    mode: PolicyMode,
    episodes: Vec<EpisodeResult>,
    horizon: usize,
    seed: u64,
    source: InitialStateSource,
    delta_star: Option<f64>,
    latency_us: Option<f64>,
) -> EvalReport {
    let n = episodes.len();
    let clean = episodes.iter().filter(|e| e.violations == 0).count();
    EvalReport {
        mode,
        n_episodes: n,
        horizon,
        seed,
        initial_states: source,
        delta_star,
        mean_reward: episodes.iter().map(|e| e.cumulative_reward).sum::<f64>() / n.max(1) as f64,
        total_violations: episodes.iter().map(|e| e.violations).sum(),
        safety_rate: 100.0 * clean as f64 / n.max(1) as f64,
        mean_action_latency_us: latency_us,
        episodes,
    }
}

/// Uniform random states over `X`, used by the benchmark and oracle probes.
pub fn uniform_states(n: usize, seed: u64, stream: u64) -> Vec<BoatState> {
    let mut r = rng::stream(seed, stream);
    (0..n).map(|_| BoatState::sample_uniform(&mut r)).collect()
}

/// Uniform disk actions paired with [`uniform_states`].
pub fn uniform_actions(n: usize, seed: u64, stream: u64) -> Vec<BoatAction> {
    let mut r = rng::stream(seed, stream);
    (0..n)
        .map(|_| {
            // burn one draw so actions are not a function of the state stream
            let _: f64 = r.random();
            sample_disk_action(&mut r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse_and_print() {
        for s in ["safefql", "rejection:16", "random", "zero"] {
            assert_eq!(s.parse::<PolicyMode>().unwrap().to_string(), s);
        }
        assert!("rejection:0".parse::<PolicyMode>().is_err());
        assert!("greedy".parse::<PolicyMode>().is_err());
        assert_eq!(PolicyMode::Rejection(4).slug(), "rejection_4");
    }

    #[test]
    fn baseline_episodes_are_reproducible() {
        let (starts, src) = initial_states(20, 3, None).unwrap();
        assert_eq!(src, InitialStateSource::Safe);
        assert!(starts.iter().all(|&x| safety_margin(x) < 0.0 && x.in_bounds()));
        let p = Policies::default();
        let (a, _) = run_episodes(PolicyMode::Random, &p, &starts, 50, 0.005, 9).unwrap();
        let (b, _) = run_episodes(PolicyMode::Random, &p, &starts, 50, 0.005, 9).unwrap();
        assert_eq!(a, b);
        let r = summarize(PolicyMode::Random, a, 50, 9, src, None, None);
        assert!(r.safety_rate >= 0.0 && r.safety_rate <= 100.0);
        assert_eq!(r.n_episodes, 20);
    }

    #[test]
    fn missing_component_is_reported() {
        let (starts, _) = initial_states(2, 3, None).unwrap();
        let r = run_episodes(PolicyMode::SafeFql, &Policies::default(), &starts, 5, 0.005, 0);
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}
