//! Phase 4: conformal verification of the learned safe set.
//!
//! Calibration states are drawn from `{V_c < 0}` and scored by rolling out the
//! deployed policy (`score ≥ 0` means the rollout touched the failure set).
//! A sweep over candidate levels `δ` then finds the largest level whose
//! sub-level set admits a binomial certificate: with confidence `1 − β_s`,
//! a fresh state from `{V_c < δ}` is violation-free with probability at least
//! `1 − ε_s`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{rollout_max_margin, BoatAction, BoatState};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// `Σ_{i=0}^{l−1} C(n, i)·ε^i·(1 − ε)^{n−i}`, summed in log space.
pub fn binomial_tail(n: u64, l: u64, eps: f64) -> Result<f64> {
    if l > n {
        return Err(Error::Usage(format!("binomial tail needs l <= n (got l={l}, n={n})")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Usage(format!("binomial tail needs eps in (0, 1), got {eps}")));
    }
    if l == 0 {
        return Ok(0.0);
    }
    let (le, l1e) = (eps.ln(), (-eps).ln_1p());
    let nf = n as f64;
    let mut log_c = 0.0f64;
    let mut terms = Vec::with_capacity(l as usize);
    for i in 0..l {
        if i > 0 {
            log_c += ((nf - i as f64 + 1.0) / i as f64).ln();
        }
        terms.push(log_c + i as f64 * le + (nf - i as f64) * l1e);
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
    Ok((m + s.ln()).exp().min(1.0))
}

/// Smallest `ε` with `binomial_tail(n, l, ε) ≤ β`, by bisection to `1e-9`.
pub fn min_epsilon(n: u64, l: u64, beta: f64) -> Result<f64> {
    if l == 0 || l > n {
        return Err(Error::Usage(format!("min_epsilon needs 1 <= l <= n (got l={l}, n={n})")));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Usage(format!("min_epsilon needs beta in (0, 1), got {beta}")));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if binomial_tail(n, l, mid)? <= beta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Ascending order statistic at index `⌈level·n⌉`, clamped to `[1, n]`.
pub fn conformal_quantile(scores: &[f64], level: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Usage("conformal quantile of an empty score set".into()));
    }
    if level.is_nan() {
        return Err(Error::Usage("conformal quantile level is NaN".into()));
    }
    let n = scores.len();
    let k = ((level.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// `max_t ℓ(x_t)` over a rollout of `policy` from `x`, including `x` itself.
pub fn policy_safety_score<P>(policy: P, x: BoatState, horizon: usize, dt: f64) -> f64
where
    P: FnMut(BoatState) -> BoatAction,
{
    rollout_max_margin(policy, x, horizon, dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub epsilon_s: f64,
    pub beta_s: f64,
    pub n_samples: usize,
    pub n_levels: usize,
    pub rollout_horizon: usize,
    /// Rollouts averaged per calibration state.
    pub rollouts_per_state: usize,
    /// Cap on rejection-sampling proposals for `{V_c < 0}`.
    pub max_proposals: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            epsilon_s: 0.05,
            beta_s: 0.05,
            n_samples: 500,
            n_levels: 20,
            rollout_horizon: 400,
            rollouts_per_state: 1,
            max_proposals: 1_000_000,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.epsilon_s) || !unit(self.beta_s) {
            return Err(Error::Config(format!(
                "epsilon_s and beta_s must lie in (0, 1) (got {}, {})",
                self.epsilon_s, self.beta_s
            )));
        }
        if self.n_samples == 0 || self.n_levels < 2 || self.rollouts_per_state == 0 || self.max_proposals == 0 {
            return Err(Error::Config(
                "calibration needs n_samples >= 1, n_levels >= 2, rollouts_per_state >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// What calibration needs from the world: a proposal distribution over states,
/// the learned safety value and a (possibly random) policy score.
pub trait CalibrationProblem: Sync {
    type State: Send + Sync;
    fn propose(&self, rng: &mut Rng) -> Self::State;
    fn value(&self, state: &Self::State) -> f64;
    fn score(&self, state: &Self::State, rng: &mut Rng) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub delta: f64,
    /// Calibration states with `V_c < δ`.
    pub n: usize,
    /// Violations among them.
    pub k: usize,
    /// Certified violation rate; `1.0` when no certificate exists.
    pub epsilon: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub delta_star: f64,
    pub delta_0: f64,
    pub epsilon_s: f64,
    pub beta_s: f64,
    pub n_samples: usize,
    pub proposals: usize,
    pub values: Vec<f64>,
    pub scores: Vec<f64>,
    pub levels: Vec<LevelResult>,
    /// `(k + 1)`-th largest score in `{V_c < δ*}`.
    pub quantile: f64,
}

impl CalibrationReport {
    pub fn selected(&self) -> &LevelResult {
        self.levels
            .iter()
            .rev()
            .find(|l| l.passes)
            .expect("a report always has a passing level")
    }
}

fn certified_epsilon(n: usize, k: usize, beta: f64) -> Result<f64> {
    if n == 0 || k + 1 > n {
        return Ok(1.0);
    }
    min_epsilon(n as u64, k as u64 + 1, beta)
}

/// The level sweep on already-scored calibration states.
pub fn sweep_levels(values: &[f64], scores: &[f64], cfg: &CalibrationConfig) -> Result<(f64, Vec<LevelResult>)> {
    let delta_0 = values
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s >= 0.0)
        .map(|(&v, _)| v)
        .fold(0.0f64, f64::min);
    let m = cfg.n_levels;
    let mut levels = Vec::with_capacity(m);
    for j in 0..m {
        let delta = if j + 1 == m {
            0.0
        } else {
            delta_0 - delta_0 * j as f64 / (m - 1) as f64
        };
        let (mut n, mut k) = (0, 0);
        for (&v, &s) in values.iter().zip(scores) {
            if v < delta {
                n += 1;
                k += (s >= 0.0) as usize;
            }
        }
        let epsilon = certified_epsilon(n, k, cfg.beta_s)?;
        levels.push(LevelResult {
            delta,
            n,
            k,
            epsilon,
            passes: epsilon <= cfg.epsilon_s,
        });
    }
    Ok((delta_0, levels))
}

pub fn calibrate_delta<P: CalibrationProblem>(problem: &P, cfg: &CalibrationConfig) -> Result<CalibrationReport> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, 4);
    let mut states = Vec::with_capacity(cfg.n_samples);
    let mut values = Vec::with_capacity(cfg.n_samples);
    let mut proposals = 0;
    while states.len() < cfg.n_samples {
        if proposals == cfg.max_proposals {
            return Err(Error::CalibrationInfeasible {
                reason: format!(
                    "only {} of {} states with V_c < 0 found in {} proposals",
                    states.len(),
                    cfg.n_samples,
                    proposals
                ),
                min_epsilon: None,
            });
        }
        proposals += 1;
        let s = problem.propose(&mut rng);
        let v = problem.value(&s);
        if v < 0.0 {
            states.push(s);
            values.push(v);
        }
    }
    let scores: Vec<f64> = states
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::stream(cfg.seed, 1000 + i as u64);
            let total: f64 = (0..cfg.rollouts_per_state).map(|_| problem.score(s, &mut r)).sum();
            total / cfg.rollouts_per_state as f64
        })
        .collect();
    let (delta_0, levels) = sweep_levels(&values, &scores, cfg)?;
    let Some(best) = levels.iter().rev().find(|l| l.passes) else {
        let best_eps = levels.iter().map(|l| l.epsilon).fold(1.0, f64::min);
        return Err(Error::CalibrationInfeasible {
            reason: format!(
                "no level certifies epsilon_s = {} at beta_s = {} with N_s = {}",
                cfg.epsilon_s, cfg.beta_s, cfg.n_samples
            ),
            min_epsilon: Some(best_eps),
        });
    };
    let subset: Vec<f64> = values
        .iter()
        .zip(&scores)
        .filter(|(&v, _)| v < best.delta)
        .map(|(_, &s)| s)
        .collect();
    let quantile = conformal_quantile(&subset, (best.n - best.k) as f64 / best.n as f64)?;
    Ok(CalibrationReport {
        delta_star: best.delta,
        delta_0,
        epsilon_s: cfg.epsilon_s,
        beta_s: cfg.beta_s,
        n_samples: cfg.n_samples,
        proposals,
        values,
        scores,
        quantile,
        levels,
    })
}

/// Smallest `N_s` for which a violation-free sample certifies `(ε_s, β_s)`.
pub fn min_feasible_samples(epsilon_s: f64, beta_s: f64) -> usize {
    // (1 − ε)^n ≤ β
    (beta_s.ln() / (-epsilon_s).ln_1p()).ceil() as usize
}

/// States with known value `V ~ U[−1, 0]`; a state violates with probability
/// `p` when `V > threshold`.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticProblem {
    pub threshold: f64,
    pub p: f64,
}

impl SyntheticProblem {
    /// True violation probability of a fresh state from `{V < δ}`.
    pub fn true_violation_rate(&self, delta: f64) -> f64 {
        let width = delta + 1.0;
        if width <= 0.0 {
            return 0.0;
        }
        self.p * (delta - self.threshold).max(0.0) / width
    }
}

impl CalibrationProblem for SyntheticProblem {
    type State = f64;
    fn propose(&self, rng: &mut Rng) -> f64 {
        -rng.random::<f64>()
    }
    fn value(&self, v: &f64) -> f64 {
        *v
    }
    fn score(&self, v: &f64, rng: &mut Rng) -> f64 {
        if *v > self.threshold && rng.random::<f64>() < self.p {
            1.0
        } else {
            -1.0
        }
    }
}
