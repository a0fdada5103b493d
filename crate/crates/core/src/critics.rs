//! Phase 1: reward and safety critics learned from offline transitions.
//!
//! Reward side (implicit Q-learning): `V_r` regresses the upper expectile of
//! `Q_r(x, a)` over dataset actions, and `Q_r` regresses
//! `y_r = r + γ·V̄_r(x')`.
//!
//! Safety side: twin `Q_c` heads regress a reachability target built from
//! `ℓ(x)` and the pessimistic (max) twin estimate at the next dataset
//! transition, and `V_c` regresses the lower expectile of `Q_c`.
//!
//! Targets only ever read EMA copies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{TrajectoryDataset, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::instrument;
use crate::nn::{ForwardCache, LayerSpec, ParamSet};
use crate::rng;

const SA_DIM: usize = STATE_DIM + ACTION_DIM;

/// Asymmetric squared loss `|τ − 1(u < 0)|·u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

#[inline]
fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// `d/du` of [`expectile_loss`].
pub fn expectile_loss_grad(u: f64, tau: f64) -> f64 {
    2.0 * expectile_weight(u, tau) * u
}

pub fn reward_q_target(r: f64, v_bar_next: f64, gamma: f64) -> f64 {
    r + gamma * v_bar_next
}

/// Max-backup target `max{ℓ, γ·V̄_c(x')}`.
pub fn safety_q_target(ell: f64, v_bar_c_next: f64, gamma: f64) -> f64 {
    ell.max(gamma * v_bar_c_next)
}

/// Discounted reach-avoid target `(1 − γ)·ℓ + γ·max{ℓ, V̄_c(x')}`.
///
/// Unlike [`safety_q_target`], whose fixed point is `≥ 0` on every state when
/// `γ < 1` (safe margins are discounted toward zero from below), this form has
/// fixed point `ℓ` along a trajectory that keeps a constant margin, so the
/// sign of the value separates feasible from infeasible states.
pub fn discounted_reach_target(ell: f64, v_bar_c_next: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * ell + gamma * ell.max(v_bar_c_next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyBackup {
    /// [`safety_q_target`]
    Max,
    /// [`discounted_reach_target`]
    #[default]
    DiscountedReach,
}

impl SafetyBackup {
    pub fn target(self, ell: f64, v_next: f64, gamma: f64) -> f64 {
        match self {
            SafetyBackup::Max => safety_q_target(ell, v_next, gamma),
            SafetyBackup::DiscountedReach => discounted_reach_target(ell, v_next, gamma),
        }
    }
}

/// Safety estimates are aggregated with `max`, never trusting the more
/// optimistic twin.
pub fn pessimistic_safety_next_value(q1: f64, q2: f64) -> f64 {
    q1.max(q2)
}

/// Clipped double-Q on the reward side.
pub fn optimistic_reward_next_value(q1: f64, q2: f64) -> f64 {
    q1.min(q2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub ema_rate: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub steps: usize,
    /// Twin reward heads with clipped (min) aggregation inside `L_Vr`.
    pub twin_reward: bool,
    pub backup: SafetyBackup,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            gamma: 0.99,
            tau: 0.9,
            ema_rate: 0.005,
            lr: 3e-4,
            batch_size: 256,
            steps: 100_000,
            twin_reward: true,
            backup: SafetyBackup::DiscountedReach,
            seed: 0,
            log_every: 1000,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0.5, 1)", self.tau)));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::Config(format!("ema rate {} outside (0, 1]", self.ema_rate)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticBundle {
    /// One or two reward heads.
    pub q_r: Vec<ParamSet>,
    pub v_r: ParamSet,
    pub q_c: [ParamSet; 2],
    pub v_c: ParamSet,
    pub gamma: f64,
    pub tau: f64,
    pub ema_rate: f32,
    pub backup: SafetyBackup,
}

/// Serializable description of a bundle; checkpoints hold the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticHeader {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub reward_heads: usize,
    pub gamma: f64,
    pub tau: f64,
    pub ema_rate: f32,
    pub backup: SafetyBackup,
}

impl CriticBundle {
    pub fn new(cfg: &CriticConfig) -> Result<Self> {
        cfg.validate()?;
        let sa = LayerSpec::new(SA_DIM, cfg.hidden.clone(), 1);
        let s = LayerSpec::new(STATE_DIM, cfg.hidden.clone(), 1);
        let heads = if cfg.twin_reward { 2 } else { 1 };
        let seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Ok(Self {
            q_r: (0..heads)
                .map(|h| ParamSet::init(&sa, seed + 1 + h as u64))
                .collect::<Result<_>>()?,
            v_r: ParamSet::init(&s, seed + 3)?,
            q_c: [ParamSet::init(&sa, seed + 4)?, ParamSet::init(&sa, seed + 5)?],
            v_c: ParamSet::init(&s, seed + 6)?,
            gamma: cfg.gamma,
            tau: cfg.tau,
            ema_rate: cfg.ema_rate,
            backup: cfg.backup,
        })
    }

    pub fn header(&self) -> CriticHeader {
        CriticHeader {
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            hidden: self.v_r.spec.hidden.clone(),
            reward_heads: self.q_r.len(),
            gamma: self.gamma,
            tau: self.tau,
            ema_rate: self.ema_rate,
            backup: self.backup,
        }
    }

    /// Checkpoint names in a fixed order, paired with their networks.
    pub fn named(&self) -> Vec<(String, &ParamSet)> {
        let mut out: Vec<(String, &ParamSet)> = self
            .q_r
            .iter()
            .enumerate()
            .map(|(h, p)| (format!("q_r{}", h + 1), p))
            .collect();
        out.push(("v_r".into(), &self.v_r));
        out.push(("q_c1".into(), &self.q_c[0]));
        out.push(("q_c2".into(), &self.q_c[1]));
        out.push(("v_c".into(), &self.v_c));
        out
    }

    pub fn from_parts(header: &CriticHeader, mut nets: Vec<ParamSet>) -> Result<Self> {
        if nets.len() != header.reward_heads + 4 || !(1..=2).contains(&header.reward_heads) {
            return Err(Error::Config(format!(
                "critic bundle needs {} networks, got {}",
                header.reward_heads + 4,
                nets.len()
            )));
        }
        let v_c = nets.pop().unwrap();
        let q_c2 = nets.pop().unwrap();
        let q_c1 = nets.pop().unwrap();
        let v_r = nets.pop().unwrap();
        let expect_sa = STATE_DIM + ACTION_DIM;
        let dims_ok = nets.iter().chain([&q_c1, &q_c2]).all(|p| p.spec.input_dim == expect_sa)
            && v_r.spec.input_dim == STATE_DIM
            && v_c.spec.input_dim == STATE_DIM;
        if !dims_ok {
            return Err(Error::Config("critic checkpoint dims do not match the boat task".into()));
        }
        Ok(Self {
            q_r: nets,
            v_r,
            q_c: [q_c1, q_c2],
            v_c,
            gamma: header.gamma,
            tau: header.tau,
            ema_rate: header.ema_rate,
            backup: header.backup,
        })
    }

    /// Policy-facing reward estimate: the first reward head.
    pub fn reward_q_batch(&self, sa: &[f32], n: usize) -> Vec<f32> {
        instrument::add_critic(n);
        self.q_r[0].online.forward_batch(sa, n)
    }

    /// Pessimistic safety estimate `max(Q_c1, Q_c2)`.
    pub fn safety_q_batch(&self, sa: &[f32], n: usize) -> Vec<f32> {
        instrument::add_critic(2 * n);
        let a = self.q_c[0].online.forward_batch(sa, n);
        let b = self.q_c[1].online.forward_batch(sa, n);
        a.into_iter().zip(b).map(|(x, y)| x.max(y)).collect()
    }

    pub fn safety_value_batch(&self, states: &[f32], n: usize) -> Vec<f32> {
        instrument::add_critic(n);
        self.v_c.online.forward_batch(states, n)
    }

    pub fn reward_q(&self, state: &[f32], action: &[f32]) -> f32 {
        instrument::add_critic(1);
        self.q_r[0].online.forward_unchecked(&concat(state, action))[0]
    }

    pub fn safety_q(&self, state: &[f32], action: &[f32]) -> f32 {
        instrument::add_critic(2);
        let sa = concat(state, action);
        self.q_c[0].online.forward_unchecked(&sa)[0].max(self.q_c[1].online.forward_unchecked(&sa)[0])
    }

    pub fn safety_value(&self, state: &[f32]) -> f32 {
        instrument::add_critic(1);
        self.v_c.online.forward_unchecked(state)[0]
    }
}

fn concat(a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// A minibatch of transitions with the in-sample next action attached.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBatch {
    pub len: usize,
    /// `len × (state ‖ action)`
    pub state_actions: Vec<f32>,
    pub states: Vec<f32>,
    pub rewards: Vec<f32>,
    pub safety: Vec<f32>,
    pub next_states: Vec<f32>,
    /// `len × (next_state ‖ next_action)`
    pub next_state_actions: Vec<f32>,
}

impl CriticBatch {
    /// The next action is the dataset's own action at the following step of the
    /// same trajectory; at a trajectory end it is the action of a uniformly
    /// drawn dataset transition.
    pub fn from_dataset<R: Rng + ?Sized>(ds: &TrajectoryDataset, indices: &[usize], rng: &mut R) -> Self {
        let n = indices.len();
        let mut b = CriticBatch {
            len: n,
            state_actions: Vec::with_capacity(n * SA_DIM),
            states: Vec::with_capacity(n * STATE_DIM),
            rewards: Vec::with_capacity(n),
            safety: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n * STATE_DIM),
            next_state_actions: Vec::with_capacity(n * SA_DIM),
        };
        for &i in indices {
            let rec = ds.record(i);
            b.state_actions.extend_from_slice(&rec[0..4]);
            b.states.extend_from_slice(&rec[0..2]);
            b.rewards.push(rec[4]);
            b.safety.push(rec[5]);
            b.next_states.extend_from_slice(&rec[6..8]);
            b.next_state_actions.extend_from_slice(&rec[6..8]);
            let j = ds
                .next_index(i)
                .unwrap_or_else(|| rng.random_range(0..ds.len()));
            b.next_state_actions.extend_from_slice(ds.action(j));
        }
        b
    }

    /// Builds a batch from explicit tuples `(x, a, r, ℓ, x', a')`.
    pub fn from_tuples(tuples: &[([f32; 2], [f32; 2], f32, f32, [f32; 2], [f32; 2])]) -> Self {
        let mut b = CriticBatch {
            len: tuples.len(),
            state_actions: vec![],
            states: vec![],
            rewards: vec![],
            safety: vec![],
            next_states: vec![],
            next_state_actions: vec![],
        };
        for (x, a, r, l, xn, an) in tuples {
            b.state_actions.extend_from_slice(x);
            b.state_actions.extend_from_slice(a);
            b.states.extend_from_slice(x);
            b.rewards.push(*r);
            b.safety.push(*l);
            b.next_states.extend_from_slice(xn);
            b.next_state_actions.extend_from_slice(xn);
            b.next_state_actions.extend_from_slice(an);
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticTargets {
    pub y_r: Vec<f64>,
    pub y_c: Vec<f64>,
    /// Clipped target reward estimate at `(x, a)`, regressed by `V_r`.
    pub q_r_bar: Vec<f64>,
    /// Pessimistic target safety estimate at `(x, a)`, regressed by `V_c`.
    pub q_c_bar: Vec<f64>,
}

/// All regression targets of a batch, read from EMA copies only.
pub fn critic_targets(batch: &CriticBatch, bundle: &CriticBundle) -> CriticTargets {
    let n = batch.len;
    let v_next = bundle.v_r.target.forward_batch(&batch.next_states, n);
    let qc1_next = bundle.q_c[0].target.forward_batch(&batch.next_state_actions, n);
    let qc2_next = bundle.q_c[1].target.forward_batch(&batch.next_state_actions, n);
    let qr_heads: Vec<Vec<f32>> = bundle
        .q_r
        .iter()
        .map(|p| p.target.forward_batch(&batch.state_actions, n))
        .collect();
    let qc1 = bundle.q_c[0].target.forward_batch(&batch.state_actions, n);
    let qc2 = bundle.q_c[1].target.forward_batch(&batch.state_actions, n);
    let mut t = CriticTargets {
        y_r: Vec::with_capacity(n),
        y_c: Vec::with_capacity(n),
        q_r_bar: Vec::with_capacity(n),
        q_c_bar: Vec::with_capacity(n),
    };
    for i in 0..n {
        t.y_r
            .push(reward_q_target(batch.rewards[i] as f64, v_next[i] as f64, bundle.gamma));
        let vc_next = pessimistic_safety_next_value(qc1_next[i] as f64, qc2_next[i] as f64);
        t.y_c
            .push(bundle.backup.target(batch.safety[i] as f64, vc_next, bundle.gamma));
        let q_r = qr_heads
            .iter()
            .map(|h| h[i] as f64)
            .reduce(optimistic_reward_next_value)
            .expect("at least one reward head");
        t.q_r_bar.push(q_r);
        t.q_c_bar
            .push(pessimistic_safety_next_value(qc1[i] as f64, qc2[i] as f64));
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticLosses {
    pub v_r: f64,
    pub q_r: f64,
    pub q_c: f64,
    pub v_c: f64,
}

impl CriticLosses {
    fn is_finite(&self) -> bool {
        [self.v_r, self.q_r, self.q_c, self.v_c].iter().all(|v| v.is_finite())
    }
}

/// Per-network upstream gradients `dL/d(output)` alongside the losses.
struct LossGrads {
    losses: CriticLosses,
    d_q_r: Vec<Vec<f32>>,
    d_v_r: Vec<f32>,
    d_q_c: [Vec<f32>; 2],
    d_v_c: Vec<f32>,
}

struct OnlineOutputs {
    q_r: Vec<ForwardCache>,
    v_r: ForwardCache,
    q_c: [ForwardCache; 2],
    v_c: ForwardCache,
}

fn online_forward(batch: &CriticBatch, bundle: &CriticBundle) -> OnlineOutputs {
    let n = batch.len;
    OnlineOutputs {
        q_r: bundle
            .q_r
            .iter()
            .map(|p| p.online.forward_cached(&batch.state_actions, n))
            .collect(),
        v_r: bundle.v_r.online.forward_cached(&batch.states, n),
        q_c: [
            bundle.q_c[0].online.forward_cached(&batch.state_actions, n),
            bundle.q_c[1].online.forward_cached(&batch.state_actions, n),
        ],
        v_c: bundle.v_c.online.forward_cached(&batch.states, n),
    }
}

fn losses_and_grads(targets: &CriticTargets, out: &OnlineOutputs, tau: f64) -> LossGrads {
    let n = targets.y_r.len();
    let nf = n as f64;
    let heads = out.q_r.len() as f64;

    let mut l_vr = 0.0;
    let mut d_v_r = vec![0.0f32; n];
    let vr = out.v_r.output();
    for i in 0..n {
        let u = targets.q_r_bar[i] - vr[i] as f64;
        l_vr += expectile_loss(u, tau);
        d_v_r[i] = (-expectile_loss_grad(u, tau) / nf) as f32;
    }

    let mut l_qr = 0.0;
    let mut d_q_r = Vec::with_capacity(out.q_r.len());
    for cache in &out.q_r {
        let q = cache.output();
        let mut d = vec![0.0f32; n];
        for i in 0..n {
            let e = q[i] as f64 - targets.y_r[i];
            l_qr += e * e;
            d[i] = (2.0 * e / (nf * heads)) as f32;
        }
        d_q_r.push(d);
    }

    let mut l_qc = 0.0;
    let mut d_q_c: [Vec<f32>; 2] = [vec![0.0; n], vec![0.0; n]];
    for (cache, d) in out.q_c.iter().zip(d_q_c.iter_mut()) {
        let q = cache.output();
        for i in 0..n {
            let e = q[i] as f64 - targets.y_c[i];
            l_qc += e * e;
            d[i] = (2.0 * e / (nf * 2.0)) as f32;
        }
    }

    // lower expectile: the loss is applied to the mirrored residual V_c − Q_c
    let mut l_vc = 0.0;
    let mut d_v_c = vec![0.0f32; n];
    let vc = out.v_c.output();
    for i in 0..n {
        let w = vc[i] as f64 - targets.q_c_bar[i];
        l_vc += expectile_loss(w, tau);
        d_v_c[i] = (expectile_loss_grad(w, tau) / nf) as f32;
    }

    LossGrads {
        losses: CriticLosses {
            v_r: l_vr / nf,
            q_r: l_qr / (nf * heads),
            q_c: l_qc / (nf * 2.0),
            v_c: l_vc / nf,
        },
        d_q_r,
        d_v_r,
        d_q_c,
        d_v_c,
    }
}

/// `(L_Vr, L_Qr, L_Qc, L_Vc)` on a batch, without updating anything.
pub fn critic_losses(batch: &CriticBatch, bundle: &CriticBundle) -> Result<CriticLosses> {
    if batch.len == 0 {
        return Err(Error::Usage("critic losses need a non-empty batch".into()));
    }
    let targets = critic_targets(batch, bundle);
    let out = online_forward(batch, bundle);
    Ok(losses_and_grads(&targets, &out, bundle.tau).losses)
}

/// One gradient step on all critics followed by EMA target updates.
pub fn critic_update(bundle: &mut CriticBundle, batch: &CriticBatch, lr: f32) -> Result<CriticLosses> {
    if batch.len == 0 {
        return Err(Error::Usage("critic update needs a non-empty batch".into()));
    }
    let targets = critic_targets(batch, bundle);
    let out = online_forward(batch, bundle);
    let lg = losses_and_grads(&targets, &out, bundle.tau);
    if !lg.losses.is_finite() {
        return Ok(lg.losses);
    }
    for ((p, cache), d) in bundle.q_r.iter_mut().zip(&out.q_r).zip(&lg.d_q_r) {
        let g = p.online.param_grads_batch(cache, d);
        p.adam_step(&g, lr)?;
    }
    let g = bundle.v_r.online.param_grads_batch(&out.v_r, &lg.d_v_r);
    bundle.v_r.adam_step(&g, lr)?;
    for k in 0..2 {
        let g = bundle.q_c[k].online.param_grads_batch(&out.q_c[k], &lg.d_q_c[k]);
        bundle.q_c[k].adam_step(&g, lr)?;
    }
    let g = bundle.v_c.online.param_grads_batch(&out.v_c, &lg.d_v_c);
    bundle.v_c.adam_step(&g, lr)?;

    let rate = bundle.ema_rate;
    for p in bundle.q_r.iter_mut() {
        p.ema_update(rate)?;
    }
    bundle.v_r.ema_update(rate)?;
    bundle.q_c[0].ema_update(rate)?;
    bundle.q_c[1].ema_update(rate)?;
    bundle.v_c.ema_update(rate)?;
    Ok(lg.losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticMetrics {
    pub step: usize,
    pub v_r: f64,
    pub q_r: f64,
    pub q_c: f64,
    pub v_c: f64,
}

#[derive(Debug, Clone)]
pub struct CriticTraining {
    pub bundle: CriticBundle,
    pub metrics: Vec<CriticMetrics>,
}

pub fn train_critics(ds: &TrajectoryDataset, cfg: &CriticConfig) -> Result<CriticTraining> {
    train_critics_from(CriticBundle::new(cfg)?, ds, cfg)
}

/// Continues training an existing bundle.
pub fn train_critics_from(
    mut bundle: CriticBundle,
    ds: &TrajectoryDataset,
    cfg: &CriticConfig,
) -> Result<CriticTraining> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Usage("critic training needs a non-empty dataset".into()));
    }
    // resumed runs draw a fresh stream keyed by the optimizer step
    let mut rng = rng::stream(cfg.seed.wrapping_add(bundle.v_r.step), 1);
    let mut metrics = Vec::new();
    let mut indices = vec![0usize; cfg.batch_size];
    for step in 1..=cfg.steps {
        for i in indices.iter_mut() {
            *i = rng.random_range(0..ds.len());
        }
        let batch = CriticBatch::from_dataset(ds, &indices, &mut rng);
        let losses = critic_update(&mut bundle, &batch, cfg.lr)?;
        if !losses.is_finite() {
            return Err(Error::Divergence {
                phase: "critic",
                step,
                detail: format!("{losses:?}"),
            });
        }
        if step % cfg.log_every == 0 || step == cfg.steps {
            metrics.push(CriticMetrics {
                step,
                v_r: losses.v_r,
                q_r: losses.q_r,
                q_c: losses.q_c,
                v_c: losses.v_c,
            });
        }
    }
    Ok(CriticTraining { bundle, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_dataset;
    use crate::nn::{Dense, Mlp};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn expectile_examples() {
        assert!(close(expectile_loss(2.0, 0.9), 3.6, 1e-12));
        assert!(close(expectile_loss(-2.0, 0.9), 0.4, 1e-12));
        assert_eq!(expectile_loss(0.0, 0.9), 0.0);
    }

    #[test]
    fn expectile_grad_matches_difference_quotient() {
        for &u in &[-1.3, -0.2, 0.4, 2.0] {
            let h = 1e-6;
            let fd = (expectile_loss(u + h, 0.9) - expectile_loss(u - h, 0.9)) / (2.0 * h);
            assert!(close(expectile_loss_grad(u, 0.9), fd, 1e-6));
        }
    }

    #[test]
    fn reward_target_examples() {
        assert!(close(reward_q_target(-0.1, -1.0, 0.99), -1.09, 1e-12));
        assert_eq!(reward_q_target(-0.3, 5.0, 0.0), -0.3);
        assert_eq!(reward_q_target(0.0, 0.0, 0.99), 0.0);
    }

    #[test]
    fn safety_target_examples() {
        assert_eq!(safety_q_target(0.3, -0.5, 0.99), 0.3);
        assert!(close(safety_q_target(-0.4, -0.2, 0.99), -0.198, 1e-12));
        for v in [0.0, 0.3, 2.0] {
            assert_eq!(safety_q_target(-0.4, v, 0.99), 0.99 * v);
        }
    }

    #[test]
    fn double_q_aggregation_examples() {
        assert_eq!(pessimistic_safety_next_value(-0.3, -0.1), -0.1);
        assert_eq!(pessimistic_safety_next_value(0.2, -0.5), 0.2);
        assert_eq!(pessimistic_safety_next_value(0.7, 0.7), 0.7);
        assert_eq!(optimistic_reward_next_value(1.0, 0.7), 0.7);
        assert_eq!(optimistic_reward_next_value(-2.0, -1.0), -2.0);
        assert_eq!(optimistic_reward_next_value(0.7, 0.7), 0.7);
    }

    #[test]
    fn discounted_reach_target_properties() {
        assert_eq!(discounted_reach_target(0.3, -0.5, 0.99), 0.3);
        // constant margin is a fixed point
        assert!(close(discounted_reach_target(-0.4, -0.4, 0.99), -0.4, 1e-12));
        assert_eq!(discounted_reach_target(-0.4, 1.0, 0.0), -0.4);
        assert_eq!(SafetyBackup::Max.target(-0.4, -0.2, 0.99), safety_q_target(-0.4, -0.2, 0.99));
    }

    #[test]
    fn config_validation() {
        let mut c = CriticConfig::default();
        c.validate().unwrap();
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        let c = CriticConfig {
            tau: 0.4,
            ..CriticConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn tiny_bundle(q_r: f32, v_r: f32, q_c: f32, v_c: f32) -> CriticBundle {
        // one hidden unit with a large bias keeps the ReLU in its linear
        // region; output = w2·(w1·x + 10) + b2 with w1 = 0 is a constant
        let constant = |c: f32, in_dim: usize| {
            let spec = LayerSpec::new(in_dim, vec![1], 1);
            let net = Mlp {
                layers: vec![
                    Dense {
                        in_dim,
                        out_dim: 1,
                        weights: vec![0.0; in_dim],
                        biases: vec![10.0],
                    },
                    Dense {
                        in_dim: 1,
                        out_dim: 1,
                        weights: vec![0.0],
                        biases: vec![c],
                    },
                ],
            };
            ParamSet::from_online(spec, net)
        };
        CriticBundle {
            q_r: vec![constant(q_r, 4)],
            v_r: constant(v_r, 2),
            q_c: [constant(q_c, 4), constant(q_c, 4)],
            v_c: constant(v_c, 2),
            gamma: 0.99,
            tau: 0.9,
            ema_rate: 0.005,
            backup: SafetyBackup::Max,
        }
    }

    #[test]
    fn value_loss_example() {
        let b = tiny_bundle(1.0, 0.0, 0.0, 0.0);
        let batch = CriticBatch::from_tuples(&[([0.0, 0.0], [0.0, 0.0], 0.0, -1.0, [0.0, 0.0], [0.0, 0.0])]);
        let l = critic_losses(&batch, &b).unwrap();
        assert!(close(l.v_r, 0.9, 1e-7));
    }

    #[test]
    fn safety_q_loss_zero_at_fixed_point() {
        // ℓ = 0.2 dominates γ·Q̄_c = 0.99·0.2, so y_c = 0.2 = Q_c
        let b = tiny_bundle(0.0, 0.0, 0.2, 0.0);
        let batch = CriticBatch::from_tuples(&[([0.0, 0.0], [0.0, 0.0], 0.0, 0.2, [0.0, 0.0], [0.0, 0.0])]);
        let l = critic_losses(&batch, &b).unwrap();
        assert!(l.q_c.abs() < 1e-12);
    }

    #[test]
    fn single_transition_hand_trace() {
        // Linear-through-ReLU critics: each network is w2·relu(w1·in + b1) + b2.
        let lin = |w1: Vec<f32>, b1: f32, w2: f32, b2: f32| {
            let in_dim = w1.len();
            ParamSet::from_online(
                LayerSpec::new(in_dim, vec![1], 1),
                Mlp {
                    layers: vec![
                        Dense {
                            in_dim,
                            out_dim: 1,
                            weights: w1,
                            biases: vec![b1],
                        },
                        Dense {
                            in_dim: 1,
                            out_dim: 1,
                            weights: vec![w2],
                            biases: vec![b2],
                        },
                    ],
                },
            )
        };
        let bundle = CriticBundle {
            q_r: vec![lin(vec![0.5, -0.25, 1.0, 0.0], 1.0, 2.0, -3.0)],
            v_r: lin(vec![1.0, 0.5], 2.0, -1.0, 0.5),
            q_c: [
                lin(vec![0.2, 0.1, 0.0, 0.3], 0.5, 1.0, -1.0),
                lin(vec![-0.1, 0.4, 0.2, 0.0], 0.7, 0.5, -0.6),
            ],
            v_c: lin(vec![0.3, -0.2], 1.0, 1.0, -0.9),
            gamma: 0.99,
            tau: 0.9,
            ema_rate: 0.005,
            backup: SafetyBackup::Max,
        };
        let (x, a, r, l, xn, an) = ([0.4f32, -0.6], [0.3f32, 0.8], -0.2f32, -0.35f32, [0.41f32, -0.596], [-0.5f32, 0.1]);
        let batch = CriticBatch::from_tuples(&[(x, a, r, l, xn, an)]);

        // hand evaluation in f64
        let f = |w1: &[f64], b1: f64, w2: f64, b2: f64, inp: &[f64]| {
            let h: f64 = w1.iter().zip(inp).map(|(w, v)| w * v).sum::<f64>() + b1;
            w2 * h.max(0.0) + b2
        };
        let sa: Vec<f64> = x.iter().chain(&a).map(|&v| v as f64).collect();
        let s: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let san: Vec<f64> = xn.iter().chain(&an).map(|&v| v as f64).collect();
        let sn: Vec<f64> = xn.iter().map(|&v| v as f64).collect();
        let qr = f(&[0.5, -0.25, 1.0, 0.0], 1.0, 2.0, -3.0, &sa);
        let vr = f(&[1.0, 0.5], 2.0, -1.0, 0.5, &s);
        let vr_next = f(&[1.0, 0.5], 2.0, -1.0, 0.5, &sn);
        let qc1 = f(&[0.2, 0.1, 0.0, 0.3], 0.5, 1.0, -1.0, &sa);
        let qc2 = f(&[-0.1, 0.4, 0.2, 0.0], 0.7, 0.5, -0.6, &sa);
        let qc1n = f(&[0.2, 0.1, 0.0, 0.3], 0.5, 1.0, -1.0, &san);
        let qc2n = f(&[-0.1, 0.4, 0.2, 0.0], 0.7, 0.5, -0.6, &san);
        let vc = f(&[0.3, -0.2], 1.0, 1.0, -0.9, &s);

        let y_r = r as f64 + 0.99 * vr_next;
        let y_c = (l as f64).max(0.99 * qc1n.max(qc2n));
        let u_r = qr - vr;
        let l_vr = if u_r < 0.0 { 0.1 } else { 0.9 } * u_r * u_r;
        let l_qr = (qr - y_r).powi(2);
        let l_qc = ((qc1 - y_c).powi(2) + (qc2 - y_c).powi(2)) / 2.0;
        let w = vc - qc1.max(qc2);
        let l_vc = if w < 0.0 { 0.1 } else { 0.9 } * w * w;

        let got = critic_losses(&batch, &bundle).unwrap();
        assert!(close(got.v_r, l_vr, 1e-6), "{} vs {}", got.v_r, l_vr);
        assert!(close(got.q_r, l_qr, 1e-6), "{} vs {}", got.q_r, l_qr);
        assert!(close(got.q_c, l_qc, 1e-6), "{} vs {}", got.q_c, l_qc);
        assert!(close(got.v_c, l_vc, 1e-6), "{} vs {}", got.v_c, l_vc);
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let b = tiny_bundle(0.0, 0.0, 0.0, 0.0);
        let batch = CriticBatch::from_tuples(&[]);
        assert!(matches!(critic_losses(&batch, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn targets_read_only_ema_copies() {
        let ds = generate_dataset(4, 10, 0.005, 1).unwrap();
        let cfg = CriticConfig {
            hidden: vec![8, 8],
            ..CriticConfig::default()
        };
        let bundle = CriticBundle::new(&cfg).unwrap();
        let mut rng = rng::stream(0, 0);
        let batch = CriticBatch::from_dataset(&ds, &[0, 5, 9, 17, 33], &mut rng);
        let base = critic_targets(&batch, &bundle);

        let mut online_moved = bundle.clone();
        for p in online_moved.q_c.iter_mut().chain([&mut online_moved.v_r]) {
            for v in p.online.values_mut() {
                *v += 0.3;
            }
        }
        assert_eq!(critic_targets(&batch, &online_moved), base);

        let mut target_moved = bundle.clone();
        for p in target_moved.q_c.iter_mut().chain([&mut target_moved.v_r]) {
            for v in p.target.values_mut() {
                *v += 0.3;
            }
        }
        let moved = critic_targets(&batch, &target_moved);
        assert_ne!(moved.y_r, base.y_r);
        assert_ne!(moved.y_c, base.y_c);
    }

    #[test]
    fn next_action_comes_from_same_trajectory() {
        let ds = generate_dataset(3, 4, 0.005, 2).unwrap();
        let mut rng = rng::stream(0, 0);
        let b = CriticBatch::from_dataset(&ds, &[1], &mut rng);
        assert_eq!(&b.next_state_actions[0..2], ds.next_state(1));
        assert_eq!(&b.next_state_actions[2..4], ds.action(2));
    }

    #[test]
    fn constant_transition_reward_q_converges() {
        // γ → 0 limit: y_r = r for a single repeated transition
        let rec = vec![0.2f32, -0.4, 0.1, 0.3, -0.37, -0.5, 0.21, -0.4];
        let meta = crate::env::DatasetMeta {
            n_traj: 1,
            horizon: 1,
            dt: 0.005,
            seed: 0,
        };
        let ds = TrajectoryDataset::from_records(meta, rec).unwrap();
        let cfg = CriticConfig {
            hidden: vec![16, 16],
            gamma: 1e-9,
            batch_size: 8,
            steps: 3000,
            lr: 1e-3,
            log_every: 500,
            ..CriticConfig::default()
        };
        let out = train_critics(&ds, &cfg).unwrap();
        let q = out.bundle.reward_q(&[0.2, -0.4], &[0.1, 0.3]);
        assert!((q as f64 + 0.37).abs() < 1e-3, "Q_r = {q}");
        assert_eq!(out.metrics.last().unwrap().step, 3000);
    }

    #[test]
    fn failure_everywhere_keeps_safety_q_above_margin() {
        // every state sits inside the failure set with ℓ = c
        let c = 0.3f32;
        let mut records = Vec::new();
        let mut rng = rng::stream(4, 0);
        for _ in 0..64 {
            let x = [rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)];
            let a = [rng.random_range(-0.7f32..0.7), rng.random_range(-0.7f32..0.7)];
            records.extend_from_slice(&[x[0], x[1], a[0], a[1], -0.1, c, x[0] + 0.01, x[1]]);
        }
        let meta = crate::env::DatasetMeta {
            n_traj: 64,
            horizon: 1,
            dt: 0.005,
            seed: 0,
        };
        let ds = TrajectoryDataset::from_records(meta, records).unwrap();
        for backup in [SafetyBackup::Max, SafetyBackup::DiscountedReach] {
            let cfg = CriticConfig {
                hidden: vec![16, 16],
                batch_size: 32,
                steps: 3000,
                lr: 1e-3,
                backup,
                log_every: 1000,
                ..CriticConfig::default()
            };
            let out = train_critics(&ds, &cfg).unwrap();
            for i in 0..ds.len() {
                let q = out.bundle.safety_q(ds.state(i), ds.action(i));
                assert!(q >= c - 0.02, "{backup:?}: Q_c {q} below margin");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn max_backup_is_monotone(l in -2.0f64..2.0, v in -2.0f64..2.0, dl in 0.0f64..1.0, dv in 0.0f64..1.0, g in 0.01f64..0.999) {
                let y = safety_q_target(l, v, g);
                prop_assert!(y >= l && y >= g * v);
                prop_assert!(safety_q_target(l + dl, v, g) >= y);
                prop_assert!(safety_q_target(l, v + dv, g) >= y);
                let z = discounted_reach_target(l, v, g);
                prop_assert!(z >= l - 1e-12);
                prop_assert!(discounted_reach_target(l + dl, v, g) >= z);
                prop_assert!(discounted_reach_target(l, v + dv, g) >= z);
            }

            #[test]
            fn expectile_asymmetry(u in 0.001f64..10.0, tau in 0.51f64..0.99) {
                let ratio = expectile_loss(u, tau) / expectile_loss(-u, tau);
                prop_assert!((ratio - tau / (1.0 - tau)).abs() < 1e-9 * ratio.max(1.0));
            }

            #[test]
            fn pessimism_never_decreases(q1 in -2.0f64..2.0, q2 in -2.0f64..2.0, d in 0.0f64..1.0) {
                let v = pessimistic_safety_next_value(q1, q2);
                prop_assert!(pessimistic_safety_next_value(q1 + d, q2) >= v);
                prop_assert!(pessimistic_safety_next_value(q1, q2 + d) >= v);
            }
        }
    }
}
