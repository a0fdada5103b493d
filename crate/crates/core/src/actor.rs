//! Phase 3: one-step student actor and deployment-time action selection.
//!
//! The actor maps `(x, z)` to an action in a single forward pass. Training
//! distills the frozen flow teacher while a binary feasibility gate switches
//! each sample between reward ascent (`Q_c < 0`) and safety recovery
//! (`Q_c ≥ 0`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critics::CriticBundle;
use crate::env::{ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::flow::{cosine_lr, integrate_flow, integrate_flow_batch, project_unit_ball, BehaviorData, VelocityField};
use crate::instrument;
use crate::nn::{LayerSpec, ParamSet};
use crate::rng;

/// Frozen critics as seen by the policy: values plus action gradients.
pub trait PolicyCritics {
    /// Reward estimate per row and `∂Q_r/∂a` (`n × action_dim`).
    fn reward_with_grad(&self, states: &[f32], actions: &[f32], n: usize) -> (Vec<f32>, Vec<f32>);
    /// Pessimistic safety estimate per row and its action gradient.
    fn safety_with_grad(&self, states: &[f32], actions: &[f32], n: usize) -> (Vec<f32>, Vec<f32>);
    fn reward_q(&self, state: &[f32], action: &[f32]) -> f32;
    fn safety_q(&self, state: &[f32], action: &[f32]) -> f32;
}

fn state_actions(states: &[f32], actions: &[f32], n: usize) -> Vec<f32> {
    let mut sa = Vec::with_capacity(n * (STATE_DIM + ACTION_DIM));
    for i in 0..n {
        sa.extend_from_slice(&states[i * STATE_DIM..(i + 1) * STATE_DIM]);
        sa.extend_from_slice(&actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
    }
    sa
}

fn value_and_action_grad(net: &crate::nn::Mlp, sa: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
    let cache = net.forward_cached(sa, n);
    let dx = net.input_grad_batch(&cache, &vec![1.0; n]);
    let grads = dx
        .chunks_exact(STATE_DIM + ACTION_DIM)
        .flat_map(|row| row[STATE_DIM..].to_vec())
        .collect();
    (cache.output().to_vec(), grads)
}

impl PolicyCritics for CriticBundle {
    fn reward_with_grad(&self, states: &[f32], actions: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
        instrument::add_critic(n);
        value_and_action_grad(&self.q_r[0].online, &state_actions(states, actions, n), n)
    }

    fn safety_with_grad(&self, states: &[f32], actions: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
        instrument::add_critic(2 * n);
        let sa = state_actions(states, actions, n);
        let (v1, g1) = value_and_action_grad(&self.q_c[0].online, &sa, n);
        let (v2, g2) = value_and_action_grad(&self.q_c[1].online, &sa, n);
        let mut v = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n * ACTION_DIM);
        for i in 0..n {
            let (val, grad) = if v1[i] >= v2[i] { (v1[i], &g1) } else { (v2[i], &g2) };
            v.push(val);
            g.extend_from_slice(&grad[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
        }
        (v, g)
    }

    fn reward_q(&self, state: &[f32], action: &[f32]) -> f32 {
        CriticBundle::reward_q(self, state, action)
    }

    fn safety_q(&self, state: &[f32], action: &[f32]) -> f32 {
        CriticBundle::safety_q(self, state, action)
    }
}

/// `ζ = 1{q_c < 0}`; the boundary counts as infeasible.
pub fn feasibility_gate(q_c: f64) -> bool {
    q_c < 0.0
}

/// `λ·distill + ζ·(−q_r) + (1 − ζ)·max(0, q_c)`
pub fn gated_sample_loss(distill: f64, q_r: f64, q_c: f64, lambda: f64) -> f64 {
    let safety = if feasibility_gate(q_c) { -q_r } else { q_c.max(0.0) };
    lambda * distill + safety
}

/// `−q_r + η·max(0, q_c) + λ·distill`
pub fn naive_lagrangian_sample_loss(distill: f64, q_r: f64, q_c: f64, lambda: f64, eta: f64) -> f64 {
    -q_r + eta * q_c.max(0.0) + lambda * distill
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorObjective {
    #[default]
    Gated,
    NaiveLagrangian,
}

/// What the student regresses onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillTarget {
    /// `z + v(x, z, 0)`
    #[default]
    OneStep,
    /// The full `K`-step Euler integral.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStepActor {
    pub net: ParamSet,
    pub lambda: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorHeader {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub eta: f64,
}

impl OneStepActor {
    pub fn new(hidden: Vec<usize>, lambda: f64, eta: f64, seed: u64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidSpec(format!("lambda {lambda} must be finite and >= 0")));
        }
        let spec = LayerSpec::new(STATE_DIM + ACTION_DIM, hidden, ACTION_DIM);
        Ok(Self {
            net: ParamSet::init(&spec, seed)?,
            lambda,
            eta,
        })
    }

    pub fn header(&self) -> ActorHeader {
        ActorHeader {
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            hidden: self.net.spec.hidden.clone(),
            lambda: self.lambda,
            eta: self.eta,
        }
    }

    pub fn from_parts(header: &ActorHeader, net: ParamSet) -> Result<Self> {
        if net.spec.input_dim != STATE_DIM + ACTION_DIM || net.spec.output_dim != ACTION_DIM {
            return Err(Error::Config("actor checkpoint does not match the boat task".into()));
        }
        Ok(Self {
            net,
            lambda: header.lambda,
            eta: header.eta,
        })
    }

    /// Network output before projection.
    pub fn raw_action(&self, state: &[f32], z: &[f32]) -> Vec<f32> {
        instrument::add_actor(1);
        let mut inp = [0.0f32; STATE_DIM + ACTION_DIM];
        inp[..STATE_DIM].copy_from_slice(state);
        inp[STATE_DIM..].copy_from_slice(z);
        self.net.online.forward_unchecked(&inp)
    }
}

/// `μ_ω(x, z)` projected onto the unit disk. Deterministic in `(x, z)`.
pub fn student_action(actor: &OneStepActor, state: &[f32], z: &[f32]) -> Vec<f32> {
    let mut a = actor.raw_action(state, z);
    project_unit_ball(&mut a);
    a
}

/// Fresh `z ~ N(0, I)` and one actor forward; no critic or teacher involved.
pub fn deploy_action<R: Rng + ?Sized>(actor: &OneStepActor, state: &[f32], rng: &mut R) -> Vec<f32> {
    let mut z = [0.0f32; ACTION_DIM];
    rng::fill_normal(rng, &mut z);
    student_action(actor, state, &z)
}

/// Index of the reward-maximizing candidate among those with `q_c < delta`,
/// or of the smallest `q_c` when none qualifies.
pub fn select_candidate(q_r: &[f32], q_c: &[f32], delta: f32) -> usize {
    let mut best: Option<usize> = None;
    for i in 0..q_r.len() {
        if q_c[i] < delta && best.is_none_or(|b| q_r[i] > q_r[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or_else(|| {
        (0..q_c.len())
            .min_by(|&a, &b| q_c[a].total_cmp(&q_c[b]))
            .unwrap_or(0)
    })
}

/// Draws `n` flow samples one at a time (`n·k` velocity forwards, `3n` critic
/// forwards) and picks one with [`select_candidate`].
pub fn rejection_sampling_action<V, C, R>(
    teacher: &V,
    k: usize,
    critics: &C,
    state: &[f32],
    n: usize,
    delta: f32,
    rng: &mut R,
) -> Result<Vec<f32>>
where
    V: VelocityField + ?Sized,
    C: PolicyCritics + ?Sized,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::Usage("rejection sampling needs n >= 1".into()));
    }
    let mut cands = Vec::with_capacity(n);
    let mut q_r = Vec::with_capacity(n);
    let mut q_c = Vec::with_capacity(n);
    let mut z = vec![0.0f32; teacher.action_dim()];
    for _ in 0..n {
        rng::fill_normal(rng, &mut z);
        let a = integrate_flow(teacher, state, &z, k)?;
        q_r.push(critics.reward_q(state, &a));
        q_c.push(critics.safety_q(state, &a));
        cands.push(a);
    }
    Ok(cands.swap_remove(select_candidate(&q_r, &q_c, delta)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActorConfig {
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub eta: f64,
    pub objective: ActorObjective,
    pub distill_target: DistillTarget,
    pub lr: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_decay: bool,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            lambda: 1.0,
            eta: 5.0,
            objective: ActorObjective::Gated,
            distill_target: DistillTarget::OneStep,
            lr: 3e-4,
            batch_size: 256,
            steps: 100_000,
            seed: 0,
            log_every: 1000,
            cosine_decay: false,
        }
    }
}

impl ActorConfig {
    pub fn lr_at(&self, step: usize) -> f32 {
        if self.cosine_decay {
            cosine_lr(self.lr, step, self.steps)
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.objective == ActorObjective::NaiveLagrangian && !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta {} must be > 0 for the Lagrangian ablation", self.eta)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("actor batch_size and log_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("actor learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorBatch {
    pub len: usize,
    pub states: Vec<f32>,
    pub noise: Vec<f32>,
}

impl ActorBatch {
    pub fn sample<D: BehaviorData + ?Sized, R: Rng + ?Sized>(data: &D, size: usize, rng: &mut R) -> Self {
        let mut states = Vec::with_capacity(size * STATE_DIM);
        for _ in 0..size {
            states.extend_from_slice(data.state(rng.random_range(0..data.len())));
        }
        Self {
            len: size,
            states,
            noise: rng::normal_vec(rng, size * ACTION_DIM),
        }
    }

    fn inputs(&self) -> Vec<f32> {
        state_actions(&self.states, &self.noise, self.len)
    }
}

/// Batch means of the actor objective and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorLoss {
    pub total: f64,
    pub distill: f64,
    /// Mean of `ζ·(−Q_r)` (or `−Q_r` for the ablation).
    pub reward_term: f64,
    /// Mean of `(1 − ζ)·max(0, Q_c)` (or `η·max(0, Q_c)`).
    pub safety_term: f64,
    pub gate_open_fraction: f64,
}

/// Per-sample coefficients on the reward and safety terms of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub step: usize,
    pub reward_coef: Vec<f32>,
    pub safety_coef: Vec<f32>,
}

impl GateRecord {
    /// Samples where both or neither of the two terms carry weight.
    pub fn exclusivity_violations(&self) -> usize {
        self.reward_coef
            .iter()
            .zip(&self.safety_coef)
            .filter(|(r, s)| (**r != 0.0) == (**s != 0.0))
            .count()
    }
}

struct Evaluation {
    loss: ActorLoss,
    cache: crate::nn::ForwardCache,
    d_raw: Vec<f32>,
    gates: GateRecord,
}

fn teacher_targets<V: VelocityField + ?Sized>(
    teacher: &V,
    k: usize,
    target: DistillTarget,
    batch: &ActorBatch,
) -> Result<Vec<f32>> {
    let steps = match target {
        DistillTarget::OneStep => 1,
        DistillTarget::Full => k,
    };
    integrate_flow_batch(teacher, &batch.states, &batch.noise, batch.len, steps)
}

fn evaluate<C>(
    actor: &OneStepActor,
    objective: ActorObjective,
    critics: &C,
    targets: &[f32],
    batch: &ActorBatch,
) -> Evaluation
where
    C: PolicyCritics + ?Sized,
{
    let n = batch.len;
    let nf = n as f64;
    let cache = actor.net.online.forward_cached(&batch.inputs(), n);
    let raw = cache.output().to_vec();
    let mut act = raw.clone();
    let mut norms = vec![1.0f32; n];
    for (row, norm) in act.chunks_exact_mut(ACTION_DIM).zip(norms.iter_mut()) {
        *norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        project_unit_ball(row);
    }
    let (q_r, g_r) = critics.reward_with_grad(&batch.states, &act, n);
    let (q_c, g_c) = critics.safety_with_grad(&batch.states, &act, n);

    let mut loss = ActorLoss {
        total: 0.0,
        distill: 0.0,
        reward_term: 0.0,
        safety_term: 0.0,
        gate_open_fraction: 0.0,
    };
    let mut gates = GateRecord {
        step: 0,
        reward_coef: Vec::with_capacity(n),
        safety_coef: Vec::with_capacity(n),
    };
    let mut d_raw = vec![0.0f32; n * ACTION_DIM];
    for i in 0..n {
        let row = i * ACTION_DIM..(i + 1) * ACTION_DIM;
        let distill: f64 = raw[row.clone()]
            .iter()
            .zip(&targets[row.clone()])
            .map(|(r, t)| ((r - t) as f64).powi(2))
            .sum();
        let (qr, qc) = (q_r[i] as f64, q_c[i] as f64);
        let open = feasibility_gate(qc);
        // coefficients on −Q_r and max(0, Q_c); the gate is held constant
        let (w_r, w_c) = match objective {
            ActorObjective::Gated => {
                if open {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            ActorObjective::NaiveLagrangian => (1.0, actor.eta),
        };
        gates.reward_coef.push(w_r as f32);
        gates.safety_coef.push(w_c as f32);
        let reward_term = -w_r * qr;
        let safety_term = w_c * qc.max(0.0);
        loss.distill += distill;
        loss.reward_term += reward_term;
        loss.safety_term += safety_term;
        loss.gate_open_fraction += open as u8 as f64;

        // dL/da on the projected action
        let hinge = if qc > 0.0 { w_c } else { 0.0 };
        let mut da = [0.0f32; ACTION_DIM];
        for (d, j) in da.iter_mut().zip(row.clone()) {
            *d = ((-w_r * g_r[j] as f64 + hinge * g_c[j] as f64) / nf) as f32;
        }
        // back through the radial projection: Jᵀ = (I − p·pᵀ)/‖u‖ outside the ball
        let u = norms[i];
        if u > 1.0 {
            let p = &act[row.clone()];
            let dot: f32 = p.iter().zip(&da).map(|(p, d)| p * d).sum();
            for (d, pj) in da.iter_mut().zip(p) {
                *d = (*d - pj * dot) / u;
            }
        }
        for (k, j) in row.enumerate() {
            let g_distill = 2.0 * actor.lambda * (raw[j] - targets[j]) as f64 / nf;
            d_raw[j] = g_distill as f32 + da[k];
        }
    }
    loss.distill /= nf;
    loss.reward_term /= nf;
    loss.safety_term /= nf;
    loss.gate_open_fraction /= nf;
    loss.total = actor.lambda * loss.distill + loss.reward_term + loss.safety_term;
    Evaluation {
        loss,
        cache,
        d_raw,
        gates,
    }
}

/// Batch objective under `cfg.objective`, without updating the actor.
pub fn actor_loss<V, C>(
    actor: &OneStepActor,
    objective: ActorObjective,
    distill_target: DistillTarget,
    critics: &C,
    teacher: &V,
    k: usize,
    batch: &ActorBatch,
) -> Result<ActorLoss>
where
    V: VelocityField + ?Sized,
    C: PolicyCritics + ?Sized,
{
    if batch.len == 0 {
        return Err(Error::Usage("actor loss needs a non-empty batch".into()));
    }
    let targets = teacher_targets(teacher, k, distill_target, batch)?;
    Ok(evaluate(actor, objective, critics, &targets, batch).loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorMetrics {
    pub step: usize,
    pub gate_open_fraction: f64,
    pub distill_loss: f64,
    pub reward_term: f64,
    pub safety_term: f64,
}

#[derive(Debug, Clone)]
pub struct ActorTraining {
    pub actor: OneStepActor,
    pub metrics: Vec<ActorMetrics>,
}

pub fn train_actor<D, V, C>(data: &D, critics: &C, teacher: &V, k: usize, cfg: &ActorConfig) -> Result<ActorTraining>
where
    D: BehaviorData + ?Sized,
    V: VelocityField + ?Sized,
    C: PolicyCritics + ?Sized,
{
    train_actor_observed(data, critics, teacher, k, cfg, |_, _| {})
}

/// [`train_actor`] with a hook that sees every update's per-sample gate
/// coefficients and batch losses.
pub fn train_actor_observed<D, V, C, F>(
    data: &D,
    critics: &C,
    teacher: &V,
    k: usize,
    cfg: &ActorConfig,
    observe: F,
) -> Result<ActorTraining>
where
    D: BehaviorData + ?Sized,
    V: VelocityField + ?Sized,
    C: PolicyCritics + ?Sized,
    F: FnMut(&GateRecord, &ActorLoss),
{
    let actor = OneStepActor::new(cfg.hidden.clone(), cfg.lambda, cfg.eta, cfg.seed.wrapping_add(0xac))?;
    train_actor_from(actor, data, critics, teacher, k, cfg, observe)
}

/// Continues training an existing actor for `cfg.steps` more updates.
pub fn train_actor_from<D, V, C, F>(
    mut actor: OneStepActor,
    data: &D,
    critics: &C,
    teacher: &V,
    k: usize,
    cfg: &ActorConfig,
    mut observe: F,
) -> Result<ActorTraining>
where
    D: BehaviorData + ?Sized,
    V: VelocityField + ?Sized,
    C: PolicyCritics + ?Sized,
    F: FnMut(&GateRecord, &ActorLoss),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("actor training needs a non-empty dataset".into()));
    }
    actor.lambda = cfg.lambda;
    actor.eta = cfg.eta;
    let mut rng = rng::stream(cfg.seed.wrapping_add(actor.net.step), 3);
    let mut metrics = Vec::new();
    for step in 1..=cfg.steps {
        let batch = ActorBatch::sample(data, cfg.batch_size, &mut rng);
        let targets = teacher_targets(teacher, k, cfg.distill_target, &batch)?;
        let mut ev = evaluate(&actor, cfg.objective, critics, &targets, &batch);
        if !ev.loss.total.is_finite() {
            return Err(Error::Divergence {
                phase: "actor",
                step,
                detail: format!("{:?}", ev.loss),
            });
        }
        ev.gates.step = step;
        observe(&ev.gates, &ev.loss);
        let g = actor.net.online.param_grads_batch(&ev.cache, &ev.d_raw);
        actor.net.adam_step(&g, cfg.lr_at(step))?;
        if step % cfg.log_every == 0 || step == cfg.steps {
            metrics.push(ActorMetrics {
                step,
                gate_open_fraction: ev.loss.gate_open_fraction,
                distill_loss: ev.loss.distill,
                reward_term: ev.loss.reward_term,
                safety_term: ev.loss.safety_term,
            });
        }
    }
    Ok(ActorTraining { actor, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{one_step_teacher, ActionSamples, FlowTeacher};
    use crate::nn::Mlp;

    /// `Q_r = w·a + r0`, `Q_c = u·a + c0`.
    struct Linear {
        w: [f32; 2],
        r0: f32,
        u: [f32; 2],
        c0: f32,
    }

    impl Linear {
        fn eval(&self, a: &[f32]) -> (f32, f32) {
            (
                self.w[0] * a[0] + self.w[1] * a[1] + self.r0,
                self.u[0] * a[0] + self.u[1] * a[1] + self.c0,
            )
        }
    }

    impl PolicyCritics for Linear {
        fn reward_with_grad(&self, _: &[f32], actions: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
            let v = actions.chunks(2).map(|a| self.eval(a).0).collect();
            (v, (0..n).flat_map(|_| self.w).collect())
        }
        fn safety_with_grad(&self, _: &[f32], actions: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
            let v = actions.chunks(2).map(|a| self.eval(a).1).collect();
            (v, (0..n).flat_map(|_| self.u).collect())
        }
        fn reward_q(&self, _: &[f32], a: &[f32]) -> f32 {
            self.eval(a).0
        }
        fn safety_q(&self, _: &[f32], a: &[f32]) -> f32 {
            self.eval(a).1
        }
    }

    /// Candidate-keyed critics: values looked up by the first action coordinate.
    struct Table(Vec<(f32, f32, f32)>);
    impl PolicyCritics for Table {
        fn reward_with_grad(&self, _: &[f32], _: &[f32], _: usize) -> (Vec<f32>, Vec<f32>) {
            unimplemented!()
        }
        fn safety_with_grad(&self, _: &[f32], _: &[f32], _: usize) -> (Vec<f32>, Vec<f32>) {
            unimplemented!()
        }
        fn reward_q(&self, _: &[f32], a: &[f32]) -> f32 {
            self.0.iter().find(|e| (e.0 - a[0]).abs() < 1e-6).unwrap().1
        }
        fn safety_q(&self, _: &[f32], a: &[f32]) -> f32 {
            self.0.iter().find(|e| (e.0 - a[0]).abs() < 1e-6).unwrap().2
        }
    }

    /// Velocity `c_i − z` for the i-th call, so candidate i lands on `c_i`.
    struct Scripted {
        targets: Vec<[f32; 2]>,
        next: std::cell::Cell<usize>,
    }
    impl VelocityField for Scripted {
        fn action_dim(&self) -> usize {
            2
        }
        fn velocity(&self, _: &[f32], y: &[f32], _: f32) -> Vec<f32> {
            let i = self.next.get();
            self.next.set(i + 1);
            let c = self.targets[i];
            vec![c[0] - y[0], c[1] - y[1]]
        }
    }

    fn zero_actor() -> OneStepActor {
        let spec = LayerSpec::new(4, vec![8], 2);
        OneStepActor {
            net: ParamSet::from_online(spec.clone(), Mlp::zeros(&spec)),
            lambda: 1.0,
            eta: 5.0,
        }
    }

    #[test]
    fn student_action_examples() {
        let a = OneStepActor::new(vec![16], 1.0, 5.0, 3).unwrap();
        let (x, z) = ([0.3f32, -1.0], [0.2f32, 1.1]);
        assert_eq!(student_action(&a, &x, &z), student_action(&a, &x, &z));
        assert_eq!(student_action(&zero_actor(), &x, &z), vec![0.0, 0.0]);
        let mut b = zero_actor();
        b.net.online.layers[1].biases = vec![3.0, 4.0];
        let out = student_action(&b, &x, &z);
        assert!((out[0] - 0.6).abs() < 1e-7 && (out[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn gate_examples() {
        assert!(feasibility_gate(-0.01));
        assert!(!feasibility_gate(0.0));
        assert!(!feasibility_gate(0.3));
    }

    #[test]
    fn gated_loss_examples() {
        assert_eq!(gated_sample_loss(0.5, 2.0, -0.1, 1.0), -1.5);
        assert_eq!(gated_sample_loss(0.5, 2.0, 0.3, 1.0), 0.8);
        assert_eq!(gated_sample_loss(0.5, 2.0, 0.0, 1.0), 0.5);
    }

    #[test]
    fn naive_loss_examples() {
        assert_eq!(naive_lagrangian_sample_loss(0.5, 2.0, -0.1, 1.0, 5.0), -1.5);
        assert!(naive_lagrangian_sample_loss(0.5, 2.0, 0.3, 1.0, 5.0).abs() < 1e-12);
        assert_eq!(naive_lagrangian_sample_loss(0.5, 2.0, 0.3, 1.0, 0.0), -1.5);
    }

    #[test]
    fn batch_loss_matches_sample_formula() {
        let actor = OneStepActor::new(vec![16, 16], 0.7, 5.0, 11).unwrap();
        let teacher = FlowTeacher::new(vec![16], 10, 2).unwrap();
        let critics = Linear {
            w: [1.0, -0.5],
            r0: 0.2,
            u: [0.8, 0.3],
            c0: -0.1,
        };
        let mut rng = rng::stream(1, 1);
        let mut data = ActionSamples::default();
        for _ in 0..32 {
            data.push([rng.random_range(-3.0..2.0), rng.random_range(-2.0..2.0)], [0.0, 0.0]);
        }
        let batch = ActorBatch::sample(&data, 32, &mut rng);
        for obj in [ActorObjective::Gated, ActorObjective::NaiveLagrangian] {
            let got = actor_loss(&actor, obj, DistillTarget::OneStep, &critics, &teacher, 10, &batch).unwrap();
            let mut want = 0.0;
            for i in 0..32 {
                let (x, z) = (&batch.states[2 * i..2 * i + 2], &batch.noise[2 * i..2 * i + 2]);
                let raw = actor.raw_action(x, z);
                let t = one_step_teacher(&teacher, x, z).unwrap();
                let d = ((raw[0] - t[0]).powi(2) + (raw[1] - t[1]).powi(2)) as f64;
                let a = student_action(&actor, x, z);
                let (qr, qc) = critics.eval(&a);
                want += match obj {
                    ActorObjective::Gated => gated_sample_loss(d, qr as f64, qc as f64, 0.7),
                    ActorObjective::NaiveLagrangian => naive_lagrangian_sample_loss(d, qr as f64, qc as f64, 0.7, 5.0),
                };
            }
            assert!((got.total - want / 32.0).abs() < 1e-5, "{obj:?}: {} vs {}", got.total, want / 32.0);
        }
    }

    #[test]
    fn actor_gradient_matches_finite_difference() {
        // d(loss)/d(output bias) by central differences, with every sample
        // kept away from the gate boundary and the projection kink
        let mut actor = OneStepActor::new(vec![8], 0.3, 5.0, 4).unwrap();
        let teacher = FlowTeacher::new(vec![8], 10, 6).unwrap();
        let critics = Linear {
            w: [0.4, 0.9],
            r0: 0.0,
            u: [1.0, -0.2],
            c0: 0.0,
        };
        let batch = ActorBatch {
            len: 3,
            states: vec![0.1, 0.2, -1.0, 0.5, 1.0, -1.5],
            noise: vec![0.3, -0.4, 1.2, 0.7, -0.5, 0.1],
        };
        actor.net.online.layers[1].biases = vec![0.9, 0.6];
        let targets = teacher_targets(&teacher, 10, DistillTarget::OneStep, &batch).unwrap();
        let ev = evaluate(&actor, ActorObjective::Gated, &critics, &targets, &batch);
        let g = actor.net.online.param_grads_batch(&ev.cache, &ev.d_raw);
        for j in 0..2 {
            let h = 1e-3f32;
            let mut p = actor.clone();
            p.net.online.layers[1].biases[j] += h;
            let up = evaluate(&p, ActorObjective::Gated, &critics, &targets, &batch).loss.total;
            p.net.online.layers[1].biases[j] -= 2.0 * h;
            let dn = evaluate(&p, ActorObjective::Gated, &critics, &targets, &batch).loss.total;
            let fd = (up - dn) / (2.0 * h as f64);
            let an = g.layers[1].biases[j] as f64;
            assert!((fd - an).abs() < 1e-3 * fd.abs().max(1.0), "bias {j}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn deploy_is_one_forward_and_reproducible() {
        let a = OneStepActor::new(vec![16], 1.0, 5.0, 3).unwrap();
        instrument::reset();
        let mut r1 = rng::stream(5, 0);
        let seq1: Vec<Vec<f32>> = (0..20).map(|_| deploy_action(&a, &[0.0, 0.5], &mut r1)).collect();
        let c = instrument::snapshot();
        assert_eq!((c.actor, c.velocity, c.critic), (20, 0, 0));
        let mut r2 = rng::stream(5, 0);
        let seq2: Vec<Vec<f32>> = (0..20).map(|_| deploy_action(&a, &[0.0, 0.5], &mut r2)).collect();
        assert_eq!(seq1, seq2);
        assert!(seq1.iter().all(|v| v[0] * v[0] + v[1] * v[1] <= 1.0 + 1e-6));
    }

    #[test]
    fn select_candidate_examples() {
        assert_eq!(select_candidate(&[0.1], &[5.0], 0.0), 0);
        assert_eq!(select_candidate(&[0.1, 0.9, 0.4], &[-1.0, -0.5, -0.2], 0.0), 1);
        assert_eq!(select_candidate(&[9.0, 8.0, 1.0, 7.0], &[0.2, 0.1, -0.3, 0.4], 0.0), 2);
        // nothing feasible: safest candidate
        assert_eq!(select_candidate(&[9.0, 8.0, 1.0], &[0.2, 0.1, 0.4], 0.0), 1);
    }

    #[test]
    fn rejection_sampling_picks_unique_feasible_candidate() {
        let targets = vec![[0.1, 0.0], [0.2, 0.0], [0.3, 0.0], [0.4, 0.0]];
        let teacher = Scripted {
            targets: targets.clone(),
            next: 0.into(),
        };
        let critics = Table(vec![(0.1, 5.0, 0.5), (0.2, 4.0, 0.1), (0.3, 0.5, -0.2), (0.4, 9.0, 0.0)]);
        let mut rng = rng::stream(0, 0);
        let a = rejection_sampling_action(&teacher, 1, &critics, &[0.0, 0.0], 4, 0.0, &mut rng).unwrap();
        assert!((a[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn rejection_sampling_cost_and_scale_invariance() {
        let teacher = FlowTeacher::new(vec![16], 10, 2).unwrap();
        let cfg = crate::critics::CriticConfig {
            hidden: vec![16],
            ..Default::default()
        };
        let bundle = CriticBundle::new(&cfg).unwrap();
        for n in [1usize, 4, 16] {
            instrument::reset();
            let mut rng = rng::stream(7, 0);
            rejection_sampling_action(&teacher, 10, &bundle, &[0.3, -0.2], n, 0.0, &mut rng).unwrap();
            let c = instrument::snapshot();
            assert_eq!((c.velocity, c.critic, c.actor), (10 * n as u64, 3 * n as u64, 0));
        }
        let q_r = [0.3f32, -1.2, 0.8, 0.5, 0.0];
        let q_c = [-0.1f32, -0.4, 0.2, -0.3, -0.9];
        let base = select_candidate(&q_r, &q_c, 0.0);
        for s in [0.01f32, 2.0, 1e3] {
            let scaled: Vec<f32> = q_r.iter().map(|v| v * s).collect();
            assert_eq!(select_candidate(&scaled, &q_c, 0.0), base);
        }
    }

    fn states(n: usize, seed: u64) -> ActionSamples {
        let mut rng = rng::stream(seed, 0);
        let mut d = ActionSamples::default();
        for _ in 0..n {
            d.push([rng.random_range(-3.0..2.0), rng.random_range(-2.0..2.0)], [0.0, 0.0]);
        }
        d
    }

    #[test]
    fn always_feasible_gate_is_fully_open() {
        let critics = Linear {
            w: [1.0, 0.0],
            r0: 0.0,
            u: [0.0, 0.0],
            c0: -1.0,
        };
        let teacher = FlowTeacher::new(vec![8], 10, 1).unwrap();
        let cfg = ActorConfig {
            hidden: vec![16],
            steps: 20,
            batch_size: 32,
            log_every: 5,
            ..Default::default()
        };
        let out = train_actor(&states(64, 1), &critics, &teacher, 10, &cfg).unwrap();
        assert!(out.metrics.iter().all(|m| m.gate_open_fraction == 1.0 && m.safety_term == 0.0));
    }

    #[test]
    fn infeasible_regime_reduces_violation() {
        // Q_c = 1.2 + a1 ≥ 0.2 on the disk, so only the safety branch is active
        let critics = Linear {
            w: [0.0, 1.0],
            r0: 0.0,
            u: [1.0, 0.0],
            c0: 1.2,
        };
        let teacher = FlowTeacher::new(vec![8], 10, 1).unwrap();
        let cfg = ActorConfig {
            hidden: vec![32, 32],
            lambda: 0.05,
            steps: 600,
            batch_size: 64,
            lr: 1e-3,
            log_every: 1,
            ..Default::default()
        };
        let out = train_actor(&states(256, 2), &critics, &teacher, 10, &cfg).unwrap();
        assert!(out.metrics.iter().all(|m| m.gate_open_fraction == 0.0));
        let smoothed: Vec<f64> = out
            .metrics
            .chunks(100)
            .map(|w| w.iter().map(|m| m.safety_term).sum::<f64>() / w.len() as f64)
            .collect();
        assert!(smoothed.windows(2).all(|w| w[1] < w[0]), "{smoothed:?}");
    }

    #[test]
    fn large_lambda_recovers_teacher() {
        let critics = Linear {
            w: [1.0, 1.0],
            r0: 0.0,
            u: [0.0, 0.0],
            c0: -1.0,
        };
        let teacher = FlowTeacher::new(vec![32, 32], 10, 3).unwrap();
        let cfg = ActorConfig {
            hidden: vec![128, 128],
            lambda: 1e3,
            steps: 8000,
            cosine_decay: true,
            batch_size: 256,
            lr: 1e-3,
            log_every: 500,
            ..Default::default()
        };
        let out = train_actor(&states(512, 3), &critics, &teacher, 10, &cfg).unwrap();
        let mut rng = rng::stream(99, 0);
        let mut worst = 0.0f32;
        let mut checked = 0;
        while checked < 200 {
            let x = [rng.random_range(-3.0f32..2.0), rng.random_range(-2.0f32..2.0)];
            let z = rng::normal_vec(&mut rng, 2);
            // the far Gaussian tail is barely seen in training
            if z[0].hypot(z[1]) > 3.0 {
                continue;
            }
            checked += 1;
            let a = student_action(&out.actor, &x, &z);
            let t = one_step_teacher(&teacher, &x, &z).unwrap();
            worst = worst.max(((a[0] - t[0]).powi(2) + (a[1] - t[1]).powi(2)).sqrt());
        }
        assert!(worst < 0.05, "max deviation {worst}");
    }

    #[test]
    fn gate_coefficients_are_exclusive() {
        let critics = Linear {
            w: [1.0, 0.0],
            r0: 0.0,
            u: [1.0, 0.5],
            c0: 0.0,
        };
        let teacher = FlowTeacher::new(vec![8], 10, 1).unwrap();
        let cfg = ActorConfig {
            hidden: vec![16],
            steps: 30,
            batch_size: 64,
            log_every: 10,
            ..Default::default()
        };
        let (mut seen, mut bad) = (0, 0);
        train_actor_observed(&states(128, 4), &critics, &teacher, 10, &cfg, |g, _| {
            seen += g.reward_coef.len();
            bad += g.exclusivity_violations();
        })
        .unwrap();
        assert_eq!((seen, bad), (30 * 64, 0));
    }

    #[test]
    fn config_rejects_negative_lambda() {
        let cfg = ActorConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(OneStepActor::new(vec![4], -0.1, 1.0, 0).is_err());
    }
}
