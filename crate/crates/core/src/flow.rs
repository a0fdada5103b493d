//! Phase 2: conditional flow-matching behavior teacher.
//!
//! The velocity net maps `(x, y, t)` to a velocity in action space and is
//! trained purely by behavioral cloning on straight-line interpolants between
//! Gaussian noise and dataset actions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{TrajectoryDataset, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::instrument;
use crate::nn::{LayerSpec, ParamSet};
use crate::rng;

/// Source of `(state, action)` pairs for behavioral cloning.
pub trait BehaviorData {
    fn len(&self) -> usize;
    fn state(&self, i: usize) -> &[f32];
    fn action(&self, i: usize) -> &[f32];
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BehaviorData for TrajectoryDataset {
    fn len(&self) -> usize {
        TrajectoryDataset::len(self)
    }
    fn state(&self, i: usize) -> &[f32] {
        TrajectoryDataset::state(self, i)
    }
    fn action(&self, i: usize) -> &[f32] {
        TrajectoryDataset::action(self, i)
    }
}

/// In-memory state/action pairs with boat dimensions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActionSamples {
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
}

impl ActionSamples {
    pub fn push(&mut self, state: [f32; STATE_DIM], action: [f32; ACTION_DIM]) {
        self.states.extend_from_slice(&state);
        self.actions.extend_from_slice(&action);
    }
}

impl BehaviorData for ActionSamples {
    fn len(&self) -> usize {
        self.actions.len() / ACTION_DIM
    }
    fn state(&self, i: usize) -> &[f32] {
        &self.states[i * STATE_DIM..(i + 1) * STATE_DIM]
    }
    fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]
    }
}

/// A time-dependent velocity field over action space.
pub trait VelocityField {
    fn action_dim(&self) -> usize;

    fn velocity(&self, state: &[f32], y: &[f32], t: f32) -> Vec<f32>;

    /// `n` rows sharing one time value. The default loops over [`Self::velocity`].
    fn velocity_batch(&self, states: &[f32], ys: &[f32], t: f32, n: usize) -> Vec<f32> {
        let sd = states.len() / n.max(1);
        let ad = self.action_dim();
        (0..n)
            .flat_map(|i| self.velocity(&states[i * sd..(i + 1) * sd], &ys[i * ad..(i + 1) * ad], t))
            .collect()
    }
}

/// `(1 − t)·z + t·a`
pub fn interpolate(z: &[f32], a: &[f32], t: f32) -> Vec<f32> {
    z.iter().zip(a).map(|(&z, &a)| (1.0 - t) * z + t * a).collect()
}

/// Radial projection onto the closed unit ball.
pub fn project_unit_ball(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 1.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Explicit Euler from `t = 0` to `1` in `k` steps with left-endpoint time,
/// then projection onto the unit ball.
pub fn integrate_flow<V: VelocityField + ?Sized>(field: &V, state: &[f32], z: &[f32], k: usize) -> Result<Vec<f32>> {
    if k == 0 {
        return Err(Error::Usage("flow integration needs k >= 1".into()));
    }
    let h = 1.0 / k as f32;
    let mut y = z.to_vec();
    for step in 0..k {
        let v = field.velocity(state, &y, step as f32 / k as f32);
        for (yi, vi) in y.iter_mut().zip(&v) {
            *yi += h * vi;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: step,
                context: "flow integration state",
            });
        }
    }
    project_unit_ball(&mut y);
    Ok(y)
}

/// Batched [`integrate_flow`]; `states` is `n × state_dim`, `z` is `n × action_dim`.
pub fn integrate_flow_batch<V: VelocityField + ?Sized>(
    field: &V,
    states: &[f32],
    z: &[f32],
    n: usize,
    k: usize,
) -> Result<Vec<f32>> {
    if k == 0 {
        return Err(Error::Usage("flow integration needs k >= 1".into()));
    }
    let ad = field.action_dim();
    let h = 1.0 / k as f32;
    let mut y = z.to_vec();
    for step in 0..k {
        let v = field.velocity_batch(states, &y, step as f32 / k as f32, n);
        for (yi, vi) in y.iter_mut().zip(&v) {
            *yi += h * vi;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: step,
                context: "flow integration state",
            });
        }
    }
    for row in y.chunks_exact_mut(ad) {
        project_unit_ball(row);
    }
    Ok(y)
}

/// `z + v(x, z, 0)` projected; identical to [`integrate_flow`] with `k = 1`.
pub fn one_step_teacher<V: VelocityField + ?Sized>(field: &V, state: &[f32], z: &[f32]) -> Result<Vec<f32>> {
    integrate_flow(field, state, z, 1)
}

pub fn one_step_teacher_batch<V: VelocityField + ?Sized>(field: &V, states: &[f32], z: &[f32], n: usize) -> Result<Vec<f32>> {
    integrate_flow_batch(field, states, z, n, 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTeacher {
    pub net: ParamSet,
    pub k_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowHeader {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub k_steps: usize,
}

impl FlowTeacher {
    pub fn new(hidden: Vec<usize>, k_steps: usize, seed: u64) -> Result<Self> {
        if k_steps == 0 {
            return Err(Error::InvalidSpec("flow teacher needs k_steps >= 1".into()));
        }
        let spec = LayerSpec::new(STATE_DIM + ACTION_DIM + 1, hidden, ACTION_DIM);
        Ok(Self {
            net: ParamSet::init(&spec, seed)?,
            k_steps,
        })
    }

    pub fn from_parts(header: &FlowHeader, net: ParamSet) -> Result<Self> {
        let s = &net.spec;
        if header.k_steps == 0 || s.input_dim != STATE_DIM + ACTION_DIM + 1 || s.output_dim != ACTION_DIM {
            return Err(Error::Config("flow checkpoint does not match the boat task".into()));
        }
        Ok(Self {
            net,
            k_steps: header.k_steps,
        })
    }

    pub fn header(&self) -> FlowHeader {
        FlowHeader {
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            hidden: self.net.spec.hidden.clone(),
            k_steps: self.k_steps,
        }
    }

    /// Action from `k_steps` Euler steps.
    pub fn sample(&self, state: &[f32], z: &[f32]) -> Result<Vec<f32>> {
        integrate_flow(self, state, z, self.k_steps)
    }
}

fn flow_input(state: &[f32], y: &[f32], t: f32, out: &mut Vec<f32>) {
    out.extend_from_slice(state);
    out.extend_from_slice(y);
    out.push(t);
}

impl VelocityField for FlowTeacher {
    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn velocity(&self, state: &[f32], y: &[f32], t: f32) -> Vec<f32> {
        instrument::add_velocity(1);
        let mut inp = Vec::with_capacity(STATE_DIM + ACTION_DIM + 1);
        flow_input(state, y, t, &mut inp);
        self.net.online.forward_unchecked(&inp)
    }

    fn velocity_batch(&self, states: &[f32], ys: &[f32], t: f32, n: usize) -> Vec<f32> {
        instrument::add_velocity(n);
        let mut inp = Vec::with_capacity(n * (STATE_DIM + ACTION_DIM + 1));
        for i in 0..n {
            flow_input(
                &states[i * STATE_DIM..(i + 1) * STATE_DIM],
                &ys[i * ACTION_DIM..(i + 1) * ACTION_DIM],
                t,
                &mut inp,
            );
        }
        self.net.online.forward_batch(&inp, n)
    }
}

/// A flow-matching minibatch with its noise and times already drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub len: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub noise: Vec<f32>,
    pub times: Vec<f32>,
}

impl FlowBatch {
    /// Fresh `z ~ N(0, I)` and `t ~ U[0, 1]` per sample.
    pub fn sample<D: BehaviorData + ?Sized, R: Rng + ?Sized>(data: &D, indices: &[usize], rng: &mut R) -> Self {
        let n = indices.len();
        let mut b = FlowBatch {
            len: n,
            states: Vec::with_capacity(n * STATE_DIM),
            actions: Vec::with_capacity(n * ACTION_DIM),
            noise: rng::normal_vec(rng, n * ACTION_DIM),
            times: Vec::with_capacity(n),
        };
        for &i in indices {
            b.states.extend_from_slice(data.state(i));
            b.actions.extend_from_slice(data.action(i));
            b.times.push(rng.random::<f32>());
        }
        b
    }

    fn net_inputs(&self) -> Vec<f32> {
        let mut inp = Vec::with_capacity(self.len * (STATE_DIM + ACTION_DIM + 1));
        for i in 0..self.len {
            let a = &self.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM];
            let z = &self.noise[i * ACTION_DIM..(i + 1) * ACTION_DIM];
            let xt = interpolate(z, a, self.times[i]);
            flow_input(&self.states[i * STATE_DIM..(i + 1) * STATE_DIM], &xt, self.times[i], &mut inp);
        }
        inp
    }
}

/// Mean `‖v(x, x_t, t) − (a − z)‖²` and its gradient w.r.t. the network output.
fn flow_loss_and_grad(pred: &[f32], batch: &FlowBatch) -> (f64, Vec<f32>) {
    let n = batch.len as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; pred.len()];
    for (j, g) in grad.iter_mut().enumerate() {
        let target = batch.actions[j] - batch.noise[j];
        let d = (pred[j] - target) as f64;
        loss += d * d;
        *g = (2.0 * d / n) as f32;
    }
    (loss / n, grad)
}

pub fn flow_matching_loss(batch: &FlowBatch, teacher: &FlowTeacher) -> Result<f64> {
    if batch.len == 0 {
        return Err(Error::Usage("flow-matching loss needs a non-empty batch".into()));
    }
    let pred = teacher.net.online.forward_batch(&batch.net_inputs(), batch.len);
    Ok(flow_loss_and_grad(&pred, batch).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub hidden: Vec<usize>,
    pub k_steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_decay: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            k_steps: 10,
            lr: 3e-4,
            batch_size: 256,
            steps: 100_000,
            seed: 0,
            log_every: 1000,
            cosine_decay: false,
        }
    }
}

impl FlowConfig {
    pub fn lr_at(&self, step: usize) -> f32 {
        if self.cosine_decay {
            cosine_lr(self.lr, step, self.steps)
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("flow k_steps, batch_size and log_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("flow learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FlowTraining {
    pub teacher: FlowTeacher,
    pub metrics: Vec<FlowMetrics>,
}

/// `lr·(1 + cos(π·(step − 1)/steps))/2`, so the first step uses the full rate.
pub fn cosine_lr(lr: f32, step: usize, steps: usize) -> f32 {
    let frac = (step.saturating_sub(1)) as f64 / steps.max(1) as f64;
    (lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}

/// One Adam step on the flow-matching loss.
pub fn flow_update(teacher: &mut FlowTeacher, batch: &FlowBatch, lr: f32) -> Result<f64> {
    let cache = teacher.net.online.forward_cached(&batch.net_inputs(), batch.len);
    let (loss, grad) = flow_loss_and_grad(cache.output(), batch);
    if loss.is_finite() {
        let g = teacher.net.online.param_grads_batch(&cache, &grad);
        teacher.net.adam_step(&g, lr)?;
    }
    Ok(loss)
}

pub fn train_flow_teacher<D: BehaviorData + ?Sized>(data: &D, cfg: &FlowConfig) -> Result<FlowTraining> {
    cfg.validate()?;
    let teacher = FlowTeacher::new(cfg.hidden.clone(), cfg.k_steps, cfg.seed.wrapping_add(0x51))?;
    train_flow_teacher_from(teacher, data, cfg)
}

/// Continues training an existing teacher for `cfg.steps` more updates.
pub fn train_flow_teacher_from<D: BehaviorData + ?Sized>(
    mut teacher: FlowTeacher,
    data: &D,
    cfg: &FlowConfig,
) -> Result<FlowTraining> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("flow training needs a non-empty dataset".into()));
    }
    let mut rng = rng::stream(cfg.seed.wrapping_add(teacher.net.step), 2);
    let mut metrics = Vec::new();
    let mut indices = vec![0usize; cfg.batch_size];
    for step in 1..=cfg.steps {
        for i in indices.iter_mut() {
            *i = rng.random_range(0..data.len());
        }
        let batch = FlowBatch::sample(data, &indices, &mut rng);
        let loss = flow_update(&mut teacher, &batch, cfg.lr_at(step))?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                phase: "flow",
                step,
                detail: format!("flow-matching loss {loss}"),
            });
        }
        if step % cfg.log_every == 0 || step == cfg.steps {
            metrics.push(FlowMetrics { step, loss });
        }
    }
    Ok(FlowTraining { teacher, metrics })
}
