//! Wall-clock latency of the three action-selection modes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::actor::{deploy_action, rejection_sampling_action, OneStepActor};
use crate::critics::CriticBundle;
use crate::env::BoatState;
use crate::error::{Error, Result};
use crate::flow::FlowTeacher;
use crate::instrument::{self, ForwardCounts};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub median_us: f64,
    pub mean_us: f64,
    /// Network rows evaluated per call.
    pub forwards_per_call: ForwardRows,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardRows {
    pub actor: f64,
    pub velocity: f64,
    pub critic: f64,
}

impl ForwardRows {
    fn per_call(c: ForwardCounts, calls: usize) -> Self {
        let n = calls as f64;
        Self {
            actor: c.actor as f64 / n,
            velocity: c.velocity as f64 / n,
            critic: c.critic as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionLatency {
    pub n: usize,
    pub latency: Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub calls: usize,
    pub warmup: usize,
    pub k_steps: usize,
    pub actor_hidden: Vec<usize>,
    pub flow_hidden: Vec<usize>,
    pub actor: Latency,
    pub flow: Latency,
    pub rejection: Vec<RejectionLatency>,
    /// Flow integration latency over actor latency.
    pub flow_over_actor: f64,
    /// Largest-N over smallest-N rejection latency.
    pub rejection_ratio: Option<f64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `calls` invocations of `f` after `warmup` untimed ones. `f` gets the
/// call index so inputs can vary.
pub fn time_calls<F>(calls: usize, warmup: usize, mut f: F) -> Result<Latency>
where
    F: FnMut(usize) -> Result<()>,
{
    if calls == 0 {
        return Err(Error::Usage("benchmark needs at least one call".into()));
    }
    for i in 0..warmup {
        f(i)?;
    }
    instrument::reset();
    let mut us = Vec::with_capacity(calls);
    for i in 0..calls {
        let t = Instant::now();
        f(i)?;
        us.push(t.elapsed().as_secs_f64() * 1e6);
    }
    let counts = instrument::snapshot();
    let mean_us = us.iter().sum::<f64>() / calls as f64;
    Ok(Latency {
        median_us: median(&mut us),
        mean_us,
        forwards_per_call: ForwardRows::per_call(counts, calls),
    })
}

pub struct BenchInputs<'a> {
    pub actor: &'a OneStepActor,
    pub teacher: &'a FlowTeacher,
    pub critics: &'a CriticBundle,
    pub rejection_delta: f32,
}

/// Benchmarks actor, K-step flow and rejection sampling on a fixed pool of
/// uniform states. Timed loops are single-threaded.
pub fn run_bench(p: &BenchInputs<'_>, calls: usize, warmup: usize, rejection_n: &[usize], seed: u64) -> Result<BenchReport> {
    let mut pool_rng = rng::stream(seed, 7);
    let states: Vec<[f32; 2]> = (0..1024).map(|_| BoatState::sample_uniform(&mut pool_rng).to_f32()).collect();
    let s = |i: usize| &states[i % states.len()];
    let mut r = rng::stream(seed, 8);

    let actor = time_calls(calls, warmup, |i| {
        std::hint::black_box(deploy_action(p.actor, s(i), &mut r));
        Ok(())
    })?;
    let k = p.teacher.k_steps;
    let flow = time_calls(calls, warmup, |i| {
        let z = rng::normal_vec(&mut r, 2);
        std::hint::black_box(p.teacher.sample(s(i), &z)?);
        Ok(())
    })?;
    let mut rejection = Vec::with_capacity(rejection_n.len());
    for &n in rejection_n {
        let latency = time_calls(calls, warmup, |i| {
            std::hint::black_box(rejection_sampling_action(
                p.teacher,
                k,
                p.critics,
                s(i),
                n,
                p.rejection_delta,
                &mut r,
            )?);
            Ok(())
        })?;
        rejection.push(RejectionLatency { n, latency });
    }
    let rejection_ratio = match (
        rejection.iter().min_by_key(|r| r.n),
        rejection.iter().max_by_key(|r| r.n),
    ) {
        (Some(lo), Some(hi)) if hi.n > lo.n => Some(hi.latency.median_us / lo.latency.median_us),
        _ => None,
    };
    Ok(BenchReport {
        calls,
        warmup,
        k_steps: k,
        actor_hidden: p.actor.net.spec.hidden.clone(),
        flow_hidden: p.teacher.net.spec.hidden.clone(),
        flow_over_actor: flow.median_us / actor.median_us,
        actor,
        flow,
        rejection,
        rejection_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critics::CriticConfig;

    #[test]
    fn forward_counts_follow_the_modes() {
        let actor = OneStepActor::new(vec![16, 16], 0.1, 1.0, 1).unwrap();
        let teacher = FlowTeacher::new(vec![16, 16], 10, 2).unwrap();
        let critics = CriticBundle::new(&CriticConfig {
            hidden: vec![16, 16],
            ..Default::default()
        })
        .unwrap();
        let p = BenchInputs {
            actor: &actor,
            teacher: &teacher,
            critics: &critics,
            rejection_delta: 0.0,
        };
        let rep = run_bench(&p, 50, 5, &[1, 4], 0).unwrap();
        assert_eq!(rep.actor.forwards_per_call.actor, 1.0);
        assert_eq!(rep.actor.forwards_per_call.velocity, 0.0);
        assert_eq!(rep.flow.forwards_per_call.velocity, 10.0);
        assert_eq!(rep.rejection[1].latency.forwards_per_call.velocity, 40.0);
        assert_eq!(rep.rejection[1].latency.forwards_per_call.critic, 12.0);
        assert!(rep.rejection_ratio.is_some());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
