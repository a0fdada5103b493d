//! Fixtures shared by the criterion benchmarks.

use sfql_core::actor::OneStepActor;
use sfql_core::critics::{CriticBundle, CriticConfig};
use sfql_core::env::BoatState;
use sfql_core::flow::FlowTeacher;
use sfql_core::rng;

/// Untrained networks of one width. Latency depends on shapes only.
pub struct Fixture {
    pub actor: OneStepActor,
    pub teacher: FlowTeacher,
    pub critics: CriticBundle,
    pub states: Vec<[f32; 2]>,
}

impl Fixture {
    pub fn new(width: usize, k_steps: usize) -> Self {
        let hidden = vec![width, width];
        let mut r = rng::stream(0, 7);
        Self {
            actor: OneStepActor::new(hidden.clone(), 0.02, 5.0, 1).expect("valid actor"),
            teacher: FlowTeacher::new(hidden.clone(), k_steps, 2).expect("valid teacher"),
            critics: CriticBundle::new(&CriticConfig {
                hidden,
                ..Default::default()
            })
            .expect("valid critics"),
            states: (0..256).map(|_| BoatState::sample_uniform(&mut r).to_f32()).collect(),
        }
    }
}
