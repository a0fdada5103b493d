//! Per-thread counters of network evaluations, one count per evaluated row.
//!
//! Used to check the structural cost of each action-selection mode: the
//! deployed actor, the flow integrator and rejection sampling.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardCounts {
    pub actor: u64,
    pub velocity: u64,
    pub critic: u64,
}

thread_local! {
    static COUNTS: Cell<ForwardCounts> = const { Cell::new(ForwardCounts { actor: 0, velocity: 0, critic: 0 }) };
}

pub fn reset() {
    COUNTS.with(|c| c.set(ForwardCounts::default()));
}

pub fn snapshot() -> ForwardCounts {
    COUNTS.with(|c| c.get())
}

pub(crate) fn add_actor(rows: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.actor += rows as u64;
        c.set(v);
    });
}

pub(crate) fn add_velocity(rows: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.velocity += rows as u64;
        c.set(v);
    });
}

pub(crate) fn add_critic(rows: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.critic += rows as u64;
        c.set(v);
    });
}
