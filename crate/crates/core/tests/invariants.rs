//! Property tests for the cross-module invariants.

use proptest::prelude::*;
use sfql_core::actor::{feasibility_gate, select_candidate, student_action, OneStepActor};
use sfql_core::conformal::{binomial_tail, min_epsilon};
use sfql_core::critics::{
    discounted_reach_target, expectile_loss, pessimistic_safety_next_value, safety_q_target,
};
use sfql_core::env::{dynamics_step, generate_dataset, safety_margin, BoatAction, BoatState};
use sfql_core::flow::{interpolate, project_unit_ball};
use sfql_core::nn::{LayerSpec, ParamSet};

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn expectile_asymmetry(u in 1e-3f64..10.0, tau in 0.51f64..0.99) {
        let ratio = expectile_loss(u, tau) / expectile_loss(-u, tau);
        prop_assert!((ratio - tau / (1.0 - tau)).abs() < 1e-9 * ratio.max(1.0));
    }

    #[test]
    fn gate_is_non_increasing(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(feasibility_gate(lo) >= feasibility_gate(hi));
        prop_assert_eq!(feasibility_gate(a), a < 0.0);
    }

    #[test]
    fn safety_targets_bound_the_margin(l in -3.0f64..3.0, v in -3.0f64..3.0, g in 0.0f64..0.999) {
        let m = safety_q_target(l, v, g);
        prop_assert!(m >= l && m >= g * v);
        prop_assert!(discounted_reach_target(l, v, g) >= l - 1e-12);
    }

    #[test]
    fn pessimism_never_decreases(q1 in -3.0f64..3.0, q2 in -3.0f64..3.0, d in 0.0f64..2.0) {
        let base = pessimistic_safety_next_value(q1, q2);
        prop_assert!(pessimistic_safety_next_value(q1 + d, q2) >= base);
        prop_assert!(pessimistic_safety_next_value(q1, q2 + d) >= base);
    }

    #[test]
    fn margin_sign_matches_obstacles(x1 in -3.0f64..2.0, x2 in -2.0f64..2.0) {
        let inside = dist((x1, x2), (-0.5, 0.5)) < 0.4 || dist((x1, x2), (-1.0, -1.2)) < 0.5;
        prop_assert_eq!(safety_margin(BoatState::new(x1, x2)) > 0.0, inside);
    }

    #[test]
    fn lateral_motion_is_pure_control(x1 in -3.0f64..2.0, x2 in -2.0f64..2.0, t in 0.0f64..6.3, r in 0.0f64..1.0) {
        let a = BoatAction::new(r * t.cos(), r * t.sin());
        let n = dynamics_step(BoatState::new(x1, x2), a, 0.005).unwrap();
        prop_assert!((n.x2 - (x2 + a.a2 * 0.005)).abs() < 1e-12);
        prop_assert!((n.x1 - (x1 + (a.a1 + 2.0 - 0.5 * x2 * x2) * 0.005)).abs() < 1e-12);
    }

    #[test]
    fn projection_lands_in_the_ball(v in prop::collection::vec(-10.0f32..10.0, 2)) {
        let mut p = v.clone();
        project_unit_ball(&mut p);
        let n = p.iter().map(|x| x * x).sum::<f32>().sqrt();
        prop_assert!(n <= 1.0 + 1e-6);
        if v.iter().map(|x| x * x).sum::<f32>() <= 1.0 {
            prop_assert_eq!(p, v);
        }
    }

    #[test]
    fn interpolation_hits_its_endpoints(z in prop::collection::vec(-3.0f32..3.0, 2), a in prop::collection::vec(-1.0f32..1.0, 2)) {
        prop_assert_eq!(interpolate(&z, &a, 0.0), z.clone());
        prop_assert_eq!(interpolate(&z, &a, 1.0), a.clone());
    }

    #[test]
    fn candidate_choice_ignores_reward_scale(
        q in prop::collection::vec((-5.0f32..5.0, -1.0f32..1.0), 1..16),
        scale in 0.01f32..100.0,
    ) {
        let (q_r, q_c): (Vec<f32>, Vec<f32>) = q.into_iter().unzip();
        let scaled: Vec<f32> = q_r.iter().map(|v| v * scale).collect();
        let i = select_candidate(&q_r, &q_c, 0.0);
        prop_assert_eq!(i, select_candidate(&scaled, &q_c, 0.0));
        if q_c.iter().any(|&c| c < 0.0) {
            prop_assert!(q_c[i] < 0.0);
        }
    }

    #[test]
    fn min_epsilon_inverts_the_tail(n in 1u64..400, l in 1u64..20, beta in 0.01f64..0.5) {
        let l = l.min(n);
        let e = min_epsilon(n, l, beta).unwrap();
        prop_assert!((binomial_tail(n, l, e).unwrap() - beta).abs() < 1e-6);
    }

    #[test]
    fn student_actions_are_admissible(seed in 0u64..1000, s in prop::collection::vec(-3.0f32..3.0, 2), z in prop::collection::vec(-4.0f32..4.0, 2)) {
        let actor = OneStepActor::new(vec![8, 8], 1.0, 5.0, seed).unwrap();
        let a = student_action(&actor, &s, &z);
        prop_assert!(a.iter().map(|v| v * v).sum::<f32>() <= 1.0 + 1e-6);
    }

    #[test]
    fn backward_is_linear_in_upstream(seed in 0u64..1000, x in prop::collection::vec(-1.0f32..1.0, 3), c in -3.0f32..3.0) {
        let net = ParamSet::init(&LayerSpec::new(3, vec![5, 4], 2), seed).unwrap().online;
        let (g1, dx1) = net.backward(&x, &[1.0, -0.5]).unwrap();
        let (gc, dxc) = net.backward(&x, &[c, -0.5 * c]).unwrap();
        for (a, b) in g1.values().zip(gc.values()) {
            prop_assert!((a * c - b).abs() <= 1e-4 * (1.0 + b.abs()));
        }
        for (a, b) in dx1.iter().zip(&dxc) {
            prop_assert!((a * c - b).abs() <= 1e-4 * (1.0 + b.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn datasets_chain_within_trajectories(n_traj in 1usize..6, horizon in 1usize..20, seed in 0u64..1000) {
        let ds = generate_dataset(n_traj, horizon, 0.005, seed).unwrap();
        prop_assert_eq!(ds.len(), n_traj * horizon);
        for i in 0..ds.len() {
            if let Some(j) = ds.next_index(i) {
                prop_assert_eq!(ds.next_state(i), ds.state(j));
            }
        }
    }
}
