use exotune::dynamics::{
    bushing_wrench, energy, forward_dynamics, integrate, mass_matrix, CoupledState, Stepper, TorqueInput, DEFAULT_DT,
};
use exotune::model::{default_model, BushingParams, CoupledModel};
use proptest::prelude::*;

fn model() -> CoupledModel {
    default_model(1.75, 72.0).unwrap()
}

/// Valid-state generator: joints inside their ranges, exo near the human.
fn state() -> impl Strategy<Value = CoupledState> {
    (
        -0.5..2.0f64,
        0.0..2.2f64,
        -0.05..0.05f64,
        -0.05..0.05f64,
        prop::array::uniform4(-5.0..5.0f64),
    )
        .prop_map(|(h, k, dh, dk, qdot)| CoupledState {
            q: [h, k, h + dh, k + dk],
            qdot,
            t: 0.0,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mass_matrix_is_symmetric_positive_definite(s in state()) {
        let m = mass_matrix(&model(), &s.q);
        prop_assert_eq!(m, m.transpose());
        prop_assert!(m.cholesky().is_some());
    }

    #[test]
    fn swapping_chains_negates_every_strap_load(s in state()) {
        let m = model();
        let swapped = CoupledState {
            q: [s.q[2], s.q[3], s.q[0], s.q[1]],
            qdot: [s.qdot[2], s.qdot[3], s.qdot[0], s.qdot[1]],
            t: 0.0,
        };
        let a = bushing_wrench(&m, &s);
        let b = bushing_wrench(&m, &swapped);
        for (x, y) in a.sites.iter().zip(&b.sites) {
            prop_assert_eq!(x.force_on_exo, [-y.force_on_exo[0], -y.force_on_exo[1]]);
            prop_assert_eq!(x.torque_on_exo, -y.torque_on_exo);
        }
    }

    #[test]
    fn strap_loads_are_equal_and_opposite(s in state()) {
        let w = bushing_wrench(&model(), &s);
        for site in w.sites {
            let h = site.force_on_human();
            prop_assert_eq!(h, [-site.force_on_exo[0], -site.force_on_exo[1]]);
            prop_assert_eq!(site.torque_on_human(), -site.torque_on_exo);
        }
    }

    #[test]
    fn accelerations_are_finite(s in state(), tau in prop::array::uniform4(-40.0..40.0f64)) {
        let input = TorqueInput { tau_h: [tau[0], tau[1]], tau_r: [tau[2], tau[3]] };
        let a = forward_dynamics(&model(), &s, &input).unwrap();
        prop_assert!(a.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn one_integrator_step_matches_the_accelerations() {
    let m = model();
    let s = CoupledState {
        q: [0.6, 0.9, 0.61, 0.88],
        qdot: [1.2, -0.8, 1.1, -0.7],
        t: 0.0,
    };
    let input = TorqueInput {
        tau_h: [5.0, -2.0],
        tau_r: [3.0, 1.0],
    };
    let a = forward_dynamics(&m, &s, &input).unwrap();
    let stepper = Stepper::new(&m);
    for h in [1e-5, 1e-6] {
        let next = stepper.rk4(&s, &input, h).unwrap();
        for j in 0..4 {
            let fd = (next.qdot[j] - s.qdot[j]) / h;
            // First-order agreement: the residual shrinks with h.
            assert!((fd - a[j]).abs() < 2e3 * h * (1.0 + a[j].abs()), "joint {j}: {fd} vs {}", a[j]);
        }
    }
}

/// Human chain reduced to a rigid compound pendulum: the shank becomes a
/// point mass at the knee, so the knee carries no gravity or coupling and
/// the hip obeys `a·q̈ = −g·(m₁c₁ + m₂L₁)·sin q`.
fn pendulum_model() -> (CoupledModel, f64) {
    let mut m = model().undamped();
    m.bushings = BushingParams::default().undamped();
    for b in [
        &mut m.bushings.upper_thigh,
        &mut m.bushings.lower_thigh,
        &mut m.bushings.upper_shank,
        &mut m.bushings.lower_shank,
    ] {
        b.translational_stiffness = [0.0; 2];
        b.rotational_stiffness = 0.0;
    }
    m.joint_stop.stiffness = 0.0;
    m.subject.shank_foot.com_offset = 0.0;
    m.subject.shank_foot.inertia = 1e-3;
    let t = m.subject.thigh;
    let m2 = m.subject.shank_foot.mass;
    let a = t.inertia + t.mass * t.com_offset.powi(2) + m2 * t.length.powi(2);
    let moment = t.mass * t.com_offset + m2 * t.length;
    let period = 2.0 * std::f64::consts::PI * (a / (m.gravity * moment)).sqrt();
    (m, period)
}

fn upward_crossings(traj: &exotune::dynamics::Trajectory) -> Vec<f64> {
    traj.samples
        .windows(2)
        .filter(|w| w[0].q[0] < 0.0 && w[1].q[0] >= 0.0)
        .map(|w| w[0].t + (w[1].t - w[0].t) * (-w[0].q[0]) / (w[1].q[0] - w[0].q[0]))
        .collect()
}

#[test]
fn rigid_leg_swings_with_the_compound_pendulum_period() {
    let (m, expected) = pendulum_model();
    let amp = 0.05;
    let s0 = CoupledState {
        q: [amp, 0.0, 0.0, 0.0],
        qdot: [0.0; 4],
        t: 0.0,
    };
    let traj = integrate(&m, s0, |_, _| TorqueInput::ZERO, 8.0 * expected, DEFAULT_DT).unwrap();
    let c = upward_crossings(&traj);
    assert!(c.len() >= 5);
    let measured = (c[c.len() - 1] - c[0]) / (c.len() - 1) as f64;
    let rel = (measured - expected).abs() / expected;
    assert!(rel < 0.005, "period {measured} s vs {expected} s");
}

fn displaced_state() -> CoupledState {
    CoupledState {
        q: [0.3, 0.5, 0.31, 0.49],
        qdot: [0.0; 4],
        t: 0.0,
    }
}

#[test]
fn undamped_coupled_system_conserves_energy() {
    let m = model().undamped();
    let s0 = displaced_state();
    let e0 = energy(&m, &s0).total();
    let duration = 5.0;
    let traj = integrate(&m, s0, |_, _| TorqueInput::ZERO, duration, DEFAULT_DT).unwrap();
    let drift = traj
        .samples
        .iter()
        .map(|s| {
            let st = CoupledState { q: s.q, qdot: s.qdot, t: s.t };
            (energy(&m, &st).total() - e0).abs() / e0
        })
        .fold(0.0, f64::max);
    assert!(drift / duration < 1e-3, "relative drift {drift} over {duration} s");
}

#[test]
fn damped_system_never_gains_energy() {
    let m = model();
    let s0 = displaced_state();
    let e0 = energy(&m, &s0).total();
    let traj = integrate(&m, s0, |_, _| TorqueInput::ZERO, 3.0, DEFAULT_DT).unwrap();
    let mut prev = e0;
    for s in &traj.samples {
        let st = CoupledState { q: s.q, qdot: s.qdot, t: s.t };
        let e = energy(&m, &st).total();
        assert!(e <= prev + 1e-3 * e0 * 0.01, "energy rose from {prev} to {e} at t = {}", s.t);
        prev = e;
    }
    assert!(prev < e0);
}

#[test]
fn trajectory_csv_has_the_documented_columns() {
    let m = model();
    let traj = integrate(&m, displaced_state(), |_, _| TorqueInput::ZERO, 0.05, DEFAULT_DT).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,q1,q2,q3,q4,qd1,qd2,qd3,qd4,tau_h1,tau_h2,tau_r1,tau_r2"
    );
    assert_eq!(lines.count(), traj.len());
}
