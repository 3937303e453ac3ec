#![allow(dead_code)]

use exotune::dynamics::{integrate, rigid_inverse_dynamics, CoupledState, TorqueInput, DEFAULT_DT};
use exotune::estimator::{MotionSample, RecordedMotion};
use exotune::model::CoupledModel;
use exotune::path::default_loop_pose;

const KP: f64 = 150.0;
const KD: f64 = 4.0;

/// Recording produced by a known human torque, with the exo unpowered.
pub struct KnownTorqueRun {
    /// Human kinematics at the controller rate with a mark at every cycle start.
    pub motion: RecordedMotion,
    /// Torque applied over each controller period.
    pub tau: Vec<[f64; 2]>,
    pub ticks_per_cycle: usize,
}

fn loop_state(t: f64, period: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
    let p = |t: f64| default_loop_pose((t / period).rem_euclid(1.0));
    let h = 1e-4;
    let (a, b, c) = (p(t - h), p(t), p(t + h));
    let v = [0, 1].map(|j| (c[j] - a[j]) / (2.0 * h));
    let acc = [0, 1].map(|j| (c[j] - 2.0 * b[j] + a[j]) / (h * h));
    (b, v, acc)
}

/// Drives the human along the built-in loop with inverse dynamics plus a
/// soft PD term and records the torque actually applied. The torque signal
/// is whatever the simulation used, so it is the exact cause of the motion.
/// The derivative gain stays well under the sampled-data limit `2·I/T` of the
/// lightest subjects; above it the held torque alternates sign every tick.
pub fn known_torque_run(model: &CoupledModel, period: f64, cycles: usize) -> KnownTorqueRun {
    let rate = model.exo.controller_rate;
    let ticks_per_cycle = (period * rate).round() as usize;
    let (q0, v0, _) = loop_state(0.0, period);
    let mut tau = Vec::new();
    let traj = integrate(
        model,
        CoupledState::aligned_moving(q0, v0),
        |t, s| {
            let (q, v, a) = loop_state(t, period);
            let ff = rigid_inverse_dynamics(model, q, v, a);
            let u = [0, 1].map(|j| ff[j] + KP * (q[j] - s.q[j]) + KD * (v[j] - s.qdot[j]));
            tau.push(u);
            TorqueInput { tau_h: u, tau_r: [0.0; 2] }
        },
        cycles as f64 * period,
        DEFAULT_DT,
    )
    .unwrap();
    let samples = traj
        .samples
        .iter()
        .map(|s| MotionSample { t: s.t, hip: s.q[0], knee: s.q[1] })
        .collect();
    let marks = (0..=cycles).map(|c| c * ticks_per_cycle).collect();
    KnownTorqueRun {
        motion: RecordedMotion::new(samples, marks).unwrap(),
        tau,
        ticks_per_cycle,
    }
}

/// Per-joint RMS of `a − b`.
pub fn rms_diff(a: &[[f64; 2]], b: &[[f64; 2]]) -> [f64; 2] {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    [0, 1].map(|j| (a.iter().zip(b).map(|(x, y)| (x[j] - y[j]).powi(2)).sum::<f64>() / n).sqrt())
}
