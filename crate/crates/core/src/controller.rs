//! Assist-as-needed path controller.
//!
//! The reference point is the sample of the hip–knee loop closest to the
//! measured pose. Per-joint errors inside the dead band are ignored; outside
//! it the exo applies a phase-scheduled PD torque with damping tied to the
//! stiffness, `B = c_cr · sqrt(K)`.

use serde::{Deserialize, Serialize};

use crate::dynamics::clamp_flag;
use crate::error::{Error, Result};
use crate::model::CoupledModel;
use crate::path::{Phase, ReferencePath};

/// Upper bound of the stiffness search box, N·m/rad.
pub const DEFAULT_MAX_STIFFNESS: f64 = 600.0;
/// Single-value stiffness used as the comparison baseline, N·m/rad.
pub const BASELINE_STIFFNESS: f64 = 340.0;

/// Per-joint, per-phase stiffness (N·m/rad) and the critical damping scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessParams {
    pub hip_stance: f64,
    pub knee_stance: f64,
    pub hip_swing: f64,
    pub knee_swing: f64,
    /// `c_cr` for hip and knee.
    #[serde(default = "unit_damping")]
    pub critical_damping: [f64; 2],
}

fn unit_damping() -> [f64; 2] {
    [1.0, 1.0]
}

impl StiffnessParams {
    /// From `[K_hip_st, K_knee_st, K_hip_sw, K_knee_sw]` with unit damping scale.
    pub fn from_array(k: [f64; 4]) -> Self {
        Self {
            hip_stance: k[0],
            knee_stance: k[1],
            hip_swing: k[2],
            knee_swing: k[3],
            critical_damping: unit_damping(),
        }
    }

    pub fn uniform(k: f64) -> Self {
        Self::from_array([k; 4])
    }

    pub fn baseline() -> Self {
        Self::uniform(BASELINE_STIFFNESS)
    }

    /// Transparent mode: no assistance at all.
    pub fn transparent() -> Self {
        Self::uniform(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.hip_stance, self.knee_stance, self.hip_swing, self.knee_swing]
    }

    /// Hip and knee stiffness for a phase.
    pub fn for_phase(&self, phase: Phase) -> [f64; 2] {
        match phase {
            Phase::Stance => [self.hip_stance, self.knee_stance],
            Phase::Swing => [self.hip_swing, self.knee_swing],
        }
    }

    /// Damping `c_cr · sqrt(K)` for a phase.
    pub fn damping_for_phase(&self, phase: Phase) -> [f64; 2] {
        let k = self.for_phase(phase);
        [
            self.critical_damping[0] * k[0].sqrt(),
            self.critical_damping[1] * k[1].sqrt(),
        ]
    }

    pub fn validate(&self, max_stiffness: f64) -> Result<()> {
        let names = ["hip_stance", "knee_stance", "hip_swing", "knee_swing"];
        for (name, k) in names.iter().zip(self.to_array()) {
            if !(k.is_finite() && (0.0..=max_stiffness).contains(&k)) {
                return Err(Error::invalid(
                    format!("stiffness.{name}"),
                    format!("{k} outside [0, {max_stiffness}]"),
                ));
            }
        }
        for (joint, c) in ["hip", "knee"].iter().zip(self.critical_damping) {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::invalid(
                    format!("stiffness.critical_damping.{joint}"),
                    format!("{c} must be >= 0"),
                ));
            }
        }
        Ok(())
    }
}

/// How the error rate in the damping term is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorRate {
    /// Backward difference of the band-subtracted error between ticks, zero on
    /// the first tick.
    #[default]
    BackwardDifference,
    /// Negated measured joint velocity, masked to zero inside the band.
    JointVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSettings {
    /// Hz
    pub rate: f64,
    /// N·m per joint.
    pub torque_limit: f64,
    pub error_rate: ErrorRate,
}

impl ControllerSettings {
    pub fn for_model(model: &CoupledModel) -> Self {
        Self {
            rate: model.exo.controller_rate,
            torque_limit: model.exo.actuator_torque_limit,
            error_rate: ErrorRate::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerOutput {
    /// Clamped exo torque, N·m.
    pub tau_exo: [f64; 2],
    pub q_ref: [f64; 2],
    /// Raw error `q_ref − q_act`.
    pub delta_q_tilde: [f64; 2],
    /// Error after dead-band subtraction.
    pub delta_q: [f64; 2],
    pub delta_q_dot: [f64; 2],
    pub active_phase: Phase,
    pub ref_index: usize,
    pub saturated: [bool; 2],
}

/// Per-component dead band: zero inside `[-r_db, r_db]`, shifted towards
/// zero by `r_db` outside. Continuous and odd.
pub fn dead_band_error(delta_q_tilde: f64, r_db: f64) -> f64 {
    if delta_q_tilde > r_db {
        delta_q_tilde - r_db
    } else if delta_q_tilde < -r_db {
        delta_q_tilde + r_db
    } else {
        0.0
    }
}

/// One controller tick.
pub fn control_step(
    path: &ReferencePath,
    params: &StiffnessParams,
    q_act: [f64; 2],
    qdot_act: [f64; 2],
    prev: Option<&ControllerOutput>,
    settings: &ControllerSettings,
) -> ControllerOutput {
    let closest = path.closest(q_act);
    let delta_q_tilde = [closest.q_ref[0] - q_act[0], closest.q_ref[1] - q_act[1]];
    let delta_q = delta_q_tilde.map(|e| dead_band_error(e, path.dead_band));
    let delta_q_dot = match settings.error_rate {
        ErrorRate::BackwardDifference => match prev {
            Some(p) => [
                (delta_q[0] - p.delta_q[0]) * settings.rate,
                (delta_q[1] - p.delta_q[1]) * settings.rate,
            ],
            None => [0.0, 0.0],
        },
        ErrorRate::JointVelocity => [0, 1].map(|j| if delta_q[j] == 0.0 { 0.0 } else { -qdot_act[j] }),
    };

    let stiffness = params.for_phase(closest.phase);
    let damping = params.damping_for_phase(closest.phase);
    let mut tau_exo = [0.0; 2];
    let mut saturated = [false; 2];
    for j in 0..2 {
        let raw = stiffness[j] * delta_q[j] + damping[j] * delta_q_dot[j];
        (tau_exo[j], saturated[j]) = clamp_flag(raw, settings.torque_limit);
    }
    ControllerOutput {
        tau_exo,
        q_ref: closest.q_ref,
        delta_q_tilde,
        delta_q,
        delta_q_dot,
        active_phase: closest.phase,
        ref_index: closest.index,
        saturated,
    }
}

/// Stateful wrapper holding the previous tick for the error-rate estimate.
#[derive(Debug, Clone)]
pub struct PathController<'a> {
    path: &'a ReferencePath,
    params: StiffnessParams,
    settings: ControllerSettings,
    prev: Option<ControllerOutput>,
}

impl<'a> PathController<'a> {
    pub fn new(path: &'a ReferencePath, params: StiffnessParams, settings: ControllerSettings) -> Self {
        Self {
            path,
            params,
            settings,
            prev: None,
        }
    }

    pub fn step(&mut self, q_act: [f64; 2], qdot_act: [f64; 2]) -> ControllerOutput {
        let out = control_step(self.path, &self.params, q_act, qdot_act, self.prev.as_ref(), &self.settings);
        self.prev = Some(out);
        out
    }

    pub fn last(&self) -> Option<&ControllerOutput> {
        self.prev.as_ref()
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{default_path, DEFAULT_DEAD_BAND};

    fn settings() -> ControllerSettings {
        ControllerSettings {
            rate: 100.0,
            torque_limit: 1000.0,
            error_rate: ErrorRate::BackwardDifference,
        }
    }

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    #[test]
    fn dead_band_branches() {
        let r = DEFAULT_DEAD_BAND;
        assert_eq!(dead_band_error(deg(1.5), r), 0.0);
        assert!((dead_band_error(deg(3.0), r) - deg(1.0)).abs() < 1e-15);
        assert!((dead_band_error(-deg(3.0), r) + deg(1.0)).abs() < 1e-15);
        assert_eq!(dead_band_error(r, r), 0.0);
    }

    #[test]
    fn baseline_proportional_torque() {
        // Hand-built path so that the reference sits 0.1 rad ahead in hip.
        let path = ReferencePath::new(
            vec![[0.1, 0.0], [0.2, 1.0], [-0.5, 0.5]],
            vec![Phase::Stance, Phase::Stance, Phase::Swing],
            0.0,
        )
        .unwrap();
        let out = control_step(&path, &StiffnessParams::baseline(), [0.0, 0.0], [0.0; 2], None, &settings());
        assert_eq!(out.ref_index, 0);
        assert!((out.tau_exo[0] - 34.0).abs() < 1e-12);
        assert_eq!(out.tau_exo[1], 0.0);
    }

    #[test]
    fn critical_damping_term() {
        let path = ReferencePath::new(
            vec![[0.0, 0.0], [0.2, 1.0], [-0.5, 0.5]],
            vec![Phase::Stance, Phase::Stance, Phase::Swing],
            0.0,
        )
        .unwrap();
        let params = StiffnessParams::uniform(400.0);
        let prev = ControllerOutput {
            tau_exo: [0.0; 2],
            q_ref: [0.0; 2],
            delta_q_tilde: [-0.01, 0.0],
            delta_q: [-0.01, 0.0],
            delta_q_dot: [0.0; 2],
            active_phase: Phase::Stance,
            ref_index: 0,
            saturated: [false; 2],
        };
        let out = control_step(&path, &params, [0.0, 0.0], [0.0; 2], Some(&prev), &settings());
        assert!((out.delta_q_dot[0] - 1.0).abs() < 1e-12);
        assert!((out.tau_exo[0] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn on_path_is_transparent() {
        let path = default_path(200, DEFAULT_DEAD_BAND).unwrap();
        let mut ctl = PathController::new(&path, StiffnessParams::uniform(600.0), settings());
        for i in (0..200).step_by(7) {
            let p = path.points[i];
            let out = ctl.step([p[0] + 0.01, p[1] - 0.01], [0.3, -0.2]);
            assert_eq!(out.tau_exo, [0.0, 0.0]);
        }
    }

    #[test]
    fn zero_stiffness_is_transparent() {
        let path = default_path(200, DEFAULT_DEAD_BAND).unwrap();
        let mut ctl = PathController::new(&path, StiffnessParams::transparent(), settings());
        for i in 0..50 {
            let out = ctl.step([0.8 - 0.03 * i as f64, 1.5], [1.0, 1.0]);
            assert_eq!(out.tau_exo, [0.0, 0.0]);
        }
    }

    #[test]
    fn phase_selects_stiffness() {
        let path = default_path(200, DEFAULT_DEAD_BAND).unwrap();
        let params = StiffnessParams::from_array([100.0, 200.0, 300.0, 400.0]);
        let swing_pt = path.points[150];
        let out = control_step(&path, &params, [swing_pt[0] - 0.1, swing_pt[1]], [0.0; 2], None, &settings());
        assert_eq!(out.active_phase, path.phases[out.ref_index]);
        let k = params.for_phase(out.active_phase);
        let expected = k[0] * out.delta_q[0];
        assert!((out.tau_exo[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn saturation_is_flagged() {
        let path = default_path(200, DEFAULT_DEAD_BAND).unwrap();
        let s = ControllerSettings {
            torque_limit: 5.0,
            ..settings()
        };
        let p = path.points[30];
        let out = control_step(&path, &StiffnessParams::uniform(600.0), [p[0] + 0.3, p[1]], [0.0; 2], None, &s);
        assert!(out.tau_exo[0].abs() <= 5.0);
        assert!(out.saturated.iter().any(|&f| f));
    }

    #[test]
    fn stiffness_validation() {
        assert!(StiffnessParams::uniform(601.0).validate(600.0).is_err());
        assert!(StiffnessParams::uniform(-1.0).validate(600.0).is_err());
        assert!(StiffnessParams::baseline().validate(600.0).is_ok());
    }
}
