//! Rollout of the coupled model under the replayed human torques and the path
//! controller, scored as a weighted sum of assistance and tracking error.

use serde::{Deserialize, Serialize};

use crate::controller::{control_step, ControllerSettings, ErrorRate, PathController, StiffnessParams};
use crate::dynamics::{integrate, CoupledState, TorqueInput, Trajectory, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::estimator::HumanTorqueProfile;
use crate::model::CoupledModel;
use crate::path::ReferencePath;

/// Default normalisation error, rad (about 20°).
pub const DEFAULT_MAX_EXPECTED_ERROR: f64 = 0.35;

/// Weights and scales of the assist-as-needed objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the assistance term, in (0, 1).
    pub w1: f64,
    /// Weight of the tracking-error term, in (0, 1).
    pub w2: f64,
    /// Assistance scale J1, (N·m)². Defaults to `2 · actuator_limit²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assist_scale: Option<f64>,
    /// Error scale J2, rad². Defaults to `2 · max_expected_error²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_scale: Option<f64>,
    pub max_expected_error: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            w1: 0.5,
            w2: 0.5,
            assist_scale: None,
            error_scale: None,
            max_expected_error: DEFAULT_MAX_EXPECTED_ERROR,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2)] {
            if !(w > 0.0 && w < 1.0) {
                return Err(Error::invalid(format!("objective.{name}"), format!("{w} not in (0, 1)")));
            }
        }
        for (name, s) in [
            ("assist_scale", self.assist_scale),
            ("error_scale", self.error_scale),
            ("max_expected_error", Some(self.max_expected_error)),
        ] {
            if let Some(s) = s {
                if !(s.is_finite() && s > 0.0) {
                    return Err(Error::invalid(format!("objective.{name}"), format!("{s} must be > 0")));
                }
            }
        }
        Ok(())
    }

    /// J1 for the model's actuators (two controlled joints).
    pub fn assist_scale_for(&self, model: &CoupledModel) -> f64 {
        self.assist_scale
            .unwrap_or(2.0 * model.exo.actuator_torque_limit.powi(2))
    }

    /// J2 (two tracked joints).
    pub fn error_scale(&self) -> f64 {
        self.error_scale
            .unwrap_or(2.0 * self.max_expected_error.powi(2))
    }
}

/// Physics settings of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Physics step, s.
    pub dt: f64,
    /// Simulate only the first `cycles` cycles of the torque profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<usize>,
    /// How the controller estimates the error rate.
    #[serde(default)]
    pub error_rate: ErrorRate,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            cycles: None,
            error_rate: ErrorRate::default(),
        }
    }
}

impl RolloutConfig {
    /// Shortened horizon used for cohort-scale runs: two cycles at 0.5 ms.
    pub fn reduced() -> Self {
        Self {
            dt: 0.5e-3,
            cycles: Some(2),
            error_rate: ErrorRate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    /// `w1/J1 · assist_raw`
    pub assist_term: f64,
    /// `w2/J2 · error_raw`
    pub error_term: f64,
    /// Mean of `u_rᵀu_r` over the control intervals, (N·m)².
    pub assist_raw: f64,
    /// Mean of `ΔqᵀΔq` over the state samples, rad².
    pub error_raw: f64,
    pub trajectory: Trajectory,
    /// Dead-band-subtracted error at every state sample.
    pub delta_q: Vec<[f64; 2]>,
}

/// Simulates the stiffness setting against the feedforward human profile and
/// scores it. The controller reads the exo joint angles.
pub fn evaluate_objective(
    model: &CoupledModel,
    path: &ReferencePath,
    params: &StiffnessParams,
    tau_h: &HumanTorqueProfile,
    cfg: &ObjectiveConfig,
    rollout: &RolloutConfig,
) -> Result<ObjectiveBreakdown> {
    cfg.validate()?;
    let profile = match rollout.cycles {
        Some(c) if c < tau_h.cycles() => tau_h.truncated(c)?,
        _ => tau_h.clone(),
    };
    if profile.is_empty() {
        return Err(Error::Precondition("empty torque profile".into()));
    }
    if (profile.rate - model.exo.controller_rate).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "profile rate {} Hz differs from controller rate {} Hz",
            profile.rate, model.exo.controller_rate
        )));
    }

    let settings = ControllerSettings {
        error_rate: rollout.error_rate,
        ..ControllerSettings::for_model(model)
    };
    let mut controller = PathController::new(path, *params, settings);
    let mut delta_q = Vec::with_capacity(profile.len() + 1);
    let mut tick = 0usize;
    let state0 = CoupledState::aligned_moving(profile.initial_q, profile.initial_qdot);
    let trajectory = integrate(
        model,
        state0,
        |_, state| {
            let out = controller.step(state.exo_q(), state.exo_qdot());
            delta_q.push(out.delta_q);
            let input = TorqueInput {
                tau_h: profile.tau[tick],
                tau_r: out.tau_exo,
            };
            tick += 1;
            input
        },
        profile.duration(),
        rollout.dt,
    )?;
    let last = trajectory.final_state().expect("trajectory is never empty");
    let final_out = control_step(
        path,
        params,
        last.exo_q(),
        last.exo_qdot(),
        controller.last(),
        &settings,
    );
    delta_q.push(final_out.delta_q);

    let intervals = trajectory.len() - 1;
    let assist_raw = trajectory.samples[..intervals]
        .iter()
        .map(|s| s.tau_r[0] * s.tau_r[0] + s.tau_r[1] * s.tau_r[1])
        .sum::<f64>()
        / intervals as f64;
    let error_raw =
        delta_q.iter().map(|d| d[0] * d[0] + d[1] * d[1]).sum::<f64>() / delta_q.len() as f64;
    let assist_term = cfg.w1 / cfg.assist_scale_for(model) * assist_raw;
    let error_term = cfg.w2 / cfg.error_scale() * error_raw;
    Ok(ObjectiveBreakdown {
        total: assist_term + error_term,
        assist_term,
        error_term,
        assist_raw,
        error_raw,
        trajectory,
        delta_q,
    })
}
