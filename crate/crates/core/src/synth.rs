//! Synthetic subjects standing in for recorded participants.
//!
//! A subject's intended kinematics are the reference loop warped per joint and
//! per phase, traversed at a fixed cycle period, with seeded cycle-to-cycle
//! drift. The feedforward torques come from running the torque estimator on
//! that motion, exactly as for a recording.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    estimate_tau_h, extract_cycles, HumanTorqueProfile, MotionSample, RecordedMotion, TrackingGains,
};
use crate::model::{build_coupled_model, anthropometric_subject, BushingParams, CoupledModel, ExoModel};
use crate::path::{Phase, ReferencePath};

pub const DEFAULT_CYCLE_PERIOD: f64 = 4.6;
pub const DEFAULT_RECORDED_CYCLES: usize = 9;
/// Sampling rate of the generated "recordings", Hz.
pub const RECORDING_RATE: f64 = 200.0;
/// Swing torque factor of the weak-swing preset, both joints.
pub const WEAK_SWING_SCALE: f64 = 0.3;
/// Width of the blend between stance and swing warps, as a fraction of the loop.
const PHASE_BLEND: f64 = 0.12;

/// Per-phase amplitude scaling about the loop centroid plus per-phase offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warp {
    /// (hip, knee) amplitude factors on the stance arc.
    pub stance_amplitude: [f64; 2],
    /// (hip, knee) amplitude factors on the swing arc.
    pub swing_amplitude: [f64; 2],
    /// (hip, knee) offsets on the stance arc, rad.
    #[serde(default)]
    pub stance_offset: [f64; 2],
    /// (hip, knee) offsets on the swing arc, rad.
    #[serde(default)]
    pub swing_offset: [f64; 2],
}

impl Warp {
    pub const IDENTITY: Warp = Warp {
        stance_amplitude: [1.0, 1.0],
        swing_amplitude: [1.0, 1.0],
        stance_offset: [0.0, 0.0],
        swing_offset: [0.0, 0.0],
    };

    /// Same amplitude factors and offset in both phases.
    pub fn uniform(amplitude: [f64; 2], offset: [f64; 2]) -> Self {
        Self {
            stance_amplitude: amplitude,
            swing_amplitude: amplitude,
            stance_offset: offset,
            swing_offset: offset,
        }
    }
}

impl Default for Warp {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    /// m
    pub height: f64,
    /// kg
    pub mass: f64,
    pub warp: Warp,
    /// Standard deviation of the per-cycle pose drift, rad.
    pub noise: f64,
    /// s
    pub cycle_period: f64,
    pub recorded_cycles: usize,
    /// (hip, knee) factors on the feedforward torque during swing; below 1
    /// models a subject too weak to produce their own intended swing.
    #[serde(default = "full_strength")]
    pub swing_torque_scale: [f64; 2],
}

fn full_strength() -> [f64; 2] {
    [1.0, 1.0]
}

impl Default for SubjectSpec {
    fn default() -> Self {
        Self {
            height: 1.75,
            mass: 72.0,
            warp: Warp::IDENTITY,
            noise: 0.0,
            cycle_period: DEFAULT_CYCLE_PERIOD,
            recorded_cycles: DEFAULT_RECORDED_CYCLES,
            swing_torque_scale: full_strength(),
        }
    }
}

impl SubjectSpec {
    /// A subject who produces only [`WEAK_SWING_SCALE`] of their intended swing
    /// torque at both joints.
    pub fn weak_swing() -> Self {
        Self {
            noise: 0.01,
            swing_torque_scale: [WEAK_SWING_SCALE; 2],
            ..Default::default()
        }
    }
}

/// `n` varied subject specs drawn from `seed`: anthropometry, mild per-phase
/// warps, drift level and swing strength all differ between subjects.
pub fn cohort_specs(n: usize, seed: u64) -> Vec<SubjectSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    (0..n)
        .map(|_| {
            let height = u(1.55, 1.95);
            let bmi = u(19.0, 28.0);
            let warp = Warp {
                stance_amplitude: [u(0.9, 1.1), u(0.9, 1.1)],
                swing_amplitude: [u(0.9, 1.15), u(0.9, 1.15)],
                stance_offset: [u(-0.03, 0.03), u(-0.03, 0.03)],
                swing_offset: [u(-0.03, 0.03), u(-0.03, 0.03)],
            };
            SubjectSpec {
                height,
                mass: bmi * height * height,
                warp,
                noise: u(0.003, 0.015),
                swing_torque_scale: [u(0.4, 1.0), u(0.4, 1.0)],
                ..Default::default()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSubject {
    pub id: String,
    pub spec: SubjectSpec,
    pub seed: u64,
    pub model: CoupledModel,
    /// The five extracted cycles of intended motion, at the controller rate.
    pub motion: RecordedMotion,
}

/// Smooth swing-membership weight per path sample: 1 deep in swing, 0 deep in
/// stance, raised-cosine blended around the phase changes.
fn swing_weight(path: &ReferencePath) -> Vec<f64> {
    let n = path.len();
    let raw: Vec<f64> = path
        .phases
        .iter()
        .map(|&p| if p == Phase::Swing { 1.0 } else { 0.0 })
        .collect();
    let half = ((PHASE_BLEND * n as f64) / 2.0).round().max(1.0) as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / (half + 1) as f64).cos()))
        .collect();
    let norm: f64 = kernel.iter().sum();
    (0..n as isize)
        .map(|i| {
            kernel
                .iter()
                .zip(-half..=half)
                .map(|(w, k)| w * raw[(i + k).rem_euclid(n as isize) as usize])
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// Applies `warp` to every path sample.
pub fn warp_path(path: &ReferencePath, warp: &Warp) -> Vec<[f64; 2]> {
    let centre = path.centroid();
    let weight = swing_weight(path);
    path.points
        .iter()
        .zip(weight)
        .map(|(p, w)| {
            let mut out = [0.0; 2];
            for j in 0..2 {
                let amp = (1.0 - w) * warp.stance_amplitude[j] + w * warp.swing_amplitude[j];
                let offset = (1.0 - w) * warp.stance_offset[j] + w * warp.swing_offset[j];
                out[j] = centre[j] + amp * (p[j] - centre[j]) + offset;
            }
            out
        })
        .collect()
}

/// Periodic Catmull-Rom through the loop samples; `s` in samples, wraps.
fn loop_point(points: &[[f64; 2]], s: f64) -> [f64; 2] {
    let n = points.len() as isize;
    let i = s.floor();
    let u = s - i;
    let i = i as isize;
    let at = |k: isize| points[k.rem_euclid(n) as usize];
    let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
    let mut out = [0.0; 2];
    for j in 0..2 {
        out[j] = 0.5
            * (2.0 * p1[j]
                + (-p0[j] + p2[j]) * u
                + (2.0 * p0[j] - 5.0 * p1[j] + 4.0 * p2[j] - p3[j]) * u * u
                + (-p0[j] + 3.0 * p1[j] - 3.0 * p2[j] + p3[j]) * u * u * u);
    }
    out
}

/// Intended motion over `spec.recorded_cycles` cycles at [`RECORDING_RATE`].
pub fn intended_motion(path: &ReferencePath, spec: &SubjectSpec, seed: u64) -> Result<RecordedMotion> {
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::invalid("subject.noise", format!("{} must be >= 0", spec.noise)));
    }
    if !(spec.cycle_period.is_finite() && spec.cycle_period > 0.0) {
        return Err(Error::invalid("subject.cycle_period", "must be > 0"));
    }
    let loop_pts = warp_path(path, &spec.warp);
    let cycles = spec.recorded_cycles;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let knots: Vec<[f64; 2]> = (0..=cycles)
        .map(|_| {
            [
                spec.noise * normal.sample(&mut rng),
                spec.noise * normal.sample(&mut rng),
            ]
        })
        .collect();

    let per_cycle = (spec.cycle_period * RECORDING_RATE).round() as usize;
    let total = cycles * per_cycle;
    let n = loop_pts.len() as f64;
    let samples = (0..=total)
        .map(|i| {
            let t = i as f64 / RECORDING_RATE;
            let c = (i / per_cycle).min(cycles - 1);
            let u = (i - c * per_cycle) as f64 / per_cycle as f64;
            let p = loop_point(&loop_pts, u * n);
            // Drift moves smoothly from this cycle's knot to the next.
            let blend = 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
            let a = knots[c];
            let b = knots[c + 1];
            MotionSample {
                t,
                hip: p[0] + a[0] + blend * (b[0] - a[0]),
                knee: p[1] + a[1] + blend * (b[1] - a[1]),
            }
        })
        .collect();
    let marks = (0..=cycles).map(|c| c * per_cycle).collect();
    RecordedMotion::new(samples, marks)
}

/// Scales the torques by `scale` in proportion to the swing weight of the
/// loop position each tick falls on.
fn weaken_swing(profile: &mut HumanTorqueProfile, weight: &[f64], scale: [f64; 2]) {
    if scale == [1.0, 1.0] {
        return;
    }
    let n = weight.len() as f64;
    for c in 0..profile.cycles() {
        let (start, end) = (profile.cycle_bounds[c], profile.cycle_bounds[c + 1]);
        let len = (end - start) as f64;
        for k in start..end {
            let s = (k - start) as f64 / len * n;
            let i = s.floor() as usize % weight.len();
            let frac = s - s.floor();
            let w = (1.0 - frac) * weight[i] + frac * weight[(i + 1) % weight.len()];
            for j in 0..2 {
                profile.tau[k][j] *= 1.0 - w * (1.0 - scale[j]);
            }
        }
    }
}

/// Builds the subject's model, its intended motion and the feedforward torque
/// profile that reproduces it in transparent mode.
pub fn synth_subject(
    id: impl Into<String>,
    path: &ReferencePath,
    spec: &SubjectSpec,
    seed: u64,
    dt: f64,
) -> Result<(SyntheticSubject, HumanTorqueProfile)> {
    let subject = anthropometric_subject(spec.height, spec.mass)?;
    let model = build_coupled_model(subject, ExoModel::fitted_to(&subject), BushingParams::default())?;

    let warped = warp_path(path, &spec.warp);
    let margin = 3.0 * spec.noise;
    for p in &warped {
        let ok = subject.hip_angle_range.contains(p[0] - margin)
            && subject.hip_angle_range.contains(p[0] + margin)
            && subject.knee_angle_range.contains(p[1] - margin)
            && subject.knee_angle_range.contains(p[1] + margin);
        if !ok {
            return Err(Error::invalid(
                "subject.warp",
                format!(
                    "warped pose ({:.3}, {:.3}) rad leaves the joint ranges",
                    p[0], p[1]
                ),
            ));
        }
    }

    if spec.swing_torque_scale.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::invalid("subject.swing_torque_scale", "factors must be >= 0"));
    }

    let recording = intended_motion(path, spec, seed)?;
    let motion = extract_cycles(&recording, model.exo.controller_rate)?;
    let mut profile = estimate_tau_h(&model, &motion, &TrackingGains::default(), dt)?;
    weaken_swing(&mut profile, &swing_weight(path), spec.swing_torque_scale);
    Ok((
        SyntheticSubject {
            id: id.into(),
            spec: *spec,
            seed,
            model,
            motion,
        },
        profile,
    ))
}
