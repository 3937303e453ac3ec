//! Coupled human/exo equations of motion and their fixed-step integration.
//!
//! Generalised coordinates are `[human_hip, human_knee, exo_hip, exo_knee]`.
//! Each chain is a planar double pendulum; the chains interact only through
//! the strap bushings, so the mass matrix is block diagonal.

use std::io::Write;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoupledModel, Segment, StrapSite};

pub const DEFAULT_DT: f64 = 0.25e-3;

/// Rollouts that leave this envelope are reported as diverged.
pub const MAX_ABS_ANGLE: f64 = 2.0 * std::f64::consts::PI;
pub const MAX_ABS_RATE: f64 = 1.0e3;

/// States may sit this far outside the configured joint ranges (the soft stops
/// allow some penetration) and still count as valid.
pub const RANGE_SOFT_MARGIN: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledState {
    pub q: [f64; 4],
    pub qdot: [f64; 4],
    pub t: f64,
}

impl CoupledState {
    /// Both chains at the same human pose, at rest.
    pub fn aligned(hip: f64, knee: f64) -> Self {
        Self {
            q: [hip, knee, hip, knee],
            qdot: [0.0; 4],
            t: 0.0,
        }
    }

    pub fn aligned_moving(q: [f64; 2], qdot: [f64; 2]) -> Self {
        Self {
            q: [q[0], q[1], q[0], q[1]],
            qdot: [qdot[0], qdot[1], qdot[0], qdot[1]],
            t: 0.0,
        }
    }

    pub fn human_q(&self) -> [f64; 2] {
        [self.q[0], self.q[1]]
    }

    pub fn exo_q(&self) -> [f64; 2] {
        [self.q[2], self.q[3]]
    }

    pub fn human_qdot(&self) -> [f64; 2] {
        [self.qdot[0], self.qdot[1]]
    }

    pub fn exo_qdot(&self) -> [f64; 2] {
        [self.qdot[2], self.qdot[3]]
    }

    pub fn validate(&self, model: &CoupledModel) -> Result<()> {
        let finite = self.t.is_finite()
            && self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("state", "non-finite entry"));
        }
        for (j, range) in model.joint_ranges().iter().enumerate() {
            let q = self.q[j];
            if q < range.min - RANGE_SOFT_MARGIN || q > range.max + RANGE_SOFT_MARGIN {
                return Err(Error::invalid(
                    format!("state.q[{j}]"),
                    format!("{q} rad outside [{}, {}] plus margin", range.min, range.max),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TorqueInput {
    /// Human hip and knee, N·m.
    pub tau_h: [f64; 2],
    /// Exo hip and knee, N·m.
    pub tau_r: [f64; 2],
}

impl TorqueInput {
    pub const ZERO: TorqueInput = TorqueInput {
        tau_h: [0.0; 2],
        tau_r: [0.0; 2],
    };

    /// Clamps to the subject and actuator limits. The flags mark which of the
    /// four channels (state order) were saturated.
    pub fn clamped(self, model: &CoupledModel) -> (TorqueInput, [bool; 4]) {
        let h_lim = model.subject.torque_limits();
        let r_lim = model.exo.actuator_torque_limit;
        let mut flags = [false; 4];
        let mut out = self;
        for j in 0..2 {
            (out.tau_h[j], flags[j]) = clamp_flag(self.tau_h[j], h_lim[j]);
            (out.tau_r[j], flags[2 + j]) = clamp_flag(self.tau_r[j], r_lim);
        }
        (out, flags)
    }

    fn generalized(&self) -> [f64; 4] {
        [self.tau_h[0], self.tau_h[1], self.tau_r[0], self.tau_r[1]]
    }
}

pub(crate) fn clamp_flag(v: f64, limit: f64) -> (f64, bool) {
    if v > limit {
        (limit, true)
    } else if v < -limit {
        (-limit, true)
    } else {
        (v, false)
    }
}

/// Load on the exo segment at one strap. The human segment receives the exact
/// negation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteLoad {
    pub site: StrapSite,
    /// World-frame force on the exo strap point, N.
    pub force_on_exo: [f64; 2],
    /// In-plane torque on the exo segment, N·m, signed in the flexion sense
    /// of the segment's proximal joint (hip flexion for thigh straps, knee
    /// flexion for shank straps).
    pub torque_on_exo: f64,
}

impl SiteLoad {
    pub fn force_on_human(&self) -> [f64; 2] {
        [-self.force_on_exo[0], -self.force_on_exo[1]]
    }

    pub fn torque_on_human(&self) -> f64 {
        -self.torque_on_exo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionForces {
    pub sites: [SiteLoad; 4],
    /// The same loads mapped onto the four generalised coordinates.
    pub generalized: [f64; 4],
}

impl InteractionForces {
    pub fn site(&self, site: StrapSite) -> &SiteLoad {
        &self.sites[site as usize]
    }
}

/// Precomputed constants of one two-link chain.
#[derive(Debug, Clone, Copy)]
struct Chain {
    thigh_len: f64,
    /// m1 c1 + m2 L1
    grav1: f64,
    /// m2 c2
    grav2: f64,
    /// I1 + m1 c1² + m2 L1²
    a: f64,
    /// m2 L1 c2
    coupling: f64,
    /// I2 + m2 c2²
    d: f64,
}

impl Chain {
    fn new(thigh: &Segment, shank: &Segment) -> Self {
        let m2 = shank.mass;
        Self {
            thigh_len: thigh.length,
            grav1: thigh.mass * thigh.com_offset + m2 * thigh.length,
            grav2: m2 * shank.com_offset,
            a: thigh.inertia_about_joint() + m2 * thigh.length * thigh.length,
            coupling: m2 * thigh.length * shank.com_offset,
            d: shank.inertia_about_joint(),
        }
    }

    /// Mass matrix entries (m00, m01, m11).
    fn mass(&self, knee: f64) -> (f64, f64, f64) {
        let b = self.coupling * knee.cos();
        (self.a + 2.0 * b + self.d, -(b + self.d), self.d)
    }

    fn coriolis(&self, knee: f64, qd: [f64; 2]) -> [f64; 2] {
        let h = self.coupling * knee.sin();
        let shank_rate = qd[0] - qd[1];
        [h * (shank_rate * shank_rate - qd[0] * qd[0]), h * qd[0] * qd[0]]
    }

    fn gravity(&self, q: [f64; 2], g: f64) -> [f64; 2] {
        let shank = (q[0] - q[1]).sin();
        [
            g * (self.grav1 * q[0].sin() + self.grav2 * shank),
            -g * self.grav2 * shank,
        ]
    }

    fn potential(&self, q: [f64; 2], g: f64) -> f64 {
        g * (self.grav1 * (1.0 - q[0].cos()) + self.grav2 * (1.0 - (q[0] - q[1]).cos()))
    }

    /// Position of the point `s` metres along the thigh or shank, and its
    /// Jacobian columns with respect to (hip, knee).
    fn strap_point(&self, on_thigh: bool, s: f64, q: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        let (s1, c1) = q[0].sin_cos();
        if on_thigh {
            ([s * s1, -s * c1], [[s * c1, s * s1], [0.0, 0.0]])
        } else {
            let (s2, c2) = (q[0] - q[1]).sin_cos();
            let l = self.thigh_len;
            (
                [l * s1 + s * s2, -l * c1 - s * c2],
                [[l * c1 + s * c2, l * s1 + s * s2], [-s * c2, -s * s2]],
            )
        }
    }
}

fn chains(model: &CoupledModel) -> (Chain, Chain) {
    (
        Chain::new(&model.subject.thigh, &model.subject.shank_foot),
        Chain::new(&model.exo.thigh, &model.exo.shank),
    )
}

/// Flexion-sense orientation of a segment and its Jacobian row.
fn segment_angle(on_thigh: bool, q: [f64; 2]) -> (f64, [f64; 2]) {
    if on_thigh {
        (q[0], [1.0, 0.0])
    } else {
        (q[1] - q[0], [-1.0, 1.0])
    }
}

fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// 4×4 coupled mass matrix, kg·m².
pub fn mass_matrix(model: &CoupledModel, q: &[f64; 4]) -> Matrix4<f64> {
    let (human, exo) = chains(model);
    let (h00, h01, h11) = human.mass(q[1]);
    let (e00, e01, e11) = exo.mass(q[3]);
    Matrix4::new(
        h00, h01, 0.0, 0.0, //
        h01, h11, 0.0, 0.0, //
        0.0, 0.0, e00, e01, //
        0.0, 0.0, e01, e11,
    )
}

/// Coriolis/centrifugal plus gravity terms, the `C + G` that sits on the left
/// of the equations of motion. The torque gravity exerts on the joints is the
/// negation of [`gravity_vector`].
pub fn bias_and_gravity(model: &CoupledModel, q: &[f64; 4], qdot: &[f64; 4]) -> [f64; 4] {
    let c = coriolis_vector(model, q, qdot);
    let g = gravity_vector(model, q);
    [c[0] + g[0], c[1] + g[1], c[2] + g[2], c[3] + g[3]]
}

pub fn coriolis_vector(model: &CoupledModel, q: &[f64; 4], qdot: &[f64; 4]) -> [f64; 4] {
    let (human, exo) = chains(model);
    let ch = human.coriolis(q[1], [qdot[0], qdot[1]]);
    let ce = exo.coriolis(q[3], [qdot[2], qdot[3]]);
    [ch[0], ch[1], ce[0], ce[1]]
}

/// Gradient of the gravitational potential with respect to `q`.
pub fn gravity_vector(model: &CoupledModel, q: &[f64; 4]) -> [f64; 4] {
    let (human, exo) = chains(model);
    let gh = human.gravity([q[0], q[1]], model.gravity);
    let ge = exo.gravity([q[2], q[3]], model.gravity);
    [gh[0], gh[1], ge[0], ge[1]]
}

/// Human joint torques that move both legs along `(q, qdot, qddot)` with the
/// exo following rigidly and unpowered. Strap loads cancel because the
/// strap points coincide; joint stops are not included.
pub fn rigid_inverse_dynamics(model: &CoupledModel, q: [f64; 2], qdot: [f64; 2], qddot: [f64; 2]) -> [f64; 2] {
    let (human, exo) = chains(model);
    let mut out = [0.0; 2];
    for (chain, off) in [(&human, 0), (&exo, 2)] {
        let (m00, m01, m11) = chain.mass(q[1]);
        let c = chain.coriolis(q[1], qdot);
        let g = chain.gravity(q, model.gravity);
        out[0] += m00 * qddot[0] + m01 * qddot[1] + c[0] + g[0] + model.joint_damping[off] * qdot[0];
        out[1] += m01 * qddot[0] + m11 * qddot[1] + c[1] + g[1] + model.joint_damping[off + 1] * qdot[1];
    }
    out
}

/// Spring-damper loads at the four straps, from the displacement between the
/// matched human and exo strap points.
pub fn bushing_wrench(model: &CoupledModel, state: &CoupledState) -> InteractionForces {
    let (human, exo) = chains(model);
    bushing_loads(model, &human, &exo, &state.q, &state.qdot)
}

fn bushing_loads(
    model: &CoupledModel,
    human: &Chain,
    exo: &Chain,
    q: &[f64; 4],
    qd: &[f64; 4],
) -> InteractionForces {
    let qh = [q[0], q[1]];
    let qe = [q[2], q[3]];
    let qdh = [qd[0], qd[1]];
    let qde = [qd[2], qd[3]];
    let mut generalized = [0.0; 4];
    let sites = StrapSite::ALL.map(|site| {
        let bushing = model.bushings.site(site);
        let s = model.straps.site(site);
        let on_thigh = site.on_thigh();
        let (ph, jh) = human.strap_point(on_thigh, s, qh);
        let (pe, je) = exo.strap_point(on_thigh, s, qe);
        let vh = [
            jh[0][0] * qdh[0] + jh[1][0] * qdh[1],
            jh[0][1] * qdh[0] + jh[1][1] * qdh[1],
        ];
        let ve = [
            je[0][0] * qde[0] + je[1][0] * qde[1],
            je[0][1] * qde[0] + je[1][1] * qde[1],
        ];
        let mut force = [0.0; 2];
        for axis in 0..2 {
            force[axis] = -bushing.translational_stiffness[axis] * (pe[axis] - ph[axis])
                - bushing.translational_damping[axis] * (ve[axis] - vh[axis]);
        }
        let (ang_h, rot) = segment_angle(on_thigh, qh);
        let (ang_e, _) = segment_angle(on_thigh, qe);
        let rate_h = dot2(rot, qdh);
        let rate_e = dot2(rot, qde);
        let torque = -bushing.rotational_stiffness * (ang_e - ang_h)
            - bushing.rotational_damping * (rate_e - rate_h);

        for j in 0..2 {
            generalized[2 + j] += dot2(je[j], force) + rot[j] * torque;
            generalized[j] -= dot2(jh[j], force) + rot[j] * torque;
        }
        SiteLoad {
            site,
            force_on_exo: force,
            torque_on_exo: torque,
        }
    });
    InteractionForces { sites, generalized }
}

/// Generalised torques from the one-sided joint stops and passive joint damping.
pub fn joint_stop_torques(model: &CoupledModel, q: &[f64; 4], qdot: &[f64; 4]) -> [f64; 4] {
    let stop = model.joint_stop;
    let mut out = [0.0; 4];
    for (j, range) in model.joint_ranges().iter().enumerate() {
        let pen = if q[j] > range.max {
            q[j] - range.max
        } else if q[j] < range.min {
            q[j] - range.min
        } else {
            continue;
        };
        out[j] = -stop.stiffness * pen - stop.damping * qdot[j];
    }
    for j in 0..4 {
        out[j] -= model.joint_damping[j] * qdot[j];
    }
    out
}

/// Joint accelerations for the given (already clamped) torques.
pub fn forward_dynamics(
    model: &CoupledModel,
    state: &CoupledState,
    input: &TorqueInput,
) -> Result<[f64; 4]> {
    let (human, exo) = chains(model);
    accelerations(model, &human, &exo, &state.q, &state.qdot, &input.generalized())
}

fn accelerations(
    model: &CoupledModel,
    human: &Chain,
    exo: &Chain,
    q: &[f64; 4],
    qd: &[f64; 4],
    tau: &[f64; 4],
) -> Result<[f64; 4]> {
    let bushing = bushing_loads(model, human, exo, q, qd);
    let stops = joint_stop_torques(model, q, qd);
    let mut rhs = [0.0; 4];
    let ch = human.coriolis(q[1], [qd[0], qd[1]]);
    let ce = exo.coriolis(q[3], [qd[2], qd[3]]);
    let gh = human.gravity([q[0], q[1]], model.gravity);
    let ge = exo.gravity([q[2], q[3]], model.gravity);
    let bias = [ch[0] + gh[0], ch[1] + gh[1], ce[0] + ge[0], ce[1] + ge[1]];
    for j in 0..4 {
        rhs[j] = tau[j] + bushing.generalized[j] + stops[j] - bias[j];
    }
    let ah = solve2(human.mass(q[1]), [rhs[0], rhs[1]]).ok_or(Error::SingularMassMatrix { chain: "human" })?;
    let ae = solve2(exo.mass(q[3]), [rhs[2], rhs[3]]).ok_or(Error::SingularMassMatrix { chain: "exo" })?;
    Ok([ah[0], ah[1], ae[0], ae[1]])
}

fn solve2((m00, m01, m11): (f64, f64, f64), b: [f64; 2]) -> Option<[f64; 2]> {
    let det = m00 * m11 - m01 * m01;
    if !(det.is_finite() && det > 1e-14 * (m00 * m11).abs()) {
        return None;
    }
    Some([(m11 * b[0] - m01 * b[1]) / det, (m00 * b[1] - m01 * b[0]) / det])
}

/// Mechanical energy split by storage, J. Gravity potential is zero with both
/// legs hanging straight down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    pub kinetic: f64,
    pub gravity: f64,
    pub bushings: f64,
    pub joint_stops: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.kinetic + self.gravity + self.bushings + self.joint_stops
    }
}

pub fn energy(model: &CoupledModel, state: &CoupledState) -> Energy {
    let (human, exo) = chains(model);
    let q = &state.q;
    let qd = &state.qdot;
    let kin = |chain: &Chain, knee: f64, v: [f64; 2]| {
        let (m00, m01, m11) = chain.mass(knee);
        0.5 * (m00 * v[0] * v[0] + 2.0 * m01 * v[0] * v[1] + m11 * v[1] * v[1])
    };
    let kinetic = kin(&human, q[1], [qd[0], qd[1]]) + kin(&exo, q[3], [qd[2], qd[3]]);
    let gravity = human.potential([q[0], q[1]], model.gravity) + exo.potential([q[2], q[3]], model.gravity);

    let mut bushings = 0.0;
    for site in StrapSite::ALL {
        let b = model.bushings.site(site);
        let s = model.straps.site(site);
        let on_thigh = site.on_thigh();
        let (ph, _) = human.strap_point(on_thigh, s, [q[0], q[1]]);
        let (pe, _) = exo.strap_point(on_thigh, s, [q[2], q[3]]);
        let (ah, _) = segment_angle(on_thigh, [q[0], q[1]]);
        let (ae, _) = segment_angle(on_thigh, [q[2], q[3]]);
        bushings += 0.5 * b.translational_stiffness[0] * (pe[0] - ph[0]).powi(2)
            + 0.5 * b.translational_stiffness[1] * (pe[1] - ph[1]).powi(2)
            + 0.5 * b.rotational_stiffness * (ae - ah).powi(2);
    }

    let mut joint_stops = 0.0;
    for (j, range) in model.joint_ranges().iter().enumerate() {
        let pen = (q[j] - range.max).max(0.0) + (q[j] - range.min).min(0.0);
        joint_stops += 0.5 * model.joint_stop.stiffness * pen * pen;
    }
    Energy {
        kinetic,
        gravity,
        bushings,
        joint_stops,
    }
}

/// Precomputed system for repeated stepping.
#[derive(Debug, Clone, Copy)]
pub struct Stepper<'a> {
    model: &'a CoupledModel,
    human: Chain,
    exo: Chain,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a CoupledModel) -> Self {
        let (human, exo) = chains(model);
        Self { model, human, exo }
    }

    fn deriv(&self, q: &[f64; 4], qd: &[f64; 4], tau: &[f64; 4]) -> Result<[f64; 4]> {
        accelerations(self.model, &self.human, &self.exo, q, qd, tau)
    }

    /// One classical RK4 step with the torques held over the step.
    pub fn rk4(&self, state: &CoupledState, input: &TorqueInput, h: f64) -> Result<CoupledState> {
        let tau = input.generalized();
        let q0 = state.q;
        let v0 = state.qdot;
        let axpy = |x: &[f64; 4], a: f64, y: &[f64; 4]| -> [f64; 4] {
            [x[0] + a * y[0], x[1] + a * y[1], x[2] + a * y[2], x[3] + a * y[3]]
        };

        let a1 = self.deriv(&q0, &v0, &tau)?;
        let q2 = axpy(&q0, 0.5 * h, &v0);
        let v2 = axpy(&v0, 0.5 * h, &a1);
        let a2 = self.deriv(&q2, &v2, &tau)?;
        let q3 = axpy(&q0, 0.5 * h, &v2);
        let v3 = axpy(&v0, 0.5 * h, &a2);
        let a3 = self.deriv(&q3, &v3, &tau)?;
        let q4 = axpy(&q0, h, &v3);
        let v4 = axpy(&v0, h, &a3);
        let a4 = self.deriv(&q4, &v4, &tau)?;

        let mut next = *state;
        for j in 0..4 {
            next.q[j] = q0[j] + h / 6.0 * (v0[j] + 2.0 * v2[j] + 2.0 * v3[j] + v4[j]);
            next.qdot[j] = v0[j] + h / 6.0 * (a1[j] + 2.0 * a2[j] + 2.0 * a3[j] + a4[j]);
        }
        next.t = state.t + h;
        check_envelope(&next)?;
        Ok(next)
    }
}

fn check_envelope(state: &CoupledState) -> Result<()> {
    for j in 0..4 {
        let q = state.q[j];
        let v = state.qdot[j];
        if !q.is_finite() || q.abs() > MAX_ABS_ANGLE {
            return Err(Error::Divergence {
                t: state.t,
                detail: format!("|q[{j}]| = {q} exceeds 2π"),
            });
        }
        if !v.is_finite() || v.abs() > MAX_ABS_RATE {
            return Err(Error::Divergence {
                t: state.t,
                detail: format!("|qdot[{j}]| = {v} exceeds {MAX_ABS_RATE} rad/s"),
            });
        }
    }
    Ok(())
}

/// One recorded controller tick. The torques are the (clamped) values held
/// over the interval that starts at `t`; the final sample repeats the last
/// applied torques.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: [f64; 4],
    pub qdot: [f64; 4],
    pub tau_h: [f64; 2],
    pub tau_r: [f64; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    /// Number of control intervals in which each channel was clamped.
    pub saturations: [usize; 4],
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn final_state(&self) -> Option<CoupledState> {
        self.samples.last().map(|s| CoupledState {
            q: s.q,
            qdot: s.qdot,
            t: s.t,
        })
    }

    pub const CSV_HEADER: [&'static str; 13] = [
        "t", "q1", "q2", "q3", "q4", "qd1", "qd2", "qd3", "qd4", "tau_h1", "tau_h2", "tau_r1", "tau_r2",
    ];

    /// Delimited-text export, one row per sample, SI units and radians.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(Self::CSV_HEADER).map_err(err)?;
        for s in &self.samples {
            let row: Vec<String> = std::iter::once(s.t)
                .chain(s.q)
                .chain(s.qdot)
                .chain(s.tau_h)
                .chain(s.tau_r)
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Number of physics substeps per control period and the resulting step.
pub fn substeps(period: f64, dt: f64) -> (usize, f64) {
    let n = (period / dt).round().max(1.0) as usize;
    (n, period / n as f64)
}

/// Integrates with RK4 at `dt`, sampling `torque_fn` once per controller tick
/// and holding its output in between.
///
/// `duration` is rounded to a whole number of controller periods.
pub fn integrate<F>(
    model: &CoupledModel,
    state0: CoupledState,
    mut torque_fn: F,
    duration: f64,
    dt: f64,
) -> Result<Trajectory>
where
    F: FnMut(f64, &CoupledState) -> TorqueInput,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Precondition(format!("dt must be > 0, got {dt}")));
    }
    if !(duration >= dt) {
        return Err(Error::Precondition(format!(
            "duration {duration} s must be at least dt = {dt} s"
        )));
    }
    let period = model.exo.control_period();
    let ticks = (duration / period).round().max(1.0) as usize;
    let (n_sub, h) = substeps(period, dt);
    let stepper = Stepper::new(model);

    let mut traj = Trajectory {
        samples: Vec::with_capacity(ticks + 1),
        saturations: [0; 4],
    };
    let mut state = state0;
    let mut last = TorqueInput::ZERO;
    for tick in 0..ticks {
        let t = state0.t + tick as f64 * period;
        state.t = t;
        let (input, flags) = torque_fn(t, &state).clamped(model);
        for (count, hit) in traj.saturations.iter_mut().zip(flags) {
            *count += hit as usize;
        }
        traj.samples.push(TrajectorySample {
            t,
            q: state.q,
            qdot: state.qdot,
            tau_h: input.tau_h,
            tau_r: input.tau_r,
        });
        for _ in 0..n_sub {
            state = stepper.rk4(&state, &input, h)?;
        }
        last = input;
    }
    state.t = state0.t + ticks as f64 * period;
    traj.samples.push(TrajectorySample {
        t: state.t,
        q: state.q,
        qdot: state.qdot,
        tau_h: last.tau_h,
        tau_r: last.tau_r,
    });
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_model, BushingParams};
    use std::f64::consts::FRAC_PI_2;

    fn model() -> CoupledModel {
        default_model(1.80, 75.0).unwrap()
    }

    #[test]
    fn straight_leg_inertia_matches_parallel_axis() {
        let m = model();
        let s = m.subject;
        // compound pendulum about the hip, knee straight
        let expected = s.thigh.inertia
            + s.thigh.mass * s.thigh.com_offset.powi(2)
            + s.shank_foot.inertia
            + s.shank_foot.mass * (s.thigh.length + s.shank_foot.com_offset).powi(2);
        let mm = mass_matrix(&m, &[0.0; 4]);
        assert!((mm[(0, 0)] - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn mass_matrix_block_structure() {
        let m = model();
        let a = mass_matrix(&m, &[0.3, 0.8, -0.2, 0.1]);
        let b = mass_matrix(&m, &[0.3, 0.8, 1.2, 1.9]);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(a[(i, j)], b[(i, j)]);
            }
        }
        assert_eq!(a[(0, 2)], 0.0);
        assert_eq!(a[(1, 3)], 0.0);
    }

    #[test]
    fn hanging_leg_has_no_gravity_torque() {
        let m = model();
        assert_eq!(bias_and_gravity(&m, &[0.0; 4], &[0.0; 4]), [0.0; 4]);
    }

    #[test]
    fn horizontal_thigh_gravity_statics() {
        let m = model();
        let s = m.subject;
        let g = m.gravity;
        let expected = (s.thigh.mass * s.thigh.com_offset
            + s.shank_foot.mass * (s.thigh.length + s.shank_foot.com_offset))
            * g;
        let bias = bias_and_gravity(&m, &[FRAC_PI_2, 0.0, 0.0, 0.0], &[0.0; 4]);
        // Gravity pulls the raised leg back towards extension.
        let gravity_torque = -bias[0];
        assert!((gravity_torque + expected).abs() < 1e-10);
        // ...and folds the shank into knee flexion.
        let knee_gravity_torque = -bias[1];
        assert!((knee_gravity_torque - s.shank_foot.mass * s.shank_foot.com_offset * g).abs() < 1e-10);
    }

    #[test]
    fn coriolis_vanishes_at_rest_and_is_even_in_velocity() {
        let m = model();
        let q = [0.4, 0.9, 0.5, 1.1];
        assert_eq!(coriolis_vector(&m, &q, &[0.0; 4]), [0.0; 4]);
        let qd = [1.3, -0.7, 2.0, 0.4];
        let neg = qd.map(|v| -v);
        assert_eq!(coriolis_vector(&m, &q, &qd), coriolis_vector(&m, &q, &neg));
    }

    #[test]
    fn aligned_chains_exert_no_interaction() {
        let m = model();
        let state = CoupledState {
            q: [0.7, 0.4, 0.7, 0.4],
            qdot: [1.0, -2.0, 1.0, -2.0],
            t: 0.0,
        };
        let f = bushing_wrench(&m, &state);
        for s in f.sites {
            assert_eq!(s.force_on_exo, [0.0, 0.0]);
            assert_eq!(s.torque_on_exo, 0.0);
        }
        assert_eq!(f.generalized, [0.0; 4]);
    }

    #[test]
    fn knee_offset_rotational_torque() {
        let m = model();
        let state = CoupledState {
            q: [0.2, 0.5, 0.2, 0.51],
            qdot: [0.0; 4],
            t: 0.0,
        };
        let f = bushing_wrench(&m, &state);
        for site in [StrapSite::UpperShank, StrapSite::LowerShank] {
            assert!((f.site(site).torque_on_exo - (-100.0 * 0.01)).abs() < 1e-9);
        }
        for site in [StrapSite::UpperThigh, StrapSite::LowerThigh] {
            assert_eq!(f.site(site).torque_on_exo, 0.0);
        }
    }

    #[test]
    fn static_bushing_loads_are_the_negative_potential_gradient() {
        let m = model();
        let q = [0.3, 0.6, 0.35, 0.5];
        let state = CoupledState { q, qdot: [0.0; 4], t: 0.0 };
        let g = bushing_wrench(&m, &state).generalized;
        let h = 1e-6;
        for j in 0..4 {
            let mut plus = state;
            let mut minus = state;
            plus.q[j] += h;
            minus.q[j] -= h;
            let grad = (energy(&m, &plus).bushings - energy(&m, &minus).bushings) / (2.0 * h);
            assert!((g[j] + grad).abs() < 1e-5 * (1.0 + grad.abs()), "coordinate {j}: {} vs {}", g[j], -grad);
        }
    }

    #[test]
    fn clamping_sets_flags() {
        let m = model();
        let (t, flags) = TorqueInput {
            tau_h: [10.0, -1e4],
            tau_r: [100.0, 1.0],
        }
        .clamped(&m);
        assert_eq!(flags, [false, true, true, false]);
        assert_eq!(t.tau_r[0], m.exo.actuator_torque_limit);
        assert_eq!(t.tau_h[1], -m.subject.knee_torque_limit);
    }

    #[test]
    fn zero_dt_is_rejected() {
        let m = model();
        let r = integrate(&m, CoupledState::aligned(0.0, 0.0), |_, _| TorqueInput::ZERO, 1.0, 0.0);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn integration_is_deterministic() {
        let m = model();
        let run = || {
            integrate(
                &m,
                CoupledState::aligned(0.4, 0.3),
                |t, _| TorqueInput {
                    tau_h: [5.0 * t.sin(), 1.0],
                    tau_r: [0.0, 0.0],
                },
                0.5,
                DEFAULT_DT,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn samples_at_controller_rate() {
        let m = model();
        let traj = integrate(&m, CoupledState::aligned(0.1, 0.1), |_, _| TorqueInput::ZERO, 0.5, DEFAULT_DT).unwrap();
        assert_eq!(traj.len(), 51);
        assert!((traj.samples[1].t - 0.01).abs() < 1e-12);
    }

    #[test]
    fn blow_up_is_reported_as_divergence() {
        let mut m = model();
        m.subject.hip_torque_limit = 1e9;
        m.joint_stop.stiffness = 0.0;
        let r = integrate(
            &m,
            CoupledState::aligned(0.0, 0.0),
            |_, _| TorqueInput {
                tau_h: [1e7, 0.0],
                tau_r: [0.0; 2],
            },
            1.0,
            DEFAULT_DT,
        );
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn exo_torque_does_not_touch_human_channel_instantly() {
        let m = model();
        let mut state = CoupledState::aligned(0.3, 0.4);
        state.q[2] += 0.01;
        let base = forward_dynamics(&m, &state, &TorqueInput::ZERO).unwrap();
        let push = forward_dynamics(
            &m,
            &state,
            &TorqueInput {
                tau_h: [0.0; 2],
                tau_r: [1.0, 0.0],
            },
        )
        .unwrap();
        assert_eq!(base[0], push[0]);
        assert_eq!(base[1], push[1]);
        assert!(push[2] > base[2]);
    }

    #[test]
    fn undamped_bushings_have_no_dissipation_terms() {
        let b = BushingParams::default().undamped();
        assert_eq!(b.upper_shank.rotational_damping, 0.0);
        assert_eq!(b.lower_thigh.translational_damping, [0.0, 0.0]);
    }
}
