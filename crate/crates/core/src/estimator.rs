//! Feedforward human torque estimation from transparent-mode kinematics.
//!
//! A stiff PD controller on the human joints drives the coupled model along
//! the recorded motion in a forward-dynamics rollout (exo unpowered). The
//! torques it applies, averaged over each controller period, become the
//! replayable feedforward profile.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dynamics::{clamp_flag, rigid_inverse_dynamics, substeps, CoupledState, Stepper, TorqueInput, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::model::CoupledModel;

/// Number of cycles kept from a recording.
pub const EXTRACTED_CYCLES: usize = 5;
/// Recordings need this many full cycles so that cycles can be trimmed from
/// both ends.
pub const MIN_RECORDED_CYCLES: usize = EXTRACTED_CYCLES + 2;
/// Tracking residual above which an estimate carries a warning, rad (1°).
pub const MAX_TRACKING_RMS: f64 = std::f64::consts::PI / 180.0;
/// Allowed start/end torque mismatch as a fraction of the profile peak.
pub const PERIODIC_ENDPOINT_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSample {
    pub t: f64,
    pub hip: f64,
    pub knee: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedMotion {
    pub samples: Vec<MotionSample>,
    /// Sample indices where cycles start. Cycle `k` runs from `cycle_marks[k]`
    /// to `cycle_marks[k + 1]`, so `n + 1` marks delimit `n` full cycles.
    pub cycle_marks: Vec<usize>,
}

impl RecordedMotion {
    pub fn new(samples: Vec<MotionSample>, cycle_marks: Vec<usize>) -> Result<Self> {
        let m = Self { samples, cycle_marks };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::Precondition("motion needs at least two samples".into()));
        }
        for w in self.samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Precondition(format!(
                    "time stamps must increase strictly ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        if self
            .samples
            .iter()
            .any(|s| !(s.t.is_finite() && s.hip.is_finite() && s.knee.is_finite()))
        {
            return Err(Error::Precondition("non-finite motion sample".into()));
        }
        for w in self.cycle_marks.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Precondition("cycle marks must increase strictly".into()));
            }
        }
        if let Some(&last) = self.cycle_marks.last() {
            if last >= self.samples.len() {
                return Err(Error::Precondition(format!(
                    "cycle mark {last} beyond {} samples",
                    self.samples.len()
                )));
            }
        }
        Ok(())
    }

    pub fn full_cycles(&self) -> usize {
        self.cycle_marks.len().saturating_sub(1)
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().unwrap().t - self.samples[0].t
    }

    /// Motion with joint angles and velocities evaluated by cubic Hermite
    /// interpolation.
    pub fn interpolator(&self) -> MotionInterpolator<'_> {
        MotionInterpolator::new(&self.samples)
    }

    /// Reads `t, hip_rad, knee_rad` rows (with header).
    pub fn read_csv<R: Read>(input: R, cycle_marks: Vec<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let mut samples = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(e.to_string()))?;
            let vals: Vec<f64> = record
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?;
            if vals.len() != 3 {
                return Err(Error::Parse(format!("row {}: expected t, hip_rad, knee_rad", line + 2)));
            }
            samples.push(MotionSample {
                t: vals[0],
                hip: vals[1],
                knee: vals[2],
            });
        }
        Self::new(samples, cycle_marks)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["t", "hip_rad", "knee_rad"]).map_err(err)?;
        for s in &self.samples {
            w.write_record([s.t.to_string(), s.hip.to_string(), s.knee.to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Parses a cycle-mark file: one sample index per line, blank lines and
/// `#` comments ignored.
pub fn parse_cycle_marks(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse::<usize>().map_err(|e| Error::Parse(format!("cycle mark {l:?}: {e}"))))
        .collect()
}

/// C¹ cubic Hermite interpolation through the samples with finite-difference
/// tangents. Queries outside the recorded span are clamped to the ends.
#[derive(Debug, Clone)]
pub struct MotionInterpolator<'a> {
    samples: &'a [MotionSample],
    tangents: Vec<[f64; 2]>,
}

impl<'a> MotionInterpolator<'a> {
    fn new(samples: &'a [MotionSample]) -> Self {
        let n = samples.len();
        let slope = |a: &MotionSample, b: &MotionSample| {
            let dt = b.t - a.t;
            [(b.hip - a.hip) / dt, (b.knee - a.knee) / dt]
        };
        let tangents = (0..n)
            .map(|i| {
                if i == 0 {
                    slope(&samples[0], &samples[1])
                } else if i == n - 1 {
                    slope(&samples[n - 2], &samples[n - 1])
                } else {
                    slope(&samples[i - 1], &samples[i + 1])
                }
            })
            .collect();
        Self { samples, tangents }
    }

    /// Angles and angular velocities at `t`.
    pub fn eval(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        let s = self.samples;
        let n = s.len();
        if t <= s[0].t {
            return ([s[0].hip, s[0].knee], self.tangents[0]);
        }
        if t >= s[n - 1].t {
            return ([s[n - 1].hip, s[n - 1].knee], self.tangents[n - 1]);
        }
        let i = s.partition_point(|p| p.t <= t) - 1;
        let (a, b) = (&s[i], &s[i + 1]);
        let h = b.t - a.t;
        let u = (t - a.t) / h;
        let (u2, u3) = (u * u, u * u * u);
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        let d00 = (6.0 * u2 - 6.0 * u) / h;
        let d10 = 3.0 * u2 - 4.0 * u + 1.0;
        let d01 = (-6.0 * u2 + 6.0 * u) / h;
        let d11 = 3.0 * u2 - 2.0 * u;
        let pa = [a.hip, a.knee];
        let pb = [b.hip, b.knee];
        let ma = self.tangents[i];
        let mb = self.tangents[i + 1];
        let mut q = [0.0; 2];
        let mut qd = [0.0; 2];
        for j in 0..2 {
            q[j] = h00 * pa[j] + h10 * h * ma[j] + h01 * pb[j] + h11 * h * mb[j];
            qd[j] = d00 * pa[j] + d10 * ma[j] + d01 * pb[j] + d11 * mb[j];
        }
        (q, qd)
    }

    /// Angular accelerations at `t`; zero outside the recorded span.
    pub fn acceleration(&self, t: f64) -> [f64; 2] {
        let s = self.samples;
        let n = s.len();
        if t <= s[0].t || t >= s[n - 1].t {
            return [0.0; 2];
        }
        let i = s.partition_point(|p| p.t <= t) - 1;
        let (a, b) = (&s[i], &s[i + 1]);
        let h = b.t - a.t;
        let u = (t - a.t) / h;
        let dd00 = (12.0 * u - 6.0) / (h * h);
        let dd10 = (6.0 * u - 4.0) / h;
        let dd01 = (6.0 - 12.0 * u) / (h * h);
        let dd11 = (6.0 * u - 2.0) / h;
        let pa = [a.hip, a.knee];
        let pb = [b.hip, b.knee];
        let ma = self.tangents[i];
        let mb = self.tangents[i + 1];
        [0, 1].map(|j| dd00 * pa[j] + dd10 * ma[j] + dd01 * pb[j] + dd11 * mb[j])
    }
}

fn lerp_sample(samples: &[MotionSample], t: f64) -> [f64; 2] {
    let n = samples.len();
    if t <= samples[0].t {
        return [samples[0].hip, samples[0].knee];
    }
    if t >= samples[n - 1].t {
        return [samples[n - 1].hip, samples[n - 1].knee];
    }
    let i = samples.partition_point(|p| p.t <= t) - 1;
    let (a, b) = (&samples[i], &samples[i + 1]);
    let u = (t - a.t) / (b.t - a.t);
    [a.hip + u * (b.hip - a.hip), a.knee + u * (b.knee - a.knee)]
}

/// Keeps the middle five cycles (dropping the extra cycle from the front when
/// the count is uneven) and resamples them at `rate` Hz with time re-zeroed.
pub fn extract_cycles(motion: &RecordedMotion, rate: f64) -> Result<RecordedMotion> {
    motion.validate()?;
    let cycles = motion.full_cycles();
    if cycles < MIN_RECORDED_CYCLES {
        return Err(Error::TooFewCycles {
            found: cycles,
            required: MIN_RECORDED_CYCLES,
        });
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Precondition(format!("rate must be > 0, got {rate}")));
    }
    let first = (cycles - EXTRACTED_CYCLES).div_ceil(2);
    let marks = &motion.cycle_marks[first..=first + EXTRACTED_CYCLES];
    let t0 = motion.samples[marks[0]].t;
    let t1 = motion.samples[marks[EXTRACTED_CYCLES]].t;
    let intervals = ((t1 - t0) * rate).round() as usize;
    let samples = (0..=intervals)
        .map(|k| {
            let t = k as f64 / rate;
            let [hip, knee] = lerp_sample(&motion.samples, t0 + t);
            MotionSample { t, hip, knee }
        })
        .collect();
    let cycle_marks = marks
        .iter()
        .map(|&m| (((motion.samples[m].t - t0) * rate).round() as usize).min(intervals))
        .collect();
    RecordedMotion::new(samples, cycle_marks)
}

/// Human joint PD gains for the tracking rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingGains {
    /// N·m/rad per joint.
    pub kp: [f64; 2],
    /// N·m·s/rad per joint.
    pub kd: [f64; 2],
}

impl Default for TrackingGains {
    fn default() -> Self {
        Self::from_stiffness(2000.0)
    }
}

impl TrackingGains {
    /// `kp` on both joints with `kd = 2·sqrt(kp)`.
    pub fn from_stiffness(kp: f64) -> Self {
        Self {
            kp: [kp; 2],
            kd: [2.0 * kp.sqrt(); 2],
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("kp", self.kp), ("kd", self.kd)] {
            if v.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
                return Err(Error::invalid(format!("gains.{name}"), "gains must be > 0"));
            }
        }
        Ok(())
    }
}

/// Replayable human torque profile, one held sample per controller period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanTorqueProfile {
    /// Hz
    pub rate: f64,
    /// (hip, knee) torque held over `[k/rate, (k+1)/rate)`, N·m.
    pub tau: Vec<[f64; 2]>,
    /// Sample indices of cycle starts; the last entry closes the last cycle.
    pub cycle_bounds: Vec<usize>,
    /// Human pose and velocity at t = 0.
    pub initial_q: [f64; 2],
    pub initial_qdot: [f64; 2],
    /// RMS of the tracking error per joint during estimation, rad.
    pub tracking_rms: [f64; 2],
    /// Number of periods in which a joint hit the subject's torque limit.
    pub saturated_periods: usize,
    pub warnings: Vec<String>,
}

impl HumanTorqueProfile {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.tau.len() as f64 / self.rate
    }

    pub fn cycles(&self) -> usize {
        self.cycle_bounds.len().saturating_sub(1)
    }

    /// Torque at tick `k`, looping over the profile.
    pub fn at_tick(&self, k: usize) -> [f64; 2] {
        self.tau[k % self.tau.len()]
    }

    pub fn peak(&self) -> f64 {
        self.tau.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// The first `cycles` cycles only.
    pub fn truncated(&self, cycles: usize) -> Result<HumanTorqueProfile> {
        if cycles == 0 || cycles > self.cycles() {
            return Err(Error::Precondition(format!(
                "cannot keep {cycles} of {} cycles",
                self.cycles()
            )));
        }
        let start = self.cycle_bounds[0];
        let end = self.cycle_bounds[cycles];
        if start != 0 {
            return Err(Error::Precondition("profile does not start at a cycle boundary".into()));
        }
        Ok(HumanTorqueProfile {
            tau: self.tau[..end].to_vec(),
            cycle_bounds: self.cycle_bounds[..=cycles].to_vec(),
            ..self.clone()
        })
    }

    /// Reads `t, tau_hip, tau_knee` rows saved by [`Self::write_csv`] and
    /// attaches the cycle bounds and initial state of `motion`, the extracted
    /// motion the torques were estimated from. Tracking residuals are unknown
    /// and reported as zero.
    pub fn read_csv<R: Read>(input: R, motion: &RecordedMotion, rate: f64) -> Result<Self> {
        motion.validate()?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let mut tau = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(e.to_string()))?;
            let vals: Vec<f64> = record
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?;
            if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("row {}: expected finite t, tau_hip, tau_knee", line + 2)));
            }
            tau.push([vals[1], vals[2]]);
        }
        let ticks = (motion.duration() * rate).round() as usize;
        if tau.len() != ticks {
            return Err(Error::Precondition(format!(
                "{} torque rows for a motion of {ticks} controller periods",
                tau.len()
            )));
        }
        let (initial_q, initial_qdot) = motion.interpolator().eval(motion.samples[0].t);
        Ok(Self {
            rate,
            tau,
            cycle_bounds: tick_bounds(motion, rate, ticks),
            initial_q,
            initial_qdot,
            tracking_rms: [0.0; 2],
            saturated_periods: 0,
            warnings: Vec::new(),
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["t", "tau_hip", "tau_knee"]).map_err(err)?;
        for (k, tau) in self.tau.iter().enumerate() {
            let t = k as f64 / self.rate;
            w.write_record([t.to_string(), tau[0].to_string(), tau[1].to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Cycle marks of `motion` converted to controller ticks.
fn tick_bounds(motion: &RecordedMotion, rate: f64, ticks: usize) -> Vec<usize> {
    if motion.cycle_marks.is_empty() {
        return vec![0, ticks];
    }
    let base = motion.samples[motion.cycle_marks[0]].t;
    let mut bounds: Vec<usize> = motion
        .cycle_marks
        .iter()
        .map(|&m| (((motion.samples[m].t - base) * rate).round() as usize).min(ticks))
        .collect();
    bounds.dedup();
    bounds
}

/// Estimates the feedforward torques that reproduce `motion` with the exo in
/// transparent mode. Physics runs at `dt`; the rigid-coupling inverse dynamics
/// of the desired motion plus a PD correction is re-evaluated every physics
/// step, and the applied torque is averaged over each controller period.
pub fn estimate_tau_h(
    model: &CoupledModel,
    motion: &RecordedMotion,
    gains: &TrackingGains,
    dt: f64,
) -> Result<HumanTorqueProfile> {
    motion.validate()?;
    gains.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Precondition(format!("dt must be > 0, got {dt}")));
    }
    let rate = model.exo.controller_rate;
    let period = 1.0 / rate;
    let t_start = motion.samples[0].t;
    let ticks = (motion.duration() * rate).round() as usize;
    if ticks == 0 {
        return Err(Error::Precondition("motion shorter than one controller period".into()));
    }
    let (n_sub, h) = substeps(period, dt);
    let desired = motion.interpolator();
    let stepper = Stepper::new(model);
    let limits = model.subject.torque_limits();

    let (q0, qd0) = desired.eval(t_start);
    let mut state = CoupledState::aligned_moving(q0, qd0);
    let mut tau = Vec::with_capacity(ticks);
    let mut sq_err = [0.0; 2];
    let mut saturated_periods = 0;

    for k in 0..ticks {
        let mut sum = [0.0; 2];
        let mut saturated = false;
        for sub in 0..n_sub {
            let t = k as f64 * period + sub as f64 * h;
            let (qd, qdd) = desired.eval(t_start + t);
            let ff = rigid_inverse_dynamics(model, qd, qdd, desired.acceleration(t_start + t));
            let mut input = TorqueInput::ZERO;
            for j in 0..2 {
                let raw = ff[j] + gains.kp[j] * (qd[j] - state.q[j]) + gains.kd[j] * (qdd[j] - state.qdot[j]);
                let (v, hit) = clamp_flag(raw, limits[j]);
                input.tau_h[j] = v;
                saturated |= hit;
                sum[j] += v;
            }
            state.t = t;
            state = stepper.rk4(&state, &input, h)?;
        }
        saturated_periods += saturated as usize;
        tau.push([sum[0] / n_sub as f64, sum[1] / n_sub as f64]);

        let (qd, _) = desired.eval(t_start + (k + 1) as f64 * period);
        for j in 0..2 {
            sq_err[j] += (qd[j] - state.q[j]).powi(2);
        }
    }
    let tracking_rms = sq_err.map(|s| (s / ticks as f64).sqrt());

    let cycle_bounds = tick_bounds(motion, rate, ticks);

    let mut profile = HumanTorqueProfile {
        rate,
        tau,
        cycle_bounds,
        initial_q: q0,
        initial_qdot: qd0,
        tracking_rms,
        saturated_periods,
        warnings: Vec::new(),
    };
    for (j, name) in ["hip", "knee"].iter().enumerate() {
        if tracking_rms[j] > MAX_TRACKING_RMS {
            profile.warnings.push(format!(
                "{name} tracking residual {:.3} deg RMS exceeds 1 deg",
                tracking_rms[j].to_degrees()
            ));
        }
    }
    if saturated_periods > 0 {
        profile.warnings.push(format!(
            "human torque limit reached in {saturated_periods} controller periods"
        ));
    }
    let peak = profile.peak();
    let first = profile.tau[0];
    let last = *profile.tau.last().unwrap();
    let mismatch = (first[0] - last[0]).abs().max((first[1] - last[1]).abs());
    if peak > 0.0 && mismatch > PERIODIC_ENDPOINT_TOLERANCE * peak {
        profile.warnings.push(format!(
            "start/end torque mismatch {mismatch:.2} N·m exceeds {:.0}% of peak",
            PERIODIC_ENDPOINT_TOLERANCE * 100.0
        ));
    }
    Ok(profile)
}

/// [`estimate_tau_h`] at the default physics step.
pub fn estimate_tau_h_default(
    model: &CoupledModel,
    motion: &RecordedMotion,
    gains: &TrackingGains,
) -> Result<HumanTorqueProfile> {
    estimate_tau_h(model, motion, gains, DEFAULT_DT)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycles_motion(n_cycles: usize, period: f64, rate: f64) -> RecordedMotion {
        let per_cycle = (period * rate) as usize;
        let total = n_cycles * per_cycle;
        let samples = (0..=total)
            .map(|i| {
                let t = i as f64 / rate;
                let p = std::f64::consts::TAU * t / period;
                MotionSample {
                    t,
                    hip: 0.2 * p.sin(),
                    knee: 0.4 + 0.3 * p.cos(),
                }
            })
            .collect();
        let marks = (0..=n_cycles).map(|c| c * per_cycle).collect();
        RecordedMotion::new(samples, marks).unwrap()
    }

    #[test]
    fn nine_cycles_keep_three_to_seven() {
        let m = cycles_motion(9, 1.0, 200.0);
        let out = extract_cycles(&m, 100.0).unwrap();
        assert_eq!(out.full_cycles(), 5);
        assert_eq!(out.cycle_marks, vec![0, 100, 200, 300, 400, 500]);
        // Cycle 3 (1-based) starts at t = 2 s in the source.
        assert!((out.samples[0].hip - m.samples[400].hip).abs() < 1e-12);
        for w in out.samples.windows(2) {
            assert!((w[1].t - w[0].t - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn six_cycles_are_too_few() {
        let m = cycles_motion(6, 1.0, 100.0);
        assert_eq!(
            extract_cycles(&m, 100.0).unwrap_err(),
            Error::TooFewCycles { found: 6, required: 7 }
        );
    }

    #[test]
    fn hermite_reproduces_samples_and_slopes() {
        let m = cycles_motion(1, 1.0, 100.0);
        let it = m.interpolator();
        let (q, _) = it.eval(m.samples[37].t);
        assert!((q[0] - m.samples[37].hip).abs() < 1e-12);
        let (_, qd) = it.eval(0.5);
        let exact = 0.2 * std::f64::consts::TAU * (std::f64::consts::TAU * 0.5).cos();
        assert!((qd[0] - exact).abs() < 1e-2 * exact.abs());
    }

    #[test]
    fn non_positive_gains_rejected() {
        let model = crate::model::default_model(1.75, 70.0).unwrap();
        let m = cycles_motion(1, 1.0, 100.0);
        let gains = TrackingGains {
            kp: [0.0, 100.0],
            kd: [1.0, 1.0],
        };
        assert!(estimate_tau_h(&model, &m, &gains, DEFAULT_DT).is_err());
    }

    #[test]
    fn cycle_mark_file() {
        assert_eq!(parse_cycle_marks("# marks\n0\n120\n\n240\n").unwrap(), vec![0, 120, 240]);
        assert!(parse_cycle_marks("x").is_err());
    }
}
