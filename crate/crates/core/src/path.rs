//! Dual-phase hip–knee reference loops.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2 degrees.
pub const DEFAULT_DEAD_BAND: f64 = 2.0 * std::f64::consts::PI / 180.0;
pub const DEFAULT_PATH_POINTS: usize = 200;
/// Fraction of the default loop labelled as stance.
pub const DEFAULT_STANCE_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ST")]
    Stance,
    #[serde(rename = "SW")]
    Swing,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Stance => "ST",
            Phase::Swing => "SW",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ST" | "st" => Ok(Phase::Stance),
            "SW" | "sw" => Ok(Phase::Swing),
            other => Err(Error::InvalidPath(format!("unknown phase label {other:?}"))),
        }
    }
}

/// Result of a reference lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub q_ref: [f64; 2],
    pub index: usize,
    pub phase: Phase,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePath {
    /// (hip, knee) samples in rad, traversed in order and closing back to the
    /// first sample.
    pub points: Vec<[f64; 2]>,
    pub phases: Vec<Phase>,
    /// Dead-band radius, rad.
    pub dead_band: f64,
}

impl ReferencePath {
    pub fn new(points: Vec<[f64; 2]>, phases: Vec<Phase>, dead_band: f64) -> Result<Self> {
        let path = Self {
            points,
            phases,
            dead_band,
        };
        path.validate()?;
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n < 3 {
            return Err(Error::InvalidPath(format!("{n} points, at least 3 required")));
        }
        if self.phases.len() != n {
            return Err(Error::InvalidPath(format!(
                "{} phase labels for {n} points",
                self.phases.len()
            )));
        }
        if !(self.dead_band.is_finite() && self.dead_band >= 0.0) {
            return Err(Error::InvalidPath(format!("dead band {} must be >= 0", self.dead_band)));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPath("non-finite sample".into()));
        }

        let max_step = self
            .points
            .windows(2)
            .map(|w| dist(w[0], w[1]))
            .fold(0.0, f64::max);
        let gap = dist(self.points[n - 1], self.points[0]);
        if gap > 1.5 * max_step + 1e-12 {
            return Err(Error::InvalidPath(format!(
                "loop is not closed: last-to-first gap {gap:.4} rad exceeds 1.5x the largest step {max_step:.4} rad"
            )));
        }

        // Each phase must be one contiguous arc around the loop.
        let changes = (0..n)
            .filter(|&i| self.phases[i] != self.phases[(i + 1) % n])
            .count();
        if changes > 2 {
            return Err(Error::InvalidPath(format!(
                "phase labels change {changes} times around the loop; each phase must form one arc"
            )));
        }
        Ok(())
    }

    /// Index of the sample nearest to `q_act` in Euclidean joint-space
    /// distance. Ties go to the lowest index.
    pub fn closest(&self, q_act: [f64; 2]) -> ClosestPoint {
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let dx = p[0] - q_act[0];
            let dy = p[1] - q_act[1];
            let d2 = dx * dx + dy * dy;
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        ClosestPoint {
            q_ref: self.points[best],
            index: best,
            phase: self.phases[best],
            distance: best_d2.sqrt(),
        }
    }

    /// Total loop length including the closing segment, rad.
    pub fn arc_length(&self) -> f64 {
        let n = self.points.len();
        (0..n).map(|i| dist(self.points[i], self.points[(i + 1) % n])).sum()
    }

    /// Resamples to `n` points evenly spaced in arc length, starting at the
    /// first sample. Each new point takes the label of the segment it falls
    /// on, which is the label of the segment's starting sample.
    pub fn resample(&self, n: usize) -> Result<ReferencePath> {
        if n < 3 {
            return Err(Error::InvalidPath(format!("cannot resample to {n} points")));
        }
        let m = self.points.len();
        let mut cumulative = Vec::with_capacity(m + 1);
        cumulative.push(0.0);
        for i in 0..m {
            let next = cumulative[i] + dist(self.points[i], self.points[(i + 1) % m]);
            cumulative.push(next);
        }
        let total = cumulative[m];
        if total <= 0.0 {
            return Err(Error::InvalidPath("loop has zero length".into()));
        }
        let mut points = Vec::with_capacity(n);
        let mut phases = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            let s = total * k as f64 / n as f64;
            while seg + 1 < m && cumulative[seg + 1] <= s {
                seg += 1;
            }
            let len = cumulative[seg + 1] - cumulative[seg];
            let frac = if len > 0.0 { (s - cumulative[seg]) / len } else { 0.0 };
            let a = self.points[seg];
            let b = self.points[(seg + 1) % m];
            points.push([a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]);
            phases.push(self.phases[seg]);
        }
        ReferencePath::new(points, phases, self.dead_band)
    }

    /// Mean hip and knee angle over the samples.
    pub fn centroid(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let (h, k) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(h, k), p| (h + p[0], k + p[1]));
        [h / n, k / n]
    }

    pub fn read_csv<R: Read>(input: R, dead_band: f64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let mut points = Vec::new();
        let mut phases = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(e.to_string()))?;
            if record.len() != 3 {
                return Err(Error::Parse(format!(
                    "row {}: expected hip_rad, knee_rad, phase",
                    line + 2
                )));
            }
            let num = |i: usize| {
                record[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))
            };
            points.push([num(0)?, num(1)?]);
            phases.push(record[2].parse()?);
        }
        ReferencePath::new(points, phases, dead_band)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["hip_rad", "knee_rad", "phase"]).map_err(err)?;
        for (p, phase) in self.points.iter().zip(&self.phases) {
            w.write_record([p[0].to_string(), p[1].to_string(), phase.label().to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Smooth periodic bump with unit peak at `centre` (cycle fraction).
fn bump(p: f64, centre: f64, concentration: f64) -> f64 {
    (concentration * ((TAU * (p - centre)).cos() - 1.0)).exp()
}

/// Hip and knee angle (rad) of the built-in loop at cycle fraction `p`.
///
/// A sagittal stepping pattern with a damped loading response: the hip
/// extends through stance and flexes to about 29° late in swing, the knee
/// stays near extension in stance and peaks near 60° in mid swing.
pub fn default_loop_pose(p: f64) -> [f64; 2] {
    let hip = 0.17 + 0.33 * (TAU * (p - 0.95)).cos();
    let knee = 0.1 + 0.95 * bump(p, 0.73, 3.5) + 0.1 * bump(p, 0.13, 8.0);
    [hip, knee]
}

/// Built-in reference loop, `n` samples evenly spaced in cycle time, the first
/// 60 % labelled stance.
pub fn default_path(n: usize, dead_band: f64) -> Result<ReferencePath> {
    let points = (0..n)
        .map(|i| default_loop_pose(i as f64 / n as f64))
        .collect();
    let phases = (0..n)
        .map(|i| {
            if (i as f64) < DEFAULT_STANCE_FRACTION * n as f64 {
                Phase::Stance
            } else {
                Phase::Swing
            }
        })
        .collect();
    ReferencePath::new(points, phases, dead_band)
}
