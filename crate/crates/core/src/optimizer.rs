//! Bounded derivative-free minimisation with a cubic radial-basis surrogate.
//!
//! Each iteration fits a cubic RBF with a linear tail to every evaluation so
//! far, scores a cloud of candidates by a merit that mixes the surrogate value
//! with the distance to already-evaluated points, and evaluates the best
//! candidate. The mixing weight and the perturbation scale cycle on a fixed
//! schedule.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Merit weights on the surrogate term, cycled per proposal.
pub const DEFAULT_MERIT_WEIGHTS: [f64; 4] = [0.3, 0.5, 0.8, 0.95];
/// Standard deviations of the incumbent perturbations as fractions of the box
/// width, cycled per proposal.
pub const DEFAULT_PERTURBATION_SCALES: [f64; 4] = [0.2, 0.1, 0.05, 0.02];
pub const DEFAULT_CANDIDATES: usize = 1000;
pub const DEFAULT_MAX_EVALS: usize = 150;
/// Ridge used when the interpolation system is numerically singular.
pub const RIDGE_LAMBDA: f64 = 1e-10;
/// Penalty when no finite value has been seen yet.
pub const PENALTY_FLOOR: f64 = 1e6;
/// Penalty multiplier on the largest finite value seen so far.
pub const PENALTY_FACTOR: f64 = 1e3;
/// Two points closer than this in the unit box count as the same point.
const COLLISION_TOL: f64 = 1e-9;
const INTERPOLATION_TOL: f64 = 1e-8;

/// Candidate generation and merit schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalSettings {
    pub merit_weights: Vec<f64>,
    pub perturbation_scales: Vec<f64>,
    /// Candidates per proposal, split evenly between incumbent perturbations
    /// and uniform samples.
    pub candidates: usize,
}

impl Default for ProposalSettings {
    fn default() -> Self {
        Self {
            merit_weights: DEFAULT_MERIT_WEIGHTS.to_vec(),
            perturbation_scales: DEFAULT_PERTURBATION_SCALES.to_vec(),
            candidates: DEFAULT_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptProblem {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub max_evals: usize,
    pub seed: u64,
    /// Evaluated before the space-filling design, in order.
    #[serde(default)]
    pub initial_points: Vec<Vec<f64>>,
    /// Proposals evaluated concurrently per iteration.
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub proposal: ProposalSettings,
}

fn one() -> usize {
    1
}

impl OptProblem {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, max_evals: usize, seed: u64) -> Self {
        Self {
            lower,
            upper,
            max_evals,
            seed,
            initial_points: Vec::new(),
            batch_size: 1,
            proposal: ProposalSettings::default(),
        }
    }

    /// `dim`-dimensional box `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64, max_evals: usize, seed: u64) -> Self {
        Self::new(vec![lo; dim], vec![hi; dim], max_evals, seed)
    }

    pub fn with_initial_points(mut self, points: Vec<Vec<f64>>) -> Self {
        self.initial_points = points;
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::invalid("optimizer.bounds", "dimension must be >= 1"));
        }
        if self.upper.len() != dim {
            return Err(Error::invalid(
                "optimizer.bounds",
                format!("{} lower vs {} upper bounds", dim, self.upper.len()),
            ));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(
                    format!("optimizer.bounds[{i}]"),
                    format!("need finite lower < upper, got [{lo}, {hi}]"),
                ));
            }
        }
        if self.max_evals < dim + 1 {
            return Err(Error::invalid(
                "optimizer.max_evals",
                format!("{} is below dim + 1 = {}", self.max_evals, dim + 1),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("optimizer.batch_size", "must be >= 1"));
        }
        for (k, p) in self.initial_points.iter().enumerate() {
            if !self.contains(p) {
                return Err(Error::invalid(
                    format!("optimizer.initial_points[{k}]"),
                    format!("{p:?} is outside the bounds"),
                ));
            }
        }
        let s = &self.proposal;
        if s.merit_weights.is_empty() || s.merit_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("optimizer.proposal.merit_weights", "need values in [0, 1]"));
        }
        if s.perturbation_scales.is_empty() || s.perturbation_scales.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("optimizer.proposal.perturbation_scales", "need values > 0"));
        }
        if s.candidates < 2 {
            return Err(Error::invalid("optimizer.proposal.candidates", "need at least 2"));
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| x.is_finite() && lo <= x && x <= hi)
    }

    fn to_unit(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (lo, hi))| (x - lo) / (hi - lo))
            .collect()
    }

    fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (lo, hi))| (lo + x.clamp(0.0, 1.0) * (hi - lo)).clamp(*lo, *hi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval_index: usize,
    pub point: Vec<f64>,
    /// Objective value, or the penalty if the evaluation failed.
    pub value: f64,
    pub failed: bool,
    /// Seconds since the start of the run when the evaluation finished.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxEvals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub history: Vec<EvalRecord>,
    pub termination: Termination,
}

impl OptResult {
    /// Best value after each evaluation.
    pub fn incumbent_curve(&self) -> Vec<f64> {
        self.history
            .iter()
            .scan(f64::INFINITY, |best, r| {
                *best = best.min(r.value);
                Some(*best)
            })
            .collect()
    }
}

fn design_size(dim: usize) -> usize {
    (2 * dim).max(8)
}

/// Initial points: `initial_points` (deduplicated, in order) followed by a
/// seeded Latin-hypercube sample of size `max(2·dim, 8)`.
pub fn initial_design(problem: &OptProblem) -> Vec<Vec<f64>> {
    let dim = problem.dim();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for p in &problem.initial_points {
        if !out.iter().any(|q| q == p) {
            out.push(p.clone());
        }
    }
    let n = design_size(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    // One random permutation of the strata per coordinate.
    let mut columns: Vec<Vec<usize>> = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        columns.push(perm);
    }
    for i in 0..n {
        let u: Vec<f64> = (0..dim)
            .map(|j| (columns[j][i] as f64 + rng.random::<f64>()) / n as f64)
            .collect();
        let p = problem.from_unit(&u);
        if !out.iter().any(|q| q == &p) {
            out.push(p);
        }
    }
    out
}

/// Cubic RBF interpolant with a linear polynomial tail, in unit-box
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfSurrogate {
    lower: Vec<f64>,
    upper: Vec<f64>,
    centres: Vec<Vec<f64>>,
    weights: Vec<f64>,
    /// Constant term followed by one slope per coordinate.
    tail: Vec<f64>,
    ridge: bool,
}

fn cubic(r: f64) -> f64 {
    r * r * r
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl RbfSurrogate {
    /// Fits the interpolant to `(point, value)` pairs within the box.
    pub fn fit(lower: &[f64], upper: &[f64], points: &[Vec<f64>], values: &[f64]) -> Result<Self> {
        let dim = lower.len();
        let n = points.len();
        if values.len() != n {
            return Err(Error::Precondition(format!("{n} points but {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("surrogate values must be finite".into()));
        }
        let scale = |p: &[f64]| -> Vec<f64> {
            p.iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (lo, hi))| (x - lo) / (hi - lo))
                .collect()
        };
        let centres: Vec<Vec<f64>> = points.iter().map(|p| scale(p)).collect();
        for i in 0..n {
            for j in 0..i {
                if distance(&centres[i], &centres[j]) < COLLISION_TOL {
                    return Err(Error::Precondition(format!("points {j} and {i} coincide")));
                }
            }
        }
        if n < dim + 1 {
            return Err(Error::Precondition(format!(
                "{n} distinct points, at least dim + 1 = {} required",
                dim + 1
            )));
        }

        let m = n + dim + 1;
        let build = |ridge: f64| {
            let mut a = DMatrix::<f64>::zeros(m, m);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = cubic(distance(&centres[i], &centres[j]));
                }
                a[(i, i)] += ridge;
                a[(i, n)] = 1.0;
                a[(n, i)] = 1.0;
                for k in 0..dim {
                    a[(i, n + 1 + k)] = centres[i][k];
                    a[(n + 1 + k, i)] = centres[i][k];
                }
            }
            a
        };
        let mut rhs = DVector::<f64>::zeros(m);
        for (i, v) in values.iter().enumerate() {
            rhs[i] = *v;
        }
        let value_scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);

        let solve = |a: &DMatrix<f64>| -> Option<DVector<f64>> {
            let x = a.clone().lu().solve(&rhs)?;
            if x.iter().all(|v| v.is_finite()) {
                Some(x)
            } else {
                None
            }
        };
        let exact = build(0.0);
        let (coeffs, ridge) = match solve(&exact) {
            Some(x) if (&exact * &x - &rhs).amax() <= INTERPOLATION_TOL * value_scale => (x, false),
            _ => {
                let regular = build(RIDGE_LAMBDA);
                let x = solve(&regular).ok_or_else(|| {
                    Error::Precondition("degenerate sample geometry: RBF system is singular".into())
                })?;
                (x, true)
            }
        };
        Ok(Self {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            centres,
            weights: coeffs.rows(0, n).iter().copied().collect(),
            tail: coeffs.rows(n, dim + 1).iter().copied().collect(),
            ridge,
        })
    }

    /// True if the exact system was singular and the ridge fit was used.
    pub fn is_regularized(&self) -> bool {
        self.ridge
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        let u: Vec<f64> = p
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (lo, hi))| (x - lo) / (hi - lo))
            .collect();
        self.eval_unit(&u)
    }

    fn eval_unit(&self, u: &[f64]) -> f64 {
        let radial: f64 = self
            .centres
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * cubic(distance(c, u)))
            .sum();
        let linear: f64 = self.tail[0] + self.tail[1..].iter().zip(u).map(|(a, x)| a * x).sum::<f64>();
        radial + linear
    }
}

/// Fits the surrogate to a history. Failed evaluations enter at the largest
/// finite value seen, so the penalty constant does not flatten the fit.
pub fn fit_surrogate(problem: &OptProblem, history: &[EvalRecord]) -> Result<RbfSurrogate> {
    let worst = history
        .iter()
        .filter(|r| !r.failed)
        .map(|r| r.value)
        .fold(f64::NEG_INFINITY, f64::max);
    let fill = if worst.is_finite() { worst } else { 0.0 };
    let points: Vec<Vec<f64>> = history.iter().map(|r| r.point.clone()).collect();
    let values: Vec<f64> = history
        .iter()
        .map(|r| if r.failed { fill } else { r.value })
        .collect();
    RbfSurrogate::fit(&problem.lower, &problem.upper, &points, &values)
}

/// Position in the weight and scale cycles plus the candidate RNG.
#[derive(Debug, Clone)]
pub struct CycleState {
    pub iteration: usize,
    rng: ChaCha8Rng,
}

impl CycleState {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { iteration: 0, rng }
    }

    pub fn merit_weight(&self, settings: &ProposalSettings) -> f64 {
        settings.merit_weights[self.iteration % settings.merit_weights.len()]
    }

    pub fn perturbation_scale(&self, settings: &ProposalSettings) -> f64 {
        settings.perturbation_scales[self.iteration % settings.perturbation_scales.len()]
    }
}

/// Next point to evaluate. `pending` holds points already proposed in the
/// current batch; they count as evaluated for the distance term.
pub fn propose_next(
    surrogate: &RbfSurrogate,
    history: &[EvalRecord],
    pending: &[Vec<f64>],
    problem: &OptProblem,
    state: &mut CycleState,
) -> Vec<f64> {
    let settings = &problem.proposal;
    let dim = problem.dim();
    let w = state.merit_weight(settings);
    let sigma = state.perturbation_scale(settings);
    state.iteration += 1;

    let evaluated: Vec<Vec<f64>> = history
        .iter()
        .map(|r| &r.point)
        .chain(pending)
        .map(|p| problem.to_unit(p))
        .collect();
    let best = history
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .map(|r| problem.to_unit(&r.point))
        .unwrap_or_else(|| vec![0.5; dim]);

    let half = settings.candidates / 2;
    let rng = &mut state.rng;
    let mut cloud: Vec<Vec<f64>> = Vec::with_capacity(settings.candidates);
    for _ in 0..half {
        cloud.push(
            best.iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(rng);
                    (x + sigma * z).clamp(0.0, 1.0)
                })
                .collect(),
        );
    }
    for _ in half..settings.candidates {
        cloud.push((0..dim).map(|_| rng.random::<f64>()).collect());
    }

    let nearest = |u: &[f64]| {
        evaluated
            .iter()
            .map(|e| distance(e, u))
            .fold(f64::INFINITY, f64::min)
    };
    let scored: Vec<(Vec<f64>, f64, f64)> = cloud
        .into_iter()
        .map(|u| {
            let s = surrogate.eval_unit(&u);
            let d = nearest(&u);
            (u, s, d)
        })
        .filter(|(_, _, d)| *d > COLLISION_TOL)
        .collect();

    if scored.is_empty() {
        // Every candidate collided; nudge the incumbent off the history.
        let mut u = best;
        for (k, x) in u.iter_mut().enumerate() {
            let nudge = 1e-6 * (k + 1) as f64;
            *x = if *x + nudge <= 1.0 { *x + nudge } else { *x - nudge };
        }
        return problem.from_unit(&u);
    }

    let (s_min, s_max) = scored
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.1), hi.max(c.1)));
    let (d_min, d_max) = scored
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.2), hi.max(c.2)));
    let unit = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let (u, _) = scored
        .iter()
        .map(|(u, s, d)| {
            let merit = w * unit(*s, s_min, s_max) + (1.0 - w) * (1.0 - unit(*d, d_min, d_max));
            (u, merit)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty candidate set");
    problem.from_unit(u)
}

fn penalty(history: &[EvalRecord]) -> f64 {
    let worst = history
        .iter()
        .filter(|r| !r.failed)
        .map(|r| r.value)
        .fold(f64::NEG_INFINITY, f64::max);
    if worst.is_finite() {
        PENALTY_FACTOR * worst.abs().max(f64::MIN_POSITIVE)
    } else {
        PENALTY_FLOOR
    }
}

/// Minimises `objective` over the box with exactly `max_evals` evaluations.
///
/// The objective may fail or return a non-finite value; such evaluations are
/// recorded with the penalty constant. Proposals within a batch are evaluated
/// in parallel; the history order does not depend on scheduling.
pub fn minimize<F, E>(problem: &OptProblem, objective: F) -> Result<OptResult>
where
    F: Fn(&[f64]) -> std::result::Result<f64, E> + Sync,
{
    problem.validate()?;
    let start = Instant::now();
    let mut history: Vec<EvalRecord> = Vec::with_capacity(problem.max_evals);

    let run_batch = |points: Vec<Vec<f64>>, history: &mut Vec<EvalRecord>| {
        let values: Vec<Option<f64>> = points
            .par_iter()
            .map(|p| objective(p).ok().filter(|v| v.is_finite()))
            .collect();
        let wall = start.elapsed().as_secs_f64();
        for (point, value) in points.into_iter().zip(values) {
            let (value, failed) = match value {
                Some(v) => (v, false),
                None => (penalty(history), true),
            };
            let eval_index = history.len();
            history.push(EvalRecord {
                eval_index,
                point,
                value,
                failed,
                wall_time: wall,
            });
        }
    };

    let mut design = initial_design(problem);
    design.truncate(problem.max_evals);
    run_batch(design, &mut history);

    let mut state = CycleState::new(problem.seed);
    while history.len() < problem.max_evals {
        let batch = problem.batch_size.min(problem.max_evals - history.len());
        let surrogate = fit_surrogate(problem, &history)?;
        let mut pending: Vec<Vec<f64>> = Vec::with_capacity(batch);
        for _ in 0..batch {
            let p = propose_next(&surrogate, &history, &pending, problem, &mut state);
            pending.push(p);
        }
        run_batch(pending, &mut history);
    }

    let best = history
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one evaluation");
    Ok(OptResult {
        best_point: best.point.clone(),
        best_value: best.value,
        termination: Termination::MaxEvals,
        history,
    })
}

/// Optimizer trace: `eval_index, value, best_so_far, failed, wall_time, x0..`.
pub fn write_trace_csv<W: Write>(history: &[EvalRecord], out: W) -> Result<()> {
    let dim = history.first().map_or(0, |r| r.point.len());
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    let mut header = vec![
        "eval_index".to_string(),
        "value".into(),
        "best_so_far".into(),
        "failed".into(),
        "wall_time".into(),
    ];
    header.extend((0..dim).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(err)?;
    let mut best = f64::INFINITY;
    for r in history {
        best = best.min(r.value);
        let mut row = vec![
            r.eval_index.to_string(),
            r.value.to_string(),
            best.to_string(),
            r.failed.to_string(),
            format!("{:.6}", r.wall_time),
        ];
        row.extend(r.point.iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}
