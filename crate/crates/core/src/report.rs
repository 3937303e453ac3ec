//! Cohort reports and their text, JSON and plot-series renderings.
//!
//! Files are laid out as `<run-id>/<artifact>` for cohort-level outputs and
//! `<run-id>/<subject-id>/<artifact>` for per-subject outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optimizer::write_trace_csv;
use crate::path::ReferencePath;
use crate::pipeline::{CohortOutcome, PersonalizationResult, RunConfig, SubjectSeeds};
use crate::stats::{self, Quartiles};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One subject's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject_id: String,
    /// `[K_hip_st, K_knee_st, K_hip_sw, K_knee_sw]`, N·m/rad.
    pub stiffness: [f64; 4],
    pub objective_opt: f64,
    pub assist_term_opt: f64,
    pub error_term_opt: f64,
    pub objective_base: f64,
    pub assist_term_base: f64,
    pub error_term_base: f64,
    /// `100 · (base − opt) / base`.
    pub improvement_pct: f64,
    pub evaluations: usize,
    pub failed_evaluations: usize,
    /// Best objective after each evaluation.
    pub convergence: Vec<f64>,
    /// Relative location of the optimizer trace.
    pub trace: String,
}

impl SubjectRow {
    pub fn from_result(r: &PersonalizationResult) -> Self {
        Self {
            subject_id: r.subject_id.clone(),
            stiffness: r.optimized.to_array(),
            objective_opt: r.opt.total,
            assist_term_opt: r.opt.assist_term,
            error_term_opt: r.opt.error_term,
            objective_base: r.base.total,
            assist_term_base: r.base.assist_term,
            error_term_base: r.base.error_term,
            improvement_pct: 100.0 * r.improvement(),
            evaluations: r.search.history.len(),
            failed_evaluations: r.search.history.iter().filter(|e| e.failed).count(),
            convergence: r.search.incumbent_curve(),
            trace: format!("{}/trace.csv", r.subject_id),
        }
    }
}

/// Cohort-level statistics, all recomputable from the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub n_improved: usize,
    pub mean_improvement_pct: f64,
    pub std_improvement_pct: f64,
    pub cv_improvement: Option<f64>,
    pub improvement_quartiles: Quartiles,
    pub baseline_quartiles: Quartiles,
    pub optimized_quartiles: Quartiles,
    /// Mean of each stiffness across subjects.
    pub stiffness_mean: [f64; 4],
    pub stiffness_cv: [Option<f64>; 4],
    /// Subjects whose baseline objective lies outside the 1.5·IQR fences.
    pub baseline_outliers: Vec<String>,
    /// Subjects whose improvement lies outside the 1.5·IQR fences.
    pub improvement_outliers: Vec<String>,
    /// Two-sided permutation p for baseline versus optimized objectives.
    pub permutation_p: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[SubjectRow], permutations: usize, seed: u64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySample);
        }
        let imp: Vec<f64> = rows.iter().map(|r| r.improvement_pct).collect();
        let base: Vec<f64> = rows.iter().map(|r| r.objective_base).collect();
        let opt: Vec<f64> = rows.iter().map(|r| r.objective_opt).collect();
        let flagged = |xs: &[f64]| -> Result<Vec<String>> {
            Ok(stats::iqr_outliers(xs)?
                .into_iter()
                .zip(rows)
                .filter(|(f, _)| *f)
                .map(|(_, r)| r.subject_id.clone())
                .collect())
        };
        let mut stiffness_mean = [0.0; 4];
        let mut stiffness_cv = [None; 4];
        for j in 0..4 {
            let k: Vec<f64> = rows.iter().map(|r| r.stiffness[j]).collect();
            stiffness_mean[j] = stats::mean(&k)?;
            stiffness_cv[j] = stats::cv(&k).ok();
        }
        Ok(Self {
            n: rows.len(),
            n_improved: rows.iter().filter(|r| r.objective_opt <= r.objective_base).count(),
            mean_improvement_pct: stats::mean(&imp)?,
            std_improvement_pct: stats::sample_std(&imp)?,
            cv_improvement: stats::cv(&imp).ok(),
            improvement_quartiles: stats::quartiles(&imp)?,
            baseline_quartiles: stats::quartiles(&base)?,
            optimized_quartiles: stats::quartiles(&opt)?,
            stiffness_mean,
            stiffness_cv,
            baseline_outliers: flagged(&base)?,
            improvement_outliers: flagged(&imp)?,
            permutation_p: stats::permutation_test(&base, &opt, permutations, seed)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub subject_id: String,
    pub synth: u64,
    pub optimizer: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub artifact_version: String,
    /// SHA-256 of the canonical JSON form of `config`.
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: Vec<SeedRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub schema_version: u32,
    pub run_id: String,
    pub rows: Vec<SubjectRow>,
    pub aggregates: Aggregates,
    pub provenance: Provenance,
}

/// Hex SHA-256 of the config's canonical JSON serialization.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("run config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

impl CohortReport {
    pub fn new(run_id: &str, outcome: &CohortOutcome, cfg: &RunConfig) -> Result<Self> {
        let rows: Vec<SubjectRow> = outcome.results.iter().map(SubjectRow::from_result).collect();
        Self::from_rows(run_id, rows, &outcome.seeds, cfg)
    }

    pub fn from_rows(run_id: &str, rows: Vec<SubjectRow>, seeds: &[SubjectSeeds], cfg: &RunConfig) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Precondition("cannot report an empty cohort".into()));
        }
        if seeds.len() != rows.len() {
            return Err(Error::Precondition(format!(
                "{} seed records for {} subjects",
                seeds.len(),
                rows.len()
            )));
        }
        let aggregates = Aggregates::from_rows(&rows, cfg.cohort.permutations, cfg.cohort.permutation_seed)?;
        let seeds = rows
            .iter()
            .zip(seeds)
            .map(|(r, s)| SeedRecord {
                subject_id: r.subject_id.clone(),
                synth: s.synth,
                optimizer: s.optimizer,
            })
            .collect();
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            rows,
            aggregates,
            provenance: Provenance {
                artifact_version: ARTIFACT_VERSION.to_string(),
                config_hash: config_hash(cfg),
                config: cfg.clone(),
                seeds,
            },
        })
    }

    /// Checks that the aggregates and hash match the rows and config.
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Precondition("cannot report an empty cohort".into()));
        }
        let cfg = &self.provenance.config;
        let again = Aggregates::from_rows(&self.rows, cfg.cohort.permutations, cfg.cohort.permutation_seed)?;
        if again != self.aggregates {
            return Err(Error::Precondition("aggregates do not match the subject rows".into()));
        }
        if config_hash(cfg) != self.provenance.config_hash {
            return Err(Error::Precondition("config hash does not match the config".into()));
        }
        if self.provenance.seeds.len() != self.rows.len() {
            return Err(Error::Precondition("one seed record per subject is required".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Fixed-width summary table followed by the aggregates.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = &self.aggregates;
        let _ = writeln!(s, "run {}  ({} subjects, config {})", self.run_id, a.n, &self.provenance.config_hash[..12]);
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>8} {:>8} {:>8} {:>12} {:>12} {:>8}",
            "subject", "K_hip_st", "K_knee_st", "K_hip_sw", "K_knee_sw", "J_base", "J_opt", "impr_%"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8} {:>8.1} {:>9.1} {:>8.1} {:>9.1} {:>12.6} {:>12.6} {:>8.2}",
                r.subject_id,
                r.stiffness[0],
                r.stiffness[1],
                r.stiffness[2],
                r.stiffness[3],
                r.objective_base,
                r.objective_opt,
                r.improvement_pct
            );
        }
        let q = &a.improvement_quartiles;
        let _ = writeln!(s);
        let _ = writeln!(s, "improved              {}/{}", a.n_improved, a.n);
        let _ = writeln!(s, "mean improvement      {:.2} %", a.mean_improvement_pct);
        let _ = writeln!(s, "median improvement    {:.2} % (IQR {:.2} to {:.2})", q.median, q.q1, q.q3);
        match a.cv_improvement {
            Some(cv) => {
                let _ = writeln!(s, "CV of improvement     {cv:.3}");
            }
            None => {
                let _ = writeln!(s, "CV of improvement     undefined");
            }
        }
        let _ = writeln!(
            s,
            "mean stiffness        {:.1} {:.1} {:.1} {:.1}",
            a.stiffness_mean[0], a.stiffness_mean[1], a.stiffness_mean[2], a.stiffness_mean[3]
        );
        let _ = writeln!(s, "baseline outliers     {}", list_or_none(&a.baseline_outliers));
        let _ = writeln!(s, "improvement outliers  {}", list_or_none(&a.improvement_outliers));
        let _ = writeln!(s, "permutation p         {:.6}", a.permutation_p);
        s
    }

    /// Plot-ready series as `(file name, contents)` pairs.
    pub fn plot_series(&self) -> Vec<(&'static str, String)> {
        let mut stiffness = String::from("subject_id,k_hip_st,k_knee_st,k_hip_sw,k_knee_sw\n");
        let mut objectives = String::from("subject_id,baseline,optimized,improvement_pct,baseline_outlier\n");
        for r in &self.rows {
            let k = r.stiffness;
            let _ = writeln!(stiffness, "{},{},{},{},{}", r.subject_id, k[0], k[1], k[2], k[3]);
            let outlier = self.aggregates.baseline_outliers.contains(&r.subject_id);
            let _ = writeln!(
                objectives,
                "{},{},{},{},{}",
                r.subject_id, r.objective_base, r.objective_opt, r.improvement_pct, outlier as u8
            );
        }
        let mut convergence = String::from("eval_index");
        for r in &self.rows {
            convergence.push(',');
            convergence.push_str(&r.subject_id);
        }
        convergence.push('\n');
        let longest = self.rows.iter().map(|r| r.convergence.len()).max().unwrap_or(0);
        for i in 0..longest {
            let _ = write!(convergence, "{i}");
            for r in &self.rows {
                match r.convergence.get(i) {
                    Some(v) => {
                        let _ = write!(convergence, ",{v}");
                    }
                    None => convergence.push(','),
                }
            }
            convergence.push('\n');
        }
        vec![
            ("stiffness.csv", stiffness),
            ("objectives.csv", objectives),
            ("convergence.csv", convergence),
        ]
    }
}

fn list_or_none(ids: &[String]) -> String {
    if ids.is_empty() {
        "none".into()
    } else {
        ids.join(", ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    TextTable,
    StructuredDocument,
    PlotSeries,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the report in `format` under `root/<run-id>/` and returns the
/// files written.
pub fn emit(report: &CohortReport, format: ReportFormat, root: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::Precondition("cannot report an empty cohort".into()));
    }
    let dir = root.join(&report.run_id);
    let files = match format {
        ReportFormat::TextTable => vec![("report.txt", report.to_text())],
        ReportFormat::StructuredDocument => vec![("report.json", report.to_json())],
        ReportFormat::PlotSeries => report.plot_series(),
    };
    let mut written = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let p = dir.join(name);
        write_file(&p, contents.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

/// Per-subject artifacts under `root/<run-id>/<subject-id>/`: optimizer
/// trace, both rollouts, and the hip–knee overlay of both rollouts against
/// the reference path.
pub fn emit_subject(
    result: &PersonalizationResult,
    path: &ReferencePath,
    run_id: &str,
    root: &Path,
) -> Result<Vec<PathBuf>> {
    let dir = root.join(run_id).join(&result.subject_id);
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_file(&p, &bytes)?;
        written.push(p);
        Ok(())
    };

    let mut buf = Vec::new();
    write_trace_csv(&result.search.history, &mut buf)?;
    put("trace.csv", buf)?;

    let mut buf = Vec::new();
    result.opt.trajectory.write_csv(&mut buf)?;
    put("trajectory_optimized.csv", buf)?;

    let mut buf = Vec::new();
    result.base.trajectory.write_csv(&mut buf)?;
    put("trajectory_baseline.csv", buf)?;

    let mut buf = Vec::new();
    path.write_csv(&mut buf)?;
    put("path_reference.csv", buf)?;

    let mut overlay = String::from("t,hip_base,knee_base,hip_opt,knee_opt\n");
    for (b, o) in result.base.trajectory.samples.iter().zip(&result.opt.trajectory.samples) {
        let _ = writeln!(overlay, "{},{},{},{},{}", b.t, b.q[0], b.q[1], o.q[0], o.q[1]);
    }
    put("overlay.csv", overlay.into_bytes())?;

    let mut row = serde_json::to_string_pretty(&SubjectRow::from_result(result)).expect("row serializes");
    row.push('\n');
    put("result.json", row.into_bytes())?;
    Ok(written)
}
