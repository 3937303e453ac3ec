//! Offline personalization: estimate or synthesize the human torque profile,
//! search the four phase stiffnesses against the objective, and compare the
//! result with the uniform baseline across a cohort.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{StiffnessParams, BASELINE_STIFFNESS, DEFAULT_MAX_STIFFNESS};
use crate::dynamics::DEFAULT_DT;
use crate::error::{Error, Result};
use crate::estimator::{HumanTorqueProfile, TrackingGains};
use crate::model::CoupledModel;
use crate::objective::{evaluate_objective, ObjectiveBreakdown, ObjectiveConfig, RolloutConfig};
use crate::optimizer::{minimize, OptProblem, OptResult, ProposalSettings, DEFAULT_MAX_EVALS};
use crate::path::{default_path, ReferencePath, DEFAULT_DEAD_BAND, DEFAULT_PATH_POINTS};
use crate::stats::DEFAULT_PERMUTATIONS;
use crate::synth::{cohort_specs, synth_subject, SubjectSpec, SyntheticSubject};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_COHORT_SIZE: usize = 18;

/// Stiffness search settings. The box is `[lower, upper]⁴` in N·m/rad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lower: f64,
    pub upper: f64,
    pub max_evals: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub proposal: ProposalSettings,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lower: 0.0,
            upper: DEFAULT_MAX_STIFFNESS,
            max_evals: DEFAULT_MAX_EVALS,
            batch_size: 1,
            seed: 0,
            proposal: ProposalSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Physics step of the tracking rollout, s.
    pub dt: f64,
    pub gains: TrackingGains,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            gains: TrackingGains::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    /// Samples of the built-in reference loop.
    pub points: usize,
    /// Dead-band radius, rad.
    pub dead_band: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            points: DEFAULT_PATH_POINTS,
            dead_band: DEFAULT_DEAD_BAND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub subjects: usize,
    /// Seed of the subject specs; subject `i` is synthesized with `seed + i`.
    pub seed: u64,
    pub permutations: usize,
    pub permutation_seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            subjects: DEFAULT_COHORT_SIZE,
            seed: 1,
            permutations: DEFAULT_PERMUTATIONS,
            permutation_seed: 0,
        }
    }
}

/// Everything that determines a run. Parsed from TOML; every table is
/// optional except `schema_version`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub path: PathConfig,
    #[serde(default)]
    pub cohort: CohortConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            objective: ObjectiveConfig::default(),
            rollout: RolloutConfig::default(),
            optimizer: OptimizerConfig::default(),
            estimator: EstimatorConfig::default(),
            path: PathConfig::default(),
            cohort: CohortConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults with the shortened cohort horizon of [`RolloutConfig::reduced`].
    pub fn reduced() -> Self {
        Self {
            rollout: RolloutConfig::reduced(),
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!("unsupported version {}, expected {CONFIG_SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.objective.validate()?;
        if !(self.rollout.dt > 0.0 && self.rollout.dt.is_finite()) {
            return Err(Error::invalid("rollout.dt", "must be > 0"));
        }
        if self.rollout.cycles == Some(0) {
            return Err(Error::invalid("rollout.cycles", "must be >= 1"));
        }
        if !(self.estimator.dt > 0.0 && self.estimator.dt.is_finite()) {
            return Err(Error::invalid("estimator.dt", "must be > 0"));
        }
        if !(self.path.dead_band >= 0.0 && self.path.dead_band.is_finite()) {
            return Err(Error::invalid("path.dead_band", "must be >= 0"));
        }
        if !(self.optimizer.lower >= 0.0 && self.optimizer.upper <= DEFAULT_MAX_STIFFNESS) {
            return Err(Error::invalid(
                "optimizer",
                format!("bounds must lie in [0, {DEFAULT_MAX_STIFFNESS}]"),
            ));
        }
        if self.cohort.subjects < 2 {
            return Err(Error::invalid("cohort.subjects", "a cohort needs at least 2 subjects"));
        }
        self.problem().validate()
    }

    /// The stiffness search, with the baseline as the first evaluated point
    /// whenever it lies in the box.
    pub fn problem(&self) -> OptProblem {
        let o = &self.optimizer;
        let base = vec![BASELINE_STIFFNESS; 4];
        let mut p = OptProblem::cube(4, o.lower, o.upper, o.max_evals, o.seed);
        if p.contains(&base) {
            p.initial_points = vec![base];
        }
        p.batch_size = o.batch_size;
        p.proposal = o.proposal.clone();
        p
    }

    pub fn reference_path(&self) -> Result<ReferencePath> {
        default_path(self.path.points, self.path.dead_band)
    }
}

/// What personalization needs from a subject.
#[derive(Debug, Clone, Copy)]
pub struct SubjectInputs<'a> {
    pub id: &'a str,
    pub model: &'a CoupledModel,
    pub path: &'a ReferencePath,
    pub tau_h: &'a HumanTorqueProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizationResult {
    pub subject_id: String,
    pub optimized: StiffnessParams,
    pub baseline: StiffnessParams,
    /// Fresh rollout of `optimized`.
    pub opt: ObjectiveBreakdown,
    /// Fresh rollout of `baseline`.
    pub base: ObjectiveBreakdown,
    pub search: OptResult,
}

impl PersonalizationResult {
    /// `(base − opt) / base` on the total objective; zero when the baseline
    /// scores zero.
    pub fn improvement(&self) -> f64 {
        if self.base.total > 0.0 {
            (self.base.total - self.opt.total) / self.base.total
        } else {
            0.0
        }
    }
}

/// Searches the four stiffnesses for one subject and re-simulates the best
/// point and the baseline.
pub fn personalize(subject: &SubjectInputs<'_>, cfg: &RunConfig) -> Result<PersonalizationResult> {
    cfg.validate()?;
    let score = |k: &[f64]| {
        let params = StiffnessParams::from_array([k[0], k[1], k[2], k[3]]);
        evaluate_objective(subject.model, subject.path, &params, subject.tau_h, &cfg.objective, &cfg.rollout)
            .map(|b| b.total)
    };
    let search = minimize(&cfg.problem(), score)?;
    let b = &search.best_point;
    let optimized = StiffnessParams::from_array([b[0], b[1], b[2], b[3]]);
    let baseline = StiffnessParams::baseline();
    let rollout = |p: &StiffnessParams| {
        evaluate_objective(subject.model, subject.path, p, subject.tau_h, &cfg.objective, &cfg.rollout)
    };
    let opt = rollout(&optimized)?;
    let base = rollout(&baseline)?;
    Ok(PersonalizationResult {
        subject_id: subject.id.to_string(),
        optimized,
        baseline,
        opt,
        base,
        search,
    })
}

/// Seeds that reproduce one cohort member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSeeds {
    pub synth: u64,
    pub optimizer: u64,
}

pub fn subject_id(index: usize) -> String {
    format!("S{:02}", index + 1)
}

/// Seeds of cohort member `index`.
pub fn subject_seeds(cfg: &RunConfig, index: usize) -> SubjectSeeds {
    SubjectSeeds {
        synth: cfg.cohort.seed.wrapping_add(index as u64),
        optimizer: cfg.optimizer.seed.wrapping_add(index as u64),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortMember {
    pub subject: SyntheticSubject,
    pub tau_h: HumanTorqueProfile,
    pub seeds: SubjectSeeds,
}

/// Synthesizes `cfg.cohort.subjects` subjects in parallel.
pub fn build_cohort(path: &ReferencePath, cfg: &RunConfig) -> Result<Vec<CohortMember>> {
    cfg.validate()?;
    let specs = cohort_specs(cfg.cohort.subjects, cfg.cohort.seed);
    build_members(path, &specs, cfg)
}

/// Synthesizes one member per spec in parallel, in spec order.
pub fn build_members(path: &ReferencePath, specs: &[SubjectSpec], cfg: &RunConfig) -> Result<Vec<CohortMember>> {
    specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let seeds = subject_seeds(cfg, i);
            let (subject, tau_h) = synth_subject(subject_id(i), path, spec, seeds.synth, cfg.estimator.dt)?;
            Ok(CohortMember { subject, tau_h, seeds })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortOutcome {
    pub results: Vec<PersonalizationResult>,
    pub seeds: Vec<SubjectSeeds>,
}

/// Personalizes every member concurrently, each with its own optimizer seed.
pub fn cohort_study(path: &ReferencePath, members: &[CohortMember], cfg: &RunConfig) -> Result<CohortOutcome> {
    if members.len() < 2 {
        return Err(Error::Precondition(format!(
            "a cohort needs at least 2 subjects, got {}",
            members.len()
        )));
    }
    let results = members
        .par_iter()
        .map(|m| {
            let mut sub_cfg = cfg.clone();
            sub_cfg.optimizer.seed = m.seeds.optimizer;
            personalize(
                &SubjectInputs {
                    id: &m.subject.id,
                    model: &m.subject.model,
                    path,
                    tau_h: &m.tau_h,
                },
                &sub_cfg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CohortOutcome {
        results,
        seeds: members.iter().map(|m| m.seeds).collect(),
    })
}
