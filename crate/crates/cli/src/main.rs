use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use exotune::estimator::{estimate_tau_h, extract_cycles, parse_cycle_marks, HumanTorqueProfile, RecordedMotion};
use exotune::model::{default_model, CoupledModel, ModelDocument};
use exotune::path::ReferencePath;
use exotune::pipeline::{build_cohort, cohort_study, personalize, RunConfig, SubjectInputs};
use exotune::report::{config_hash, emit, emit_subject, CohortReport, ReportFormat};
use exotune::stats;
use exotune::synth::{intended_motion, synth_subject, SubjectSpec, Warp};

/// Offline stiffness personalization for a lower-limb exoskeleton path
/// controller.
#[derive(Parser)]
#[command(name = "exotune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or normalize a coupled model document.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Check or resample a reference path.
    #[command(subcommand)]
    Path(PathCmd),
    /// Estimate feedforward human torques from transparent-mode kinematics.
    EstimateTorques(EstimateArgs),
    /// Optimize the four phase stiffnesses for one subject.
    Personalize(PersonalizeArgs),
    /// Synthesize a cohort, personalize every subject and report.
    Cohort(CohortArgs),
    /// Summarize one CSV column and optionally compare it with another.
    Stats(StatsArgs),
    /// Write a synthetic subject's model, kinematics and torques.
    SynthSubject(SynthArgs),
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Write the fully expanded model document.
    Build {
        /// Body height, m.
        #[arg(long, conflicts_with = "from")]
        height: Option<f64>,
        /// Body mass, kg.
        #[arg(long, conflicts_with = "from")]
        mass: Option<f64>,
        /// Partial model document to expand.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PathCmd {
    /// Parse and validate a `hip_rad,knee_rad,phase` file.
    Validate {
        file: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        dead_band_deg: f64,
    },
    /// Resample a path (or the built-in loop) to equal arc-length spacing.
    Resample {
        /// Input path; the built-in loop when omitted.
        file: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long, default_value_t = 2.0)]
        dead_band_deg: f64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct MotionArgs {
    /// Model document (TOML).
    #[arg(long)]
    model: PathBuf,
    /// `t,hip_rad,knee_rad` recording.
    #[arg(long)]
    kinematics: PathBuf,
    /// One cycle-start sample index per line.
    #[arg(long)]
    cycle_marks: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    motion: MotionArgs,
    /// Torque CSV to write.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PersonalizeArgs {
    #[command(flatten)]
    motion: MotionArgs,
    /// Replay these torques instead of estimating them.
    #[arg(long)]
    torques: Option<PathBuf>,
    /// Reference path; the built-in loop when omitted.
    #[arg(long)]
    path: Option<PathBuf>,
    /// Use the shortened two-cycle horizon.
    #[arg(long)]
    reduced: bool,
    #[arg(long, default_value = "S01")]
    subject_id: String,
    #[arg(long)]
    run_id: Option<String>,
    /// Output root.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct CohortArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the shortened two-cycle horizon.
    #[arg(long)]
    reduced: bool,
    /// Overrides the configured cohort size.
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    run_id: Option<String>,
    /// Skip per-subject trajectory and trace files.
    #[arg(long)]
    summary_only: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// CSV file with a header row.
    file: PathBuf,
    #[arg(long)]
    column: String,
    /// Second column for a two-sided permutation test.
    #[arg(long)]
    against: Option<String>,
    #[arg(long, default_value_t = stats::DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "S01")]
    id: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.75)]
    height: f64,
    #[arg(long, default_value_t = 72.0)]
    mass: f64,
    /// Per-cycle drift standard deviation, rad.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Swing amplitude factors `hip,knee`.
    #[arg(long, value_parser = parse_pair, default_value = "1,1")]
    swing_amplitude: [f64; 2],
    /// Stance amplitude factors `hip,knee`.
    #[arg(long, value_parser = parse_pair, default_value = "1,1")]
    stance_amplitude: [f64; 2],
    /// Swing torque factors `hip,knee`; below 1 weakens swing.
    #[arg(long, value_parser = parse_pair, default_value = "1,1")]
    swing_torque_scale: [f64; 2],
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

/// `hip,knee` pair.
fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [a, b] => Ok([a, b]),
        _ => Err(format!("expected two comma-separated values, got {}", v.len())),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_or_print(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>, reduced: bool) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => RunConfig::default(),
    };
    if reduced {
        cfg.rollout = exotune::objective::RolloutConfig::reduced();
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<CoupledModel> {
    let doc = ModelDocument::parse(&read(path)?).with_context(|| format!("in {}", path.display()))?;
    Ok(doc.resolve().with_context(|| format!("in {}", path.display()))?)
}

fn load_path(path: &Path, dead_band: f64) -> Result<ReferencePath> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(ReferencePath::read_csv(BufReader::new(f), dead_band).with_context(|| format!("in {}", path.display()))?)
}

/// The five extracted cycles at the controller rate.
fn load_motion(args: &MotionArgs, model: &CoupledModel) -> Result<RecordedMotion> {
    let marks = parse_cycle_marks(&read(&args.cycle_marks)?)?;
    let f = fs::File::open(&args.kinematics).with_context(|| format!("opening {}", args.kinematics.display()))?;
    let recording = RecordedMotion::read_csv(BufReader::new(f), marks)
        .with_context(|| format!("in {}", args.kinematics.display()))?;
    Ok(extract_cycles(&recording, model.exo.controller_rate)?)
}

fn report_warnings(profile: &HumanTorqueProfile) {
    for w in &profile.warnings {
        eprintln!("warning: {w}");
    }
}

fn default_run_id(cfg: &RunConfig) -> String {
    format!("run-{}", &config_hash(cfg)[..12])
}

fn model_cmd(cmd: ModelCmd) -> Result<()> {
    let ModelCmd::Build { height, mass, from, out } = cmd;
    let model = match (from, height, mass) {
        (Some(p), _, _) => load_model(&p)?,
        (None, Some(h), Some(m)) => default_model(h, m)?,
        _ => bail!("give either --from or both --height and --mass"),
    };
    write_or_print(out.as_deref(), &ModelDocument::canonical(&model).to_toml())
}

fn path_cmd(cmd: PathCmd) -> Result<()> {
    match cmd {
        PathCmd::Validate { file, dead_band_deg } => {
            let path = load_path(&file, dead_band_deg.to_radians())?;
            println!(
                "{}: {} points, arc length {:.4} rad, valid",
                file.display(),
                path.len(),
                path.arc_length()
            );
            Ok(())
        }
        PathCmd::Resample {
            file,
            points,
            dead_band_deg,
            out,
        } => {
            let band = dead_band_deg.to_radians();
            let resampled = match file {
                Some(f) => load_path(&f, band)?.resample(points)?,
                None => exotune::path::default_path(points, band)?,
            };
            let mut buf = Vec::new();
            resampled.write_csv(&mut buf)?;
            write_or_print(out.as_deref(), std::str::from_utf8(&buf)?)
        }
    }
}

fn estimate_cmd(args: EstimateArgs) -> Result<()> {
    let cfg = load_config(args.motion.config.as_deref(), false)?;
    let model = load_model(&args.motion.model)?;
    let motion = load_motion(&args.motion, &model)?;
    let profile = estimate_tau_h(&model, &motion, &cfg.estimator.gains, cfg.estimator.dt)?;
    report_warnings(&profile);
    let mut buf = Vec::new();
    profile.write_csv(&mut buf)?;
    write(&args.out, buf)?;
    eprintln!(
        "{} periods, peak {:.2} N·m, tracking RMS {:.4}/{:.4} deg",
        profile.len(),
        profile.peak(),
        profile.tracking_rms[0].to_degrees(),
        profile.tracking_rms[1].to_degrees()
    );
    Ok(())
}

fn personalize_cmd(args: PersonalizeArgs) -> Result<()> {
    let cfg = load_config(args.motion.config.as_deref(), args.reduced)?;
    let model = load_model(&args.motion.model)?;
    let motion = load_motion(&args.motion, &model)?;
    let profile = match &args.torques {
        Some(p) => {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            HumanTorqueProfile::read_csv(BufReader::new(f), &motion, model.exo.controller_rate)
                .with_context(|| format!("in {}", p.display()))?
        }
        None => {
            let p = estimate_tau_h(&model, &motion, &cfg.estimator.gains, cfg.estimator.dt)?;
            report_warnings(&p);
            p
        }
    };
    let path = match &args.path {
        Some(p) => load_path(p, cfg.path.dead_band)?,
        None => cfg.reference_path()?,
    };
    let result = personalize(
        &SubjectInputs {
            id: &args.subject_id,
            model: &model,
            path: &path,
            tau_h: &profile,
        },
        &cfg,
    )?;
    let run_id = args.run_id.unwrap_or_else(|| default_run_id(&cfg));
    let files = emit_subject(&result, &path, &run_id, &args.out)?;
    let mut buf = Vec::new();
    profile.write_csv(&mut buf)?;
    write(&args.out.join(&run_id).join(&args.subject_id).join("torques.csv"), buf)?;
    let k = result.optimized.to_array();
    println!(
        "{}: K = [{:.1}, {:.1}, {:.1}, {:.1}] N·m/rad, objective {:.6} vs baseline {:.6} ({:.1}% better)",
        result.subject_id,
        k[0],
        k[1],
        k[2],
        k[3],
        result.opt.total,
        result.base.total,
        100.0 * result.improvement()
    );
    eprintln!("wrote {} files under {}", files.len() + 1, args.out.join(&run_id).display());
    Ok(())
}

fn cohort_cmd(args: CohortArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), args.reduced)?;
    if let Some(n) = args.subjects {
        cfg.cohort.subjects = n;
    }
    cfg.validate()?;
    let path = cfg.reference_path()?;
    eprintln!("synthesizing {} subjects", cfg.cohort.subjects);
    let members = build_cohort(&path, &cfg)?;
    for m in &members {
        for w in &m.tau_h.warnings {
            eprintln!("warning: {}: {w}", m.subject.id);
        }
    }
    eprintln!("personalizing");
    let outcome = cohort_study(&path, &members, &cfg)?;
    let run_id = args.run_id.unwrap_or_else(|| default_run_id(&cfg));
    let report = CohortReport::new(&run_id, &outcome, &cfg)?;
    for format in [ReportFormat::TextTable, ReportFormat::StructuredDocument, ReportFormat::PlotSeries] {
        emit(&report, format, &args.out)?;
    }
    if !args.summary_only {
        for r in &outcome.results {
            emit_subject(r, &path, &run_id, &args.out)?;
        }
    }
    print!("{}", report.to_text());
    Ok(())
}

fn stats_cmd(args: StatsArgs) -> Result<()> {
    let f = fs::File::open(&args.file).with_context(|| format!("opening {}", args.file.display()))?;
    let mut reader = csv_reader(f);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let index = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("no column {name:?} in {}", args.file.display()))
    };
    let a_idx = index(&args.column)?;
    let b_idx = args.against.as_deref().map(index).transpose()?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let value = |i: usize| -> Result<f64> {
            record
                .get(i)
                .unwrap_or("")
                .parse()
                .with_context(|| format!("row {}", line + 2))
        };
        a.push(value(a_idx)?);
        if let Some(i) = b_idx {
            b.push(value(i)?);
        }
    }
    let mut doc = serde_json::json!({ args.column.clone(): column_summary(&a)? });
    if let Some(name) = &args.against {
        doc[name] = column_summary(&b)?;
        doc["permutation_p"] = stats::permutation_test(&a, &b, args.permutations, args.seed)?.into();
        doc["permutations"] = args.permutations.into();
        doc["seed"] = args.seed.into();
    }
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn csv_reader(f: fs::File) -> csv::Reader<fs::File> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f)
}

fn column_summary(xs: &[f64]) -> Result<serde_json::Value> {
    let summary = stats::summarize(xs)?;
    let outliers: Vec<usize> = stats::iqr_outliers(xs)?
        .into_iter()
        .enumerate()
        .filter_map(|(i, f)| f.then_some(i))
        .collect();
    Ok(serde_json::json!({ "summary": summary, "outlier_rows": outliers }))
}

fn synth_cmd(args: SynthArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), false)?;
    let path = cfg.reference_path()?;
    let spec = SubjectSpec {
        height: args.height,
        mass: args.mass,
        noise: args.noise,
        warp: Warp {
            stance_amplitude: args.stance_amplitude,
            swing_amplitude: args.swing_amplitude,
            ..Warp::IDENTITY
        },
        swing_torque_scale: args.swing_torque_scale,
        ..SubjectSpec::default()
    };
    let (subject, profile) = synth_subject(&args.id, &path, &spec, args.seed, cfg.estimator.dt)?;
    report_warnings(&profile);
    let recording = intended_motion(&path, &spec, args.seed)?;

    let dir = &args.out;
    write(&dir.join("model.toml"), ModelDocument::canonical(&subject.model).to_toml())?;
    let mut buf = Vec::new();
    recording.write_csv(&mut buf)?;
    write(&dir.join("kinematics.csv"), buf)?;
    let marks: String = recording.cycle_marks.iter().map(|m| format!("{m}\n")).collect();
    write(&dir.join("cycle_marks.txt"), marks)?;
    let mut buf = Vec::new();
    profile.write_csv(&mut buf)?;
    write(&dir.join("torques.csv"), buf)?;
    let meta = serde_json::json!({ "id": subject.id, "seed": subject.seed, "spec": subject.spec });
    write(&dir.join("subject.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    eprintln!("wrote subject {} to {}", subject.id, dir.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Model(cmd) => model_cmd(cmd),
        Command::Path(cmd) => path_cmd(cmd),
        Command::EstimateTorques(args) => estimate_cmd(args),
        Command::Personalize(args) => personalize_cmd(args),
        Command::Cohort(args) => cohort_cmd(args),
        Command::Stats(args) => stats_cmd(args),
        Command::SynthSubject(args) => synth_cmd(args),
    }
}
