//! Subject, exoskeleton and strap-coupling parameters.
//!
//! Both legs are planar two-link chains hanging from a grounded pelvis. The
//! hip joints of the two chains are coaxial. Angles are measured in the
//! sagittal plane: hip flexion is positive (thigh swings forward), knee
//! flexion is positive (shank folds backward), and the all-zero pose hangs
//! straight down. The foot is lumped into the shank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current version of the model document schema.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_GRAVITY: f64 = 9.81;
pub const DEFAULT_CONTROLLER_RATE: f64 = 100.0;
/// Passive joint damping, N·m·s/rad, in state order.
pub const DEFAULT_JOINT_DAMPING: [f64; 4] = [2.0, 1.0, 0.0, 0.0];

/// Segment fractions from Winter's anthropometric tables (Biomechanics and
/// Motor Control of Human Movement, 4th ed., table 4.1). Lengths are
/// fractions of body height, masses fractions of body mass, COM positions and
/// radii of gyration fractions of the segment length measured from the
/// proximal joint.
pub mod anthropometry {
    pub const THIGH_LENGTH: f64 = 0.245;
    pub const THIGH_MASS: f64 = 0.100;
    pub const THIGH_COM: f64 = 0.433;
    pub const THIGH_GYRATION: f64 = 0.323;

    pub const SHANK_LENGTH: f64 = 0.246;
    pub const SHANK_MASS: f64 = 0.0465;
    pub const SHANK_COM: f64 = 0.433;
    pub const SHANK_GYRATION: f64 = 0.302;

    /// Ankle height, i.e. the foot's extent along the lumped shank axis.
    pub const FOOT_HEIGHT: f64 = 0.039;
    pub const FOOT_LENGTH: f64 = 0.152;
    pub const FOOT_MASS: f64 = 0.0145;
    pub const FOOT_GYRATION: f64 = 0.475;

    /// Peak isometric joint torque per kilogram of body mass.
    pub const HIP_TORQUE_PER_KG: f64 = 2.0;
    pub const KNEE_TORQUE_PER_KG: f64 = 1.6;
}

/// Inertial and geometric description of one rigid link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Joint-to-joint (or joint-to-tip) length, m.
    pub length: f64,
    /// kg
    pub mass: f64,
    /// Distance of the centre of mass from the proximal joint, m.
    pub com_offset: f64,
    /// Moment of inertia about the centre of mass, kg·m².
    pub inertia: f64,
}

impl Segment {
    /// Inertia about the proximal joint.
    pub fn inertia_about_joint(&self) -> f64 {
        self.inertia + self.mass * self.com_offset * self.com_offset
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        positive(&format!("{prefix}.length"), self.length)?;
        positive(&format!("{prefix}.mass"), self.mass)?;
        positive(&format!("{prefix}.inertia"), self.inertia)?;
        let field = format!("{prefix}.com_offset");
        if !(self.com_offset.is_finite() && self.com_offset > 0.0 && self.com_offset < self.length) {
            return Err(Error::invalid(
                field,
                format!("{} must lie in (0, {})", self.com_offset, self.length),
            ));
        }
        Ok(())
    }
}

/// Closed joint-angle interval, rad.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub min: f64,
    pub max: f64,
}

impl AngleRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, q: f64) -> bool {
        q >= self.min && q <= self.max
    }

    fn validate(&self, field: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(Error::invalid(
                field,
                format!("range [{}, {}] is degenerate", self.min, self.max),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectModel {
    pub thigh: Segment,
    /// Shank with the foot lumped in; length runs from knee to sole.
    pub shank_foot: Segment,
    pub hip_angle_range: AngleRange,
    pub knee_angle_range: AngleRange,
    /// N·m
    pub hip_torque_limit: f64,
    /// N·m
    pub knee_torque_limit: f64,
}

impl SubjectModel {
    pub fn validate(&self) -> Result<()> {
        self.thigh.validate("subject.thigh")?;
        self.shank_foot.validate("subject.shank_foot")?;
        self.hip_angle_range.validate("subject.hip_angle_range")?;
        self.knee_angle_range.validate("subject.knee_angle_range")?;
        positive("subject.hip_torque_limit", self.hip_torque_limit)?;
        positive("subject.knee_torque_limit", self.knee_torque_limit)?;
        Ok(())
    }

    pub fn torque_limits(&self) -> [f64; 2] {
        [self.hip_torque_limit, self.knee_torque_limit]
    }
}

/// Builds a subject from height (m) and body mass (kg) using the
/// [`anthropometry`] fractions.
///
/// Lengths scale linearly with height, masses and torque limits linearly with
/// body mass, inertias with mass·height².
pub fn anthropometric_subject(height: f64, mass: f64) -> Result<SubjectModel> {
    use anthropometry::*;

    if !(1.0..=2.3).contains(&height) {
        return Err(Error::invalid("height", format!("{height} m outside [1.0, 2.3]")));
    }
    if !(30.0..=200.0).contains(&mass) {
        return Err(Error::invalid("mass", format!("{mass} kg outside [30, 200]")));
    }

    let thigh_len = THIGH_LENGTH * height;
    let thigh = Segment {
        length: thigh_len,
        mass: THIGH_MASS * mass,
        com_offset: THIGH_COM * thigh_len,
        inertia: THIGH_MASS * mass * (THIGH_GYRATION * thigh_len).powi(2),
    };

    // Shank and foot combined about their common centre of mass. The foot's
    // centre sits halfway down the ankle height below the shank.
    let shank_len = SHANK_LENGTH * height;
    let m_shank = SHANK_MASS * mass;
    let c_shank = SHANK_COM * shank_len;
    let i_shank = m_shank * (SHANK_GYRATION * shank_len).powi(2);
    let m_foot = FOOT_MASS * mass;
    let c_foot = shank_len + 0.5 * FOOT_HEIGHT * height;
    let i_foot = m_foot * (FOOT_GYRATION * FOOT_LENGTH * height).powi(2);
    let m_sf = m_shank + m_foot;
    let c_sf = (m_shank * c_shank + m_foot * c_foot) / m_sf;
    let i_sf = i_shank
        + m_shank * (c_shank - c_sf).powi(2)
        + i_foot
        + m_foot * (c_foot - c_sf).powi(2);
    let shank_foot = Segment {
        length: shank_len + FOOT_HEIGHT * height,
        mass: m_sf,
        com_offset: c_sf,
        inertia: i_sf,
    };

    Ok(SubjectModel {
        thigh,
        shank_foot,
        hip_angle_range: AngleRange::new(-0.52, 2.09),
        knee_angle_range: AngleRange::new(-0.1, 2.27),
        hip_torque_limit: HIP_TORQUE_PER_KG * mass,
        knee_torque_limit: KNEE_TORQUE_PER_KG * mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExoModel {
    pub thigh: Segment,
    /// Exo shank link, knee to ankle joint.
    pub shank: Segment,
    pub hip_angle_range: AngleRange,
    pub knee_angle_range: AngleRange,
    /// Per-joint actuator bound, N·m.
    pub actuator_torque_limit: f64,
    /// Hz
    pub controller_rate: f64,
}

impl ExoModel {
    pub const DEFAULT_THIGH_MASS: f64 = 2.5;
    pub const DEFAULT_SHANK_MASS: f64 = 1.8;
    pub const DEFAULT_ACTUATOR_LIMIT: f64 = 40.0;

    /// Exo leg adjusted to the subject: thigh length matches the subject's so
    /// the knee axes coincide, and the shank link ends at the ankle. Links are
    /// treated as uniform rods with the default masses.
    pub fn fitted_to(subject: &SubjectModel) -> Self {
        let thigh_len = subject.thigh.length;
        let shank_len = subject.shank_foot.length
            * (anthropometry::SHANK_LENGTH
                / (anthropometry::SHANK_LENGTH + anthropometry::FOOT_HEIGHT));
        let rod = |length: f64, mass: f64| Segment {
            length,
            mass,
            com_offset: 0.5 * length,
            inertia: mass * length * length / 12.0,
        };
        Self {
            thigh: rod(thigh_len, Self::DEFAULT_THIGH_MASS),
            shank: rod(shank_len, Self::DEFAULT_SHANK_MASS),
            hip_angle_range: AngleRange::new(-0.6, 2.1),
            knee_angle_range: AngleRange::new(-0.1, 2.2),
            actuator_torque_limit: Self::DEFAULT_ACTUATOR_LIMIT,
            controller_rate: DEFAULT_CONTROLLER_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.thigh.validate("exo.thigh")?;
        self.shank.validate("exo.shank")?;
        self.hip_angle_range.validate("exo.hip_angle_range")?;
        self.knee_angle_range.validate("exo.knee_angle_range")?;
        positive("exo.actuator_torque_limit", self.actuator_torque_limit)?;
        positive("exo.controller_rate", self.controller_rate)?;
        Ok(())
    }

    pub fn control_period(&self) -> f64 {
        1.0 / self.controller_rate
    }
}

/// Linear spring-damper between matched strap points on the two chains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bushing {
    /// N/m along world x and y.
    pub translational_stiffness: [f64; 2],
    /// N·s/m along world x and y.
    pub translational_damping: [f64; 2],
    /// N·m/rad
    pub rotational_stiffness: f64,
    /// N·m·s/rad
    pub rotational_damping: f64,
}

impl Bushing {
    /// Limb strap values: 10 kN/m, 0.1 kN·s/m, 0.1 kN·m/rad, 0.01 kN·m·s/rad.
    pub const LIMB_STRAP: Bushing = Bushing {
        translational_stiffness: [10_000.0, 10_000.0],
        translational_damping: [100.0, 100.0],
        rotational_stiffness: 100.0,
        rotational_damping: 10.0,
    };

    pub const NONE: Bushing = Bushing {
        translational_stiffness: [0.0, 0.0],
        translational_damping: [0.0, 0.0],
        rotational_stiffness: 0.0,
        rotational_damping: 0.0,
    };

    /// Same stiffness with every damping coefficient zeroed.
    pub fn undamped(self) -> Self {
        Self {
            translational_damping: [0.0, 0.0],
            rotational_damping: 0.0,
            ..self
        }
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        for (axis, k) in ["x", "y"].iter().zip(self.translational_stiffness) {
            non_negative(&format!("{prefix}.translational_stiffness.{axis}"), k)?;
        }
        for (axis, b) in ["x", "y"].iter().zip(self.translational_damping) {
            non_negative(&format!("{prefix}.translational_damping.{axis}"), b)?;
        }
        non_negative(&format!("{prefix}.rotational_stiffness"), self.rotational_stiffness)?;
        non_negative(&format!("{prefix}.rotational_damping"), self.rotational_damping)?;
        Ok(())
    }
}

/// The four strap sites, in proximal-to-distal order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrapSite {
    UpperThigh,
    LowerThigh,
    UpperShank,
    LowerShank,
}

impl StrapSite {
    pub const ALL: [StrapSite; 4] = [
        StrapSite::UpperThigh,
        StrapSite::LowerThigh,
        StrapSite::UpperShank,
        StrapSite::LowerShank,
    ];

    pub fn on_thigh(self) -> bool {
        matches!(self, StrapSite::UpperThigh | StrapSite::LowerThigh)
    }

    pub fn name(self) -> &'static str {
        match self {
            StrapSite::UpperThigh => "upper_thigh",
            StrapSite::LowerThigh => "lower_thigh",
            StrapSite::UpperShank => "upper_shank",
            StrapSite::LowerShank => "lower_shank",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BushingParams {
    pub upper_thigh: Bushing,
    pub lower_thigh: Bushing,
    pub upper_shank: Bushing,
    pub lower_shank: Bushing,
}

impl Default for BushingParams {
    fn default() -> Self {
        Self::uniform(Bushing::LIMB_STRAP)
    }
}

impl BushingParams {
    pub fn uniform(b: Bushing) -> Self {
        Self {
            upper_thigh: b,
            lower_thigh: b,
            upper_shank: b,
            lower_shank: b,
        }
    }

    pub fn site(&self, site: StrapSite) -> &Bushing {
        match site {
            StrapSite::UpperThigh => &self.upper_thigh,
            StrapSite::LowerThigh => &self.lower_thigh,
            StrapSite::UpperShank => &self.upper_shank,
            StrapSite::LowerShank => &self.lower_shank,
        }
    }

    pub fn undamped(self) -> Self {
        Self {
            upper_thigh: self.upper_thigh.undamped(),
            lower_thigh: self.lower_thigh.undamped(),
            upper_shank: self.upper_shank.undamped(),
            lower_shank: self.lower_shank.undamped(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for site in StrapSite::ALL {
            self.site(site).validate(&format!("bushings.{}", site.name()))?;
        }
        Ok(())
    }
}

/// Distance of each strap from the proximal joint of its segment, m. The same
/// distance is used on the human and the exo segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrapPositions {
    pub upper_thigh: f64,
    pub lower_thigh: f64,
    pub upper_shank: f64,
    pub lower_shank: f64,
}

impl StrapPositions {
    pub fn site(&self, site: StrapSite) -> f64 {
        match site {
            StrapSite::UpperThigh => self.upper_thigh,
            StrapSite::LowerThigh => self.lower_thigh,
            StrapSite::UpperShank => self.upper_shank,
            StrapSite::LowerShank => self.lower_shank,
        }
    }

    /// 25 % and 75 % along each segment (the shorter of the human and exo
    /// segment).
    pub fn default_for(subject: &SubjectModel, exo: &ExoModel) -> Self {
        let thigh = subject.thigh.length.min(exo.thigh.length);
        let shank = subject.shank_foot.length.min(exo.shank.length);
        Self {
            upper_thigh: 0.25 * thigh,
            lower_thigh: 0.75 * thigh,
            upper_shank: 0.25 * shank,
            lower_shank: 0.75 * shank,
        }
    }
}

/// One-sided spring-damper acting beyond the configured joint ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointStop {
    /// N·m/rad
    pub stiffness: f64,
    /// N·m·s/rad, only while penetrating.
    pub damping: f64,
}

impl Default for JointStop {
    fn default() -> Self {
        Self {
            stiffness: 500.0,
            damping: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledModel {
    pub subject: SubjectModel,
    pub exo: ExoModel,
    pub bushings: BushingParams,
    pub straps: StrapPositions,
    /// m/s²
    pub gravity: f64,
    pub joint_stop: JointStop,
    /// Passive viscous damping of each joint in state order (human hip, human
    /// knee, exo hip, exo knee), N·m·s/rad.
    #[serde(default)]
    pub joint_damping: [f64; 4],
}

impl CoupledModel {
    pub fn validate(&self) -> Result<()> {
        self.subject.validate()?;
        self.exo.validate()?;
        self.bushings.validate()?;
        positive("gravity", self.gravity)?;
        non_negative("joint_stop.stiffness", self.joint_stop.stiffness)?;
        non_negative("joint_stop.damping", self.joint_stop.damping)?;
        for (name, b) in ["human_hip", "human_knee", "exo_hip", "exo_knee"].iter().zip(self.joint_damping) {
            non_negative(&format!("joint_damping.{name}"), b)?;
        }
        for site in StrapSite::ALL {
            let s = self.straps.site(site);
            let (human, exo) = if site.on_thigh() {
                (self.subject.thigh.length, self.exo.thigh.length)
            } else {
                (self.subject.shank_foot.length, self.exo.shank.length)
            };
            if !(s.is_finite() && s >= 0.0 && s <= human && s <= exo) {
                return Err(Error::invalid(
                    format!("straps.{}", site.name()),
                    format!("{s} m is not within both segments ({human} m, {exo} m)"),
                ));
            }
        }
        Ok(())
    }

    /// Same model with every damping coefficient set to zero.
    pub fn undamped(&self) -> Self {
        Self {
            bushings: self.bushings.undamped(),
            joint_damping: [0.0; 4],
            joint_stop: JointStop {
                damping: 0.0,
                ..self.joint_stop
            },
            ..*self
        }
    }

    /// Joint ranges in state order: human hip, human knee, exo hip, exo knee.
    pub fn joint_ranges(&self) -> [AngleRange; 4] {
        [
            self.subject.hip_angle_range,
            self.subject.knee_angle_range,
            self.exo.hip_angle_range,
            self.exo.knee_angle_range,
        ]
    }
}

/// Validates the components and assembles the coupled model with default
/// strap positions, gravity and joint stops.
pub fn build_coupled_model(
    subject: SubjectModel,
    exo: ExoModel,
    bushings: BushingParams,
) -> Result<CoupledModel> {
    let model = CoupledModel {
        subject,
        exo,
        bushings,
        straps: StrapPositions::default_for(&subject, &exo),
        gravity: DEFAULT_GRAVITY,
        joint_stop: JointStop::default(),
        joint_damping: DEFAULT_JOINT_DAMPING,
    };
    model.validate()?;
    Ok(model)
}

/// Default coupled model for an anthropometric subject with a fitted exo and
/// limb-strap bushings.
pub fn default_model(height: f64, mass: f64) -> Result<CoupledModel> {
    let subject = anthropometric_subject(height, mass)?;
    build_coupled_model(subject, ExoModel::fitted_to(&subject), BushingParams::default())
}

/// On-disk model document. Optional sections fall back to the defaults used by
/// [`build_coupled_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub subject: SubjectSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exo: Option<ExoModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bushings: Option<BushingParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub straps: Option<StrapPositions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_stop: Option<JointStop>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_damping: Option<[f64; 4]>,
}

/// Either explicit segment parameters or height and mass to scale from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubjectSource {
    Anthropometric { height: f64, mass: f64 },
    Explicit(SubjectModel),
}

impl ModelDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let doc: ModelDocument = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!("unsupported version {}, expected {MODEL_SCHEMA_VERSION}", doc.schema_version),
            ));
        }
        Ok(doc)
    }

    pub fn resolve(&self) -> Result<CoupledModel> {
        let subject = match &self.subject {
            SubjectSource::Anthropometric { height, mass } => anthropometric_subject(*height, *mass)?,
            SubjectSource::Explicit(s) => *s,
        };
        subject.validate()?;
        let exo = self.exo.unwrap_or_else(|| ExoModel::fitted_to(&subject));
        let mut model = build_coupled_model(subject, exo, self.bushings.unwrap_or_default())?;
        if let Some(straps) = self.straps {
            model.straps = straps;
        }
        if let Some(g) = self.gravity {
            model.gravity = g;
        }
        if let Some(stop) = self.joint_stop {
            model.joint_stop = stop;
        }
        if let Some(b) = self.joint_damping {
            model.joint_damping = b;
        }
        model.validate()?;
        Ok(model)
    }

    /// Fully expanded document for a resolved model.
    pub fn canonical(model: &CoupledModel) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            subject: SubjectSource::Explicit(model.subject),
            exo: Some(model.exo),
            bushings: Some(model.bushings),
            straps: Some(model.straps),
            gravity: Some(model.gravity),
            joint_stop: Some(model.joint_stop),
            joint_damping: Some(model.joint_damping),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("model document is always representable")
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{v} must be > 0")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{v} must be >= 0")))
    }
}
