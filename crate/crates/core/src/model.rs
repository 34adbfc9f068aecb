//! Domain types shared by the whole pipeline.
//!
//! Weeks are 1-based panel indices `1..=T`; week 0 is the initial state of
//! the exposure recursion. Ages are fractional years computed from a
//! birth week, so a member can become active (age >= 1) part-way through
//! the panel year and the household size `n_{h,t}` changes with it.

use serde::{Deserialize, Serialize};

use crate::error::{KdemError, Result};
use crate::ingest::{BodyWeightTable, ContaminationTable};

pub const WEEKS_PER_YEAR: f64 = 52.18;

/// Hard cap on household size accepted at ingestion.
pub const MAX_HOUSEHOLD_SIZE: usize = 12;

/// Age from which a member consumes the food group and counts in `n_{h,t}`.
pub const ACTIVE_AGE_YEARS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contaminant {
    pub name: String,
    pub half_life_weeks: f64,
    /// Provisional tolerable weekly intake, ug per kg body weight per week.
    pub ptwi: f64,
}

impl Contaminant {
    pub fn new(name: impl Into<String>, half_life_weeks: f64, ptwi: f64) -> Result<Self> {
        if !(half_life_weeks.is_finite() && half_life_weeks > 0.0) {
            return Err(KdemError::invalid(format!(
                "half-life must be positive, got {half_life_weeks}"
            )));
        }
        if !(ptwi.is_finite() && ptwi >= 0.0) {
            return Err(KdemError::invalid(format!("PTWI must be >= 0, got {ptwi}")));
        }
        Ok(Self {
            name: name.into(),
            half_life_weeks,
            ptwi,
        })
    }

    /// Methylmercury: half-life 6 weeks, PTWI 1.6 ug/kg bw/week.
    pub fn methylmercury() -> Self {
        Self {
            name: "methylmercury".to_string(),
            half_life_weeks: 6.0,
            ptwi: 1.6,
        }
    }

    /// Dissipation rate `ln 2 / half_life`.
    pub fn dissipation(&self) -> f64 {
        std::f64::consts::LN_2 / self.half_life_weeks
    }

    /// Weekly retention factor `exp(-dissipation)`, always in (0, 1).
    pub fn retention(&self) -> f64 {
        (-self.dissipation()).exp()
    }

    /// Weeks after which exposure counts as long-term: `ceil(6 * half_life)`.
    pub fn default_burn_in(&self) -> usize {
        (6.0 * self.half_life_weeks).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
        }
    }
}

impl std::str::FromStr for Sex {
    type Err = KdemError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" | "m" => Ok(Sex::M),
            "F" | "f" => Ok(Sex::F),
            other => Err(KdemError::invalid(format!("sex must be M or F, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Sex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub member_id: String,
    pub household_id: String,
    pub sex: Sex,
    pub birth_week: i64,
}

impl Member {
    /// Age in fractional years at `week`, clamped at zero before birth.
    pub fn age_at(&self, week: i64) -> f64 {
        ((week - self.birth_week) as f64 / WEEKS_PER_YEAR).max(0.0)
    }

    pub fn is_active(&self, week: i64) -> bool {
        self.age_at(week) >= ACTIVE_AGE_YEARS
    }
}

/// A categorical socioeconomic variable. Codes are 1-based: code `c` has
/// label `labels[c - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocioVariable {
    pub name: String,
    pub labels: Vec<String>,
    pub reference: u32,
}

impl SocioVariable {
    pub fn new(name: &str, labels: &[&str], reference: u32) -> Self {
        Self {
            name: name.to_string(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            reference,
        }
    }

    pub fn modalities(&self) -> u32 {
        self.labels.len() as u32
    }

    pub fn label(&self, code: u32) -> &str {
        self.labels
            .get(code.saturating_sub(1) as usize)
            .map(String::as_str)
            .unwrap_or("?")
    }

    /// The four household descriptors used for the French purchase panel,
    /// with the last modality of each as reference.
    pub fn panel_defaults() -> Vec<SocioVariable> {
        vec![
            SocioVariable::new(
                "income",
                &["Well to do", "Mean inf", "Modest", "Mean sup"],
                4,
            ),
            SocioVariable::new(
                "region",
                &[
                    "North, Brittany, Vendee coast",
                    "South West coast",
                    "Mediterranean coast",
                    "Paris and its suburbs",
                    "Noncoastal regions",
                ],
                5,
            ),
            SocioVariable::new(
                "occupation",
                &[
                    "self-employed persons",
                    "white collar workers",
                    "retirees",
                    "no activity",
                    "Blue collar workers",
                ],
                5,
            ),
            SocioVariable::new(
                "education",
                &["student", "no or weak diploma", "BAC and higher degree"],
                3,
            ),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Household {
    pub household_id: String,
    pub members: Vec<Member>,
    /// `socio[t - 1][q]` is the modality code of variable `q` in week `t`.
    pub socio: Vec<Vec<u32>>,
}

impl Household {
    /// Number of members aged at least one year in `week`.
    pub fn active_size(&self, week: usize) -> usize {
        self.members
            .iter()
            .filter(|m| m.is_active(week as i64))
            .count()
    }

    pub fn active_members(&self, week: usize) -> impl Iterator<Item = &Member> {
        self.members.iter().filter(move |m| m.is_active(week as i64))
    }

    pub fn socio_at(&self, week: usize) -> &[u32] {
        &self.socio[week - 1]
    }
}

/// Weekly contaminant intake of a household in ug/week, weeks `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntakeSeriesHousehold {
    pub household_id: String,
    pub y: Vec<f64>,
}

impl IntakeSeriesHousehold {
    pub fn at(&self, week: usize) -> f64 {
        self.y[week - 1]
    }
}

/// Model structure choices that change the design or variance layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// Separate age curves for males and females.
    pub gender_split: bool,
    /// One spline variance for both sexes.
    pub shared_penalty: bool,
    /// Households of this size or larger share one residual variance.
    pub max_group_size: usize,
    pub reference_week: usize,
    /// Override of each socio variable's reference code.
    pub reference_modalities: Option<Vec<u32>>,
    pub max_knots: usize,
    /// Residual-variance groups with fewer rows are merged downward.
    pub min_group_rows: usize,
    /// Modality groupings, produced by the hierarchical test driver.
    pub socio_coding: Option<Vec<crate::design::SocioCoding>>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            gender_split: true,
            shared_penalty: true,
            max_group_size: 6,
            reference_week: 1,
            reference_modalities: None,
            max_knots: 35,
            min_group_rows: 10,
            socio_coding: None,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self, weeks: usize) -> Result<()> {
        if self.max_group_size == 0 {
            return Err(KdemError::invalid("max_group_size must be >= 1"));
        }
        if self.reference_week == 0 || self.reference_week > weeks {
            return Err(KdemError::invalid(format!(
                "reference week {} outside 1..={weeks}",
                self.reference_week
            )));
        }
        Ok(())
    }
}

/// A validated household panel for one year.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelData {
    pub weeks: usize,
    pub socio_vars: Vec<SocioVariable>,
    pub households: Vec<Household>,
    /// Aligned with `households`.
    pub intakes: Vec<IntakeSeriesHousehold>,
    pub body_weights: BodyWeightTable,
    pub contamination: Option<ContaminationTable>,
}

impl PanelData {
    pub fn age_at(&self, member: &Member, week: i64) -> Result<f64> {
        if week < 0 || week > self.weeks as i64 {
            return Err(KdemError::WeekOutOfRange {
                week,
                weeks: self.weeks,
            });
        }
        Ok(member.age_at(week))
    }

    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.households.iter().flat_map(|h| h.members.iter())
    }

    /// Members active in at least one panel week.
    pub fn active_individuals(&self) -> usize {
        self.members()
            .filter(|m| (1..=self.weeks).any(|t| m.is_active(t as i64)))
            .count()
    }

    /// Structural checks shared by ingestion and synthetic generation.
    pub fn validate(&self) -> Result<()> {
        if self.weeks == 0 {
            return Err(KdemError::invalid("panel has no weeks"));
        }
        if self.intakes.len() != self.households.len() {
            return Err(KdemError::invalid("intake series not aligned with households"));
        }
        for (h, s) in self.households.iter().zip(&self.intakes) {
            if h.household_id != s.household_id || s.y.len() != self.weeks {
                return Err(KdemError::invalid(format!(
                    "intake series of household {} is misaligned",
                    h.household_id
                )));
            }
            if let Some(v) = s.y.iter().find(|v| !v.is_finite()) {
                return Err(KdemError::invalid(format!(
                    "household {} has non-finite intake {v}",
                    h.household_id
                )));
            }
            if h.socio.len() != self.weeks {
                return Err(KdemError::invalid(format!(
                    "household {} lacks socio values for some weeks",
                    h.household_id
                )));
            }
            for (t, codes) in h.socio.iter().enumerate() {
                if codes.len() != self.socio_vars.len() {
                    return Err(KdemError::invalid(format!(
                        "household {} week {} has {} socio values, expected {}",
                        h.household_id,
                        t + 1,
                        codes.len(),
                        self.socio_vars.len()
                    )));
                }
                for (var, &c) in self.socio_vars.iter().zip(codes) {
                    if c == 0 || c > var.modalities() {
                        return Err(KdemError::invalid(format!(
                            "household {} week {}: {} code {c} outside 1..={}",
                            h.household_id,
                            t + 1,
                            var.name,
                            var.modalities()
                        )));
                    }
                }
            }
            let mut any_active = false;
            for t in 1..=self.weeks {
                let n = h.active_size(t);
                if n > MAX_HOUSEHOLD_SIZE {
                    return Err(KdemError::invalid(format!(
                        "household {} has {n} active members in week {t}, above the cap of {MAX_HOUSEHOLD_SIZE}",
                        h.household_id
                    )));
                }
                any_active |= n > 0;
            }
            if !any_active {
                return Err(KdemError::invalid(format!(
                    "household {} has no member aged one year or more in any week",
                    h.household_id
                )));
            }
        }
        Ok(())
    }
}
