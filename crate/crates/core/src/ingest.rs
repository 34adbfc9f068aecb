//! Reading and validating the panel input files.
//!
//! A panel directory holds five CSV files (UTF-8, comma separated, header
//! row) and an optional `modalities.json` sidecar with socio variable labels:
//!
//! ```text
//! households.csv     household_id,week,income,region,occupation,education
//! members.csv        household_id,member_id,sex,birth_week
//! purchases.csv      household_id,week,food_group,quantity_kg
//! contamination.csv  food_group,mean,min,max,sd,n_analyses
//! bodyweight.csv     sex,age_min_years,age_max_years,median_kg
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KdemError, Result};
use crate::model::{
    Household, IntakeSeriesHousehold, Member, PanelData, Sex, SocioVariable,
};

pub const HOUSEHOLDS_FILE: &str = "households.csv";
pub const MEMBERS_FILE: &str = "members.csv";
pub const PURCHASES_FILE: &str = "purchases.csv";
pub const CONTAMINATION_FILE: &str = "contamination.csv";
pub const BODYWEIGHT_FILE: &str = "bodyweight.csv";
pub const MODALITIES_FILE: &str = "modalities.json";

pub const INPUT_FILES: [&str; 5] = [
    HOUSEHOLDS_FILE,
    MEMBERS_FILE,
    PURCHASES_FILE,
    CONTAMINATION_FILE,
    BODYWEIGHT_FILE,
];

/// Unit of the `mean`/`min`/`max` columns of the contamination table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminationUnit {
    /// mg/kg, numerically equal to ug/g.
    #[default]
    MgPerKg,
    UgPerKg,
}

impl ContaminationUnit {
    /// Micrograms of contaminant per kilogram of food per table unit.
    pub fn ug_per_kg_factor(self) -> f64 {
        match self {
            ContaminationUnit::MgPerKg => 1000.0,
            ContaminationUnit::UgPerKg => 1.0,
        }
    }
}

impl std::str::FromStr for ContaminationUnit {
    type Err = KdemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mg_per_kg" => Ok(ContaminationUnit::MgPerKg),
            "ug_per_kg" => Ok(ContaminationUnit::UgPerKg),
            other => Err(KdemError::invalid(format!(
                "contamination unit must be mg_per_kg or ug_per_kg, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationEntry {
    pub food_group: String,
    pub mean: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub sd: Option<f64>,
    pub n_analyses: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationTable {
    pub unit: ContaminationUnit,
    pub entries: BTreeMap<String, ContaminationEntry>,
}

impl ContaminationTable {
    pub fn new(unit: ContaminationUnit, entries: Vec<ContaminationEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if !(e.mean.is_finite() && e.mean >= 0.0) {
                return Err(KdemError::invalid(format!(
                    "contamination mean of {} must be >= 0, got {}",
                    e.food_group, e.mean
                )));
            }
            if let (Some(lo), Some(hi)) = (e.min, e.max) {
                if !(lo <= e.mean && e.mean <= hi) {
                    return Err(KdemError::invalid(format!(
                        "contamination of {}: mean {} outside [min {lo}, max {hi}]",
                        e.food_group, e.mean
                    )));
                }
            }
            if map.insert(e.food_group.clone(), e.clone()).is_some() {
                return Err(KdemError::invalid(format!(
                    "duplicate food group {} in contamination table",
                    e.food_group
                )));
            }
        }
        Ok(Self { unit, entries: map })
    }

    /// Mean levels of the seafood survey: fish and mollusks/shellfish.
    pub fn seafood() -> Self {
        let entry = |g: &str, mean, min, max, sd, n| ContaminationEntry {
            food_group: g.to_string(),
            mean,
            min: Some(min),
            max: Some(max),
            sd: Some(sd),
            n_analyses: Some(n),
        };
        Self::new(
            ContaminationUnit::MgPerKg,
            vec![
                entry("Fish", 0.147, 0.003, 3.520, 0.235, 1350),
                entry("Mollusks and Shellfish", 0.014, 0.001, 0.172, 0.011, 1293),
            ],
        )
        .expect("static table is valid")
    }

    /// Contaminant content of one kilogram of `food_group`, in ug.
    pub fn ug_per_kg(&self, food_group: &str) -> Option<f64> {
        self.entries
            .get(food_group)
            .map(|e| e.mean * self.unit.ug_per_kg_factor())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyWeightBracket {
    pub sex: Sex,
    pub age_min_years: f64,
    pub age_max_years: f64,
    pub median_kg: f64,
}

/// Median body weight by sex and age bracket `[age_min, age_max)`; the
/// oldest bracket of each sex also includes its upper bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyWeightTable {
    pub brackets: Vec<BodyWeightBracket>,
}

impl BodyWeightTable {
    pub fn new(mut brackets: Vec<BodyWeightBracket>) -> Result<Self> {
        brackets.sort_by(|a, b| {
            a.sex
                .cmp(&b.sex)
                .then(a.age_min_years.total_cmp(&b.age_min_years))
        });
        for b in &brackets {
            if !(b.median_kg.is_finite() && b.median_kg > 0.0) {
                return Err(KdemError::invalid(format!(
                    "body weight for {} aged {}..{} must be positive",
                    b.sex, b.age_min_years, b.age_max_years
                )));
            }
            if !(b.age_max_years > b.age_min_years) {
                return Err(KdemError::invalid(format!(
                    "empty body weight bracket {}..{}",
                    b.age_min_years, b.age_max_years
                )));
            }
        }
        for sex in [Sex::M, Sex::F] {
            let own: Vec<_> = brackets.iter().filter(|b| b.sex == sex).collect();
            let covered = !own.is_empty()
                && own[0].age_min_years <= 1.0
                && own.last().unwrap().age_max_years >= 110.0
                && own
                    .windows(2)
                    .all(|w| (w[0].age_max_years - w[1].age_min_years).abs() < 1e-9);
            if !covered {
                return Err(KdemError::invalid(format!(
                    "body weight brackets for sex {sex} must cover ages 1..110 without gaps"
                )));
            }
        }
        Ok(Self { brackets })
    }

    pub fn lookup(&self, sex: Sex, age: f64) -> Result<f64> {
        let own: Vec<_> = self.brackets.iter().filter(|b| b.sex == sex).collect();
        let last = own.len().saturating_sub(1);
        own.iter()
            .enumerate()
            .find(|(i, b)| {
                age >= b.age_min_years
                    && (age < b.age_max_years || (*i == last && age <= b.age_max_years))
            })
            .map(|(_, b)| b.median_kg)
            .ok_or(KdemError::MissingBodyWeight {
                sex: sex.to_string(),
                age,
            })
    }

    /// Yearly medians for children, flat adult weights from 18 years.
    pub fn synthetic_default() -> Self {
        const BOYS: [f64; 17] = [
            10.5, 12.6, 14.6, 16.6, 18.7, 20.9, 23.3, 26.0, 28.9, 32.0, 35.6, 40.0, 45.5,
            51.0, 56.3, 60.5, 63.8,
        ];
        const GIRLS: [f64; 17] = [
            9.9, 12.0, 14.1, 16.1, 18.2, 20.5, 23.0, 25.8, 29.0, 32.6, 36.9, 41.5, 46.0,
            49.5, 52.0, 53.6, 54.6,
        ];
        let mut brackets = Vec::new();
        for (sex, kids, adult) in [(Sex::M, BOYS, 75.0), (Sex::F, GIRLS, 62.0)] {
            for (i, kg) in kids.iter().enumerate() {
                brackets.push(BodyWeightBracket {
                    sex,
                    age_min_years: (i + 1) as f64,
                    age_max_years: (i + 2) as f64,
                    median_kg: *kg,
                });
            }
            brackets.push(BodyWeightBracket {
                sex,
                age_min_years: 18.0,
                age_max_years: 110.0,
                median_kg: adult,
            });
        }
        Self::new(brackets).expect("static table is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurchaseRecord {
    pub household_id: String,
    pub week: usize,
    pub food_group: String,
    pub quantity_kg: f64,
}

/// Weekly household intake (ug/week) from purchases and mean levels.
///
/// Weeks without purchases are zero. Records must belong to one household
/// and reference food groups present in `table` (checked at load time).
pub fn household_intake(
    household_id: &str,
    purchases: &[PurchaseRecord],
    table: &ContaminationTable,
    weeks: usize,
) -> IntakeSeriesHousehold {
    let mut y = vec![0.0; weeks];
    for p in purchases {
        debug_assert_eq!(p.household_id, household_id);
        let level = table.ug_per_kg(&p.food_group).unwrap_or(0.0);
        y[p.week - 1] += p.quantity_kg * level;
    }
    IntakeSeriesHousehold {
        household_id: household_id.to_string(),
        y,
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestConfig {
    pub unit: ContaminationUnit,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModalitiesFile {
    variables: Vec<SocioVariable>,
}

#[derive(Debug, Deserialize)]
struct MemberRow {
    household_id: String,
    member_id: String,
    sex: String,
    birth_week: i64,
}

#[derive(Debug, Deserialize)]
struct ContaminationRow {
    food_group: String,
    mean: f64,
    min: Option<f64>,
    max: Option<f64>,
    sd: Option<f64>,
    n_analyses: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct BodyWeightRow {
    sex: String,
    age_min_years: f64,
    age_max_years: f64,
    median_kg: f64,
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| KdemError::Csv {
            path: path.to_path_buf(),
            source,
        })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> KdemError + '_ {
    move |source| KdemError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = open_csv(path)?;
    rdr.deserialize()
        .map(|rec| rec.map_err(csv_err(path)))
        .collect()
}

pub fn missing_inputs(dir: &Path) -> Vec<PathBuf> {
    INPUT_FILES
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| !p.is_file())
        .collect()
}

pub fn read_contamination(path: &Path, unit: ContaminationUnit) -> Result<ContaminationTable> {
    let rows: Vec<ContaminationRow> = read_rows(path)?;
    ContaminationTable::new(
        unit,
        rows.into_iter()
            .map(|r| ContaminationEntry {
                food_group: r.food_group,
                mean: r.mean,
                min: r.min,
                max: r.max,
                sd: r.sd,
                n_analyses: r.n_analyses,
            })
            .collect(),
    )
}

pub fn read_bodyweights(path: &Path) -> Result<BodyWeightTable> {
    let rows: Vec<BodyWeightRow> = read_rows(path)?;
    let brackets = rows
        .into_iter()
        .map(|r| {
            Ok(BodyWeightBracket {
                sex: r.sex.parse()?,
                age_min_years: r.age_min_years,
                age_max_years: r.age_max_years,
                median_kg: r.median_kg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    BodyWeightTable::new(brackets)
}

fn read_purchases(path: &Path) -> Result<Vec<(u64, PurchaseRecord)>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row: PurchaseRecord = rec.deserialize(Some(&headers)).map_err(csv_err(path))?;
        if !row.quantity_kg.is_finite() || row.quantity_kg < 0.0 {
            return Err(KdemError::NegativeQuantity {
                path: path.to_path_buf(),
                line,
                value: row.quantity_kg,
            });
        }
        if row.week == 0 {
            return Err(KdemError::invalid(format!(
                "{}:{line}: weeks are numbered from 1",
                path.display()
            )));
        }
        out.push((line, row));
    }
    Ok(out)
}

struct HouseholdWeekRow {
    household_id: String,
    week: usize,
    codes: Vec<u32>,
}

fn read_households(path: &Path) -> Result<(Vec<String>, Vec<HouseholdWeekRow>)> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    if headers.len() < 2 || &headers[0] != "household_id" || &headers[1] != "week" {
        return Err(KdemError::invalid(format!(
            "{}: header must start with household_id,week",
            path.display()
        )));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str| {
            KdemError::invalid(format!("{}:{line}: invalid {what}", path.display()))
        };
        let week: usize = rec[1].parse().map_err(|_| bad("week"))?;
        if week == 0 {
            return Err(bad("week (weeks are numbered from 1)"));
        }
        let codes = (2..rec.len())
            .map(|i| rec[i].parse::<u32>().map_err(|_| bad(&headers[i])))
            .collect::<Result<Vec<_>>>()?;
        rows.push(HouseholdWeekRow {
            household_id: rec[0].to_string(),
            week,
            codes,
        });
    }
    Ok((names, rows))
}

fn socio_variables(dir: &Path, names: &[String], rows: &[HouseholdWeekRow]) -> Result<Vec<SocioVariable>> {
    let sidecar = dir.join(MODALITIES_FILE);
    let known: Vec<SocioVariable> = if sidecar.is_file() {
        let f = File::open(&sidecar).map_err(|source| KdemError::Io {
            path: sidecar.clone(),
            source,
        })?;
        let parsed: ModalitiesFile = serde_json::from_reader(f)?;
        parsed.variables
    } else {
        SocioVariable::panel_defaults()
    };
    names
        .iter()
        .enumerate()
        .map(|(q, name)| {
            if let Some(v) = known.iter().find(|v| &v.name == name) {
                return Ok(v.clone());
            }
            // Unlabelled variable: modalities are the observed codes, the
            // highest one being the reference.
            let m = rows.iter().map(|r| r.codes[q]).max().unwrap_or(1).max(1);
            let labels: Vec<String> = (1..=m).map(|c| c.to_string()).collect();
            Ok(SocioVariable {
                name: name.clone(),
                labels,
                reference: m,
            })
        })
        .collect()
}

/// Load and validate a panel directory.
pub fn load_panel(dir: &Path, config: &IngestConfig) -> Result<PanelData> {
    let missing = missing_inputs(dir);
    if !missing.is_empty() {
        return Err(KdemError::MissingFiles(missing));
    }
    let contamination = read_contamination(&dir.join(CONTAMINATION_FILE), config.unit)?;
    let body_weights = read_bodyweights(&dir.join(BODYWEIGHT_FILE))?;
    let (names, hh_rows) = read_households(&dir.join(HOUSEHOLDS_FILE))?;
    let socio_vars = socio_variables(dir, &names, &hh_rows)?;
    let members: Vec<MemberRow> = read_rows(&dir.join(MEMBERS_FILE))?;
    let purchases_path = dir.join(PURCHASES_FILE);
    let purchases = read_purchases(&purchases_path)?;

    let unknown: BTreeSet<String> = purchases
        .iter()
        .filter(|(_, p)| !contamination.entries.contains_key(&p.food_group))
        .map(|(_, p)| p.food_group.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(KdemError::UnknownFoodGroups(unknown.into_iter().collect()));
    }

    let weeks = hh_rows
        .iter()
        .map(|r| r.week)
        .chain(purchases.iter().map(|(_, p)| p.week))
        .max()
        .unwrap_or(0);
    if weeks == 0 {
        return Err(KdemError::invalid("households.csv has no rows"));
    }

    // household id -> (week -> codes), in first-seen order
    let mut order: Vec<String> = Vec::new();
    let mut socio_by_hh: HashMap<String, BTreeMap<usize, Vec<u32>>> = HashMap::new();
    for r in hh_rows {
        if !socio_by_hh.contains_key(&r.household_id) {
            order.push(r.household_id.clone());
        }
        socio_by_hh
            .entry(r.household_id)
            .or_default()
            .insert(r.week, r.codes);
    }
    order.sort();

    let mut members_by_hh: HashMap<String, Vec<Member>> = HashMap::new();
    let mut orphans = Vec::new();
    let mut seen_members = BTreeSet::new();
    for m in members {
        if !socio_by_hh.contains_key(&m.household_id) {
            orphans.push(format!("{}/{}", m.household_id, m.member_id));
            continue;
        }
        if !seen_members.insert((m.household_id.clone(), m.member_id.clone())) {
            return Err(KdemError::invalid(format!(
                "duplicate member {} in household {}",
                m.member_id, m.household_id
            )));
        }
        members_by_hh
            .entry(m.household_id.clone())
            .or_default()
            .push(Member {
                member_id: m.member_id,
                household_id: m.household_id,
                sex: m.sex.parse()?,
                birth_week: m.birth_week,
            });
    }
    if !orphans.is_empty() {
        return Err(KdemError::OrphanMembers(orphans));
    }

    let mut purchases_by_hh: HashMap<String, Vec<PurchaseRecord>> = HashMap::new();
    for (line, p) in purchases {
        if !socio_by_hh.contains_key(&p.household_id) {
            return Err(KdemError::invalid(format!(
                "{}:{line}: purchase for unknown household {}",
                purchases_path.display(),
                p.household_id
            )));
        }
        purchases_by_hh
            .entry(p.household_id.clone())
            .or_default()
            .push(p);
    }

    let mut households = Vec::with_capacity(order.len());
    let mut intakes = Vec::with_capacity(order.len());
    for id in order {
        let by_week = &socio_by_hh[&id];
        let socio = (1..=weeks).map(|t| fill_socio(by_week, t)).collect();
        let mut members = members_by_hh.remove(&id).unwrap_or_default();
        if members.is_empty() {
            return Err(KdemError::invalid(format!("household {id} has no members")));
        }
        members.sort_by(|a, b| a.member_id.cmp(&b.member_id));
        let bought = purchases_by_hh.remove(&id).unwrap_or_default();
        intakes.push(household_intake(&id, &bought, &contamination, weeks));
        households.push(Household {
            household_id: id,
            members,
            socio,
        });
    }

    let panel = PanelData {
        weeks,
        socio_vars,
        households,
        intakes,
        body_weights,
        contamination: Some(contamination),
    };
    panel.validate()?;
    Ok(panel)
}

/// Socio codes for week `t`: the row for that week, else the closest
/// earlier week, else the closest later one.
fn fill_socio(by_week: &BTreeMap<usize, Vec<u32>>, t: usize) -> Vec<u32> {
    by_week
        .range(..=t)
        .next_back()
        .or_else(|| by_week.range(t..).next())
        .map(|(_, v)| v.clone())
        .unwrap_or_default()
}

/// Summary printed by `kdem validate`.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub households: usize,
    pub weeks: usize,
    pub members: usize,
    pub active_individuals: usize,
    pub food_groups: Vec<String>,
    pub total_intake_ug: f64,
    pub household_weeks_with_intake: usize,
}

impl ValidationReport {
    pub fn of(panel: &PanelData) -> Self {
        Self {
            households: panel.households.len(),
            weeks: panel.weeks,
            members: panel.members().count(),
            active_individuals: panel.active_individuals(),
            food_groups: panel
                .contamination
                .as_ref()
                .map(|c| c.entries.keys().cloned().collect())
                .unwrap_or_default(),
            total_intake_ug: panel.intakes.iter().flat_map(|s| &s.y).sum(),
            household_weeks_with_intake: panel
                .intakes
                .iter()
                .flat_map(|s| &s.y)
                .filter(|&&y| y > 0.0)
                .count(),
        }
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "households:            {}", self.households)?;
        writeln!(f, "weeks:                 {}", self.weeks)?;
        writeln!(f, "members:               {}", self.members)?;
        writeln!(f, "active individuals:    {}", self.active_individuals)?;
        writeln!(f, "food groups:           {}", self.food_groups.join(", "))?;
        writeln!(f, "household-weeks > 0:   {}", self.household_weeks_with_intake)?;
        write!(f, "total intake (ug):     {}", self.total_intake_ug)
    }
}

/// Write a panel back to the five CSV inputs plus the modalities sidecar.
pub fn write_panel_dir(
    dir: &Path,
    panel: &PanelData,
    purchases: &[PurchaseRecord],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| KdemError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let writer = |name: &str| {
        let path = dir.join(name);
        csv::Writer::from_path(&path)
            .map(|w| (w, path.clone()))
            .map_err(|source| KdemError::Csv { path, source })
    };

    let (mut w, path) = writer(HOUSEHOLDS_FILE)?;
    let mut header = vec!["household_id".to_string(), "week".to_string()];
    header.extend(panel.socio_vars.iter().map(|v| v.name.clone()));
    w.write_record(&header).map_err(csv_err(&path))?;
    for h in &panel.households {
        for t in 1..=panel.weeks {
            let mut rec = vec![h.household_id.clone(), t.to_string()];
            rec.extend(h.socio_at(t).iter().map(u32::to_string));
            w.write_record(&rec).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|source| KdemError::Io { path: path.clone(), source })?;

    let (mut w, path) = writer(MEMBERS_FILE)?;
    w.write_record(["household_id", "member_id", "sex", "birth_week"])
        .map_err(csv_err(&path))?;
    for m in panel.members() {
        w.write_record([
            m.household_id.as_str(),
            m.member_id.as_str(),
            m.sex.as_str(),
            &m.birth_week.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|source| KdemError::Io { path: path.clone(), source })?;

    let (mut w, path) = writer(PURCHASES_FILE)?;
    w.write_record(["household_id", "week", "food_group", "quantity_kg"])
        .map_err(csv_err(&path))?;
    for p in purchases {
        w.write_record([
            p.household_id.as_str(),
            &p.week.to_string(),
            p.food_group.as_str(),
            &p.quantity_kg.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|source| KdemError::Io { path: path.clone(), source })?;

    let table = panel
        .contamination
        .clone()
        .unwrap_or_else(ContaminationTable::seafood);
    let (mut w, path) = writer(CONTAMINATION_FILE)?;
    w.write_record(["food_group", "mean", "min", "max", "sd", "n_analyses"])
        .map_err(csv_err(&path))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in table.entries.values() {
        w.write_record([
            e.food_group.clone(),
            e.mean.to_string(),
            opt(e.min),
            opt(e.max),
            opt(e.sd),
            e.n_analyses.map(|n| n.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|source| KdemError::Io { path: path.clone(), source })?;

    let (mut w, path) = writer(BODYWEIGHT_FILE)?;
    w.write_record(["sex", "age_min_years", "age_max_years", "median_kg"])
        .map_err(csv_err(&path))?;
    for b in &panel.body_weights.brackets {
        w.write_record([
            b.sex.as_str(),
            &b.age_min_years.to_string(),
            &b.age_max_years.to_string(),
            &b.median_kg.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|source| KdemError::Io { path: path.clone(), source })?;

    let sidecar = dir.join(MODALITIES_FILE);
    let f = File::create(&sidecar).map_err(|source| KdemError::Io {
        path: sidecar.clone(),
        source,
    })?;
    serde_json::to_writer_pretty(
        f,
        &ModalitiesFile {
            variables: panel.socio_vars.clone(),
        },
    )?;
    Ok(())
}
