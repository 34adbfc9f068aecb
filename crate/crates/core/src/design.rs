//! Individual and household design rows.
//!
//! An individual row holds the age-curve fixed part `x`, the truncated
//! basis `z`, the socio dummies `w` and the week dummy `delta`. A household
//! row for week `t` is the member sum of individual rows divided by
//! `sqrt(n)`: the member-invariant `w` and `delta` therefore end up scaled
//! by `sqrt(n)`, and the household response is `y_{h,t} / sqrt(n)`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KdemError, Result};
use crate::model::{Member, ModelSpec, PanelData, Sex, SocioVariable};
use crate::spline::{select_knots, SplineBasis};

/// One non-reference column of a socio variable: a set of modality codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodedLevel {
    pub codes: Vec<u32>,
    /// Parameter name, `g<k>` with `k` the default global modality index;
    /// merged levels join their names with `_` (`g4_g7`).
    pub name: String,
    pub label: String,
}

/// How the modalities of one socio variable map onto design columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocioCoding {
    pub variable: String,
    pub reference: Vec<u32>,
    pub reference_label: String,
    pub levels: Vec<CodedLevel>,
}

impl SocioCoding {
    pub fn level_of(&self, code: u32) -> Option<usize> {
        self.levels.iter().position(|l| l.codes.contains(&code))
    }

    pub fn merge_into_reference(&mut self, level: usize) {
        let l = self.levels.remove(level);
        self.reference.extend(l.codes);
        self.reference.sort_unstable();
        self.reference_label = format!("{} and {}", self.reference_label, l.label);
    }

    pub fn merge_levels(&mut self, a: usize, b: usize) {
        let (keep, gone) = (a.min(b), a.max(b));
        let l = self.levels.remove(gone);
        let k = &mut self.levels[keep];
        k.codes.extend(l.codes);
        k.codes.sort_unstable();
        k.name = format!("{}_{}", k.name, l.name);
        k.label = format!("{} and {}", k.label, l.label);
    }
}

/// One column per non-reference modality, numbered across variables in
/// declaration order: the `g1..g13` layout of the four default variables.
pub fn default_coding(vars: &[SocioVariable], references: Option<&[u32]>) -> Result<Vec<SocioCoding>> {
    if let Some(r) = references {
        if r.len() != vars.len() {
            return Err(KdemError::invalid(format!(
                "{} reference modalities given for {} socio variables",
                r.len(),
                vars.len()
            )));
        }
    }
    let mut next = 1;
    vars.iter()
        .enumerate()
        .map(|(q, v)| {
            let reference = references.map(|r| r[q]).unwrap_or(v.reference);
            if reference == 0 || reference > v.modalities() {
                return Err(KdemError::invalid(format!(
                    "reference code {reference} of {} outside 1..={}",
                    v.name,
                    v.modalities()
                )));
            }
            let levels = (1..=v.modalities())
                .filter(|&c| c != reference)
                .map(|c| {
                    let l = CodedLevel {
                        codes: vec![c],
                        name: format!("g{next}"),
                        label: v.label(c).to_string(),
                    };
                    next += 1;
                    l
                })
                .collect();
            Ok(SocioCoding {
                variable: v.name.clone(),
                reference: vec![reference],
                reference_label: v.label(reference).to_string(),
                levels,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FixedColumn {
    /// Age-curve intercept/slope, index into `x`.
    Beta(usize),
    Socio { variable: usize, level: usize },
    Week(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomColumn {
    pub basis: usize,
    pub knot: usize,
}

/// Spline coefficients sharing one variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBlock {
    pub label: String,
    pub start: usize,
    pub len: usize,
}

/// Household sizes sharing one residual variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeGroup {
    pub label: String,
    pub sizes: Vec<usize>,
    pub rows: usize,
    /// Row-weighted mean household size.
    pub mean_size: f64,
    pub max_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub gender_split: bool,
    pub shared_penalty: bool,
    pub weeks: usize,
    pub reference_week: usize,
    pub bases: Vec<SplineBasis>,
    pub socio_variables: Vec<String>,
    pub socio_coding: Vec<SocioCoding>,
    pub fixed_columns: Vec<FixedColumn>,
    pub fixed_names: Vec<String>,
    pub random_columns: Vec<RandomColumn>,
    pub random_names: Vec<String>,
    pub random_blocks: Vec<RandomBlock>,
    pub groups: Vec<SizeGroup>,
    /// Columns removed because no row carries them.
    pub dropped: Vec<String>,
}

impl DesignMeta {
    pub fn n_fixed(&self) -> usize {
        self.fixed_columns.len()
    }

    pub fn n_random(&self) -> usize {
        self.random_columns.len()
    }

    pub fn n_beta(&self) -> usize {
        if self.gender_split {
            4
        } else {
            2
        }
    }

    pub fn fixed_index(&self, name: &str) -> Option<usize> {
        self.fixed_names.iter().position(|n| n == name)
    }

    /// Fixed-effect values of an individual row (`x`, `w`, `delta`, unscaled).
    pub fn individual_fixed(&self, member: &Member, week: usize, socio: &[u32]) -> Vec<f64> {
        let age = member.age_at(week as i64);
        let x = beta_row(member.sex, age, self.gender_split);
        self.fixed_columns
            .iter()
            .map(|c| match *c {
                FixedColumn::Beta(j) => x[j],
                FixedColumn::Socio { variable, level } => {
                    let coding = &self.socio_coding[variable];
                    f64::from(coding.levels[level].codes.contains(&socio[variable]) as u8)
                }
                FixedColumn::Week(tau) => f64::from((tau == week) as u8),
            })
            .collect()
    }

    /// Truncated-basis values of an individual row, zero outside the
    /// member's own sex block.
    pub fn individual_random(&self, member: &Member, week: usize) -> Vec<f64> {
        let age = member.age_at(week as i64);
        self.random_columns
            .iter()
            .map(|c| {
                let basis = &self.bases[c.basis];
                match basis.sex {
                    Some(s) if s != member.sex => 0.0,
                    _ => {
                        let k = basis.knots[c.knot];
                        if age - k > 0.0 {
                            age - k
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect()
    }

    pub fn basis_for(&self, sex: Sex) -> Option<(usize, &SplineBasis)> {
        self.bases
            .iter()
            .enumerate()
            .find(|(_, b)| b.sex.is_none() || b.sex == Some(sex))
    }
}

fn beta_row(sex: Sex, age: f64, gender_split: bool) -> Vec<f64> {
    if !gender_split {
        return vec![1.0, age];
    }
    let m = f64::from((sex == Sex::M) as u8);
    let f = 1.0 - m;
    vec![m, age * m, f, age * f]
}

/// `x` and `z` of one member-week.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRow {
    pub member_id: String,
    pub week: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// `x = [1{M}, a 1{M}, 1{F}, a 1{F}]`; `z` places the member's own
/// truncated basis in its sex block, male block first.
pub fn individual_row(member: &Member, week: usize, bases: &[SplineBasis], gender_split: bool) -> Result<IndividualRow> {
    if !member.is_active(week as i64) {
        return Err(KdemError::invalid(format!(
            "member {} is not active in week {week}",
            member.member_id
        )));
    }
    let age = member.age_at(week as i64);
    let mut z = Vec::with_capacity(bases.iter().map(SplineBasis::len).sum());
    for b in bases {
        match b.sex {
            Some(s) if s != member.sex => z.extend(std::iter::repeat_n(0.0, b.len())),
            _ => z.extend(b.eval(age)),
        }
    }
    Ok(IndividualRow {
        member_id: member.member_id.clone(),
        week,
        x: beta_row(member.sex, age, gender_split),
        z,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdRow {
    pub y: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub w_scaled: Vec<f64>,
    pub delta_scaled: Vec<f64>,
    pub n: usize,
}

/// Socio dummies (one per coded level, across variables) for a household.
pub fn socio_dummies(coding: &[SocioCoding], codes: &[u32]) -> Vec<f64> {
    coding
        .iter()
        .zip(codes)
        .flat_map(|(c, &code)| {
            let hit = c.level_of(code);
            (0..c.levels.len()).map(move |l| f64::from((Some(l) == hit) as u8))
        })
        .collect()
}

/// Week dummies for weeks `1..=weeks` except the reference week.
pub fn week_dummies(week: usize, weeks: usize, reference_week: usize) -> Vec<f64> {
    (1..=weeks)
        .filter(|&tau| tau != reference_week)
        .map(|tau| f64::from((tau == week) as u8))
        .collect()
}

/// Rescaled household row: member sums over `sqrt(n)` for `y`, `x`, `z`;
/// socio and week dummies times `sqrt(n)`.
pub fn household_row(
    rows: &[IndividualRow],
    household_intake: f64,
    socio: &[f64],
    week_dummy: &[f64],
) -> Result<HouseholdRow> {
    let n = rows.len();
    if n == 0 {
        return Err(KdemError::invalid("household row needs at least one active member"));
    }
    let root = (n as f64).sqrt();
    let sum = |get: fn(&IndividualRow) -> &Vec<f64>| {
        let mut acc = vec![0.0; get(&rows[0]).len()];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(get(r)) {
                *a += v;
            }
        }
        acc.into_iter().map(|v| v / root).collect::<Vec<_>>()
    };
    Ok(HouseholdRow {
        y: household_intake / root,
        x: sum(|r| &r.x),
        z: sum(|r| &r.z),
        w_scaled: socio.iter().map(|v| v * root).collect(),
        delta_scaled: week_dummy.iter().map(|v| v * root).collect(),
        n,
    })
}

/// Stacked household rows of the rescaled model, ordered by household then
/// week, with column metadata.
#[derive(Debug, Clone)]
pub struct DesignSet {
    pub meta: DesignMeta,
    pub y: DVector<f64>,
    pub fixed: DMatrix<f64>,
    pub random: DMatrix<f64>,
    pub row_group: Vec<usize>,
    pub row_size: Vec<usize>,
    /// Index into `PanelData::households`.
    pub row_household: Vec<usize>,
    pub row_week: Vec<usize>,
}

impl DesignSet {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Copy with a different response, same design.
    pub fn with_response(&self, y: DVector<f64>) -> Self {
        assert_eq!(y.len(), self.n_rows());
        Self {
            y,
            ..self.clone()
        }
    }

    pub fn write_csv(&self, path: &Path, households: &[String]) -> Result<()> {
        let io = |source| KdemError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let mut header = vec![
            "Y".to_string(),
            "group".to_string(),
            "n".to_string(),
            "household_id".to_string(),
            "week".to_string(),
        ];
        header.extend(self.meta.fixed_names.iter().map(|n| format!("fixed:{n}")));
        header.extend(self.meta.random_names.iter().map(|n| format!("random:{n}")));
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for r in 0..self.n_rows() {
            let mut rec = vec![
                self.y[r].to_string(),
                self.meta.groups[self.row_group[r]].label.clone(),
                self.row_size[r].to_string(),
                households[self.row_household[r]].clone(),
                self.row_week[r].to_string(),
            ];
            rec.extend(self.fixed.row(r).iter().map(f64::to_string));
            rec.extend(self.random.row(r).iter().map(f64::to_string));
            writeln!(out, "{}", rec.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Spline bases from the distinct fractional ages of active members, pooled
/// over the panel year.
pub fn build_bases(panel: &PanelData, spec: &ModelSpec) -> Vec<SplineBasis> {
    let ages = |sex: Option<Sex>| -> Vec<f64> {
        panel
            .members()
            .filter(|m| sex.is_none_or(|s| m.sex == s))
            .flat_map(|m| {
                (1..=panel.weeks)
                    .filter(|&t| m.is_active(t as i64))
                    .map(|t| m.age_at(t as i64))
            })
            .collect()
    };
    if spec.gender_split {
        vec![
            select_knots(&ages(Some(Sex::M)), spec.max_knots, Some(Sex::M)),
            select_knots(&ages(Some(Sex::F)), spec.max_knots, Some(Sex::F)),
        ]
    } else {
        vec![select_knots(&ages(None), spec.max_knots, None)]
    }
}

/// Residual-variance groups by household size. Sizes at or above
/// `max_group_size` share a group; groups with fewer than `min_rows` rows
/// merge into the adjacent smaller-size group (the smallest merges upward).
pub fn size_groups(row_sizes: &[usize], max_group_size: usize, min_rows: usize) -> (Vec<SizeGroup>, Vec<usize>) {
    let cap = max_group_size.max(1);
    let mut groups: Vec<Vec<usize>> = (1..=cap).map(|n| vec![n]).collect();
    let bucket = |n: usize| n.min(cap);
    let count = |g: &[usize]| {
        row_sizes
            .iter()
            .filter(|&&n| g.contains(&bucket(n)))
            .count()
    };
    groups.retain(|g| count(g) > 0);
    while groups.len() > 1 {
        let Some(i) = groups.iter().position(|g| count(g) < min_rows) else {
            break;
        };
        let gone = groups.remove(i);
        let into = if i == 0 { 0 } else { i - 1 };
        groups[into].extend(gone);
        groups[into].sort_unstable();
    }
    let row_group: Vec<usize> = row_sizes
        .iter()
        .map(|&n| {
            groups
                .iter()
                .position(|g| g.contains(&bucket(n)))
                .expect("every size is in a group")
        })
        .collect();
    let out = groups
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let members: Vec<usize> = row_sizes
                .iter()
                .zip(&row_group)
                .filter(|(_, &rg)| rg == gi)
                .map(|(&n, _)| n)
                .collect();
            let lo = g[0];
            let hi = *g.last().unwrap();
            let label = match (lo == hi, hi == cap) {
                (true, false) => format!("n={lo}"),
                (true, true) => format!("n>={lo}"),
                (false, false) => format!("n={lo}..{hi}"),
                (false, true) => format!("n>={lo}"),
            };
            SizeGroup {
                label,
                sizes: g.clone(),
                rows: members.len(),
                mean_size: members.iter().sum::<usize>() as f64 / members.len().max(1) as f64,
                max_size: members.iter().copied().max().unwrap_or(hi),
            }
        })
        .collect();
    (out, row_group)
}

fn beta_names(gender_split: bool) -> Vec<String> {
    if gender_split {
        ["bM0", "bM1", "bF0", "bF1"].map(String::from).to_vec()
    } else {
        ["b0", "b1"].map(String::from).to_vec()
    }
}

/// Build the stacked household design for `panel` under `spec`.
pub fn assemble(panel: &PanelData, spec: &ModelSpec) -> Result<DesignSet> {
    spec.validate(panel.weeks)?;
    let coding = match &spec.socio_coding {
        Some(c) => c.clone(),
        None => default_coding(&panel.socio_vars, spec.reference_modalities.as_deref())?,
    };
    let bases = build_bases(panel, spec);
    assemble_with(panel, spec, coding, bases)
}

/// As [`assemble`] with explicit socio coding and spline bases, e.g. those
/// stored with an earlier fit.
pub fn assemble_with(
    panel: &PanelData,
    spec: &ModelSpec,
    coding: Vec<SocioCoding>,
    bases: Vec<SplineBasis>,
) -> Result<DesignSet> {
    spec.validate(panel.weeks)?;
    if coding.len() != panel.socio_vars.len() {
        return Err(KdemError::invalid("socio coding does not match the panel's variables"));
    }

    let mut candidates: Vec<(FixedColumn, String)> = beta_names(spec.gender_split)
        .into_iter()
        .enumerate()
        .map(|(j, n)| (FixedColumn::Beta(j), n))
        .collect();
    for (q, c) in coding.iter().enumerate() {
        for (l, level) in c.levels.iter().enumerate() {
            candidates.push((FixedColumn::Socio { variable: q, level: l }, level.name.clone()));
        }
    }
    for tau in (1..=panel.weeks).filter(|&t| t != spec.reference_week) {
        candidates.push((FixedColumn::Week(tau), format!("a{tau}")));
    }

    let mut random_columns = Vec::new();
    let mut random_names = Vec::new();
    let mut random_blocks = Vec::new();
    for (bi, b) in bases.iter().enumerate() {
        let tag = b.sex.map(Sex::as_str).unwrap_or("");
        let start = random_columns.len();
        for k in 0..b.len() {
            random_columns.push(RandomColumn { basis: bi, knot: k });
            random_names.push(format!("u{tag}{}", k + 1));
        }
        if !spec.shared_penalty && !b.is_empty() {
            random_blocks.push(RandomBlock {
                label: format!("sigma_u{tag}"),
                start,
                len: b.len(),
            });
        }
    }
    if spec.shared_penalty && !random_columns.is_empty() {
        random_blocks.push(RandomBlock {
            label: "sigma_u".to_string(),
            start: 0,
            len: random_columns.len(),
        });
    }

    let mut meta = DesignMeta {
        gender_split: spec.gender_split,
        shared_penalty: spec.shared_penalty,
        weeks: panel.weeks,
        reference_week: spec.reference_week,
        bases,
        socio_variables: panel.socio_vars.iter().map(|v| v.name.clone()).collect(),
        socio_coding: coding,
        fixed_columns: candidates.iter().map(|c| c.0).collect(),
        fixed_names: candidates.iter().map(|c| c.1.clone()).collect(),
        random_columns,
        random_names,
        random_blocks,
        groups: Vec::new(),
        dropped: Vec::new(),
    };

    // Household-week rows, every column of the candidate layout.
    let p_all = meta.n_fixed();
    let q = meta.n_random();
    let mut y = Vec::new();
    let mut fixed_rows: Vec<f64> = Vec::new();
    let mut random_rows: Vec<f64> = Vec::new();
    let mut row_size = Vec::new();
    let mut row_household = Vec::new();
    let mut row_week = Vec::new();
    for (hi, (h, series)) in panel.households.iter().zip(&panel.intakes).enumerate() {
        for t in 1..=panel.weeks {
            let active: Vec<&Member> = h.active_members(t).collect();
            if active.is_empty() {
                continue;
            }
            let root = (active.len() as f64).sqrt();
            let socio = h.socio_at(t);
            let mut f = vec![0.0; p_all];
            let mut z = vec![0.0; q];
            for m in &active {
                for (a, v) in f.iter_mut().zip(meta.individual_fixed(m, t, socio)) {
                    *a += v;
                }
                for (a, v) in z.iter_mut().zip(meta.individual_random(m, t)) {
                    *a += v;
                }
            }
            fixed_rows.extend(f.iter().map(|v| v / root));
            random_rows.extend(z.iter().map(|v| v / root));
            y.push(series.at(t) / root);
            row_size.push(active.len());
            row_household.push(hi);
            row_week.push(t);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(KdemError::invalid("panel has no active household-weeks"));
    }

    // Drop socio/week columns no row carries.
    let keep: Vec<usize> = (0..p_all)
        .filter(|&j| {
            matches!(meta.fixed_columns[j], FixedColumn::Beta(_))
                || (0..n).any(|r| fixed_rows[r * p_all + j] != 0.0)
        })
        .collect();
    for j in (0..p_all).filter(|j| !keep.contains(j)) {
        log::warn!("dropping empty design column {}", meta.fixed_names[j]);
        meta.dropped.push(meta.fixed_names[j].clone());
    }
    let fixed = DMatrix::from_fn(n, keep.len(), |r, c| fixed_rows[r * p_all + keep[c]]);
    meta.fixed_columns = keep.iter().map(|&j| meta.fixed_columns[j]).collect();
    meta.fixed_names = keep.iter().map(|&j| meta.fixed_names[j].clone()).collect();
    let random = DMatrix::from_row_slice(n, q, &random_rows);

    if n <= meta.n_fixed() {
        return Err(KdemError::invalid(format!(
            "{n} household-week rows cannot identify {} fixed effects",
            meta.n_fixed()
        )));
    }

    let (groups, row_group) = size_groups(&row_size, spec.max_group_size, spec.min_group_rows);
    meta.groups = groups;

    Ok(DesignSet {
        meta,
        y: DVector::from_vec(y),
        fixed,
        random,
        row_group,
        row_size,
        row_household,
        row_week,
    })
}
