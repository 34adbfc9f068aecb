//! Body-burden accumulation `S_t = exp(-eta) S_{t-1} + D_t` and the
//! long-term risk indices built on it.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KdemError, Result};
use crate::ingest::BodyWeightTable;
use crate::mixed::IntakeMatrix;
use crate::model::{Contaminant, Member, PanelData, SocioVariable};

/// Weekly dose per kg body weight (µg/kg bw/week) of one member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseSeries {
    pub member: Member,
    /// Socio codes of the member's household in the final week.
    pub socio: Vec<u32>,
    /// Week `t` at index `t - 1`; zero in inactive weeks.
    pub dose: Vec<f64>,
    pub active: Vec<bool>,
}

impl DoseSeries {
    pub fn is_active(&self) -> bool {
        self.active.iter().any(|a| *a)
    }

    pub fn final_age(&self) -> f64 {
        self.member.age_at(self.dose.len() as i64)
    }
}

/// Clamped intakes divided by the week-specific body weight.
pub fn relative_dose(intakes: &IntakeMatrix, bw: &BodyWeightTable, socio: &[Vec<u32>]) -> Result<Vec<DoseSeries>> {
    if socio.len() != intakes.rows.len() {
        return Err(KdemError::invalid("socio codes not aligned with intake rows"));
    }
    intakes
        .rows
        .iter()
        .zip(socio)
        .map(|(r, codes)| {
            let clamped = r.clamped();
            let mut dose = vec![0.0; intakes.weeks];
            for t in 1..=intakes.weeks {
                if r.active[t - 1] {
                    let w = bw.lookup(r.member.sex, r.member.age_at(t as i64))?;
                    dose[t - 1] = clamped[t - 1] / w;
                }
            }
            Ok(DoseSeries {
                member: r.member.clone(),
                socio: codes.clone(),
                dose,
                active: r.active.clone(),
            })
        })
        .collect()
}

/// Doses of every panel member, with the socio codes of the member's
/// household in the final week. `intakes` must come from this panel.
pub fn panel_doses(intakes: &IntakeMatrix, panel: &PanelData) -> Result<Vec<DoseSeries>> {
    let socio: Vec<Vec<u32>> = panel
        .households
        .iter()
        .flat_map(|h| h.members.iter().map(move |_| h.socio_at(panel.weeks).to_vec()))
        .collect();
    let ids = panel.members().map(|m| &m.member_id);
    if intakes.weeks != panel.weeks || !ids.eq(intakes.rows.iter().map(|r| &r.member.member_id)) {
        return Err(KdemError::invalid("intakes were not predicted for this panel"));
    }
    relative_dose(intakes, &panel.body_weights, &socio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureSeries {
    pub member_id: String,
    pub s0: f64,
    /// `S_t` for `t = 1..=T` at index `t - 1`.
    pub s: Vec<f64>,
    pub at_risk: bool,
    pub first_exceed_week: Option<usize>,
}

/// Mean of the positive doses, zero when there are none.
pub fn initial_burden(dose: &[f64]) -> f64 {
    let pos: Vec<f64> = dose.iter().copied().filter(|d| *d > 0.0).collect();
    if pos.is_empty() {
        0.0
    } else {
        pos.iter().sum::<f64>() / pos.len() as f64
    }
}

/// The recursion from a given starting burden.
pub fn accumulate(s0: f64, dose: &[f64], retention: f64) -> Vec<f64> {
    let mut s = s0;
    dose.iter()
        .map(|d| {
            s = retention * s + d;
            s
        })
        .collect()
}

/// `S^ref` for a constant dose at the tolerable level: the limit when `t` is
/// `None`, else the value after `t` weeks starting from `S_0 = d`.
pub fn reference_exposure(c: &Contaminant, t: Option<usize>) -> f64 {
    let r = c.retention();
    match t {
        None => c.ptwi / (1.0 - r),
        Some(t) => c.ptwi * (1.0 - r.powi(t as i32 + 1)) / (1.0 - r),
    }
}

/// Relative margin by which a burden must pass the reference to count as
/// an exceedance; a burden equal to the reference up to rounding does not.
pub const EXCEED_RTOL: f64 = 1e-12;

pub fn exceeds(s: f64, reference: f64) -> bool {
    s > reference * (1.0 + EXCEED_RTOL)
}

fn first_exceed(s: &[f64], c: &Contaminant, burn_in: usize) -> Option<usize> {
    (burn_in + 1..=s.len()).find(|&t| exceeds(s[t - 1], reference_exposure(c, Some(t))))
}

pub fn kdem_series(d: &DoseSeries, c: &Contaminant, burn_in: usize) -> ExposureSeries {
    let s0 = initial_burden(&d.dose);
    let s = accumulate(s0, &d.dose, c.retention());
    let first = first_exceed(&s, c, burn_in);
    ExposureSeries {
        member_id: d.member.member_id.clone(),
        s0,
        s,
        at_risk: first.is_some(),
        first_exceed_week: first,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRisk {
    pub member_id: String,
    pub at_risk: bool,
    pub first_exceed_week: Option<usize>,
    pub weeks_above_ptwi: usize,
    pub active_weeks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRisk {
    pub label: String,
    pub individuals: usize,
    pub at_risk: usize,
    pub long_term_risk: Option<f64>,
    pub r_ptwi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub scenario: String,
    pub half_life_weeks: f64,
    pub ptwi: f64,
    pub s_ref: f64,
    pub burn_in: usize,
    pub individuals: usize,
    pub at_risk: usize,
    /// `None` when the panel is not longer than the burn-in.
    pub long_term_risk: Option<f64>,
    pub member_weeks: usize,
    pub weeks_above_ptwi: usize,
    pub r_ptwi: f64,
    /// Share at risk among children aged 1 to 3 in the final week.
    pub children_1_3: Option<f64>,
    pub subgroups: Vec<SubgroupRisk>,
    pub members: Vec<MemberRisk>,
}

const AGE_BANDS: [(f64, f64, &str); 5] = [
    (1.0, 3.0, "age 1-3"),
    (3.0, 11.0, "age 3-11"),
    (11.0, 18.0, "age 11-18"),
    (18.0, 65.0, "age 18-65"),
    (65.0, f64::INFINITY, "age 65+"),
];

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Summary from per-member flags; shared with the brute-force oracle.
pub fn summarize(
    doses: &[DoseSeries],
    members: Vec<MemberRisk>,
    c: &Contaminant,
    burn_in: usize,
    scenario: &str,
    socio_vars: &[SocioVariable],
) -> RiskSummary {
    let defined = doses.first().is_some_and(|d| d.dose.len() > burn_in);
    if !doses.is_empty() && !defined {
        log::warn!(
            "panel of {} weeks is not longer than the burn-in of {burn_in}; long-term risk undefined",
            doses[0].dose.len()
        );
    }
    let tally = |pick: &dyn Fn(&DoseSeries) -> bool, label: String| {
        let mut n = 0;
        let mut risk = 0;
        let mut mw = 0;
        let mut above = 0;
        for (d, m) in doses.iter().zip(&members) {
            if !d.is_active() || !pick(d) {
                continue;
            }
            n += 1;
            risk += m.at_risk as usize;
            mw += m.active_weeks;
            above += m.weeks_above_ptwi;
        }
        SubgroupRisk {
            label,
            individuals: n,
            at_risk: risk,
            long_term_risk: defined.then(|| ratio(risk, n)),
            r_ptwi: ratio(above, mw),
        }
    };
    let all = tally(&|_| true, "all".into());
    let mut subgroups: Vec<SubgroupRisk> = AGE_BANDS
        .iter()
        .map(|&(lo, hi, label)| {
            tally(
                &|d: &DoseSeries| {
                    let a = d.final_age();
                    a >= lo && a < hi
                },
                label.into(),
            )
        })
        .collect();
    if let Some(q) = socio_vars.iter().position(|v| v.name == "income") {
        let v = &socio_vars[q];
        for code in 1..=v.modalities() {
            subgroups.push(tally(
                &|d: &DoseSeries| d.socio.get(q) == Some(&code),
                format!("income: {}", v.label(code)),
            ));
        }
    }
    let children = &subgroups[0];
    RiskSummary {
        scenario: scenario.to_string(),
        half_life_weeks: c.half_life_weeks,
        ptwi: c.ptwi,
        s_ref: reference_exposure(c, None),
        burn_in,
        individuals: all.individuals,
        at_risk: all.at_risk,
        long_term_risk: all.long_term_risk,
        member_weeks: members.iter().map(|m| m.active_weeks).sum(),
        weeks_above_ptwi: members.iter().map(|m| m.weeks_above_ptwi).sum(),
        r_ptwi: all.r_ptwi,
        children_1_3: children.long_term_risk.filter(|_| children.individuals > 0),
        subgroups,
        members,
    }
}

/// Burden series and risk indices for every member, in input order.
pub fn risk_indices(
    doses: &[DoseSeries],
    c: &Contaminant,
    burn_in: usize,
    scenario: &str,
    socio_vars: &[SocioVariable],
) -> (Vec<ExposureSeries>, RiskSummary) {
    let series: Vec<ExposureSeries> = doses.par_iter().map(|d| kdem_series(d, c, burn_in)).collect();
    let members = doses
        .iter()
        .zip(&series)
        .map(|(d, s)| MemberRisk {
            member_id: d.member.member_id.clone(),
            at_risk: d.is_active() && s.at_risk,
            first_exceed_week: s.first_exceed_week.filter(|_| d.is_active()),
            weeks_above_ptwi: d
                .dose
                .iter()
                .zip(&d.active)
                .filter(|(v, a)| **a && **v > c.ptwi)
                .count(),
            active_weeks: d.active.iter().filter(|a| **a).count(),
        })
        .collect();
    let summary = summarize(doses, members, c, burn_in, scenario, socio_vars);
    (series, summary)
}

/// Intakes scaled by `edible / (1 - outside)`.
pub fn apply_corrections(intakes: &IntakeMatrix, outside: Option<f64>, edible: Option<f64>) -> Result<IntakeMatrix> {
    let p_out = outside.unwrap_or(0.0);
    let p_ed = edible.unwrap_or(1.0);
    if !(0.0..1.0).contains(&p_out) {
        return Err(KdemError::invalid(format!("outside-home share {p_out} must lie in [0, 1)")));
    }
    if !(p_ed > 0.0 && p_ed <= 1.0) {
        return Err(KdemError::invalid(format!("edible fraction {p_ed} must lie in (0, 1]")));
    }
    Ok(intakes.scaled(correction_factor(p_out, p_ed)))
}

pub fn correction_factor(outside: f64, edible: f64) -> f64 {
    edible / (1.0 - outside)
}

pub fn scenario_label(outside: Option<f64>, edible: Option<f64>) -> String {
    match (outside, edible) {
        (None, None) => "baseline".into(),
        (Some(o), None) => format!("outside-home {o}"),
        (None, Some(e)) => format!("edible {e}"),
        (Some(o), Some(e)) => format!("outside-home {o}, edible {e}"),
    }
}

/// Burden trajectories of the members at selected quantiles of final-week
/// burden, with the reference trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileCurves {
    pub labels: Vec<String>,
    pub member_ids: Vec<String>,
    pub curves: Vec<Vec<f64>>,
    pub reference: Vec<f64>,
}

pub const CURVE_PERCENTILES: [(f64, &str); 7] = [
    (0.10, "P10"),
    (0.50, "P50"),
    (0.75, "P75"),
    (0.90, "P90"),
    (0.95, "P95"),
    (0.99, "P99"),
    (1.00, "Pmax"),
];

/// Nearest-rank selection among active members.
pub fn percentile_curves(series: &[ExposureSeries], doses: &[DoseSeries], c: &Contaminant) -> PercentileCurves {
    let mut order: Vec<usize> = (0..series.len())
        .filter(|&i| doses[i].is_active() && !series[i].s.is_empty())
        .collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (series[a].s.last().unwrap(), series[b].s.last().unwrap());
        sa.total_cmp(sb).then_with(|| series[a].member_id.cmp(&series[b].member_id))
    });
    let weeks = series.first().map_or(0, |s| s.s.len());
    let mut out = PercentileCurves {
        labels: Vec::new(),
        member_ids: Vec::new(),
        curves: Vec::new(),
        reference: (1..=weeks).map(|t| reference_exposure(c, Some(t))).collect(),
    };
    if order.is_empty() {
        return out;
    }
    for (p, label) in CURVE_PERCENTILES {
        let rank = ((p * order.len() as f64).ceil() as usize).clamp(1, order.len());
        let i = order[rank - 1];
        out.labels.push(label.to_string());
        out.member_ids.push(series[i].member_id.clone());
        out.curves.push(series[i].s.clone());
    }
    out
}

impl PercentileCurves {
    /// Columns `week, P10, ..., Pmax, Sref`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| KdemError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let mut header = vec!["week".to_string()];
        header.extend(CURVE_PERCENTILES.iter().map(|p| p.1.to_string()));
        header.push("Sref".into());
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for t in 0..self.reference.len() {
            let mut rec = vec![(t + 1).to_string()];
            if self.curves.is_empty() {
                rec.extend(std::iter::repeat_n(String::new(), CURVE_PERCENTILES.len()));
            } else {
                rec.extend(self.curves.iter().map(|c| c[t].to_string()));
            }
            rec.push(self.reference[t].to_string());
            writeln!(out, "{}", rec.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Sex;
    use proptest::prelude::*;

    fn mehg() -> Contaminant {
        Contaminant::methylmercury()
    }

    #[test]
    fn single_step() {
        let s = accumulate(10.0, &[1.0], 2f64.powf(-1.0 / 6.0));
        assert!((s[0] - (10.0 * 2f64.powf(-1.0 / 6.0) + 1.0)).abs() < 1e-15);
        assert!((s[0] - 9.9090).abs() < 5e-5);
    }

    #[test]
    fn reference_values() {
        let c = mehg();
        let lim = reference_exposure(&c, None);
        assert!((lim - 1.6 / (1.0 - 2f64.powf(-1.0 / 6.0))).abs() < 1e-12);
        assert!((14.6..14.7).contains(&lim));
        let r36 = reference_exposure(&c, Some(36));
        assert!((r36 - 1.6 * (1.0 - 2f64.powf(-37.0 / 6.0)) / (1.0 - 2f64.powf(-1.0 / 6.0))).abs() < 1e-12);
        assert!((r36 - 14.46).abs() < 5e-3);
        let zero = Contaminant::new("x", 6.0, 0.0).unwrap();
        assert_eq!(reference_exposure(&zero, None), 0.0);
    }

    #[test]
    fn constant_ptwi_dose_tracks_reference() {
        let c = mehg();
        let s = accumulate(c.ptwi, &vec![c.ptwi; 53], c.retention());
        for (t, v) in s.iter().enumerate() {
            assert!((v - reference_exposure(&c, Some(t + 1))).abs() < 1e-10);
        }
    }

    #[test]
    fn corrections() {
        assert_eq!(correction_factor(0.0, 1.0), 1.0);
        assert!((correction_factor(0.2, 1.0) - 1.25).abs() < 1e-15);
        assert!((correction_factor(0.2, 0.61) - 0.7625).abs() < 1e-15);
        let m = IntakeMatrix { weeks: 1, rows: vec![] };
        assert!(apply_corrections(&m, Some(1.0), None).is_err());
        assert!(apply_corrections(&m, None, Some(0.0)).is_err());
    }

    #[test]
    fn zero_doses_give_zero_indices() {
        let d = DoseSeries {
            member: Member {
                member_id: "a".into(),
                household_id: "h".into(),
                sex: Sex::F,
                birth_week: -1000,
            },
            socio: vec![],
            dose: vec![0.0; 53],
            active: vec![true; 53],
        };
        let (s, r) = risk_indices(&[d], &mehg(), 36, "baseline", &[]);
        assert!(s[0].s.iter().all(|v| *v == 0.0));
        assert_eq!(r.long_term_risk, Some(0.0));
        assert_eq!(r.r_ptwi, 0.0);
    }

    #[test]
    fn short_panel_has_undefined_long_term_index() {
        let d = DoseSeries {
            member: Member {
                member_id: "a".into(),
                household_id: "h".into(),
                sex: Sex::F,
                birth_week: -1000,
            },
            socio: vec![],
            dose: vec![5.0; 20],
            active: vec![true; 20],
        };
        let (_, r) = risk_indices(&[d], &mehg(), 36, "baseline", &[]);
        assert_eq!(r.long_term_risk, None);
        assert_eq!(r.r_ptwi, 1.0);
    }

    proptest! {
        #[test]
        fn initial_gap_decays_geometrically(
            dose in prop::collection::vec(0.0f64..5.0, 1..60),
            s0 in 0.0f64..20.0,
            delta in 0.1f64..10.0,
        ) {
            let c = mehg();
            let a = accumulate(s0, &dose, c.retention());
            let b = accumulate(s0 + delta, &dose, c.retention());
            for (t, (x, y)) in a.iter().zip(&b).enumerate() {
                let want = delta * (-c.dissipation() * (t + 1) as f64).exp();
                prop_assert!(((y - x) - want).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn linear_in_dose(dose in prop::collection::vec(0.0f64..5.0, 1..60), lambda in 0.1f64..10.0) {
            let c = mehg();
            let scaled: Vec<f64> = dose.iter().map(|d| d * lambda).collect();
            let a = accumulate(initial_burden(&dose), &dose, c.retention());
            let b = accumulate(initial_burden(&scaled), &scaled, c.retention());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((y - lambda * x).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn constant_dose_converges_monotonically(c0 in 0.01f64..5.0, s0 in 0.0f64..100.0) {
            let k = mehg();
            let s = accumulate(s0, &vec![c0; 200], k.retention());
            let lim = c0 / (1.0 - k.retention());
            let gaps: Vec<f64> = s.iter().map(|v| (v - lim).abs()).collect();
            prop_assert!(gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }
}
