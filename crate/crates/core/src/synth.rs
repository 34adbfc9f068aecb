//! Synthetic panels with known individual intakes, and brute-force
//! reference computations used to check the fitted model and the exposure
//! indices.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::error::{KdemError, Result};
use crate::exposure::{exceeds, reference_exposure, summarize, DoseSeries, MemberRisk, RiskSummary};
use crate::ingest::{BodyWeightTable, ContaminationTable, PurchaseRecord};
use crate::model::{Contaminant, Household, IntakeSeriesHousehold, Member, PanelData, Sex, SocioVariable, WEEKS_PER_YEAR};

/// Linear interpolation through `(ages[i], values[i])`, constant beyond the
/// end points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    pub ages: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn eval(&self, a: f64) -> f64 {
        let (x, y) = (&self.ages, &self.values);
        if a <= x[0] {
            return y[0];
        }
        for i in 1..x.len() {
            if a <= x[i] {
                let w = (a - x[i - 1]) / (x[i] - x[i - 1]);
                return y[i - 1] + w * (y[i] - y[i - 1]);
            }
        }
        *y.last().unwrap()
    }

    pub fn linear(intercept: f64, slope: f64) -> Self {
        Self {
            ages: vec![0.0, 120.0],
            values: vec![intercept, intercept + 120.0 * slope],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ages.len() < 2 || self.ages.len() != self.values.len() {
            return Err(KdemError::invalid("age curve needs at least two matching points"));
        }
        if !self.ages.windows(2).all(|w| w[0] < w[1]) {
            return Err(KdemError::invalid("age curve points must be strictly increasing"));
        }
        Ok(())
    }
}

/// Ground truth of a synthetic panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthConfig {
    pub households: usize,
    pub weeks: usize,
    pub f_male: PiecewiseLinear,
    pub f_female: PiecewiseLinear,
    /// One entry per non-reference modality, in the default coding order.
    pub gamma: Vec<f64>,
    /// Week effects for weeks `1..=weeks` (week 1 is the reference);
    /// `None` uses a sine wave of amplitude `seasonal_amplitude`.
    pub alpha: Option<Vec<f64>>,
    pub seasonal_amplitude: f64,
    pub sigma_eps2: f64,
    pub rho: f64,
    /// Probability of household sizes `1, 2, ...`.
    pub size_weights: Vec<f64>,
    /// Per socio variable, the probability of each modality code.
    pub socio_weights: Vec<Vec<f64>>,
    pub socio_vars: Vec<SocioVariable>,
    /// Chance that a child is younger than one year at the start of the panel.
    pub infant_share: f64,
    pub seed: u64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            households: 200,
            weeks: 53,
            f_male: PiecewiseLinear {
                ages: vec![1.0, 10.0, 20.0, 40.0, 60.0, 80.0, 100.0],
                values: vec![8.0, 22.0, 40.0, 58.0, 72.0, 66.0, 55.0],
            },
            f_female: PiecewiseLinear {
                ages: vec![1.0, 10.0, 20.0, 40.0, 60.0, 80.0, 100.0],
                values: vec![8.0, 20.0, 32.0, 46.0, 60.0, 58.0, 50.0],
            },
            gamma: vec![
                6.027, 2.686, -1.928, 0.962, 5.232, 2.303, 1.023, -0.122, -3.733, -5.261, -1.910, 5.901, -1.281,
            ],
            alpha: None,
            seasonal_amplitude: 3.0,
            sigma_eps2: 1_260_705.0,
            rho: -0.22,
            size_weights: vec![0.30, 0.33, 0.16, 0.14, 0.07],
            socio_weights: vec![
                vec![0.15, 0.30, 0.20, 0.35],
                vec![0.15, 0.10, 0.12, 0.18, 0.45],
                vec![0.10, 0.25, 0.25, 0.10, 0.30],
                vec![0.05, 0.45, 0.50],
            ],
            socio_vars: SocioVariable::panel_defaults(),
            infant_share: 0.05,
            seed: 1,
        }
    }
}

impl TruthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.households == 0 || self.weeks == 0 {
            return Err(KdemError::invalid("synthetic panel needs households and weeks"));
        }
        self.f_male.validate()?;
        self.f_female.validate()?;
        if !(self.sigma_eps2 >= 0.0 && self.sigma_eps2.is_finite()) {
            return Err(KdemError::invalid("sigma_eps2 must be nonnegative"));
        }
        let n_max = self.size_weights.len();
        if n_max == 0 || self.size_weights.iter().any(|w| *w < 0.0) || self.size_weights.iter().sum::<f64>() <= 0.0 {
            return Err(KdemError::invalid("size_weights must be nonnegative and not all zero"));
        }
        if self.rho >= 1.0 || (n_max > 1 && self.rho <= -1.0 / (n_max - 1) as f64) {
            return Err(KdemError::invalid(format!(
                "rho = {} makes the exchangeable covariance singular for households of up to {n_max} members",
                self.rho
            )));
        }
        if self.socio_weights.len() != self.socio_vars.len() {
            return Err(KdemError::invalid("one socio weight vector per socio variable"));
        }
        for (w, v) in self.socio_weights.iter().zip(&self.socio_vars) {
            if w.len() != v.modalities() as usize {
                return Err(KdemError::invalid(format!("socio weights of {} have the wrong length", v.name)));
            }
        }
        let levels: u32 = self.socio_vars.iter().map(|v| v.modalities() - 1).sum();
        if self.gamma.len() != levels as usize {
            return Err(KdemError::invalid(format!(
                "{} socio effects given for {levels} non-reference modalities",
                self.gamma.len()
            )));
        }
        if let Some(a) = &self.alpha {
            if a.len() != self.weeks {
                return Err(KdemError::invalid("alpha needs one value per week"));
            }
        }
        Ok(())
    }

    pub fn week_effects(&self) -> Vec<f64> {
        match &self.alpha {
            Some(a) => a.clone(),
            None => (0..self.weeks)
                .map(|t| self.seasonal_amplitude * (2.0 * std::f64::consts::PI * t as f64 / 52.0).sin())
                .collect(),
        }
    }

    /// Socio effect of a household with modality codes `codes`.
    pub fn socio_effect(&self, codes: &[u32]) -> f64 {
        let mut offset = 0;
        let mut total = 0.0;
        for (v, &c) in self.socio_vars.iter().zip(codes) {
            let mut k = offset;
            for code in 1..=v.modalities() {
                if code == v.reference {
                    continue;
                }
                if code == c {
                    total += self.gamma[k];
                }
                k += 1;
            }
            offset += v.modalities() as usize - 1;
        }
        total
    }

    pub fn curve(&self, sex: Sex, age: f64) -> f64 {
        match sex {
            Sex::M => self.f_male.eval(age),
            Sex::F => self.f_female.eval(age),
        }
    }
}

/// Individual truths, aligned with `panel.members()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub member_ids: Vec<String>,
    /// Expected weekly intake, zero in inactive weeks.
    pub mean: Vec<Vec<f64>>,
    /// Drawn weekly intake (mean plus error), zero in inactive weeks.
    pub intake: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub panel: PanelData,
    pub truth: TruthRecord,
}

/// `n` exchangeable errors with variance `sigma2` and correlation `rho`:
/// the mean direction gets variance `sigma2 (1 + (n - 1) rho)`, each
/// Helmert contrast `sigma2 (1 - rho)`.
pub fn exchangeable_errors<R: Rng + ?Sized>(n: usize, sigma2: f64, rho: f64, rng: &mut R) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let nf = n as f64;
    let sd_mean = (sigma2 * (1.0 + (nf - 1.0) * rho)).max(0.0).sqrt();
    let sd_contrast = (sigma2 * (1.0 - rho)).max(0.0).sqrt();
    let z0: f64 = StandardNormal.sample(rng);
    let mut e = vec![sd_mean * z0 / nf.sqrt(); n];
    for k in 1..n {
        let z: f64 = StandardNormal.sample(rng);
        let kf = k as f64;
        let norm = (kf * (kf + 1.0)).sqrt();
        let s = sd_contrast * z / norm;
        for x in e.iter_mut().take(k) {
            *x += s;
        }
        e[k] -= kf * s;
    }
    e
}

fn sample_members<R: Rng + ?Sized>(cfg: &TruthConfig, hid: &str, n: usize, rng: &mut R) -> Vec<Member> {
    let to_birth = |age: f64| 1 - (age * WEEKS_PER_YEAR).round() as i64;
    let mut out = Vec::with_capacity(n);
    let first_age = rng.random_range(20.0..80.0);
    let first_sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
    for i in 0..n {
        let (sex, age) = match i {
            0 => (first_sex, first_age),
            1 => {
                let s = if first_sex == Sex::M { Sex::F } else { Sex::M };
                (s, (first_age + rng.random_range(-6.0..6.0f64)).clamp(18.0, 95.0))
            }
            _ => {
                let s = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
                let age = if rng.random_bool(cfg.infant_share) {
                    rng.random_range(0.3..1.0)
                } else {
                    rng.random_range(1.0..(first_age - 18.0).clamp(2.0, 25.0))
                };
                (s, age)
            }
        };
        out.push(Member {
            member_id: format!("{hid}-{}", i + 1),
            household_id: hid.to_string(),
            sex,
            birth_week: to_birth(age),
        });
    }
    out
}

fn draw_intakes<R: Rng + ?Sized>(cfg: &TruthConfig, households: &[Household], mean: &[Vec<f64>], rng: &mut R) -> (Vec<Vec<f64>>, Vec<IntakeSeriesHousehold>) {
    let mut intake = mean.to_vec();
    let mut series = Vec::with_capacity(households.len());
    let mut offset = 0;
    for h in households {
        let mut y = vec![0.0; cfg.weeks];
        for t in 1..=cfg.weeks {
            let active: Vec<usize> = (0..h.members.len()).filter(|&i| h.members[i].is_active(t as i64)).collect();
            let e = exchangeable_errors(active.len(), cfg.sigma_eps2, cfg.rho, rng);
            for (&i, ei) in active.iter().zip(e) {
                let v = mean[offset + i][t - 1] + ei;
                intake[offset + i][t - 1] = v;
                y[t - 1] += v;
            }
        }
        offset += h.members.len();
        series.push(IntakeSeriesHousehold {
            household_id: h.household_id.clone(),
            y,
        });
    }
    (intake, series)
}

/// Draw a panel from `cfg`. Household series are the member sums of the
/// drawn individual intakes, left untruncated.
pub fn generate(cfg: &TruthConfig) -> Result<SyntheticPanel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size_dist = WeightedIndex::new(&cfg.size_weights).map_err(|e| KdemError::invalid(e.to_string()))?;
    let socio_dists = cfg
        .socio_weights
        .iter()
        .map(|w| WeightedIndex::new(w).map_err(|e| KdemError::invalid(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let alpha = cfg.week_effects();
    let width = cfg.households.to_string().len();

    let mut households = Vec::with_capacity(cfg.households);
    let mut mean = Vec::new();
    let mut member_ids = Vec::new();
    for h in 0..cfg.households {
        let hid = format!("h{:0width$}", h + 1);
        let n = size_dist.sample(&mut rng) + 1;
        let mut members = sample_members(cfg, &hid, n, &mut rng);
        // A household needs at least one member active in some week.
        if !members.iter().any(|m| m.is_active(cfg.weeks as i64)) {
            members[0].birth_week = 1 - (30.0 * WEEKS_PER_YEAR) as i64;
        }
        let codes: Vec<u32> = socio_dists.iter().map(|d| d.sample(&mut rng) as u32 + 1).collect();
        let gamma = cfg.socio_effect(&codes);
        for m in &members {
            member_ids.push(m.member_id.clone());
            mean.push(
                (1..=cfg.weeks)
                    .map(|t| {
                        if m.is_active(t as i64) {
                            cfg.curve(m.sex, m.age_at(t as i64)) + gamma + alpha[t - 1]
                        } else {
                            0.0
                        }
                    })
                    .collect::<Vec<f64>>(),
            );
        }
        households.push(Household {
            household_id: hid,
            members,
            socio: vec![codes; cfg.weeks],
        });
    }
    let (intake, intakes) = draw_intakes(cfg, &households, &mean, &mut rng);
    let panel = PanelData {
        weeks: cfg.weeks,
        socio_vars: cfg.socio_vars.clone(),
        households,
        intakes,
        body_weights: BodyWeightTable::synthetic_default(),
        contamination: Some(ContaminationTable::seafood()),
    };
    panel.validate()?;
    Ok(SyntheticPanel {
        panel,
        truth: TruthRecord {
            member_ids,
            mean,
            intake,
        },
    })
}

/// Same households and means, fresh errors from `seed`.
pub fn redraw(sp: &SyntheticPanel, cfg: &TruthConfig, seed: u64) -> SyntheticPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (intake, intakes) = draw_intakes(cfg, &sp.panel.households, &sp.truth.mean, &mut rng);
    let mut panel = sp.panel.clone();
    panel.intakes = intakes;
    SyntheticPanel {
        panel,
        truth: TruthRecord {
            intake,
            ..sp.truth.clone()
        },
    }
}

/// Purchases that reproduce the (clamped) household series: 90% of the
/// intake from fish, 10% from molluscs.
pub fn purchases(panel: &PanelData) -> Vec<PurchaseRecord> {
    let table = panel.contamination.clone().unwrap_or_else(ContaminationTable::seafood);
    let shares = [("Fish", 0.9), ("Mollusks and Shellfish", 0.1)];
    let mut out = Vec::new();
    for s in &panel.intakes {
        for (t, &y) in s.y.iter().enumerate() {
            if y <= 0.0 {
                continue;
            }
            for (group, share) in shares {
                let level = table.ug_per_kg(group).expect("seafood table has both groups");
                out.push(PurchaseRecord {
                    household_id: s.household_id.clone(),
                    week: t + 1,
                    food_group: group.to_string(),
                    quantity_kg: share * y / level,
                });
            }
        }
    }
    out
}

/// Dense restricted log-likelihood: builds `V = R + Z G Z'` explicitly.
pub fn oracle_restricted_loglik(design: &DesignSet, sigma_u2: &[f64], sigma_n2: &[f64]) -> f64 {
    let (v, x, y) = dense_parts(design, sigma_u2, sigma_n2);
    let n = y.len() as f64;
    let p = x.ncols() as f64;
    let vc = v.cholesky().expect("V is positive definite");
    let ln_det_v = 2.0 * vc.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let vix = vc.solve(&x);
    let xtvix = x.transpose() * &vix;
    let xc = xtvix.clone().cholesky().expect("X'V^-1X is positive definite");
    let ln_det_x = 2.0 * xc.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let beta = xc.solve(&(vix.transpose() * &y));
    let r = &y - &x * beta;
    let rvr = r.dot(&vc.solve(&r));
    -0.5 * ((n - p) * (2.0 * std::f64::consts::PI).ln() + ln_det_v + ln_det_x + rvr)
}

/// Generalized least squares fixed effects with the given variances.
pub fn oracle_gls(design: &DesignSet, sigma_u2: &[f64], sigma_n2: &[f64]) -> Vec<f64> {
    let (v, x, y) = dense_parts(design, sigma_u2, sigma_n2);
    let vi = v.try_inverse().expect("V is invertible");
    let a = x.transpose() * &vi * &x;
    let b = x.transpose() * &vi * &y;
    (a.try_inverse().expect("X'V^-1X is invertible") * b).iter().copied().collect()
}

fn dense_parts(design: &DesignSet, sigma_u2: &[f64], sigma_n2: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n = design.n_rows();
    let q = design.random.ncols();
    let mut g = vec![0.0; q];
    for (b, s) in design.meta.random_blocks.iter().zip(sigma_u2) {
        for x in &mut g[b.start..b.start + b.len] {
            *x = *s;
        }
    }
    let zg = DMatrix::from_fn(n, q, |r, c| design.random[(r, c)] * g[c]);
    let mut v = zg * design.random.transpose();
    for r in 0..n {
        v[(r, r)] += sigma_n2[design.row_group[r]];
    }
    (v, design.fixed.clone(), design.y.clone())
}

/// Maximum of [`oracle_restricted_loglik`] by a log-scale grid followed by
/// compass search down to a step of 1e-6, also trying each random block at
/// exactly zero. Returns `(loglik, sigma_u2, sigma_n2)`.
pub fn oracle_reml_maximum(design: &DesignSet) -> (f64, Vec<f64>, Vec<f64>) {
    let nb = design.meta.random_blocks.len();
    let ng = design.meta.groups.len();
    let n = design.n_rows() as f64;
    let y_var = {
        let m = design.y.mean();
        design.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
    };
    let z_scale = design.random.iter().map(|v| v * v).sum::<f64>() / (n * design.random.ncols().max(1) as f64);
    let u_base = y_var / z_scale.max(1e-300);

    let eval = |x: &[f64], zero: &[bool]| -> f64 {
        let su: Vec<f64> = (0..nb).map(|k| if zero[k] { 0.0 } else { x[k].exp() }).collect();
        let sg: Vec<f64> = x[nb..].iter().map(|v| v.exp()).collect();
        oracle_restricted_loglik(design, &su, &sg)
    };

    let mut best = (f64::NEG_INFINITY, Vec::new(), Vec::new());
    for mask in 0..(1usize << nb) {
        let zero: Vec<bool> = (0..nb).map(|k| mask & (1 << k) != 0).collect();
        // Coarse grid: common block level, common group level.
        let mut x = vec![0.0; nb + ng];
        let mut fx = f64::NEG_INFINITY;
        for i in -8..=3 {
            for j in -4..=2 {
                let cand: Vec<f64> = (0..nb)
                    .map(|_| (u_base * 10f64.powi(i)).ln())
                    .chain((0..ng).map(|_| (y_var * 10f64.powi(j)).ln()))
                    .collect();
                let f = eval(&cand, &zero);
                if f > fx {
                    fx = f;
                    x = cand;
                }
            }
        }
        let free: Vec<usize> = (0..nb + ng).filter(|&i| i >= nb || !zero[i]).collect();
        let mut step = 1.0;
        while step >= 1e-6 {
            let mut improved = true;
            while improved {
                improved = false;
                for &i in &free {
                    for dir in [1.0, -1.0] {
                        let mut c = x.clone();
                        c[i] += dir * step;
                        let f = eval(&c, &zero);
                        if f > fx {
                            fx = f;
                            x = c;
                            improved = true;
                        }
                    }
                }
            }
            step *= 0.5;
        }
        if fx > best.0 {
            best = (
                fx,
                (0..nb).map(|k| if zero[k] { 0.0 } else { x[k].exp() }).collect(),
                x[nb..].iter().map(|v| v.exp()).collect(),
            );
        }
    }
    best
}

/// Flags and indices by summing `S_t = e^{-eta t} S_0 + sum_s D_s e^{-eta (t - s)}`
/// directly for every week.
pub fn oracle_risk(doses: &[DoseSeries], c: &Contaminant, burn_in: usize, socio_vars: &[SocioVariable]) -> (Vec<Vec<f64>>, RiskSummary) {
    let eta = c.dissipation();
    let mut all_s = Vec::with_capacity(doses.len());
    let mut members = Vec::with_capacity(doses.len());
    for d in doses {
        let pos: Vec<f64> = d.dose.iter().copied().filter(|v| *v > 0.0).collect();
        let s0 = if pos.is_empty() { 0.0 } else { pos.iter().sum::<f64>() / pos.len() as f64 };
        let s: Vec<f64> = (1..=d.dose.len())
            .map(|t| {
                (-eta * t as f64).exp() * s0
                    + (1..=t).map(|u| d.dose[u - 1] * (-eta * (t - u) as f64).exp()).sum::<f64>()
            })
            .collect();
        let mut first = None;
        for t in 1..=s.len() {
            let reference: f64 = (0..=t).map(|k| c.ptwi * (-eta * k as f64).exp()).sum();
            if t > burn_in && exceeds(s[t - 1], reference) {
                first = Some(t);
                break;
            }
        }
        let active = d.active.iter().any(|a| *a);
        members.push(MemberRisk {
            member_id: d.member.member_id.clone(),
            at_risk: active && first.is_some(),
            first_exceed_week: first.filter(|_| active),
            weeks_above_ptwi: (0..d.dose.len()).filter(|&t| d.active[t] && d.dose[t] > c.ptwi).count(),
            active_weeks: d.active.iter().filter(|a| **a).count(),
        });
        all_s.push(s);
    }
    debug_assert!(reference_exposure(c, None).is_finite());
    (all_s, summarize(doses, members, c, burn_in, "oracle", socio_vars))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helmert_errors_have_exchangeable_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, s2, rho) = (3, 2.0, -0.22);
        let reps = 100_000;
        let mut cov = [[0.0; 3]; 3];
        for _ in 0..reps {
            let e = exchangeable_errors(n, s2, rho, &mut rng);
            for i in 0..n {
                for j in 0..n {
                    cov[i][j] += e[i] * e[j] / reps as f64;
                }
            }
        }
        for i in 0..n {
            assert!((cov[i][i] - s2).abs() < 0.04, "{:?}", cov);
            for j in 0..i {
                assert!((cov[i][j] - s2 * rho).abs() < 0.04, "{:?}", cov);
            }
        }
    }

    #[test]
    fn zero_noise_series_are_member_sums() {
        let cfg = TruthConfig {
            households: 10,
            sigma_eps2: 0.0,
            ..TruthConfig::default()
        };
        let sp = generate(&cfg).unwrap();
        let mut k = 0;
        for (h, s) in sp.panel.households.iter().zip(&sp.panel.intakes) {
            for t in 0..cfg.weeks {
                let sum: f64 = (0..h.members.len()).map(|i| sp.truth.mean[k + i][t]).sum();
                assert_eq!(s.y[t], sum);
            }
            k += h.members.len();
        }
    }

    #[test]
    fn invalid_rho_rejected() {
        let cfg = TruthConfig {
            size_weights: vec![0.2; 6],
            ..TruthConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn piecewise_linear_interpolates() {
        let f = PiecewiseLinear {
            ages: vec![0.0, 10.0],
            values: vec![1.0, 3.0],
        };
        assert_eq!(f.eval(-1.0), 1.0);
        assert_eq!(f.eval(5.0), 2.0);
        assert_eq!(f.eval(20.0), 3.0);
    }

    #[test]
    fn socio_effect_uses_global_numbering() {
        let cfg = TruthConfig::default();
        // all reference
        assert_eq!(cfg.socio_effect(&[4, 5, 5, 3]), 0.0);
        // income well-to-do (g1) + region south-west (g5)
        assert!((cfg.socio_effect(&[1, 2, 5, 3]) - (6.027 + 5.232)).abs() < 1e-12);
        // education no or weak diploma (g13)
        assert!((cfg.socio_effect(&[4, 5, 5, 2]) + 1.281).abs() < 1e-12);
    }
}
