//! Acceptance criteria 1-9. One line per criterion; exits nonzero if any
//! fails. Pass criterion numbers as arguments to run a subset.

use std::path::Path;
use std::time::Instant;

use kdem_core::design::{assemble, DesignSet};
use kdem_core::exposure::{
    accumulate, kdem_series, panel_doses, percentile_curves, reference_exposure, risk_indices, scenario_label,
    DoseSeries, RiskSummary, CURVE_PERCENTILES,
};
use kdem_core::inference::{f_test, hierarchical_tests, lrt_boundary, LinearHypothesis};
use kdem_core::mixed::{
    decompose_fit, decompose_variance, fit_reml, fit_stats, predict_individual,
    FitOptions, FitResult, SuffStats,
};
use kdem_core::model::{Contaminant, Member, ModelSpec, PanelData, Sex, SocioVariable, WEEKS_PER_YEAR};
use kdem_core::report;
use kdem_core::KdemError;
use kdem_core::synth::{self, exchangeable_errors, oracle_reml_maximum, oracle_risk, PiecewiseLinear, TruthConfig};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn response(ds: &DesignSet, panel: &PanelData) -> DVector<f64> {
    DVector::from_fn(ds.n_rows(), |r, _| {
        panel.intakes[ds.row_household[r]].at(ds.row_week[r]) / (ds.row_size[r] as f64).sqrt()
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn c1_reference_exposure() -> Outcome {
    let c = Contaminant::new("MeHg", 6.0, 1.6).unwrap();
    let s = reference_exposure(&c, None);
    outcome((14.6..=14.7).contains(&s), format!("S_ref = {s:.6} (want [14.6, 14.7])"))
}

fn random_doses(rng: &mut ChaCha8Rng, n: usize, weeks: usize) -> Vec<DoseSeries> {
    (0..n)
        .map(|i| {
            let active: Vec<bool> = (0..weeks).map(|_| rng.random_bool(0.97)).collect();
            let sparse = rng.random_bool(0.3);
            let scale = rng.random_range(0.1..3.0);
            let dose: Vec<f64> = (0..weeks)
                .map(|t| {
                    if !active[t] || (sparse && rng.random_bool(0.6)) {
                        0.0
                    } else {
                        scale * rng.random_range(0.0..2.0)
                    }
                })
                .collect();
            DoseSeries {
                member: Member {
                    member_id: format!("m{i}"),
                    household_id: format!("h{i}"),
                    sex: if i % 2 == 0 { Sex::M } else { Sex::F },
                    birth_week: 1 - rng.random_range(20..4700),
                },
                socio: vec![rng.random_range(1..=4), 1, 1, 1],
                dose,
                active,
            }
        })
        .collect()
}

fn c2_recursion_matches_summation() -> Outcome {
    let t0 = Instant::now();
    let c = Contaminant::methylmercury();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let doses = random_doses(&mut rng, 1000, 53);
    let (slow, _) = oracle_risk(&doses, &c, c.default_burn_in(), &[]);
    let mut worst: f64 = 0.0;
    for (d, s) in doses.iter().zip(&slow) {
        let fast = kdem_series(d, &c, c.default_burn_in());
        for (a, b) in fast.s.iter().zip(s) {
            if *b != 0.0 || *a != 0.0 {
                worst = worst.max(rel_err(*a, *b));
            }
        }
    }
    let r = c.retention();
    let mut worst_const: f64 = 0.0;
    for d in [0.01, 0.5, 1.6, 3.2, 10.0] {
        let s = accumulate(d, &[d; 53], r);
        for t in 1..=53 {
            let closed = d * (1.0 - r.powi(t as i32 + 1)) / (1.0 - r);
            worst_const = worst_const.max(rel_err(s[t - 1], closed));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && worst_const <= 1e-10 && secs < 5.0,
        format!(
            "1000 series: max rel err {worst:.2e} (<= 1e-9); constant dose: {worst_const:.2e} (<= 1e-10); {secs:.2}s (< 5s)"
        ),
    )
}

fn c3_geometric_contraction() -> Outcome {
    let c = Contaminant::methylmercury();
    let r = c.retention();
    let want = 2f64.powf(-1.0 / 6.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dose: Vec<f64> = (0..53).map(|_| rng.random_range(0.0..4.0)).collect();
        let (a0, b0) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
        let a = accumulate(a0, &dose, r);
        let b = accumulate(b0, &dose, r);
        let mut prev = a0 - b0;
        for t in 0..53 {
            let gap = a[t] - b[t];
            worst = worst.max((gap - want * prev).abs());
            prev = gap;
        }
    }
    outcome(
        worst <= 1e-12 && (r - want).abs() <= 1e-15,
        format!("max per-step deviation from 2^(-1/6) contraction {worst:.2e} (<= 1e-12)"),
    )
}

fn c4_reml_oracle() -> Outcome {
    let t0 = Instant::now();
    let spec = ModelSpec {
        max_knots: 3,
        ..ModelSpec::default()
    };
    let mut worst_ll = f64::INFINITY;
    let mut worst_gls: f64 = 0.0;
    let mut knots_ok = true;
    let mut errors = Vec::new();
    // Tiny panels sometimes alias a modality with other columns; such
    // designs have no REML solution and must be rejected as collinear.
    let (mut instances, mut aliased, mut seed) = (0, 0, 0);
    while instances < 10 && seed < 100 {
        seed += 1;
        let cfg = TruthConfig {
            households: 20,
            weeks: 4,
            sigma_eps2: 400.0,
            seed,
            ..TruthConfig::default()
        };
        let sp = synth::generate(&cfg).unwrap();
        let ds = match assemble(&sp.panel, &spec) {
            Ok(d) => d,
            Err(e) => {
                errors.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        knots_ok &= ds.meta.bases.len() == 2 && ds.meta.bases.iter().all(|b| b.len() == 3);
        let fit = match fit_reml(&ds) {
            Ok(f) => f,
            Err(KdemError::Numerical(m)) if m.contains("collinear") => {
                aliased += 1;
                continue;
            }
            Err(e) => {
                errors.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        instances += 1;
        let (oracle_max, _, _) = oracle_reml_maximum(&ds);
        worst_ll = worst_ll.min(fit.loglik - oracle_max);
        let gls = synth::oracle_gls(&ds, &fit.sigma_u2, &fit.sigma_n2);
        for (a, b) in fit.fixed.iter().zip(&gls) {
            worst_gls = worst_gls.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        errors.is_empty() && instances == 10 && knots_ok && worst_ll >= -1e-6 && worst_gls <= 1e-8 && secs < 30.0,
        format!(
            "{instances} instances H=20 T=4 K=3+3 ({aliased} aliased designs rejected): min(fit - oracle max) {worst_ll:.3e} (>= -1e-6); GLS max rel diff {worst_gls:.2e} (<= 1e-8); {secs:.1}s (< 30s){}",
            if errors.is_empty() { String::new() } else { format!("; errors: {}", errors.join(" | ")) }
        ),
    )
}

fn c5_decomposition() -> Outcome {
    let (s2, rho) = (1_260_705.0, -0.22);
    let sizes: Vec<f64> = (1..=6).map(f64::from).collect();
    let sn2: Vec<f64> = sizes.iter().map(|n| s2 * (1.0 + (n - 1.0) * rho)).collect();
    let d = decompose_variance(&sn2, &sizes, &[100; 6], None).unwrap();
    let inv_err = rel_err(d.sigma_eps2, s2).max(rel_err(d.rho, rho));
    let consistent_6 = d.check_sizes(&sizes).is_err();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    for n in 1..=5usize {
        let mut acc = 0.0;
        for _ in 0..draws {
            let e = exchangeable_errors(n, s2, rho, &mut rng);
            let scaled = e.iter().sum::<f64>() / (n as f64).sqrt();
            acc += scaled * scaled;
        }
        let want = s2 * (1.0 + (n as f64 - 1.0) * rho);
        worst = worst.max(rel_err(acc / draws as f64, want));
    }
    outcome(
        inv_err <= 1e-9 && worst <= 0.02 && consistent_6,
        format!(
            "n=1..6 inversion rel err {inv_err:.2e} (<= 1e-9), n=6 flagged as a negative household variance: {consistent_6}; Monte Carlo n=1..5, 1e5 draws: max rel dev {:.2}% (<= 2%)",
            100.0 * worst
        ),
    )
}

/// Fitted and true age curves of `sex` at the reference week and socio
/// codes, as `(fitted, truth)` pairs.
fn curve_pairs(cfg: &TruthConfig, fit: &FitResult, sex: Sex, ages: &[f64]) -> Vec<(f64, f64)> {
    let meta = &fit.meta;
    let week = meta.reference_week;
    let reference: Vec<u32> = meta.socio_coding.iter().map(|c| c.reference[0]).collect();
    let alpha = cfg.week_effects()[week - 1];
    ages.iter()
        .map(|&a| {
            let m = Member {
                member_id: "curve".into(),
                household_id: "curve".into(),
                sex,
                birth_week: week as i64 - (a * WEEKS_PER_YEAR).round() as i64,
            };
            let x = meta.individual_fixed(&m, week, &reference);
            let z = meta.individual_random(&m, week);
            let fitted = x.iter().zip(&fit.fixed).map(|(p, q)| p * q).sum::<f64>()
                + z.iter().zip(&fit.u_blup).map(|(p, q)| p * q).sum::<f64>();
            (fitted, cfg.curve(sex, m.age_at(week as i64)) + alpha)
        })
        .collect()
}

fn curve_rmse(cfg: &TruthConfig, fit: &FitResult) -> f64 {
    let ages: Vec<f64> = (2..=80).map(f64::from).collect();
    let pairs: Vec<(f64, f64)> = [Sex::M, Sex::F]
        .into_iter()
        .flat_map(|s| curve_pairs(cfg, fit, s, &ages))
        .collect();
    (pairs.iter().map(|(f, t)| (f - t).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt()
}

fn c6_recovery() -> Outcome {
    let t0 = Instant::now();
    let cfg = TruthConfig::default();
    let sp = synth::generate(&cfg).unwrap();
    let spec = ModelSpec::default();
    let ds = assemble(&sp.panel, &spec).unwrap();
    let stats = SuffStats::from_design(&ds);
    let idx: Vec<usize> = (1..=cfg.gamma.len())
        .map(|k| ds.meta.fixed_index(&format!("g{k}")).expect("every modality present"))
        .collect();
    let reps = 1000u64;
    let mut cover = vec![0usize; idx.len()];
    let mut failed = 0;
    for r in 0..reps {
        let s = synth::redraw(&sp, &cfg, 10_000 + r);
        let st = stats.with_response(&ds, &response(&ds, &s.panel));
        let Ok(fit) = fit_stats(&st, &ds.meta, &FitOptions::default()) else {
            failed += 1;
            continue;
        };
        let se = fit.fixed_se();
        for (k, &i) in idx.iter().enumerate() {
            if (fit.fixed[i] - cfg.gamma[k]).abs() <= 1.96 * se[i] {
                cover[k] += 1;
            }
        }
    }
    let rates: Vec<f64> = cover.iter().map(|c| *c as f64 / reps as f64).collect();
    let coverage_ok = rates.iter().all(|r| (0.93..=0.97).contains(r));

    let levels = [1_260_705.0, 126_070.5, 12_607.05, 1_260.705];
    let mut rmse = Vec::new();
    for (li, &s2) in levels.iter().enumerate() {
        let c = TruthConfig {
            sigma_eps2: s2,
            ..cfg.clone()
        };
        let mut acc = 0.0;
        let n = 10;
        for r in 0..n {
            let s = synth::redraw(&sp, &c, 50_000 + 100 * li as u64 + r);
            let st = stats.with_response(&ds, &response(&ds, &s.panel));
            match fit_stats(&st, &ds.meta, &FitOptions::default()) {
                Ok(fit) => acc += curve_rmse(&c, &fit),
                Err(_) => {
                    failed += 1;
                    acc = f64::NAN;
                }
            }
        }
        rmse.push(acc / n as f64);
    }
    let monotone = rmse.windows(2).all(|w| w[1] < w[0]);
    let secs = t0.elapsed().as_secs_f64();
    let (lo, hi) = rates
        .iter()
        .fold((1.0f64, 0.0f64), |(lo, hi), r| (lo.min(*r), hi.max(*r)));
    outcome(
        coverage_ok && monotone && failed == 0,
        format!(
            "1000 replicates H=200 T=53: gamma coverage in [{:.1}%, {:.1}%] (want 95 +- 2%) {:?}; curve RMSE by noise {:?} (decreasing); failed fits {failed}; {secs:.0}s",
            100.0 * lo,
            100.0 * hi,
            rates.iter().map(|r| (r * 1000.0).round() / 10.0).collect::<Vec<_>>(),
            rmse.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
        ),
    )
}

fn c7_calibration() -> Outcome {
    let t0 = Instant::now();
    let mut gamma = TruthConfig::default().gamma;
    gamma[..3].fill(0.0);
    let cfg = TruthConfig {
        households: 100,
        weeks: 20,
        gamma,
        f_male: PiecewiseLinear::linear(10.0, 0.8),
        f_female: PiecewiseLinear::linear(8.0, 0.6),
        seed: 7,
        ..TruthConfig::default()
    };
    let sp = synth::generate(&cfg).unwrap();
    let spec = ModelSpec {
        max_knots: 10,
        ..ModelSpec::default()
    };
    let ds = assemble(&sp.panel, &spec).unwrap();
    let stats = SuffStats::from_design(&ds);
    let hyp = LinearHypothesis::parse("income", "g1=g2=g3=0", &ds.meta.fixed_names).unwrap();
    let null = FitOptions {
        sigma_u2: Some(vec![0.0]),
        ..FitOptions::default()
    };
    let reps = 1000u64;
    let (mut f_rej, mut b_rej, mut at_zero, mut failed) = (0, 0, 0, 0);
    for r in 0..reps {
        let s = synth::redraw(&sp, &cfg, 20_000 + r);
        let st = stats.with_response(&ds, &response(&ds, &s.panel));
        let (Ok(full), Ok(reduced)) = (
            fit_stats(&st, &ds.meta, &FitOptions::default()),
            fit_stats(&st, &ds.meta, &null),
        ) else {
            failed += 1;
            continue;
        };
        f_rej += f_test(&full, &hyp).unwrap().reject as usize;
        let b = lrt_boundary(&full, &reduced, "sigma_u2=0").unwrap();
        b_rej += b.reject as usize;
        at_zero += (b.statistic == 0.0) as usize;
    }
    let fr = f_rej as f64 / reps as f64;
    let br = b_rej as f64 / reps as f64;
    let ok = |r: f64| (0.034..=0.066).contains(&r);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        ok(fr) && ok(br) && failed == 0,
        format!(
            "1000 null replicates H=100 T=20: f_test rejects {:.1}%, lrt_boundary rejects {:.1}% (want 5 +- 1.6%); statistic exactly 0 in {:.1}% (mixture assumes 50%); failed fits {failed}; {secs:.0}s",
            100.0 * fr,
            100.0 * br,
            100.0 * at_zero as f64 / reps as f64
        ),
    )
}

fn c8_risk_oracle() -> Outcome {
    let c = Contaminant::methylmercury();
    let vars = SocioVariable::panel_defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut populations: Vec<Vec<DoseSeries>> = (0..200)
        .map(|i| random_doses(&mut rng, 20 + i % 50, 53))
        .collect();
    for seed in 1..=3 {
        let sp = synth::generate(&TruthConfig {
            households: 100,
            seed,
            sigma_eps2: 2500.0,
            ..TruthConfig::default()
        })
        .unwrap();
        let fit = fit_reml(&assemble(&sp.panel, &ModelSpec::default()).unwrap()).unwrap();
        let intakes = predict_individual(&fit, &sp.panel).unwrap();
        populations.push(panel_doses(&intakes, &sp.panel).unwrap());
    }
    let mut mismatches = 0;
    let mut planted_missed = 0;
    for pop in &mut populations {
        let weeks = pop[0].dose.len();
        let mut planted = pop[0].clone();
        planted.member.member_id = "planted".into();
        planted.dose = vec![2.0 * c.ptwi; weeks];
        planted.active = vec![true; weeks];
        pop.push(planted);
        let (_, fast) = risk_indices(pop, &c, c.default_burn_in(), "x", &vars);
        let (_, slow) = oracle_risk(pop, &c, c.default_burn_in(), &vars);
        if fast.members != slow.members || fast.subgroups != slow.subgroups {
            mismatches += 1;
        }
        if !fast.members.last().unwrap().at_risk {
            planted_missed += 1;
        }
    }
    let zero: Vec<DoseSeries> = populations[0]
        .iter()
        .map(|d| DoseSeries {
            dose: vec![0.0; d.dose.len()],
            ..d.clone()
        })
        .collect();
    let (_, z) = risk_indices(&zero, &c, c.default_burn_in(), "zero", &vars);
    let zero_ok = z.long_term_risk == Some(0.0) && z.r_ptwi == 0.0;
    outcome(
        mismatches == 0 && planted_missed == 0 && zero_ok,
        format!(
            "{} populations: flag mismatches {mismatches}, planted 2*PTWI missed {planted_missed}, all-zero indices (LTR {:?}, R {}) ",
            populations.len(),
            z.long_term_risk,
            z.r_ptwi
        ),
    )
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

fn scenario(
    fit: &FitResult,
    panel: &PanelData,
    outside: Option<f64>,
    edible: Option<f64>,
) -> (Vec<DoseSeries>, Vec<kdem_core::exposure::ExposureSeries>, RiskSummary) {
    let c = Contaminant::methylmercury();
    let intakes = predict_individual(fit, panel).unwrap();
    let scaled = kdem_core::exposure::apply_corrections(&intakes, outside, edible).unwrap();
    let doses = panel_doses(&scaled, panel).unwrap();
    let (series, summary) = risk_indices(&doses, &c, c.default_burn_in(), &scenario_label(outside, edible), &panel.socio_vars);
    (doses, series, summary)
}

const HEAVY: f64 = 1.35;

fn c9_reports_and_scenarios() -> Outcome {
    // Heavier consumers than the default truth, so that the base scenario
    // has members at risk and both directions are observable.
    let heavy = |mut f: PiecewiseLinear| {
        f.values.iter_mut().for_each(|v| *v *= HEAVY);
        f
    };
    let base_cfg = TruthConfig::default();
    let cfg = TruthConfig {
        sigma_eps2: 12_607.05,
        f_male: heavy(base_cfg.f_male.clone()),
        f_female: heavy(base_cfg.f_female.clone()),
        ..base_cfg
    };
    let sp = synth::generate(&cfg).unwrap();
    let hier = hierarchical_tests(&sp.panel, &ModelSpec::default()).unwrap();
    let fit = &hier.fit;
    let decomp = decompose_fit(fit).ok();
    let dir = tempfile::tempdir().unwrap();
    let (p2, p3, p4, pf) = (
        dir.path().join("estimates.csv"),
        dir.path().join("final.csv"),
        dir.path().join("tests.csv"),
        dir.path().join("curves.csv"),
    );
    report::write_estimates_table(&p2, fit).unwrap();
    report::write_final_table(&p3, fit, decomp.as_ref()).unwrap();
    let tests = hier.reported_tests();
    report::write_tests_table(&p4, &tests).unwrap();
    let (doses, series, base) = scenario(fit, &sp.panel, None, None);
    let c = Contaminant::methylmercury();
    percentile_curves(&series, &doses, &c).write_csv(&pf).unwrap();

    let mut problems = Vec::new();
    let t2 = read_rows(&p2);
    let want_rows = 1 + fit
        .meta
        .socio_coding
        .iter()
        .map(|c| 1 + c.levels.len())
        .sum::<usize>();
    if t2[0] != ["effect", "parameter", "estimate", "p_value"] || t2.len() != want_rows {
        problems.push(format!("estimates table: header {:?}, {} rows (want {want_rows})", t2[0], t2.len()));
    }
    if !t2[1][0].contains("(ref: ") {
        problems.push("estimates table lacks reference header rows".into());
    }
    let t3 = read_rows(&p3);
    let labels: Vec<&str> = t3.iter().map(|r| r[0].as_str()).collect();
    let tail_ok = labels.contains(&"Variance of the random effect")
        && (decomp.is_none() || labels.ends_with(&["Variance-covariance structure", "variance", "correlation"]));
    if t3[0] != ["effect", "parameter", "estimate", "p_value", "se"] || !tail_ok || decomp.is_none() {
        problems.push(format!("final table rows {labels:?}, decomposition {}", decomp.is_some()));
    }
    let t4 = read_rows(&p4);
    let h_ok = t4[1..]
        .iter()
        .enumerate()
        .all(|(i, r)| r.len() == 2 && r[0].starts_with(&format!("H{} : ", i + 1)));
    if t4[0] != ["null_hypothesis", "p_value"] || !h_ok || t4.len() < 2 {
        problems.push(format!("tests table: {:?}", t4));
    }
    let f1 = read_rows(&pf);
    let mut want_header = vec!["week".to_string()];
    want_header.extend(CURVE_PERCENTILES.iter().map(|p| p.1.to_string()));
    want_header.push("Sref".into());
    if f1[0] != want_header || f1.len() != 1 + sp.panel.weeks {
        problems.push(format!("curves: header {:?}, {} rows", f1[0], f1.len()));
    }

    let (_, _, outside) = scenario(fit, &sp.panel, Some(0.2), None);
    let (_, _, edible) = scenario(fit, &sp.panel, None, Some(0.61));
    let ltr = |s: &RiskSummary| s.long_term_risk.unwrap_or(f64::NAN);
    let up = ltr(&outside) > ltr(&base) && outside.r_ptwi > base.r_ptwi;
    let down = ltr(&edible) < ltr(&base) && edible.r_ptwi < base.r_ptwi;
    if !up || !down {
        problems.push("scenario directions".into());
    }
    outcome(
        problems.is_empty(),
        format!(
            "tables {} rows / {} rows / {} tests, curves {}x{}; long-term risk / R_1.6: base {:.3}% / {:.3}%, outside 0.2 {:.3}% / {:.3}%, edible 0.61 {:.3}% / {:.3}%{}",
            t2.len() - 1,
            t3.len() - 1,
            t4.len() - 1,
            f1.len() - 1,
            f1[0].len(),
            100.0 * ltr(&base),
            100.0 * base.r_ptwi,
            100.0 * ltr(&outside),
            100.0 * outside.r_ptwi,
            100.0 * ltr(&edible),
            100.0 * edible.r_ptwi,
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join(" | ")) }
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    if !args.is_empty() && selected.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("reference exposure", c1_reference_exposure),
        ("recursion vs direct summation", c2_recursion_matches_summation),
        ("geometric contraction", c3_geometric_contraction),
        ("REML oracle equivalence", c4_reml_oracle),
        ("variance decomposition inversion", c5_decomposition),
        ("recovery study", c6_recovery),
        ("test calibration", c7_calibration),
        ("risk-index oracle", c8_risk_oracle),
        ("report shapes and scenario directions", c9_reports_and_scenarios),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let o = run();
        println!("criterion {id} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
