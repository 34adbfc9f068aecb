use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdem_core::design::{assemble, DesignSet};
use kdem_core::exposure::{
    apply_corrections, panel_doses, percentile_curves, reference_exposure, risk_indices, scenario_label, RiskSummary,
};
use kdem_core::inference::{
    f_test, gender_curve_test, hierarchical_tests, read_hypotheses, rho_test, spline_variance_test, TestReport,
};
use kdem_core::ingest::{load_panel, write_panel_dir, ContaminationUnit, IngestConfig, ValidationReport};
use kdem_core::mixed::{decompose_fit, fit_reml, predict_individual, FitResult, VarianceDecomposition};
use kdem_core::model::{Contaminant, ModelSpec, PanelData};
use kdem_core::synth::{self, TruthConfig};
use kdem_core::{report, KdemError};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "kdem", version, about = "Household purchase disaggregation and kinetic exposure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load an input directory and print a validation report.
    Validate {
        dir: PathBuf,
        #[command(flatten)]
        ingest: IngestArgs,
    },
    /// Draw a synthetic panel and write it as an input directory.
    Simulate {
        /// Truth configuration (JSON); defaults fill missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        households: Option<usize>,
        #[arg(long)]
        weeks: Option<usize>,
    },
    /// Fit the household mixed model by REML.
    Fit {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ingest: IngestArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Design matrix with a metadata header row.
        #[arg(long)]
        dump_design: Option<PathBuf>,
        /// Spline knots as `sex,k,knot`.
        #[arg(long)]
        dump_basis: Option<PathBuf>,
        /// Directory for the estimate and final-model tables.
        #[arg(long)]
        dump_tables: Option<PathBuf>,
    },
    /// F-tests of linear hypotheses on a saved fit.
    Test {
        fit: PathBuf,
        /// CSV with columns `label,hypothesis`, e.g. `income,g1=g2=g3=0`.
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split the group residual variances into sigma^2 and rho.
    Decompose {
        fit: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Individual intakes, body burden and risk indices.
    Expose {
        fit: PathBuf,
        dir: PathBuf,
        #[command(flatten)]
        ingest: IngestArgs,
        #[command(flatten)]
        exposure: ExposureArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Stepwise modality merging, then every table, curve and index into one directory.
    Report {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ingest: IngestArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        exposure: ExposureArgs,
    },
}

#[derive(Args)]
struct IngestArgs {
    /// Unit of the contamination table levels.
    #[arg(long, default_value = "mg_per_kg", value_parser = parse_unit)]
    contamination_unit: ContaminationUnit,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 35)]
    max_knots: usize,
    /// Households of this size or larger share one residual variance.
    #[arg(long, default_value_t = 6)]
    max_group_size: usize,
    #[arg(long, default_value_t = 1)]
    reference_week: usize,
    /// One age curve for both sexes.
    #[arg(long)]
    pooled_sexes: bool,
    /// Separate spline variances for males and females.
    #[arg(long)]
    separate_penalties: bool,
}

#[derive(Args)]
struct ExposureArgs {
    #[arg(long, default_value_t = 6.0)]
    half_life: f64,
    #[arg(long, default_value_t = 1.6)]
    ptwi: f64,
    /// Share of consumption eaten outside the home (scales intakes up).
    #[arg(long)]
    outside: Option<f64>,
    /// Edible fraction of purchased weight (scales intakes down).
    #[arg(long)]
    edible: Option<f64>,
    /// Weeks before which exceedances are ignored; defaults to six half-lives.
    #[arg(long)]
    burn_in: Option<usize>,
}

fn parse_unit(s: &str) -> Result<ContaminationUnit, String> {
    s.parse().map_err(|e: KdemError| e.to_string())
}

impl IngestArgs {
    fn config(&self) -> IngestConfig {
        IngestConfig {
            unit: self.contamination_unit,
        }
    }
}

impl ModelArgs {
    fn spec(&self) -> ModelSpec {
        ModelSpec {
            gender_split: !self.pooled_sexes,
            shared_penalty: !self.separate_penalties,
            max_group_size: self.max_group_size,
            reference_week: self.reference_week,
            max_knots: self.max_knots,
            ..ModelSpec::default()
        }
    }
}

impl ExposureArgs {
    fn contaminant(&self) -> kdem_core::Result<Contaminant> {
        Contaminant::new("methylmercury", self.half_life, self.ptwi)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> KdemError + '_ {
    move |source| KdemError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> kdem_core::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(dir: &Path) -> kdem_core::Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_basis(path: &Path, design: &DesignSet) -> kdem_core::Result<()> {
    let mut out = String::from("sex,k,knot\n");
    for b in &design.meta.bases {
        let sex = b.sex.map_or("both", |s| s.as_str());
        for (k, knot) in b.knots.iter().enumerate() {
            out.push_str(&format!("{sex},{},{knot}\n", k + 1));
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

fn print_fit(fit: &FitResult) {
    println!(
        "REML fit: {} rows, {} fixed, {} random; restricted log-likelihood {:.6}",
        fit.n_rows,
        fit.fixed.len(),
        fit.u_blup.len(),
        fit.loglik
    );
    for (b, v) in fit.meta.random_blocks.iter().zip(&fit.sigma_u2) {
        println!("  spline variance {}: {v:.6e}", b.label);
    }
    for (g, v) in fit.meta.groups.iter().zip(&fit.sigma_n2) {
        println!("  residual variance {} ({} rows): {v:.6e}", g.label, g.rows);
    }
}

fn print_tests(tests: &[TestReport]) {
    for t in tests {
        println!(
            "  {}: {} stat {:.4} df {}{} p {:.4e}{}",
            t.label,
            t.hypothesis,
            t.statistic,
            t.df1,
            t.df2.map(|d| format!(",{d}")).unwrap_or_default(),
            t.p_value,
            if t.reject { " (rejected)" } else { "" }
        );
    }
}

fn print_decomposition(d: &VarianceDecomposition) {
    let se = |v: Option<f64>| v.map_or("n/a".to_string(), |s| format!("{s:.4e}"));
    println!("sigma^2 = {:.6e} (se {})", d.sigma_eps2, se(d.se_sigma_eps2));
    println!("rho     = {:.6} (se {})", d.rho, se(d.se_rho));
}

fn print_risk(s: &RiskSummary) {
    let pct = |v: f64| format!("{:.3}%", 100.0 * v);
    println!(
        "{}: {} individuals, {} at risk; long-term risk {}; R_{} {}",
        s.scenario,
        s.individuals,
        s.at_risk,
        s.long_term_risk.map_or("undefined".into(), pct),
        s.ptwi,
        pct(s.r_ptwi)
    );
    if let Some(c) = s.children_1_3 {
        println!("  children 1-3 at risk: {}", pct(c));
    }
}

/// Doses and risk for one scenario; prints the run header.
fn expose_panel(
    fit: &FitResult,
    panel: &PanelData,
    args: &ExposureArgs,
    out: Option<&Path>,
    curves: Option<&Path>,
) -> kdem_core::Result<RiskSummary> {
    let c = args.contaminant()?;
    let burn_in = args.burn_in.unwrap_or_else(|| c.default_burn_in());
    println!(
        "half-life {} weeks, PTWI {}: S^ref = {:.4}, burn-in {burn_in} weeks",
        c.half_life_weeks,
        c.ptwi,
        reference_exposure(&c, None)
    );
    let intakes = predict_individual(fit, panel)?;
    let negative = intakes.negative_count();
    if negative > 0 {
        log::warn!("{negative} predicted member-week intakes are negative and count as zero dose");
    }
    let intakes = apply_corrections(&intakes, args.outside, args.edible)?;
    let doses = panel_doses(&intakes, panel)?;
    let label = scenario_label(args.outside, args.edible);
    let (series, summary) = risk_indices(&doses, &c, burn_in, &label, &panel.socio_vars);
    print_risk(&summary);
    if let Some(path) = out {
        write_json(path, &summary)?;
    }
    if let Some(path) = curves {
        percentile_curves(&series, &doses, &c).write_csv(path)?;
    }
    Ok(summary)
}

fn run(cli: Cli) -> kdem_core::Result<()> {
    match cli.command {
        Command::Validate { dir, ingest } => {
            let panel = load_panel(&dir, &ingest.config())?;
            println!("{}", ValidationReport::of(&panel));
        }
        Command::Simulate {
            config,
            out,
            seed,
            households,
            weeks,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                    serde_json::from_str::<TruthConfig>(&text)?
                }
                None => TruthConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.households = households.unwrap_or(cfg.households);
            if let Some(w) = weeks {
                cfg.weeks = w;
            }
            let sp = synth::generate(&cfg)?;
            write_panel_dir(&out, &sp.panel, &synth::purchases(&sp.panel))?;
            write_json(&out.join("truth.json"), &cfg)?;
            println!(
                "wrote {} households over {} weeks to {}",
                sp.panel.households.len(),
                sp.panel.weeks,
                out.display()
            );
        }
        Command::Fit {
            dir,
            out,
            ingest,
            model,
            dump_design,
            dump_basis,
            dump_tables,
        } => {
            let panel = load_panel(&dir, &ingest.config())?;
            let design = assemble(&panel, &model.spec())?;
            if let Some(path) = &dump_design {
                let ids: Vec<String> = panel.households.iter().map(|h| h.household_id.clone()).collect();
                design.write_csv(path, &ids)?;
            }
            if let Some(path) = &dump_basis {
                write_basis(path, &design)?;
            }
            let fit = fit_reml(&design)?;
            print_fit(&fit);
            fit.save(&out)?;
            if let Some(tables) = &dump_tables {
                create_dir(tables)?;
                let decomposition = decompose_fit(&fit)
                    .inspect_err(|e| log::warn!("no variance decomposition: {e}"))
                    .ok();
                report::write_estimates_table(&tables.join("estimates.csv"), &fit)?;
                report::write_final_table(&tables.join("final_model.csv"), &fit, decomposition.as_ref())?;
                report::write_fixed_effects(&tables.join("fixed_effects.csv"), &fit)?;
            }
        }
        Command::Test { fit, hypotheses, out } => {
            let fit = FitResult::load(&fit)?;
            let hyps = read_hypotheses(&hypotheses, &fit.meta.fixed_names)?;
            let tests = hyps.iter().map(|h| f_test(&fit, h)).collect::<kdem_core::Result<Vec<_>>>()?;
            print_tests(&tests);
            if let Some(path) = out {
                report::write_test_reports(&path, &tests)?;
            }
        }
        Command::Decompose { fit, out } => {
            let fit = FitResult::load(&fit)?;
            let d = decompose_fit(&fit)?;
            print_decomposition(&d);
            let rho = rho_test(&d)?;
            print_tests(std::slice::from_ref(&rho));
            if let Some(path) = out {
                write_json(&path, &d)?;
            }
        }
        Command::Expose {
            fit,
            dir,
            ingest,
            exposure,
            out,
            curves,
        } => {
            let fit = FitResult::load(&fit)?;
            let panel = load_panel(&dir, &ingest.config())?;
            expose_panel(&fit, &panel, &exposure, out.as_deref(), curves.as_deref())?;
        }
        Command::Report {
            dir,
            out,
            ingest,
            model,
            exposure,
        } => {
            let panel = load_panel(&dir, &ingest.config())?;
            let spec = model.spec();
            create_dir(&out)?;
            let hier = hierarchical_tests(&panel, &spec)?;
            let fit = &hier.fit;
            print_fit(fit);
            let decomposition = decompose_fit(fit)
                .inspect_err(|e| log::warn!("no variance decomposition: {e}"))
                .ok();
            if let Some(d) = &decomposition {
                print_decomposition(d);
            }
            let reported = hier.reported_tests();
            print_tests(&reported);

            let final_spec = ModelSpec {
                socio_coding: Some(hier.coding.clone()),
                ..spec.clone()
            };
            let mut details: Vec<TestReport> = hier.steps.iter().flat_map(|s| s.tests.clone()).collect();
            details.extend(hier.overall.clone());
            details.push(spline_variance_test(fit, &assemble(&panel, &final_spec)?)?);
            details.push(gender_curve_test(&panel, &final_spec)?);
            if let Some(d) = &decomposition {
                details.push(rho_test(d)?);
            }

            fit.save(&out.join("fit.json"))?;
            report::write_estimates_table(&out.join("estimates.csv"), &hier.initial)?;
            report::write_final_table(&out.join("final_model.csv"), fit, decomposition.as_ref())?;
            report::write_tests_table(&out.join("tests.csv"), &reported)?;
            report::write_test_reports(&out.join("test_details.csv"), &details)?;
            report::write_fixed_effects(&out.join("fixed_effects.csv"), fit)?;
            expose_panel(
                fit,
                &panel,
                &exposure,
                Some(&out.join("risk.json")),
                Some(&out.join("curves.csv")),
            )?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn configure_threads() {
    let Ok(v) = std::env::var("KDEM_THREADS") else {
        return;
    };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("KDEM_THREADS ignored: {e}");
            }
        }
        _ => log::warn!("KDEM_THREADS must be a positive integer, got {v:?}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::from(EXIT_NUMERICAL)
            }
        }
    }
}
