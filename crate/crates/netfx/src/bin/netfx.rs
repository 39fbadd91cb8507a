//! Command-line front end: estimation from CSV data, allocation sweeps,
//! scenario simulation, and Monte-Carlo studies.

use clap::{Args, Parser, Subcommand};
use netfx::config::{EstimatorKind, RunConfig};
use netfx::data::{load_dataset, write_csv, IngestSchema};
use netfx::error::{Error, Result};
use netfx::estimand::{Allocation, EstimandSpec, PolicyAllocation, SpecKind};
use netfx::estimator::{
    aipw_estimate, crossfit_estimate_detailed, crossfit_eval, fit_and_estimate,
    EstimatorOptions,
};
use netfx::numeric::normal_quantile;
use netfx::simulate::{
    glmm_mc_study, noint_variance_study, simulate_glmm, simulate_noint, GlmmEstimand,
    GlmmScenario, GlmmSpecSwitches,
};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "netfx",
    about = "Direct and spillover treatment effects in clustered data under partial interference",
    version
)]
struct Cli {
    /// Worker threads (falls back to NETFX_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the configured effect from a CSV dataset.
    Estimate(EstimateArgs),
    /// Sweep the allocation grid and write one row of estimates per point.
    Sweep(SweepArgs),
    /// Simulate a scenario and write the dataset CSV.
    Simulate(SimulateArgs),
    /// Replicate a scenario study and write bias/SE/coverage rows.
    McStudy(McStudyArgs),
    /// Validate a dataset (and optionally a config) without estimating.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV: cluster_id,unit_id,y,a,x1,...,xd[,type]
    #[arg(long)]
    data: PathBuf,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Write the result JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Grid per type dimension, `start:stop:count`, comma-separated; one
    /// entry broadcasts to every type.
    #[arg(long)]
    grid: String,
    /// Output CSV (defaults to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario: `glmm` or `noint`.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Treatment probability for the `noint` scenario.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct McStudyArgs {
    /// Scenario: `glmm` or `noint`.
    #[arg(long)]
    scenario: String,
    /// Nuisance switches for the glmm scenario, e.g. `CO,CP,CT`.
    #[arg(long, default_value = "CO,CP,CT")]
    spec: String,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Direct-effect allocation (glmm scenario).
    #[arg(long, default_value_t = 0.4)]
    de_alpha: f64,
    /// Indirect-effect allocations (glmm scenario).
    #[arg(long, default_value_t = 0.8)]
    ie_alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    ie_alpha_prime: f64,
    /// Treatment probability (noint scenario).
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// Allocation grid `start:stop:count` (noint scenario).
    #[arg(long, default_value = "0.05:0.95:19")]
    alpha_grid: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("NETFX_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) | Error::Parse { .. } | Error::Json(_) => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::McStudy(args) => cmd_mc_study(args),
        Command::Validate(args) => cmd_validate(args),
    }
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let config = RunConfig::from_path(&args.config)?;
    let data = load_dataset(&args.data, &config.ingest_schema())?;
    config.validate_against(&data)?;
    let spec = config.build_spec()?;
    let plan = config.build_plan()?;
    let p = config.proportions(&data)?;
    let opts = EstimatorOptions {
        level: config.level,
        ..EstimatorOptions::default()
    };
    let result = match config.estimator.kind {
        EstimatorKind::Aipw | EstimatorKind::Ipw => {
            fit_and_estimate(&data, &plan, &spec, &p, &opts)?
        }
        EstimatorKind::Crossfit => {
            crossfit_estimate_detailed(&data, &plan, &spec, &p, &opts, config.estimator.seed)?
                .result
        }
    };
    let json = serde_json::to_string_pretty(&result)?;
    println!("{json}");
    if let Some(path) = args.out {
        std::fs::write(path, format!("{json}\n"))?;
    }
    Ok(())
}

fn parse_grid_axis(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "grid axis must be start:stop:count, got `{text}`"
        )));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|_| Error::Config(format!("bad grid start `{}`", parts[0])))?;
    let stop: f64 = parts[1]
        .parse()
        .map_err(|_| Error::Config(format!("bad grid stop `{}`", parts[1])))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| Error::Config(format!("bad grid count `{}`", parts[2])))?;
    if count == 0 {
        return Err(Error::Config("grid count must be positive".into()));
    }
    let axis: Vec<f64> = if count == 1 {
        vec![start]
    } else {
        (0..count)
            .map(|i| start + (stop - start) * i as f64 / (count - 1) as f64)
            .collect()
    };
    if axis.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Config(format!(
            "grid `{text}` leaves the open interval (0, 1)"
        )));
    }
    Ok(axis)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let config = RunConfig::from_path(&args.config)?;
    let data = load_dataset(&args.data, &config.ingest_schema())?;
    config.validate_against(&data)?;
    let base_spec = config.build_spec()?;
    let plan = config.build_plan()?;
    let p = config.proportions(&data)?;
    let opts = EstimatorOptions {
        level: config.level,
        ..EstimatorOptions::default()
    };
    let type_ids: Vec<usize> = data.types().keys().copied().collect();

    let axes: Vec<Vec<f64>> = args
        .grid
        .split(',')
        .map(parse_grid_axis)
        .collect::<Result<_>>()?;
    let axes: Vec<Vec<f64>> = if axes.len() == 1 {
        vec![axes[0].clone(); type_ids.len()]
    } else if axes.len() == type_ids.len() {
        axes
    } else {
        return Err(Error::Config(format!(
            "grid has {} axes but the data has {} types",
            axes.len(),
            type_ids.len()
        )));
    };

    // Fit nuisances once; grid points only change the estimand weights.
    enum Fitted {
        Plugin(netfx::propensity::PropensityModel, netfx::outcome::OutcomeModel),
        Crossfit(netfx::estimator::CrossfitDetail),
    }
    let fitted = match config.estimator.kind {
        EstimatorKind::Aipw | EstimatorKind::Ipw => {
            Fitted::Plugin(plan.fit_propensity(&data)?, plan.fit_outcome(&data)?)
        }
        EstimatorKind::Crossfit => Fitted::Crossfit(crossfit_estimate_detailed(
            &data,
            &plan,
            &base_spec,
            &p,
            &opts,
            config.estimator.seed,
        )?),
    };

    let z = normal_quantile(1.0 - config.level / 2.0)?;
    let mut rows = Vec::new();
    let mut point = vec![0usize; type_ids.len()];
    loop {
        let alpha_map: BTreeMap<usize, f64> = type_ids
            .iter()
            .enumerate()
            .map(|(d, &k)| (k, axes[d][point[d]]))
            .collect();
        let spec = respec_alphas(&base_spec, &alpha_map)?;
        let result = match &fitted {
            Fitted::Plugin(e, g) => aipw_estimate(&data, e, g, &spec, &p, &opts)?,
            Fitted::Crossfit(detail) => {
                crossfit_eval(&data, &detail.folds, &detail.fold_models, &spec, &p, &opts)?
            }
        };
        let se = result.se.unwrap_or(f64::NAN);
        let (lo, hi) = result.ci.unwrap_or((f64::NAN, f64::NAN));
        let significant = se.is_finite() && result.tau.abs() > z * se;
        let mut row: Vec<String> = alpha_map.values().map(|a| format!("{a}")).collect();
        row.push(format!("{}", result.tau));
        row.push(format!("{se}"));
        row.push(format!("{lo}"));
        row.push(format!("{hi}"));
        row.push(if significant { "1" } else { "0" }.into());
        rows.push(row);

        // advance the mixed-radix counter over grid points
        let mut d = 0;
        loop {
            if d == point.len() {
                break;
            }
            point[d] += 1;
            if point[d] < axes[d].len() {
                break;
            }
            point[d] = 0;
            d += 1;
        }
        if d == point.len() {
            break;
        }
    }

    let mut header: Vec<String> = (1..=type_ids.len()).map(|i| format!("alpha_{i}")).collect();
    header.extend(
        ["tau", "se", "ci_lo", "ci_hi", "significant"]
            .iter()
            .map(|s| s.to_string()),
    );
    write_table(args.out.as_deref(), &header, &rows)
}

/// Rebuild a DE/IE spec with new per-type allocations, keeping `alpha_prime`
/// from the configured spec for indirect effects.
fn respec_alphas(base: &EstimandSpec, alpha: &BTreeMap<usize, f64>) -> Result<EstimandSpec> {
    let alloc = Allocation::PerType(alpha.clone());
    match &base.kind {
        SpecKind::DirectEffect { .. } => Ok(netfx::estimand::de_spec(PolicyAllocation {
            alpha: alloc,
            alpha_prime: None,
        })),
        SpecKind::IndirectEffect { alloc: orig } => netfx::estimand::ie_spec(PolicyAllocation {
            alpha: alloc,
            alpha_prime: orig.alpha_prime.clone(),
        }),
        SpecKind::Generic => Err(Error::Config(
            "sweep requires a DE or IE estimand; generic weights carry no allocation".into(),
        )),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let data = match args.scenario.as_str() {
        "glmm" => simulate_glmm(&GlmmScenario::default(), args.n, args.seed)?,
        "noint" => simulate_noint(args.p, args.n, args.seed)?,
        other => {
            return Err(Error::Config(format!(
                "unknown scenario `{other}` (expected glmm or noint)"
            )))
        }
    };
    let file = std::fs::File::create(&args.out)?;
    write_csv(&data, file)?;
    eprintln!(
        "wrote {} clusters ({} types) to {}",
        data.n(),
        data.n_types(),
        args.out.display()
    );
    Ok(())
}

fn cmd_mc_study(args: McStudyArgs) -> Result<()> {
    match args.scenario.as_str() {
        "glmm" => {
            let switches = GlmmSpecSwitches::parse(&args.spec)?;
            let scenario = GlmmScenario::default();
            let estimands = [
                GlmmEstimand::DirectEffect {
                    alpha: args.de_alpha,
                },
                GlmmEstimand::IndirectEffect {
                    alpha: args.ie_alpha,
                    alpha_prime: args.ie_alpha_prime,
                },
            ];
            let results =
                glmm_mc_study(&scenario, switches, &estimands, args.reps, args.n, args.seed)?;
            let header: Vec<String> = [
                "scenario", "estimand", "spec", "bias", "emp_se", "mean_se", "coverage",
                "reps", "failures",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            let rows: Vec<Vec<String>> = results
                .iter()
                .map(|r| {
                    vec![
                        "glmm".into(),
                        r.estimand.clone(),
                        switches.label(),
                        format!("{}", r.bias),
                        format!("{}", r.emp_se),
                        format!("{}", r.mean_se),
                        format!("{}", r.coverage),
                        r.reps.to_string(),
                        r.failures.to_string(),
                    ]
                })
                .collect();
            write_table(args.out.as_deref(), &header, &rows)
        }
        "noint" => {
            let grid = parse_grid_axis(&args.alpha_grid)?;
            let rows = noint_variance_study(args.p, &grid, args.reps, args.n, args.seed)?;
            let header: Vec<String> =
                ["alpha", "mean_tau", "bias", "emp_var", "theory_var", "reps"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        format!("{}", r.alpha),
                        format!("{}", r.mean_tau),
                        format!("{}", r.bias),
                        format!("{}", r.emp_var),
                        format!("{}", r.theory_var),
                        r.reps.to_string(),
                    ]
                })
                .collect();
            write_table(args.out.as_deref(), &header, &table)
        }
        other => Err(Error::Config(format!(
            "unknown scenario `{other}` (expected glmm or noint)"
        ))),
    }
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let schema = match &args.config {
        Some(path) => RunConfig::from_path(path)?.ingest_schema(),
        None => IngestSchema::default(),
    };
    let data = load_dataset(&args.data, &schema)?;
    if let Some(path) = &args.config {
        let config = RunConfig::from_path(path)?;
        config.validate_against(&data)?;
        config.build_spec()?;
        config.build_plan()?;
    }
    println!("dataset: {} clusters, {} types", data.n(), data.n_types());
    for (k, info) in data.types() {
        println!(
            "  type {k}: size {}, covariate dim {}, {} clusters",
            info.size, info.covariate_dim, info.count
        );
    }
    println!("ok");
    Ok(())
}

fn write_table(
    out: Option<&std::path::Path>,
    header: &[String],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
    }
    match out {
        Some(path) => std::fs::write(path, buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}
