//! The `mixedboot` command line: `fit`, `bootstrap`, and `simulate`.
//!
//! Settings resolve as flags over config file over defaults. Exit codes:
//! 0 success, 2 configuration or parse problem, 3 model-fitting failure,
//! 4 bootstrap or study degeneracy.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mixedboot_core::engines::{self, BootstrapMethodId, EngineConfig, StatisticPlugin};
use mixedboot_core::fit::FitOptions;
use mixedboot_core::inference;
use mixedboot_core::simlab::{EffectDistribution, SimulationScenario, SizeScheme};
use mixedboot_core::{Criterion, Error as CoreError};
use serde::Deserialize;

use crate::config::{load_file_config, parse_stat_spec, FileConfig, OutputFormat, RunConfig};
use crate::ingest;
use crate::output::{self, BootstrapRow, CoverageRow, FitReport, Provenance};
use crate::parallel;

const DEFAULT_B: usize = 1000;
const DEFAULT_LEVEL: f64 = 0.95;
const MIN_B: usize = 100;
const RECOMMENDED_B: usize = 500;

#[derive(Parser)]
#[command(
    name = "mixedboot",
    version,
    about = "Random-intercept linear mixed models with bootstrap inference"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and report point estimates.
    Fit(FitArgs),
    /// Bootstrap a fitted model and report percentile intervals.
    Bootstrap(BootstrapArgs),
    /// Run a method-by-scenario coverage study.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Output format: csv or json.
    #[arg(long)]
    format: Option<String>,
    /// Master random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimation criterion: ml or reml.
    #[arg(long)]
    criterion: Option<String>,
    /// Worker thread count (default: MIXEDBOOT_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV (cluster_id,y,x1,...).
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV (cluster_id,y,x1,...).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Bootstrap method(s), comma separated (see docs/formats.md for names).
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    /// Bootstrap replicates.
    #[arg(long = "B")]
    b: Option<usize>,
    /// Interval level in (0,1).
    #[arg(long)]
    level: Option<f64>,
    /// Extra statistic as name=c0,c1,... (a linear combination of beta);
    /// repeatable.
    #[arg(long = "stat")]
    stat: Vec<String>,
    /// Also write the replicate matrix to this CSV path.
    #[arg(long)]
    dump_replicates: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Named scenario: set1-balanced, set1-unbalanced, set2-balanced,
    /// set2-unbalanced.
    #[arg(long)]
    preset: Option<String>,
    /// Custom scenario JSON file (takes precedence over --preset).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Number of simulated datasets.
    #[arg(long = "R")]
    r: Option<usize>,
    /// Bootstrap replicates per dataset.
    #[arg(long = "B")]
    b: Option<usize>,
    /// Methods to study, comma separated (default: all).
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    /// Interval level in (0,1).
    #[arg(long)]
    level: Option<f64>,
}

/// Parse argv and run; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.exit_code() == 0 { 0 } else { 2 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::NonConvergence { .. } | CoreError::SingularDesign(_)) => 3,
        Some(
            CoreError::DegeneratePool(_)
            | CoreError::AllReplicatesFailed(_)
            | CoreError::ExcessiveFailures { .. }
            | CoreError::TooFewReplicates { .. }
            | CoreError::Postscale(_)
            | CoreError::StudyDegenerate { .. },
        ) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Bootstrap(args) => cmd_bootstrap(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn file_config(common: &CommonArgs) -> Result<FileConfig> {
    match &common.config {
        Some(path) => load_file_config(path),
        None => Ok(FileConfig::default()),
    }
}

fn resolve_format(common: &CommonArgs, file: &FileConfig) -> Result<OutputFormat> {
    match common.format.as_deref().or(file.format.as_deref()) {
        Some(s) => OutputFormat::parse(s),
        None => Ok(OutputFormat::Csv),
    }
}

fn resolve_criterion(common: &CommonArgs, file: &FileConfig) -> Result<Criterion> {
    match common.criterion.as_deref().or(file.criterion.as_deref()) {
        Some(s) => Ok(Criterion::from_str(s)?),
        None => Ok(Criterion::Reml),
    }
}

fn resolve_input(flag: &Option<PathBuf>, file: &FileConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| file.input.as_ref().map(PathBuf::from))
        .context("no input file: pass --input or set \"input\" in the config file")
}

fn resolve_output(common: &CommonArgs, file: &FileConfig) -> Option<PathBuf> {
    common.output.clone().or_else(|| file.output.as_ref().map(PathBuf::from))
}

fn parse_methods(names: &[String]) -> Result<Vec<BootstrapMethodId>> {
    names.iter().map(|n| Ok(BootstrapMethodId::from_str(n)?)).collect()
}

fn check_b(b: usize) -> Result<()> {
    if b < MIN_B {
        bail!("B = {b} is below the minimum {MIN_B}");
    }
    if b < RECOMMENDED_B {
        eprintln!("warning: B = {b} is below the recommended {RECOMMENDED_B}");
    }
    Ok(())
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        bail!("level {level} must lie strictly inside (0,1)");
    }
    Ok(())
}

fn criterion_name(criterion: Criterion) -> &'static str {
    match criterion {
        Criterion::Ml => "ml",
        Criterion::Reml => "reml",
    }
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let file = file_config(&args.common)?;
    let input = resolve_input(&args.input, &file)?;
    let format = resolve_format(&args.common, &file)?;
    let criterion = resolve_criterion(&args.common, &file)?;
    let seed = args.common.seed.or(file.seed).unwrap_or(0);

    let run_config = RunConfig {
        command: "fit".into(),
        input: Some(input.display().to_string()),
        methods: vec![],
        b: 0,
        r: 0,
        level: 0.0,
        seed,
        criterion: criterion_name(criterion).into(),
        format: format.as_str().into(),
        stats: vec![],
        preset: None,
        scenario: None,
        dump_replicates: false,
    };

    let data = ingest::read_dataset_csv(&input)?;
    let fitted = mixedboot_core::fit(&data, criterion, &FitOptions::default())?;

    let mut estimates: Vec<(String, f64)> = engines::theta_column_names(data.p())
        .into_iter()
        .zip(fitted.theta_hat.to_row())
        .collect();
    estimates.push(("lambda".into(), fitted.lambda()));
    let report = FitReport {
        criterion: criterion_name(criterion).into(),
        converged: fitted.converged,
        boundary: fitted.boundary,
        iterations: fitted.iterations,
        loglik: fitted.loglik,
        estimates,
    };
    let prov = Provenance::new(seed, run_config.hash());
    let text = match format {
        OutputFormat::Csv => output::fit_report_csv(&prov, &report),
        OutputFormat::Json => output::fit_report_json(&prov, &report),
    };
    output::deliver(resolve_output(&args.common, &file).as_deref(), &text)
}

fn dump_path(base: &Path, method: BootstrapMethodId, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("replicates");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    base.with_file_name(format!("{stem}-{}.{ext}", method.as_str()))
}

fn cmd_bootstrap(args: BootstrapArgs) -> Result<()> {
    let file = file_config(&args.common)?;
    let input = resolve_input(&args.input, &file)?;
    let format = resolve_format(&args.common, &file)?;
    let criterion = resolve_criterion(&args.common, &file)?;
    let seed = args.common.seed.or(file.seed).unwrap_or(0);
    let b = args.b.or(file.b).unwrap_or(DEFAULT_B);
    let level = args.level.or(file.level).unwrap_or(DEFAULT_LEVEL);
    let method_names: Vec<String> = if !args.method.is_empty() {
        args.method.clone()
    } else {
        file.method.clone().unwrap_or_else(|| vec!["preb1".into()])
    };
    let stat_specs: Vec<String> =
        if !args.stat.is_empty() { args.stat.clone() } else { file.stat.clone().unwrap_or_default() };
    let dump = args
        .dump_replicates
        .clone()
        .or_else(|| file.dump_replicates.as_ref().map(PathBuf::from));

    check_b(b)?;
    check_level(level)?;
    let methods = parse_methods(&method_names)?;
    let mut plugins = vec![StatisticPlugin::lambda()];
    for spec in &stat_specs {
        plugins.push(parse_stat_spec(spec)?);
    }

    let run_config = RunConfig {
        command: "bootstrap".into(),
        input: Some(input.display().to_string()),
        methods: method_names.clone(),
        b,
        r: 0,
        level,
        seed,
        criterion: criterion_name(criterion).into(),
        format: format.as_str().into(),
        stats: stat_specs.clone(),
        preset: None,
        scenario: None,
        dump_replicates: dump.is_some(),
    };
    let prov = Provenance::new(seed, run_config.hash());

    let data = ingest::read_dataset_csv(&input)?;
    for plugin in &plugins {
        if let Some(required) = plugin.required_p() {
            if required != data.p() {
                bail!(
                    "statistic '{}' has {required} coefficients but the design has {} columns",
                    plugin.name,
                    data.p()
                );
            }
        }
    }
    let fitted = mixedboot_core::fit(&data, criterion, &FitOptions::default())?;

    let pool = parallel::build_pool(parallel::resolve_threads(
        args.common.threads.or(file.threads),
    ))?;

    let point_row = fitted.theta_hat.to_row();
    let mut rows: Vec<BootstrapRow> = Vec::new();
    for &method in &methods {
        let config = EngineConfig {
            b,
            seed,
            plugins: plugins.clone(),
            fit_opts: FitOptions::default(),
        };
        let run = parallel::run_bootstrap(&pool, method, &data, &fitted, &config)?;
        let cis = inference::run_percentile_cis(&run, level)?;
        let mut estimates: Vec<f64> = point_row.clone();
        for plugin in &plugins {
            estimates.push(plugin.evaluate(&point_row, data.p()));
        }
        for (k, ci) in cis.iter().enumerate() {
            // Targets order: beta columns, variance components, then the
            // built-in ratio and any configured statistics.
            let stat_index = k.checked_sub(data.p() + 2);
            let p_value = match stat_index {
                // The leading plugin is the built-in lambda: no p-value.
                Some(s) if s >= 1 => {
                    Some(inference::bootstrap_pvalue(&run.ok_stat_values(s), 0.0)?)
                }
                _ => None,
            };
            rows.push(BootstrapRow {
                method: method.as_str().into(),
                target: ci.target.clone(),
                estimate: estimates[k],
                lower: ci.lower,
                upper: ci.upper,
                level,
                b_total: run.b,
                b_failed: run.n_failed(),
                p_value,
            });
        }
        if let Some(base) = &dump {
            let path = dump_path(base, method, methods.len() > 1);
            let text = output::replicate_dump_csv(&prov, &run);
            output::deliver(Some(&path), &text)?;
        }
    }

    let text = match format {
        OutputFormat::Csv => output::bootstrap_report_csv(&prov, &rows),
        OutputFormat::Json => output::bootstrap_report_json(&prov, &rows),
    };
    output::deliver(resolve_output(&args.common, &file).as_deref(), &text)
}

/// On-disk scenario description for `simulate --scenario`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    d: usize,
    balanced_n: Option<usize>,
    sizes: Option<Vec<usize>>,
    beta: Vec<f64>,
    sigma2_u: f64,
    sigma2_e: f64,
    /// "set1" (Gaussian) or "set2" (standardized chi-square).
    effect_dist: String,
    r: Option<usize>,
    b: Option<usize>,
    level: Option<f64>,
    methods: Option<Vec<String>>,
    seed: Option<u64>,
    criterion: Option<String>,
}

impl ScenarioFile {
    fn into_scenario(self) -> Result<SimulationScenario> {
        let size_scheme = match (self.balanced_n, self.sizes) {
            (Some(n), None) => SizeScheme::Balanced(n),
            (None, Some(sizes)) => SizeScheme::UnbalancedProfile(sizes),
            _ => bail!("scenario file must set exactly one of balanced_n or sizes"),
        };
        let effect_dist = match self.effect_dist.as_str() {
            "set1" => EffectDistribution::NormalSet1,
            "set2" => EffectDistribution::Chisq1Set2,
            other => bail!("unknown effect_dist '{other}' (expected set1 or set2)"),
        };
        let methods = match self.methods {
            Some(names) => parse_methods(&names)?,
            None => BootstrapMethodId::ALL.to_vec(),
        };
        let criterion = match self.criterion.as_deref() {
            Some(s) => Criterion::from_str(s)?,
            None => Criterion::Reml,
        };
        Ok(SimulationScenario {
            name: self.name.unwrap_or_else(|| "custom".into()),
            d: self.d,
            size_scheme,
            beta: self.beta,
            sigma2_u: self.sigma2_u,
            sigma2_e: self.sigma2_e,
            effect_dist,
            r: self.r.unwrap_or(200),
            b: self.b.unwrap_or(200),
            level: self.level.unwrap_or(DEFAULT_LEVEL),
            methods,
            seed: self.seed.unwrap_or(0),
            criterion,
        })
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let file = file_config(&args.common)?;
    let format = resolve_format(&args.common, &file)?;
    let scenario_path = args
        .scenario
        .clone()
        .or_else(|| file.scenario.as_ref().map(PathBuf::from));
    let preset = args.preset.clone().or_else(|| file.preset.clone());

    let mut scenario = match (&scenario_path, &preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read scenario file {}", path.display()))?;
            let parsed: ScenarioFile = serde_json::from_str(&text)
                .with_context(|| format!("scenario file {} is not valid", path.display()))?;
            parsed.into_scenario()?
        }
        (None, Some(name)) => SimulationScenario::preset(name)?,
        (None, None) => bail!("simulate needs --preset or --scenario"),
    };

    if let Some(r) = args.r.or(file.r) {
        scenario.r = r;
    }
    if let Some(b) = args.b.or(file.b) {
        scenario.b = b;
    }
    if let Some(seed) = args.common.seed.or(file.seed) {
        scenario.seed = seed;
    }
    if let Some(level) = args.level.or(file.level) {
        scenario.level = level;
    }
    if let Some(criterion) = args.common.criterion.as_deref().or(file.criterion.as_deref()) {
        scenario.criterion = Criterion::from_str(criterion)?;
    }
    let method_names: Vec<String> = if !args.method.is_empty() {
        args.method.clone()
    } else {
        file.method.clone().unwrap_or_default()
    };
    if !method_names.is_empty() {
        scenario.methods = parse_methods(&method_names)?;
    }
    if scenario.r == 0 {
        bail!("R must be at least 1");
    }
    if scenario.methods.is_empty() {
        bail!("no bootstrap methods selected");
    }
    check_b(scenario.b)?;
    check_level(scenario.level)?;
    if !(scenario.sigma2_e > 0.0) {
        bail!("study scenarios need sigma2_e > 0");
    }

    let run_config = RunConfig {
        command: "simulate".into(),
        input: None,
        methods: scenario.methods.iter().map(|m| m.as_str().to_string()).collect(),
        b: scenario.b,
        r: scenario.r,
        level: scenario.level,
        seed: scenario.seed,
        criterion: criterion_name(scenario.criterion).into(),
        format: format.as_str().into(),
        stats: vec![],
        preset: preset.clone(),
        scenario: scenario_path.map(|p| p.display().to_string()),
        dump_replicates: false,
    };
    let prov = Provenance::new(scenario.seed, run_config.hash());

    let pool = parallel::build_pool(parallel::resolve_threads(
        args.common.threads.or(file.threads),
    ))?;
    let result = parallel::run_study(&pool, &scenario)?;

    let truth: Vec<(String, f64)> =
        result.targets.iter().cloned().zip(result.truth.iter().copied()).collect();
    let rows: Vec<CoverageRow> = result
        .reports
        .iter()
        .map(|report| CoverageRow {
            method: report.method.as_str().into(),
            scenario: result.scenario_name.clone(),
            target: report.target.clone(),
            coverage: (report.r_effective > 0).then_some(report.coverage),
            r: result.r,
            b: result.b,
            failures: report.failures,
        })
        .collect();

    let text = match format {
        OutputFormat::Csv => output::coverage_report_csv(&prov, &truth, &rows),
        OutputFormat::Json => output::coverage_report_json(&prov, &truth, &rows),
    };
    output::deliver(resolve_output(&args.common, &file).as_deref(), &text)
}
