use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use hetscore::datagen::{
    calibrate, generate_trial, verify_calibration, Calibration, CalibrationOptions, ScenarioConfig, Verification,
};
use hetscore::dataset::{load_dataset, Schema};
use hetscore::fitters::Strategy;
use hetscore::hypothesis::{Method, TestResult};
use hetscore::importance::{forest_importance, lrt_importance, VariableImportance};
use hetscore::par::{with_workers, Execution};
use hetscore::scores::score_residuals;
use hetscore::study::{
    load_results, run_study, summarize, top1_predictive_prob, write_ecdf, write_summary, AnalysisContext, MethodSpec,
    ScenarioKey, StudyConfig,
};
use hetscore::{Dataset, Error as CoreError, Family, Parameterization, TreatmentExpectation};

const EXIT_IO: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_CONVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "hetscore", version, about = "Treatment effect heterogeneity from score residuals")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Seed for all random number streams.
    #[arg(long, global = true, env = "HETSCORE_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Global heterogeneity tests and covariate importance for a dataset.
    Analyze(AnalyzeArgs),
    /// Simulate a benchmark trial.
    Simulate(SimulateArgs),
    /// Calibrate signal strength, interaction size and overall effect.
    Calibrate(CalibrateArgs),
    /// Run a simulation study.
    Benchmark(BenchmarkArgs),
    /// Summaries of a study results file.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Normal,
    Binomial,
    Negbin,
    Cox,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::Normal => Family::Normal,
            FamilyArg::Binomial => Family::Binomial,
            FamilyArg::Negbin => Family::NegBin,
            FamilyArg::Cox => Family::CoxPH,
        }
    }
}

/// Real data has no known prognostic function, so `oracle` is not offered.
#[derive(Clone, Copy, ValueEnum)]
enum AdjustArg {
    All,
    Lasso,
    Risk,
}

impl From<AdjustArg> for Strategy {
    fn from(a: AdjustArg) -> Strategy {
        match a {
            AdjustArg::All => Strategy::All,
            AdjustArg::Lasso => Strategy::Lasso,
            AdjustArg::Risk => Strategy::Risk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Centered,
    Noncentered,
}

impl From<ParamArg> for Parameterization {
    fn from(p: ParamArg) -> Parameterization {
        match p {
            ParamArg::Centered => Parameterization::Centered,
            ParamArg::Noncentered => Parameterization::NonCentered,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TestArg {
    /// Permutation test of score residuals against the covariates.
    Residual,
    /// Asymptotic likelihood-ratio test of all interactions.
    Lrt,
    /// Parametric-bootstrap likelihood-ratio test.
    Bootstrap,
    /// Root-node parameter-instability test.
    Mob,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum StatArg {
    Max,
    Quad,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ImportanceArg {
    Forest,
    Lrt,
    None,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Schema sidecar (TOML or JSON).
    #[arg(long)]
    schema: PathBuf,
    /// Outcome family; must agree with the schema when given.
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Prognostic adjustment strategy.
    #[arg(long, value_enum, default_value = "all")]
    adjust: AdjustArg,
    #[arg(long, value_enum, default_value = "centered")]
    param: ParamArg,
    /// Tests to run (comma separated).
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["residual", "mob"])]
    tests: Vec<TestArg>,
    /// Statistic(s) of the residual permutation test.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["max", "quad"])]
    stat: Vec<StatArg>,
    /// Permutations / bootstrap replicates.
    #[arg(long = "B", default_value_t = 9999)]
    b: usize,
    /// Covariate importance methods.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["forest", "lrt"])]
    importance: Vec<ImportanceArg>,
    /// Treatment expectation for centering: `empirical` or a known value
    /// such as `0.5`.
    #[arg(long, default_value = "empirical")]
    expectation: String,
    /// Surprise thresholds separating weak / moderate / strong / very strong
    /// evidence.
    #[arg(long, value_delimiter = ',', default_values_t = [3.3, 6.0, 10.0])]
    bands: Vec<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario 1-4.
    #[arg(long)]
    scenario: u8,
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Calibration TOML from `calibrate`; supplies s, gamma and nuisance
    /// parameters.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Heterogeneity as a multiple of the calibrated gamma1*.
    #[arg(long, default_value_t = 0.0)]
    gamma_mult: f64,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    k: usize,
    /// Prognostic signal scale (without --calibration).
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    gamma1_star: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    /// Output directory (data.csv, schema.toml, truth.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    scenario: u8,
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    k: usize,
    /// Replicated trials per power evaluation.
    #[arg(long, default_value_t = 2000)]
    n_mc: usize,
    /// Simulated control subjects for the signal-strength metric.
    #[arg(long, default_value_t = 100_000)]
    n_subjects: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0, 1.5, 2.0])]
    gamma_mults: Vec<f64>,
    /// Fresh replicates used to verify the calibrated powers (0 = skip).
    #[arg(long, default_value_t = 2000)]
    verify: usize,
    /// Output TOML.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Study configuration (TOML or JSON).
    #[arg(long)]
    config: PathBuf,
    /// Results CSV; an existing file is resumed.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Results CSV from `benchmark`.
    #[arg(long)]
    results: PathBuf,
    /// Output directory (summary.csv, ecdf.csv, top1.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    calibration: Calibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verification: Option<Verification>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let workers = cli.workers;
    match with_workers(workers, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Error chain joined by ": ", skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if !msg.contains(&c) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&c);
        }
    }
    msg
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            return match c {
                CoreError::Io(_) => EXIT_IO,
                CoreError::Csv(inner) if inner.is_io_error() => EXIT_IO,
                CoreError::Convergence(_)
                | CoreError::Separation(_)
                | CoreError::RankDeficient(_)
                | CoreError::Calibration(_) => EXIT_CONVERGENCE,
                _ => EXIT_VALIDATION,
            };
        }
    }
    EXIT_VALIDATION
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(a) => analyze(a, cli.seed),
        Command::Simulate(a) => simulate(a, cli.seed),
        Command::Calibrate(a) => calibrate_cmd(a, cli.seed),
        Command::Benchmark(a) => benchmark(a, cli.workers),
        Command::Report(a) => report(a),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn band(surprise: f64, bands: &[f64]) -> &'static str {
    const NAMES: [&str; 4] = ["weak", "moderate", "strong", "very strong"];
    NAMES[bands.iter().filter(|&&t| surprise >= t).count().min(3)]
}

fn parse_expectation(s: &str) -> Result<TreatmentExpectation> {
    if s.eq_ignore_ascii_case("empirical") {
        return Ok(TreatmentExpectation::Empirical);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| CoreError::Config(format!("--expectation must be 'empirical' or a number, got '{s}'")))?;
    Ok(TreatmentExpectation::Known(v))
}

fn analyze(a: AnalyzeArgs, seed: u64) -> Result<()> {
    if a.bands.len() != 3 || a.bands.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::Config("--bands needs three increasing thresholds".into()).into());
    }
    let schema = Schema::from_path(&a.schema).with_context(|| format!("reading schema {}", a.schema.display()))?;
    if let Some(f) = a.family {
        let f = Family::from(f);
        if f != schema.family {
            return Err(CoreError::Config(format!(
                "--family {f} disagrees with the schema family {}",
                schema.family
            ))
            .into());
        }
    }
    let raw: Dataset = load_dataset(&a.data, &schema).with_context(|| format!("loading {}", a.data.display()))?;
    let d = raw.center_treatment(parse_expectation(&a.expectation)?)?;
    create_dir(&a.out)?;
    let strategy = Strategy::from(a.adjust);
    let param = Parameterization::from(a.param);

    let mut ctx = AnalysisContext::new(&d, None, seed, Execution::Parallel);
    let adjusted = ctx.design(strategy)?;
    let model = ctx.model(strategy, param)?;
    let scores = score_residuals(&model, &d)?;
    scores.write_csv(&d, BufWriter::new(File::create(a.out.join("scores.csv"))?))?;

    let mut specs = Vec::new();
    for t in &a.tests {
        let methods: Vec<Method> = match t {
            TestArg::Residual => a
                .stat
                .iter()
                .map(|s| if *s == StatArg::Max { Method::ResidualPermMax } else { Method::ResidualPermQuad })
                .collect(),
            TestArg::Lrt => vec![Method::LrtAsymptotic],
            TestArg::Bootstrap => vec![Method::LrtBootstrap],
            TestArg::Mob => vec![Method::MobRoot],
        };
        for m in methods {
            let mut spec = MethodSpec::new(m, strategy);
            spec.param = param;
            spec.b = a.b;
            spec.importance = false;
            specs.push(spec);
        }
    }
    let mut tests = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let out = ctx.run(spec, hetscore::par::derive_seed(seed, &[0x3e, k as u64]));
        let r: TestResult = out.result.with_context(|| format!("running {}", spec.method))?;
        log::info!("{}: p = {:.4}, surprise = {:.2}", r.method, r.p_value, r.surprise);
        let mut j = r.to_json();
        j["evidence"] = json!(band(r.surprise, &a.bands));
        j["seconds"] = json!(out.seconds);
        tests.push(j);
    }

    let mut importances: Vec<VariableImportance> = Vec::new();
    for m in &a.importance {
        match m {
            ImportanceArg::Forest => importances.push(forest_importance(&scores, &d, &ctx.forest)?),
            ImportanceArg::Lrt => importances.push(lrt_importance(&d, &adjusted, param)?),
            ImportanceArg::None => {}
        }
    }
    let mut w = csv_writer(&a.out.join("importance.csv"))?;
    w.write_record(["method", "variable", "rank", "importance"])?;
    for vi in &importances {
        for (r, name) in vi.ranking.iter().enumerate() {
            let v = vi.importance_of(name).unwrap_or(f64::NAN);
            w.write_record([vi.method.as_str(), name.as_str(), &(r + 1).to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;

    let summary = json!({
        "data": a.data.display().to_string(),
        "family": d.family,
        "n": d.n(),
        "k": d.k(),
        "adjustment": { "strategy": strategy.as_str(), "columns": adjusted.names, "provenance": adjusted.provenance },
        "parameterization": param,
        "seed": seed,
        "model": model.to_json(),
        "tests": tests,
        "importance": importances.iter().map(|vi| json!({
            "method": vi.method.as_str(),
            "ranking": vi.ranking,
        })).collect::<Vec<_>>(),
        "evidence_bands": { "moderate": a.bands[0], "strong": a.bands[1], "very_strong": a.bands[2] },
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    print_tests(&summary);
    Ok(())
}

fn print_tests(summary: &serde_json::Value) {
    println!("{:<18} {:>10} {:>10}  evidence", "test", "p", "surprise");
    for t in summary["tests"].as_array().into_iter().flatten() {
        println!(
            "{:<18} {:>10.4} {:>10.2}  {}",
            t["method"].as_str().unwrap_or(""),
            t["p_value"].as_f64().unwrap_or(f64::NAN),
            t["surprise"].as_f64().unwrap_or(f64::NAN),
            t["evidence"].as_str().unwrap_or("")
        );
    }
}

fn csv_writer(p: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(f)))
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
    serde_json::to_writer_pretty(&mut f, v)?;
    writeln!(f)?;
    Ok(())
}

fn read_calibration(p: &Path) -> Result<CalibrationFile> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    toml::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", p.display())).into())
}

fn simulate(a: SimulateArgs, seed: u64) -> Result<()> {
    let family = Family::from(a.family);
    let mut cfg = match &a.calibration {
        Some(p) => {
            let cal = read_calibration(p)?.calibration;
            if cal.scenario_id != a.scenario || cal.family != family {
                bail!(CoreError::Config(format!(
                    "calibration is for scenario {} / {}, not {} / {family}",
                    cal.scenario_id, cal.family, a.scenario
                )));
            }
            let mut c = match cal.scenario(a.gamma_mult, seed) {
                Ok(c) => c,
                // uncalibrated multiplier: keep gamma0 of the null scenario
                Err(_) => {
                    let mut c = cal.scenario(0.0, seed)?;
                    c.gamma_mult = a.gamma_mult;
                    log::warn!("gamma_mult {} was not calibrated; using gamma0 of gamma_mult 0", a.gamma_mult);
                    c
                }
            };
            c.n = a.n;
            c.k = a.k;
            c
        }
        None => {
            let mut c = ScenarioConfig::new(a.scenario, family);
            c.n = a.n;
            c.k = a.k;
            c.gamma_mult = a.gamma_mult;
            c.seed = seed;
            c.s = a.s.ok_or_else(|| anyhow!(CoreError::Config("--s is required without --calibration".into())))?;
            c
        }
    };
    if let Some(v) = a.gamma0 {
        cfg.gamma0 = v;
    }
    if let Some(v) = a.gamma1_star {
        cfg.gamma1_star = v;
    }
    if let Some(v) = a.theta {
        cfg.theta = v;
    }
    if let Some(v) = a.lambda0 {
        cfg.lambda0 = v;
    }
    if let Some(v) = a.s {
        cfg.s = v;
    }
    let trial = generate_trial(&cfg)?;
    create_dir(&a.out)?;
    trial.save(a.out.join("data.csv"), a.out.join("schema.toml"), a.out.join("truth.json"))?;
    println!(
        "wrote {} subjects to {} (predictive: {})",
        cfg.n,
        a.out.display(),
        trial.predictive_names().join(", ")
    );
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs, seed: u64) -> Result<()> {
    let mut base = ScenarioConfig::new(a.scenario, Family::from(a.family));
    base.n = a.n;
    base.k = a.k;
    base.seed = seed;
    let opts = CalibrationOptions {
        n_subjects: a.n_subjects,
        n_mc: a.n_mc,
        gamma_mults: a.gamma_mults.clone(),
        ..Default::default()
    };
    let cal = calibrate(&base, &opts)?;
    let verification = if a.verify > 0 {
        Some(verify_calibration(&cal, a.verify, a.n_subjects, Execution::Parallel)?)
    } else {
        None
    };
    let file = CalibrationFile {
        calibration: cal,
        verification,
    };
    let text = toml::to_string(&file)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.out, &text).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{text}");
    Ok(())
}

fn benchmark(a: BenchmarkArgs, workers: usize) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let is_json = a.config.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let mut cfg: StudyConfig = if is_json {
        serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{} (line {}): {e}", a.config.display(), e.line())))?
    } else {
        StudyConfig::from_toml(&text).map_err(|e| anyhow!(e).context(a.config.display().to_string()))?
    };
    if workers > 0 {
        cfg.workers = workers;
    }
    let summary = run_study(&cfg, &a.out)?;
    write_summary(&summary, std::io::stdout())?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let rows = load_results(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    create_dir(&a.out)?;
    let summary = summarize(&rows);
    write_summary(&summary, BufWriter::new(File::create(a.out.join("summary.csv"))?))?;
    write_ecdf(&rows, BufWriter::new(File::create(a.out.join("ecdf.csv"))?))?;
    let mut w = csv_writer(&a.out.join("top1.csv"))?;
    w.write_record(["scenario_id", "family", "gamma_mult", "method", "variable", "count", "frequency"])?;
    for s in &summary {
        let key = ScenarioKey {
            scenario_id: s.scenario_id,
            family: s.family,
            gamma_mult: s.gamma_mult,
        };
        if let Ok(t) = top1_predictive_prob(&rows, &key, &s.method) {
            for (v, c) in &t.frequencies {
                w.write_record([
                    s.scenario_id.to_string(),
                    s.family.to_string(),
                    s.gamma_mult.to_string(),
                    s.method.clone(),
                    v.clone(),
                    c.to_string(),
                    (*c as f64 / t.replicates as f64).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    println!(
        "{:<8} {:<9} {:>6}  {:<28} {:>6} {:>8} {:>8} {:>8}",
        "scenario", "family", "gamma", "method", "reps", "median_s", "P(p<.05)", "top1"
    );
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for s in &summary {
        println!(
            "{:<8} {:<9} {:>6} {:<28} {:>6} {:>8} {:>8} {:>8}",
            s.scenario_id,
            s.family.to_string(),
            s.gamma_mult,
            s.method,
            s.replicates,
            fmt(s.median_surprise),
            fmt(s.reject_05),
            fmt(s.top1_prob)
        );
    }
    Ok(())
}
