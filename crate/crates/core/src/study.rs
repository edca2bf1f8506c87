//! Replicated simulation studies: every configured method is applied to the
//! same simulated trial, results stream to an append-only CSV, and the
//! performance measures (p-value ECDF, median surprise, top-1 predictive
//! probability) are computed from that file.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::datagen::{generate_trial, Calibration, ScenarioConfig, Truth};
use crate::dataset::{Dataset, Family};
use crate::error::{Error, Result};
use crate::fitters::adjust::{prognostic_adjustment, AdjustOptions, AdjustedDesign, Strategy};
use crate::fitters::{fit_model, FittedModel, Parameterization};
use crate::hypothesis::{
    bootstrap_lrt, independence_test, lrt_interaction, mob_root_test, oracle_lrt, BootstrapOptions, Method,
    MobOptions, NullDistribution, Statistic, TestResult,
};
use crate::importance::{forest_importance, lrt_importance, ForestOptions, VariableImportance};
use crate::par::{derive_seed, map_indexed, with_workers, Execution};
use crate::scores::score_residuals;

/// One method of the study grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default = "default_adjust")]
    pub adjust: Strategy,
    #[serde(default = "default_param")]
    pub param: Parameterization,
    /// Permutations or bootstrap replicates.
    #[serde(default = "default_b")]
    pub b: usize,
    /// Residual tests: use the asymptotic null instead of permutations.
    #[serde(default)]
    pub asymptotic: bool,
    /// Rank covariates (forest for residual tests, LRT otherwise).
    #[serde(default = "yes")]
    pub importance: bool,
    /// Name in the results file; defaults to `Method[adjust]`.
    #[serde(default)]
    pub label: Option<String>,
}

fn default_adjust() -> Strategy {
    Strategy::Lasso
}
fn default_param() -> Parameterization {
    Parameterization::Centered
}
fn default_b() -> usize {
    999
}
fn yes() -> bool {
    true
}

impl MethodSpec {
    pub fn new(method: Method, adjust: Strategy) -> Self {
        MethodSpec {
            method,
            adjust,
            param: default_param(),
            b: default_b(),
            asymptotic: false,
            importance: true,
            label: None,
        }
    }

    pub fn with_b(mut self, b: usize) -> Self {
        self.b = b;
        self
    }

    pub fn label(&self) -> String {
        match (&self.label, self.method) {
            (Some(l), _) => l.clone(),
            (None, Method::Oracle) => "Oracle".into(),
            (None, m) => format!("{m}[{}]", self.adjust),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenarios: Vec<ScenarioConfig>,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Worker threads; 0 = one per core.
    #[serde(default)]
    pub workers: usize,
}

fn default_replicates() -> usize {
    500
}

impl StudyConfig {
    /// Desk-scale profile: 200 replicates, n = 300, B = 999.
    pub fn desk(mut scenarios: Vec<ScenarioConfig>, mut methods: Vec<MethodSpec>, master_seed: u64) -> Self {
        scenarios.iter_mut().for_each(|s| s.n = 300);
        methods.iter_mut().for_each(|m| m.b = 999);
        StudyConfig {
            scenarios,
            methods,
            replicates: 200,
            master_seed,
            workers: 0,
        }
    }

    /// Full-scale profile: 500 replicates, n = 500, B = 9999.
    pub fn full(mut scenarios: Vec<ScenarioConfig>, mut methods: Vec<MethodSpec>, master_seed: u64) -> Self {
        scenarios.iter_mut().for_each(|s| s.n = 500);
        methods.iter_mut().for_each(|m| m.b = 9999);
        StudyConfig {
            scenarios,
            methods,
            replicates: 500,
            master_seed,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("scenario list is empty".into()));
        }
        let mut labels = HashSet::new();
        for m in &self.methods {
            if !labels.insert(m.label()) {
                return Err(Error::Config(format!("duplicate method label '{}'", m.label())));
            }
        }
        let mut keys = HashSet::new();
        for s in &self.scenarios {
            s.validate()?;
            if !keys.insert(ScenarioKey::of(s)) {
                return Err(Error::Config(format!("duplicate scenario {}", ScenarioKey::of(s))));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("study config serializes")
    }
}

/// Scenarios for each multiplier of a calibrated scenario/family pair.
pub fn scenarios_from_calibration(cal: &Calibration, gamma_mults: &[f64]) -> Result<Vec<ScenarioConfig>> {
    gamma_mults.iter().map(|&m| cal.scenario(m, 0)).collect()
}

/// Identifies a scenario within a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioKey {
    pub scenario_id: u8,
    pub family: Family,
    pub gamma_mult: f64,
}

impl Eq for ScenarioKey {}

impl std::hash::Hash for ScenarioKey {
    fn hash<H: std::hash::Hasher>(&self, h: &mut H) {
        self.scenario_id.hash(h);
        self.family.hash(h);
        self.gamma_mult.to_bits().hash(h);
    }
}

impl ScenarioKey {
    pub fn of(s: &ScenarioConfig) -> Self {
        ScenarioKey {
            scenario_id: s.scenario_id,
            family: s.family,
            gamma_mult: s.gamma_mult,
        }
    }

    pub fn of_row(r: &ResultRow) -> Self {
        ScenarioKey {
            scenario_id: r.scenario_id,
            family: r.family,
            gamma_mult: r.gamma_mult,
        }
    }

    /// Seed of replicate `r`: depends only on the master seed, this key and `r`.
    pub fn replicate_seed(&self, master: u64, r: usize) -> u64 {
        let fam = Family::ALL.iter().position(|&f| f == self.family).unwrap() as u64;
        derive_seed(master, &[self.scenario_id as u64, fam, self.gamma_mult.to_bits(), r as u64])
    }
}

impl std::fmt::Display for ScenarioKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "scenario {} / {} / gamma_mult {}", self.scenario_id, self.family, self.gamma_mult)
    }
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario_id: u8,
    pub family: Family,
    pub gamma_mult: f64,
    pub replicate: usize,
    pub method: String,
    pub statistic: Option<f64>,
    pub p: Option<f64>,
    pub surprise: Option<f64>,
    pub top1_variable: Option<String>,
    pub top1_in_truth: Option<bool>,
    pub seconds: f64,
    /// Fingerprint of the simulated dataset (identical for all methods of a
    /// replicate).
    pub dataset_hash: String,
    pub error: Option<String>,
}

pub const RESULTS_HEADER: [&str; 13] = [
    "scenario_id",
    "family",
    "gamma_mult",
    "replicate",
    "method",
    "statistic",
    "p",
    "surprise",
    "top1_variable",
    "top1_in_truth",
    "seconds",
    "dataset_hash",
    "error",
];

/// Result of running one method on one dataset.
#[derive(Debug)]
pub struct MethodOutcome {
    pub label: String,
    pub result: Result<TestResult>,
    pub importance: Option<VariableImportance>,
    pub top1: Option<String>,
    pub seconds: f64,
}

/// Shared per-dataset state: adjustment designs and main-effect fits are
/// computed once and reused by every method that needs them.
pub struct AnalysisContext<'a> {
    pub dataset: &'a Dataset,
    pub truth: Option<&'a Truth>,
    pub adjust: AdjustOptions,
    pub forest: ForestOptions,
    pub execution: Execution,
    designs: HashMap<Strategy, Result<AdjustedDesign>>,
    models: HashMap<(Strategy, Parameterization), Result<FittedModel>>,
}

impl<'a> AnalysisContext<'a> {
    pub fn new(dataset: &'a Dataset, truth: Option<&'a Truth>, seed: u64, execution: Execution) -> Self {
        AnalysisContext {
            dataset,
            truth,
            adjust: AdjustOptions {
                seed: derive_seed(seed, &[0xad]),
                ..Default::default()
            },
            forest: ForestOptions {
                seed: derive_seed(seed, &[0xf0]),
                execution,
                ..Default::default()
            },
            execution,
            designs: HashMap::new(),
            models: HashMap::new(),
        }
    }

    pub fn design(&mut self, s: Strategy) -> Result<AdjustedDesign> {
        if !self.designs.contains_key(&s) {
            let mut opts = self.adjust.clone();
            opts.path.execution = self.execution;
            let truth = self.truth.map(|t| t.f_prog.as_slice());
            let d = prognostic_adjustment(self.dataset, s, truth, &opts);
            self.designs.insert(s, d);
        }
        clone_result(&self.designs[&s])
    }

    pub fn model(&mut self, s: Strategy, p: Parameterization) -> Result<FittedModel> {
        if !self.models.contains_key(&(s, p)) {
            let m = self.design(s).and_then(|a| fit_model(self.dataset, &a, p));
            self.models.insert((s, p), m);
        }
        clone_result(&self.models[&(s, p)])
    }

    /// Runs `spec` with random-number seed `seed`.
    pub fn run(&mut self, spec: &MethodSpec, seed: u64) -> MethodOutcome {
        let start = Instant::now();
        let mut importance = None;
        let result = self.run_inner(spec, seed, &mut importance);
        let top1 = match (&result, &importance) {
            (Ok(_), Some(vi)) => vi.top().map(String::from),
            (Ok(r), None) if spec.importance => min_p_covariate(r),
            _ => None,
        };
        MethodOutcome {
            label: spec.label(),
            result,
            importance,
            top1,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    fn run_inner(&mut self, spec: &MethodSpec, seed: u64, importance: &mut Option<VariableImportance>) -> Result<TestResult> {
        let d = self.dataset;
        let exec = self.execution;
        match spec.method {
            Method::ResidualPermMax | Method::ResidualPermQuad => {
                let m = self.model(spec.adjust, spec.param)?;
                let s = score_residuals(&m, d)?;
                let stat = if spec.method == Method::ResidualPermMax { Statistic::Max } else { Statistic::Quad };
                let null = if spec.asymptotic {
                    NullDistribution::Asymptotic
                } else {
                    NullDistribution::MonteCarlo { b: spec.b }
                };
                let x = d.expand_covariates().matrix;
                let r = independence_test(&s.s, &x, stat, null, seed, exec)?;
                if spec.importance {
                    let mut fo = self.forest.clone();
                    fo.seed = derive_seed(seed, &[0xf0]);
                    *importance = Some(forest_importance(&s, d, &fo)?);
                }
                Ok(r)
            }
            Method::LrtAsymptotic | Method::LrtBootstrap => {
                let a = self.design(spec.adjust)?;
                let mods = d.expand_covariates();
                let r = if spec.method == Method::LrtAsymptotic {
                    lrt_interaction(d, &a, spec.param, &mods)?
                } else {
                    let opts = BootstrapOptions {
                        b: spec.b,
                        seed,
                        execution: exec,
                        ..Default::default()
                    };
                    bootstrap_lrt(d, &a, spec.param, &mods, &opts)?
                };
                if spec.importance {
                    *importance = Some(lrt_importance(d, &a, spec.param)?);
                }
                Ok(r)
            }
            Method::MobRoot => {
                let m = self.model(spec.adjust, spec.param)?;
                let opts = MobOptions {
                    b: spec.b,
                    seed,
                    execution: exec,
                    ..Default::default()
                };
                mob_root_test(&m, d, &opts)
            }
            Method::Oracle => {
                let t = self
                    .truth
                    .ok_or_else(|| Error::validation("the oracle method needs the true effect functions"))?;
                oracle_lrt(d, &t.f_prog, &t.f_pred)
            }
        }
    }
}

fn clone_result<T: Clone>(r: &Result<T>) -> Result<T> {
    match r {
        Ok(v) => Ok(v.clone()),
        Err(e) => Err(e.duplicate()),
    }
}

/// Covariate with the smallest per-covariate p-value (ties by name).
fn min_p_covariate(r: &TestResult) -> Option<String> {
    r.per_covariate_p.as_ref().and_then(|per| {
        per.iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)))
            .map(|(n, _)| n.clone())
    })
}

/// Simulates replicate `r` of scenario `sc` and applies every method.
pub fn run_replicate(cfg: &StudyConfig, sc: &ScenarioConfig, r: usize) -> Vec<ResultRow> {
    let key = ScenarioKey::of(sc);
    let seed = key.replicate_seed(cfg.master_seed, r);
    let row = |method: String| ResultRow {
        scenario_id: sc.scenario_id,
        family: sc.family,
        gamma_mult: sc.gamma_mult,
        replicate: r,
        method,
        statistic: None,
        p: None,
        surprise: None,
        top1_variable: None,
        top1_in_truth: None,
        seconds: 0.0,
        dataset_hash: String::new(),
        error: None,
    };
    let trial = match generate_trial(&ScenarioConfig { seed, ..sc.clone() }) {
        Ok(t) => t,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .map(|m| ResultRow {
                    error: Some(format!("data generation failed: {e}")),
                    ..row(m.label())
                })
                .collect()
        }
    };
    let hash = format!("{:016x}", trial.dataset.fingerprint());
    let truth_names = trial.predictive_names();
    let mut ctx = AnalysisContext::new(&trial.dataset, Some(&trial.truth), seed, Execution::Sequential);
    cfg.methods
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let out = ctx.run(spec, derive_seed(seed, &[0x3e, k as u64]));
            debug_assert_eq!(format!("{:016x}", ctx.dataset.fingerprint()), hash);
            let mut rr = row(out.label);
            rr.seconds = out.seconds;
            rr.dataset_hash = hash.clone();
            match out.result {
                Ok(t) => {
                    rr.statistic = Some(t.statistic);
                    rr.p = Some(t.p_value);
                    rr.surprise = Some(t.surprise);
                    rr.top1_in_truth = out.top1.as_ref().map(|v| truth_names.contains(v));
                    rr.top1_variable = out.top1;
                }
                Err(e) => rr.error = Some(e.to_string()),
            }
            rr
        })
        .collect()
}

/// Reads a results file. A truncated last line (interrupted write) is
/// ignored.
pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_results(&text)
}

fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut rd = csv::ReaderBuilder::new().from_reader(complete.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if !complete.is_empty() && header != RESULTS_HEADER {
        return Err(Error::validation(format!("unexpected results header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Runs (or resumes) a study, appending to `out`. Replicates already
/// complete in `out` are skipped; a partially written replicate is dropped
/// and recomputed.
pub fn run_study(cfg: &StudyConfig, out: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let out = out.as_ref();
    let labels: Vec<String> = cfg.methods.iter().map(|m| m.label()).collect();
    let mut existing = if out.exists() { load_results(out)? } else { Vec::new() };
    // keep complete replicates only
    let mut per: HashMap<(ScenarioKey, usize), HashSet<String>> = HashMap::new();
    for r in &existing {
        per.entry((ScenarioKey::of_row(r), r.replicate)).or_default().insert(r.method.clone());
    }
    let done: HashSet<(ScenarioKey, usize)> = per
        .into_iter()
        .filter(|(_, m)| labels.iter().all(|l| m.contains(l)))
        .map(|(k, _)| k)
        .collect();
    let before = existing.len();
    existing.retain(|r| done.contains(&(ScenarioKey::of_row(r), r.replicate)));
    if existing.len() != before || !out.exists() || std::fs::metadata(out)?.len() == 0 {
        if existing.len() != before {
            warn!("dropping {} rows of incomplete replicates from {}", before - existing.len(), out.display());
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(out)?;
        w.write_record(RESULTS_HEADER)?;
        for r in &existing {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    let file = OpenOptions::new().append(true).open(out)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    with_workers(cfg.workers, || -> Result<()> {
        let batch = rayon_threads().max(1) * 4;
        for sc in &cfg.scenarios {
            let key = ScenarioKey::of(sc);
            let todo: Vec<usize> = (0..cfg.replicates).filter(|r| !done.contains(&(key, *r))).collect();
            if todo.len() < cfg.replicates {
                info!("{key}: {} of {} replicates already done", cfg.replicates - todo.len(), cfg.replicates);
            }
            for chunk in todo.chunks(batch) {
                let rows = map_indexed(chunk.len(), Execution::Parallel, |i| run_replicate(cfg, sc, chunk[i]));
                for r in rows.iter().flatten() {
                    w.serialize(r)?;
                }
                w.flush()?;
            }
            info!("{key}: finished");
        }
        Ok(())
    })?;
    drop(w);
    Ok(summarize(&load_results(out)?))
}

fn rayon_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

fn select<'a>(rows: &'a [ResultRow], key: &ScenarioKey, method: &str) -> Vec<&'a ResultRow> {
    rows.iter().filter(|r| ScenarioKey::of_row(r) == *key && r.method == method).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    /// Sorted `(p, F(p))` pairs.
    pub points: Vec<(f64, f64)>,
    /// Kolmogorov-Smirnov distance to the uniform distribution.
    pub ks: f64,
}

impl Ecdf {
    pub fn from_pvalues(p: &[f64]) -> Result<Ecdf> {
        if p.is_empty() {
            return Err(Error::validation("no p-values"));
        }
        let mut s = p.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let mut ks = 0.0f64;
        for (i, &v) in s.iter().enumerate() {
            ks = ks.max((i + 1) as f64 / n - v).max(v - i as f64 / n);
        }
        let mut points: Vec<(f64, f64)> = Vec::new();
        for (i, &v) in s.iter().enumerate() {
            let f = (i + 1) as f64 / n;
            match points.last_mut() {
                Some(last) if last.0 == v => last.1 = f,
                _ => points.push((v, f)),
            }
        }
        Ok(Ecdf { points, ks })
    }

    /// `F(x)`.
    pub fn at(&self, x: f64) -> f64 {
        self.points.iter().take_while(|(p, _)| *p <= x).last().map_or(0.0, |t| t.1)
    }
}

fn pvalues(rows: &[&ResultRow]) -> Vec<f64> {
    rows.iter().filter_map(|r| r.p).collect()
}

pub fn ecdf_pvalues(rows: &[ResultRow], key: &ScenarioKey, method: &str) -> Result<Ecdf> {
    Ecdf::from_pvalues(&pvalues(&select(rows, key, method)))
        .map_err(|_| Error::validation(format!("no p-values for {method} in {key}")))
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn median_surprise(rows: &[ResultRow], key: &ScenarioKey, method: &str) -> Result<f64> {
    let mut s: Vec<f64> = select(rows, key, method).iter().filter_map(|r| r.surprise).collect();
    median(&mut s).ok_or_else(|| Error::validation(format!("no results for {method} in {key}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Top1 {
    pub probability: f64,
    /// Selection count per variable, most frequent first (ties by name).
    pub frequencies: Vec<(String, usize)>,
    pub replicates: usize,
}

pub fn top1_predictive_prob(rows: &[ResultRow], key: &ScenarioKey, method: &str) -> Result<Top1> {
    let sel: Vec<&ResultRow> = select(rows, key, method)
        .into_iter()
        .filter(|r| r.top1_variable.is_some())
        .collect();
    if sel.is_empty() || sel.iter().any(|r| r.top1_in_truth.is_none()) {
        return Err(Error::validation(format!("no top-1 variables with truth for {method} in {key}")));
    }
    let hits = sel.iter().filter(|r| r.top1_in_truth == Some(true)).count();
    let mut freq: HashMap<String, usize> = HashMap::new();
    for r in &sel {
        *freq.entry(r.top1_variable.clone().unwrap()).or_default() += 1;
    }
    let mut frequencies: Vec<(String, usize)> = freq.into_iter().collect();
    frequencies.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Top1 {
        probability: hits as f64 / sel.len() as f64,
        frequencies,
        replicates: sel.len(),
    })
}

/// Chi-square goodness-of-fit p-value of `counts` against equal
/// probabilities over `categories` cells (cells not listed count zero).
pub fn uniform_gof_pvalue(counts: &[usize], categories: usize) -> f64 {
    let total: usize = counts.iter().sum();
    if categories < 2 || total == 0 {
        return 1.0;
    }
    let e = total as f64 / categories as f64;
    let listed: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let missing = (categories - counts.len().min(categories)) as f64 * e;
    ChiSquared::new((categories - 1) as f64).unwrap().sf(listed + missing)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario_id: u8,
    pub family: Family,
    pub gamma_mult: f64,
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    pub ks: Option<f64>,
    pub reject_05: Option<f64>,
    pub median_surprise: Option<f64>,
    pub top1_prob: Option<f64>,
    pub mean_seconds: f64,
}

/// One summary row per (scenario, gamma multiplier, method), in order of
/// first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(ScenarioKey, String)> = Vec::new();
    let mut seen = HashSet::new();
    for r in rows {
        let k = (ScenarioKey::of_row(r), r.method.clone());
        if seen.insert(k.clone()) {
            order.push(k);
        }
    }
    order
        .into_iter()
        .map(|(key, method)| {
            let sel = select(rows, &key, &method);
            let p = pvalues(&sel);
            let ecdf = Ecdf::from_pvalues(&p).ok();
            SummaryRow {
                scenario_id: key.scenario_id,
                family: key.family,
                gamma_mult: key.gamma_mult,
                replicates: sel.len(),
                failures: sel.iter().filter(|r| r.error.is_some()).count(),
                ks: ecdf.as_ref().map(|e| e.ks),
                reject_05: (!p.is_empty()).then(|| p.iter().filter(|&&v| v < 0.05).count() as f64 / p.len() as f64),
                median_surprise: median_surprise(rows, &key, &method).ok(),
                top1_prob: top1_predictive_prob(rows, &key, &method).ok().map(|t| t.probability),
                mean_seconds: sel.iter().map(|r| r.seconds).sum::<f64>() / sel.len() as f64,
                method,
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Plot-ready ECDF table: `scenario_id,family,gamma_mult,method,p,ecdf`.
pub fn write_ecdf<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["scenario_id", "family", "gamma_mult", "method", "p", "ecdf"])?;
    for s in summarize(rows) {
        let key = ScenarioKey {
            scenario_id: s.scenario_id,
            family: s.family,
            gamma_mult: s.gamma_mult,
        };
        if let Ok(e) = ecdf_pvalues(rows, &key, &s.method) {
            for (p, f) in e.points {
                wr.write_record([
                    s.scenario_id.to_string(),
                    s.family.to_string(),
                    s.gamma_mult.to_string(),
                    s.method.clone(),
                    p.to_string(),
                    f.to_string(),
                ])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

/// Counts lines of a results file without parsing (progress reporting).
pub fn count_rows(path: impl AsRef<Path>) -> Result<usize> {
    let f = File::open(path)?;
    Ok(BufReader::new(f).lines().count().saturating_sub(1))
}
