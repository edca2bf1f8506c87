//! Likelihood-ratio tests of all treatment-covariate interactions, with
//! asymptotic (exact F for the normal model) and parametric-bootstrap nulls.

use log::{debug, warn};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, Gamma, Poisson, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

use super::{at_least, Method, TestResult};
use crate::dataset::{Dataset, ExpandedCovariates, Family};
use crate::error::{Error, Result};
use crate::fitters::cox::BaselineHazard;
use crate::fitters::glm::logistic;
use crate::fitters::{fit_design, fit_matrix, AdjustedDesign, FitOptions, FittedModel, ModelDesign, Parameterization, RawFit};
use crate::par::{map_indexed, rng_from, Execution};

/// `2 (l1 - l0)`; for the normal model with profiled variance this is
/// `n log(RSS0 / RSS1)`.
fn deviance_drop(family: Family, n: usize, ll0: f64, ll1: f64, rss0: Option<f64>, rss1: Option<f64>) -> f64 {
    match family {
        Family::Normal => n as f64 * (rss0.unwrap() / rss1.unwrap()).ln(),
        _ => 2.0 * (ll1 - ll0),
    }
    .max(0.0)
}

/// Asymptotic p-value of a nested comparison adding `q` columns; exact F
/// for the normal model.
pub(crate) fn nested_pvalue(family: Family, n: usize, p_full: usize, q: usize, stat: f64, rss: Option<(f64, f64)>) -> f64 {
    match family {
        Family::Normal => {
            let (rss0, rss1) = rss.unwrap();
            let df2 = n as f64 - p_full as f64;
            let f = ((rss0 - rss1).max(0.0) / q as f64) / (rss1 / df2);
            FisherSnedecor::new(q as f64, df2).expect("valid F dfs").sf(f)
        }
        _ => ChiSquared::new(q as f64).expect("positive df").sf(stat),
    }
}

/// Fits the main-effects and interaction models for a comparison.
pub(crate) fn fit_pair(d: &Dataset, main: &ModelDesign, full: &ModelDesign) -> Result<(FittedModel, FittedModel)> {
    let opts = FitOptions::default();
    Ok((fit_design(d, main, &opts)?, fit_design(d, full, &opts)?))
}

pub(crate) fn compare(d: &Dataset, m0: &FittedModel, m1: &FittedModel) -> (f64, f64, usize) {
    let q = m1.coef.len() - m0.coef.len();
    let stat = deviance_drop(d.family, d.n(), m0.loglik, m1.loglik, m0.rss, m1.rss);
    let p = nested_pvalue(d.family, d.n(), m1.coef.len(), q, stat, m0.rss.zip(m1.rss));
    (stat, p, q)
}

/// Asymptotic LRT of all `treatment x modifier` interactions.
pub fn lrt_interaction(
    d: &Dataset,
    adjusted: &AdjustedDesign,
    param: Parameterization,
    modifiers: &ExpandedCovariates,
) -> Result<TestResult> {
    let main = ModelDesign::main_effects(d, adjusted, param)?;
    let full = ModelDesign::with_interactions(d, adjusted, param, modifiers)?;
    let (m0, m1) = fit_pair(d, &main, &full)?;
    let (stat, p, q) = compare(d, &m0, &m1);
    TestResult::new(Method::LrtAsymptotic, stat, p.max(f64::MIN_POSITIVE), q, None)
}

#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub b: usize,
    pub seed: u64,
    pub execution: Execution,
    /// Fraction of failed replicate fits beyond which the test aborts.
    pub max_failure_rate: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            b: 1000,
            seed: 0,
            execution: Execution::Parallel,
            max_failure_rate: 0.05,
        }
    }
}

/// Draws new outcomes from the fitted main-effects model.
enum Simulator {
    Normal { eta: Vec<f64>, sigma: f64 },
    Binomial { eta: Vec<f64> },
    NegBin { eta: Vec<f64>, theta: f64 },
    Cox {
        eta: Vec<f64>,
        hazard: BaselineHazard,
        cens_eta: Vec<f64>,
        cens_hazard: BaselineHazard,
        end: f64,
    },
}

impl Simulator {
    fn new(d: &Dataset, main: &ModelDesign, m0: &FittedModel) -> Result<Self> {
        let eta = m0.linear_predictor.clone();
        Ok(match d.family {
            Family::Normal => Simulator::Normal {
                sigma: (m0.rss.unwrap() / d.n() as f64).sqrt(),
                eta,
            },
            Family::Binomial => Simulator::Binomial { eta },
            Family::NegBin => Simulator::NegBin {
                theta: m0.theta.unwrap(),
                eta,
            },
            Family::CoxPH => {
                let ev = d.events().unwrap();
                // censoring process: same covariates, censoring as the event
                let cens: Vec<bool> = ev.iter().map(|e| !e).collect();
                let dc = d.with_outcome(d.outcome.clone(), Some(cens.clone()));
                let mc = fit_design(&dc, main, &FitOptions::default())?;
                Simulator::Cox {
                    hazard: BaselineHazard::breslow(&d.outcome, ev, &eta),
                    cens_hazard: BaselineHazard::breslow(&d.outcome, &cens, &mc.linear_predictor),
                    cens_eta: mc.linear_predictor,
                    end: d.outcome.iter().copied().fold(0.0, f64::max),
                    eta,
                }
            }
        })
    }

    fn draw(&self, rng: &mut crate::par::Rng) -> (Vec<f64>, Option<Vec<bool>>) {
        match self {
            Simulator::Normal { eta, sigma } => (
                eta.iter().map(|e| e + sigma * rng.sample::<f64, _>(StandardNormal)).collect(),
                None,
            ),
            Simulator::Binomial { eta } => (
                eta.iter().map(|&e| (rng.random::<f64>() < logistic(e)) as u8 as f64).collect(),
                None,
            ),
            Simulator::NegBin { eta, theta } => (
                eta.iter()
                    .map(|&e| {
                        let g = Gamma::new(*theta, e.exp() / theta).unwrap().sample(rng);
                        if g > 0.0 {
                            Poisson::new(g).unwrap().sample(rng)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                None,
            ),
            Simulator::Cox {
                eta,
                hazard,
                cens_eta,
                cens_hazard,
                end,
            } => {
                let mut y = Vec::with_capacity(eta.len());
                let mut ev = Vec::with_capacity(eta.len());
                for i in 0..eta.len() {
                    let e1: f64 = rng.sample(Exp1);
                    let e2: f64 = rng.sample(Exp1);
                    let t_event = hazard.invert(e1 / eta[i].exp()).unwrap_or(f64::INFINITY);
                    let t_cens = cens_hazard.invert(e2 / cens_eta[i].exp()).unwrap_or(*end);
                    ev.push(t_event <= t_cens);
                    y.push(t_event.min(t_cens));
                }
                (y, Some(ev))
            }
        }
    }
}

/// Parametric-bootstrap LRT of all `treatment x modifier` interactions.
pub fn bootstrap_lrt(
    d: &Dataset,
    adjusted: &AdjustedDesign,
    param: Parameterization,
    modifiers: &ExpandedCovariates,
    opts: &BootstrapOptions,
) -> Result<TestResult> {
    if opts.b < 99 {
        return Err(Error::Config(format!("at least 99 bootstrap replicates required, got {}", opts.b)));
    }
    let main = ModelDesign::main_effects(d, adjusted, param)?;
    let full = ModelDesign::with_interactions(d, adjusted, param, modifiers)?;
    let (m0, m1) = fit_pair(d, &main, &full)?;
    let (observed, _, q) = compare(d, &m0, &m1);
    let sim = Simulator::new(d, &main, &m0)?;
    let n = d.n();
    let fopts = FitOptions::default();
    let stats: Vec<Result<f64>> = map_indexed(opts.b, opts.execution, |b| {
        let mut rng = rng_from(opts.seed, &[b as u64]);
        let (y, ev) = sim.draw(&mut rng);
        let f0: RawFit = fit_matrix(d.family, &main.x, &y, ev.as_deref(), &fopts)?;
        let f1: RawFit = fit_matrix(d.family, &full.x, &y, ev.as_deref(), &fopts)?;
        Ok(deviance_drop(d.family, n, f0.loglik, f1.loglik, f0.rss, f1.rss))
    });
    let mut ok = 0;
    let mut exceed = 0;
    let mut failures = Vec::new();
    for (b, s) in stats.into_iter().enumerate() {
        match s {
            Ok(v) => {
                ok += 1;
                exceed += at_least(v, observed) as usize;
            }
            Err(e) => failures.push((b, e)),
        }
    }
    if failures.len() as f64 > opts.max_failure_rate * opts.b as f64 {
        let first: Vec<String> = failures.iter().take(3).map(|(b, e)| format!("replicate {b}: {e}")).collect();
        return Err(Error::Convergence(format!(
            "{} of {} bootstrap refits failed (e.g. {})",
            failures.len(),
            opts.b,
            first.join("; ")
        )));
    }
    if !failures.is_empty() {
        warn!("{} of {} bootstrap refits failed and were dropped", failures.len(), opts.b);
    }
    debug!("bootstrap LRT: D = {observed:.4}, {exceed} of {ok} replicates at least as large (q = {q})");
    TestResult::new(Method::LrtBootstrap, observed, super::mc_pvalue(exceed, ok), ok, Some(opts.seed))
}
