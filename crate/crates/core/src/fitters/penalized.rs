//! Ridge and LASSO paths by coordinate descent on the IRLS quadratic
//! approximation (glmnet style), with K-fold cross-validation of the penalty.
//!
//! Objective for a fixed `lambda`, with columns standardized internally:
//!
//! ```text
//! -(1/n) loglik(beta0, beta) + lambda * sum_j pf_j * (a |beta_j| + (1 - a) beta_j^2 / 2)
//! ```
//!
//! where `a = 1` for LASSO and `a = 0` for ridge. Gaussian loglik is
//! `-RSS / 2`; Cox uses the Breslow partial likelihood and has no intercept.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::cox::{partial_loglik, RiskSets};
use super::glm::{log1pexp, logistic, negbin_term, profile_theta};
use crate::dataset::{Dataset, Family};
use crate::error::{Error, Result};
use crate::par::{map_indexed, rng_from, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    Ridge,
    Lasso,
}

impl Penalty {
    fn alpha(self) -> f64 {
        match self {
            Penalty::Lasso => 1.0,
            Penalty::Ridge => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathOptions {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    /// Coordinate descent threshold relative to the null deviance.
    pub tol: f64,
    pub max_sweeps: usize,
    pub max_irls: usize,
    /// glmnet's early path termination on saturated deviance ratio.
    pub early_stop: bool,
    /// Negative binomial dispersion; estimated from the intercept-only
    /// model when `None`.
    pub theta: Option<f64>,
    pub execution: Execution,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions {
            n_lambda: 100,
            lambda_min_ratio: 1e-4,
            tol: 1e-7,
            max_sweeps: 100_000,
            max_irls: 25,
            early_stop: true,
            theta: None,
            execution: Execution::Sequential,
        }
    }
}

/// Coefficient path on the original column scale.
#[derive(Debug, Clone)]
pub struct Path {
    pub lambdas: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub betas: Vec<Vec<f64>>,
    pub theta: Option<f64>,
}

impl Path {
    pub fn linear_predictor(&self, k: usize, x: &DMatrix<f64>) -> Vec<f64> {
        let b = &self.betas[k];
        (0..x.nrows())
            .map(|i| self.intercepts[k] + (0..x.ncols()).map(|j| x[(i, j)] * b[j]).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PenalizedFit {
    pub penalty: Penalty,
    pub lambda_grid: Vec<f64>,
    pub cv_loss: Vec<f64>,
    pub lambda_opt: f64,
    pub opt_index: usize,
    pub intercept: f64,
    pub coef_names: Vec<String>,
    pub coef_at_opt: Vec<f64>,
    pub folds: usize,
    pub theta: Option<f64>,
}

impl PenalizedFit {
    pub fn selected(&self) -> Vec<usize> {
        (0..self.coef_at_opt.len()).filter(|&j| self.coef_at_opt[j] != 0.0).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("penalized fit serializes")
    }
}

struct Standardized {
    cols: Vec<Vec<f64>>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    active: Vec<bool>,
}

fn standardize(x: &DMatrix<f64>) -> Standardized {
    let (n, p) = x.shape();
    let mut cols = Vec::with_capacity(p);
    let mut mean = vec![0.0; p];
    let mut sd = vec![1.0; p];
    let mut active = vec![true; p];
    for j in 0..p {
        let c = x.column(j);
        let m = c.sum() / n as f64;
        let v = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        if v <= 1e-24 * (1.0 + m * m) {
            active[j] = false;
            cols.push(vec![0.0; n]);
        } else {
            sd[j] = v.sqrt();
            cols.push(c.iter().map(|v| (v - m) / sd[j]).collect());
        }
    }
    Standardized { cols, mean, sd, active }
}

/// Working weights and responses of the quadratic approximation.
struct Family_ {
    family: Family,
    theta: f64,
    risk: Option<RiskSets>,
}

impl Family_ {
    fn working(&self, y: &[f64], event: Option<&[bool]>, eta: &[f64], w: &mut [f64], z: &mut [f64]) {
        match self.family {
            Family::Normal => {
                w.fill(1.0);
                z.copy_from_slice(y);
            }
            Family::Binomial => {
                for i in 0..y.len() {
                    let m = logistic(eta[i]);
                    let wi = (m * (1.0 - m)).max(1e-5);
                    w[i] = wi;
                    z[i] = eta[i] + (y[i] - m) / wi;
                }
            }
            Family::NegBin => {
                for i in 0..y.len() {
                    let m = eta[i].min(700.0).exp();
                    let wi = (m / (1.0 + m / self.theta)).max(1e-10);
                    w[i] = wi;
                    z[i] = eta[i] + (y[i] - m) / m.max(1e-10);
                }
            }
            Family::CoxPH => {
                let rs = self.risk.as_ref().unwrap();
                let ev = event.unwrap();
                cox_working(rs, ev, eta, w, z);
            }
        }
    }

    fn deviance(&self, y: &[f64], event: Option<&[bool]>, eta: &[f64]) -> f64 {
        match self.family {
            Family::Normal => y.iter().zip(eta).map(|(y, e)| (y - e).powi(2)).sum(),
            Family::Binomial => -2.0 * y.iter().zip(eta).map(|(y, e)| y * e - log1pexp(*e)).sum::<f64>(),
            Family::NegBin => 2.0 * y
                .iter()
                .zip(eta)
                .map(|(&y, &e)| negbin_term(y, y, self.theta) - negbin_term(y, e.exp(), self.theta))
                .sum::<f64>(),
            Family::CoxPH => {
                let rs = self.risk.as_ref().unwrap();
                -2.0 * partial_loglik(rs, eta, event.unwrap())
            }
        }
    }
}

/// Gradient of the Breslow partial log-likelihood in `eta` and the diagonal
/// of its negative Hessian, turned into IRLS weights/working responses.
fn cox_working(rs: &RiskSets, event: &[bool], eta: &[f64], w: &mut [f64], z: &mut [f64]) {
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ng = rs.groups.len();
    let mut s0 = vec![0.0; ng];
    let mut acc = 0.0;
    for (g, &(a, b)) in rs.groups.iter().enumerate().rev() {
        for &i in &rs.order[a..b] {
            acc += (eta[i] - shift).exp();
        }
        s0[g] = acc;
    }
    let mut a1 = 0.0;
    let mut a2 = 0.0;
    for (g, &(a, b)) in rs.groups.iter().enumerate() {
        let d = rs.deaths[g] as f64;
        if d > 0.0 {
            a1 += d / s0[g];
            a2 += d / (s0[g] * s0[g]);
        }
        for &i in &rs.order[a..b] {
            let r = (eta[i] - shift).exp();
            let grad = event[i] as u8 as f64 - r * a1;
            let wi = r * a1 - r * r * a2;
            if wi > 1e-12 {
                w[i] = wi;
                z[i] = eta[i] + grad / wi;
            } else {
                w[i] = 0.0;
                z[i] = eta[i];
            }
        }
    }
}

struct Problem<'a> {
    fam: Family_,
    y: &'a [f64],
    event: Option<&'a [bool]>,
    std: Standardized,
    pf: Vec<f64>,
    alpha: f64,
    n: usize,
    intercept: bool,
}

struct State {
    b0: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
}

impl Problem<'_> {
    fn p(&self) -> usize {
        self.std.cols.len()
    }

    /// Solves the penalized problem at `lambda`, warm-started from `st`.
    fn solve(&self, lambda: f64, st: &mut State, opts: &PathOptions, scale: f64) {
        let n = self.n;
        let nf = n as f64;
        let p = self.p();
        let mut w = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut r = vec![0.0; n];
        let mut xwx = vec![0.0; p];
        let irls = if self.fam.family == Family::Normal { 1 } else { opts.max_irls };
        let mut dev_old = f64::INFINITY;
        for _ in 0..irls {
            self.fam.working(self.y, self.event, &st.eta, &mut w, &mut z);
            for i in 0..n {
                r[i] = w[i] * (z[i] - st.eta[i]);
            }
            let sw: f64 = w.iter().sum();
            for j in 0..p {
                xwx[j] = if self.std.active[j] {
                    self.std.cols[j].iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>() / nf
                } else {
                    0.0
                };
            }
            let thresh = opts.tol * scale;
            let mut in_active: Vec<bool> = st.beta.iter().map(|&b| b != 0.0).collect();
            let mut sweeps = 0;
            // r holds w * (z - eta)
            let cd_pass = |only_active: bool, in_active: &mut Vec<bool>, st: &mut State, r: &mut Vec<f64>| -> f64 {
                let mut max_change = 0.0f64;
                if self.intercept && sw > 0.0 {
                    let d = r.iter().sum::<f64>() / sw;
                    if d != 0.0 {
                        st.b0 += d;
                        for i in 0..n {
                            r[i] -= w[i] * d;
                            st.eta[i] += d;
                        }
                        max_change = max_change.max(sw / nf * d * d);
                    }
                }
                for j in 0..p {
                    if !self.std.active[j] || (only_active && !in_active[j]) || xwx[j] == 0.0 {
                        continue;
                    }
                    let xj = &self.std.cols[j];
                    let bj = st.beta[j];
                    let g = xj.iter().zip(r.iter()).map(|(x, r)| x * r).sum::<f64>() / nf + xwx[j] * bj;
                    let l1 = lambda * self.alpha * self.pf[j];
                    let l2 = lambda * (1.0 - self.alpha) * self.pf[j];
                    let new = if l1.is_infinite() || l2.is_infinite() {
                        if self.pf[j] == 0.0 { g / xwx[j] } else { 0.0 }
                    } else {
                        soft(g, l1) / (xwx[j] + l2)
                    };
                    let d = new - bj;
                    if d != 0.0 {
                        st.beta[j] = new;
                        for i in 0..n {
                            r[i] -= w[i] * d * xj[i];
                            st.eta[i] += d * xj[i];
                        }
                        max_change = max_change.max(xwx[j] * d * d);
                        in_active[j] = true;
                    }
                }
                max_change
            };
            loop {
                sweeps += 1;
                let full = cd_pass(false, &mut in_active, st, &mut r);
                if full < thresh || sweeps >= opts.max_sweeps {
                    break;
                }
                loop {
                    sweeps += 1;
                    if cd_pass(true, &mut in_active, st, &mut r) < thresh || sweeps >= opts.max_sweeps {
                        break;
                    }
                }
            }
            if self.fam.family == Family::Normal {
                break;
            }
            let dev = self.fam.deviance(self.y, self.event, &st.eta);
            if (dev_old - dev).abs() <= 1e-9 * (dev.abs() + 0.1) {
                break;
            }
            dev_old = dev;
        }
    }
}

#[inline]
fn soft(g: f64, t: f64) -> f64 {
    if g > t {
        g - t
    } else if g < -t {
        g + t
    } else {
        0.0
    }
}

fn null_theta(family: Family, y: &[f64], opts: &PathOptions) -> f64 {
    match (family, opts.theta) {
        (Family::NegBin, Some(t)) => t,
        (Family::NegBin, None) => {
            let m = y.iter().sum::<f64>() / y.len() as f64;
            let eta = vec![m.max(1e-10).ln(); y.len()];
            profile_theta(y, &eta, 1.0)
        }
        _ => f64::NAN,
    }
}

fn saturated_deviance_offset(family: Family, rs: Option<&RiskSets>) -> f64 {
    // -2 * saturated Breslow log partial likelihood: 2 * sum d_k log d_k
    match (family, rs) {
        (Family::CoxPH, Some(rs)) => {
            2.0 * rs.deaths.iter().filter(|&&d| d > 0).map(|&d| d as f64 * (d as f64).ln()).sum::<f64>()
        }
        _ => 0.0,
    }
}

/// Fits a penalized path. When `lambdas` is `None` a log-spaced grid from the
/// smallest penalty zeroing every penalized coefficient is used.
#[allow(clippy::too_many_arguments)]
pub fn fit_path(
    family: Family,
    x: &DMatrix<f64>,
    y: &[f64],
    event: Option<&[bool]>,
    penalty: Penalty,
    penalty_factor: Option<&[f64]>,
    lambdas: Option<&[f64]>,
    opts: &PathOptions,
) -> Result<Path> {
    let n = y.len();
    let p = x.ncols();
    if x.nrows() != n {
        return Err(Error::validation("design and outcome lengths differ"));
    }
    let pf: Vec<f64> = match penalty_factor {
        Some(f) if f.len() == p => f.to_vec(),
        Some(_) => return Err(Error::validation("penalty factor length mismatch")),
        None => vec![1.0; p],
    };
    match family {
        Family::Normal if crate::linalg::var_pop(y) <= 0.0 => {
            return Err(Error::Degenerate("outcome has zero variance".into()))
        }
        Family::Binomial if y.iter().all(|&v| v == y[0]) => {
            return Err(Error::Degenerate("binary outcome has a single class".into()))
        }
        Family::NegBin if y.iter().all(|&v| v == y[0]) => {
            return Err(Error::Degenerate("count outcome is constant".into()))
        }
        Family::CoxPH if !event.is_some_and(|e| e.iter().any(|&v| v)) => {
            return Err(Error::Degenerate("no events".into()))
        }
        _ => {}
    }
    let risk = (family == Family::CoxPH).then(|| RiskSets::new(y, event.unwrap()));
    let theta = null_theta(family, y, opts);
    let prob = Problem {
        fam: Family_ { family, theta, risk },
        y,
        event,
        std: standardize(x),
        pf,
        alpha: penalty.alpha(),
        n,
        intercept: family.has_intercept(),
    };

    // null model: unpenalized columns only
    let mut st = State {
        b0: 0.0,
        beta: vec![0.0; p],
        eta: vec![0.0; n],
    };
    if prob.intercept {
        let m = y.iter().sum::<f64>() / n as f64;
        st.b0 = match family {
            Family::Normal => m,
            Family::Binomial => (m / (1.0 - m)).ln(),
            Family::NegBin => m.max(1e-10).ln(),
            Family::CoxPH => 0.0,
        };
        st.eta.fill(st.b0);
    }
    let null_dev = prob.fam.deviance(y, event, &st.eta);
    let sat = saturated_deviance_offset(family, prob.fam.risk.as_ref());
    let scale = ((null_dev - sat) / n as f64).abs().max(1e-12);
    prob.solve(f64::INFINITY, &mut st, opts, scale);
    let null_dev = prob.fam.deviance(y, event, &st.eta) - sat;

    let grid: Vec<f64> = match lambdas {
        Some(l) => l.to_vec(),
        None => {
            let mut w = vec![0.0; n];
            let mut z = vec![0.0; n];
            prob.fam.working(y, event, &st.eta, &mut w, &mut z);
            let mut lmax = 0.0f64;
            for j in 0..p {
                if !prob.std.active[j] || prob.pf[j] == 0.0 {
                    continue;
                }
                let g: f64 = prob.std.cols[j]
                    .iter()
                    .zip(w.iter().zip(&z).zip(&st.eta))
                    .map(|(x, ((w, z), e))| x * w * (z - e))
                    .sum::<f64>()
                    / n as f64;
                lmax = lmax.max(g.abs() / prob.pf[j]);
            }
            if penalty == Penalty::Ridge {
                lmax /= 1e-3;
            }
            if lmax <= 0.0 {
                lmax = 1e-6;
            }
            let nl = opts.n_lambda.max(1);
            (0..nl)
                .map(|k| lmax * opts.lambda_min_ratio.powf(k as f64 / (nl - 1).max(1) as f64))
                .collect()
        }
    };

    let mut path = Path {
        lambdas: Vec::with_capacity(grid.len()),
        intercepts: Vec::with_capacity(grid.len()),
        betas: Vec::with_capacity(grid.len()),
        theta: (family == Family::NegBin).then_some(theta),
    };
    let mut prev_ratio = 0.0;
    for (k, &lam) in grid.iter().enumerate() {
        prob.solve(lam, &mut st, opts, scale);
        let (b0, beta) = unstandardize(&prob.std, st.b0, &st.beta, prob.intercept);
        path.lambdas.push(lam);
        path.intercepts.push(b0);
        path.betas.push(beta);
        if opts.early_stop && lambdas.is_none() {
            let dev = prob.fam.deviance(y, event, &st.eta) - sat;
            let ratio = if null_dev > 0.0 { 1.0 - dev / null_dev } else { 0.0 };
            if ratio > 0.999 || (k >= 5 && ratio - prev_ratio < 1e-5 * ratio) {
                break;
            }
            prev_ratio = ratio;
        }
    }
    Ok(path)
}

fn unstandardize(s: &Standardized, b0: f64, beta: &[f64], intercept: bool) -> (f64, Vec<f64>) {
    let mut out = vec![0.0; beta.len()];
    let mut icpt = b0;
    for j in 0..beta.len() {
        if s.active[j] && beta[j] != 0.0 {
            out[j] = beta[j] / s.sd[j];
            icpt -= out[j] * s.mean[j];
        }
    }
    (if intercept { icpt } else { 0.0 }, out)
}

/// Held-out loss of path solution `k`.
fn heldout_loss(family: Family, theta: Option<f64>, y: &[f64], eta: &[f64]) -> f64 {
    match family {
        Family::Normal => y.iter().zip(eta).map(|(y, e)| (y - e).powi(2)).sum(),
        Family::Binomial => -2.0 * y.iter().zip(eta).map(|(y, e)| y * e - log1pexp(*e)).sum::<f64>(),
        Family::NegBin => {
            let th = theta.unwrap();
            2.0 * y.iter().zip(eta).map(|(&y, &e)| negbin_term(y, y, th) - negbin_term(y, e.exp(), th)).sum::<f64>()
        }
        Family::CoxPH => unreachable!("Cox CV uses the grouped partial likelihood"),
    }
}

/// Assigns each of `n` observations to one of `k` folds after a seeded
/// shuffle.
pub fn fold_ids(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed, &[0xF01D]));
    let mut out = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        out[i] = pos % k;
    }
    out
}

/// Cross-validated penalized fit on the expanded covariates of `d`
/// (optionally plus an unpenalized treatment column).
pub fn fit_penalized(
    d: &Dataset,
    penalty: Penalty,
    folds: usize,
    exclude_treatment: bool,
    seed: u64,
    opts: &PathOptions,
) -> Result<PenalizedFit> {
    let ex = d.expand_covariates();
    let mut x = ex.matrix.clone();
    let mut names = ex.names.clone();
    let mut pf = vec![1.0; x.ncols()];
    if !exclude_treatment {
        let z = d.treatment_centered.as_ref().unwrap_or(&d.treatment_raw);
        let nc = x.ncols();
        x = x.insert_column(nc, 0.0);
        let last = x.ncols() - 1;
        x.column_mut(last).copy_from_slice(z);
        names.push(super::TREATMENT.to_string());
        pf.push(0.0);
    }
    cv_path(d.family, &x, &names, &d.outcome, d.events(), penalty, &pf, folds, seed, opts)
}

#[allow(clippy::too_many_arguments)]
pub fn cv_path(
    family: Family,
    x: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    event: Option<&[bool]>,
    penalty: Penalty,
    pf: &[f64],
    folds: usize,
    seed: u64,
    opts: &PathOptions,
) -> Result<PenalizedFit> {
    let n = y.len();
    if folds < 2 || n < folds {
        return Err(Error::Degenerate(format!("cannot form {folds} folds from {n} observations")));
    }
    let full = fit_path(family, x, y, event, penalty, Some(pf), None, opts)?;
    let grid = full.lambdas.clone();
    let ids = fold_ids(n, folds, seed);
    let theta = full.theta;
    let mut fold_opts = opts.clone();
    fold_opts.theta = theta;

    let per_fold: Vec<Result<Vec<f64>>> = map_indexed(folds, opts.execution, |f| {
        let train: Vec<usize> = (0..n).filter(|&i| ids[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| ids[i] == f).collect();
        if test.is_empty() {
            return Err(Error::Degenerate(format!("fold {f} is empty")));
        }
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let et: Option<Vec<bool>> = event.map(|e| train.iter().map(|&i| e[i]).collect());
        let path = match fit_path(family, &xt, &yt, et.as_deref(), penalty, Some(pf), Some(&grid), &fold_opts) {
            Ok(p) => p,
            // a training split without signal (e.g. one class) contributes
            // the null model at every penalty
            Err(Error::Degenerate(_)) => null_path(family, &yt, &grid, x.ncols()),
            Err(e) => return Err(e),
        };
        let mut losses = Vec::with_capacity(grid.len());
        for k in 0..grid.len() {
            let eta_all = path.linear_predictor(k, x);
            let loss = if family == Family::CoxPH {
                let ev = event.unwrap();
                let rs_all = RiskSets::new(y, ev);
                let eta_tr: Vec<f64> = train.iter().map(|&i| eta_all[i]).collect();
                let et = et.as_deref().unwrap();
                let rs_tr = RiskSets::new(&yt, et);
                -2.0 * (partial_loglik(&rs_all, &eta_all, ev) - partial_loglik(&rs_tr, &eta_tr, et))
            } else {
                let yv: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                let ev: Vec<f64> = test.iter().map(|&i| eta_all[i]).collect();
                heldout_loss(family, theta, &yv, &ev)
            };
            losses.push(loss);
        }
        Ok(losses)
    });
    let mut cv_loss = vec![0.0; grid.len()];
    for f in per_fold {
        for (acc, l) in cv_loss.iter_mut().zip(f?) {
            *acc += l / n as f64;
        }
    }
    let opt_index = cv_loss
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Convergence("cross-validation loss not finite".into()))?;
    Ok(PenalizedFit {
        penalty,
        lambda_opt: grid[opt_index],
        lambda_grid: grid,
        cv_loss,
        opt_index,
        intercept: full.intercepts[opt_index],
        coef_names: names.to_vec(),
        coef_at_opt: full.betas[opt_index].clone(),
        folds,
        theta,
    })
}

fn null_path(family: Family, y: &[f64], grid: &[f64], p: usize) -> Path {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let b0 = match family {
        Family::Normal => m,
        Family::Binomial => (m.clamp(1e-6, 1.0 - 1e-6) / (1.0 - m.clamp(1e-6, 1.0 - 1e-6))).ln(),
        Family::NegBin => m.max(1e-10).ln(),
        Family::CoxPH => 0.0,
    };
    Path {
        lambdas: grid.to_vec(),
        intercepts: vec![b0; grid.len()],
        betas: vec![vec![0.0; p]; grid.len()],
        theta: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitters::{glm, FitOptions};
    use crate::par::rng_from;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = rng_from(seed, &[]);
        let x: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let y = (0..n)
            .map(|i| 1.0 + 2.0 * x[(i, 0)] + { let e: f64 = StandardNormal.sample(&mut rng); e })
            .collect();
        (x, y)
    }

    /// Plain cyclic coordinate descent on the standardized problem, written
    /// independently of the production solver.
    fn reference_lasso(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> (f64, Vec<f64>) {
        let (n, p) = x.shape();
        let nf = n as f64;
        let mean: Vec<f64> = (0..p).map(|j| x.column(j).sum() / nf).collect();
        let sd: Vec<f64> = (0..p)
            .map(|j| (x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / nf).sqrt())
            .collect();
        let ym = y.iter().sum::<f64>() / nf;
        let xs = DMatrix::from_fn(n, p, |i, j| (x[(i, j)] - mean[j]) / sd[j]);
        let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();
        let mut b = vec![0.0; p];
        for _ in 0..100_000 {
            let mut delta = 0.0f64;
            for j in 0..p {
                let mut rho = 0.0;
                for i in 0..n {
                    let fit: f64 = (0..p).filter(|&k| k != j).map(|k| xs[(i, k)] * b[k]).sum();
                    rho += xs[(i, j)] * (yc[i] - fit);
                }
                rho /= nf;
                let new = if rho > lambda {
                    rho - lambda
                } else if rho < -lambda {
                    rho + lambda
                } else {
                    0.0
                };
                delta = delta.max((new - b[j]).abs());
                b[j] = new;
            }
            if delta < 1e-12 {
                break;
            }
        }
        let beta: Vec<f64> = (0..p).map(|j| b[j] / sd[j]).collect();
        let b0 = ym - (0..p).map(|j| beta[j] * mean[j]).sum::<f64>();
        (b0, beta)
    }

    fn tight() -> PathOptions {
        PathOptions {
            tol: 1e-20,
            ..Default::default()
        }
    }

    #[test]
    fn lasso_matches_reference_coordinate_descent() {
        let (x, y) = gaussian_problem(50, 5, 3);
        for lam in [0.5, 0.1, 0.02] {
            let path = fit_path(Family::Normal, &x, &y, None, Penalty::Lasso, None, Some(&[lam]), &tight()).unwrap();
            let (b0, beta) = reference_lasso(&x, &y, lam);
            assert!((path.intercepts[0] - b0).abs() < 1e-8);
            for j in 0..5 {
                assert!((path.betas[0][j] - beta[j]).abs() < 1e-8, "lambda {lam} coef {j}");
                assert_eq!(path.betas[0][j] == 0.0, beta[j] == 0.0);
            }
        }
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        for fam in [Family::Normal, Family::Binomial] {
            let (x, y) = gaussian_problem(80, 6, 9);
            let y: Vec<f64> = if fam == Family::Binomial {
                y.iter().map(|v| (*v > 1.0) as u8 as f64).collect()
            } else {
                y
            };
            let path = fit_path(fam, &x, &y, None, Penalty::Lasso, None, None, &PathOptions::default()).unwrap();
            assert!(path.betas[0].iter().all(|&b| b == 0.0));
            assert!(path.betas.last().unwrap().iter().any(|&b| b != 0.0));
        }
    }

    #[test]
    fn ridge_at_zero_is_least_squares() {
        let (x, y) = gaussian_problem(60, 4, 4);
        let path = fit_path(Family::Normal, &x, &y, None, Penalty::Ridge, None, Some(&[0.0]), &tight()).unwrap();
        let xi = x.clone().insert_column(0, 1.0);
        let ols = glm::fit_normal(&xi, &y, &FitOptions::default()).unwrap();
        assert!((path.intercepts[0] - ols.coef[0]).abs() < 1e-6);
        for j in 0..4 {
            assert!((path.betas[0][j] - ols.coef[j + 1]).abs() < 1e-6);
        }
    }

    #[test]
    fn cv_is_deterministic_and_picks_from_grid() {
        let (x, y) = gaussian_problem(100, 8, 12);
        let names: Vec<String> = (0..8).map(|j| format!("v{j}")).collect();
        let pf = vec![1.0; 8];
        let opts = PathOptions::default();
        let a = cv_path(Family::Normal, &x, &names, &y, None, Penalty::Lasso, &pf, 10, 5, &opts).unwrap();
        let b = cv_path(Family::Normal, &x, &names, &y, None, Penalty::Lasso, &pf, 10, 5, &opts).unwrap();
        assert_eq!(a.lambda_opt, b.lambda_opt);
        assert!(a.lambda_grid.contains(&a.lambda_opt));
        assert!(a.cv_loss[a.opt_index].is_finite());
        assert!(a.selected().contains(&0));
        assert_eq!(fold_ids(10, 3, 1), fold_ids(10, 3, 1));
    }

    #[test]
    fn penalized_cox_and_negbin_run() {
        let mut rng = rng_from(77, &[]);
        let n = 200;
        let x: DMatrix<f64> = DMatrix::from_fn(n, 5, |_, _| StandardNormal.sample(&mut rng));
        let t: Vec<f64> = (0..n)
            .map(|i| rand_distr::Exp::<f64>::new((0.8 * x[(i, 0)]).exp()).unwrap().sample(&mut rng))
            .collect();
        let ev: Vec<bool> = (0..n).map(|i| i % 4 != 0).collect();
        let names: Vec<String> = (0..5).map(|j| format!("v{j}")).collect();
        let fit = cv_path(Family::CoxPH, &x, &names, &t, Some(&ev), Penalty::Lasso, &[1.0; 5], 5, 1, &PathOptions::default())
            .unwrap();
        assert!(fit.selected().contains(&0));
        assert!(fit.coef_at_opt[0] > 0.3);

        let y: Vec<f64> = (0..n)
            .map(|i| rand_distr::Poisson::new((0.5 + 0.7 * x[(i, 1)]).exp()).unwrap().sample(&mut rng))
            .collect();
        let fit = cv_path(Family::NegBin, &x, &names, &y, None, Penalty::Ridge, &[1.0; 5], 5, 1, &PathOptions::default())
            .unwrap();
        assert!(fit.coef_at_opt[1] > 0.3);
        assert!(fit.theta.unwrap() > 1.0);
    }

    #[test]
    fn degenerate_outcome_is_an_error() {
        let x = DMatrix::from_fn(20, 2, |i, j| (i * (j + 1)) as f64);
        let y = vec![1.0; 20];
        assert!(matches!(
            fit_path(Family::Normal, &x, &y, None, Penalty::Lasso, None, None, &PathOptions::default()),
            Err(Error::Degenerate(_))
        ));
    }
}
