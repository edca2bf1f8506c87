//! Cox proportional hazards via Newton-Raphson on the Breslow partial
//! likelihood, plus the risk-set quantities shared by score residuals,
//! penalized fitting and baseline-hazard simulation.

use nalgebra::{DMatrix, DVector};

use super::glm::{gradient_tolerance, RawFit};
use super::FitOptions;
use crate::error::{Error, Result};
use crate::linalg::solve_spd;

/// Subjects grouped by distinct observed time, in increasing time order.
#[derive(Debug, Clone)]
pub struct RiskSets {
    /// Subject indices sorted by increasing time.
    pub order: Vec<usize>,
    /// `(start, end)` ranges into `order` sharing one distinct time.
    pub groups: Vec<(usize, usize)>,
    pub times: Vec<f64>,
    /// Number of events at each distinct time.
    pub deaths: Vec<usize>,
}

impl RiskSets {
    pub fn new(time: &[f64], event: &[bool]) -> Self {
        let mut order: Vec<usize> = (0..time.len()).collect();
        order.sort_by(|&a, &b| time[a].total_cmp(&time[b]).then(a.cmp(&b)));
        let mut groups = Vec::new();
        let mut times = Vec::new();
        let mut deaths = Vec::new();
        let mut start = 0;
        while start < order.len() {
            let t = time[order[start]];
            let mut end = start;
            let mut d = 0;
            while end < order.len() && time[order[end]] == t {
                d += event[order[end]] as usize;
                end += 1;
            }
            groups.push((start, end));
            times.push(t);
            deaths.push(d);
            start = end;
        }
        RiskSets {
            order,
            groups,
            times,
            deaths,
        }
    }

    pub fn n_events(&self) -> usize {
        self.deaths.iter().sum()
    }
}

/// Breslow partial log-likelihood for linear predictor `eta`.
pub fn partial_loglik(rs: &RiskSets, eta: &[f64], event: &[bool]) -> f64 {
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut ll = 0.0;
    for (g, &(a, b)) in rs.groups.iter().enumerate().rev() {
        for &i in &rs.order[a..b] {
            s0 += (eta[i] - shift).exp();
        }
        if rs.deaths[g] > 0 {
            let ls0 = shift + s0.ln();
            for &i in &rs.order[a..b] {
                if event[i] {
                    ll += eta[i] - ls0;
                }
            }
        }
    }
    ll
}

/// Log partial likelihood, gradient and negative Hessian.
pub fn loglik_grad_info(
    rs: &RiskSets,
    x: &DMatrix<f64>,
    eta: &[f64],
    event: &[bool],
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut xi = DVector::zeros(p);
    for (g, &(a, b)) in rs.groups.iter().enumerate().rev() {
        for &i in &rs.order[a..b] {
            let r = (eta[i] - shift).exp();
            s0 += r;
            for j in 0..p {
                xi[j] = x[(i, j)];
            }
            s1.axpy(r, &xi, 1.0);
            s2.ger(r, &xi, &xi, 1.0);
        }
        let d = rs.deaths[g];
        if d > 0 {
            let ls0 = shift + s0.ln();
            for &i in &rs.order[a..b] {
                if event[i] {
                    ll += eta[i] - ls0;
                    for j in 0..p {
                        grad[j] += x[(i, j)];
                    }
                }
            }
            let df = d as f64;
            let xbar = &s1 / s0;
            grad.axpy(-df, &xbar, 1.0);
            info += (&s2 / s0 - &xbar * xbar.transpose()) * df;
        }
    }
    (ll, grad, info)
}

pub fn fit_cox(x: &DMatrix<f64>, time: &[f64], event: &[bool], opts: &FitOptions) -> Result<RawFit> {
    let n = time.len();
    let p = x.ncols();
    let rs = RiskSets::new(time, event);
    if rs.n_events() == 0 {
        return Err(Error::Degenerate("no events in Cox data".into()));
    }
    let mut beta = DVector::zeros(p);
    let mut eta = vec![0.0; n];
    let tol = gradient_tolerance(opts, n);
    let (mut ll, mut grad, mut info) = loglik_grad_info(&rs, x, &eta, event);
    if p > 0 {
        super::glm::check_full_rank(&info, opts.names.as_deref())?;
    }
    let mut iter = 0;
    while p > 0 && grad.amax() > tol * 1e-2 && iter < opts.max_iter {
        iter += 1;
        let step = solve_spd(&info, &grad).ok_or_else(|| Error::Convergence("Cox information singular".into()))?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let eta_c: Vec<f64> = (x * &cand).iter().copied().collect();
            let ll_c = partial_loglik(&rs, &eta_c, event);
            if ll_c.is_finite() && ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                eta = eta_c;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        (ll, grad, info) = loglik_grad_info(&rs, x, &eta, event);
        if !accepted || step.amax() * scale < 1e-13 * (1.0 + beta.amax()) {
            break;
        }
    }
    if beta.iter().any(|b| b.abs() > opts.separation_cap) {
        return Err(Error::Separation("Cox coefficient diverging (monotone likelihood)".into()));
    }
    let max_gradient = if p > 0 { grad.amax() } else { 0.0 };
    let converged = max_gradient <= tol;
    if !converged && opts.require_convergence {
        return Err(Error::Convergence(format!("Cox model: gradient {max_gradient:.2e} after {iter} iterations")));
    }
    Ok(RawFit {
        coef: beta,
        eta,
        loglik: ll,
        iterations: iter,
        converged,
        max_gradient,
        theta: None,
        rss: None,
    })
}

/// Breslow baseline cumulative hazard as a step function at the distinct
/// event times.
#[derive(Debug, Clone)]
pub struct BaselineHazard {
    pub times: Vec<f64>,
    pub cumhaz: Vec<f64>,
}

impl BaselineHazard {
    pub fn breslow(time: &[f64], event: &[bool], eta: &[f64]) -> Self {
        let rs = RiskSets::new(time, event);
        let mut s0 = vec![0.0; rs.groups.len()];
        let mut acc = 0.0;
        for (g, &(a, b)) in rs.groups.iter().enumerate().rev() {
            for &i in &rs.order[a..b] {
                acc += eta[i].exp();
            }
            s0[g] = acc;
        }
        let mut times = Vec::new();
        let mut cumhaz = Vec::new();
        let mut h = 0.0;
        for g in 0..rs.groups.len() {
            if rs.deaths[g] > 0 {
                h += rs.deaths[g] as f64 / s0[g];
                times.push(rs.times[g]);
                cumhaz.push(h);
            }
        }
        BaselineHazard { times, cumhaz }
    }

    /// Smallest jump time at which the cumulative hazard reaches `target`;
    /// `None` when the target exceeds the hazard at the last event time.
    pub fn invert(&self, target: f64) -> Option<f64> {
        let idx = self.cumhaz.partition_point(|&h| h < target);
        self.times.get(idx).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn risk_sets_group_ties() {
        let t = [3.0, 1.0, 3.0, 2.0];
        let e = [true, false, true, true];
        let rs = RiskSets::new(&t, &e);
        assert_eq!(rs.times, vec![1.0, 2.0, 3.0]);
        assert_eq!(rs.deaths, vec![0, 1, 2]);
        assert_eq!(rs.groups, vec![(0, 1), (1, 2), (2, 4)]);
    }

    #[test]
    fn partial_loglik_by_hand() {
        // times 1,2,3 all events, eta = (0, ln2, 0):
        // ll = [0 - ln(1+2+1)] + [ln2 - ln(2+1)] + [0 - ln 1]
        let t = [1.0, 2.0, 3.0];
        let e = [true, true, true];
        let eta = [0.0, 2f64.ln(), 0.0];
        let rs = RiskSets::new(&t, &e);
        let expect = -(4f64.ln()) + 2f64.ln() - 3f64.ln();
        assert!((partial_loglik(&rs, &eta, &e) - expect).abs() < 1e-14);
    }

    #[test]
    fn baseline_inversion() {
        let bh = BaselineHazard {
            times: vec![1.0, 2.0, 4.0],
            cumhaz: vec![0.1, 0.3, 0.7],
        };
        assert_eq!(bh.invert(0.05), Some(1.0));
        assert_eq!(bh.invert(0.3), Some(2.0));
        assert_eq!(bh.invert(0.31), Some(4.0));
        assert_eq!(bh.invert(0.8), None);
    }
}
