//! Maximum likelihood for the normal, logistic and negative binomial models
//! (canonical/log link) by Newton-Raphson / Fisher scoring with step halving.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use super::FitOptions;
use crate::dataset::Family;
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, weighted_cross};

/// Bounds on the negative binomial dispersion.
pub const THETA_MIN: f64 = 1e-3;
pub const THETA_MAX: f64 = 1e6;

/// Result of an unpenalized fit on an explicit design matrix.
#[derive(Debug, Clone)]
pub struct RawFit {
    pub coef: DVector<f64>,
    pub eta: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_gradient: f64,
    /// Negative binomial dispersion.
    pub theta: Option<f64>,
    /// Residual sum of squares (normal family).
    pub rss: Option<f64>,
}

pub(crate) fn gradient_tolerance(opts: &FitOptions, n: usize) -> f64 {
    opts.grad_tol * (n.max(1) as f64).sqrt()
}

#[inline]
pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
#[inline]
pub(crate) fn log1pexp(eta: f64) -> f64 {
    if eta > 35.0 {
        eta
    } else if eta < -35.0 {
        eta.exp()
    } else {
        eta.exp().ln_1p()
    }
}

/// Per-observation log-likelihood contributions.
pub fn loglik_terms(family: Family, y: &[f64], eta: &[f64], theta: Option<f64>, sigma2: f64) -> Vec<f64> {
    match family {
        Family::Normal => {
            let c = -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
            y.iter().zip(eta).map(|(y, e)| c - 0.5 * (y - e).powi(2) / sigma2).collect()
        }
        Family::Binomial => y.iter().zip(eta).map(|(y, e)| y * e - log1pexp(*e)).collect(),
        Family::NegBin => {
            let th = theta.expect("negative binomial needs theta");
            y.iter().zip(eta).map(|(&y, &e)| negbin_term(y, e.exp(), th)).collect()
        }
        Family::CoxPH => panic!("Cox partial likelihood is not a sum of per-observation terms"),
    }
}

#[inline]
pub(crate) fn negbin_term(y: f64, mu: f64, theta: f64) -> f64 {
    let lt = (theta + mu).ln();
    ln_gamma(y + theta) - ln_gamma(theta) - ln_gamma(y + 1.0) + theta * (theta.ln() - lt)
        + if y > 0.0 { y * (mu.ln() - lt) } else { 0.0 }
}

/// `negbin_term` without the gamma functions, from the linear predictor.
#[inline]
fn negbin_mu_part(y: f64, eta: f64, theta: f64) -> f64 {
    let lt = (theta + eta.exp()).ln();
    theta * (theta.ln() - lt) + if y > 0.0 { y * (eta - lt) } else { 0.0 }
}

fn eta_of(x: &DMatrix<f64>, beta: &DVector<f64>, offset: Option<&[f64]>) -> Vec<f64> {
    let mut eta: Vec<f64> = (x * beta).iter().copied().collect();
    if let Some(o) = offset {
        for (e, o) in eta.iter_mut().zip(o) {
            *e += o;
        }
    }
    eta
}

/// Cholesky based rank check: a pivot that loses (almost) all of its diagonal
/// mass flags a column that is a linear combination of earlier ones.
pub(crate) fn check_full_rank(xtx: &DMatrix<f64>, names: Option<&[String]>) -> Result<()> {
    let p = xtx.nrows();
    let Some(chol) = xtx.clone().cholesky() else {
        return Err(Error::RankDeficient("cross-product matrix not positive definite".into()));
    };
    let l = chol.l_dirty();
    for j in 0..p {
        let a = xtx[(j, j)];
        if a <= 0.0 || l[(j, j)].powi(2) <= 1e-11 * a {
            let which = names.and_then(|n| n.get(j)).cloned().unwrap_or_else(|| format!("column {j}"));
            return Err(Error::RankDeficient(format!("'{which}' is collinear with earlier columns")));
        }
    }
    Ok(())
}

pub fn fit_normal(x: &DMatrix<f64>, y: &[f64], opts: &FitOptions) -> Result<RawFit> {
    let n = y.len();
    let ones = vec![1.0; n];
    let (xtx, xty) = weighted_cross(x, &ones, y);
    check_full_rank(&xtx, opts.names.as_deref())?;
    let beta = solve_spd(&xtx, &xty).ok_or_else(|| Error::RankDeficient("normal equations singular".into()))?;
    let eta = eta_of(x, &beta, None);
    let resid: Vec<f64> = y.iter().zip(&eta).map(|(y, e)| y - e).collect();
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let grad = x.tr_mul(&DVector::from_vec(resid));
    let sigma2 = (rss / n as f64).max(f64::MIN_POSITIVE);
    let loglik = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    let max_gradient = grad.amax();
    Ok(RawFit {
        coef: beta,
        eta,
        loglik,
        iterations: 1,
        converged: true,
        max_gradient,
        theta: None,
        rss: Some(rss),
    })
}

/// Newton iterations for a canonical/log-link GLM with fixed dispersion.
/// `theta = None` means logistic regression.
fn newton_glm(
    x: &DMatrix<f64>,
    y: &[f64],
    family: Family,
    theta: Option<f64>,
    start: Option<DVector<f64>>,
    offset: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<(DVector<f64>, Vec<f64>, f64, usize, f64)> {
    let n = y.len();
    let p = x.ncols();
    let nb_const = match (family, theta) {
        (Family::NegBin, Some(th)) => {
            ThetaSums::new(y).lgamma_diff(th) - y.iter().map(|&v| ln_gamma(v + 1.0)).sum::<f64>()
        }
        _ => 0.0,
    };
    let ll_of = |eta: &[f64]| -> f64 {
        match family {
            Family::Binomial => y.iter().zip(eta).map(|(y, e)| y * e - log1pexp(*e)).sum(),
            Family::NegBin => {
                let th = theta.unwrap();
                nb_const + y.iter().zip(eta).map(|(&y, &e)| negbin_mu_part(y, e, th)).sum::<f64>()
            }
            _ => unreachable!(),
        }
    };
    // working quantities: score contributions u_i and Fisher weights w_i
    let work = |eta: &[f64], u: &mut Vec<f64>, w: &mut Vec<f64>| {
        u.clear();
        w.clear();
        for (&yi, &e) in y.iter().zip(eta) {
            match family {
                Family::Binomial => {
                    let m = logistic(e);
                    u.push(yi - m);
                    w.push((m * (1.0 - m)).max(1e-12));
                }
                Family::NegBin => {
                    let th = theta.unwrap();
                    let m = e.min(700.0).exp();
                    let d = 1.0 + m / th;
                    u.push((yi - m) / d);
                    w.push((m / d).max(1e-12));
                }
                _ => unreachable!(),
            }
        }
    };

    let mut beta = match start {
        Some(b) => b,
        None => {
            // glm-style start: one weighted LS step from a data-based mean
            let mut eta0 = Vec::with_capacity(n);
            let mut w0 = Vec::with_capacity(n);
            let mut z0 = Vec::with_capacity(n);
            for &yi in y {
                let (m, e, w) = match family {
                    Family::Binomial => {
                        let m = (yi + 0.5) / 2.0;
                        (m, (m / (1.0 - m)).ln(), m * (1.0 - m))
                    }
                    _ => {
                        let m = yi + 0.1;
                        let d = 1.0 + m / theta.unwrap();
                        (m, m.ln(), m / d)
                    }
                };
                let g = if family == Family::Binomial { 1.0 / w } else { 1.0 / m };
                eta0.push(e);
                w0.push(w);
                z0.push(e + (yi - m) * g - offset.map_or(0.0, |o| o[eta0.len() - 1]));
            }
            let (xtwx, xtwz) = weighted_cross(x, &w0, &z0);
            check_full_rank(&xtwx, opts.names.as_deref())?;
            solve_spd(&xtwx, &xtwz).unwrap_or_else(|| DVector::zeros(p))
        }
    };

    let mut eta = eta_of(x, &beta, offset);
    let mut ll = ll_of(&eta);
    let mut u = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let tol = gradient_tolerance(opts, n);
    let mut iter = 0;
    let mut max_grad;
    loop {
        work(&eta, &mut u, &mut w);
        let (info, grad) = weighted_cross(x, &w, &u.iter().zip(&w).map(|(u, w)| u / w).collect::<Vec<_>>());
        max_grad = grad.amax();
        if max_grad <= tol * 1e-2 || iter >= opts.max_iter {
            break;
        }
        iter += 1;
        let step = match solve_spd(&info, &grad) {
            Some(s) => s,
            None => {
                check_full_rank(&info, opts.names.as_deref())?;
                return Err(Error::Convergence("information matrix singular".into()));
            }
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let eta_c = eta_of(x, &cand, offset);
            let ll_c = ll_of(&eta_c);
            if ll_c.is_finite() && ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                eta = eta_c;
                ll = ll_c;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if step.amax() * scale < 1e-13 * (1.0 + beta.amax()) {
            work(&eta, &mut u, &mut w);
            max_grad = x.tr_mul(&DVector::from_column_slice(&u)).amax();
            break;
        }
    }
    Ok((beta, eta, ll, iter, max_grad))
}

pub fn fit_binomial(x: &DMatrix<f64>, y: &[f64], opts: &FitOptions) -> Result<RawFit> {
    let (beta, eta, ll, iterations, max_gradient) = newton_glm(x, y, Family::Binomial, None, None, None, opts)?;
    // diverging coefficients or fitted probabilities numerically 0/1
    let big = beta.iter().chain(eta.iter()).map(|b| b.abs()).fold(0.0, f64::max);
    if big > opts.separation_cap {
        return Err(Error::Separation(format!(
            "logistic coefficient magnitude {big:.1} exceeds {}",
            opts.separation_cap
        )));
    }
    let converged = max_gradient <= gradient_tolerance(opts, y.len());
    if !converged && opts.require_convergence {
        return Err(Error::Convergence(format!(
            "logistic regression: gradient {max_gradient:.2e} after {iterations} iterations"
        )));
    }
    Ok(RawFit {
        coef: beta,
        eta,
        loglik: ll,
        iterations,
        converged,
        max_gradient,
        theta: None,
        rss: None,
    })
}

/// Negative binomial regression with log link, alternating Fisher scoring in
/// the coefficients with Newton steps for `log(theta)` on the profile
/// likelihood.
pub fn fit_negbin(x: &DMatrix<f64>, y: &[f64], fixed_theta: Option<f64>, opts: &FitOptions) -> Result<RawFit> {
    let n = y.len() as f64;
    let mut theta = match fixed_theta {
        Some(t) => t,
        None => {
            // moment start from a near-Poisson fit
            let (_, eta, ..) = newton_glm(x, y, Family::NegBin, Some(THETA_MAX), None, None, opts)?;
            moment_theta(y, &eta)
        }
    };
    let mut start = None;
    let mut total_iter = 0;
    for _outer in 0..opts.max_iter {
        let (beta, eta, ll, it, _) = newton_glm(x, y, Family::NegBin, Some(theta), start.take(), None, opts)?;
        total_iter += it;
        if fixed_theta.is_some() {
            return finish_negbin(x, y, beta, eta, ll, theta, total_iter, opts);
        }
        let new_theta = profile_theta(y, &eta, theta);
        let done = (new_theta.ln() - theta.ln()).abs() < 1e-9;
        theta = new_theta;
        start = Some(beta.clone());
        if done {
            let (beta, eta, ll, it, _) = newton_glm(x, y, Family::NegBin, Some(theta), Some(beta), None, opts)?;
            return finish_negbin(x, y, beta, eta, ll, theta, total_iter + it, opts);
        }
    }
    let _ = n;
    Err(Error::Convergence("negative binomial dispersion iteration".into()))
}

#[allow(clippy::too_many_arguments)]
fn finish_negbin(
    x: &DMatrix<f64>,
    y: &[f64],
    beta: DVector<f64>,
    eta: Vec<f64>,
    ll: f64,
    theta: f64,
    iterations: usize,
    opts: &FitOptions,
) -> Result<RawFit> {
    let u: Vec<f64> = y
        .iter()
        .zip(&eta)
        .map(|(&yi, &e)| {
            let m = e.exp();
            (yi - m) / (1.0 + m / theta)
        })
        .collect();
    let max_gradient = x.tr_mul(&DVector::from_vec(u)).amax();
    let converged = max_gradient <= gradient_tolerance(opts, y.len());
    if !converged && opts.require_convergence {
        return Err(Error::Convergence(format!(
            "negative binomial regression: gradient {max_gradient:.2e}"
        )));
    }
    Ok(RawFit {
        coef: beta,
        eta,
        loglik: ll,
        iterations,
        converged,
        max_gradient,
        theta: Some(theta),
        rss: None,
    })
}

pub(crate) fn moment_theta(y: &[f64], eta: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&yi, &e) in y.iter().zip(eta) {
        let m = e.exp();
        num += m * m;
        den += (yi - m).powi(2) - m;
    }
    if den <= 0.0 {
        THETA_MAX
    } else {
        (num / den).clamp(THETA_MIN, THETA_MAX)
    }
}

/// `theta`-dependent gamma-function sums over the outcomes. Integer counts
/// use `lgamma(y + t) - lgamma(t) = sum_{j<y} ln(t + j)` via tail counts.
struct ThetaSums<'a> {
    y: &'a [f64],
    /// `tail[j] = #{i : y_i > j}`, when every outcome is a small integer.
    tail: Option<Vec<f64>>,
}

impl<'a> ThetaSums<'a> {
    fn new(y: &'a [f64]) -> Self {
        let integral = y.iter().all(|&v| v >= 0.0 && v.fract() == 0.0 && v < 1e5);
        let tail = integral.then(|| {
            let top = y.iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
            let mut hist = vec![0.0; top + 1];
            for &v in y {
                hist[v as usize] += 1.0;
            }
            let mut tail = vec![0.0; top];
            let mut acc = 0.0;
            for j in (0..top).rev() {
                acc += hist[j + 1];
                tail[j] = acc;
            }
            tail
        });
        ThetaSums { y, tail }
    }

    /// `sum_i lgamma(y_i + t) - lgamma(t)`.
    fn lgamma_diff(&self, t: f64) -> f64 {
        match &self.tail {
            Some(tail) => tail.iter().enumerate().map(|(j, c)| c * (t + j as f64).ln()).sum(),
            None => self.y.iter().map(|&v| ln_gamma(v + t) - ln_gamma(t)).sum(),
        }
    }

    /// `sum_i digamma(y_i + t) - digamma(t)` and the trigamma analogue.
    fn psi_diffs(&self, t: f64) -> (f64, f64) {
        match &self.tail {
            Some(tail) => tail.iter().enumerate().fold((0.0, 0.0), |(a, b), (j, c)| {
                let r = 1.0 / (t + j as f64);
                (a + c * r, b - c * r * r)
            }),
            None => {
                let (dg, tg) = (digamma(t), trigamma(t));
                self.y
                    .iter()
                    .fold((0.0, 0.0), |(a, b), &v| (a + digamma(v + t) - dg, b + trigamma(v + t) - tg))
            }
        }
    }
}

/// Maximizes the negative binomial log-likelihood in `theta` for fixed means.
pub(crate) fn profile_theta(y: &[f64], eta: &[f64], start: f64) -> f64 {
    let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let sums = ThetaSums::new(y);
    let ll = |th: f64| -> f64 {
        sums.lgamma_diff(th)
            + y.iter()
                .zip(&mu)
                .map(|(&yi, &m)| {
                    let lt = (th + m).ln();
                    th * (th.ln() - lt) - yi * lt
                })
                .sum::<f64>()
    };
    let derivs = |th: f64| -> (f64, f64) {
        let (mut d1, mut d2) = sums.psi_diffs(th);
        for (&yi, &m) in y.iter().zip(&mu) {
            let tm = th + m;
            d1 += (th / tm).ln() + 1.0 - (yi + th) / tm;
            d2 += 1.0 / th - 2.0 / tm + (yi + th) / (tm * tm);
        }
        (d1, d2)
    };
    let (lo, hi) = (THETA_MIN.ln(), THETA_MAX.ln());
    let mut phi = start.clamp(THETA_MIN, THETA_MAX).ln();
    let mut cur = ll(phi.exp());
    for _ in 0..100 {
        let th = phi.exp();
        let (d1, d2) = derivs(th);
        let g = th * d1;
        let h = th * th * d2 + th * d1;
        let mut step = if h < 0.0 { -g / h } else { g.signum() * 1.0 };
        step = step.clamp(-3.0, 3.0);
        let mut accepted = false;
        for _ in 0..40 {
            let cand = (phi + step).clamp(lo, hi);
            let v = ll(cand.exp());
            if v >= cur - 1e-12 * cur.abs().max(1.0) {
                let moved = (cand - phi).abs();
                phi = cand;
                cur = v;
                accepted = moved > 0.0;
                if moved < 1e-11 {
                    return phi.exp();
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || g.abs() < 1e-10 {
            break;
        }
    }
    phi.exp()
}

/// Trigamma function: recurrence up to x >= 12, then the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    let tail = 1.0 / 6.0
        - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 * (1.0 / 30.0 - x2 * (5.0 / 66.0 - x2 * (691.0 / 2730.0 - x2 * 7.0 / 6.0)))));
    acc + 1.0 / x + x2 / 2.0 + x2 / x * tail
}
