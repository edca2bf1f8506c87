//! Score residuals: per-subject derivatives of the log-likelihood contribution
//! with respect to model parameters, evaluated at the fitted model.
//!
//! For the treatment coefficient these are
//!
//! | family   | s_i                                              |
//! |----------|--------------------------------------------------|
//! | normal   | (y_i - eta_i) z_i                                |
//! | binomial | (y_i - p_i) z_i                                  |
//! | negbin   | z_i (y_i - mu_i) / (1 + mu_i / theta)            |
//! | cox      | d_i (z_i - zbar(t_i)) - e^{eta_i} sum_{t_k <= t_i} dH_k (z_i - zbar_k) |
//!
//! where `z` is the treatment column as it entered the model (centered or
//! raw). The Cox form is the derivative of subject `i`'s Breslow-profiled
//! contribution, so the residuals sum to the partial-likelihood score.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::{Dataset, Family};
use crate::error::{Error, Result};
use crate::fitters::cox::RiskSets;
use crate::fitters::glm::logistic;
use crate::fitters::{FittedModel, Parameterization};
use crate::linalg::project_out;

#[derive(Debug, Clone, Serialize)]
pub struct ScoreVector {
    pub s: Vec<f64>,
    pub parameterization: Parameterization,
    pub family: Family,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Writes `id,z,z_centered,s` rows.
    pub fn write_csv<W: Write>(&self, d: &Dataset, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "z", "z_centered", "s"])?;
        for i in 0..self.s.len() {
            let zc = d.treatment_centered.as_ref().map_or(String::new(), |c| c[i].to_string());
            wr.write_record([(i + 1).to_string(), d.treatment_raw[i].to_string(), zc, self.s[i].to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn check(m: &FittedModel, d: &Dataset) -> Result<()> {
    if m.family != d.family || m.n() != d.n() || m.data_fingerprint != d.fingerprint() {
        return Err(Error::validation("model was not fitted on this dataset"));
    }
    if !m.converged {
        return Err(Error::Convergence(format!(
            "score residuals need a converged fit (max gradient {:.2e})",
            m.max_gradient
        )));
    }
    Ok(())
}

/// Per-subject derivative of the GLM log-likelihood in the linear predictor.
fn glm_eta_score(m: &FittedModel, y: &[f64]) -> Vec<f64> {
    let eta = &m.linear_predictor;
    match m.family {
        Family::Normal => y.iter().zip(eta).map(|(y, e)| y - e).collect(),
        Family::Binomial => y.iter().zip(eta).map(|(y, &e)| y - logistic(e)).collect(),
        Family::NegBin => {
            let th = m.theta.expect("negative binomial fit carries theta");
            y.iter()
                .zip(eta)
                .map(|(&y, &e)| {
                    let mu = e.exp();
                    (y - mu) / (1.0 + mu / th)
                })
                .collect()
        }
        Family::CoxPH => unreachable!(),
    }
}

/// Cox score residuals for every column of `x`.
pub fn cox_score_matrix(time: &[f64], event: &[bool], eta: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let rs = RiskSets::new(time, event);
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();
    let ng = rs.groups.len();
    // risk-set sums S0 and S1 per distinct time
    let mut s0 = vec![0.0; ng];
    let mut s1 = DMatrix::zeros(ng, p);
    let mut acc0 = 0.0;
    let mut acc1 = vec![0.0; p];
    for (g, &(a, b)) in rs.groups.iter().enumerate().rev() {
        for &i in &rs.order[a..b] {
            acc0 += r[i];
            for j in 0..p {
                acc1[j] += r[i] * x[(i, j)];
            }
        }
        s0[g] = acc0;
        for j in 0..p {
            s1[(g, j)] = acc1[j];
        }
    }
    let mut out = DMatrix::zeros(n, p);
    // cumulative hazard increments: A1 = sum dH_k, A2_j = sum dH_k xbar_kj
    let mut a1 = 0.0;
    let mut a2 = vec![0.0; p];
    for (g, &(a, b)) in rs.groups.iter().enumerate() {
        let d = rs.deaths[g] as f64;
        if d > 0.0 {
            let dh = d / s0[g];
            a1 += dh;
            for j in 0..p {
                a2[j] += dh * s1[(g, j)] / s0[g];
            }
        }
        for &i in &rs.order[a..b] {
            for j in 0..p {
                let xij = x[(i, j)];
                let mut v = -r[i] * (xij * a1 - a2[j]);
                if event[i] {
                    v += xij - s1[(g, j)] / s0[g];
                }
                out[(i, j)] = v;
            }
        }
    }
    out
}

/// Score residuals of the treatment coefficient.
pub fn score_residuals(m: &FittedModel, d: &Dataset) -> Result<ScoreVector> {
    check(m, d)?;
    let s = match m.family {
        Family::CoxPH => {
            let z = DMatrix::from_column_slice(d.n(), 1, &m.treatment);
            let ev = d.events().expect("Cox data has events");
            cox_score_matrix(&d.outcome, ev, &m.linear_predictor, &z).column(0).iter().copied().collect()
        }
        _ => glm_eta_score(m, &d.outcome).iter().zip(&m.treatment).map(|(u, z)| u * z).collect(),
    };
    Ok(ScoreVector {
        s,
        parameterization: m.treatment_parameterization,
        family: m.family,
    })
}

/// n × p matrix of score residuals for every model coefficient.
pub fn score_matrix(m: &FittedModel, d: &Dataset) -> Result<DMatrix<f64>> {
    check(m, d)?;
    Ok(match m.family {
        Family::CoxPH => cox_score_matrix(&d.outcome, d.events().unwrap(), &m.linear_predictor, &m.design),
        _ => {
            let u = glm_eta_score(m, &d.outcome);
            let mut out = m.design.clone();
            for (i, ui) in u.iter().enumerate() {
                out.row_mut(i).scale_mut(*ui);
            }
            out
        }
    })
}

/// Treatment score column with its least-squares projection on the other
/// score columns removed.
pub fn orthogonalize_treatment_score(full: &DMatrix<f64>, treatment_col: usize) -> Result<Vec<f64>> {
    let p = full.ncols();
    if treatment_col >= p {
        return Err(Error::validation("treatment column index out of range"));
    }
    let others: Vec<usize> = (0..p).filter(|&j| j != treatment_col).collect();
    let x = full.select_columns(&others);
    let y = DVector::from_iterator(full.nrows(), full.column(treatment_col).iter().copied());
    let (res, rank) = project_out(&x, &y);
    if rank < others.len() {
        warn!("score columns are rank deficient ({rank} of {}); projecting with a pseudo-inverse", others.len());
    }
    Ok(res.iter().copied().collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{Covariate, TreatmentExpectation};
    use crate::fitters::glm::loglik_terms;
    use crate::fitters::{fit_design, fit_model, AdjustedDesign, FitOptions, ModelDesign};
    use crate::linalg::kendall_tau;
    use crate::par::rng_from;
    use approx::assert_relative_eq;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn sim(family: Family, n: usize, seed: u64) -> Dataset {
        let mut rng = rng_from(seed, &[0x5c]);
        let x1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let lv: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut z: Vec<f64> = (0..n).map(|i| (i < n / 2) as u8 as f64).collect();
        z.shuffle(&mut rng);
        let eta: Vec<f64> = (0..n)
            .map(|i| 0.2 + 0.7 * x1[i] + 0.3 * (lv[i] == 2) as u8 as f64 + z[i] * (0.4 + 0.5 * x1[i]))
            .collect();
        let mut event = None;
        let y: Vec<f64> = match family {
            Family::Normal => eta.iter().map(|e| e + rng.sample::<f64, _>(StandardNormal)).collect(),
            Family::Binomial => eta.iter().map(|&e| (rng.random::<f64>() < logistic(e)) as u8 as f64).collect(),
            Family::NegBin => eta
                .iter()
                .map(|&e| {
                    let g = rand_distr::Gamma::new(3.0, e.exp() / 3.0).unwrap().sample(&mut rng);
                    rand_distr::Poisson::new(g.max(1e-12)).unwrap().sample(&mut rng)
                })
                .collect(),
            Family::CoxPH => {
                let mut ev = Vec::new();
                let t = eta
                    .iter()
                    .map(|&e| {
                        let t: f64 = rand_distr::Exp::new(e.exp()).unwrap().sample(&mut rng);
                        let c: f64 = rng.random::<f64>() * 2.5;
                        ev.push(t <= c);
                        t.min(c)
                    })
                    .collect();
                event = Some(ev);
                t
            }
        };
        let cat = Covariate::categorical("g", vec!["a".into(), "b".into(), "c".into()], lv).unwrap();
        Dataset::new(family, y, event, z, vec![Covariate::numeric("x1", x1), cat])
            .unwrap()
            .center_treatment(TreatmentExpectation::Known(0.5))
            .unwrap()
    }

    /// Subject i's log-likelihood contribution with the treatment coefficient
    /// moved to `delta`, all other coefficients held at the fit; for Cox the
    /// Breslow baseline increments are re-profiled at each `delta`.
    fn contribution(m: &FittedModel, d: &Dataset, i: usize, delta: f64) -> f64 {
        let shift = delta - m.delta();
        let eta: Vec<f64> = m.linear_predictor.iter().zip(&m.treatment).map(|(e, z)| e + shift * z).collect();
        match m.family {
            Family::Normal => -0.5 * (d.outcome[i] - eta[i]).powi(2),
            Family::CoxPH => {
                let t = &d.outcome;
                let ev = d.events().unwrap();
                let mut ll = 0.0;
                let mut seen = std::collections::BTreeSet::new();
                for k in 0..d.n() {
                    if ev[k] && t[k] <= t[i] && seen.insert(t[k].to_bits()) {
                        let dk = (0..d.n()).filter(|&j| ev[j] && t[j] == t[k]).count() as f64;
                        let s0: f64 = (0..d.n()).filter(|&j| t[j] >= t[k]).map(|j| eta[j].exp()).sum();
                        let dh = dk / s0;
                        ll -= dh * eta[i].exp();
                        if t[k] == t[i] && ev[i] {
                            ll += eta[i] + dh.ln();
                        }
                    }
                }
                ll
            }
            f => loglik_terms(f, &d.outcome[i..=i], &eta[i..=i], m.theta, 1.0)[0],
        }
    }

    #[test]
    fn finite_difference_oracle_all_families() {
        let h = 1e-5;
        for fam in Family::ALL {
            for seed in 0..2 {
                let d = sim(fam, 120, seed);
                for param in [Parameterization::Centered, Parameterization::NonCentered] {
                    let m = fit_model(&d, &AdjustedDesign::all(&d), param).unwrap();
                    let s = score_residuals(&m, &d).unwrap();
                    let scale = s.s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    for i in 0..d.n() {
                        let fd = (contribution(&m, &d, i, m.delta() + h) - contribution(&m, &d, i, m.delta() - h)) / (2.0 * h);
                        assert!(
                            (fd - s.s[i]).abs() <= 1e-4 * s.s[i].abs().max(1e-3 * scale),
                            "{fam} {param:?} subject {i}: fd {fd} vs {}",
                            s.s[i]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn normal_identity_and_control_zeros() {
        let d = sim(Family::Normal, 150, 3);
        for param in [Parameterization::Centered, Parameterization::NonCentered] {
            let m = fit_model(&d, &AdjustedDesign::all(&d), param).unwrap();
            let s = score_residuals(&m, &d).unwrap();
            for i in 0..d.n() {
                let r = d.outcome[i] - m.linear_predictor[i];
                assert!((s.s[i] - r * m.treatment[i]).abs() <= 1e-10);
                if param == Parameterization::NonCentered && d.treatment_raw[i] == 0.0 {
                    assert_eq!(s.s[i], 0.0);
                }
                if param == Parameterization::Centered {
                    assert_eq!(s.s[i].signum() * (s.s[i] != 0.0) as u8 as f64, (r * m.treatment[i]).signum() * (r != 0.0) as u8 as f64);
                }
            }
        }
    }

    #[test]
    fn scores_sum_to_zero_and_cox_is_parameterization_free() {
        for fam in Family::ALL {
            let d = sim(fam, 200, 9);
            let c = fit_model(&d, &AdjustedDesign::all(&d), Parameterization::Centered).unwrap();
            let sc = score_residuals(&c, &d).unwrap();
            let total: f64 = sc.s.iter().sum();
            let abs: f64 = sc.s.iter().map(|v| v.abs()).sum();
            assert!(total.abs() <= 1e-6 * abs, "{fam}: {total}");
            if fam == Family::CoxPH {
                let nc = fit_model(&d, &AdjustedDesign::all(&d), Parameterization::NonCentered).unwrap();
                let sn = score_residuals(&nc, &d).unwrap();
                for (a, b) in sc.s.iter().zip(&sn.s) {
                    assert!((a - b).abs() <= 1e-10);
                }
            }
            // every column of the full score matrix sums to zero as well
            let full = score_matrix(&c, &d).unwrap();
            for j in 0..full.ncols() {
                let col = full.column(j);
                assert!(col.sum().abs() <= 1e-6 * col.abs().sum().max(1.0));
            }
        }
    }

    #[test]
    fn exact_fit_gives_zero_scores() {
        let zt = [0.5, -0.5, 0.5, -0.5];
        let y: Vec<f64> = zt.iter().map(|z| 2.0 + 3.0 * z).collect();
        let d = Dataset::new(Family::Normal, y, None, vec![1., 0., 1., 0.], vec![])
            .unwrap()
            .center_treatment(TreatmentExpectation::Known(0.5))
            .unwrap();
        let m = fit_model(&d, &AdjustedDesign::empty(4), Parameterization::Centered).unwrap();
        assert!(score_residuals(&m, &d).unwrap().s.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let d = sim(Family::Normal, 50, 1);
        let m = fit_model(&d, &AdjustedDesign::all(&d), Parameterization::Centered).unwrap();
        let other = sim(Family::Normal, 50, 2);
        assert!(score_residuals(&m, &other).is_err());
    }

    #[test]
    fn orthogonalization_properties() {
        // already orthogonal input is returned unchanged
        let full = DMatrix::from_row_slice(4, 2, &[1., 1., 1., -1., -1., 1., -1., -1.]);
        let o = orthogonalize_treatment_score(&full, 1).unwrap();
        for (a, b) in o.iter().zip(full.column(1).iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10);
        }
        // two columns: t - (a·t / a·a) a
        let a = [1.0, 2.0, 0.0, -1.0];
        let t = [3.0, 1.0, 2.0, 1.0];
        let full = DMatrix::from_fn(4, 2, |i, j| if j == 0 { a[i] } else { t[i] });
        let o = orthogonalize_treatment_score(&full, 1).unwrap();
        let c = (3.0 + 2.0 - 1.0) / 6.0;
        for i in 0..4 {
            assert_relative_eq!(o[i], t[i] - c * a[i], epsilon = 1e-12);
        }
        // model score matrix
        let d = sim(Family::Binomial, 200, 4);
        let m = fit_model(&d, &AdjustedDesign::all(&d), Parameterization::NonCentered).unwrap();
        let full = score_matrix(&m, &d).unwrap();
        let o = orthogonalize_treatment_score(&full, m.treatment_index).unwrap();
        let on = o.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..full.ncols() {
            if j != m.treatment_index {
                let col = full.column(j);
                let ip: f64 = col.iter().zip(&o).map(|(a, b)| a * b).sum();
                assert!(ip.abs() <= 1e-8 * on * col.norm());
            }
        }
    }

    #[test]
    fn centered_scores_track_the_effect_modifier() {
        // n = 200 normal data with a z*x1 interaction: centered scores
        // correlate strongly with x1, non-centered ones with misspecified
        // prognostic adjustment pick up x1 even without heterogeneity
        let mut rng = rng_from(2024, &[]);
        let n = 200;
        let x1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x2: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut z: Vec<f64> = (0..n).map(|i| (i < 100) as u8 as f64).collect();
        z.shuffle(&mut rng);
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let make = |het: bool| {
            let y = (0..n)
                .map(|i| 1.0 + 3.0 * x1[i] + 3.0 * z[i] + het as u8 as f64 * 3.0 * z[i] * x1[i] + noise[i])
                .collect();
            Dataset::new(
                Family::Normal,
                y,
                None,
                z.clone(),
                vec![Covariate::numeric("x1", x1.clone()), Covariate::numeric("x2", x2.clone())],
            )
            .unwrap()
            .center_treatment(TreatmentExpectation::Known(0.5))
            .unwrap()
        };
        let tau = |d: &Dataset, cov: &str, param| {
            let ex = d.covariate(cov).unwrap();
            let x = DMatrix::from_column_slice(n, 1, &match &ex.data {
                crate::dataset::ColumnData::Numeric(v) => v.clone(),
                _ => unreachable!(),
            });
            let design = ModelDesign::build(d, param, &x, &[cov.to_string()], None).unwrap();
            let m = fit_design(d, &design, &FitOptions::default()).unwrap();
            kendall_tau(&score_residuals(&m, d).unwrap().s, &x1)
        };
        let het = make(true);
        let hom = make(false);
        assert!(tau(&het, "x1", Parameterization::Centered) > 0.4);
        assert!(tau(&hom, "x1", Parameterization::Centered).abs() < 0.15);
        assert!(tau(&hom, "x2", Parameterization::NonCentered).abs() > 0.2);
    }
}
