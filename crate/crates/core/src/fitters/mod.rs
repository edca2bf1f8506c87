//! Maximum (partial) likelihood fitting for the four outcome families,
//! penalized fits with cross-validation, and prognostic adjustment.

pub mod adjust;
pub mod cox;
pub mod glm;
pub mod penalized;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use adjust::{prognostic_adjustment, AdjustOptions, AdjustedDesign, Strategy};
pub use glm::RawFit;
pub use penalized::{fit_penalized, fit_path, PathOptions, PenalizedFit, Penalty};

use crate::dataset::{Dataset, ExpandedCovariates, Family};
use crate::error::{Error, Result};

/// Coding of the treatment column in the analysis model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// `z - E(z | x)`.
    Centered,
    /// Raw `z`.
    #[serde(rename = "noncentered")]
    NonCentered,
}

impl std::str::FromStr for Parameterization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "centered" => Ok(Parameterization::Centered),
            "noncentered" | "non-centered" => Ok(Parameterization::NonCentered),
            other => Err(Error::Config(format!("unknown parameterization '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Gradient max-norm tolerance, scaled by `sqrt(n)` at use.
    pub grad_tol: f64,
    /// Logistic/Cox coefficients beyond this magnitude signal separation.
    pub separation_cap: f64,
    pub require_convergence: bool,
    /// Column names for diagnostics.
    pub names: Option<Vec<String>>,
    /// Fixes the negative binomial dispersion instead of estimating it.
    pub theta: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 100,
            grad_tol: 1e-8,
            separation_cap: 30.0,
            require_convergence: true,
            names: None,
            theta: None,
        }
    }
}

/// Unpenalized fit of `family` on an explicit design matrix. GLM designs must
/// contain their own intercept column; Cox designs must not.
pub fn fit_matrix(
    family: Family,
    x: &DMatrix<f64>,
    y: &[f64],
    event: Option<&[bool]>,
    opts: &FitOptions,
) -> Result<RawFit> {
    match family {
        Family::Normal => glm::fit_normal(x, y, opts),
        Family::Binomial => glm::fit_binomial(x, y, opts),
        Family::NegBin => glm::fit_negbin(x, y, opts.theta, opts),
        Family::CoxPH => {
            let ev = event.ok_or_else(|| Error::validation("Cox fit requires event indicators"))?;
            cox::fit_cox(x, y, ev, opts)
        }
    }
}

/// Analysis design: `[intercept,] prognostic columns, treatment, extra columns`.
#[derive(Debug, Clone)]
pub struct ModelDesign {
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub treatment_index: usize,
    pub parameterization: Parameterization,
    /// Treatment column as it enters the model.
    pub treatment: Vec<f64>,
}

pub const INTERCEPT: &str = "(Intercept)";
pub const TREATMENT: &str = "treatment";

pub fn treatment_column(d: &Dataset, param: Parameterization) -> Result<Vec<f64>> {
    match param {
        Parameterization::NonCentered => Ok(d.treatment_raw.clone()),
        Parameterization::Centered => d
            .treatment_centered
            .clone()
            .ok_or_else(|| Error::validation("centered parameterization requested but treatment is not centered")),
    }
}

impl ModelDesign {
    pub fn build(
        d: &Dataset,
        param: Parameterization,
        prognostic: &DMatrix<f64>,
        prognostic_names: &[String],
        extra: Option<(&DMatrix<f64>, &[String])>,
    ) -> Result<Self> {
        let n = d.n();
        let treatment = treatment_column(d, param)?;
        let icpt = d.family.has_intercept() as usize;
        let n_extra = extra.map_or(0, |(m, _)| m.ncols());
        let p = icpt + prognostic.ncols() + 1 + n_extra;
        let mut x = DMatrix::zeros(n, p);
        let mut names = Vec::with_capacity(p);
        if icpt == 1 {
            x.column_mut(0).fill(1.0);
            names.push(INTERCEPT.to_string());
        }
        for j in 0..prognostic.ncols() {
            x.column_mut(icpt + j).copy_from(&prognostic.column(j));
        }
        names.extend(prognostic_names.iter().cloned());
        let t_idx = icpt + prognostic.ncols();
        x.column_mut(t_idx).copy_from_slice(&treatment);
        names.push(TREATMENT.to_string());
        if let Some((m, nm)) = extra {
            for j in 0..m.ncols() {
                x.column_mut(t_idx + 1 + j).copy_from(&m.column(j));
            }
            names.extend(nm.iter().cloned());
        }
        Ok(ModelDesign {
            x,
            names,
            treatment_index: t_idx,
            parameterization: param,
            treatment,
        })
    }

    /// Main-effects model for an adjusted prognostic design.
    pub fn main_effects(d: &Dataset, adjusted: &AdjustedDesign, param: Parameterization) -> Result<Self> {
        Self::build(d, param, &adjusted.columns, &adjusted.names, None)
    }

    /// Main effects plus `treatment x covariate` interactions for the given
    /// expanded covariate columns.
    pub fn with_interactions(
        d: &Dataset,
        adjusted: &AdjustedDesign,
        param: Parameterization,
        modifiers: &ExpandedCovariates,
    ) -> Result<Self> {
        let z = treatment_column(d, param)?;
        let m = interaction_columns(&z, &modifiers.matrix);
        let names: Vec<String> = modifiers.names.iter().map(|n| format!("{TREATMENT}:{n}")).collect();
        Self::build(d, param, &adjusted.columns, &adjusted.names, Some((&m, &names)))
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }
}

pub fn interaction_columns(z: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| z[i] * x[(i, j)])
}

/// A converged (partial) likelihood fit together with the design it used.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub family: Family,
    pub coef_names: Vec<String>,
    pub coef: Vec<f64>,
    pub treatment_index: usize,
    pub linear_predictor: Vec<f64>,
    /// Log-likelihood (partial log-likelihood for Cox).
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_gradient: f64,
    pub treatment_parameterization: Parameterization,
    pub theta: Option<f64>,
    pub rss: Option<f64>,
    pub design: DMatrix<f64>,
    pub treatment: Vec<f64>,
    /// Fingerprint of the dataset the model was fitted on.
    pub data_fingerprint: u64,
}

impl FittedModel {
    /// Estimated treatment effect.
    pub fn delta(&self) -> f64 {
        self.coef[self.treatment_index]
    }

    pub fn n(&self) -> usize {
        self.linear_predictor.len()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coef_names.iter().position(|n| n == name).map(|i| self.coef[i])
    }

    pub fn to_json(&self) -> serde_json::Value {
        let coefs: serde_json::Map<String, serde_json::Value> = self
            .coef_names
            .iter()
            .zip(&self.coef)
            .map(|(n, c)| (n.clone(), serde_json::json!(c)))
            .collect();
        serde_json::json!({
            "family": self.family,
            "coefficients": coefs,
            "treatment_effect": self.delta(),
            "treatment_parameterization": self.treatment_parameterization,
            "loglik": self.loglik,
            "theta": self.theta,
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "max_gradient": self.max_gradient,
            },
        })
    }
}

pub fn fit_design(d: &Dataset, design: &ModelDesign, opts: &FitOptions) -> Result<FittedModel> {
    let mut o = opts.clone();
    o.names = Some(design.names.clone());
    let raw = fit_matrix(d.family, &design.x, &d.outcome, d.events(), &o)?;
    Ok(FittedModel {
        family: d.family,
        coef_names: design.names.clone(),
        coef: raw.coef.iter().copied().collect(),
        treatment_index: design.treatment_index,
        linear_predictor: raw.eta,
        loglik: raw.loglik,
        iterations: raw.iterations,
        converged: raw.converged,
        max_gradient: raw.max_gradient,
        treatment_parameterization: design.parameterization,
        theta: raw.theta,
        rss: raw.rss,
        design: design.x.clone(),
        treatment: design.treatment.clone(),
        data_fingerprint: d.fingerprint(),
    })
}

/// Fits the main-effects model `outcome ~ prognostic + treatment`.
pub fn fit_model(d: &Dataset, adjusted: &AdjustedDesign, param: Parameterization) -> Result<FittedModel> {
    fit_design(d, &ModelDesign::main_effects(d, adjusted, param)?, &FitOptions::default())
}

/// Observed (Cox) or expected (GLM) information matrix at the fit; the
/// normal family uses the unbiased residual variance.
pub fn information(m: &FittedModel, d: &Dataset) -> DMatrix<f64> {
    let x = &m.design;
    let eta = &m.linear_predictor;
    let w: Vec<f64> = match m.family {
        Family::Normal => {
            let df = (m.n() - x.ncols()).max(1) as f64;
            vec![1.0 / (m.rss.unwrap_or(0.0) / df).max(f64::MIN_POSITIVE); m.n()]
        }
        Family::Binomial => eta
            .iter()
            .map(|&e| {
                let p = glm::logistic(e);
                p * (1.0 - p)
            })
            .collect(),
        Family::NegBin => {
            let th = m.theta.unwrap_or(glm::THETA_MAX);
            eta.iter().map(|e| e.exp() / (1.0 + e.exp() / th)).collect()
        }
        Family::CoxPH => {
            let ev = d.events().expect("Cox data has events");
            let rs = cox::RiskSets::new(&d.outcome, ev);
            return cox::loglik_grad_info(&rs, x, eta, ev).2;
        }
    };
    crate::linalg::weighted_cross(x, &w, &vec![0.0; m.n()]).0
}

/// Wald z statistic of the treatment coefficient.
pub fn treatment_wald_z(m: &FittedModel, d: &Dataset) -> Result<f64> {
    let info = information(m, d);
    let p = info.nrows();
    let inv = info
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient("information matrix not positive definite".into()))?;
    debug_assert_eq!(p, m.coef.len());
    Ok(m.delta() / inv[(m.treatment_index, m.treatment_index)].sqrt())
}
