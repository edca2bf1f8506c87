//! Interaction test under the true functional forms: the prognostic and
//! predictive functions are known and only their coefficients are
//! estimated.

use nalgebra::DMatrix;

use super::lrt::{compare, fit_pair};
use super::{Method, TestResult};
use crate::datagen::GeneratedTrial;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fitters::{interaction_columns, ModelDesign, Parameterization};

/// LRT of `gamma1 = 0` in `eta = a + b f_prog + z (g0 + gamma1 f_pred)`
/// (no intercept for Cox).
pub fn oracle_lrt(d: &Dataset, f_prog: &[f64], f_pred: &[f64]) -> Result<TestResult> {
    let n = d.n();
    if f_prog.len() != n || f_pred.len() != n {
        return Err(Error::validation("true effect functions must have length n"));
    }
    let prog = DMatrix::from_column_slice(n, 1, f_prog);
    let names = ["f_prog".to_string()];
    let param = Parameterization::NonCentered;
    let main = ModelDesign::build(d, param, &prog, &names, None)?;
    let inter = interaction_columns(&d.treatment_raw, &DMatrix::from_column_slice(n, 1, f_pred));
    let full = ModelDesign::build(d, param, &prog, &names, Some((&inter, &["treatment:f_pred".to_string()])))?;
    let (m0, m1) = fit_pair(d, &main, &full)?;
    let (stat, p, q) = compare(d, &m0, &m1);
    TestResult::new(Method::Oracle, stat, p.max(f64::MIN_POSITIVE), q, None)
}

pub fn oracle_test(trial: &GeneratedTrial) -> Result<TestResult> {
    oracle_lrt(&trial.dataset, &trial.truth.f_prog, &trial.truth.f_pred)
}
