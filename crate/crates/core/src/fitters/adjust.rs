//! Prognostic adjustment strategies: which columns enter the analysis model
//! as main effects before the treatment effect is estimated.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::penalized::{fit_penalized, PathOptions, Penalty};
use crate::dataset::{Dataset, Family};
use crate::error::{Error, Result};
use crate::par::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    All,
    Lasso,
    Risk,
    Oracle,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::All => "all",
            Strategy::Lasso => "lasso",
            Strategy::Risk => "risk",
            Strategy::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Strategy::All),
            "lasso" => Ok(Strategy::Lasso),
            "risk" => Ok(Strategy::Risk),
            "oracle" => Ok(Strategy::Oracle),
            other => Err(Error::Config(format!("unknown adjustment strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdjustOptions {
    pub folds: usize,
    pub seed: u64,
    pub path: PathOptions,
    /// Minimum events per arm before per-arm Cox LASSO is attempted.
    pub min_arm_events: usize,
}

impl Default for AdjustOptions {
    fn default() -> Self {
        AdjustOptions {
            folds: 10,
            seed: 0,
            path: PathOptions::default(),
            min_arm_events: 10,
        }
    }
}

pub const RISK_SCORE: &str = "risk_score";
pub const ORACLE_COLUMN: &str = "f_prog";

/// Prognostic main-effect columns chosen by a strategy.
#[derive(Debug, Clone)]
pub struct AdjustedDesign {
    pub strategy: Strategy,
    pub columns: DMatrix<f64>,
    pub names: Vec<String>,
    /// Original covariate indices represented in `columns`.
    pub variables: Vec<usize>,
    pub provenance: String,
}

impl AdjustedDesign {
    /// No prognostic columns: intercept plus treatment only.
    pub fn empty(n: usize) -> Self {
        AdjustedDesign {
            strategy: Strategy::All,
            columns: DMatrix::zeros(n, 0),
            names: Vec::new(),
            variables: Vec::new(),
            provenance: "no prognostic adjustment".into(),
        }
    }

    /// Every covariate, dummy-expanded.
    pub fn all(d: &Dataset) -> Self {
        let ex = d.expand_covariates();
        AdjustedDesign {
            strategy: Strategy::All,
            columns: ex.matrix,
            names: ex.names,
            variables: (0..d.k()).collect(),
            provenance: format!("all {} covariates", d.k()),
        }
    }

    pub fn ncols(&self) -> usize {
        self.columns.ncols()
    }
}

/// Builds the prognostic design for `strategy`. `truth` carries the true
/// prognostic function values and is required only for the oracle.
pub fn prognostic_adjustment(
    d: &Dataset,
    strategy: Strategy,
    truth: Option<&[f64]>,
    opts: &AdjustOptions,
) -> Result<AdjustedDesign> {
    match strategy {
        Strategy::All => Ok(AdjustedDesign::all(d)),
        Strategy::Oracle => {
            let f = truth.ok_or_else(|| Error::validation("oracle adjustment requires the true prognostic function"))?;
            if f.len() != d.n() {
                return Err(Error::validation("prognostic truth length differs from n"));
            }
            Ok(AdjustedDesign {
                strategy,
                columns: DMatrix::from_column_slice(d.n(), 1, f),
                names: vec![ORACLE_COLUMN.into()],
                variables: Vec::new(),
                provenance: "true prognostic function".into(),
            })
        }
        Strategy::Risk => risk_score(d, opts),
        Strategy::Lasso => per_arm_lasso(d, opts),
    }
}

fn risk_score(d: &Dataset, opts: &AdjustOptions) -> Result<AdjustedDesign> {
    let fit = fit_penalized(d, Penalty::Ridge, opts.folds, true, derive_seed(opts.seed, &[0x21]), &opts.path)?;
    let ex = d.expand_covariates();
    let mut score: Vec<f64> = (0..d.n())
        .map(|i| (0..ex.ncols()).map(|j| ex.matrix[(i, j)] * fit.coef_at_opt[j]).sum())
        .collect();
    // Heavy shrinkage leaves a score of tiny spread whose coefficient would be
    // huge; the scale carries no information, so standardize it.
    let n = score.len() as f64;
    let mean = score.iter().sum::<f64>() / n;
    let sd = (score.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 1e-10 * (1.0 + mean.abs())) {
        warn!("ridge selected the null model; no prognostic adjustment");
        return Ok(AdjustedDesign {
            strategy: Strategy::Risk,
            provenance: format!("ridge risk score is constant (lambda = {:.4e})", fit.lambda_opt),
            ..AdjustedDesign::empty(d.n())
        });
    }
    score.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    Ok(AdjustedDesign {
        strategy: Strategy::Risk,
        columns: DMatrix::from_column_slice(d.n(), 1, &score),
        names: vec![RISK_SCORE.into()],
        variables: (0..d.k()).collect(),
        provenance: format!("ridge risk score, lambda = {:.4e}", fit.lambda_opt),
    })
}

fn per_arm_lasso(d: &Dataset, opts: &AdjustOptions) -> Result<AdjustedDesign> {
    let arms: Vec<Vec<usize>> = if d.treatment_is_binary() {
        [0.0, 1.0]
            .iter()
            .map(|&a| (0..d.n()).filter(|&i| d.treatment_raw[i] == a).collect())
            .collect()
    } else {
        warn!("treatment is not binary; fitting a single LASSO on all subjects");
        vec![(0..d.n()).collect()]
    };
    if d.family == Family::CoxPH {
        let ev = d.events().expect("validated Cox data has events");
        if let Some(few) = arms
            .iter()
            .map(|rows| rows.iter().filter(|&&i| ev[i]).count())
            .find(|&e| e < opts.min_arm_events)
        {
            warn!("treatment arm with {few} events is too small for LASSO; using the risk-score adjustment");
            let mut out = risk_score(d, opts)?;
            out.provenance = format!("lasso fallback ({few} events in an arm): {}", out.provenance);
            return Ok(out);
        }
    }
    let ex = d.expand_covariates();
    let mut keep = vec![false; ex.ncols()];
    let mut lambdas = Vec::new();
    for (a, rows) in arms.iter().enumerate() {
        let sub = d.subset(rows);
        let fit = fit_penalized(&sub, Penalty::Lasso, opts.folds, true, derive_seed(opts.seed, &[0x1a, a as u64]), &opts.path)?;
        for j in fit.selected() {
            keep[j] = true;
        }
        lambdas.push(fit.lambda_opt);
    }
    let cols: Vec<usize> = (0..ex.ncols()).filter(|&j| keep[j]).collect();
    let sel = ex.select_columns(&cols);
    let mut variables: Vec<usize> = sel.variable.clone();
    variables.dedup();
    Ok(AdjustedDesign {
        strategy: Strategy::Lasso,
        provenance: format!(
            "per-arm lasso selected {} of {} columns (lambda {})",
            cols.len(),
            ex.ncols(),
            lambdas.iter().map(|l| format!("{l:.4e}")).collect::<Vec<_>>().join(", ")
        ),
        columns: sel.matrix,
        names: sel.names,
        variables,
    })
}
