//! Global tests of treatment effect homogeneity.

mod independence;
pub(crate) mod lrt;
mod mob;
mod oracle;

pub use independence::{independence_test, linear_statistic, LinearStatistic, NullDistribution, Statistic};
pub use lrt::{bootstrap_lrt, lrt_interaction, BootstrapOptions};
pub use mob::{mob_root_test, MobOptions};
pub use oracle::{oracle_lrt, oracle_test};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Method {
    ResidualPermMax,
    ResidualPermQuad,
    #[serde(rename = "LRTAsymptotic")]
    LrtAsymptotic,
    #[serde(rename = "LRTBootstrap")]
    LrtBootstrap,
    #[serde(rename = "MOBRoot")]
    MobRoot,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ResidualPermMax,
        Method::ResidualPermQuad,
        Method::LrtAsymptotic,
        Method::LrtBootstrap,
        Method::MobRoot,
        Method::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ResidualPermMax => "ResidualPermMax",
            Method::ResidualPermQuad => "ResidualPermQuad",
            Method::LrtAsymptotic => "LRTAsymptotic",
            Method::LrtBootstrap => "LRTBootstrap",
            Method::MobRoot => "MOBRoot",
            Method::Oracle => "Oracle",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: Method,
    pub statistic: f64,
    pub p_value: f64,
    pub surprise: f64,
    /// Degrees of freedom (asymptotic tests) or replicate count.
    pub df_or_b: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_covariate_p: Option<Vec<(String, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

impl TestResult {
    pub fn new(method: Method, statistic: f64, p_value: f64, df_or_b: usize, seed: Option<u64>) -> Result<Self> {
        let p_value = p_value.min(1.0);
        Ok(TestResult {
            method,
            statistic,
            p_value,
            surprise: surprise(p_value)?,
            df_or_b,
            per_covariate_p: None,
            seed,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("test result serializes")
    }

    pub const CSV_HEADER: [&'static str; 6] = ["method", "statistic", "p", "surprise", "df_or_B", "seed"];

    pub fn csv_row(&self) -> [String; 6] {
        [
            self.method.to_string(),
            self.statistic.to_string(),
            self.p_value.to_string(),
            self.surprise.to_string(),
            self.df_or_b.to_string(),
            self.seed.map_or(String::new(), |s| s.to_string()),
        ]
    }
}

/// `-log2(p)`.
pub fn surprise(p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("p-value {p} outside (0, 1]")));
    }
    Ok(-p.log2() + 0.0)
}

/// Add-one Monte Carlo p-value.
pub(crate) fn mc_pvalue(exceed: usize, b: usize) -> f64 {
    (1 + exceed) as f64 / (b + 1) as f64
}

/// `candidate >= observed` up to floating-point noise, so that permutations
/// reproducing the observed arrangement always count.
#[inline]
pub(crate) fn at_least(candidate: f64, observed: f64) -> bool {
    candidate >= observed - 1e-10 * observed.abs().max(1e-300)
}
