//! Treatment effect heterogeneity assessment based on score residuals.
//!
//! A regression model (normal, logistic, negative binomial or Cox) defines the
//! overall treatment effect. The per-subject derivative of the log-likelihood
//! with respect to that effect, the *score residual*, is then tested for
//! dependence on baseline covariates and modelled with a forest to rank
//! candidate effect modifiers.
//!
//! The crate also contains the simulation machinery used to benchmark these
//! procedures against likelihood-ratio, bootstrap, fluctuation and oracle
//! tests.


pub mod datagen;
pub mod dataset;
pub mod error;
pub mod fitters;
pub mod hypothesis;
pub mod importance;
pub mod linalg;
pub mod par;
pub mod scores;
pub mod study;

pub use dataset::{CovariateKind, Dataset, EffectMeasures, Family, TreatmentExpectation};
pub use error::{Error, Result};
pub use fitters::{FittedModel, Parameterization};
pub use hypothesis::{Method, TestResult};
pub use scores::ScoreVector;
