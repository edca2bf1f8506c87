//! Permutation test of independence between a score vector and a covariate
//! matrix, using the conditional moments of the linear statistic
//! `T = sum_i x_i s_i` under permutation of `s`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{at_least, mc_pvalue, Method, TestResult};
use crate::error::{Error, Result};
use crate::linalg::{norm_sf, PINV_RTOL};
use crate::par::{map_indexed, rng_from, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Max,
    Quad,
}

impl std::str::FromStr for Statistic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" | "maximum" => Ok(Statistic::Max),
            "quad" | "quadratic" => Ok(Statistic::Quad),
            other => Err(Error::Config(format!("unknown statistic '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NullDistribution {
    MonteCarlo { b: usize },
    Asymptotic,
}

/// Number of multivariate normal draws for the asymptotic max-statistic
/// p-value.
pub const MVN_DRAWS: usize = 100_000;
const CHUNK: usize = 128;

/// `T`, its permutation mean and covariance.
#[derive(Debug, Clone)]
pub struct LinearStatistic {
    pub t: DVector<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

pub fn linear_statistic(s: &[f64], x: &DMatrix<f64>) -> LinearStatistic {
    let (n, p) = x.shape();
    let nf = n as f64;
    let sv = DVector::from_column_slice(s);
    let t = x.tr_mul(&sv);
    let sbar = s.iter().sum::<f64>() / nf;
    let colsum = DVector::from_fn(p, |j, _| x.column(j).sum());
    let mu = &colsum * sbar;
    let vs = s.iter().map(|v| (v - sbar).powi(2)).sum::<f64>() / (nf - 1.0);
    let xc = centered(x);
    let sigma = xc.tr_mul(&xc) * vs;
    LinearStatistic { t, mu, sigma }
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut xc = x.clone();
    for mut c in xc.column_iter_mut() {
        let m = c.sum() / n;
        c.add_scalar_mut(-m);
    }
    xc
}

/// Projection `A` such that the statistic of a score arrangement `s` is
/// `max_j |A_j' s|` (Max) or `|A' s|²` (Quad). Valid for every permutation of
/// `s` because the conditional moments are permutation invariant.
struct Prepared {
    a: DMatrix<f64>,
    stat: Statistic,
    /// Eigen-decomposition of the correlation matrix for the MVN tail.
    corr_root: Option<DMatrix<f64>>,
}

impl Prepared {
    fn new(s: &[f64], x: &DMatrix<f64>, stat: Statistic) -> Result<Self> {
        let n = s.len() as f64;
        let sbar = s.iter().sum::<f64>() / n;
        let vs = s.iter().map(|v| (v - sbar).powi(2)).sum::<f64>() / (n - 1.0);
        let xc = centered(x);
        let sigma = xc.tr_mul(&xc) * vs;
        let max_diag = sigma.diagonal().amax();
        match stat {
            Statistic::Max => {
                let keep: Vec<usize> = (0..x.ncols()).filter(|&j| sigma[(j, j)] > max_diag * 1e-12).collect();
                if keep.is_empty() || max_diag <= 0.0 {
                    return Err(Error::Degenerate("no covariate column varies".into()));
                }
                let mut a = xc.select_columns(&keep);
                for (c, &j) in keep.iter().enumerate() {
                    a.column_mut(c).scale_mut(1.0 / sigma[(j, j)].sqrt());
                }
                let sub = sigma.select_rows(&keep).select_columns(&keep);
                let d: Vec<f64> = keep.iter().map(|&j| sigma[(j, j)].sqrt()).collect();
                let corr = DMatrix::from_fn(keep.len(), keep.len(), |i, j| sub[(i, j)] / (d[i] * d[j]));
                let eig = corr.symmetric_eigen();
                let mut root = eig.eigenvectors.clone();
                for (k, ev) in eig.eigenvalues.iter().enumerate() {
                    root.column_mut(k).scale_mut(ev.max(0.0).sqrt());
                }
                Ok(Prepared {
                    a,
                    stat,
                    corr_root: Some(root),
                })
            }
            Statistic::Quad => {
                let eig = sigma.symmetric_eigen();
                let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let keep: Vec<usize> = (0..eig.eigenvalues.len())
                    .filter(|&k| eig.eigenvalues[k] > top * PINV_RTOL && eig.eigenvalues[k] > 0.0)
                    .collect();
                if keep.is_empty() {
                    return Err(Error::Degenerate("no covariate column varies".into()));
                }
                let mut w = DMatrix::zeros(x.ncols(), keep.len());
                for (c, &k) in keep.iter().enumerate() {
                    w.column_mut(c).copy_from(&(eig.eigenvectors.column(k) / eig.eigenvalues[k].sqrt()));
                }
                Ok(Prepared {
                    a: xc * w,
                    stat,
                    corr_root: None,
                })
            }
        }
    }

    fn df(&self) -> usize {
        self.a.ncols()
    }

    fn evaluate(&self, s: &[f64]) -> f64 {
        let mut best = 0.0f64;
        let mut sum = 0.0;
        for col in self.a.column_iter() {
            let v: f64 = col.iter().zip(s).map(|(a, s)| a * s).sum();
            match self.stat {
                Statistic::Max => best = best.max(v.abs()),
                Statistic::Quad => sum += v * v,
            }
        }
        match self.stat {
            Statistic::Max => best,
            Statistic::Quad => sum,
        }
    }
}

/// Permutation independence test of `s` against the (dummy-expanded)
/// covariate matrix `x`.
pub fn independence_test(
    s: &[f64],
    x: &DMatrix<f64>,
    stat: Statistic,
    null: NullDistribution,
    seed: u64,
    exec: Execution,
) -> Result<TestResult> {
    let n = s.len();
    if x.nrows() != n {
        return Err(Error::validation("score vector and covariate matrix lengths differ"));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("independence test needs at least 3 subjects, got {n}")));
    }
    let mean = s.iter().sum::<f64>() / n as f64;
    let spread = s.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-14 * mean.abs().max(f64::MIN_POSITIVE) || spread == 0.0 {
        return Err(Error::Degenerate("score vector is constant".into()));
    }
    let prep = Prepared::new(s, x, stat)?;
    let c = prep.evaluate(s);
    let method = match stat {
        Statistic::Max => Method::ResidualPermMax,
        Statistic::Quad => Method::ResidualPermQuad,
    };
    match null {
        NullDistribution::MonteCarlo { b } => {
            if b < 99 {
                return Err(Error::Config(format!("at least 99 permutations required, got {b}")));
            }
            let chunks = b.div_ceil(CHUNK);
            let counts = map_indexed(chunks, exec, |ch| {
                let mut rng = rng_from(seed, &[ch as u64]);
                let mut perm = s.to_vec();
                let reps = CHUNK.min(b - ch * CHUNK);
                (0..reps)
                    .filter(|_| {
                        perm.shuffle(&mut rng);
                        at_least(prep.evaluate(&perm), c)
                    })
                    .count()
            });
            TestResult::new(method, c, mc_pvalue(counts.iter().sum(), b), b, Some(seed))
        }
        NullDistribution::Asymptotic => {
            let p = match stat {
                Statistic::Quad => ChiSquared::new(prep.df() as f64).expect("positive df").sf(c),
                Statistic::Max if prep.df() == 1 => 2.0 * norm_sf(c),
                Statistic::Max => mvn_max_tail(prep.corr_root.as_ref().unwrap(), c, seed, exec),
            };
            TestResult::new(method, c, p.max(f64::MIN_POSITIVE), prep.df(), Some(seed))
        }
    }
}

/// `P(max_j |Y_j| >= c)` for `Y ~ N(0, R)` with `R = root rootᵀ`, by simulation.
fn mvn_max_tail(root: &DMatrix<f64>, c: f64, seed: u64, exec: Execution) -> f64 {
    let m = root.nrows();
    let chunk = 4096;
    let chunks = MVN_DRAWS.div_ceil(chunk);
    let counts = map_indexed(chunks, exec, |ch| {
        let mut rng = rng_from(seed, &[0x3d, ch as u64]);
        let reps = chunk.min(MVN_DRAWS - ch * chunk);
        let mut z = DVector::zeros(m);
        let mut y = DVector::zeros(m);
        let mut hit = 0;
        for _ in 0..reps {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            y.gemv(1.0, root, &z, 0.0);
            if y.amax() >= c {
                hit += 1;
            }
        }
        hit
    });
    mc_pvalue(counts.iter().sum(), MVN_DRAWS)
}
