//! Root-node parameter-instability test in the style of model-based
//! recursive partitioning: the treatment score is checked for structural
//! change along each covariate, per-covariate p-values come from a
//! permutation null, and the global p-value is Bonferroni adjusted.

use log::warn;
use rand::seq::SliceRandom;

use super::{at_least, mc_pvalue, Method, TestResult};
use crate::dataset::{ColumnData, Dataset};
use crate::error::{Error, Result};
use crate::fitters::FittedModel;
use crate::par::{map_indexed, rng_from, Execution};
use crate::scores::{orthogonalize_treatment_score, score_matrix};

#[derive(Debug, Clone)]
pub struct MobOptions {
    pub b: usize,
    pub seed: u64,
    /// Remove the projection of the treatment score on the other scores.
    pub orthogonalize: bool,
    /// supLM trimming: splits with left fraction outside `[trim, 1 - trim]`
    /// are ignored.
    pub trim: f64,
    pub execution: Execution,
}

impl Default for MobOptions {
    fn default() -> Self {
        MobOptions {
            b: 9999,
            seed: 0,
            orthogonalize: true,
            trim: 0.1,
            execution: Execution::Parallel,
        }
    }
}

enum Fluctuation {
    /// Subject order by covariate value and admissible split sizes.
    Numeric { order: Vec<usize>, splits: Vec<usize> },
    /// Level code per subject and level counts.
    Categorical { codes: Vec<u32>, counts: Vec<usize> },
}

impl Fluctuation {
    /// Statistic for score vector `u` (mean zero, variance `var`).
    fn statistic(&self, u: &[f64], var: f64, sums: &mut Vec<f64>) -> f64 {
        let n = u.len() as f64;
        match self {
            Fluctuation::Numeric { order, splits } => {
                let mut best = 0.0f64;
                let mut cum = 0.0;
                let mut pos = 0;
                for &k in splits {
                    while pos < k {
                        cum += u[order[pos]];
                        pos += 1;
                    }
                    let t = k as f64 / n;
                    best = best.max(cum * cum / (n * var * t * (1.0 - t)));
                }
                best
            }
            Fluctuation::Categorical { codes, counts } => {
                sums.clear();
                sums.resize(counts.len(), 0.0);
                for (&c, &v) in codes.iter().zip(u) {
                    sums[c as usize] += v;
                }
                sums.iter()
                    .zip(counts)
                    .filter(|(_, &c)| c > 0)
                    .map(|(s, &c)| s * s / (c as f64 * var))
                    .sum()
            }
        }
    }
}

fn prepare(d: &Dataset, trim: f64) -> Vec<(usize, Fluctuation)> {
    let n = d.n();
    let mut out = Vec::new();
    for (j, c) in d.covariates.iter().enumerate() {
        if c.distinct_count() < 2 {
            warn!("covariate '{}' has a single value and is skipped", c.name);
            continue;
        }
        match &c.data {
            ColumnData::Numeric(v) => {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
                let lo = (trim * n as f64).ceil() as usize;
                let hi = ((1.0 - trim) * n as f64).floor() as usize;
                let splits: Vec<usize> = (lo.max(1)..=hi.min(n - 1))
                    .filter(|&k| v[order[k - 1]] < v[order[k]])
                    .collect();
                if splits.is_empty() {
                    warn!("covariate '{}' has no admissible split inside the trimming window", c.name);
                    continue;
                }
                out.push((j, Fluctuation::Numeric { order, splits }));
            }
            ColumnData::Categorical(codes) => {
                let mut counts = vec![0; c.levels().map_or(0, |l| l.len())];
                for &k in codes {
                    counts[k as usize] += 1;
                }
                out.push((j, Fluctuation::Categorical { codes: codes.clone(), counts }));
            }
        }
    }
    out
}

pub fn mob_root_test(m: &FittedModel, d: &Dataset, opts: &MobOptions) -> Result<TestResult> {
    if opts.b < 99 {
        return Err(Error::Config(format!("at least 99 permutations required, got {}", opts.b)));
    }
    let full = score_matrix(m, d)?;
    let mut u: Vec<f64> = if opts.orthogonalize {
        orthogonalize_treatment_score(&full, m.treatment_index)?
    } else {
        full.column(m.treatment_index).iter().copied().collect()
    };
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    u.iter_mut().for_each(|v| *v -= mean);
    let var = u.iter().map(|v| v * v).sum::<f64>() / n;
    let scale = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if var <= 0.0 || scale == 0.0 {
        return Err(Error::Degenerate("treatment score is constant".into()));
    }
    let tests = prepare(d, opts.trim);
    if tests.is_empty() {
        return Err(Error::Degenerate("no covariate admits a fluctuation test".into()));
    }
    let mut buf = Vec::new();
    let observed: Vec<f64> = tests.iter().map(|(_, f)| f.statistic(&u, var, &mut buf)).collect();
    const CHUNK: usize = 64;
    let chunks = opts.b.div_ceil(CHUNK);
    let counts: Vec<Vec<usize>> = map_indexed(chunks, opts.execution, |ch| {
        let mut rng = rng_from(opts.seed, &[0x30b, ch as u64]);
        let mut perm = u.clone();
        let mut buf = Vec::new();
        let mut cnt = vec![0; tests.len()];
        for _ in 0..CHUNK.min(opts.b - ch * CHUNK) {
            perm.shuffle(&mut rng);
            for (k, (_, f)) in tests.iter().enumerate() {
                cnt[k] += at_least(f.statistic(&perm, var, &mut buf), observed[k]) as usize;
            }
        }
        cnt
    });
    let mut per = Vec::with_capacity(tests.len());
    let mut best = (f64::INFINITY, 0.0);
    for (k, (j, _)) in tests.iter().enumerate() {
        let p = mc_pvalue(counts.iter().map(|c| c[k]).sum(), opts.b);
        if p < best.0 {
            best = (p, observed[k]);
        }
        per.push((d.covariates[*j].name.clone(), p));
    }
    let global = (tests.len() as f64 * best.0).min(1.0);
    let mut r = TestResult::new(Method::MobRoot, best.1, global, opts.b, Some(opts.seed))?;
    r.per_covariate_p = Some(per);
    Ok(r)
}
