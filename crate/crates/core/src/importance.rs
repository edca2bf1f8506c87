//! Which covariates drive the heterogeneity? Two rankings:
//!
//! * a regression forest grown on the score residuals with out-of-bag
//!   permutation importance (permuting a categorical variable moves all of
//!   its levels together), and
//! * per-covariate interaction likelihood-ratio tests.
//!
//! The default splitter follows conditional inference trees: the split
//! variable is the one with the smallest association-test p-value, and the
//! cut point maximizes the between-node sum of squares for that variable.
//! This avoids the preference of exhaustive search for variables with many
//! cut points. A CART splitter is available through [`Splitter`].

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dataset::{ColumnData, Dataset, ExpandedCovariates};
use crate::error::{Error, Result};
use crate::fitters::{fit_design, AdjustedDesign, FitOptions, ModelDesign, Parameterization};
use crate::hypothesis::lrt::compare;
use crate::hypothesis::surprise;
use crate::par::{map_indexed, rng_from, Execution, Rng};
use crate::scores::ScoreVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMethod {
    Forest,
    Lrt,
}

impl ImportanceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ImportanceMethod::Forest => "forest",
            ImportanceMethod::Lrt => "lrt",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableImportance {
    pub method: ImportanceMethod,
    /// Importance per original covariate, in dataset order.
    pub per_variable: Vec<(String, f64)>,
    /// Covariate names, most important first (ties by name).
    pub ranking: Vec<String>,
    /// Forest only: `per_tree[t][j]` (NaN when tree `t` has no out-of-bag
    /// subjects).
    pub per_tree: Option<Vec<Vec<f64>>>,
}

impl VariableImportance {
    fn new(method: ImportanceMethod, per_variable: Vec<(String, f64)>, per_tree: Option<Vec<Vec<f64>>>) -> Self {
        let mut order: Vec<&(String, f64)> = per_variable.iter().collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let ranking = order.into_iter().map(|(n, _)| n.clone()).collect();
        VariableImportance {
            method,
            per_variable,
            ranking,
            per_tree,
        }
    }

    pub fn top(&self) -> Option<&str> {
        self.ranking.first().map(String::as_str)
    }

    pub fn importance_of(&self, name: &str) -> Option<f64> {
        self.per_variable.iter().find(|(n, _)| n == name).map(|t| t.1)
    }

    /// Long format: `method,variable,rank,importance`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "variable", "rank", "importance"])?;
        for (r, name) in self.ranking.iter().enumerate() {
            let v = self.importance_of(name).unwrap_or(f64::NAN);
            wr.write_record([self.method.as_str(), name, &(r + 1).to_string(), &v.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// forest

/// Covariate columns as seen by the trees.
#[derive(Debug, Clone)]
pub enum Feature {
    Numeric(Vec<f64>),
    /// Codes and number of levels.
    Categorical(Vec<u32>, usize),
}

impl Feature {
    fn from_dataset(d: &Dataset) -> Vec<Feature> {
        d.covariates
            .iter()
            .map(|c| match &c.data {
                ColumnData::Numeric(v) => Feature::Numeric(v.clone()),
                ColumnData::Categorical(k) => Feature::Categorical(k.clone(), c.levels().map_or(0, |l| l.len())),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    /// Left when `x <= threshold`.
    Numeric(f64),
    /// Left when the level is in the set.
    Levels(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub variable: usize,
    pub rule: Rule,
    /// Reduction in the residual sum of squares.
    pub gain: f64,
}

impl Split {
    fn goes_left(&self, f: &Feature, i: usize) -> bool {
        match (&self.rule, f) {
            (Rule::Numeric(t), Feature::Numeric(v)) => v[i] <= *t,
            (Rule::Levels(set), Feature::Categorical(c, _)) => set[c[i] as usize],
            _ => unreachable!("rule and feature kind disagree"),
        }
    }
}

/// Chooses a split of the subjects `idx` among the `candidates` variables;
/// every child must keep at least `min_child` subjects.
pub trait Splitter: Sync {
    fn best_split(&self, features: &[Feature], y: &[f64], idx: &[usize], candidates: &[usize], min_child: usize)
        -> Option<Split>;
}

/// Best cut point of one variable by between-node sum of squares.
fn best_cut(f: &Feature, j: usize, y: &[f64], idx: &[usize], min_child: usize) -> Option<Split> {
    let n = idx.len();
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let base = total * total / n as f64;
    // ordered groups: (sort key, sum, count)
    let groups: Vec<(f64, f64, usize, Option<u32>)> = match f {
        Feature::Numeric(v) => {
            let mut o: Vec<usize> = idx.to_vec();
            o.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut g: Vec<(f64, f64, usize, Option<u32>)> = Vec::new();
            for &i in &o {
                match g.last_mut() {
                    Some(last) if last.0 == v[i] => {
                        last.1 += y[i];
                        last.2 += 1;
                    }
                    _ => g.push((v[i], y[i], 1, None)),
                }
            }
            g
        }
        Feature::Categorical(codes, nl) => {
            let mut sums = vec![(0.0, 0usize); *nl];
            for &i in idx {
                let s = &mut sums[codes[i] as usize];
                s.0 += y[i];
                s.1 += 1;
            }
            let mut g: Vec<(f64, f64, usize, Option<u32>)> = sums
                .iter()
                .enumerate()
                .filter(|(_, s)| s.1 > 0)
                .map(|(l, s)| (s.0 / s.1 as f64, s.0, s.1, Some(l as u32)))
                .collect();
            // ordering levels by their mean gives the optimal binary partition
            g.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.3.cmp(&b.3)));
            g
        }
    };
    if groups.len() < 2 {
        return None;
    }
    let mut best: Option<(f64, usize)> = None;
    let (mut sl, mut nl) = (0.0, 0usize);
    for g in 0..groups.len() - 1 {
        sl += groups[g].1;
        nl += groups[g].2;
        let nr = n - nl;
        if nl < min_child || nr < min_child {
            continue;
        }
        let sr = total - sl;
        let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - base;
        if best.is_none_or(|b| gain > b.0) {
            best = Some((gain, g));
        }
    }
    let (gain, g) = best?;
    let rule = match f {
        Feature::Numeric(_) => Rule::Numeric(0.5 * (groups[g].0 + groups[g + 1].0)),
        Feature::Categorical(_, nl) => {
            let mut set = vec![false; *nl];
            for grp in &groups[..=g] {
                set[grp.3.unwrap() as usize] = true;
            }
            Rule::Levels(set)
        }
    };
    Some(Split { variable: j, rule, gain })
}

/// Exhaustive search: the cut with the largest sum-of-squares reduction over
/// all candidate variables.
#[derive(Debug, Clone, Copy, Default)]
pub struct CartSplitter;

impl Splitter for CartSplitter {
    fn best_split(&self, features: &[Feature], y: &[f64], idx: &[usize], candidates: &[usize], min_child: usize)
        -> Option<Split> {
        candidates
            .iter()
            .filter_map(|&j| best_cut(&features[j], j, y, idx, min_child))
            .fold(None, |acc: Option<Split>, s| match acc {
                Some(a) if a.gain > s.gain || (a.gain == s.gain && a.variable < s.variable) => Some(a),
                _ => Some(s),
            })
    }
}

/// Variable selection by the permutation-moment association test of the
/// node outcome with each candidate (chi-square approximation), cut point
/// by [`best_cut`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ConditionalSplitter;

/// Association test of `y` with a feature on subjects `idx`:
/// `(p-value, statistic)`.
fn association(f: &Feature, y: &[f64], idx: &[usize]) -> Option<(f64, f64)> {
    let n = idx.len() as f64;
    let ym = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    let syy: f64 = idx.iter().map(|&i| (y[i] - ym).powi(2)).sum();
    if syy <= 0.0 || n < 3.0 {
        return None;
    }
    let vy = syy / (n - 1.0);
    let (stat, df) = match f {
        Feature::Numeric(v) => {
            let xm = idx.iter().map(|&i| v[i]).sum::<f64>() / n;
            let sxx: f64 = idx.iter().map(|&i| (v[i] - xm).powi(2)).sum();
            if sxx <= 0.0 {
                return None;
            }
            let sxy: f64 = idx.iter().map(|&i| (v[i] - xm) * (y[i] - ym)).sum();
            (sxy * sxy / (vy * sxx), 1.0)
        }
        Feature::Categorical(codes, nl) => {
            let mut s = vec![(0.0, 0usize); *nl];
            for &i in idx {
                let e = &mut s[codes[i] as usize];
                e.0 += y[i] - ym;
                e.1 += 1;
            }
            let present = s.iter().filter(|e| e.1 > 0).count();
            if present < 2 {
                return None;
            }
            let between: f64 = s.iter().filter(|e| e.1 > 0).map(|e| e.0 * e.0 / e.1 as f64).sum();
            (between / vy, (present - 1) as f64)
        }
    };
    let p = ChiSquared::new(df).map(|c| c.sf(stat)).unwrap_or(1.0);
    Some((p, stat / df))
}

impl Splitter for ConditionalSplitter {
    fn best_split(&self, features: &[Feature], y: &[f64], idx: &[usize], candidates: &[usize], min_child: usize)
        -> Option<Split> {
        let mut ranked: Vec<(f64, f64, usize)> = candidates
            .iter()
            .filter_map(|&j| association(&features[j], y, idx).map(|(p, s)| (p, s, j)))
            .collect();
        // smallest p; underflowed p-values fall back to the per-df statistic
        ranked.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
        });
        ranked
            .into_iter()
            .find_map(|(_, _, j)| best_cut(&features[j], j, y, idx, min_child))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRule {
    #[default]
    Conditional,
    Cart,
}

#[derive(Debug, Clone)]
pub struct ForestOptions {
    pub n_trees: usize,
    /// Variables tried per node; `None` = `ceil(sqrt(k))`.
    pub mtry: Option<usize>,
    /// Nodes smaller than this are not split.
    pub min_node: usize,
    pub max_depth: usize,
    /// Fraction of subjects drawn (without replacement) for each tree.
    pub sample_fraction: f64,
    pub split_rule: SplitRule,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for ForestOptions {
    fn default() -> Self {
        ForestOptions {
            n_trees: 100,
            mtry: None,
            min_node: 20,
            max_depth: 6,
            sample_fraction: 0.632,
            split_rule: SplitRule::Conditional,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Inner { split: Split, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
    /// Subjects not used to grow the tree.
    pub oob: Vec<usize>,
}

impl Tree {
    fn predict(&self, features: &[Feature], i: usize, permuted: Option<(usize, &Feature)>) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(v) => return *v,
                Node::Inner { split, left, right } => {
                    let f = match permuted {
                        Some((j, pf)) if j == split.variable => pf,
                        _ => &features[split.variable],
                    };
                    k = if split.goes_left(f, i) { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

struct Grower<'a> {
    features: &'a [Feature],
    y: &'a [f64],
    splitter: &'a dyn Splitter,
    mtry: usize,
    opts: &'a ForestOptions,
}

impl Grower<'_> {
    fn grow(&self, rng: &mut Rng) -> Tree {
        let n = self.y.len();
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        let m = ((self.opts.sample_fraction * n as f64).ceil() as usize).clamp(1, n);
        let (inbag, oob) = all.split_at(m);
        let mut oob = oob.to_vec();
        oob.sort_unstable();
        let mut nodes = Vec::new();
        self.node(inbag.to_vec(), 0, rng, &mut nodes);
        Tree { nodes, oob }
    }

    fn node(&self, idx: Vec<usize>, depth: usize, rng: &mut Rng, nodes: &mut Vec<Node>) -> usize {
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        let me = nodes.len();
        nodes.push(Node::Leaf(mean));
        if depth >= self.opts.max_depth || idx.len() < self.opts.min_node {
            return me;
        }
        let k = self.features.len();
        let candidates: Vec<usize> = {
            let all: Vec<usize> = (0..k).collect();
            let mut c: Vec<usize> = all.choose_multiple(rng, self.mtry.min(k)).copied().collect();
            c.sort_unstable();
            c
        };
        let min_child = (self.opts.min_node / 3).max(1);
        let Some(split) = self.splitter.best_split(self.features, self.y, &idx, &candidates, min_child) else {
            return me;
        };
        let f = &self.features[split.variable];
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| split.goes_left(f, i));
        let left = self.node(l, depth + 1, rng, nodes);
        let right = self.node(r, depth + 1, rng, nodes);
        nodes[me] = Node::Inner { split, left, right };
        me
    }
}

pub struct Forest {
    pub trees: Vec<Tree>,
    features: Vec<Feature>,
    y: Vec<f64>,
    names: Vec<String>,
}

impl Forest {
    pub fn fit(d: &Dataset, y: &[f64], opts: &ForestOptions) -> Result<Forest> {
        if y.len() != d.n() {
            return Err(Error::validation("response length differs from the dataset"));
        }
        if d.k() == 0 {
            return Err(Error::validation("forest needs at least one covariate"));
        }
        if opts.n_trees == 0 || !(opts.sample_fraction > 0.0 && opts.sample_fraction < 1.0) {
            return Err(Error::Config("need n_trees >= 1 and 0 < sample_fraction < 1".into()));
        }
        let features = Feature::from_dataset(d);
        let mtry = opts.mtry.unwrap_or_else(|| (d.k() as f64).sqrt().ceil() as usize).max(1);
        let splitter: &dyn Splitter = match opts.split_rule {
            SplitRule::Conditional => &ConditionalSplitter,
            SplitRule::Cart => &CartSplitter,
        };
        let grower = Grower {
            features: &features,
            y,
            splitter,
            mtry,
            opts,
        };
        let trees = map_indexed(opts.n_trees, opts.execution, |t| {
            grower.grow(&mut rng_from(opts.seed, &[0xf0, t as u64]))
        });
        Ok(Forest {
            trees,
            features,
            y: y.to_vec(),
            names: d.covariate_names(),
        })
    }

    /// Mean increase of out-of-bag squared error when one covariate is
    /// permuted among the out-of-bag subjects of each tree.
    pub fn permutation_importance(&self, seed: u64, exec: Execution) -> VariableImportance {
        let k = self.features.len();
        let per_tree: Vec<Vec<f64>> = map_indexed(self.trees.len(), exec, |t| {
            let tree = &self.trees[t];
            let oob = &tree.oob;
            if oob.is_empty() {
                return vec![f64::NAN; k];
            }
            let mse = |perm: Option<(usize, &Feature)>| -> f64 {
                oob.iter()
                    .map(|&i| (self.y[i] - tree.predict(&self.features, i, perm)).powi(2))
                    .sum::<f64>()
                    / oob.len() as f64
            };
            let base = mse(None);
            let mut rng = rng_from(seed, &[0xf1, t as u64]);
            (0..k)
                .map(|j| {
                    let mut shuffled = oob.clone();
                    shuffled.shuffle(&mut rng);
                    let pf = permute_feature(&self.features[j], oob, &shuffled);
                    mse(Some((j, &pf))) - base
                })
                .collect()
        });
        let per_variable = (0..k)
            .map(|j| {
                let vals: Vec<f64> = per_tree.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
                let m = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
                (self.names[j].clone(), m)
            })
            .collect();
        VariableImportance::new(ImportanceMethod::Forest, per_variable, Some(per_tree))
    }
}

/// Copy of `f` with the values at `rows` replaced by those at `from`.
fn permute_feature(f: &Feature, rows: &[usize], from: &[usize]) -> Feature {
    match f {
        Feature::Numeric(v) => {
            let mut out = v.clone();
            for (&r, &s) in rows.iter().zip(from) {
                out[r] = v[s];
            }
            Feature::Numeric(out)
        }
        Feature::Categorical(c, nl) => {
            let mut out = c.clone();
            for (&r, &s) in rows.iter().zip(from) {
                out[r] = c[s];
            }
            Feature::Categorical(out, *nl)
        }
    }
}

/// Forest on the score residuals with permutation importance.
pub fn forest_importance(s: &ScoreVector, d: &Dataset, opts: &ForestOptions) -> Result<VariableImportance> {
    let forest = Forest::fit(d, &s.s, opts)?;
    Ok(forest.permutation_importance(opts.seed, opts.execution))
}

/// For each covariate, the LRT of its treatment interaction(s) added to the
/// main model; importance is the surprise `-log2 p`.
pub fn lrt_importance(d: &Dataset, adjusted: &AdjustedDesign, param: Parameterization) -> Result<VariableImportance> {
    let main = ModelDesign::main_effects(d, adjusted, param)?;
    let m0 = fit_design(d, &main, &FitOptions::default())?;
    let expanded: ExpandedCovariates = d.expand_covariates();
    let mut per_variable = Vec::with_capacity(d.k());
    for (j, c) in d.covariates.iter().enumerate() {
        let cols = expanded.columns_of(j);
        let value = if cols.is_empty() {
            0.0
        } else {
            let mods = expanded.select_columns(&cols);
            let full = ModelDesign::with_interactions(d, adjusted, param, &mods)?;
            let m1 = fit_design(d, &full, &FitOptions::default())?;
            let (_, p, _) = compare(d, &m0, &m1);
            surprise(p.max(f64::MIN_POSITIVE))?
        };
        per_variable.push((c.name.clone(), value));
    }
    Ok(VariableImportance::new(ImportanceMethod::Lrt, per_variable, None))
}

/// Rank ordering helper used by reports: position of `name` (1-based).
pub fn rank_of(vi: &VariableImportance, name: &str) -> Option<usize> {
    vi.ranking.iter().position(|n| n == name).map(|p| p + 1)
}
