//! Trial datasets: typed columns, CSV + schema ingestion, treatment centering
//! and elementary effect-measure arithmetic.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::mix64;

/// Outcome family of the analysis model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "binomial")]
    Binomial,
    #[serde(rename = "negbin")]
    NegBin,
    #[serde(rename = "cox", alias = "coxph")]
    CoxPH,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Normal, Family::Binomial, Family::NegBin, Family::CoxPH];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::Binomial => "binomial",
            Family::NegBin => "negbin",
            Family::CoxPH => "cox",
        }
    }

    /// GLM families carry an intercept; the Cox model does not.
    pub fn has_intercept(self) -> bool {
        self != Family::CoxPH
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(Family::Normal),
            "binomial" | "logistic" => Ok(Family::Binomial),
            "negbin" | "negative_binomial" => Ok(Family::NegBin),
            "cox" | "coxph" | "tte" => Ok(Family::CoxPH),
            other => Err(Error::Config(format!("unknown family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateKind {
    Numeric,
    /// Levels in first-appearance order; the first level is the reference.
    Categorical { levels: Vec<String> },
}

impl CovariateKind {
    pub fn categorical(levels: Vec<String>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::validation("categorical covariate needs at least one level"));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &levels {
            if !seen.insert(l.as_str()) {
                return Err(Error::validation(format!("duplicate categorical level '{l}'")));
            }
        }
        Ok(CovariateKind::Categorical { levels })
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, CovariateKind::Categorical { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    /// Codes index into the level list of the column's [`CovariateKind`].
    Categorical(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
    pub data: ColumnData,
}

impl Covariate {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Covariate {
            name: name.into(),
            kind: CovariateKind::Numeric,
            data: ColumnData::Numeric(values),
        }
    }

    pub fn categorical(name: impl Into<String>, levels: Vec<String>, codes: Vec<u32>) -> Result<Self> {
        let kind = CovariateKind::categorical(levels)?;
        let n_levels = match &kind {
            CovariateKind::Categorical { levels } => levels.len() as u32,
            CovariateKind::Numeric => unreachable!(),
        };
        let name = name.into();
        if let Some(bad) = codes.iter().find(|&&c| c >= n_levels) {
            return Err(Error::validation(format!("covariate '{name}': level code {bad} out of range")));
        }
        Ok(Covariate {
            name,
            kind,
            data: ColumnData::Categorical(codes),
        })
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Numeric value, or the level code for categorical columns.
    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        match &self.data {
            ColumnData::Numeric(v) => v[i],
            ColumnData::Categorical(v) => v[i] as f64,
        }
    }

    pub fn data_numeric(&self) -> Option<&[f64]> {
        match &self.data {
            ColumnData::Numeric(v) => Some(v),
            ColumnData::Categorical(_) => None,
        }
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.kind {
            CovariateKind::Categorical { levels } => Some(levels),
            CovariateKind::Numeric => None,
        }
    }

    /// Label of row `i` (formatted number for numeric columns).
    pub fn label(&self, i: usize) -> String {
        match (&self.data, &self.kind) {
            (ColumnData::Categorical(c), CovariateKind::Categorical { levels }) => levels[c[i] as usize].clone(),
            (ColumnData::Numeric(v), _) => format!("{}", v[i]),
            _ => unreachable!("column data and kind disagree"),
        }
    }

    /// Number of distinct values (levels actually present for categoricals).
    pub fn distinct_count(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => {
                let mut s = v.clone();
                s.sort_by(|a, b| a.total_cmp(b));
                s.dedup();
                s.len()
            }
            ColumnData::Categorical(c) => {
                let mut s = c.clone();
                s.sort_unstable();
                s.dedup();
                s.len()
            }
        }
    }

    fn subset(&self, rows: &[usize]) -> Covariate {
        let data = match &self.data {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&i| v[i]).collect()),
            ColumnData::Categorical(v) => ColumnData::Categorical(rows.iter().map(|&i| v[i]).collect()),
        };
        Covariate {
            name: self.name.clone(),
            kind: self.kind.clone(),
            data,
        }
    }
}

/// How `E(z | x)` is obtained when centering the treatment column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TreatmentExpectation {
    /// Known randomization probability (or known exposure mean).
    Known(f64),
    /// Sample mean of the treatment column.
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub family: Family,
    pub outcome: Vec<f64>,
    /// Event indicator, present exactly for Cox data.
    pub event: Option<Vec<bool>>,
    pub treatment_raw: Vec<f64>,
    pub treatment_centered: Option<Vec<f64>>,
    pub covariates: Vec<Covariate>,
}

impl Dataset {
    /// Builds and validates a dataset.
    pub fn new(
        family: Family,
        outcome: Vec<f64>,
        event: Option<Vec<bool>>,
        treatment_raw: Vec<f64>,
        covariates: Vec<Covariate>,
    ) -> Result<Self> {
        let d = Dataset {
            family,
            outcome,
            event,
            treatment_raw,
            treatment_centered: None,
            covariates,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn k(&self) -> usize {
        self.covariates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::validation("dataset has no rows"));
        }
        if self.treatment_raw.len() != n {
            return Err(Error::validation("treatment column length differs from outcome length"));
        }
        if let Some(c) = &self.treatment_centered {
            if c.len() != n {
                return Err(Error::validation("centered treatment length differs from outcome length"));
            }
        }
        for c in &self.covariates {
            if c.len() != n {
                return Err(Error::Validation {
                    line: None,
                    column: Some(c.name.clone()),
                    message: format!("length {} differs from n = {n}", c.len()),
                });
            }
            if let ColumnData::Numeric(v) = &c.data {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Validation {
                        line: None,
                        column: Some(c.name.clone()),
                        message: "non-finite value".into(),
                    });
                }
            }
        }
        match (&self.event, self.family) {
            (Some(_), f) if f != Family::CoxPH => {
                return Err(Error::validation(format!("event not allowed for family {f}")));
            }
            (None, Family::CoxPH) => return Err(Error::validation("cox family requires an event column")),
            (Some(e), _) if e.len() != n => {
                return Err(Error::validation("event column length differs from outcome length"));
            }
            _ => {}
        }
        for (i, (&y, &z)) in self.outcome.iter().zip(&self.treatment_raw).enumerate() {
            if !z.is_finite() {
                return Err(Error::validation(format!("row {}: non-finite treatment", i + 1)));
            }
            check_outcome(self.family, y).map_err(|m| Error::validation(format!("row {}: {m}", i + 1)))?;
        }
        Ok(())
    }

    /// Returns a copy with the centered treatment column set.
    pub fn center_treatment(&self, expectation: TreatmentExpectation) -> Result<Dataset> {
        let offset = match expectation {
            TreatmentExpectation::Known(p) => {
                if !p.is_finite() {
                    return Err(Error::Domain("treatment expectation must be finite".into()));
                }
                if self.treatment_is_binary() && !(0.0..=1.0).contains(&p) {
                    return Err(Error::Domain(format!(
                        "randomization probability {p} outside [0, 1] for binary treatment"
                    )));
                }
                p
            }
            TreatmentExpectation::Empirical => self.treatment_raw.iter().sum::<f64>() / self.n() as f64,
        };
        let mut out = self.clone();
        out.treatment_centered = Some(self.treatment_raw.iter().map(|z| z - offset).collect());
        Ok(out)
    }

    pub fn treatment_is_binary(&self) -> bool {
        self.treatment_raw.iter().all(|&z| z == 0.0 || z == 1.0)
    }

    pub fn events(&self) -> Option<&[bool]> {
        self.event.as_deref()
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.name == name)
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    /// Reference-coded expansion of all covariates.
    pub fn expand_covariates(&self) -> ExpandedCovariates {
        ExpandedCovariates::from_covariates(&self.covariates, self.n())
    }

    /// Row subset (all columns), used for per-arm fits and CV folds.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            family: self.family,
            outcome: pick(&self.outcome),
            event: self.event.as_ref().map(|e| rows.iter().map(|&i| e[i]).collect()),
            treatment_raw: pick(&self.treatment_raw),
            treatment_centered: self.treatment_centered.as_ref().map(pick),
            covariates: self.covariates.iter().map(|c| c.subset(rows)).collect(),
        }
    }

    /// Same data with a different outcome (and event) vector.
    pub fn with_outcome(&self, outcome: Vec<f64>, event: Option<Vec<bool>>) -> Dataset {
        Dataset {
            outcome,
            event,
            ..self.clone()
        }
    }

    /// Stable 64-bit digest of every stored value, used to check that
    /// several procedures consumed identical data.
    pub fn fingerprint(&self) -> u64 {
        let mut h = mix64(self.family as u64);
        let mut feed = |x: u64| h = mix64(h ^ x);
        for v in &self.outcome {
            feed(v.to_bits());
        }
        if let Some(e) = &self.event {
            for &v in e {
                feed(v as u64);
            }
        }
        for v in &self.treatment_raw {
            feed(v.to_bits());
        }
        if let Some(c) = &self.treatment_centered {
            for v in c {
                feed(v.to_bits());
            }
        }
        for c in &self.covariates {
            for b in c.name.bytes() {
                feed(b as u64);
            }
            for i in 0..c.len() {
                feed(c.value(i).to_bits());
            }
        }
        h
    }
}

fn check_outcome(family: Family, y: f64) -> std::result::Result<(), String> {
    if !y.is_finite() {
        return Err("non-finite outcome".into());
    }
    match family {
        Family::Normal => Ok(()),
        Family::Binomial if y == 0.0 || y == 1.0 => Ok(()),
        Family::Binomial => Err(format!("binary outcome must be 0 or 1, got {y}")),
        Family::NegBin if y >= 0.0 && y.fract() == 0.0 => Ok(()),
        Family::NegBin => Err(format!("count outcome must be a non-negative integer, got {y}")),
        Family::CoxPH if y > 0.0 => Ok(()),
        Family::CoxPH => Err(format!("event time must be strictly positive, got {y}")),
    }
}

/// Dummy-expanded covariate matrix.
#[derive(Debug, Clone)]
pub struct ExpandedCovariates {
    pub matrix: DMatrix<f64>,
    /// Column names: numeric columns keep their name, dummies are `var_level`.
    pub names: Vec<String>,
    /// Index of the original covariate for each expanded column.
    pub variable: Vec<usize>,
    pub variable_names: Vec<String>,
}

impl ExpandedCovariates {
    pub fn from_covariates(covariates: &[Covariate], n: usize) -> Self {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut names = Vec::new();
        let mut variable = Vec::new();
        for (j, c) in covariates.iter().enumerate() {
            match (&c.data, &c.kind) {
                (ColumnData::Numeric(v), _) => {
                    cols.push(v.clone());
                    names.push(c.name.clone());
                    variable.push(j);
                }
                (ColumnData::Categorical(codes), CovariateKind::Categorical { levels }) => {
                    for (l, label) in levels.iter().enumerate().skip(1) {
                        cols.push(codes.iter().map(|&k| if k as usize == l { 1.0 } else { 0.0 }).collect());
                        names.push(format!("{}_{}", c.name, label));
                        variable.push(j);
                    }
                }
                _ => unreachable!("column data and kind disagree"),
            }
        }
        let matrix = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        ExpandedCovariates {
            matrix,
            names,
            variable,
            variable_names: covariates.iter().map(|c| c.name.clone()).collect(),
        }
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Expanded column indices belonging to original variable `j`.
    pub fn columns_of(&self, j: usize) -> Vec<usize> {
        (0..self.variable.len()).filter(|&c| self.variable[c] == j).collect()
    }

    /// Keeps only the listed expanded columns.
    pub fn select_columns(&self, cols: &[usize]) -> ExpandedCovariates {
        ExpandedCovariates {
            matrix: self.matrix.select_columns(cols),
            names: cols.iter().map(|&c| self.names[c].clone()).collect(),
            variable: cols.iter().map(|&c| self.variable[c]).collect(),
            variable_names: self.variable_names.clone(),
        }
    }
}

/// Difference, ratio and odds ratio of two response rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectMeasures {
    pub difference: f64,
    pub ratio: f64,
    pub odds_ratio: f64,
}

pub fn effect_measures(p1: f64, p0: f64) -> Result<EffectMeasures> {
    for (name, p) in [("p1", p1), ("p0", p0)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("rate {name} = {p} outside (0, 1)")));
        }
    }
    Ok(EffectMeasures {
        difference: p1 - p0,
        ratio: p1 / p0,
        odds_ratio: (p1 / (1.0 - p1)) / (p0 / (1.0 - p0)),
    })
}

// ---------------------------------------------------------------------------
// Schema sidecar and CSV I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindTag {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<KindTag>,
    /// Explicit level order; defaults to first appearance in the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

/// Column-role mapping stored next to a dataset CSV (TOML or JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub family: Family,
    pub outcome: String,
    pub treatment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    /// Covariates in model order; when absent every remaining column is a
    /// covariate and its kind is inferred.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<CovariateSpec>>,
}

impl Schema {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, is_json)
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("schema (line {}): {e}", e.line())))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    /// Schema describing `d` exactly (explicit kinds and level orders).
    pub fn for_dataset(d: &Dataset) -> Schema {
        Schema {
            family: d.family,
            outcome: "y".into(),
            treatment: "z".into(),
            event: d.event.as_ref().map(|_| "event".into()),
            covariates: Some(
                d.covariates
                    .iter()
                    .map(|c| CovariateSpec {
                        name: c.name.clone(),
                        kind: Some(if c.kind.is_categorical() {
                            KindTag::Categorical
                        } else {
                            KindTag::Numeric
                        }),
                        levels: c.levels().map(|l| l.to_vec()),
                    })
                    .collect(),
            ),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema)
}

/// Parses a CSV stream against a schema, reporting the first problem with its
/// line number.
pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let col = |name: &str| -> Result<usize> {
        index.get(name).copied().ok_or_else(|| Error::Validation {
            line: Some(1),
            column: Some(name.to_string()),
            message: "missing column".into(),
        })
    };

    if schema.event.is_some() && schema.family != Family::CoxPH {
        return Err(Error::validation(format!("event not allowed for family {}", schema.family)));
    }
    if schema.event.is_none() && schema.family == Family::CoxPH {
        return Err(Error::validation("cox family requires an event column in the schema"));
    }

    let y_col = col(&schema.outcome)?;
    let z_col = col(&schema.treatment)?;
    let e_col = schema.event.as_deref().map(col).transpose()?;

    let specs: Vec<CovariateSpec> = match &schema.covariates {
        Some(s) => s.clone(),
        None => headers
            .iter()
            .filter(|h| {
                *h != &schema.outcome && *h != &schema.treatment && Some(h.as_str()) != schema.event.as_deref()
            })
            .map(|h| CovariateSpec {
                name: h.clone(),
                kind: None,
                levels: None,
            })
            .collect(),
    };
    let cov_cols: Vec<usize> = specs.iter().map(|s| col(&s.name)).collect::<Result<_>>()?;

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); cov_cols.len()];
    let mut lines = Vec::new();
    let mut outcome = Vec::new();
    let mut treatment = Vec::new();
    let mut event = Vec::new();

    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: usize, name: &str| -> Result<&str> {
            let v = rec.get(c).unwrap_or("");
            if is_missing(v) {
                Err(Error::validation_at(line, name, "missing value"))
            } else {
                Ok(v)
            }
        };
        let y = parse_num(field(y_col, &schema.outcome)?, line, &schema.outcome)?;
        check_outcome(schema.family, y).map_err(|m| Error::validation_at(line, &schema.outcome, m))?;
        outcome.push(y);
        treatment.push(parse_num(field(z_col, &schema.treatment)?, line, &schema.treatment)?);
        if let (Some(c), Some(name)) = (e_col, schema.event.as_deref()) {
            let e = parse_num(field(c, name)?, line, name)?;
            if e != 0.0 && e != 1.0 {
                return Err(Error::validation_at(line, name, format!("event indicator must be 0 or 1, got {e}")));
            }
            event.push(e == 1.0);
        }
        for (k, (&c, spec)) in cov_cols.iter().zip(&specs).enumerate() {
            raw[k].push(field(c, &spec.name)?.to_string());
        }
        lines.push(line);
    }
    if outcome.is_empty() {
        return Err(Error::validation("CSV contains no data rows"));
    }

    let mut covariates = Vec::with_capacity(specs.len());
    for (spec, values) in specs.iter().zip(raw) {
        let kind = spec.kind.unwrap_or_else(|| {
            if spec.levels.is_some() || values.iter().any(|v| v.parse::<f64>().is_err()) {
                KindTag::Categorical
            } else {
                KindTag::Numeric
            }
        });
        covariates.push(match kind {
            KindTag::Numeric => {
                let v = values
                    .iter()
                    .zip(&lines)
                    .map(|(s, &l)| parse_num(s, l, &spec.name))
                    .collect::<Result<Vec<_>>>()?;
                Covariate::numeric(spec.name.clone(), v)
            }
            KindTag::Categorical => {
                let mut levels: Vec<String> = spec.levels.clone().unwrap_or_default();
                let fixed = spec.levels.is_some();
                let mut codes = Vec::with_capacity(values.len());
                for (v, &l) in values.iter().zip(&lines) {
                    let code = match levels.iter().position(|x| x == v) {
                        Some(c) => c,
                        None if fixed => {
                            return Err(Error::validation_at(l, &spec.name, format!("unknown level '{v}'")));
                        }
                        None => {
                            levels.push(v.clone());
                            levels.len() - 1
                        }
                    };
                    codes.push(code as u32);
                }
                Covariate::categorical(spec.name.clone(), levels, codes).map_err(|e| match e {
                    Error::Validation { message, .. } => Error::Validation {
                        line: None,
                        column: Some(spec.name.clone()),
                        message,
                    },
                    other => other,
                })?
            }
        });
    }

    Dataset::new(
        schema.family,
        outcome,
        schema.event.as_ref().map(|_| event),
        treatment,
        covariates,
    )
}

fn is_missing(v: &str) -> bool {
    v.is_empty() || v.eq_ignore_ascii_case("na") || v.eq_ignore_ascii_case("nan") || v == "."
}

fn parse_num(s: &str, line: usize, column: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::validation_at(line, column, format!("non-numeric value '{s}'"))),
    }
}

/// Writes `d` as CSV with columns `y, [event,] z, covariates...` and returns the
/// schema that reads it back identically.
pub fn write_dataset<W: Write>(d: &Dataset, writer: W) -> Result<Schema> {
    let schema = Schema::for_dataset(d);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![schema.outcome.clone()];
    if let Some(e) = &schema.event {
        header.push(e.clone());
    }
    header.push(schema.treatment.clone());
    header.extend(d.covariates.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..d.n() {
        row.clear();
        row.push(format!("{}", d.outcome[i]));
        if let Some(e) = &d.event {
            row.push(if e[i] { "1".into() } else { "0".into() });
        }
        row.push(format!("{}", d.treatment_raw[i]));
        for c in &d.covariates {
            row.push(c.label(i));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(schema)
}

/// Saves `d` to `csv_path` and its schema sidecar to `schema_path` (TOML).
pub fn save_dataset(d: &Dataset, csv_path: impl AsRef<Path>, schema_path: impl AsRef<Path>) -> Result<Schema> {
    let file = std::fs::File::create(csv_path)?;
    let schema = write_dataset(d, std::io::BufWriter::new(file))?;
    std::fs::write(schema_path, schema.to_toml())?;
    Ok(schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn schema(family: Family, event: Option<&str>) -> Schema {
        Schema {
            family,
            outcome: "y".into(),
            treatment: "z".into(),
            event: event.map(Into::into),
            covariates: None,
        }
    }

    #[test]
    fn minimal_csv_loads() {
        let csv = "y,z,x1\n1.5,1,0.2\n0.3,0,-1\n2.0,1,0.5\n-0.7,0,1.1\n";
        let d = read_dataset(csv.as_bytes(), &schema(Family::Normal, None)).unwrap();
        assert_eq!((d.n(), d.k()), (4, 1));
        assert_eq!(d.covariates[0].kind, CovariateKind::Numeric);
    }

    #[test]
    fn event_column_rejected_for_normal() {
        let csv = "y,z,status,x1\n1,1,1,0.2\n";
        let err = read_dataset(csv.as_bytes(), &schema(Family::Normal, Some("status"))).unwrap_err();
        assert!(err.to_string().contains("event not allowed"), "{err}");
    }

    #[test]
    fn validation_errors_carry_line_numbers() {
        let csv = "y,z,x1\n1,1,0.2\n2,0,abc\n";
        let s = Schema {
            covariates: Some(vec![CovariateSpec {
                name: "x1".into(),
                kind: Some(KindTag::Numeric),
                levels: None,
            }]),
            ..schema(Family::Normal, None)
        };
        let err = read_dataset(csv.as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::Validation { line: Some(3), .. }), "{err}");

        let missing = "y,z,x1\n1,1,\n";
        let err = read_dataset(missing.as_bytes(), &schema(Family::Normal, None)).unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("missing value"));

        let nocol = "y,x1\n1,2\n";
        let err = read_dataset(nocol.as_bytes(), &schema(Family::Normal, None)).unwrap_err();
        assert!(err.to_string().contains("missing column"));

        let bad_event = "t,z,e,x\n1,1,2,0\n";
        let s = Schema {
            outcome: "t".into(),
            ..schema(Family::CoxPH, Some("e"))
        };
        let err = read_dataset(bad_event.as_bytes(), &s).unwrap_err();
        assert!(err.to_string().contains("event indicator"));
    }

    #[test]
    fn outcome_domain_checks() {
        let s = schema(Family::Binomial, None);
        assert!(read_dataset("y,z\n0.5,1\n".as_bytes(), &s).is_err());
        let s = schema(Family::NegBin, None);
        assert!(read_dataset("y,z\n2.5,1\n".as_bytes(), &s).is_err());
        assert!(read_dataset("y,z\n3,1\n".as_bytes(), &s).is_ok());
    }

    #[test]
    fn categorical_levels_in_first_appearance_order() {
        let csv = "y,z,g\n1,1,b\n2,0,a\n3,1,b\n4,0,c\n";
        let d = read_dataset(csv.as_bytes(), &schema(Family::Normal, None)).unwrap();
        assert_eq!(d.covariates[0].levels().unwrap(), ["b", "a", "c"]);
        let e = d.expand_covariates();
        assert_eq!(e.names, ["g_a", "g_c"]);
        assert_eq!(e.matrix.column(0).as_slice(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mixed_500_by_30_shape() {
        let mut csv = String::from("y,z");
        for j in 1..=30 {
            csv.push_str(&format!(",x{j}"));
        }
        csv.push('\n');
        for i in 0..500 {
            csv.push_str(&format!("{},{}", i as f64 * 0.01, i % 2));
            for j in 1..=30 {
                if j % 7 == 0 {
                    csv.push_str(if (i + j) % 3 == 0 { ",Y" } else { ",N" });
                } else {
                    csv.push_str(&format!(",{}", ((i * j) % 17) as f64 / 4.0));
                }
            }
            csv.push('\n');
        }
        let d = read_dataset(csv.as_bytes(), &schema(Family::Normal, None)).unwrap();
        assert_eq!((d.n(), d.k()), (500, 30));
        assert_eq!(d.covariates.iter().filter(|c| c.kind.is_categorical()).count(), 4);
    }

    #[test]
    fn centering_known_and_empirical() {
        let d = Dataset::new(Family::Normal, vec![0.0; 4], None, vec![1.0, 0.0, 1.0, 0.0], vec![]).unwrap();
        let c = d.center_treatment(TreatmentExpectation::Known(0.5)).unwrap();
        assert_eq!(c.treatment_centered.unwrap(), vec![0.5, -0.5, 0.5, -0.5]);
        assert!(d.center_treatment(TreatmentExpectation::Known(1.5)).is_err());

        let d = Dataset::new(Family::Normal, vec![0.0; 3], None, vec![1.0, 1.0, 0.0], vec![]).unwrap();
        let c = d.center_treatment(TreatmentExpectation::Empirical).unwrap();
        let zt = c.treatment_centered.unwrap();
        for (a, b) in zt.iter().zip([1.0 / 3.0, 1.0 / 3.0, -2.0 / 3.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn centering_sqrt_dose() {
        let doses = [0.0f64, 50.0, 150.0, 300.0, 50.0, 0.0];
        let raw: Vec<f64> = doses.iter().map(|d| d.sqrt()).collect();
        let d = Dataset::new(Family::Normal, vec![0.0; 6], None, raw.clone(), vec![]).unwrap();
        let c = d.center_treatment(TreatmentExpectation::Empirical).unwrap();
        // hand computed: (0 + 2*7.0710678 + 12.2474487 + 17.3205081) / 6
        let m = (2.0 * 50f64.sqrt() + 150f64.sqrt() + 300f64.sqrt()) / 6.0;
        assert_relative_eq!(m, 7.285_015_4, epsilon = 1e-6);
        for (zc, z) in c.treatment_centered.as_ref().unwrap().iter().zip(&raw) {
            assert_relative_eq!(*zc, z - m, epsilon = 1e-12);
        }
        assert_eq!(c.treatment_raw, raw);
    }

    #[test]
    fn effect_measure_table_rows() {
        let a = effect_measures(0.8, 1.0 / 3.0).unwrap();
        assert_relative_eq!(a.difference, 0.467, epsilon = 1e-3);
        assert_relative_eq!(a.ratio, 2.4, epsilon = 1e-3);
        assert_relative_eq!(a.odds_ratio, 8.0, epsilon = 1e-3);
        let b = effect_measures(0.25, 0.04).unwrap();
        assert_relative_eq!(b.difference, 0.21, epsilon = 1e-12);
        assert_relative_eq!(b.ratio, 6.25, epsilon = 1e-12);
        assert_relative_eq!(b.odds_ratio, 8.0, epsilon = 1e-12);
        let c = effect_measures(0.3, 0.3).unwrap();
        assert_eq!((c.difference, c.ratio, c.odds_ratio), (0.0, 1.0, 1.0));
        assert!(effect_measures(0.0, 0.5).is_err());
        assert!(effect_measures(0.5, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn odds_ratio_reciprocal(p1 in 0.001f64..0.999, p0 in 0.001f64..0.999) {
            let a = effect_measures(p1, p0).unwrap().odds_ratio;
            let b = effect_measures(p0, p1).unwrap().odds_ratio;
            prop_assert!((a * b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn empirical_centering_sums_to_zero(z in proptest::collection::vec(-5.0f64..5.0, 1..200)) {
            let n = z.len();
            let d = Dataset::new(Family::Normal, vec![0.0; n], None, z, vec![]).unwrap();
            let c = d.center_treatment(TreatmentExpectation::Empirical).unwrap();
            let s: f64 = c.treatment_centered.as_ref().unwrap().iter().sum();
            prop_assert!(s.abs() <= 1e-12 * n as f64 * 5.0);
            prop_assert_eq!(&c.outcome, &d.outcome);
        }

        #[test]
        fn csv_round_trip(rows in proptest::collection::vec((-1e6f64..1e6, 0u8..2, -1e3f64..1e3, 0u32..3), 1..40)) {
            let levels = vec!["lo".to_string(), "mid".to_string(), "hi".to_string()];
            let d = Dataset::new(
                Family::Normal,
                rows.iter().map(|r| r.0).collect(),
                None,
                rows.iter().map(|r| r.1 as f64).collect(),
                vec![
                    Covariate::numeric("a", rows.iter().map(|r| r.2).collect()),
                    Covariate::categorical("g", levels, rows.iter().map(|r| r.3).collect()).unwrap(),
                ],
            ).unwrap();
            let mut buf = Vec::new();
            let schema = write_dataset(&d, &mut buf).unwrap();
            let back = read_dataset(buf.as_slice(), &schema).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
