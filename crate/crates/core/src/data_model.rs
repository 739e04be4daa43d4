//! Individual participant data (IPD) and aggregate data (AgD) for the two
//! trials of an anchored comparison.
//!
//! The AC trial compares active treatment A with the common comparator C and
//! is labelled `T = 1` in trial-membership models; the BC trial compares B
//! with C and is labelled `T = 0`.
//!
//! On disk, IPD is a CSV with header `subject_id,arm,outcome,<covariates...>`
//! and AgD is a JSON document carrying `"schema": "arbiter-itc/v1"`.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: &str = "arbiter-itc/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrialId {
    AC,
    BC,
}

impl TrialId {
    /// (active, anchor) arm labels.
    pub fn arms(self) -> (Arm, Arm) {
        match self {
            TrialId::AC => (Arm::A, Arm::C),
            TrialId::BC => (Arm::B, Arm::C),
        }
    }

    /// Trial-membership label used by the propensity model.
    pub fn membership(self) -> f64 {
        match self {
            TrialId::AC => 1.0,
            TrialId::BC => 0.0,
        }
    }

    pub fn other(self) -> TrialId {
        match self {
            TrialId::AC => TrialId::BC,
            TrialId::BC => TrialId::AC,
        }
    }
}

impl fmt::Display for TrialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialId::AC => "AC",
            TrialId::BC => "BC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    A,
    B,
    C,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::A => "A",
            Arm::B => "B",
            Arm::C => "C",
        })
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" => Ok(Arm::A),
            "B" => Ok(Arm::B),
            "C" => Ok(Arm::C),
            other => Err(Error::InvalidInput(format!("unknown arm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

impl CovariateSpec {
    pub fn binary(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Binary,
        }
    }

    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Continuous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

/// Effect scale shared by estimates and published AgD effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectScale {
    #[serde(rename = "logOR")]
    LogOddsRatio,
    #[serde(rename = "riskdiff")]
    RiskDifference,
    #[serde(rename = "meandiff")]
    MeanDifference,
}

impl fmt::Display for EffectScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EffectScale::LogOddsRatio => "logOR",
            EffectScale::RiskDifference => "riskdiff",
            EffectScale::MeanDifference => "meandiff",
        })
    }
}

/// Which binary outcome level counts as the event of interest.
///
/// Defaults to `Y = 0`: the worked example's "survival rate" is the share of
/// `Y = 0` records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub struct EventLevel(u8);

impl EventLevel {
    pub const ZERO: EventLevel = EventLevel(0);
    pub const ONE: EventLevel = EventLevel(1);

    pub fn value(self) -> f64 {
        self.0 as f64
    }

    pub fn is_event(self, y: f64) -> bool {
        y == self.value()
    }
}

impl Default for EventLevel {
    fn default() -> Self {
        EventLevel::ZERO
    }
}

impl From<EventLevel> for u8 {
    fn from(e: EventLevel) -> u8 {
        e.0
    }
}

impl TryFrom<u8> for EventLevel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 | 1 => Ok(EventLevel(v)),
            _ => Err(format!("event level must be 0 or 1, got {v}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub arm: Arm,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpdTrial {
    pub trial: TrialId,
    pub covariates: Vec<CovariateSpec>,
    pub records: Vec<SubjectRecord>,
    pub outcome_kind: OutcomeKind,
    pub event: EventLevel,
    /// Declared sample size, checked by [`validate_trial`] when present.
    pub declared_n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    UnknownArm,
    BinaryCoding,
    CovariateLength,
    NonFiniteValue,
    OutcomeType,
    DuplicateCovariate,
    DuplicateSubject,
    SampleSize,
    EmptyArm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Offending subject id, or `None` for trial-level rules.
    pub record: Option<String>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.record {
            Some(id) => write!(f, "record {id}: {:?}: {}", self.rule, self.detail),
            None => write!(f, "{:?}: {}", self.rule, self.detail),
        }
    }
}

/// Check every structural invariant of `trial`. An empty list means valid.
pub fn validate_trial(trial: &IpdTrial) -> Vec<Violation> {
    let mut out = Vec::new();
    let p = trial.covariates.len();
    let (active, anchor) = trial.trial.arms();

    let mut names = HashSet::new();
    for spec in &trial.covariates {
        if !names.insert(spec.name.as_str()) {
            out.push(Violation {
                record: None,
                rule: Rule::DuplicateCovariate,
                detail: format!("covariate '{}' declared twice", spec.name),
            });
        }
    }

    let mut ids = HashSet::new();
    for r in &trial.records {
        let at = || Some(r.id.clone());
        if !ids.insert(r.id.as_str()) {
            out.push(Violation {
                record: at(),
                rule: Rule::DuplicateSubject,
                detail: "subject id repeated".into(),
            });
        }
        if r.arm != active && r.arm != anchor {
            out.push(Violation {
                record: at(),
                rule: Rule::UnknownArm,
                detail: format!("arm {} not in {} trial ({active}, {anchor})", r.arm, trial.trial),
            });
        }
        if r.covariates.len() != p {
            out.push(Violation {
                record: at(),
                rule: Rule::CovariateLength,
                detail: format!("{} covariates, expected {p}", r.covariates.len()),
            });
        }
        for (spec, &x) in trial.covariates.iter().zip(&r.covariates) {
            if !x.is_finite() {
                out.push(Violation {
                    record: at(),
                    rule: Rule::NonFiniteValue,
                    detail: format!("{} = {x}", spec.name),
                });
            } else if spec.kind == CovariateKind::Binary && x != 0.0 && x != 1.0 {
                out.push(Violation {
                    record: at(),
                    rule: Rule::BinaryCoding,
                    detail: format!("binary covariate {} = {x}", spec.name),
                });
            }
        }
        match trial.outcome_kind {
            OutcomeKind::Binary if r.outcome != 0.0 && r.outcome != 1.0 => out.push(Violation {
                record: at(),
                rule: Rule::OutcomeType,
                detail: format!("binary outcome = {}", r.outcome),
            }),
            OutcomeKind::Continuous if !r.outcome.is_finite() => out.push(Violation {
                record: at(),
                rule: Rule::NonFiniteValue,
                detail: format!("outcome = {}", r.outcome),
            }),
            _ => {}
        }
    }

    if let Some(n) = trial.declared_n {
        if n != trial.records.len() {
            out.push(Violation {
                record: None,
                rule: Rule::SampleSize,
                detail: format!("declared n = {n}, found {}", trial.records.len()),
            });
        }
    }
    for arm in [active, anchor] {
        if !trial.records.iter().any(|r| r.arm == arm) {
            out.push(Violation {
                record: None,
                rule: Rule::EmptyArm,
                detail: format!("no records in arm {arm}"),
            });
        }
    }
    out
}

/// Covariate-only IPD, the part of a trial a sponsor may share with the arbitrator.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateIpd {
    pub trial: TrialId,
    pub covariates: Vec<CovariateSpec>,
    pub subject_ids: Vec<String>,
    /// n × p, rows aligned with `subject_ids`.
    pub matrix: DMatrix<f64>,
}

impl CovariateIpd {
    /// Restrict to the named covariates, in the given order.
    pub fn select(&self, names: &[String]) -> Result<CovariateIpd> {
        let idx = column_indices(&self.covariates, names)?;
        Ok(CovariateIpd {
            trial: self.trial,
            covariates: idx.iter().map(|&j| self.covariates[j].clone()).collect(),
            subject_ids: self.subject_ids.clone(),
            matrix: DMatrix::from_fn(self.matrix.nrows(), idx.len(), |i, k| self.matrix[(i, idx[k])]),
        })
    }

    /// Reads `subject_id,<covariates...>`; `arm` and `outcome` columns, if
    /// present, are ignored.
    pub fn read_csv<R: Read>(reader: R, trial: TrialId) -> Result<CovariateIpd> {
        let table = read_table(reader)?;
        let cov_cols: Vec<usize> = (0..table.header.len())
            .filter(|&j| !matches!(table.header[j].as_str(), "subject_id" | "arm" | "outcome"))
            .collect();
        let id_col = find_col(&table.header, "subject_id")?;
        let n = table.rows.len();
        let mut matrix = DMatrix::zeros(n, cov_cols.len());
        let mut ids = Vec::with_capacity(n);
        for (i, row) in table.rows.iter().enumerate() {
            ids.push(row[id_col].clone());
            for (k, &j) in cov_cols.iter().enumerate() {
                matrix[(i, k)] = parse_f64(&row[j], &table.header[j], i)?;
            }
        }
        let covariates = cov_cols
            .iter()
            .enumerate()
            .map(|(k, &j)| infer_spec(&table.header[j], matrix.column(k).iter().copied()))
            .collect();
        Ok(CovariateIpd {
            trial,
            covariates,
            subject_ids: ids,
            matrix,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject_id".to_string()];
        header.extend(self.covariates.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (i, id) in self.subject_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.matrix.row(i).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Positions of `names` within `specs`.
pub fn column_indices(specs: &[CovariateSpec], names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            specs
                .iter()
                .position(|s| &s.name == n)
                .ok_or_else(|| Error::InvalidInput(format!("unknown covariate '{n}'")))
        })
        .collect()
}

impl IpdTrial {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    pub fn arms(&self) -> (Arm, Arm) {
        self.trial.arms()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// n × p covariate matrix in record order.
    pub fn covariate_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.p(), |i, j| self.records[i].covariates[j])
    }

    pub fn covariate_ipd(&self) -> CovariateIpd {
        CovariateIpd {
            trial: self.trial,
            covariates: self.covariates.clone(),
            subject_ids: self.subject_ids(),
            matrix: self.covariate_matrix(),
        }
    }

    /// Fails with [`Error::InvalidTrial`] when any invariant is violated.
    pub fn validated(self) -> Result<Self> {
        let v = validate_trial(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidTrial(v))
        }
    }

    /// Reads an IPD CSV. The trial is inferred from the arm labels unless given.
    /// Covariate columns whose values are all 0/1 are typed binary; the
    /// outcome is binary when every value is 0 or 1.
    pub fn read_csv<R: Read>(reader: R, trial: Option<TrialId>) -> Result<IpdTrial> {
        let table = read_table(reader)?;
        let id_col = find_col(&table.header, "subject_id")?;
        let arm_col = find_col(&table.header, "arm")?;
        let y_col = find_col(&table.header, "outcome")?;
        if (id_col, arm_col, y_col) != (0, 1, 2) {
            return Err(Error::InvalidInput(
                "IPD header must start with subject_id,arm,outcome".into(),
            ));
        }
        let names = &table.header[3..];
        let mut records = Vec::with_capacity(table.rows.len());
        for (i, row) in table.rows.iter().enumerate() {
            let covariates = row[3..]
                .iter()
                .zip(names)
                .map(|(v, name)| parse_f64(v, name, i))
                .collect::<Result<Vec<_>>>()?;
            records.push(SubjectRecord {
                id: row[0].clone(),
                arm: row[1].parse()?,
                outcome: parse_f64(&row[2], "outcome", i)?,
                covariates,
            });
        }
        let trial = match trial {
            Some(t) => t,
            None => infer_trial(&records)?,
        };
        let covariates = names
            .iter()
            .enumerate()
            .map(|(j, name)| infer_spec(name, records.iter().map(|r| r.covariates[j])))
            .collect();
        let outcome_kind = if records.iter().all(|r| r.outcome == 0.0 || r.outcome == 1.0) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        };
        Ok(IpdTrial {
            trial,
            covariates,
            records,
            outcome_kind,
            event: EventLevel::default(),
            declared_n: None,
        })
    }

    pub fn read_csv_path(path: &Path, trial: Option<TrialId>) -> Result<IpdTrial> {
        IpdTrial::read_csv(std::fs::File::open(path)?, trial)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = vec!["subject_id".into(), "arm".into(), "outcome".into()];
        header.extend(self.covariates.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.id.clone(), r.arm.to_string(), r.outcome.to_string()];
            row.extend(r.covariates.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

fn find_col(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::InvalidInput(format!("missing column '{name}'")))
}

fn parse_f64(s: &str, column: &str, row: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("row {}: column '{column}': '{s}' is not a number", row + 1)))
}

fn infer_spec(name: &str, values: impl Iterator<Item = f64>) -> CovariateSpec {
    let mut values = values;
    if values.all(|x| x == 0.0 || x == 1.0) {
        CovariateSpec::binary(name)
    } else {
        CovariateSpec::continuous(name)
    }
}

fn infer_trial(records: &[SubjectRecord]) -> Result<TrialId> {
    let has_a = records.iter().any(|r| r.arm == Arm::A);
    let has_b = records.iter().any(|r| r.arm == Arm::B);
    match (has_a, has_b) {
        (true, false) => Ok(TrialId::AC),
        (false, true) => Ok(TrialId::BC),
        (true, true) => Err(Error::InvalidInput("file mixes arms A and B".into())),
        (false, false) => Err(Error::InvalidInput("cannot infer trial: no A or B records".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OutcomeSummary {
    /// Counts of `Y = 0` and `Y = 1`.
    Binary { y0: u64, y1: u64 },
    Continuous { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub n: u64,
    pub outcome: OutcomeSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishedEffect {
    pub scale: EffectScale,
    pub point: f64,
    #[serde(default)]
    pub se: Option<f64>,
}

/// Aggregate data for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgdSummary {
    pub schema: String,
    pub trial: TrialId,
    pub covariates: Vec<CovariateSpec>,
    /// Proportions for binary covariates.
    pub covariate_means: Vec<f64>,
    #[serde(default)]
    pub covariate_covariance: Option<Vec<Vec<f64>>>,
    /// Active arm first, anchor second.
    pub arms: Vec<ArmSummary>,
    #[serde(default)]
    pub event: EventLevel,
    #[serde(default)]
    pub published_effect: Option<PublishedEffect>,
    /// Set when the covariance could not be estimated (n < 2).
    #[serde(default)]
    pub covariance_degenerate: bool,
}

impl AgdSummary {
    pub fn n(&self) -> u64 {
        self.arms.iter().map(|a| a.n).sum()
    }

    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn covariance_matrix(&self) -> Option<DMatrix<f64>> {
        self.covariate_covariance.as_ref().map(|c| {
            let p = c.len();
            DMatrix::from_fn(p, p, |i, j| c[i][j])
        })
    }

    /// Collects every invariant violation; `Ok` when there are none.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.schema != SCHEMA {
            errs.push(format!("schema '{}' (expected '{SCHEMA}')", self.schema));
        }
        let p = self.covariates.len();
        if self.covariate_means.len() != p {
            errs.push(format!("{} covariate means for {p} covariates", self.covariate_means.len()));
        }
        for (spec, &m) in self.covariates.iter().zip(&self.covariate_means) {
            if !m.is_finite() {
                errs.push(format!("mean of {} is not finite", spec.name));
            } else if spec.kind == CovariateKind::Binary && !(0.0..=1.0).contains(&m) {
                errs.push(format!("proportion {} = {m} outside [0, 1]", spec.name));
            }
        }
        if let Some(cov) = &self.covariate_covariance {
            if cov.len() != p || cov.iter().any(|r| r.len() != p) {
                errs.push(format!("covariance must be {p}x{p}"));
            } else {
                let m = self.covariance_matrix().expect("present");
                let scale = m.iter().fold(1.0_f64, |a, x| a.max(x.abs()));
                if (0..p).any(|i| (0..p).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale)) {
                    errs.push("covariance not symmetric".into());
                }
                let min_eig = m.symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, &x| a.min(x));
                if min_eig < -1e-10 * scale {
                    errs.push(format!("covariance not positive semidefinite (min eigenvalue {min_eig:.3e})"));
                }
            }
        }
        let (active, anchor) = self.trial.arms();
        let arms: Vec<Arm> = self.arms.iter().map(|a| a.arm).collect();
        if arms != [active, anchor] {
            errs.push(format!("arms must be [{active}, {anchor}] for trial {}", self.trial));
        }
        for a in &self.arms {
            match a.outcome {
                OutcomeSummary::Binary { y0, y1 } if y0 + y1 != a.n => {
                    errs.push(format!("arm {}: counts {y0}+{y1} do not sum to n = {}", a.arm, a.n))
                }
                OutcomeSummary::Continuous { mean, sd } if !mean.is_finite() || !(sd >= 0.0) => {
                    errs.push(format!("arm {}: invalid mean/sd", a.arm))
                }
                _ => {}
            }
        }
        if let Some(pe) = &self.published_effect {
            if !pe.point.is_finite() || pe.se.is_some_and(|s| !(s >= 0.0)) {
                errs.push("published effect must have finite point and nonnegative se".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidAgd(errs))
        }
    }

    pub fn from_json(s: &str) -> Result<AgdSummary> {
        let agd: AgdSummary =
            serde_json::from_str(s).map_err(|e| Error::InvalidInput(format!("AgD document: {e}")))?;
        agd.validate()?;
        Ok(agd)
    }

    pub fn read_json_path(path: &Path) -> Result<AgdSummary> {
        AgdSummary::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Unweighted summary of an IPD trial: sample means, sample covariance
/// (denominator n − 1), and per-arm outcome tabulations.
pub fn summarize_ipd(trial: &IpdTrial) -> AgdSummary {
    let n = trial.n();
    let p = trial.p();
    let mut means = vec![0.0; p];
    for r in &trial.records {
        for (m, x) in means.iter_mut().zip(&r.covariates) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n.max(1) as f64;
    }
    let covariance = (n >= 2).then(|| {
        let mut c = vec![vec![0.0; p]; p];
        for r in &trial.records {
            for i in 0..p {
                let di = r.covariates[i] - means[i];
                for j in 0..=i {
                    c[i][j] += di * (r.covariates[j] - means[j]);
                }
            }
        }
        for i in 0..p {
            for j in 0..=i {
                c[i][j] /= (n - 1) as f64;
                c[j][i] = c[i][j];
            }
        }
        c
    });
    if covariance.is_none() {
        log::warn!("trial {}: n = {n} < 2, covariance omitted", trial.trial);
    }
    let (active, anchor) = trial.arms();
    let arms = [active, anchor]
        .into_iter()
        .map(|arm| arm_summary(trial, arm))
        .collect();
    AgdSummary {
        schema: SCHEMA.to_string(),
        trial: trial.trial,
        covariates: trial.covariates.clone(),
        covariate_means: means,
        covariance_degenerate: covariance.is_none(),
        covariate_covariance: covariance,
        arms,
        event: trial.event,
        published_effect: None,
    }
}

fn arm_summary(trial: &IpdTrial, arm: Arm) -> ArmSummary {
    let ys: Vec<f64> = trial.records.iter().filter(|r| r.arm == arm).map(|r| r.outcome).collect();
    let n = ys.len() as u64;
    let outcome = match trial.outcome_kind {
        OutcomeKind::Binary => {
            let y1 = ys.iter().filter(|&&y| y == 1.0).count() as u64;
            OutcomeSummary::Binary { y0: n - y1, y1 }
        }
        OutcomeKind::Continuous => {
            let mean = ys.iter().sum::<f64>() / n.max(1) as f64;
            let sd = if n >= 2 {
                (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            OutcomeSummary::Continuous { mean, sd }
        }
    };
    ArmSummary { arm, n, outcome }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn tiny() -> IpdTrial {
        IpdTrial {
            trial: TrialId::AC,
            covariates: vec![CovariateSpec::binary("x")],
            records: vec![
                SubjectRecord { id: "1".into(), arm: Arm::A, outcome: 1.0, covariates: vec![1.0] },
                SubjectRecord { id: "2".into(), arm: Arm::C, outcome: 0.0, covariates: vec![0.0] },
            ],
            outcome_kind: OutcomeKind::Binary,
            event: EventLevel::ZERO,
            declared_n: Some(2),
        }
    }

    #[test]
    fn example_trials_validate() {
        assert!(validate_trial(&fixtures::example_ac()).is_empty());
        assert!(validate_trial(&fixtures::example_bc()).is_empty());
        assert_eq!(fixtures::example_ac().n(), 1200);
    }

    #[test]
    fn foreign_arm_is_reported() {
        let mut t = tiny();
        t.records[1].arm = Arm::B;
        let v = validate_trial(&t);
        // the B record is flagged and arm C is now empty
        assert_eq!(v.iter().filter(|v| v.rule == Rule::UnknownArm).count(), 1);
        assert_eq!(v[0].record.as_deref(), Some("2"));
    }

    #[test]
    fn fractional_binary_covariate_is_reported() {
        let mut t = tiny();
        t.records[0].covariates[0] = 0.5;
        let v = validate_trial(&t);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::BinaryCoding);
    }

    #[test]
    fn declared_size_and_outcome_type() {
        let mut t = tiny();
        t.declared_n = Some(3);
        t.records[0].outcome = 2.0;
        let rules: Vec<Rule> = validate_trial(&t).into_iter().map(|v| v.rule).collect();
        assert!(rules.contains(&Rule::SampleSize));
        assert!(rules.contains(&Rule::OutcomeType));
    }

    #[test]
    fn summarize_example() {
        let ac = summarize_ipd(&fixtures::example_ac());
        assert!((ac.covariate_means[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ac.arms[0].n, 600);
        assert_eq!(ac.arms[1].n, 600);
        assert_eq!(ac.arms[0].outcome, OutcomeSummary::Binary { y0: 260, y1: 340 });
        ac.validate().unwrap();

        let bc = summarize_ipd(&fixtures::example_bc());
        assert!((bc.covariate_means[0] - 2.0 / 3.0).abs() < 1e-15);
        // binary variance p(1-p) n/(n-1)
        let v = bc.covariate_covariance.as_ref().unwrap()[0][0];
        assert!((v - (2.0 / 9.0) * 1200.0 / 1199.0).abs() < 1e-14);
    }

    #[test]
    fn single_record_omits_covariance() {
        let mut t = tiny();
        t.records.truncate(1);
        let s = summarize_ipd(&t);
        assert!(s.covariate_covariance.is_none());
        assert!(s.covariance_degenerate);
        assert_eq!(s.covariate_means, vec![1.0]);
    }

    #[test]
    fn csv_round_trip() {
        let t = fixtures::example_bc();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = IpdTrial::read_csv(buf.as_slice(), None).unwrap();
        assert_eq!(back.trial, TrialId::BC);
        assert_eq!(back.records, t.records);
        assert_eq!(back.covariates, t.covariates);
    }

    #[test]
    fn agd_rejects_bad_proportion_and_counts() {
        let mut agd = summarize_ipd(&fixtures::example_bc());
        agd.covariate_means[0] = 1.5;
        agd.arms[0].outcome = OutcomeSummary::Binary { y0: 1, y1: 1 };
        match agd.validate() {
            Err(Error::InvalidAgd(v)) => assert_eq!(v.len(), 2, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn agd_rejects_indefinite_covariance() {
        let mut agd = summarize_ipd(&fixtures::example_bc());
        agd.covariate_covariance = Some(vec![vec![-1.0]]);
        assert!(agd.validate().is_err());
    }

    #[test]
    fn agd_json_round_trip() {
        let agd = summarize_ipd(&fixtures::example_ac());
        let back = AgdSummary::from_json(&agd.to_json().unwrap()).unwrap();
        assert_eq!(back, agd);
        assert!(agd.to_json().unwrap().contains("\"schema\": \"arbiter-itc/v1\""));
    }

    #[test]
    fn covariate_ipd_csv_ignores_outcome_columns() {
        let t = fixtures::example_ac();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let cov = CovariateIpd::read_csv(buf.as_slice(), TrialId::AC).unwrap();
        assert_eq!(cov.covariates, vec![CovariateSpec::binary("black")]);
        assert_eq!(cov.matrix.nrows(), 1200);
    }
}
