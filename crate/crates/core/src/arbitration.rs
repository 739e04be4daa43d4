//! The three-party workflow: an arbitrator fixes the analysis, each sponsor
//! analyses its own trial with overlap weights, and the arbitrator combines
//! the two trial-level estimates through the shared comparator.
//!
//! Two protocols are supported. With `ipd-shared` the arbitrator receives
//! covariate IPD from both sponsors, fits the pooled propensity model and
//! hands back weights. With `covariate-simulation` no covariate IPD leaves a
//! sponsor: each sponsor simulates the rival's covariates from published
//! aggregates with the arbitrator's seed and fits the propensity model
//! itself.
//!
//! All messages are JSON documents carrying the SHA-256 of the canonical
//! config, so a sponsor running a different analysis is detected at
//! combination time.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::canonical::canonical_hash;
use crate::covgen::{build_model, generate, matrix_hash, CovGenModel, CovGenTemplate};
use crate::data_model::{column_indices, AgdSummary, CovariateIpd, EffectScale, IpdTrial, TrialId, SCHEMA};
use crate::error::{Error, Result};
use crate::estimators::{anchored_combine, weighted_contrast, EffectEstimate, Estimand};
use crate::propensity::{fit_logistic, Link, PropensityModel};
use crate::rng::GeneratorSpec;
use crate::weighting::{overlap_weights, weighted_means, EstimandKind, Normalization, Side, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    IpdShared,
    CovariateSimulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropensitySpec {
    pub covariates: Vec<String>,
    #[serde(default = "default_link")]
    pub link: Link,
}

fn default_link() -> Link {
    Link::Logit
}

fn default_schema() -> String {
    SCHEMA.to_string()
}

fn default_estimand() -> EstimandKind {
    EstimandKind::ATO
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArbitrationConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub protocol: Protocol,
    /// Covariates reported in balance summaries; the propensity model uses a
    /// subset of these.
    pub covariates: Vec<String>,
    pub propensity: PropensitySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covgen: Option<CovGenTemplate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub scale: EffectScale,
    #[serde(default = "default_estimand")]
    pub estimand: EstimandKind,
}

impl ArbitrationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema != SCHEMA {
            problems.push(format!("unsupported schema '{}'", self.schema));
        }
        if self.estimand != EstimandKind::ATO {
            problems.push(format!("estimand must be ATO, got {:?}", self.estimand));
        }
        if self.propensity.covariates.is_empty() {
            problems.push("propensity model has no covariates".into());
        }
        for c in &self.propensity.covariates {
            if !self.covariates.contains(c) {
                problems.push(format!("propensity covariate '{c}' is not in the covariate list"));
            }
        }
        match self.protocol {
            Protocol::IpdShared => {
                if self.seed.is_some() || self.covgen.is_some() {
                    problems.push("protocol ipd-shared takes neither a seed nor a covgen template".into());
                }
            }
            Protocol::CovariateSimulation => {
                if self.seed.is_none() {
                    problems.push("protocol covariate-simulation requires a seed".into());
                }
                if self.covgen.is_none() {
                    problems.push("protocol covariate-simulation requires a covgen template".into());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }

    /// Hex SHA-256 of the canonical JSON of the parsed config.
    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn read_json_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sponsor {
    #[serde(rename = "sponsorA")]
    A,
    #[serde(rename = "sponsorB")]
    B,
}

impl Sponsor {
    pub fn trial(self) -> TrialId {
        match self {
            Sponsor::A => TrialId::AC,
            Sponsor::B => TrialId::BC,
        }
    }

    pub fn of(trial: TrialId) -> Sponsor {
        match trial {
            TrialId::AC => Sponsor::A,
            TrialId::BC => Sponsor::B,
        }
    }

    /// The AC trial is coded T = 1 in the pooled propensity model.
    fn side(self) -> Side {
        match self {
            Sponsor::A => Side::T1,
            Sponsor::B => Side::T0,
        }
    }
}

impl fmt::Display for Sponsor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sponsor::A => "sponsorA",
            Sponsor::B => "sponsorB",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsPackage {
    pub schema: String,
    pub recipient: Sponsor,
    pub subject_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub ess: f64,
    pub propensity: PropensityModel,
    pub config_hash: String,
}

impl WeightsPackage {
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::InvalidInput(format!("unsupported schema '{}'", self.schema)));
        }
        if self.subject_ids.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.subject_ids.len(),
                found: self.weights.len(),
            });
        }
        if let Some(w) = self.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidInput(format!("overlap weight {w} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Weighted covariate means of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub covariates: Vec<String>,
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsPackage {
    pub schema: String,
    pub sender: Sponsor,
    pub estimate: EffectEstimate,
    pub ess: f64,
    pub balance: Balance,
    pub config_hash: String,
    /// Hash of the simulated counterpart covariates (covariate-simulation only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_matrix_hash: Option<String>,
    /// The generating model and propensity fit behind a self-service run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covgen_model: Option<CovGenModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<PropensityModel>,
}

/// Final arbitrated comparison of A vs B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedResult {
    pub schema: String,
    pub config_hash: String,
    pub estimate: EffectEstimate,
    pub ess: [f64; 2],
    pub balance: [Balance; 2],
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn pooled_fit(t1: &DMatrix<f64>, t0: &DMatrix<f64>, names: &[String]) -> Result<PropensityModel> {
    let (n1, n0, p) = (t1.nrows(), t0.nrows(), t1.ncols());
    let x = DMatrix::from_fn(n1 + n0, p, |i, j| if i < n1 { t1[(i, j)] } else { t0[(i - n1, j)] });
    let labels: Vec<f64> = (0..n1 + n0).map(|i| if i < n1 { 1.0 } else { 0.0 }).collect();
    let mut model = fit_logistic(&x, &labels).map_err(|e| match e {
        Error::Separation { .. } | Error::ConstantCovariate(_) | Error::NonConvergence(_) => {
            Error::Protocol(format!("propensity model failed: {e}"))
        }
        other => other,
    })?;
    model.covariates = names.to_vec();
    Ok(model)
}

/// Protocol `ipd-shared`: pooled propensity fit with T = 1 for AC subjects.
/// Sponsor A receives 1 − ε̂ over its subjects, sponsor B receives ε̂.
pub fn arbitrate_ipd(
    cov_a: &CovariateIpd,
    cov_b: &CovariateIpd,
    config: &ArbitrationConfig,
) -> Result<(WeightsPackage, WeightsPackage)> {
    config.validate()?;
    if config.protocol != Protocol::IpdShared {
        return Err(Error::Protocol("arbitrator weights need protocol ipd-shared".into()));
    }
    if cov_a.trial != TrialId::AC || cov_b.trial != TrialId::BC {
        return Err(Error::Protocol("expected covariates of trial AC then trial BC".into()));
    }
    let names = &config.propensity.covariates;
    let a = cov_a.select(names).map_err(|e| Error::Protocol(format!("sponsor A covariates: {e}")))?;
    let b = cov_b.select(names).map_err(|e| Error::Protocol(format!("sponsor B covariates: {e}")))?;
    if a.covariates != b.covariates {
        return Err(Error::Protocol("covariate definitions differ between the trials".into()));
    }
    let model = pooled_fit(&a.matrix, &b.matrix, names)?;
    let hash = config.hash()?;
    let package = |ipd: &CovariateIpd, sponsor: Sponsor| -> Result<WeightsPackage> {
        let eps = model.predict_rows(&ipd.matrix)?;
        let w = overlap_weights(&eps, sponsor.side())?;
        Ok(WeightsPackage {
            schema: SCHEMA.into(),
            recipient: sponsor,
            subject_ids: ipd.subject_ids.clone(),
            ess: w.ess(),
            weights: w.weights().to_vec(),
            propensity: model.clone(),
            config_hash: hash.clone(),
        })
    };
    Ok((package(&a, Sponsor::A)?, package(&b, Sponsor::B)?))
}

fn balance(trial: &IpdTrial, w: &[f64], names: &[String]) -> Result<Balance> {
    let idx = column_indices(&trial.covariates, names)?;
    let x = trial.covariate_matrix();
    let sel = DMatrix::from_fn(x.nrows(), idx.len(), |i, k| x[(i, idx[k])]);
    Ok(Balance {
        covariates: names.to_vec(),
        means: weighted_means(&sel, w),
    })
}

fn trial_estimate(trial: &IpdTrial, w: &WeightVector, config: &ArbitrationConfig, how: &str) -> Result<EffectEstimate> {
    let e = weighted_contrast(trial, w, config.scale)?;
    let provenance = format!("{}; overlap weights from {how}", e.provenance);
    Ok(e.with_estimand(Estimand::ATO).with_provenance(provenance))
}

/// Sponsor side of `ipd-shared`: weighted analysis with the packaged weights.
pub fn sponsor_run(trial: &IpdTrial, package: &WeightsPackage, config: &ArbitrationConfig) -> Result<ResultsPackage> {
    config.validate()?;
    package.validate()?;
    let hash = config.hash()?;
    if package.config_hash != hash {
        return Err(Error::Protocol("weights package was produced under a different config".into()));
    }
    let sponsor = Sponsor::of(trial.trial);
    if package.recipient != sponsor {
        return Err(Error::Protocol(format!(
            "weights package is addressed to {} but trial {} belongs to {sponsor}",
            package.recipient, trial.trial
        )));
    }
    let by_id: HashMap<&str, f64> = package.subject_ids.iter().map(String::as_str).zip(package.weights.iter().copied()).collect();
    if by_id.len() != package.subject_ids.len() || by_id.len() != trial.n() {
        return Err(Error::Protocol("weights package ids do not match the trial's subjects".into()));
    }
    let w = trial
        .records
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .copied()
                .ok_or_else(|| Error::Protocol(format!("no weight for subject {}", r.id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let w = WeightVector::new(w, Normalization::Raw)?;
    Ok(ResultsPackage {
        schema: SCHEMA.into(),
        sender: sponsor,
        estimate: trial_estimate(trial, &w, config, "the arbitrator's pooled propensity model")?,
        ess: w.ess(),
        balance: balance(trial, w.weights(), &config.covariates)?,
        config_hash: hash,
        covariate_matrix_hash: None,
        covgen_model: None,
        propensity: None,
    })
}

/// Sponsor side of `covariate-simulation`.
///
/// The rival's covariates are simulated from its aggregate data with the
/// shared seed and pooled with the sponsor's own covariates (own trial
/// keeps its true T label). Only aggregate data of the rival trial are
/// accepted.
pub fn sponsor_run_selfservice(own: &IpdTrial, counterpart: &AgdSummary, config: &ArbitrationConfig) -> Result<ResultsPackage> {
    config.validate()?;
    if config.protocol != Protocol::CovariateSimulation {
        return Err(Error::Protocol("self-service runs need protocol covariate-simulation".into()));
    }
    let (Some(seed), Some(template)) = (config.seed, config.covgen.as_ref()) else {
        return Err(Error::Protocol("covariate-simulation needs a seed and a covgen template".into()));
    };
    if counterpart.trial == own.trial {
        return Err(Error::Protocol(format!("counterpart aggregate data are from the sponsor's own trial {}", own.trial)));
    }
    counterpart.validate()?;
    let hash = config.hash()?;
    let sponsor = Sponsor::of(own.trial);
    let names = &config.propensity.covariates;

    let own_cov = own.covariate_ipd().select(names)?;
    let model = build_model(counterpart, names, Some(&own_cov), template, GeneratorSpec::philox(seed))
        .map_err(|e| Error::Protocol(format!("covariate generation failed: {e}")))?;
    for w in &model.warnings {
        log::warn!("covgen: {w}");
    }
    let n = template.n.unwrap_or(counterpart.n() as usize);
    let sim = generate(&model, n)?;
    if sim.covariates != own_cov.covariates {
        return Err(Error::Protocol("covariate definitions differ between own IPD and counterpart AgD".into()));
    }

    let fit = match sponsor {
        Sponsor::A => pooled_fit(&own_cov.matrix, &sim.matrix, names)?,
        Sponsor::B => pooled_fit(&sim.matrix, &own_cov.matrix, names)?,
    };
    let eps = fit.predict_rows(&own_cov.matrix)?;
    let w = overlap_weights(&eps, sponsor.side())?;
    Ok(ResultsPackage {
        schema: SCHEMA.into(),
        sender: sponsor,
        estimate: trial_estimate(own, &w, config, "a propensity model fitted against simulated counterpart covariates")?,
        ess: w.ess(),
        balance: balance(own, w.weights(), &config.covariates)?,
        config_hash: hash,
        covariate_matrix_hash: Some(matrix_hash(&sim.matrix)),
        covgen_model: Some(model),
        propensity: Some(fit),
    })
}

/// Arbitrator's final step: θ̂ᴬᴮ = θ̂ᴬᶜ − θ̂ᴮᶜ with root-sum-square se.
///
/// `expected_hash`, when given, must match both packages.
pub fn arbitrator_combine(ra: &ResultsPackage, rb: &ResultsPackage, expected_hash: Option<&str>) -> Result<CombinedResult> {
    let (pa, pb) = match (ra.sender, rb.sender) {
        (Sponsor::A, Sponsor::B) => (ra, rb),
        (Sponsor::B, Sponsor::A) => (rb, ra),
        _ => return Err(Error::Protocol("need one results package from each sponsor".into())),
    };
    if pa.config_hash != pb.config_hash {
        return Err(Error::Protocol("results packages were produced under different configs".into()));
    }
    if let Some(h) = expected_hash {
        if h != pa.config_hash {
            return Err(Error::Protocol("results packages do not match the session config".into()));
        }
    }
    for p in [pa, pb] {
        if p.schema != SCHEMA {
            return Err(Error::Protocol(format!("unsupported schema '{}'", p.schema)));
        }
        if p.estimate.estimand != Estimand::ATO {
            return Err(Error::Protocol(format!(
                "{} sent a {} estimate; arbitration combines ATO estimates only",
                p.sender, p.estimate.estimand
            )));
        }
    }
    let e = anchored_combine(&pa.estimate, &pb.estimate)?;
    let provenance = format!(
        "arbitrated A vs B: [{}] minus [{}]; ess A {:.1}, ess B {:.1}",
        pa.estimate.provenance, pb.estimate.provenance, pa.ess, pb.ess
    );
    Ok(CombinedResult {
        schema: SCHEMA.into(),
        config_hash: pa.config_hash.clone(),
        estimate: e.with_provenance(provenance),
        ess: [pa.ess, pb.ess],
        balance: [pa.balance.clone(), pb.balance.clone()],
    })
}
