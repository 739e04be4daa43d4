//! Monte Carlo comparison of classic and arbitrated MAIC.
//!
//! A scenario fixes, per trial, the covariate distribution and a logistic
//! outcome model
//!
//! ```text
//! logit P(Y = 1 | x, z) = intercept + slopesᵀx + z·(treatment + interactionsᵀx)
//! ```
//!
//! with `z = 1` on the active arm. Each replicate draws both trials and
//! runs four analyses: classic MAIC by sponsor A, classic MAIC by sponsor
//! B, arbitrated protocol 1 and arbitrated protocol 2. True values are
//! computed by exact enumeration over binary covariate patterns.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arbitration::{
    arbitrate_ipd, arbitrator_combine, sponsor_run, sponsor_run_selfservice, ArbitrationConfig, PropensitySpec, Protocol,
};
use crate::covgen::CovGenTemplate;
use crate::data_model::{
    summarize_ipd, CovariateKind, CovariateSpec, EffectScale, EventLevel, IpdTrial, OutcomeKind, SubjectRecord,
    TrialId, SCHEMA,
};
use crate::error::{Error, Result};
use crate::estimators::{anchored_combine, published_effect, weighted_contrast, EffectEstimate};
use crate::propensity::{logistic, Link};
use crate::rng::Philox;
use crate::weighting::{maic_weights, EstimandKind};

/// Largest share of replicates allowed to abort.
pub const MAX_ABORT_RATE: f64 = 0.01;

/// Stream offset separating protocol-2 seeds from data streams.
const PROTOCOL2_SEED_STREAM: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialScenario {
    /// Proportions for binary covariates, means for continuous ones.
    pub covariate_means: Vec<f64>,
    /// Standard deviations of continuous covariates; ignored for binary.
    #[serde(default)]
    pub covariate_sds: Option<Vec<f64>>,
    pub outcome: OutcomeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeModel {
    pub intercept: f64,
    pub slopes: Vec<f64>,
    pub treatment: f64,
    pub interactions: Vec<f64>,
}

impl OutcomeModel {
    /// P(Y = 1 | x, arm).
    pub fn probability(&self, x: &[f64], active: bool) -> f64 {
        let dot = |b: &[f64]| b.iter().zip(x).map(|(b, x)| b * x).sum::<f64>();
        let mut eta = self.intercept + dot(&self.slopes);
        if active {
            eta += self.treatment + dot(&self.interactions);
        }
        logistic(eta)
    }
}

fn default_event() -> EventLevel {
    EventLevel::ZERO
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    pub n_per_arm: usize,
    pub replicates: usize,
    pub seed: u64,
    pub covariates: Vec<CovariateSpec>,
    pub ac: TrialScenario,
    pub bc: TrialScenario,
    #[serde(default = "default_event")]
    pub event: EventLevel,
    /// Generating-model template used by protocol 2.
    #[serde(default)]
    pub covgen: CovGenTemplate,
}

impl ScenarioSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read_json_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn trial(&self, t: TrialId) -> &TrialScenario {
        match t {
            TrialId::AC => &self.ac,
            TrialId::BC => &self.bc,
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.covariates.iter().all(|c| c.kind == CovariateKind::Binary)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let p = self.covariates.len();
        if self.replicates == 0 {
            problems.push("replicate count must be positive".to_string());
        }
        if self.n_per_arm < 2 {
            problems.push("n_per_arm must be at least 2".to_string());
        }
        if p == 0 {
            problems.push("at least one covariate is required".to_string());
        }
        for t in [TrialId::AC, TrialId::BC] {
            let s = self.trial(t);
            let o = &s.outcome;
            if s.covariate_means.len() != p || o.slopes.len() != p || o.interactions.len() != p {
                problems.push(format!("trial {t}: vector lengths must equal the covariate count {p}"));
                continue;
            }
            let coefs = [o.intercept, o.treatment].into_iter().chain(o.slopes.iter().copied()).chain(o.interactions.iter().copied());
            if coefs.clone().any(|c| !c.is_finite()) {
                problems.push(format!("trial {t}: non-finite outcome coefficient"));
            }
            for (j, c) in self.covariates.iter().enumerate() {
                let m = s.covariate_means[j];
                match c.kind {
                    CovariateKind::Binary if !(m > 0.0 && m < 1.0) => {
                        problems.push(format!("trial {t}: proportion for {} must lie in (0, 1), got {m}", c.name))
                    }
                    CovariateKind::Continuous => {
                        let sd = s.covariate_sds.as_ref().and_then(|v| v.get(j)).copied();
                        if !matches!(sd, Some(v) if v > 0.0 && v.is_finite()) || !m.is_finite() {
                            problems.push(format!("trial {t}: continuous covariate {} needs a finite mean and positive sd", c.name));
                        }
                    }
                    _ => {}
                }
            }
            if self.is_discrete() && problems.is_empty() {
                for x in patterns(p) {
                    for active in [false, true] {
                        let pr = o.probability(&x, active);
                        if !(pr > 0.0 && pr < 1.0) {
                            problems.push(format!("trial {t}: outcome probability {pr} at pattern {x:?}"));
                        }
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }
}

/// All 2^p binary patterns, in lexicographic order.
fn patterns(p: usize) -> Vec<Vec<f64>> {
    (0..1usize << p)
        .map(|m| (0..p).map(|j| ((m >> (p - 1 - j)) & 1) as f64).collect())
        .collect()
}

fn pattern_probability(means: &[f64], x: &[f64]) -> f64 {
    means.iter().zip(x).map(|(m, &v)| if v == 1.0 { *m } else { 1.0 - m }).product()
}

/// Draws both trials of replicate `index`. Trial AC uses Philox stream
/// `2·index`, trial BC stream `2·index + 1`; within a trial subjects are
/// drawn active arm first, covariates before the outcome.
pub fn simulate_pair(spec: &ScenarioSpec, index: u64) -> (IpdTrial, IpdTrial) {
    let draw = |trial: TrialId, stream: u64| {
        let s = spec.trial(trial);
        let mut rng = Philox::new(spec.seed, stream);
        let (active, anchor) = trial.arms();
        let mut records = Vec::with_capacity(2 * spec.n_per_arm);
        for arm in [active, anchor] {
            for _ in 0..spec.n_per_arm {
                let x: Vec<f64> = spec
                    .covariates
                    .iter()
                    .enumerate()
                    .map(|(j, c)| match c.kind {
                        CovariateKind::Binary => {
                            if rng.next_bernoulli(s.covariate_means[j]) {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        CovariateKind::Continuous => {
                            let sd = s.covariate_sds.as_ref().map_or(1.0, |v| v[j]);
                            s.covariate_means[j] + sd * rng.next_normal()
                        }
                    })
                    .collect();
                let y = rng.next_bernoulli(s.outcome.probability(&x, arm == active));
                records.push(SubjectRecord {
                    id: format!("{trial}-{:05}", records.len() + 1),
                    arm,
                    outcome: if y { 1.0 } else { 0.0 },
                    covariates: x,
                });
            }
        }
        IpdTrial {
            trial,
            covariates: spec.covariates.clone(),
            declared_n: Some(records.len()),
            records,
            outcome_kind: OutcomeKind::Binary,
            event: spec.event,
        }
    };
    (draw(TrialId::AC, 2 * index), draw(TrialId::BC, 2 * index + 1))
}

/// Event probability of `arm` in trial `t` averaged over pattern weights `g`.
fn marginal_event(spec: &ScenarioSpec, t: TrialId, active: bool, g: &[(Vec<f64>, f64)]) -> f64 {
    let o = &spec.trial(t).outcome;
    let total: f64 = g.iter().map(|(_, w)| w).sum();
    let p1: f64 = g.iter().map(|(x, w)| w * o.probability(x, active)).sum::<f64>() / total;
    if spec.event.value() == 1.0 {
        p1
    } else {
        1.0 - p1
    }
}

fn marginal_logor(spec: &ScenarioSpec, t: TrialId, g: &[(Vec<f64>, f64)]) -> f64 {
    let odds = |p: f64| p / (1.0 - p);
    (odds(marginal_event(spec, t, true, g)) / odds(marginal_event(spec, t, false, g))).ln()
}

/// True A-vs-B log-odds ratios of each method's target population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueEffects {
    /// Both trials' effects in the BC population.
    pub classic_a: f64,
    /// Both trials' effects in the AC population.
    pub classic_b: f64,
    /// Both trials' effects in the overlap population.
    pub ato: f64,
    /// Per-trial effects in the overlap population.
    pub ato_ac: f64,
    pub ato_bc: f64,
}

/// Exact truths for discrete-covariate scenarios.
///
/// Both trials have equal size, so the population propensity of a pattern
/// is ε(x) = f_AC(x) / (f_AC(x) + f_BC(x)) and the overlap population has
/// density proportional to ε(x)(1 − ε(x))(f_AC(x) + f_BC(x)).
pub fn true_effects(spec: &ScenarioSpec) -> Option<TrueEffects> {
    if !spec.is_discrete() {
        return None;
    }
    let xs = patterns(spec.covariates.len());
    let f = |t: TrialId| -> Vec<(Vec<f64>, f64)> {
        xs.iter().map(|x| (x.clone(), pattern_probability(&spec.trial(t).covariate_means, x))).collect()
    };
    let (f_ac, f_bc) = (f(TrialId::AC), f(TrialId::BC));
    let overlap: Vec<(Vec<f64>, f64)> = f_ac
        .iter()
        .zip(&f_bc)
        .map(|((x, a), (_, b))| {
            let s = a + b;
            let eps = if s > 0.0 { a / s } else { 0.0 };
            (x.clone(), eps * (1.0 - eps) * s)
        })
        .collect();
    let ab = |g: &[(Vec<f64>, f64)]| marginal_logor(spec, TrialId::AC, g) - marginal_logor(spec, TrialId::BC, g);
    Some(TrueEffects {
        classic_a: ab(&f_bc),
        classic_b: ab(&f_ac),
        ato: ab(&overlap),
        ato_ac: marginal_logor(spec, TrialId::AC, &overlap),
        ato_bc: marginal_logor(spec, TrialId::BC, &overlap),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ClassicA,
    ClassicB,
    Protocol1,
    Protocol2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ClassicA, Method::ClassicB, Method::Protocol1, Method::Protocol2];

    pub fn label(self) -> &'static str {
        match self {
            Method::ClassicA => "classic MAIC (sponsor A)",
            Method::ClassicB => "classic MAIC (sponsor B)",
            Method::Protocol1 => "arbitrated, IPD shared",
            Method::Protocol2 => "arbitrated, simulated covariates",
        }
    }

    fn truth(self, t: &TrueEffects) -> f64 {
        match self {
            Method::ClassicA => t.classic_a,
            Method::ClassicB => t.classic_b,
            Method::Protocol1 | Method::Protocol2 => t.ato,
        }
    }
}

/// A-vs-B estimates of one replicate, in [`Method::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: u64,
    pub estimates: Vec<EffectEstimate>,
}

fn protocol_config(spec: &ScenarioSpec, protocol: Protocol, seed: Option<u64>) -> ArbitrationConfig {
    let names: Vec<String> = spec.covariates.iter().map(|c| c.name.clone()).collect();
    ArbitrationConfig {
        schema: SCHEMA.into(),
        protocol,
        covariates: names.clone(),
        propensity: PropensitySpec { covariates: names, link: Link::Logit },
        covgen: seed.map(|_| spec.covgen.clone()),
        seed,
        scale: EffectScale::LogOddsRatio,
        estimand: EstimandKind::ATO,
    }
}

/// Seed handed to both sponsors in protocol 2 for replicate `index`.
pub fn protocol2_seed(spec: &ScenarioSpec, index: u64) -> u64 {
    Philox::new(spec.seed, PROTOCOL2_SEED_STREAM + index).next_u64()
}

pub fn run_replicate(spec: &ScenarioSpec, index: u64) -> Result<ReplicateResult> {
    let (ac, bc) = simulate_pair(spec, index);
    let (agd_ac, agd_bc) = (summarize_ipd(&ac), summarize_ipd(&bc));

    let classic = |own: &IpdTrial, rival: &crate::data_model::AgdSummary| -> Result<EffectEstimate> {
        let w = maic_weights(&own.covariate_matrix(), &rival.covariate_means)?;
        anchored_combine(&weighted_contrast(own, &w, EffectScale::LogOddsRatio)?, &published_effect(rival)?)
    };
    let classic_a = classic(&ac, &agd_bc)?;
    // B-vs-A from sponsor B, reported A vs B
    let b_side = classic(&bc, &agd_ac)?;
    let classic_b = EffectEstimate::new(
        b_side.scale,
        b_side.estimand,
        -b_side.point,
        b_side.se,
        format!("negated: {}", b_side.provenance),
    );

    let c1 = protocol_config(spec, Protocol::IpdShared, None);
    let (wa, wb) = arbitrate_ipd(&ac.covariate_ipd(), &bc.covariate_ipd(), &c1)?;
    let p1 = arbitrator_combine(&sponsor_run(&ac, &wa, &c1)?, &sponsor_run(&bc, &wb, &c1)?, None)?;

    let c2 = protocol_config(spec, Protocol::CovariateSimulation, Some(protocol2_seed(spec, index)));
    let p2 = arbitrator_combine(
        &sponsor_run_selfservice(&ac, &agd_bc, &c2)?,
        &sponsor_run_selfservice(&bc, &agd_ac, &c2)?,
        None,
    )?;
    Ok(ReplicateResult {
        index,
        estimates: vec![classic_a, classic_b, p1.estimate, p2.estimate],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub truth: Option<f64>,
    pub mean: f64,
    pub bias: Option<f64>,
    pub empirical_se: f64,
    pub mean_sandwich_se: f64,
    /// Standard error of `mean`.
    pub monte_carlo_se: f64,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub replicate: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    pub replicates: usize,
    pub completed: usize,
    pub aborted: Vec<Abort>,
    pub truths: Option<TrueEffects>,
    pub methods: Vec<MethodSummary>,
    /// Share of replicates with classic A > 0 and classic B < 0 (A vs B).
    pub sign_flip_rate: f64,
    /// Every pair of method means differs by less than three Monte Carlo
    /// standard errors.
    pub all_methods_agree: bool,
}

impl StudyReport {
    pub fn abort_rate(&self) -> f64 {
        self.aborted.len() as f64 / self.replicates as f64
    }

    pub fn method(&self, m: Method) -> &MethodSummary {
        self.methods.iter().find(|s| s.method == m).expect("all methods summarized")
    }

    /// Fails when more than [`MAX_ABORT_RATE`] of the replicates aborted.
    pub fn check(&self) -> Result<()> {
        if self.abort_rate() > MAX_ABORT_RATE {
            let first = self.aborted.first().map(|a| a.error.as_str()).unwrap_or("");
            return Err(Error::StudyFailed(format!(
                "{} of {} replicates aborted (first: {first})",
                self.aborted.len(),
                self.replicates
            )));
        }
        Ok(())
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario {} | seed {} | {} replicates, {} completed, {} aborted",
            if self.scenario.is_empty() { "(unnamed)" } else { &self.scenario },
            self.seed,
            self.replicates,
            self.completed,
            self.aborted.len()
        );
        let _ = writeln!(
            s,
            "{:<34} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "method (A vs B, logOR)", "truth", "mean", "bias", "emp se", "sand se", "cover95"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{:<34} {:>9} {:>9.4} {:>9} {:>9.4} {:>9.4} {:>9}",
                m.method.label(),
                opt(m.truth),
                m.mean,
                opt(m.bias),
                m.empirical_se,
                m.mean_sandwich_se,
                opt(m.coverage)
            );
        }
        let _ = writeln!(s, "sign-flip rate: {:.4}", self.sign_flip_rate);
        let _ = writeln!(s, "all methods agree: {}", self.all_methods_agree);
        s
    }
}

/// Reduces replicate results into a report. The result does not depend on
/// the order of `results`.
pub fn summarize(spec: &ScenarioSpec, mut results: Vec<ReplicateResult>, mut aborted: Vec<Abort>) -> StudyReport {
    results.sort_by_key(|r| r.index);
    aborted.sort_by_key(|a| a.replicate);
    let truths = true_effects(spec);
    let k = results.len() as f64;
    let methods: Vec<MethodSummary> = Method::ALL
        .iter()
        .enumerate()
        .map(|(m_idx, &method)| {
            let pts: Vec<f64> = results.iter().map(|r| r.estimates[m_idx].point).collect();
            let mean = pts.iter().sum::<f64>() / k;
            let var = pts.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
            let ses: Vec<f64> = results.iter().filter_map(|r| r.estimates[m_idx].se).collect();
            let truth = truths.as_ref().map(|t| method.truth(t));
            let coverage = truth.map(|t| {
                results.iter().filter(|r| r.estimates[m_idx].covers(t) == Some(true)).count() as f64 / k
            });
            MethodSummary {
                method,
                truth,
                mean,
                bias: truth.map(|t| mean - t),
                empirical_se: var.sqrt(),
                mean_sandwich_se: ses.iter().sum::<f64>() / ses.len().max(1) as f64,
                monte_carlo_se: (var / k).sqrt(),
                coverage,
            }
        })
        .collect();
    let flips = results.iter().filter(|r| r.estimates[0].point > 0.0 && r.estimates[1].point < 0.0).count();
    let all_methods_agree = methods.iter().enumerate().all(|(i, a)| {
        methods[i + 1..]
            .iter()
            .all(|b| (a.mean - b.mean).abs() <= 3.0 * a.monte_carlo_se.hypot(b.monte_carlo_se))
    });
    StudyReport {
        schema: SCHEMA.into(),
        scenario: spec.name.clone(),
        seed: spec.seed,
        replicates: spec.replicates,
        completed: results.len(),
        aborted,
        truths,
        methods,
        sign_flip_rate: flips as f64 / k,
        all_methods_agree,
    }
}

/// Runs every replicate, in parallel on the current rayon pool.
pub fn run_study(spec: &ScenarioSpec) -> Result<StudyReport> {
    spec.validate()?;
    let outcomes: Vec<(u64, Result<ReplicateResult>)> = (0..spec.replicates as u64)
        .into_par_iter()
        .map(|i| (i, run_replicate(spec, i)))
        .collect();
    let mut results = Vec::with_capacity(outcomes.len());
    let mut aborted = Vec::new();
    for (i, r) in outcomes {
        match r {
            Ok(r) => results.push(r),
            Err(e) => aborted.push(Abort { replicate: i, error: e.to_string() }),
        }
    }
    if results.is_empty() {
        return Err(Error::StudyFailed("every replicate aborted".into()));
    }
    Ok(summarize(spec, results, aborted))
}
