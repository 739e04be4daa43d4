//! Balancing weights.
//!
//! A tilt function h(e) of the propensity defines a target population with
//! density proportional to f(x)h(x); the group weights that reach it are
//! h/e for the `T = 1` group and h/(1 − e) for the `T = 0` group. The overlap
//! tilt h = e(1 − e) gives weights 1 − e and e.
//!
//! MAIC weights solve the moment-matching problem by exponential tilting:
//! wᵢ ∝ exp(αᵀxᵢ) with α chosen so the weighted covariate means equal the
//! aggregate-data targets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::{summarize_ipd, AgdSummary, IpdTrial};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimandKind {
    ATE,
    ATT,
    ATC,
    ATO,
}

impl EstimandKind {
    /// h(e): ATE → 1, ATT → e, ATC → 1 − e, ATO → e(1 − e).
    pub fn tilt(self, e: f64) -> f64 {
        match self {
            EstimandKind::ATE => 1.0,
            EstimandKind::ATT => e,
            EstimandKind::ATC => 1.0 - e,
            EstimandKind::ATO => e * (1.0 - e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    SumToOne,
    MeanOne,
    Raw,
}

/// Per-subject nonnegative weights with at least one positive entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightVectorWire")]
pub struct WeightVector {
    weights: Vec<f64>,
    normalization: Normalization,
    ess: f64,
}

#[derive(Deserialize)]
struct WeightVectorWire {
    weights: Vec<f64>,
    normalization: Normalization,
    #[allow(dead_code)]
    #[serde(default)]
    ess: Option<f64>,
}

impl TryFrom<WeightVectorWire> for WeightVector {
    type Error = Error;

    fn try_from(w: WeightVectorWire) -> Result<Self> {
        WeightVector::new(w.weights, w.normalization)
    }
}

impl WeightVector {
    /// Validate `weights` and rescale them to `normalization`.
    pub fn new(mut weights: Vec<f64>, normalization: Normalization) -> Result<Self> {
        if let Some(bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidInput(format!("weight {bad} is negative or not finite")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput("all weights are zero".into()));
        }
        let c = match normalization {
            Normalization::SumToOne => 1.0 / total,
            Normalization::MeanOne => weights.len() as f64 / total,
            Normalization::Raw => 1.0,
        };
        if c != 1.0 {
            weights.iter_mut().for_each(|w| *w *= c);
        }
        let ess = ess_of(&weights);
        Ok(Self {
            weights,
            normalization,
            ess,
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self::new(vec![1.0; n], Normalization::Raw).expect("n > 0")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn ess(&self) -> f64 {
        self.ess
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `c · w`, tagged raw.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.weights.iter().map(|w| w * c).collect(), Normalization::Raw)
    }

    pub fn renormalized(&self, normalization: Normalization) -> Self {
        Self::new(self.weights.clone(), normalization).expect("already valid")
    }
}

fn ess_of(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2.is_normal() {
        s * s / s2
    } else {
        // tiny weights: work on the normalized scale
        1.0 / w.iter().map(|x| (x / s) * (x / s)).sum::<f64>()
    }
}

/// Effective sample size (Σw)²/Σw².
pub fn ess(w: &WeightVector) -> f64 {
    ess_of(&w.weights)
}

/// h(εᵢ) for every subject.
pub fn tilt(kind: EstimandKind, eps: &[f64]) -> Result<Vec<f64>> {
    check_probabilities(eps)?;
    Ok(eps.iter().map(|&e| kind.tilt(e)).collect())
}

fn check_probabilities(eps: &[f64]) -> Result<()> {
    match eps.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        Some(bad) => Err(Error::InvalidInput(format!("propensity {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Which side of the trial-membership model the weighted IPD belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// The AC trial, `T = 1`: weights 1 − ε.
    T1,
    /// The BC trial, `T = 0`: weights ε.
    T0,
}

/// Overlap weights, left unnormalized.
pub fn overlap_weights(eps: &[f64], side: Side) -> Result<WeightVector> {
    check_probabilities(eps)?;
    let w = eps
        .iter()
        .map(|&e| match side {
            Side::T1 => 1.0 - e,
            Side::T0 => e,
        })
        .collect();
    WeightVector::new(w, Normalization::Raw)
}

#[derive(Debug, Clone, Copy)]
pub struct MaicOptions {
    pub normalization: Normalization,
    /// Tolerance on the weighted-mean residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MaicOptions {
    fn default() -> Self {
        Self {
            normalization: Normalization::SumToOne,
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Largest admissible tilt coefficient on the standardized scale; beyond it
/// the targets are treated as lying outside the convex hull of the data.
const ALPHA_LIMIT: f64 = 50.0;

/// MAIC weights with the default options.
pub fn maic_weights(x: &DMatrix<f64>, targets: &[f64]) -> Result<WeightVector> {
    maic_weights_with(x, targets, MaicOptions::default())
}

/// Solve Σᵢ wᵢ (xᵢ − t) = 0 with wᵢ = exp(αᵀxᵢ) by damped Newton steps on the
/// convex log-partition objective.
pub fn maic_weights_with(x: &DMatrix<f64>, targets: &[f64], opts: MaicOptions) -> Result<WeightVector> {
    let (n, p) = x.shape();
    if targets.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: targets.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidInput("no subjects to weight".into()));
    }
    if targets.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite covariate or target".into()));
    }

    // Columns that are constant at their target carry no constraint.
    let mut active = Vec::new();
    let mut scale = Vec::new();
    for j in 0..p {
        let col = x.column(j);
        let (lo, hi) = (col.min(), col.max());
        let t = targets[j];
        if lo == hi {
            if t != lo {
                return Err(Error::Infeasible(format!(
                    "covariate {j} is constant at {lo} but the target is {t}"
                )));
            }
            continue;
        }
        if t <= lo || t >= hi {
            return Err(Error::Infeasible(format!(
                "target {t} for covariate {j} is not inside the observed range ({lo}, {hi})"
            )));
        }
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        active.push(j);
        scale.push(sd);
    }
    let q = active.len();
    let d = DMatrix::from_fn(n, q, |i, k| (x[(i, active[k])] - targets[active[k]]) / scale[k]);

    // log Σ exp(dᵢᵀα) and the softmax weights
    let evaluate = |alpha: &DVector<f64>| -> (f64, Vec<f64>) {
        let eta: Vec<f64> = (0..n).map(|i| d.row(i).transpose().dot(alpha)).collect();
        let mx = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = eta.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        (mx + s.ln(), e.into_iter().map(|v| v / s).collect())
    };
    let gradient = |pi: &[f64]| -> DVector<f64> { d.tr_mul(&DVector::from_column_slice(pi)) };
    let residual_ok = |g: &DVector<f64>| (0..q).all(|k| (g[k] * scale[k]).abs() <= opts.tol * scale[k].max(1.0));

    let mut alpha = DVector::zeros(q);
    let (mut obj, mut pi) = evaluate(&alpha);
    let mut converged = q == 0;
    for _ in 0..opts.max_iter {
        if converged {
            break;
        }
        let g = gradient(&pi);
        if residual_ok(&g) {
            converged = true;
            break;
        }
        // weighted covariance of the centred columns
        let mut h = -&g * g.transpose();
        for i in 0..n {
            let r = d.row(i).transpose();
            h.ger(pi[i], &r, &r, 1.0);
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => h
                .svd(true, true)
                .solve(&g, 1e-12)
                .map_err(|e| Error::Singular(e.to_string()))?,
        };
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &alpha - &step * t;
            let (cand_obj, cand_pi) = evaluate(&cand);
            // near the root the objective decrease drops below its rounding
            // error, so a shrinking gradient also counts as progress
            let armijo = cand_obj <= obj - 1e-4 * t * slope;
            if armijo || gradient(&cand_pi).norm() <= (1.0 - 1e-4 * t) * g.norm() {
                alpha = cand;
                obj = cand_obj;
                pi = cand_pi;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if alpha.amax() > ALPHA_LIMIT {
            return Err(Error::Infeasible(
                "tilt coefficients diverge; targets lie outside the convex hull of the covariates".into(),
            ));
        }
        if !moved {
            // line search stalled: accept only if already at the floating-point floor
            let g = gradient(&pi);
            if (0..q).all(|k| (g[k] * scale[k]).abs() <= 1e3 * opts.tol * scale[k].max(1.0)) {
                converged = true;
                break;
            }
            return Err(Error::Infeasible(
                "line search failed; targets lie outside the convex hull of the covariates".into(),
            ));
        }
    }
    if !converged && !residual_ok(&gradient(&pi)) {
        return Err(Error::Infeasible(format!(
            "moment residual did not reach {} within {} iterations",
            opts.tol, opts.max_iter
        )));
    }
    WeightVector::new(pi, opts.normalization)
}

/// Extend `x` with centred squares so MAIC also matches variances.
///
/// Column j's square is centred at the target mean, so its target is the
/// target variance.
pub fn with_variance_targets(
    x: &DMatrix<f64>,
    means: &[f64],
    variances: &[f64],
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (n, p) = x.shape();
    if means.len() != p || variances.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: means.len().min(variances.len()),
        });
    }
    let aug = DMatrix::from_fn(n, 2 * p, |i, j| {
        if j < p {
            x[(i, j)]
        } else {
            (x[(i, j - p)] - means[j - p]).powi(2)
        }
    });
    let mut targets = means.to_vec();
    targets.extend_from_slice(variances);
    Ok((aug, targets))
}

/// Weighted covariate means Σwᵢxᵢ/Σwᵢ. Arm sizes and outcome tabulations are
/// copied unweighted from the trial; the covariance is dropped.
pub fn weighted_covariate_summary(trial: &IpdTrial, w: &WeightVector) -> Result<AgdSummary> {
    if w.len() != trial.n() {
        return Err(Error::DimensionMismatch {
            expected: trial.n(),
            found: w.len(),
        });
    }
    let total: f64 = w.weights().iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("all weights are zero".into()));
    }
    let mut summary = summarize_ipd(trial);
    summary.covariate_means = weighted_means(&trial.covariate_matrix(), w.weights());
    summary.covariate_covariance = None;
    summary.covariance_degenerate = false;
    Ok(summary)
}

pub fn weighted_means(x: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    (0..x.ncols())
        .map(|j| (0..x.nrows()).map(|i| w[i] * x[(i, j)]).sum::<f64>() / total)
        .collect()
}
