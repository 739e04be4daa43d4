//! Trial-membership propensity ε(x) = P(T = 1 | X = x).
//!
//! Two routes: a logistic regression fitted by iteratively reweighted least
//! squares on pooled covariates, and the exact stratum proportion
//! n₁(s) / (n₁(s) + n₀(s)) for discrete covariate patterns.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convergence tolerance on the largest score component.
pub const SCORE_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 100;
/// Coefficient magnitude (standardized covariates) treated as separation.
pub const SEPARATION_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute score component at the returned coefficients
    /// (standardized parametrization).
    pub max_score: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Covariate names in coefficient order (may be empty for anonymous fits).
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Intercept followed by one slope per covariate, original scale.
    pub coefficients: Vec<f64>,
    pub link: Link,
    pub diagnostics: FitDiagnostics,
}

#[inline]
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const P_MIN: f64 = f64::MIN_POSITIVE;
const P_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

impl PropensityModel {
    pub fn p(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                found: x.len(),
            });
        }
        Ok(self.coefficients[0]
            + self.coefficients[1..].iter().zip(x).map(|(b, x)| b * x).sum::<f64>())
    }

    /// ε(x), kept strictly inside (0, 1).
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(logistic(self.linear_predictor(x)?).clamp(P_MIN, P_MAX))
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.predict(&row)
            })
            .collect()
    }
}

/// Binomial log-likelihood at `coefficients` (original scale, intercept first).
pub fn log_likelihood(coefficients: &[f64], x: &DMatrix<f64>, labels: &[f64]) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let eta = coefficients[0]
                + (0..x.ncols()).map(|j| coefficients[j + 1] * x[(i, j)]).sum::<f64>();
            -labels[i] * softplus(-eta) - (1.0 - labels[i]) * softplus(eta)
        })
        .sum()
}

/// Analytic score Σ (yᵢ − μᵢ)(1, xᵢ) at `coefficients`.
pub fn score(coefficients: &[f64], x: &DMatrix<f64>, labels: &[f64]) -> Vec<f64> {
    let p = x.ncols();
    let mut g = vec![0.0; p + 1];
    for i in 0..x.nrows() {
        let eta = coefficients[0] + (0..p).map(|j| coefficients[j + 1] * x[(i, j)]).sum::<f64>();
        let r = labels[i] - logistic(eta);
        g[0] += r;
        for j in 0..p {
            g[j + 1] += r * x[(i, j)];
        }
    }
    g
}

/// Distinct covariate rows with their label counts, in a canonical order.
struct Patterns {
    rows: Vec<Vec<f64>>,
    ones: Vec<f64>,
    zeros: Vec<f64>,
}

fn collapse(x: &DMatrix<f64>, labels: &[f64]) -> Patterns {
    let mut map: BTreeMap<Vec<u64>, (f64, f64)> = BTreeMap::new();
    for i in 0..x.nrows() {
        // -0.0 and 0.0 must land in the same pattern
        let key: Vec<u64> = x.row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
        let e = map.entry(key).or_insert((0.0, 0.0));
        if labels[i] == 1.0 {
            e.0 += 1.0;
        } else {
            e.1 += 1.0;
        }
    }
    let mut p = Patterns {
        rows: Vec::with_capacity(map.len()),
        ones: Vec::with_capacity(map.len()),
        zeros: Vec::with_capacity(map.len()),
    };
    for (k, (o, z)) in map {
        p.rows.push(k.into_iter().map(f64::from_bits).collect());
        p.ones.push(o);
        p.zeros.push(z);
    }
    p
}

/// Fit a logistic trial-membership model by IRLS with step-halving.
///
/// Covariates are centred and scaled internally; coefficients are reported on
/// the original scale. Non-convergence within [`MAX_ITER`] iterations is
/// reported through the diagnostics, not as an error.
pub fn fit_logistic(x: &DMatrix<f64>, labels: &[f64]) -> Result<PropensityModel> {
    let (n, p) = x.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if n < p + 1 {
        return Err(Error::TooFewObservations { n, params: p + 1 });
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidInput(format!("label {bad} is not 0/1")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite covariate value".into()));
    }
    let n1: f64 = labels.iter().sum();
    if n1 == 0.0 || n1 == n as f64 {
        return Err(Error::OneClassLabels);
    }

    let pat = collapse(x, labels);
    let m = pat.rows.len();
    let totals: Vec<f64> = pat.ones.iter().zip(&pat.zeros).map(|(a, b)| a + b).collect();

    let mut centre = vec![0.0; p];
    let mut scale = vec![0.0; p];
    for j in 0..p {
        centre[j] = (0..m).map(|k| totals[k] * pat.rows[k][j]).sum::<f64>() / n as f64;
        let var = (0..m)
            .map(|k| totals[k] * (pat.rows[k][j] - centre[j]).powi(2))
            .sum::<f64>()
            / n as f64;
        if var <= 0.0 {
            return Err(Error::ConstantCovariate(format!("column {j}")));
        }
        scale[j] = var.sqrt();
    }
    let z: Vec<DVector<f64>> = pat
        .rows
        .iter()
        .map(|r| {
            DVector::from_iterator(
                p + 1,
                std::iter::once(1.0).chain((0..p).map(|j| (r[j] - centre[j]) / scale[j])),
            )
        })
        .collect();

    let loglik = |beta: &DVector<f64>| -> f64 {
        (0..m)
            .map(|k| {
                let eta = beta.dot(&z[k]);
                -pat.ones[k] * softplus(-eta) - pat.zeros[k] * softplus(eta)
            })
            .sum()
    };
    let score_info = |beta: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(p + 1);
        let mut h = DMatrix::zeros(p + 1, p + 1);
        for k in 0..m {
            let mu = logistic(beta.dot(&z[k]));
            g.axpy(pat.ones[k] - totals[k] * mu, &z[k], 1.0);
            h.ger(totals[k] * mu * (1.0 - mu), &z[k], &z[k], 1.0);
        }
        (g, h)
    };

    let ybar = n1 / n as f64;
    let mut beta = DVector::zeros(p + 1);
    beta[0] = (ybar / (1.0 - ybar)).ln();
    let mut ll = loglik(&beta);
    let mut iterations = 0;
    let mut converged = false;
    let mut max_score;
    loop {
        let (g, h) = score_info(&beta);
        max_score = g.amax();
        if max_score <= SCORE_TOL {
            converged = true;
            break;
        }
        if iterations == MAX_ITER {
            break;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                return Err(Error::Singular(
                    "information matrix is not positive definite (collinear covariates?)".into(),
                ))
            }
        };
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_ll = loglik(&cand);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some((cand, cand_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_ll)) = accepted else {
            // at the floating-point floor of the likelihood
            break;
        };
        beta = cand;
        ll = cand_ll;
        if let Some((idx, v)) = beta.iter().enumerate().skip(1).find(|(_, v)| v.abs() > SEPARATION_LIMIT) {
            return Err(Error::Separation { index: idx, value: *v });
        }
    }
    if !converged {
        log::warn!("logistic fit stopped after {iterations} iterations, max score {max_score:.3e}");
    }

    let mut coefficients = vec![0.0; p + 1];
    coefficients[0] = beta[0];
    for j in 0..p {
        coefficients[j + 1] = beta[j + 1] / scale[j];
        coefficients[0] -= beta[j + 1] * centre[j] / scale[j];
    }
    Ok(PropensityModel {
        covariates: Vec::new(),
        coefficients,
        link: Link::Logit,
        diagnostics: FitDiagnostics {
            iterations,
            converged,
            max_score,
            log_likelihood: ll,
        },
    })
}

/// Exact propensity for one covariate stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumPropensity {
    pub ratio: Ratio<u64>,
    pub eps: f64,
    /// The stratum is absent from one of the trials (ε = 0 or 1).
    pub positivity_warning: bool,
}

/// ε(s) = n₁(s) / (n₁(s) + n₀(s)) from per-stratum counts `(n in T=1, n in T=0)`.
///
/// This equals P(X = s | T = 1) P(T = 1) / P(X = s) with every probability
/// replaced by its empirical frequency.
pub fn exact_discrete_propensity(strata: &[(u64, u64)]) -> Result<Vec<StratumPropensity>> {
    strata
        .iter()
        .enumerate()
        .map(|(i, &(n1, n0))| {
            if n1 + n0 == 0 {
                return Err(Error::InvalidInput(format!("stratum {i} is empty")));
            }
            let ratio = Ratio::new(n1, n1 + n0);
            let positivity_warning = n1 == 0 || n0 == 0;
            if positivity_warning {
                log::warn!("stratum {i} appears in one trial only; overlap weight is 0");
            }
            Ok(StratumPropensity {
                ratio,
                eps: n1 as f64 / (n1 + n0) as f64,
                positivity_warning,
            })
        })
        .collect()
}

/// A covariate pattern together with its counts in each trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub pattern: Vec<f64>,
    pub n1: u64,
    pub n0: u64,
}

/// Group the rows of two covariate matrices into shared patterns, sorted by pattern.
pub fn stratify(x1: &DMatrix<f64>, x0: &DMatrix<f64>) -> Result<Vec<Stratum>> {
    if x1.ncols() != x0.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x1.ncols(),
            found: x0.ncols(),
        });
    }
    let mut map: BTreeMap<Vec<u64>, (u64, u64)> = BTreeMap::new();
    for (x, is_one) in [(x1, true), (x0, false)] {
        for i in 0..x.nrows() {
            let key: Vec<u64> = x.row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
            let e = map.entry(key).or_default();
            if is_one {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
    }
    let mut out: Vec<Stratum> = map
        .into_iter()
        .map(|(k, (n1, n0))| Stratum {
            pattern: k.into_iter().map(f64::from_bits).collect(),
            n1,
            n0,
        })
        .collect();
    out.sort_by(|a, b| a.pattern.partial_cmp(&b.pattern).expect("finite patterns"));
    Ok(out)
}
