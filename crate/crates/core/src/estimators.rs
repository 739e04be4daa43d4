//! Weighted treatment-effect estimation within one trial, and the anchored
//! A-vs-B combination through the common comparator.
//!
//! `weighted_contrast` solves the weighted estimating equation
//! Σ wᵢ xᵢ (yᵢ − μ(xᵢᵀβ)) = 0 for the marginal model with an intercept and
//! an active-arm indicator, and reports the sandwich standard error
//! A⁻¹BA⁻ᵀ with A = Σ wᵢ v(μᵢ) xᵢxᵢᵀ and B = Σ wᵢ² (yᵢ − μᵢ)² xᵢxᵢᵀ,
//! treating each subject as its own cluster.

use std::fmt;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::data_model::{AgdSummary, EffectScale, IpdTrial, OutcomeKind, OutcomeSummary};
use crate::error::{Error, Result};
use crate::weighting::{EstimandKind, WeightVector};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimand {
    ATE,
    ATT,
    ATC,
    ATO,
    /// Population of the trial whose aggregate data the weights target, or
    /// the trial's own population when unweighted.
    #[serde(rename = "trial-matched")]
    TrialMatched,
}

impl From<EstimandKind> for Estimand {
    fn from(k: EstimandKind) -> Self {
        match k {
            EstimandKind::ATE => Estimand::ATE,
            EstimandKind::ATT => Estimand::ATT,
            EstimandKind::ATC => Estimand::ATC,
            EstimandKind::ATO => Estimand::ATO,
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimand::TrialMatched => f.write_str("trial-matched"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub scale: EffectScale,
    pub estimand: Estimand,
    pub point: f64,
    pub se: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub provenance: String,
}

impl EffectEstimate {
    pub fn new(scale: EffectScale, estimand: Estimand, point: f64, se: Option<f64>, provenance: impl Into<String>) -> Self {
        Self {
            scale,
            estimand,
            point,
            se,
            ci95: se.map(|s| (point - Z95 * s, point + Z95 * s)),
            provenance: provenance.into(),
        }
    }

    pub fn with_estimand(mut self, estimand: Estimand) -> Self {
        self.estimand = estimand;
        self
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn covers(&self, value: f64) -> Option<bool> {
        self.ci95.map(|(lo, hi)| lo <= value && value <= hi)
    }
}

/// Weighted outcome masses per arm.
#[derive(Debug, Clone, Copy, Default)]
struct ArmCells {
    event: f64,
    nonevent: f64,
}

fn check_weights(trial: &IpdTrial, w: &WeightVector) -> Result<()> {
    if w.len() != trial.n() {
        return Err(Error::DimensionMismatch {
            expected: trial.n(),
            found: w.len(),
        });
    }
    Ok(())
}

fn binary_cells(trial: &IpdTrial, w: &WeightVector) -> Result<(ArmCells, ArmCells)> {
    check_weights(trial, w)?;
    if trial.outcome_kind != OutcomeKind::Binary {
        return Err(Error::InvalidInput("log-odds ratio needs a binary outcome".into()));
    }
    let (active, anchor) = trial.arms();
    let (mut a, mut c) = (ArmCells::default(), ArmCells::default());
    for (r, &wi) in trial.records.iter().zip(w.weights()) {
        let cells = if r.arm == active {
            &mut a
        } else if r.arm == anchor {
            &mut c
        } else {
            continue;
        };
        if trial.event.is_event(r.outcome) {
            cells.event += wi;
        } else {
            cells.nonevent += wi;
        }
    }
    for (arm, cells) in [(active, a), (anchor, c)] {
        if cells.event <= 0.0 {
            return Err(Error::DegenerateCell(format!("arm {arm}, event: zero weighted mass")));
        }
        if cells.nonevent <= 0.0 {
            return Err(Error::DegenerateCell(format!("arm {arm}, non-event: zero weighted mass")));
        }
    }
    Ok((a, c))
}

/// Weighted log-odds ratio of the event, active vs anchor (natural log).
pub fn weighted_logodds(trial: &IpdTrial, w: &WeightVector) -> Result<EffectEstimate> {
    let (a, c) = binary_cells(trial, w)?;
    let point = ((a.event * c.nonevent) / (a.nonevent * c.event)).ln();
    let (active, anchor) = trial.arms();
    Ok(EffectEstimate::new(
        EffectScale::LogOddsRatio,
        Estimand::TrialMatched,
        point,
        None,
        format!("trial {}: {active} vs {anchor}, weighted 2x2 table", trial.trial),
    ))
}

/// Weighted marginal contrast with a sandwich standard error.
pub fn weighted_contrast(trial: &IpdTrial, w: &WeightVector, scale: EffectScale) -> Result<EffectEstimate> {
    check_weights(trial, w)?;
    let (active, anchor) = trial.arms();
    if scale != EffectScale::MeanDifference && trial.outcome_kind != OutcomeKind::Binary {
        return Err(Error::InvalidInput(format!("{scale} needs a binary outcome")));
    }
    if scale == EffectScale::LogOddsRatio {
        // surfaces named degenerate cells
        binary_cells(trial, w)?;
    }
    let response = |y: f64| match scale {
        EffectScale::MeanDifference => y,
        _ => {
            if trial.event.is_event(y) {
                1.0
            } else {
                0.0
            }
        }
    };

    // weighted arm means of the response
    let (mut sw, mut swy) = ([0.0f64; 2], [0.0f64; 2]);
    for (r, &wi) in trial.records.iter().zip(w.weights()) {
        let z = if r.arm == active {
            1
        } else if r.arm == anchor {
            0
        } else {
            continue;
        };
        sw[z] += wi;
        swy[z] += wi * response(r.outcome);
    }
    for (z, arm) in [(1, active), (0, anchor)] {
        if sw[z] <= 0.0 {
            return Err(Error::DegenerateCell(format!("arm {arm}: zero total weight")));
        }
    }
    let m = [swy[0] / sw[0], swy[1] / sw[1]];

    // With an intercept and one binary regressor the model is saturated, so
    // the estimating equation is solved by the weighted arm means.
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let beta = match scale {
        EffectScale::LogOddsRatio => Vector2::new(logit(m[0]), logit(m[1]) - logit(m[0])),
        _ => Vector2::new(m[0], m[1] - m[0]),
    };
    let mean_fn = |z: usize| -> (f64, f64) {
        let eta = beta[0] + beta[1] * z as f64;
        match scale {
            EffectScale::LogOddsRatio => {
                let mu = crate::propensity::logistic(eta);
                (mu, mu * (1.0 - mu))
            }
            _ => (eta, 1.0),
        }
    };

    let mut a = Matrix2::zeros();
    let mut b = Matrix2::zeros();
    let mut u = Vector2::zeros();
    for (r, &wi) in trial.records.iter().zip(w.weights()) {
        let z = if r.arm == active {
            1
        } else if r.arm == anchor {
            0
        } else {
            continue;
        };
        let x = Vector2::new(1.0, z as f64);
        let (mu, v) = mean_fn(z);
        let resid = response(r.outcome) - mu;
        a += x * x.transpose() * (wi * v);
        b += x * x.transpose() * (wi * wi * resid * resid);
        u += x * (wi * resid);
    }
    debug_assert!(
        u.amax() <= 1e-8 * (sw[0] + sw[1]).max(1.0),
        "estimating equation residual {u}"
    );
    let a_inv = a
        .try_inverse()
        .ok_or_else(|| Error::Singular("bread matrix of the sandwich".into()))?;
    let v = a_inv * b * a_inv.transpose();
    let se = v[(1, 1)].max(0.0).sqrt();

    let point = match scale {
        // the same number as weighted_logodds, computed from the 2x2 table
        EffectScale::LogOddsRatio => weighted_logodds(trial, w)?.point,
        _ => beta[1],
    };
    Ok(EffectEstimate::new(
        scale,
        Estimand::TrialMatched,
        point,
        Some(se),
        format!("trial {}: {active} vs {anchor}, weighted estimating equation, sandwich se", trial.trial),
    ))
}

/// `a − b` with root-sum-square standard error.
///
/// The standard error is dropped when either input lacks one.
pub fn anchored_combine(a: &EffectEstimate, b: &EffectEstimate) -> Result<EffectEstimate> {
    if a.scale != b.scale {
        return Err(Error::ScaleMismatch {
            left: a.scale.to_string(),
            right: b.scale.to_string(),
        });
    }
    let se = match (a.se, b.se) {
        (Some(x), Some(y)) => Some(x.hypot(y)),
        _ => None,
    };
    let estimand = if a.estimand == b.estimand {
        a.estimand
    } else {
        Estimand::TrialMatched
    };
    Ok(EffectEstimate::new(
        a.scale,
        estimand,
        a.point - b.point,
        se,
        format!("anchored difference [{}] minus [{}]", a.provenance, b.provenance),
    ))
}

/// The aggregate trial's own relative effect: the published value when
/// present, otherwise the unweighted effect computed from per-arm outcome
/// summaries (logOR for binary outcomes, mean difference for continuous).
pub fn published_effect(agd: &AgdSummary) -> Result<EffectEstimate> {
    let (active, anchor) = agd.trial.arms();
    if let Some(pe) = agd.published_effect {
        return Ok(EffectEstimate::new(
            pe.scale,
            Estimand::TrialMatched,
            pe.point,
            pe.se,
            format!("trial {}: published effect", agd.trial),
        ));
    }
    let (Some(a), Some(c)) = (agd.arm(active), agd.arm(anchor)) else {
        return Err(Error::InvalidInput(format!(
            "trial {}: neither a published effect nor per-arm summaries",
            agd.trial
        )));
    };
    match (a.outcome, c.outcome) {
        (OutcomeSummary::Binary { y0: a0, y1: a1 }, OutcomeSummary::Binary { y0: c0, y1: c1 }) => {
            let (ae, an) = if agd.event.value() == 0.0 { (a0, a1) } else { (a1, a0) };
            let (ce, cn) = if agd.event.value() == 0.0 { (c0, c1) } else { (c1, c0) };
            for (label, v) in [
                (format!("arm {active}, event"), ae),
                (format!("arm {active}, non-event"), an),
                (format!("arm {anchor}, event"), ce),
                (format!("arm {anchor}, non-event"), cn),
            ] {
                if v == 0 {
                    return Err(Error::DegenerateCell(format!("{label}: zero count")));
                }
            }
            let (ae, an, ce, cn) = (ae as f64, an as f64, ce as f64, cn as f64);
            let point = ((ae * cn) / (an * ce)).ln();
            let se = (1.0 / ae + 1.0 / an + 1.0 / ce + 1.0 / cn).sqrt();
            Ok(EffectEstimate::new(
                EffectScale::LogOddsRatio,
                Estimand::TrialMatched,
                point,
                Some(se),
                format!("trial {}: {active} vs {anchor}, unweighted counts", agd.trial),
            ))
        }
        (OutcomeSummary::Continuous { mean: ma, sd: sa }, OutcomeSummary::Continuous { mean: mc, sd: sc }) => {
            let se = (sa * sa / a.n as f64 + sc * sc / c.n as f64).sqrt();
            Ok(EffectEstimate::new(
                EffectScale::MeanDifference,
                Estimand::TrialMatched,
                ma - mc,
                Some(se),
                format!("trial {}: {active} vs {anchor}, unweighted means", agd.trial),
            ))
        }
        _ => Err(Error::InvalidInput("arms disagree on outcome type".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{summarize_ipd, Arm, PublishedEffect};
    use crate::fixtures;
    use crate::weighting::{maic_weights, overlap_weights, Normalization, Side};
    use proptest::prelude::*;

    fn race_eps(trial: &IpdTrial) -> Vec<f64> {
        trial
            .records
            .iter()
            .map(|r| if r.covariates[0] == 1.0 { 1.0 / 3.0 } else { 2.0 / 3.0 })
            .collect()
    }

    #[test]
    fn worked_example_logodds() {
        let ac = fixtures::example_ac();
        let bc = fixtures::example_bc();
        let w_ac = maic_weights(&ac.covariate_matrix(), &[2.0 / 3.0]).unwrap();
        let w_bc = maic_weights(&bc.covariate_matrix(), &[1.0 / 3.0]).unwrap();
        // ln(14/3) and ln(4.5714...) from the weighted 2x2 tables
        let l_ac = weighted_logodds(&ac, &w_ac).unwrap().point;
        let l_bc = weighted_logodds(&bc, &w_bc).unwrap().point;
        assert!((l_ac - (14.0f64 / 3.0).ln()).abs() < 1e-12, "{l_ac}");
        assert!((l_ac - 1.5404).abs() < 5e-5);
        assert!((l_bc - 1.5198).abs() < 5e-5, "{l_bc}");
        let unweighted = weighted_logodds(&ac, &WeightVector::uniform(1200)).unwrap().point;
        assert!((unweighted - 1.12).abs() < 0.005);
        let w1 = overlap_weights(&race_eps(&ac), Side::T1).unwrap();
        let ato = weighted_logodds(&ac, &w1).unwrap().point;
        assert!((ato - (11.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((ato - 1.2993).abs() < 5e-5);
    }

    #[test]
    fn uniform_sandwich_equals_classical_se() {
        let ac = fixtures::example_ac();
        let est = weighted_contrast(&ac, &WeightVector::uniform(1200), EffectScale::LogOddsRatio).unwrap();
        let classical = (1.0 / 260.0 + 1.0 / 340.0 + 1.0 / 120.0 + 1.0 / 480.0f64).sqrt();
        assert!((est.se.unwrap() - classical).abs() < 1e-6);
        assert!((est.point - 1.12).abs() < 0.005);
        let (lo, hi) = est.ci95.unwrap();
        assert!((hi - lo - 2.0 * Z95 * est.se.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_arms_give_zero() {
        let t = fixtures::from_cells(
            crate::data_model::TrialId::AC,
            &[(1, Arm::A, 0, 30), (1, Arm::A, 1, 70), (1, Arm::C, 0, 30), (1, Arm::C, 1, 70)],
        );
        for scale in [EffectScale::LogOddsRatio, EffectScale::RiskDifference, EffectScale::MeanDifference] {
            let e = weighted_contrast(&t, &WeightVector::uniform(200), scale).unwrap();
            assert_eq!(e.point, 0.0);
        }
    }

    #[test]
    fn degenerate_cell_is_named() {
        let t = fixtures::from_cells(
            crate::data_model::TrialId::AC,
            &[(1, Arm::A, 0, 30), (1, Arm::C, 0, 30), (1, Arm::C, 1, 70)],
        );
        match weighted_logodds(&t, &WeightVector::uniform(130)) {
            Err(Error::DegenerateCell(msg)) => assert!(msg.contains("arm A, non-event"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn risk_difference_closed_form() {
        let ac = fixtures::example_ac();
        let e = weighted_contrast(&ac, &WeightVector::uniform(1200), EffectScale::RiskDifference).unwrap();
        let (pa, pc) = (260.0 / 600.0, 120.0 / 600.0);
        assert!((e.point - (pa - pc)).abs() < 1e-14);
        let se = (pa * (1.0 - pa) / 600.0 + pc * (1.0 - pc) / 600.0f64).sqrt();
        assert!((e.se.unwrap() - se).abs() < 1e-12);
    }

    #[test]
    fn combine_rules() {
        let mk = |p, se| EffectEstimate::new(EffectScale::LogOddsRatio, Estimand::TrialMatched, p, se, "");
        assert!((anchored_combine(&mk(1.54, None), &mk(1.12, None)).unwrap().point - 0.42).abs() < 1e-12);
        let c = anchored_combine(&mk(0.0, Some(0.3)), &mk(0.0, Some(0.4))).unwrap();
        assert!((c.se.unwrap() - 0.5).abs() < 1e-15);
        let a = mk(1.2993, Some(0.2)).with_estimand(Estimand::ATO);
        let d = anchored_combine(&a, &a).unwrap();
        assert_eq!(d.point, 0.0);
        assert_eq!(d.estimand, Estimand::ATO);
        assert!((d.se.unwrap() - 0.2 * 2f64.sqrt()).abs() < 1e-15);
        let rd = EffectEstimate::new(EffectScale::RiskDifference, Estimand::ATO, 0.0, None, "");
        assert!(matches!(anchored_combine(&a, &rd), Err(Error::ScaleMismatch { .. })));
    }

    #[test]
    fn published_effect_routes() {
        let bc = summarize_ipd(&fixtures::example_bc());
        let e = published_effect(&bc).unwrap();
        assert!((e.point - 1.12).abs() < 0.005);
        assert!((e.se.unwrap() - (1.0 / 340.0 + 1.0 / 260.0 + 1.0 / 180.0 + 1.0 / 420.0f64).sqrt()).abs() < 1e-15);

        let mut same = bc.clone();
        same.arms[1].outcome = same.arms[0].outcome;
        assert_eq!(published_effect(&same).unwrap().point, 0.0);

        let mut pub_only = bc.clone();
        pub_only.published_effect = Some(PublishedEffect {
            scale: EffectScale::LogOddsRatio,
            point: 1.12,
            se: Some(0.1),
        });
        let e = published_effect(&pub_only).unwrap();
        assert_eq!((e.point, e.se), (1.12, Some(0.1)));

        let mut nothing = bc;
        nothing.arms.clear();
        assert!(published_effect(&nothing).is_err());
    }

    #[test]
    fn classic_maic_paradox_pair() {
        let ac = fixtures::example_ac();
        let bc = fixtures::example_bc();
        let agd_ac = summarize_ipd(&ac);
        let agd_bc = summarize_ipd(&bc);
        let wa = maic_weights(&ac.covariate_matrix(), &agd_bc.covariate_means).unwrap();
        let wb = maic_weights(&bc.covariate_matrix(), &agd_ac.covariate_means).unwrap();
        let ab = anchored_combine(&weighted_logodds(&ac, &wa).unwrap(), &published_effect(&agd_bc).unwrap()).unwrap();
        let ba = anchored_combine(&weighted_logodds(&bc, &wb).unwrap(), &published_effect(&agd_ac).unwrap()).unwrap();
        assert!((ab.point - 0.42).abs() <= 0.005, "{}", ab.point);
        assert!((ba.point - 0.40).abs() <= 0.005, "{}", ba.point);
    }

    fn swap_arms(t: &IpdTrial) -> IpdTrial {
        let mut s = t.clone();
        for r in &mut s.records {
            r.arm = if r.arm == Arm::A { Arm::C } else { Arm::A };
        }
        s
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn scale_invariance(c in prop::sample::select(vec![1e-6, 1.0, 1e6]), scale in prop::sample::select(vec![
            EffectScale::LogOddsRatio, EffectScale::RiskDifference, EffectScale::MeanDifference])) {
            let ac = fixtures::example_ac();
            let w = maic_weights(&ac.covariate_matrix(), &[0.55]).unwrap();
            let wc = w.scaled(c).unwrap();
            let a = weighted_contrast(&ac, &w, scale).unwrap();
            let b = weighted_contrast(&ac, &wc, scale).unwrap();
            prop_assert!((a.point - b.point).abs() <= 1e-10 * a.point.abs().max(1e-300));
            prop_assert!((a.se.unwrap() - b.se.unwrap()).abs() <= 1e-10 * a.se.unwrap());
        }

        #[test]
        fn logodds_routes_agree_and_swap_antisymmetric(seed in 0u64..10_000) {
            let mut rng = crate::rng::Philox::new(seed, 0);
            let ac = fixtures::example_ac();
            let w: Vec<f64> = (0..ac.n()).map(|_| 0.05 + rng.next_open01()).collect();
            let w = WeightVector::new(w, Normalization::Raw).unwrap();
            let direct = weighted_logodds(&ac, &w).unwrap().point;
            let fitted = weighted_contrast(&ac, &w, EffectScale::LogOddsRatio).unwrap().point;
            prop_assert!((direct - fitted).abs() < 1e-8);
            let swapped = swap_arms(&ac);
            prop_assert!((weighted_logodds(&swapped, &w).unwrap().point + direct).abs() < 1e-13);
            let rd = weighted_contrast(&ac, &w, EffectScale::RiskDifference).unwrap().point;
            let rd_s = weighted_contrast(&swapped, &w, EffectScale::RiskDifference).unwrap().point;
            prop_assert!((rd_s + rd).abs() < 1e-13);
        }
    }
}
