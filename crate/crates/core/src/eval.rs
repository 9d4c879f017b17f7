//! Regression metrics and the promotion gate decision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub n: usize,
}

/// Computes RMSE, MAE and R² in index order.
///
/// A constant target with a perfect fit scores `r2 = 0`; a constant target
/// with any error is rejected since R² is undefined there.
pub fn compute_metrics(y: &[f64], y_hat: &[f64]) -> Result<Metrics> {
    if y.len() != y_hat.len() {
        return Err(Error::validation(format!(
            "length mismatch: {} targets, {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::validation("cannot evaluate on zero rows"));
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite()) {
        return Err(Error::validation("targets and predictions must be finite"));
    }
    let n = y.len() as f64;
    let mut sum_y = 0.0;
    for v in y {
        sum_y += v;
    }
    let mean = sum_y / n;
    let (mut sse, mut sae, mut sst) = (0.0, 0.0, 0.0);
    for (t, p) in y.iter().zip(y_hat) {
        let e = t - p;
        sse += e * e;
        sae += e.abs();
        sst += (t - mean) * (t - mean);
    }
    let r2 = if sst == 0.0 {
        if sse == 0.0 {
            0.0
        } else {
            return Err(Error::validation(
                "degenerate target: constant target with nonzero error leaves r2 undefined",
            ));
        }
    } else {
        1.0 - sse / sst
    };
    Ok(Metrics {
        rmse: (sse / n).sqrt(),
        mae: sae / n,
        r2,
        n: y.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Relative slack allowed over the predecessor's RMSE.
    pub epsilon: f64,
    /// Multiplier on the candidate's own training-snapshot RMSE when there is no predecessor.
    pub abs_factor: f64,
    /// Fixed RMSE ceiling used instead of `abs_factor` when set.
    pub abs_threshold: Option<f64>,
    pub abs_floor: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            abs_factor: 1.05,
            abs_threshold: None,
            abs_floor: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub snapshot: String,
    pub candidate_rmse: f64,
    /// Predecessor RMSE, or `None` when compared against an absolute threshold.
    pub baseline_rmse: Option<f64>,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub passed: bool,
    pub mode: String,
    pub comparisons: Vec<Comparison>,
    pub reason: String,
}

/// Candidate must not be worse than the predecessor (beyond `epsilon`) on
/// every snapshot both were evaluated on. `pairs` is `(snapshot, candidate, predecessor)`.
pub fn gate_against_predecessor(pairs: &[(String, f64, f64)], cfg: &GateConfig) -> Result<GateDecision> {
    if pairs.is_empty() {
        return Err(Error::Inconclusive(
            "candidate and predecessor share no evaluated snapshot".into(),
        ));
    }
    let comparisons: Vec<Comparison> = pairs
        .iter()
        .map(|(snap, cand, pred)| {
            let threshold = pred * (1.0 + cfg.epsilon);
            Comparison {
                snapshot: snap.clone(),
                candidate_rmse: *cand,
                baseline_rmse: Some(*pred),
                threshold,
                passed: *cand <= threshold,
            }
        })
        .collect();
    let failed: Vec<&str> = comparisons
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.snapshot.as_str())
        .collect();
    let passed = failed.is_empty();
    let reason = if passed {
        format!("no regression on {} shared snapshot(s)", comparisons.len())
    } else {
        format!("regression on {}", failed.join(", "))
    };
    Ok(GateDecision {
        passed,
        mode: "predecessor".into(),
        comparisons,
        reason,
    })
}

/// Threshold for a first version. `own_train_rmse` is the candidate's RMSE
/// on its training snapshot.
pub fn absolute_threshold(cfg: &GateConfig, own_train_rmse: f64) -> f64 {
    match cfg.abs_threshold {
        Some(t) => t,
        None => (cfg.abs_factor * own_train_rmse).max(cfg.abs_floor),
    }
}

/// `results` is `(snapshot, candidate rmse)` across the evaluation scope.
pub fn gate_absolute(results: &[(String, f64)], threshold: f64) -> Result<GateDecision> {
    if results.is_empty() {
        return Err(Error::Inconclusive("no snapshot could be evaluated".into()));
    }
    let comparisons: Vec<Comparison> = results
        .iter()
        .map(|(snap, rmse)| Comparison {
            snapshot: snap.clone(),
            candidate_rmse: *rmse,
            baseline_rmse: None,
            threshold,
            passed: *rmse <= threshold,
        })
        .collect();
    let passed = comparisons.iter().all(|c| c.passed);
    let reason = if passed {
        format!("rmse within {threshold} on every snapshot")
    } else {
        format!("rmse exceeds {threshold}")
    };
    Ok(GateDecision {
        passed,
        mode: "absolute".into(),
        comparisons,
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        let m = compute_metrics(&[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m.rmse, 3.5355339059327378);
        assert_eq!(m.mae, 3.5);
        let perfect = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((perfect.rmse, perfect.mae, perfect.r2), (0.0, 0.0, 1.0));
    }

    #[test]
    fn constant_target() {
        let m = compute_metrics(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(m.r2, 0.0);
        let err = compute_metrics(&[2.0, 2.0], &[2.0, 2.5]).unwrap_err();
        assert!(err.to_string().contains("degenerate target"));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(compute_metrics(&[f64::NAN, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gate_modes() {
        let cfg = GateConfig::default();
        let pass = gate_against_predecessor(&[("s1".into(), 0.5, 0.5)], &cfg).unwrap();
        assert!(pass.passed);
        let fail = gate_against_predecessor(
            &[("s1".into(), 0.4, 0.5), ("s2".into(), 0.6, 0.5)],
            &cfg,
        )
        .unwrap();
        assert!(!fail.passed);
        assert!(fail.reason.contains("s2"));
        let slack = GateConfig { epsilon: 0.25, ..cfg };
        assert!(gate_against_predecessor(&[("s2".into(), 0.6, 0.5)], &slack).unwrap().passed);
        assert!(matches!(
            gate_against_predecessor(&[], &cfg),
            Err(Error::Inconclusive(_))
        ));

        assert_eq!(absolute_threshold(&cfg, 2.0), 2.1);
        assert_eq!(absolute_threshold(&cfg, 0.0), 1e-9);
        let fixed = GateConfig { abs_threshold: Some(0.3), ..cfg };
        assert_eq!(absolute_threshold(&fixed, 2.0), 0.3);
        let abs = gate_absolute(&[("a".into(), 0.2), ("b".into(), 0.31)], 0.3).unwrap();
        assert!(!abs.passed);
        assert!(gate_absolute(&[], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn metric_invariants(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..60)) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(m) = compute_metrics(&y, &p) {
                prop_assert!(m.rmse >= 0.0);
                prop_assert!(m.mae >= 0.0);
                prop_assert!(m.mae <= m.rmse * (1.0 + 1e-12) + 1e-12);
                prop_assert!(m.r2 <= 1.0);
            }
        }

        #[test]
        fn perfect_prediction_scores_zero(y in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let m = compute_metrics(&y, &y).unwrap();
            prop_assert_eq!(m.rmse, 0.0);
            prop_assert_eq!(m.mae, 0.0);
        }
    }
}
