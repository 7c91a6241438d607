//! Label binning and the evaluation battery: accuracy, per-class
//! precision/recall/F1, confusion matrix, Pearson correlation, RMSE, nRMSE.
//!
//! Confusion matrices are indexed `[predicted][actual]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskKind;

/// Number of equal-width bins used for arousal and valence on `[-1, 1]`.
pub const AFFECT_BINS: usize = 10;
const AFFECT_WIDTH: f64 = 2.0 / AFFECT_BINS as f64;

/// Maps a raw label to its class index.
pub fn label_to_class(raw: f64, task: TaskKind) -> Result<usize> {
    let range = |what: &str| Error::Range {
        what: format!("{task} label ({what})"),
        value: raw,
    };
    match task {
        TaskKind::Arousal | TaskKind::Valence => {
            if !(-1.0..=1.0).contains(&raw) {
                return Err(range("expected [-1, 1]"));
            }
            Ok((((raw + 1.0) / AFFECT_WIDTH).floor() as usize).min(AFFECT_BINS - 1))
        }
        TaskKind::DepressionSeverity | TaskKind::DepressionBinary => {
            let max = task.n_classes() - 1;
            if raw.fract() != 0.0 || !(0.0..=max as f64).contains(&raw) {
                return Err(range(&format!("expected an integer in 0..={max}")));
            }
            Ok(raw as usize)
        }
    }
}

/// Value a class stands for when mapped back to the label scale.
pub fn class_center(class: usize, task: TaskKind) -> f64 {
    match task {
        TaskKind::Arousal | TaskKind::Valence => -1.0 + (class as f64 + 0.5) * AFFECT_WIDTH,
        TaskKind::DepressionSeverity | TaskKind::DepressionBinary => class as f64,
    }
}

pub fn bin_centers(task: TaskKind) -> Vec<f64> {
    (0..task.n_classes()).map(|c| class_center(c, task)).collect()
}

/// Width of the label scale used to normalize RMSE.
pub fn label_range(task: TaskKind) -> f64 {
    match task {
        TaskKind::Arousal | TaskKind::Valence => 2.0,
        TaskKind::DepressionSeverity => 23.0,
        TaskKind::DepressionBinary => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedLabels {
    pub classes: Vec<usize>,
    pub centers: Vec<f64>,
}

pub fn bin_labels(raw: &[f64], task: TaskKind) -> Result<BinnedLabels> {
    let classes = raw.iter().map(|&r| label_to_class(r, task)).collect::<Result<Vec<_>>>()?;
    let centers = classes.iter().map(|&c| class_center(c, task)).collect();
    Ok(BinnedLabels { classes, centers })
}

pub fn nrmse(rmse: f64, range: f64) -> f64 {
    rmse / range
}

pub fn rmse(predicted: &[f64], actual: &[f64]) -> f64 {
    let n = predicted.len() as f64;
    (predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / n).sqrt()
}

/// Sample Pearson correlation; `None` when either sequence is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// How a softmax output becomes a value on the label scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueMode {
    /// Center of the argmax class.
    #[default]
    Argmax,
    /// Probability-weighted mean of class centers.
    Expectation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `null` when undefined (constant predicted or actual values).
    pub pcc: Option<f64>,
    pub rmse: f64,
    pub nrmse: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[predicted][actual]`
    pub confusion: Vec<Vec<u64>>,
    /// Notes about degenerate quantities that were reported as 0 or null.
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionSummary {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub flags: Vec<String>,
}

fn ratio(num: u64, den: u64, flag: impl FnOnce() -> String, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(flag());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and per-class rates from a square `[predicted][actual]` matrix.
pub fn summarize_confusion(confusion: &[Vec<u64>]) -> Result<ConfusionSummary> {
    let n = confusion.len();
    if n == 0 || confusion.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("confusion matrix must be square and non-empty"));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let trace: u64 = (0..n).map(|c| confusion[c][c]).sum();
    let mut flags = Vec::new();
    let per_class = (0..n)
        .map(|c| {
            let tp = confusion[c][c];
            let row: u64 = confusion[c].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, row, || format!("class {c}: precision has no predictions"), &mut flags);
            let recall = ratio(tp, col, || format!("class {c}: recall has no examples"), &mut flags);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    Ok(ConfusionSummary {
        accuracy: trace as f64 / total as f64,
        per_class,
        flags,
    })
}

/// One prediction: the class probabilities from the softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

pub fn compute_metrics(predicted: &[Prediction], actual: &[usize], task: TaskKind, mode: ValueMode) -> Result<MetricsReport> {
    if predicted.len() != actual.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let n = task.n_classes();
    let mut confusion = vec![vec![0u64; n]; n];
    for (p, &a) in predicted.iter().zip(actual) {
        if p.class >= n || a >= n {
            return Err(Error::invalid(format!("class index out of range for {task}")));
        }
        confusion[p.class][a] += 1;
    }
    let summary = summarize_confusion(&confusion)?;
    let centers = bin_centers(task);
    let pred_values: Vec<f64> = predicted
        .iter()
        .map(|p| match mode {
            ValueMode::Argmax => centers[p.class],
            ValueMode::Expectation => p.probs.iter().zip(&centers).map(|(q, c)| q * c).sum(),
        })
        .collect();
    let actual_values: Vec<f64> = actual.iter().map(|&a| centers[a]).collect();
    let mut flags = summary.flags;
    let pcc = pearson(&pred_values, &actual_values);
    if pcc.is_none() {
        flags.push("pcc undefined: constant predicted or actual values".into());
    }
    let rmse = rmse(&pred_values, &actual_values);
    Ok(MetricsReport {
        accuracy: summary.accuracy,
        pcc,
        rmse,
        nrmse: nrmse(rmse, label_range(task)),
        per_class: summary.per_class,
        confusion,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn argmax_preds(classes: &[usize], n: usize) -> Vec<Prediction> {
        classes
            .iter()
            .map(|&c| {
                let mut probs = vec![0.0; n];
                probs[c] = 1.0;
                Prediction { class: c, probs }
            })
            .collect()
    }

    #[test]
    fn affect_bins() {
        let t = TaskKind::Arousal;
        assert_eq!(label_to_class(-1.0, t).unwrap(), 0);
        assert_eq!(label_to_class(1.0, t).unwrap(), 9);
        assert_eq!(label_to_class(0.0, t).unwrap(), 5);
        assert!((class_center(3, t) + 0.3).abs() < 1e-12);
        assert!(matches!(label_to_class(1.01, t), Err(Error::Range { .. })));
        let b = bin_labels(&[0.42, -0.99], TaskKind::Valence).unwrap();
        assert_eq!(b.classes, vec![7, 0]);
    }

    #[test]
    fn severity_identity() {
        let b = bin_labels(&[23.0, 0.0], TaskKind::DepressionSeverity).unwrap();
        assert_eq!(b.classes, vec![23, 0]);
        assert_eq!(b.centers, vec![23.0, 0.0]);
        assert!(label_to_class(24.0, TaskKind::DepressionSeverity).is_err());
        assert!(label_to_class(2.5, TaskKind::DepressionSeverity).is_err());
        assert!(label_to_class(2.0, TaskKind::DepressionBinary).is_err());
    }

    #[test]
    fn perfect_prediction() {
        let classes = [0, 3, 7, 9, 2];
        let r = compute_metrics(&argmax_preds(&classes, 10), &classes, TaskKind::Arousal, ValueMode::Argmax).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!((r.pcc.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.rmse, 0.0);
    }

    #[test]
    fn constant_prediction_pcc_is_null() {
        let r = compute_metrics(&argmax_preds(&[1, 1, 1], 2), &[0, 1, 1], TaskKind::DepressionBinary, ValueMode::Argmax)
            .unwrap();
        assert_eq!(r.pcc, None);
        assert!(r.flags.iter().any(|f| f.contains("pcc")));
        // class 0 never predicted
        assert_eq!(r.per_class[0].precision, 0.0);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["pcc"].is_null());
    }

    #[test]
    fn expectation_mode() {
        let p = vec![Prediction {
            class: 0,
            probs: vec![0.5, 0.5],
        }];
        let r = compute_metrics(&p, &[1], TaskKind::DepressionBinary, ValueMode::Expectation).unwrap();
        assert!((r.rmse - 0.5).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(compute_metrics(&argmax_preds(&[0], 2), &[0, 1], TaskKind::DepressionBinary, ValueMode::Argmax).is_err());
    }

    proptest! {
        #[test]
        fn pcc_affine_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 3..40),
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
            seed in 0u64..1000,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.3 + ((i as u64 * 31 + seed) % 17) as f64).collect();
            if let Some(r) = pearson(&xs, &ys) {
                let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                let r2 = pearson(&xt, &ys).unwrap();
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }

        #[test]
        fn accuracy_is_trace_over_total(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (pred, act): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = compute_metrics(&argmax_preds(&pred, 24), &act, TaskKind::DepressionSeverity, ValueMode::Argmax).unwrap();
            let trace: u64 = (0..24).map(|c| r.confusion[c][c]).sum();
            let total: u64 = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total as usize, pred.len());
            prop_assert!((r.accuracy - trace as f64 / total as f64).abs() < 1e-15);
            for m in &r.per_class {
                prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall));
                if m.precision + m.recall > 0.0 {
                    let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                    prop_assert!((m.f1 - h).abs() < 1e-15);
                }
            }
        }
    }
}
