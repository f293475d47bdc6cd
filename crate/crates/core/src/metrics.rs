//! Closed- and open-set evaluation: thresholded rejection, per-shot accuracy,
//! open-set F-measure, FPR at 95% TPR, detection error and AUROC.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{Shot, ShotSplit};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEFAULT_THRESHOLD: f64 = 0.1;
/// Operating point of the detection metrics.
pub const TARGET_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Class(usize),
    Reject,
}

/// Ground truth of a test sample for the open-set F-measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Truth {
    Known(usize),
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenSetPolicy {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl Default for OpenSetPolicy {
    fn default() -> Self {
        OpenSetPolicy {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl OpenSetPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "openset.threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Max-subtracted softmax in `f64`.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Largest softmax probability: the confidence that a sample is known.
pub fn confidence<T: Real>(logits: &[T]) -> f64 {
    softmax(logits).into_iter().fold(0.0, f64::max)
}

/// Arg-max class (lowest index on ties) unless its probability is below `tau`.
pub fn predict_with_reject<T: Real>(logits: &[T], tau: f64) -> Prediction {
    let p = softmax(logits);
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    if p.is_empty() || p[best] < tau {
        Prediction::Reject
    } else {
        Prediction::Class(best)
    }
}

/// Accuracy per shot bucket; `None` where a bucket has no test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub overall: Option<f64>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub many: usize,
    pub medium: usize,
    pub few: usize,
}

fn ratio(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hits as f64 / n as f64)
}

/// Per-bucket accuracy over known-class test samples; `Reject` is wrong.
pub fn evaluate_splits(predictions: &[Prediction], truth: &[usize], split: &ShotSplit) -> Result<SplitAccuracy> {
    if predictions.len() != truth.len() {
        return Err(Error::shape("evaluate_splits", &[&[predictions.len()], &[truth.len()]]));
    }
    let mut n = [0usize; 3];
    let mut hit = [0usize; 3];
    for (&p, &t) in predictions.iter().zip(truth) {
        let slot = match split.shot_of(t) {
            Some(Shot::Many) => 0,
            Some(Shot::Medium) => 1,
            Some(Shot::Few) => 2,
            None => return Err(Error::invalid(format!("test label {t} belongs to no shot split"))),
        };
        n[slot] += 1;
        if p == Prediction::Class(t) {
            hit[slot] += 1;
        }
    }
    Ok(SplitAccuracy {
        overall: ratio(hit.iter().sum(), n.iter().sum()),
        many: ratio(hit[0], n[0]),
        medium: ratio(hit[1], n[1]),
        few: ratio(hit[2], n[2]),
        counts: SplitCounts {
            many: n[0],
            medium: n[1],
            few: n[2],
        },
    })
}

/// Micro-averaged known-class F-measure. Precision counts every known-class
/// prediction (open samples included); recall counts every known sample.
pub fn open_f_measure(predictions: &[Prediction], truth: &[Truth]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::shape("open_f_measure", &[&[predictions.len()], &[truth.len()]]));
    }
    let mut correct = 0usize;
    let mut predicted = 0usize;
    let mut known = 0usize;
    for (&p, &t) in predictions.iter().zip(truth) {
        if let Prediction::Class(c) = p {
            predicted += 1;
            if t == Truth::Known(c) {
                correct += 1;
            }
        }
        if matches!(t, Truth::Known(_)) {
            known += 1;
        }
    }
    let precision = if predicted > 0 {
        correct as f64 / predicted as f64
    } else {
        0.0
    };
    let recall = if known > 0 { correct as f64 / known as f64 } else { 0.0 };
    Ok(if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionCurves {
    /// Largest threshold keeping at least 95% of known samples.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr_at_95tpr: f64,
    pub detection_error: f64,
    pub auroc: f64,
}

fn sorted_desc(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Number of entries of a descending list that are `>= t`.
fn count_at_least(desc: &[f64], t: f64) -> usize {
    desc.partition_point(|&x| x >= t)
}

/// Known samples are positives; a sample is accepted when its score is `>= t`.
pub fn detection_curves(known: &[f64], open: &[f64]) -> Result<DetectionCurves> {
    if known.is_empty() || open.is_empty() {
        return Err(Error::invalid("detection curves need known and open scores"));
    }
    if known.iter().chain(open).any(|x| x.is_nan()) {
        return Err(Error::invalid("detection scores must not be NaN"));
    }
    let k = sorted_desc(known);
    let o = sorted_desc(open);
    let (nk, no) = (k.len() as f64, o.len() as f64);

    let mut threshold = k[k.len() - 1];
    for (i, &t) in k.iter().enumerate() {
        if i + 1 < k.len() && k[i + 1] == t {
            continue;
        }
        if count_at_least(&k, t) as f64 / nk >= TARGET_TPR {
            threshold = t;
            break;
        }
    }
    let tpr = count_at_least(&k, threshold) as f64 / nk;
    let fpr = count_at_least(&o, threshold) as f64 / no;

    // Trapezoidal ROC over all distinct thresholds, descending.
    let mut all: Vec<f64> = k.iter().chain(&o).copied().collect();
    all.sort_by(|a, b| b.total_cmp(a));
    all.dedup();
    let (mut area, mut prev_tpr, mut prev_fpr) = (0.0, 0.0, 0.0);
    for t in all {
        let tp = count_at_least(&k, t) as f64 / nk;
        let fp = count_at_least(&o, t) as f64 / no;
        area += (fp - prev_fpr) * (tp + prev_tpr) / 2.0;
        prev_tpr = tp;
        prev_fpr = fp;
    }

    Ok(DetectionCurves {
        threshold,
        tpr,
        fpr_at_95tpr: fpr,
        detection_error: 0.5 * (1.0 - tpr) + 0.5 * fpr,
        auroc: area,
    })
}

/// Full open-set evaluation of one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub overall_acc: Option<f64>,
    pub many_acc: Option<f64>,
    pub medium_acc: Option<f64>,
    pub few_acc: Option<f64>,
    pub f_measure: f64,
    pub fpr_at_95tpr: Option<f64>,
    pub detection_error: Option<f64>,
    pub auroc: Option<f64>,
    pub known_samples: usize,
    pub open_samples: usize,
    pub counts: SplitCounts,
}

/// Scores logits rows (`classes` per sample) against labels; labels in
/// `known` are known classes, everything else is open.
pub fn evaluate<T: Real>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
    known: &BTreeSet<usize>,
    split: &ShotSplit,
    policy: &OpenSetPolicy,
) -> Result<EvalReport> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::shape("evaluate", &[&[logits.len()], &[labels.len(), classes]]));
    }
    let mut preds = Vec::with_capacity(labels.len());
    let mut truth = Vec::with_capacity(labels.len());
    let mut known_preds = Vec::new();
    let mut known_truth = Vec::new();
    let mut known_scores = Vec::new();
    let mut open_scores = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let p = predict_with_reject(row, policy.threshold);
        let s = confidence(row);
        preds.push(p);
        if known.contains(&l) {
            truth.push(Truth::Known(l));
            known_preds.push(p);
            known_truth.push(l);
            known_scores.push(s);
        } else {
            truth.push(Truth::Open);
            open_scores.push(s);
        }
    }
    let acc = evaluate_splits(&known_preds, &known_truth, split)?;
    let curves = if !known_scores.is_empty() && !open_scores.is_empty() {
        Some(detection_curves(&known_scores, &open_scores)?)
    } else {
        None
    };
    Ok(EvalReport {
        threshold: policy.threshold,
        overall_acc: acc.overall,
        many_acc: acc.many,
        medium_acc: acc.medium,
        few_acc: acc.few,
        f_measure: open_f_measure(&preds, &truth)?,
        fpr_at_95tpr: curves.map(|c| c.fpr_at_95tpr),
        detection_error: curves.map(|c| c.detection_error),
        auroc: curves.map(|c| c.auroc),
        known_samples: known_scores.len(),
        open_samples: open_scores.len(),
        counts: acc.counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn logits_for(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn reject_examples() {
        assert_eq!(
            predict_with_reject(&logits_for(&[0.05, 0.05, 0.9]), 0.1),
            Prediction::Class(2)
        );
        assert_eq!(predict_with_reject(&[0.0f64; 20], 0.1), Prediction::Reject);
        assert_eq!(predict_with_reject(&[0.0f64; 20], 0.0), Prediction::Class(0));
        assert_eq!(predict_with_reject(&[1.0f32, 3.0, 3.0], 0.0), Prediction::Class(1));
    }

    fn split() -> ShotSplit {
        ShotSplit {
            many: [0].into(),
            medium: [].into(),
            few: [1].into(),
        }
    }

    #[test]
    fn split_examples() {
        let truth = [0, 0, 1, 1, 1, 1];
        let all: Vec<Prediction> = truth.iter().map(|&t| Prediction::Class(t)).collect();
        let a = evaluate_splits(&all, &truth, &split()).unwrap();
        assert_eq!((a.many, a.few, a.overall), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(a.medium, None);
        let rej = vec![Prediction::Reject; 6];
        let a = evaluate_splits(&rej, &truth, &split()).unwrap();
        assert_eq!((a.many, a.few), (Some(0.0), Some(0.0)));
        let mut one_off = all.clone();
        one_off[3] = Prediction::Class(0);
        let a = evaluate_splits(&one_off, &truth, &split()).unwrap();
        assert_eq!(a.few, Some(0.75));
        assert!(evaluate_splits(&[Prediction::Reject], &[7], &split()).is_err());
    }

    #[test]
    fn f_measure_examples() {
        use Prediction::*;
        let truth = [Truth::Known(0), Truth::Known(0), Truth::Known(1), Truth::Open];
        let f = open_f_measure(&[Class(0), Reject, Class(1), Class(0)], &truth).unwrap();
        assert_relative_eq!(f, 2.0 / 3.0, epsilon = 1e-15);
        let f = open_f_measure(&[Class(0), Class(0), Class(1), Reject], &truth).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(open_f_measure(&[Reject; 4], &truth).unwrap(), 0.0);
    }

    #[test]
    fn detection_examples() {
        let c = detection_curves(&[0.9, 0.8, 0.7, 0.6], &[0.65, 0.3]).unwrap();
        assert_eq!(c.threshold, 0.6);
        assert_eq!(c.tpr, 1.0);
        assert_eq!(c.fpr_at_95tpr, 0.5);
        assert_eq!(c.detection_error, 0.25);
        let c = detection_curves(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_eq!((c.auroc, c.fpr_at_95tpr), (1.0, 0.0));
        let c = detection_curves(&[0.5, 0.5, 0.3], &[0.5, 0.5, 0.3]).unwrap();
        assert_relative_eq!(c.auroc, 0.5, epsilon = 1e-15);
        assert!(detection_curves(&[], &[0.1]).is_err());
    }

    #[test]
    fn evaluate_counts_everything() {
        let logits = [5.0, 0.0, 0.0, 5.0, 0.0, 0.0];
        let known: BTreeSet<usize> = [0, 1].into();
        let r = evaluate(&logits, 2, &[0, 1, 2], &known, &split(), &OpenSetPolicy::default()).unwrap();
        assert_eq!((r.known_samples, r.open_samples), (2, 1));
        assert_eq!(r.overall_acc, Some(1.0));
        assert_eq!(r.auroc, Some(1.0));
    }
}
