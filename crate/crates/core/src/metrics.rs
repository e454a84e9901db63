//! Micro-averaged classification metrics.
//!
//! Multiclass AUROC and AUPR pool every `(instance, class)` pair into one
//! one-vs-rest set scored by `p(class)`; binary batches use `p(1)`. Binary
//! decisions threshold at 0.5 with ties going to class 1. AUROC gives half
//! credit to tied positive/negative scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{LabelKind, LabelSpace, Prediction};

/// Predictions paired with labels in the space's own labelling.
#[derive(Clone, Copy, Debug)]
pub struct ScoredBatch<'a> {
    pub preds: &'a [Prediction],
    pub labels: &'a [i64],
    pub space: LabelSpace,
}

impl<'a> ScoredBatch<'a> {
    pub fn new(preds: &'a [Prediction], labels: &'a [i64], space: LabelSpace) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let width = space.output_width();
        for (i, (p, &y)) in preds.iter().zip(labels).enumerate() {
            if p.probs.len() != width {
                return Err(Error::InvalidArgument(format!(
                    "prediction {i} has {} entries, expected {width}",
                    p.probs.len()
                )));
            }
            if p.probs.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::InvalidArgument(format!("prediction {i} is not a probability")));
            }
            if space.kind == LabelKind::Multiclass && (p.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("prediction {i} does not sum to one")));
            }
            if !space.contains(y) {
                return Err(Error::InvalidLabel {
                    label: y.to_string(),
                    location: format!("batch index {i}"),
                    reason: space.describe(),
                });
            }
        }
        Ok(Self { preds, labels, space })
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    fn nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput(format!("{what} of an empty batch")));
        }
        Ok(())
    }

    fn classes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.preds.iter().zip(self.labels).map(|(p, &y)| {
            (
                p.argmax(),
                self.space.class_index(y).expect("labels checked at construction"),
            )
        })
    }

    /// Pooled one-vs-rest `(score, is_positive)` set.
    pub fn pooled(&self) -> (Vec<f64>, Vec<bool>) {
        let mut scores = Vec::new();
        let mut pos = Vec::new();
        for (p, &y) in self.preds.iter().zip(self.labels) {
            let class = self.space.class_index(y).expect("labels checked at construction");
            match self.space.kind {
                LabelKind::Binary => {
                    scores.push(p.probs[0]);
                    pos.push(class == 1);
                }
                LabelKind::Multiclass => {
                    for (c, s) in p.probs.iter().enumerate() {
                        scores.push(*s);
                        pos.push(c == class);
                    }
                }
            }
        }
        (scores, pos)
    }
}

/// Indices sorted by descending score; ties keep input order.
fn desc_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// `P(s_pos > s_neg) + P(tie) / 2` via tie-averaged ranks.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| positive[k]).count();
        rank_sum += mean_rank * pos_in_group as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Average precision over tie groups: `sum_k (R_k - R_{k-1}) P_k`.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one positive".into()));
    }
    let idx = desc_order(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if positive[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

pub fn micro_accuracy(b: &ScoredBatch<'_>) -> Result<f64> {
    b.nonempty("accuracy")?;
    let correct = b.classes().filter(|(p, y)| p == y).count();
    Ok(correct as f64 / b.len() as f64)
}

pub fn micro_auroc(b: &ScoredBatch<'_>) -> Result<f64> {
    let (s, p) = b.pooled();
    auroc(&s, &p)
}

pub fn micro_aupr(b: &ScoredBatch<'_>) -> Result<f64> {
    let (s, p) = b.pooled();
    average_precision(&s, &p)
}

/// Binary: F1 of the positive class. Multiclass: F1 over pooled
/// one-vs-rest decisions at the argmax, which coincides with accuracy.
/// Returns the value and whether it was defined by convention (no
/// predicted and no true positives, scored 1.0).
pub fn micro_f1(b: &ScoredBatch<'_>) -> Result<(f64, bool)> {
    b.nonempty("F1")?;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (pred, truth) in b.classes() {
        match b.space.kind {
            LabelKind::Binary => match (pred, truth) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fne += 1,
                _ => {}
            },
            LabelKind::Multiclass => {
                if pred == truth {
                    tp += 1;
                } else {
                    fp += 1;
                    fne += 1;
                }
            }
        }
    }
    let den = 2 * tp + fp + fne;
    if den == 0 {
        return Ok((1.0, true));
    }
    Ok(((2 * tp) as f64 / den as f64, false))
}

/// Multiclass Matthews correlation (`R_K`) from the confusion matrix.
/// Returns `(0, true)` when the denominator vanishes.
pub fn mcc(b: &ScoredBatch<'_>) -> Result<(f64, bool)> {
    b.nonempty("MCC")?;
    let k = b.space.classes;
    let mut predicted = vec![0.0; k];
    let mut actual = vec![0.0; k];
    let mut correct = 0.0;
    for (p, y) in b.classes() {
        predicted[p] += 1.0;
        actual[y] += 1.0;
        if p == y {
            correct += 1.0;
        }
    }
    let s = b.len() as f64;
    let dot: f64 = predicted.iter().zip(&actual).map(|(p, t)| p * t).sum();
    let pp: f64 = predicted.iter().map(|p| p * p).sum();
    let tt: f64 = actual.iter().map(|t| t * t).sum();
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((correct * s - dot) / den, false))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// `None` when the pooled set holds a single class.
    pub auroc: Option<f64>,
    /// `None` when the pooled set holds no positive.
    pub aupr: Option<f64>,
    pub f1: f64,
    pub mcc: f64,
    pub n_instances: usize,
    pub n_classes: usize,
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// All metrics for one batch. Undefined ranking metrics become `None` with
/// a flag instead of failing the whole report.
pub fn report(b: &ScoredBatch<'_>) -> Result<MetricsReport> {
    let acc = micro_accuracy(b)?;
    let mut flags = Vec::new();
    let auroc = match micro_auroc(b) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(m)) => {
            flags.push(format!("auroc_undefined: {m}"));
            None
        }
        Err(e) => return Err(e),
    };
    let aupr = match micro_aupr(b) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(m)) => {
            flags.push(format!("aupr_undefined: {m}"));
            None
        }
        Err(e) => return Err(e),
    };
    let (f1, f1_conv) = micro_f1(b)?;
    if f1_conv {
        flags.push("f1_no_positives".into());
    }
    let (mcc, degenerate) = mcc(b)?;
    if degenerate {
        flags.push("mcc_degenerate".into());
    }
    Ok(MetricsReport {
        acc,
        auroc,
        aupr,
        f1,
        mcc,
        n_instances: b.len(),
        n_classes: b.space.classes,
        flags,
    })
}
