//! Label spaces, the affine task head and the cross-entropy objective.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear};
use crate::tensor::{ParamStore, Tensor};

pub const HEAD: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Binary,
    Multiclass,
}

/// Binary labels are `{0, 1}`; multiclass labels are `{1, ..., C}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub kind: LabelKind,
    /// Number of classes; always 2 for binary spaces.
    #[serde(default = "two")]
    pub classes: usize,
    #[serde(default)]
    pub directed: bool,
}

fn two() -> usize {
    2
}

impl LabelSpace {
    pub fn binary(directed: bool) -> Self {
        Self {
            kind: LabelKind::Binary,
            classes: 2,
            directed,
        }
    }

    pub fn multiclass(classes: usize, directed: bool) -> Result<Self> {
        let s = Self {
            kind: LabelKind::Multiclass,
            classes,
            directed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LabelKind::Binary if self.classes != 2 => Err(Error::Config(format!(
                "binary label space with {} classes",
                self.classes
            ))),
            LabelKind::Multiclass if self.classes < 2 => Err(Error::Config(format!(
                "multiclass label space needs at least 2 classes, got {}",
                self.classes
            ))),
            _ => Ok(()),
        }
    }

    /// Number of logits the head produces.
    pub fn output_width(&self) -> usize {
        match self.kind {
            LabelKind::Binary => 1,
            LabelKind::Multiclass => self.classes,
        }
    }

    pub fn contains(&self, label: i64) -> bool {
        match self.kind {
            LabelKind::Binary => label == 0 || label == 1,
            LabelKind::Multiclass => label >= 1 && label <= self.classes as i64,
        }
    }

    /// Zero-based class index of `label`.
    pub fn class_index(&self, label: i64) -> Result<usize> {
        if !self.contains(label) {
            return Err(Error::InvalidLabel {
                label: label.to_string(),
                location: "label space".into(),
                reason: self.describe(),
            });
        }
        Ok(match self.kind {
            LabelKind::Binary => label as usize,
            LabelKind::Multiclass => (label - 1) as usize,
        })
    }

    pub fn label_of(&self, class: usize) -> i64 {
        match self.kind {
            LabelKind::Binary => class as i64,
            LabelKind::Multiclass => class as i64 + 1,
        }
    }

    pub fn describe(&self) -> String {
        match self.kind {
            LabelKind::Binary => "expected 0 or 1".into(),
            LabelKind::Multiclass => format!("expected 1..={}", self.classes),
        }
    }
}

/// Binary: `[p(1)]`. Multiclass: `C` probabilities summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Full distribution over the label space (`[1 - p, p]` for binary).
    pub fn distribution(&self) -> Vec<f64> {
        if self.probs.len() == 1 {
            vec![1.0 - self.probs[0], self.probs[0]]
        } else {
            self.probs.clone()
        }
    }

    /// Predicted class index: binary thresholds at 0.5 with ties going to
    /// class 1; multiclass takes the first maximal entry.
    pub fn argmax(&self) -> usize {
        if self.probs.len() == 1 {
            (self.probs[0] >= 0.5) as usize
        } else {
            let mut best = 0;
            for (i, p) in self.probs.iter().enumerate() {
                if *p > self.probs[best] {
                    best = i;
                }
            }
            best
        }
    }
}

pub fn init_head(store: &mut ParamStore, space: &LabelSpace, d: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, HEAD, 2 * d, space.output_width(), rng);
}

pub fn head_logits_graph(g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
    linear(g, store, HEAD, z)
}

pub fn probs_from_logits(logits: &[f64], space: &LabelSpace) -> Result<Prediction> {
    if logits.len() != space.output_width() {
        return Err(Error::Config(format!(
            "{} logits for a label space with {} outputs",
            logits.len(),
            space.output_width()
        )));
    }
    let probs = match space.kind {
        LabelKind::Binary => vec![sigmoid(logits[0])],
        LabelKind::Multiclass => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
    };
    Ok(Prediction { probs })
}

/// Applies the head to a relation vector `z`.
pub fn predict(z: &[f64], store: &ParamStore, space: &LabelSpace) -> Result<Prediction> {
    let w = &store.get(&format!("{HEAD}.w"))?.tensor;
    if w.rows() != z.len() || w.cols() != space.output_width() {
        return Err(Error::Config(format!(
            "head is {}x{}, input has width {} and label space needs {} outputs",
            w.rows(),
            w.cols(),
            z.len(),
            space.output_width()
        )));
    }
    let mut g = Graph::new();
    let zv = g.constant(Tensor::row(z.to_vec()));
    let logits = head_logits_graph(&mut g, store, zv)?;
    probs_from_logits(g.value(logits).data(), space)
}

/// Per-instance negative log-likelihood node for one `1 x out` logit row.
pub fn loss_graph(g: &mut Graph, logits: Var, class: usize, space: &LabelSpace) -> Result<Var> {
    match space.kind {
        LabelKind::Binary => g.sigmoid_bce(logits, class as f64),
        LabelKind::Multiclass => g.softmax_cross_entropy(logits, class),
    }
}

/// Summed cross-entropy of a batch of logit rows against labels in the
/// space's own labelling (`{0,1}` or `{1..C}`).
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[i64], space: &LabelSpace) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("cross-entropy of an empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, (row, &label)) in logits.iter().zip(labels).enumerate() {
        let class = space.class_index(label).map_err(|_| Error::InvalidLabel {
            label: label.to_string(),
            location: format!("batch index {i}"),
            reason: space.describe(),
        })?;
        if row.len() != space.output_width() {
            return Err(Error::Config(format!(
                "row {i} has {} logits, expected {}",
                row.len(),
                space.output_width()
            )));
        }
        total += match space.kind {
            LabelKind::Binary => {
                if class == 1 {
                    softplus(-row[0])
                } else {
                    softplus(row[0])
                }
            }
            LabelKind::Multiclass => {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[class]
            }
        };
    }
    Ok(total)
}
