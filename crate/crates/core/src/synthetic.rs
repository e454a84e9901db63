//! Planted-rule synthetic corpus: labels are a fixed function of which
//! characters occur in each drug's input string, independent of drug ids.
//!
//! * binary, undirected: `1` iff either drug contains `N`;
//! * multiclass (4 classes), directed: `1 + 2*[N in a] + [O in b]`.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PairDataset, PairRecord};
use crate::error::{Error, Result};
use crate::heads::{LabelKind, LabelSpace};

const BACKBONE: &[u8] = b"CCCCCcccc()=1S";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub drugs: usize,
    pub pairs: usize,
    /// Probability that a drug carries each marker character.
    #[serde(default = "default_marker_prob")]
    pub marker_prob: f64,
    pub seed: u64,
}

fn default_marker_prob() -> f64 {
    0.3
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            drugs: 80,
            pairs: 500,
            marker_prob: default_marker_prob(),
            seed: 0,
        }
    }
}

/// The planted label of an ordered pair of raw strings.
pub fn planted_label(space: &LabelSpace, a: &str, b: &str) -> i64 {
    match space.kind {
        LabelKind::Binary => (a.contains('N') || b.contains('N')) as i64,
        LabelKind::Multiclass => 1 + 2 * a.contains('N') as i64 + b.contains('O') as i64,
    }
}

fn drug_string(rng: &mut ChaCha8Rng, marker_prob: f64) -> String {
    let len = rng.random_range(6..=14);
    let mut s: Vec<u8> = (0..len).map(|_| BACKBONE[rng.random_range(0..BACKBONE.len())]).collect();
    for marker in *b"NO" {
        if rng.random::<f64>() < marker_prob {
            let at = rng.random_range(0..=s.len());
            s.insert(at, marker);
        }
    }
    String::from_utf8(s).expect("ascii")
}

/// Generates the corpus for `space`. Binary spaces are undirected and
/// multiclass spaces must have exactly 4 classes.
pub fn generate(spec: &SyntheticSpec, space: LabelSpace) -> Result<PairDataset> {
    if space.kind == LabelKind::Multiclass && space.classes != 4 {
        return Err(Error::Config("the planted multiclass rule has 4 classes".into()));
    }
    if spec.drugs < 2 {
        return Err(Error::Config("need at least two drugs".into()));
    }
    let n = spec.drugs;
    let possible = if space.directed { n * (n - 1) } else { n * (n - 1) / 2 };
    if spec.pairs > possible {
        return Err(Error::Config(format!(
            "{} pairs requested but {n} drugs only admit {possible}",
            spec.pairs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut raws = Vec::with_capacity(n);
    let mut seen = BTreeSet::new();
    while raws.len() < n {
        let s = drug_string(&mut rng, spec.marker_prob);
        if seen.insert(s.clone()) {
            raws.push(s);
        }
    }
    let ids: Vec<String> = (0..n).map(|i| format!("D{i:03}")).collect();
    // enumerate the admissible pairs and sample without replacement
    let mut all = Vec::with_capacity(possible);
    for i in 0..n {
        for j in 0..n {
            if i != j && (space.directed || i < j) {
                all.push((i, j));
            }
        }
    }
    let mut chosen: Vec<usize> = sample(&mut rng, all.len(), spec.pairs).into_vec();
    chosen.sort_unstable();
    let records = chosen
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            let (i, j) = all[c];
            PairRecord {
                pair_id: (k + 1).to_string(),
                drug_a: ids[i].clone(),
                drug_b: ids[j].clone(),
                input_a: raws[i].clone(),
                input_b: raws[j].clone(),
                label: planted_label(&space, &raws[i], &raws[j]),
            }
        })
        .collect();
    PairDataset::new(records, space)
}

/// Share of the most frequent label among `labels`.
pub fn majority_baseline(labels: &[i64]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    counts.values().max().copied().unwrap_or(0) as f64 / labels.len().max(1) as f64
}
