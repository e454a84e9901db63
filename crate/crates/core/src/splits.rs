//! Overlap-controlled train/test splits.
//!
//! * `S1`: both drugs of every test pair appear in training, and no training
//!   pair covers the same two drugs in either order under any label.
//! * `S2`: exactly one drug of every test pair appears in training.
//! * `S3`: neither drug of any test pair appears in training.
//!
//! Generation and validation are separate code paths; the validator only
//! recomputes sets from the dataset and the manifest's pair lists.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{train_drug_set, PairDataset, PairRecord};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitKind {
    #[serde(rename = "s1")]
    S1,
    #[serde(rename = "s2")]
    S2,
    #[serde(rename = "s3")]
    S3,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::S1, SplitKind::S2, SplitKind::S3];

    pub fn tag(self) -> &'static str {
        match self {
            SplitKind::S1 => "s1",
            SplitKind::S2 => "s2",
            SplitKind::S3 => "s3",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(SplitKind::S1),
            "s2" => Ok(SplitKind::S2),
            "s3" => Ok(SplitKind::S3),
            _ => Err(Error::Config(format!("unknown split kind '{s}' (expected s1, s2 or s3)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub version: u32,
    pub kind: SplitKind,
    pub seed: u64,
    pub dataset_sha256: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub v_tr: Vec<String>,
    pub v_te: Vec<String>,
    pub target_fraction: f64,
    pub achieved_fraction: f64,
    pub dropped: Vec<String>,
}

impl SplitManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::InvalidManifest(format!("unsupported version {}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Bounds on the generator's search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitOptions {
    /// Allowed relative deviation of the achieved test fraction.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
}

fn default_tolerance() -> f64 {
    0.2
}

fn default_iterations() -> usize {
    200
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            tolerance: default_tolerance(),
            max_iterations: default_iterations(),
        }
    }
}

fn within(achieved: f64, target: f64, tol: f64) -> bool {
    (achieved - target).abs() <= tol * target + 1e-12
}

fn sorted_ids(mut ids: Vec<String>) -> Vec<String> {
    ids.sort_by(|a, b| crate::dataset::pair_id_cmp(a, b));
    ids
}

fn assemble(
    ds: &PairDataset,
    kind: SplitKind,
    seed: u64,
    target: f64,
    train: Vec<&PairRecord>,
    test: Vec<&PairRecord>,
    dropped: Vec<&PairRecord>,
) -> SplitManifest {
    let v_tr = train_drug_set(train.iter().copied());
    let v_te = train_drug_set(test.iter().copied());
    let achieved = test.len() as f64 / (train.len() + test.len()) as f64;
    let ids = |rs: Vec<&PairRecord>| sorted_ids(rs.into_iter().map(|r| r.pair_id.clone()).collect());
    SplitManifest {
        version: MANIFEST_VERSION,
        kind,
        seed,
        dataset_sha256: ds.sha256(),
        train: ids(train),
        test: ids(test),
        v_tr: v_tr.into_iter().collect(),
        v_te: v_te.into_iter().collect(),
        target_fraction: target,
        achieved_fraction: achieved,
        dropped: ids(dropped),
    }
}

/// Generates a split of `ds` of the given kind.
///
/// S2/S3 hold out a random drug set and resize it (resampling each time)
/// until the achieved test fraction is within tolerance. Pairs fitting
/// neither side are recorded in `dropped`. S1 moves whole unordered-pair
/// groups to test while every endpoint keeps a training pair.
pub fn generate_split(
    ds: &PairDataset,
    kind: SplitKind,
    test_fraction: f64,
    seed: u64,
    opts: &SplitOptions,
) -> Result<SplitManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::EmptyInput("cannot split an empty dataset".into()));
    }
    match kind {
        SplitKind::S1 => generate_s1(ds, test_fraction, seed, opts),
        SplitKind::S2 | SplitKind::S3 => generate_partition(ds, kind, test_fraction, seed, opts),
    }
}

fn generate_partition(
    ds: &PairDataset,
    kind: SplitKind,
    f: f64,
    seed: u64,
    opts: &SplitOptions,
) -> Result<SplitManifest> {
    let mut drugs: Vec<String> = ds.drug_inputs()?.into_keys().collect();
    let n = drugs.len();
    if n < 2 {
        return Err(Error::InfeasibleSplit(format!("{n} drug(s) cannot be partitioned")));
    }
    // Expected test share for a random held-out fraction p: S2 gives
    // 2p/(1+p), S3 gives p^2/(p^2+(1-p)^2). Invert for the starting size.
    let p = match kind {
        SplitKind::S2 => f / (2.0 - f),
        _ => f.sqrt() / (f.sqrt() + (1.0 - f).sqrt()),
    };
    let mut h = ((p * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, usize)> = None;
    for _ in 0..opts.max_iterations {
        drugs.shuffle(&mut rng);
        let held: HashSet<&str> = drugs[..h].iter().map(String::as_str).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut dropped = Vec::new();
        for r in &ds.records {
            let k = held.contains(r.drug_a.as_str()) as u8 + held.contains(r.drug_b.as_str()) as u8;
            match (kind, k) {
                (_, 0) => train.push(r),
                (SplitKind::S2, 1) | (SplitKind::S3, 2) => test.push(r),
                _ => dropped.push(r),
            }
        }
        if kind == SplitKind::S2 {
            // the non-held endpoint must actually be seen in training
            let v_tr = train_drug_set(train.iter().copied());
            let (ok, unseen): (Vec<_>, Vec<_>) = test.into_iter().partition(|r| {
                let other = if held.contains(r.drug_a.as_str()) { &r.drug_b } else { &r.drug_a };
                v_tr.contains(other)
            });
            test = ok;
            dropped.extend(unseen);
        }
        let total = train.len() + test.len();
        let achieved = if total == 0 { 0.0 } else { test.len() as f64 / total as f64 };
        if !train.is_empty() && !test.is_empty() {
            if within(achieved, f, opts.tolerance) {
                dropped.sort_by(|a, b| crate::dataset::pair_id_cmp(&a.pair_id, &b.pair_id));
                return Ok(assemble(ds, kind, seed, f, train, test, dropped));
            }
            let dev = (achieved - f).abs();
            if best.is_none_or(|(d, _)| dev < d) {
                best = Some((dev, h));
            }
        }
        if achieved < f {
            h = (h + 1).min(n - 1);
        } else {
            h = h.saturating_sub(1).max(1);
        }
    }
    Err(Error::InfeasibleSplit(match best {
        Some((dev, bh)) => format!(
            "{kind}: no held-out drug set within {:.0}% of fraction {f} after {} iterations \
             ({n} drugs, {} pairs; closest deviation {dev:.4} with {bh} held-out drugs)",
            opts.tolerance * 100.0,
            opts.max_iterations,
            ds.len()
        ),
        None => format!(
            "{kind}: no held-out drug set gave a nonempty train and test side after {} iterations \
             ({n} drugs, {} pairs)",
            opts.max_iterations,
            ds.len()
        ),
    }))
}

fn unordered_key(r: &PairRecord) -> (&str, &str) {
    if r.drug_a <= r.drug_b {
        (&r.drug_a, &r.drug_b)
    } else {
        (&r.drug_b, &r.drug_a)
    }
}

fn endpoints(r: &PairRecord) -> Vec<&str> {
    if r.drug_a == r.drug_b {
        vec![&r.drug_a]
    } else {
        vec![&r.drug_a, &r.drug_b]
    }
}

fn generate_s1(ds: &PairDataset, f: f64, seed: u64, opts: &SplitOptions) -> Result<SplitManifest> {
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        groups.entry(unordered_key(r)).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut degree: HashMap<&str, usize> = HashMap::new();
    for r in &ds.records {
        for d in endpoints(r) {
            *degree.entry(d).or_insert(0) += 1;
        }
    }
    let target = (f * ds.len() as f64).round().max(1.0) as usize;
    let mut in_test = vec![false; ds.len()];
    let mut n_test = 0;
    for group in &groups {
        if n_test >= target {
            break;
        }
        let mut need: HashMap<&str, usize> = HashMap::new();
        for &i in group {
            for d in endpoints(&ds.records[i]) {
                *need.entry(d).or_insert(0) += 1;
            }
        }
        if need.iter().all(|(d, k)| degree[d] > *k) {
            for (d, k) in need {
                *degree.get_mut(d).expect("counted") -= k;
            }
            for &i in group {
                in_test[i] = true;
            }
            n_test += group.len();
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, t) in ds.records.iter().zip(&in_test) {
        if *t {
            test.push(r);
        } else {
            train.push(r);
        }
    }
    let achieved = test.len() as f64 / ds.len() as f64;
    if test.is_empty() || train.is_empty() || !within(achieved, f, opts.tolerance) {
        return Err(Error::InfeasibleSplit(format!(
            "s1: could hold out {} of {} pairs (fraction {achieved:.4}) without unseeing a drug, \
             target {f} +/- {:.0}%",
            test.len(),
            ds.len(),
            opts.tolerance * 100.0
        )));
    }
    Ok(assemble(ds, SplitKind::S1, seed, f, train, test, Vec::new()))
}

// ---------------------------------------------------------------------------
// validation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// A pair id is listed in both train and test.
    Overlap,
    /// Recorded `v_tr` differs from the drugs of the train pairs.
    TrainDrugSet,
    /// S1: a test drug never appears in training.
    UnseenDrug,
    /// S1: the same two drugs, in either order, appear in training.
    StrictS1,
    /// S2: the number of seen drugs is not exactly one.
    SeenCount,
    /// S3: a test drug appears in training.
    SeenDrug,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    /// `None` for set-level rules.
    pub pair_id: Option<String>,
    pub rule: Rule,
    pub detail: String,
}

/// Checks every manifest invariant against `ds`. An empty result means the
/// split is legal.
pub fn validate_split(ds: &PairDataset, m: &SplitManifest) -> Result<Vec<Violation>> {
    let by_id: HashMap<&str, &PairRecord> = ds.records.iter().map(|r| (r.pair_id.as_str(), r)).collect();
    let lookup = |list: &[String], what: &str| -> Result<Vec<&PairRecord>> {
        list.iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| {
                    Error::InvalidManifest(format!("{what} pair_id '{id}' is not in the dataset"))
                })
            })
            .collect()
    };
    let train = lookup(&m.train, "train")?;
    let test = lookup(&m.test, "test")?;
    lookup(&m.dropped, "dropped")?;

    let mut out = Vec::new();
    let train_ids: HashSet<&str> = m.train.iter().map(String::as_str).collect();
    for id in &m.test {
        if train_ids.contains(id.as_str()) {
            out.push(Violation {
                pair_id: Some(id.clone()),
                rule: Rule::Overlap,
                detail: "listed in train and test".into(),
            });
        }
    }

    let mut v_tr: HashSet<&str> = HashSet::new();
    for r in &train {
        v_tr.insert(&r.drug_a);
        v_tr.insert(&r.drug_b);
    }
    let recorded: HashSet<&str> = m.v_tr.iter().map(String::as_str).collect();
    if recorded != v_tr {
        let mut extra: Vec<&&str> = recorded.difference(&v_tr).collect();
        let mut missing: Vec<&&str> = v_tr.difference(&recorded).collect();
        extra.sort();
        missing.sort();
        out.push(Violation {
            pair_id: None,
            rule: Rule::TrainDrugSet,
            detail: format!("recorded v_tr has extra {extra:?} and lacks {missing:?}"),
        });
    }

    let train_pairs: HashSet<(&str, &str)> = train
        .iter()
        .flat_map(|r| [(r.drug_a.as_str(), r.drug_b.as_str()), (r.drug_b.as_str(), r.drug_a.as_str())])
        .collect();
    let per_pair: Vec<Violation> = test
        .par_iter()
        .flat_map_iter(|r| {
            let seen_a = v_tr.contains(r.drug_a.as_str());
            let seen_b = v_tr.contains(r.drug_b.as_str());
            let seen = seen_a as u8 + seen_b as u8;
            let mut v = Vec::new();
            let mk = |rule, detail: String| Violation {
                pair_id: Some(r.pair_id.clone()),
                rule,
                detail,
            };
            match m.kind {
                SplitKind::S1 => {
                    if seen < 2 {
                        v.push(mk(Rule::UnseenDrug, format!("{seen} of 2 drugs seen in training")));
                    }
                    if train_pairs.contains(&(r.drug_a.as_str(), r.drug_b.as_str())) {
                        v.push(mk(
                            Rule::StrictS1,
                            format!("({}, {}) appears in training in some order", r.drug_a, r.drug_b),
                        ));
                    }
                }
                SplitKind::S2 => {
                    if seen != 1 {
                        v.push(mk(Rule::SeenCount, format!("{seen} of 2 drugs seen in training")));
                    }
                }
                SplitKind::S3 => {
                    if seen > 0 {
                        v.push(mk(Rule::SeenDrug, format!("{seen} of 2 drugs seen in training")));
                    }
                }
            }
            v
        })
        .collect();
    out.extend(per_pair);
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::LabelSpace;

    fn rec(id: usize, a: &str, b: &str) -> PairRecord {
        PairRecord {
            pair_id: id.to_string(),
            drug_a: a.into(),
            drug_b: b.into(),
            input_a: a.to_lowercase(),
            input_b: b.to_lowercase(),
            label: (id % 2) as i64,
        }
    }

    fn grid(n: usize, directed: bool) -> PairDataset {
        let names: Vec<String> = (0..n).map(|i| format!("D{i:02}")).collect();
        let mut recs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && (directed || i < j) && (i * 7 + j * 3) % 4 != 0 {
                    recs.push(rec(recs.len() + 1, &names[i], &names[j]));
                }
            }
        }
        PairDataset::new(recs, LabelSpace::binary(directed)).unwrap()
    }

    #[test]
    fn every_kind_generates_a_legal_split() {
        for directed in [false, true] {
            let ds = grid(14, directed);
            for kind in SplitKind::ALL {
                let m = generate_split(&ds, kind, 0.2, 3, &SplitOptions::default()).unwrap();
                assert_eq!(validate_split(&ds, &m).unwrap(), vec![], "{kind} directed={directed}");
                assert!(within(m.achieved_fraction, 0.2, 0.2));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let ds = grid(12, true);
        for kind in SplitKind::ALL {
            let a = generate_split(&ds, kind, 0.25, 9, &SplitOptions::default()).unwrap();
            let b = generate_split(&ds, kind, 0.25, 9, &SplitOptions::default()).unwrap();
            assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        }
    }

    #[test]
    fn manifest_round_trips() {
        let ds = grid(10, false);
        let m = generate_split(&ds, SplitKind::S3, 0.2, 1, &SplitOptions::default()).unwrap();
        assert_eq!(SplitManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn dangling_ids_are_rejected() {
        let ds = grid(10, false);
        let mut m = generate_split(&ds, SplitKind::S2, 0.3, 1, &SplitOptions::default()).unwrap();
        m.test.push("9999".into());
        assert!(matches!(validate_split(&ds, &m), Err(Error::InvalidManifest(_))));
    }

    #[test]
    fn overlap_and_recorded_set_are_checked() {
        let ds = grid(10, false);
        let mut m = generate_split(&ds, SplitKind::S3, 0.2, 1, &SplitOptions::default()).unwrap();
        m.v_tr.pop();
        let v = validate_split(&ds, &m).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::TrainDrugSet);
    }

    #[test]
    fn infeasible_targets_are_reported() {
        let ds = PairDataset::new(vec![rec(1, "A", "B"), rec(2, "B", "C")], LabelSpace::binary(false)).unwrap();
        assert!(matches!(
            generate_split(&ds, SplitKind::S1, 0.5, 0, &SplitOptions::default()),
            Err(Error::InfeasibleSplit(_))
        ));
        assert!(matches!(
            generate_split(&ds, SplitKind::S3, 1.5, 0, &SplitOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kind_parses_case_insensitively() {
        assert_eq!("S2".parse::<SplitKind>().unwrap(), SplitKind::S2);
        assert!("s4".parse::<SplitKind>().is_err());
    }
}
