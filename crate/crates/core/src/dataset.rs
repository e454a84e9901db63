//! Labelled drug-pair datasets: CSV ingestion, validation and undirected
//! deduplication.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::MolecularInput;
use crate::error::{Error, Result};
use crate::heads::LabelSpace;

pub const CSV_HEADER: [&str; 6] = ["pair_id", "drug_a", "drug_b", "input_a", "input_b", "label"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub drug_a: String,
    pub drug_b: String,
    pub input_a: String,
    pub input_b: String,
    pub label: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
    pub space: LabelSpace,
}

/// Summary produced while loading a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub records: usize,
    pub duplicates_removed: usize,
    /// Label -> count over retained records.
    pub histogram: BTreeMap<i64, usize>,
}

/// Pair ids compare numerically when both parse as integers.
pub fn pair_id_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<i128>(), b.parse::<i128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

fn unordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl PairDataset {
    /// Validates ids, labels and drug inputs.
    pub fn new(records: Vec<PairRecord>, space: LabelSpace) -> Result<Self> {
        space.validate()?;
        let ds = Self { records, space };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.pair_id.as_str()) {
                return Err(Error::DataIntegrity(format!("duplicate pair_id '{}'", r.pair_id)));
            }
            if !self.space.contains(r.label) {
                return Err(Error::InvalidLabel {
                    label: r.label.to_string(),
                    location: format!("pair '{}'", r.pair_id),
                    reason: self.space.describe(),
                });
            }
        }
        self.drug_inputs()?;
        if !self.space.directed {
            let mut seen: HashMap<(String, String), &str> = HashMap::new();
            for r in &self.records {
                if let Some(prev) = seen.insert(unordered(&r.drug_a, &r.drug_b), &r.pair_id) {
                    return Err(Error::DataIntegrity(format!(
                        "undirected dataset holds pairs '{prev}' and '{}' for the same drugs",
                        r.pair_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Drug id -> raw input, checked for consistency across records.
    pub fn drug_inputs(&self) -> Result<BTreeMap<String, String>> {
        let mut out: BTreeMap<String, String> = BTreeMap::new();
        for r in &self.records {
            for (id, raw) in [(&r.drug_a, &r.input_a), (&r.drug_b, &r.input_b)] {
                match out.get(id) {
                    Some(prev) if prev != raw => {
                        return Err(Error::DataIntegrity(format!(
                            "drug '{id}' has conflicting inputs (pair '{}')",
                            r.pair_id
                        )))
                    }
                    Some(_) => {}
                    None => {
                        out.insert(id.clone(), raw.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Every drug as a [`MolecularInput`], ordered by id.
    pub fn vocabulary(&self) -> Result<Vec<MolecularInput>> {
        Ok(self
            .drug_inputs()?
            .into_iter()
            .map(|(id, raw)| MolecularInput::new(id, raw))
            .collect())
    }

    pub fn index(&self) -> HashMap<&str, &PairRecord> {
        self.records.iter().map(|r| (r.pair_id.as_str(), r)).collect()
    }

    /// Records for `ids`, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&PairRecord>> {
        let idx = self.index();
        ids.iter()
            .map(|id| {
                idx.get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::MissingEntity(format!("pair_id '{id}'")))
            })
            .collect()
    }

    pub fn histogram(&self) -> BTreeMap<i64, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.label).or_insert(0) += 1;
        }
        h
    }

    /// SHA-256 over the label space and the records sorted by pair id.
    pub fn sha256(&self) -> String {
        let mut recs: Vec<&PairRecord> = self.records.iter().collect();
        recs.sort_by(|a, b| pair_id_cmp(&a.pair_id, &b.pair_id));
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.space).expect("label space serializes"));
        for r in recs {
            for f in [&r.pair_id, &r.drug_a, &r.drug_b, &r.input_a, &r.input_b] {
                h.update((f.len() as u64).to_le_bytes());
                h.update(f.as_bytes());
            }
            h.update(r.label.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER)?;
        for r in &self.records {
            wr.write_record([
                r.pair_id.as_str(),
                &r.drug_a,
                &r.drug_b,
                &r.input_a,
                &r.input_b,
                &r.label.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Union of first- and second-position drug ids.
pub fn train_drug_set<'a, I>(records: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a PairRecord>,
{
    let mut out = BTreeSet::new();
    for r in records {
        out.insert(r.drug_a.clone());
        out.insert(r.drug_b.clone());
    }
    out
}

/// Keeps one record per unordered drug pair, the one with the lowest pair
/// id. Returns the kept records and the number removed.
pub fn dedup_undirected(records: Vec<PairRecord>) -> Result<(Vec<PairRecord>, usize)> {
    let mut groups: BTreeMap<(String, String), Vec<PairRecord>> = BTreeMap::new();
    let order: Vec<(String, String)> = records
        .iter()
        .map(|r| unordered(&r.drug_a, &r.drug_b))
        .collect();
    for (key, r) in order.iter().cloned().zip(records) {
        groups.entry(key).or_default().push(r);
    }
    let mut removed = 0;
    let mut kept: HashMap<(String, String), PairRecord> = HashMap::new();
    for (key, mut group) in groups {
        let labels: BTreeSet<i64> = group.iter().map(|r| r.label).collect();
        if labels.len() > 1 {
            let ids: Vec<String> = group
                .iter()
                .map(|r| format!("{} (label {})", r.pair_id, r.label))
                .collect();
            return Err(Error::DataIntegrity(format!(
                "conflicting labels for unordered pair {}/{}: {}",
                key.0,
                key.1,
                ids.join(", ")
            )));
        }
        group.sort_by(|a, b| pair_id_cmp(&a.pair_id, &b.pair_id));
        removed += group.len() - 1;
        kept.insert(key, group.swap_remove(0));
    }
    // preserve first-occurrence order of the unordered pairs
    let mut out = Vec::with_capacity(kept.len());
    for key in order {
        if let Some(r) = kept.remove(&key) {
            out.push(r);
        }
    }
    Ok((out, removed))
}

/// Parses a pair CSV against `space`, deduplicating when undirected.
pub fn read_csv<R: Read>(reader: R, space: LabelSpace) -> Result<(PairDataset, LoadReport)> {
    space.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();
    let header = match rows.next() {
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
        Some(h) => h?,
    };
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("header {:?}, expected {:?}", got, CSV_HEADER),
        });
    }
    let mut records = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    for row in rows {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", CSV_HEADER.len(), row.len()),
            });
        }
        let f: Vec<&str> = row.iter().map(str::trim).collect();
        for (name, v) in CSV_HEADER.iter().zip(&f).take(3) {
            if v.is_empty() {
                return Err(Error::Parse { line, message: format!("empty {name}") });
            }
        }
        let label: i64 = f[5].parse().map_err(|_| Error::Parse {
            line,
            message: format!("label '{}' is not an integer", f[5]),
        })?;
        if !space.contains(label) {
            return Err(Error::InvalidLabel {
                label: f[5].to_string(),
                location: format!("line {line}"),
                reason: space.describe(),
            });
        }
        if let Some(prev) = ids.insert(f[0].to_string(), line) {
            return Err(Error::Parse {
                line,
                message: format!("pair_id '{}' already used on line {prev}", f[0]),
            });
        }
        records.push(PairRecord {
            pair_id: f[0].into(),
            drug_a: f[1].into(),
            drug_b: f[2].into(),
            input_a: f[3].into(),
            input_b: f[4].into(),
            label,
        });
    }
    let rows = records.len();
    let (records, duplicates_removed) = if space.directed {
        (records, 0)
    } else {
        dedup_undirected(records)?
    };
    let ds = PairDataset::new(records, space)?;
    let report = LoadReport {
        rows,
        records: ds.len(),
        duplicates_removed,
        histogram: ds.histogram(),
    };
    Ok((ds, report))
}

pub fn load_dataset(path: &Path, space: LabelSpace) -> Result<(PairDataset, LoadReport)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(f), space)
}
