//! Per-stream token encoders, the per-token projection into the shared width
//! and representation drift between two parameter sets.
//!
//! A stream `m` owns the parameters under `stream{m}.`: the mock embedding
//! table `stream{m}.embed` (absent for precomputed streams) and the
//! projection `stream{m}.proj` (linear `d_m -> d` followed by layer norm).
//! Frozen streams keep their parameters non-trainable and additionally detach
//! the projection output, so no gradient path reaches them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, layer_norm_graph, linear, DEFAULT_LN_EPS};
use crate::tensor::{ParamStore, Parameter, Tensor};

/// Byte-valued character vocabulary.
pub const VOCAB_SIZE: usize = 128;
pub const PAD_ID: usize = 0;

/// A `T x width` matrix with a per-row validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self> {
        if values.rows() != mask.len() {
            return Err(Error::InvalidArgument(format!(
                "{} rows with {} mask bits",
                values.rows(),
                mask.len()
            )));
        }
        Ok(Self { values, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Raw molecular input of one drug identity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MolecularInput {
    pub drug_id: String,
    pub raw: String,
}

impl MolecularInput {
    pub fn new(drug_id: impl Into<String>, raw: impl Into<String>) -> Self {
        Self {
            drug_id: drug_id.into(),
            raw: raw.into(),
        }
    }
}

/// Character-level tokenization into byte ids, truncated or zero-padded to
/// `max_len`.
pub fn tokenize(raw: &str, max_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("empty molecular string".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    if let Some(c) = raw.chars().find(|c| !(c.is_ascii_graphic() || *c == ' ')) {
        return Err(Error::InvalidInput(format!(
            "non-printable or non-ASCII character {c:?} in {raw:?}"
        )));
    }
    let bytes = raw.as_bytes();
    let n = bytes.len().min(max_len);
    let mut ids = vec![PAD_ID; max_len];
    let mut mask = vec![false; max_len];
    for i in 0..n {
        ids[i] = bytes[i] as usize;
        mask[i] = true;
    }
    Ok((ids, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// Seeded embedding table plus sinusoidal positions.
    Mock,
    /// Token matrices read verbatim from an [`EmbeddingStore`].
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// `r`: the reference stream, frozen in the default pattern.
    Anchor,
    /// `t`: the adaptive stream.
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub name: String,
    pub kind: StreamKind,
    pub width: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_max_len() -> usize {
    24
}

/// One encoder stream of an assembled model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStream {
    pub index: usize,
    pub config: StreamConfig,
    pub role: Role,
    pub frozen: bool,
}

impl EncoderStream {
    pub fn prefix(&self) -> String {
        stream_prefix(self.index)
    }

    pub fn embed_name(&self) -> String {
        format!("{}.embed", self.prefix())
    }

    pub fn proj_prefix(&self) -> String {
        format!("{}.proj", self.prefix())
    }
}

pub fn stream_prefix(index: usize) -> String {
    format!("stream{index}")
}

/// Sinusoidal position encoding, `T x width`, values in `[-1, 1]`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for j in 0..width {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / width as f64);
            data[pos * width + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, width, data).expect("positive extents")
}

/// Embedding table of a mock stream: uniform in `[-1, 1]` from a generator
/// keyed on `(seed, stream index)`.
pub fn mock_embedding_table(seed: u64, index: usize, width: usize) -> Tensor {
    let key = seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    Tensor::uniform(&[VOCAB_SIZE, width], 1.0, &mut rng)
}

/// Registers the parameters of `stream` in `store`. `d` is the shared width.
pub fn init_stream(
    store: &mut ParamStore,
    stream: &EncoderStream,
    d: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) {
    if stream.config.kind == StreamKind::Mock {
        store.insert(Parameter::new(
            stream.embed_name(),
            mock_embedding_table(seed, stream.index, stream.config.width),
            true,
        ));
    }
    init_linear(store, &stream.proj_prefix(), stream.config.width, d, rng);
    init_layer_norm(store, &format!("{}.ln", stream.proj_prefix()), d);
    if stream.frozen {
        store.set_trainable(&format!("{}.", stream.prefix()), false);
    }
}

// ---------------------------------------------------------------------------
// precomputed embeddings

const EMB_MAGIC: &str = "GENREL-EMB v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    drug_id: String,
    stream_id: usize,
    #[serde(rename = "T")]
    t: usize,
    d_m: usize,
    offset: u64,
    /// Omitted when every row is valid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<u8>>,
}

/// Token matrices keyed by `(drug_id, stream_id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    entries: BTreeMap<(String, usize), TokenSequence>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, drug_id: impl Into<String>, stream_id: usize, seq: TokenSequence) {
        self.entries.insert((drug_id.into(), stream_id), seq);
    }

    pub fn get(&self, drug_id: &str, stream_id: usize) -> Result<&TokenSequence> {
        self.entries
            .get(&(drug_id.to_string(), stream_id))
            .ok_or_else(|| {
                Error::MissingEntity(format!(
                    "no precomputed embedding for drug '{drug_id}' in stream {stream_id}"
                ))
            })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Header line, one JSON index line per entry, a blank line, then the
    /// little-endian `f64` blob.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut blob = Vec::new();
        let mut header = format!("{EMB_MAGIC}\n");
        for ((drug, stream), seq) in &self.entries {
            let entry = IndexEntry {
                drug_id: drug.clone(),
                stream_id: *stream,
                t: seq.len(),
                d_m: seq.width(),
                offset: blob.len() as u64,
                mask: if seq.mask.iter().all(|&m| m) {
                    None
                } else {
                    Some(seq.mask.iter().map(|&m| m as u8).collect())
                },
            };
            header.push_str(&serde_json::to_string(&entry)?);
            header.push('\n');
            blob.extend(seq.values.to_le_bytes());
        }
        header.push('\n');
        w.write_all(header.as_bytes())
            .and_then(|_| w.write_all(&blob))
            .map_err(|e| Error::io("<embedding store>", e))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        let mut lineno = 1;
        reader
            .read_line(&mut line)
            .map_err(|e| Error::io("<embedding store>", e))?;
        if line.trim_end() != EMB_MAGIC {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header '{EMB_MAGIC}'"),
            });
        }
        let mut index = Vec::new();
        loop {
            line.clear();
            lineno += 1;
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::io("<embedding store>", e))?;
            if n == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    message: "unterminated index".into(),
                });
            }
            if line.trim().is_empty() {
                break;
            }
            let entry: IndexEntry = serde_json::from_str(line.trim()).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            index.push((lineno, entry));
        }
        let mut blob = Vec::new();
        reader
            .read_to_end(&mut blob)
            .map_err(|e| Error::io("<embedding store>", e))?;
        let mut store = Self::new();
        for (lineno, e) in index {
            let n = e.t * e.d_m;
            let start = e.offset as usize;
            let end = start + n * 8;
            if n == 0 || end > blob.len() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("entry for '{}' overruns the blob", e.drug_id),
                });
            }
            let values = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mask = match e.mask {
                Some(m) if m.len() == e.t => m.into_iter().map(|b| b != 0).collect(),
                Some(_) => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "mask length differs from T".into(),
                    })
                }
                None => vec![true; e.t],
            };
            let seq = TokenSequence::new(Tensor::matrix(e.t, e.d_m, values)?, mask)?;
            store.insert(e.drug_id, e.stream_id, seq);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }
}

// ---------------------------------------------------------------------------
// encode / project

/// Records the encoder output of `stream` for `input` on `g`; returns the
/// `T x d_m` node and its mask.
pub fn encode_graph(
    g: &mut Graph,
    store: &ParamStore,
    stream: &EncoderStream,
    input: &MolecularInput,
    embeddings: Option<&EmbeddingStore>,
) -> Result<(Var, Vec<bool>)> {
    match stream.config.kind {
        StreamKind::Mock => {
            let (ids, mask) = tokenize(&input.raw, stream.config.max_len)?;
            let table = g.param(store.get(&stream.embed_name())?);
            let emb = g.gather(table, &ids)?;
            let pe = g.constant(positional_encoding(ids.len(), stream.config.width));
            let h = g.add(emb, pe)?;
            Ok((g.mask_rows(h, &mask)?, mask))
        }
        StreamKind::Precomputed => {
            let emb = embeddings.ok_or_else(|| {
                Error::Config(format!(
                    "stream '{}' is precomputed but no embedding store is loaded",
                    stream.config.name
                ))
            })?;
            let seq = emb.get(&input.drug_id, stream.index)?;
            let h = g.constant(seq.values.clone());
            Ok((g.mask_rows(h, &seq.mask)?, seq.mask.clone()))
        }
    }
}

/// Per-token affine map into width `d`, layer norm, then re-masking.
pub fn project_graph(
    g: &mut Graph,
    store: &ParamStore,
    stream: &EncoderStream,
    h: Var,
    mask: &[bool],
) -> Result<Var> {
    let (_, width) = g.shape(h);
    if width != stream.config.width {
        return Err(Error::Config(format!(
            "stream '{}' declares width {} but encoder produced {width}",
            stream.config.name, stream.config.width
        )));
    }
    let prefix = stream.proj_prefix();
    let lin = linear(g, store, &prefix, h)?;
    let ln = layer_norm_graph(g, store, &format!("{prefix}.ln"), lin, DEFAULT_LN_EPS)?;
    let out = g.mask_rows(ln, mask)?;
    Ok(if stream.frozen { g.detach(out) } else { out })
}

pub fn encode(
    input: &MolecularInput,
    stream: &EncoderStream,
    store: &ParamStore,
    embeddings: Option<&EmbeddingStore>,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let (h, mask) = encode_graph(&mut g, store, stream, input, embeddings)?;
    TokenSequence::new(g.value(h).clone(), mask)
}

pub fn project(h: &TokenSequence, stream: &EncoderStream, store: &ParamStore) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let hv = g.constant(h.values.clone());
    let out = project_graph(&mut g, store, stream, hv, &h.mask)?;
    TokenSequence::new(g.value(out).clone(), h.mask.clone())
}

/// Encode then project.
pub fn projected(
    input: &MolecularInput,
    stream: &EncoderStream,
    store: &ParamStore,
    embeddings: Option<&EmbeddingStore>,
) -> Result<TokenSequence> {
    project(&encode(input, stream, store, embeddings)?, stream, store)
}

/// Largest Frobenius distance, over `vocabulary`, between the projected
/// sequences of `stream` under `current` and under `reference` parameters.
pub fn representation_drift(
    stream: &EncoderStream,
    current: &ParamStore,
    reference: &ParamStore,
    vocabulary: &[MolecularInput],
    embeddings: Option<&EmbeddingStore>,
) -> Result<f64> {
    let dists = vocabulary
        .par_iter()
        .map(|drug| {
            let now = projected(drug, stream, current, embeddings)?;
            let then = projected(drug, stream, reference, embeddings)?;
            now.values.distance(&then.values)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(dists.into_iter().fold(0.0, f64::max))
}
