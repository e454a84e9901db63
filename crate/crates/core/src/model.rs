//! The assembled pair classifier: two encoder streams per drug, within-drug
//! conditioning, the relation trunk and the task head.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Graph, Var};
use crate::conditioning::{fuse_graph, init_fusion, FusedVars, FusionVariant, StreamVar};
use crate::dataset::PairRecord;
use crate::encoders::{
    encode_graph, init_stream, project_graph, EmbeddingStore, EncoderStream, MolecularInput, Role,
    StreamConfig, StreamKind, TokenSequence,
};
use crate::error::{Error, Result};
use crate::heads::{head_logits_graph, init_head, loss_graph, probs_from_logits, LabelSpace, Prediction};
use crate::nn::{AttnShape, Mode};
use crate::tensor::ParamStore;
use crate::trunk::{directional_states_graph, init_trunk, relation_vector_graph};

/// Prefixes of the parameters downstream of the encoders.
pub const DOWNSTREAM_PREFIXES: [&str; 3] = ["fusion.", "trunk.", "head."];

/// Which role streams are frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum FreezePattern {
    None,
    /// Anchor frozen, adapter trainable.
    #[default]
    Anchor,
    Adapter,
    Both,
}

impl FreezePattern {
    pub fn tag(self) -> &'static str {
        match self {
            FreezePattern::None => "none",
            FreezePattern::Anchor => "r",
            FreezePattern::Adapter => "t",
            FreezePattern::Both => "rt",
        }
    }

    pub fn freezes(self, role: Role) -> bool {
        matches!(
            (self, role),
            (FreezePattern::Both, _) | (FreezePattern::Anchor, Role::Anchor) | (FreezePattern::Adapter, Role::Adapter)
        )
    }
}

impl fmt::Display for FreezePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FreezePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "" => Ok(FreezePattern::None),
            "r" => Ok(FreezePattern::Anchor),
            "t" => Ok(FreezePattern::Adapter),
            "rt" | "tr" | "all" => Ok(FreezePattern::Both),
            _ => Err(Error::Config(format!(
                "unknown freeze pattern '{s}' (expected none, r, t or rt)"
            ))),
        }
    }
}

impl Serialize for FreezePattern {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for FreezePattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered stream pair `X+Y`: `X` is the anchor, `Y` the adapter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoleOrder {
    pub anchor: String,
    pub adapter: String,
}

impl fmt::Display for RoleOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.anchor, self.adapter)
    }
}

impl FromStr for RoleOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('+') {
            Some((a, t)) if !a.trim().is_empty() && !t.trim().is_empty() && !t.contains('+') => Ok(Self {
                anchor: a.trim().to_string(),
                adapter: t.trim().to_string(),
            }),
            _ => Err(Error::Config(format!("role order '{s}' is not of the form ANCHOR+ADAPTER"))),
        }
    }
}

impl Serialize for RoleOrder {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RoleOrder {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::d")]
    pub d: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub fusion: FusionVariant,
    /// Share one cross-attention block between the two trunk directions.
    #[serde(default)]
    pub trunk_tied: bool,
    #[serde(default = "defaults::streams")]
    pub streams: Vec<StreamConfig>,
    #[serde(default = "defaults::roles")]
    pub roles: RoleOrder,
    #[serde(default)]
    pub freeze: FreezePattern,
    /// Also freeze fusion, trunk and head.
    #[serde(default)]
    pub freeze_downstream: bool,
    #[serde(default = "defaults::label_space")]
    pub label_space: LabelSpace,
}

mod defaults {
    use super::*;

    pub fn d() -> usize {
        64
    }
    pub fn heads() -> usize {
        4
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn streams() -> Vec<StreamConfig> {
        vec![
            StreamConfig {
                name: "chem".into(),
                kind: StreamKind::Mock,
                width: 48,
                max_len: 24,
            },
            StreamConfig {
                name: "mol".into(),
                kind: StreamKind::Mock,
                width: 64,
                max_len: 24,
            },
        ]
    }
    pub fn roles() -> RoleOrder {
        RoleOrder {
            anchor: "chem".into(),
            adapter: "mol".into(),
        }
    }
    pub fn label_space() -> LabelSpace {
        LabelSpace::binary(false)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: defaults::d(),
            heads: defaults::heads(),
            dropout: defaults::dropout(),
            fusion: FusionVariant::default(),
            trunk_tied: false,
            streams: defaults::streams(),
            roles: defaults::roles(),
            freeze: FreezePattern::default(),
            freeze_downstream: false,
            label_space: defaults::label_space(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        AttnShape::new(self.d, self.heads)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.streams.len() != 2 {
            return Err(Error::Config(format!(
                "the model consumes exactly two streams, {} configured",
                self.streams.len()
            )));
        }
        for s in &self.streams {
            if s.width == 0 || s.max_len == 0 {
                return Err(Error::Config(format!("stream '{}' has zero width or length", s.name)));
            }
        }
        if self.streams[0].name == self.streams[1].name {
            return Err(Error::Config("stream names must differ".into()));
        }
        if self.roles.anchor == self.roles.adapter {
            return Err(Error::Config("anchor and adapter must be different streams".into()));
        }
        for name in [&self.roles.anchor, &self.roles.adapter] {
            if !self.streams.iter().any(|s| &s.name == name) {
                return Err(Error::Config(format!("role names unknown stream '{name}'")));
            }
        }
        self.label_space.validate()
    }
}

/// Structure of a model independent of its parameter values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub streams: Vec<EncoderStream>,
    pub shape: AttnShape,
    anchor: usize,
    adapter: usize,
    embeddings: Option<Arc<EmbeddingStore>>,
}

impl Architecture {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let shape = AttnShape::new(config.d, config.heads)?;
        let streams: Vec<EncoderStream> = config
            .streams
            .iter()
            .enumerate()
            .map(|(index, sc)| {
                let role = if sc.name == config.roles.anchor { Role::Anchor } else { Role::Adapter };
                EncoderStream {
                    index,
                    config: sc.clone(),
                    role,
                    frozen: config.freeze.freezes(role),
                }
            })
            .collect();
        let anchor = streams.iter().position(|s| s.role == Role::Anchor).expect("validated");
        let adapter = streams.iter().position(|s| s.role == Role::Adapter).expect("validated");
        Ok(Self {
            config,
            streams,
            shape,
            anchor,
            adapter,
            embeddings: None,
        })
    }

    pub fn with_embeddings(mut self, store: Arc<EmbeddingStore>) -> Self {
        self.embeddings = Some(store);
        self
    }

    pub fn embeddings(&self) -> Option<&EmbeddingStore> {
        self.embeddings.as_deref()
    }

    pub fn anchor(&self) -> &EncoderStream {
        &self.streams[self.anchor]
    }

    pub fn adapter(&self) -> &EncoderStream {
        &self.streams[self.adapter]
    }

    pub fn label_space(&self) -> LabelSpace {
        self.config.label_space
    }

    /// Fresh parameters drawn from `seed`, with freeze flags applied.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for s in &self.streams {
            init_stream(&mut store, s, self.config.d, seed, &mut rng);
        }
        init_fusion(&mut store, self.config.fusion, self.config.d, &mut rng);
        init_trunk(&mut store, self.config.trunk_tied, self.config.d, &mut rng);
        init_head(&mut store, &self.config.label_space, self.config.d, &mut rng);
        if self.config.freeze_downstream {
            for p in DOWNSTREAM_PREFIXES {
                store.set_trainable(p, false);
            }
        }
        store
    }

    /// Projected token sequences of one drug, one per stream in stream order.
    pub fn project_drug_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &MolecularInput,
    ) -> Result<Vec<(Var, Vec<bool>)>> {
        self.streams
            .iter()
            .map(|s| {
                let (h, mask) = encode_graph(g, store, s, input, self.embeddings())?;
                let p = project_graph(g, store, s, h, &mask)?;
                Ok((p, mask))
            })
            .collect()
    }

    pub fn fuse_drug_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        projected: &[(Var, Vec<bool>)],
        mode: &mut Mode<'_>,
    ) -> Result<FusedVars> {
        let (r, rm) = &projected[self.anchor];
        let (t, tm) = &projected[self.adapter];
        fuse_graph(
            g,
            store,
            self.config.fusion,
            self.shape,
            StreamVar { tokens: *r, mask: rm },
            StreamVar { tokens: *t, mask: tm },
            mode,
        )
    }

    /// `z_ab` from projected sequences of both drugs.
    pub fn relation_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pa: &[(Var, Vec<bool>)],
        pb: &[(Var, Vec<bool>)],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let fa = self.fuse_drug_graph(g, store, pa, mode)?;
        let fb = self.fuse_drug_graph(g, store, pb, mode)?;
        let (u_ab, u_ba) = directional_states_graph(
            g,
            store,
            self.config.trunk_tied,
            self.shape,
            StreamVar { tokens: fa.tokens, mask: &fa.mask },
            StreamVar { tokens: fb.tokens, mask: &fb.mask },
            mode,
        )?;
        let (_, _, z) = relation_vector_graph(g, u_ab, u_ba, &fa.mask, &fb.mask)?;
        Ok(z)
    }

    pub fn logits_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        a: &MolecularInput,
        b: &MolecularInput,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let pa = self.project_drug_graph(g, store, a)?;
        let pb = self.project_drug_graph(g, store, b)?;
        let z = self.relation_graph(g, store, &pa, &pb, mode)?;
        head_logits_graph(g, store, z)
    }

    /// Per-pair cross-entropy node.
    pub fn pair_loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        record: &PairRecord,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let space = self.label_space();
        let class = space.class_index(record.label).map_err(|_| Error::InvalidLabel {
            label: record.label.to_string(),
            location: format!("pair '{}'", record.pair_id),
            reason: space.describe(),
        })?;
        let (a, b) = pair_inputs(record);
        let logits = self.logits_graph(g, store, &a, &b, mode)?;
        loss_graph(g, logits, class, &space)
    }

    /// Eval-mode prediction for an ordered pair.
    pub fn predict(&self, store: &ParamStore, a: &MolecularInput, b: &MolecularInput) -> Result<Prediction> {
        let mut g = Graph::new();
        let logits = self.logits_graph(&mut g, store, a, b, &mut Mode::Eval)?;
        probs_from_logits(g.value(logits).data(), &self.label_space())
    }

    /// Eval-mode relation vector for an ordered pair.
    pub fn relation_vector(&self, store: &ParamStore, a: &MolecularInput, b: &MolecularInput) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let pa = self.project_drug_graph(&mut g, store, a)?;
        let pb = self.project_drug_graph(&mut g, store, b)?;
        let z = self.relation_graph(&mut g, store, &pa, &pb, &mut Mode::Eval)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Projected sequences of one drug, in stream order.
    pub fn project_drug(&self, store: &ParamStore, input: &MolecularInput) -> Result<Vec<TokenSequence>> {
        let mut g = Graph::new();
        self.project_drug_graph(&mut g, store, input)?
            .into_iter()
            .map(|(v, mask)| TokenSequence::new(g.value(v).clone(), mask))
            .collect()
    }

    /// The downstream predictor applied to already projected sequences.
    pub fn predict_projected(
        &self,
        store: &ParamStore,
        a: &[TokenSequence],
        b: &[TokenSequence],
    ) -> Result<Prediction> {
        if a.len() != self.streams.len() || b.len() != self.streams.len() {
            return Err(Error::Config(format!(
                "expected {} projected streams per drug",
                self.streams.len()
            )));
        }
        let mut g = Graph::new();
        let mut load = |seqs: &[TokenSequence]| -> Vec<(Var, Vec<bool>)> {
            seqs.iter()
                .map(|s| (g.constant(s.values.clone()), s.mask.clone()))
                .collect()
        };
        let pa = load(a);
        let pb = load(b);
        let z = self.relation_graph(&mut g, store, &pa, &pb, &mut Mode::Eval)?;
        let logits = head_logits_graph(&mut g, store, z)?;
        probs_from_logits(g.value(logits).data(), &self.label_space())
    }

    /// Errors unless `store` holds exactly the parameters this architecture
    /// creates, with the same shapes.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let expected = self.init_params(0);
        if expected.len() != store.len() {
            return Err(Error::Config(format!(
                "architecture has {} parameter tensors, store has {}",
                expected.len(),
                store.len()
            )));
        }
        for p in expected.iter() {
            let q = store
                .get(&p.name)
                .map_err(|_| Error::Config(format!("parameter '{}' missing", p.name)))?;
            if q.tensor.shape() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter '{}' has shape {:?}, architecture expects {:?}",
                    p.name,
                    q.tensor.shape(),
                    p.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn pair_inputs(r: &PairRecord) -> (MolecularInput, MolecularInput) {
    (
        MolecularInput::new(r.drug_a.clone(), r.input_a.clone()),
        MolecularInput::new(r.drug_b.clone(), r.input_b.clone()),
    )
}

/// An architecture together with parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let params = arch.init_params(seed);
        Ok(Self { arch, params })
    }

    pub fn predict(&self, a: &MolecularInput, b: &MolecularInput) -> Result<Prediction> {
        self.arch.predict(&self.params, a, b)
    }

    pub fn predict_record(&self, r: &PairRecord) -> Result<Prediction> {
        let (a, b) = pair_inputs(r);
        self.predict(&a, &b)
    }

    /// Little-endian bytes of every parameter whose name starts with `prefix`.
    pub fn param_bytes(&self, prefix: &str) -> Vec<u8> {
        self.params.bytes_with_prefix(prefix)
    }
}
