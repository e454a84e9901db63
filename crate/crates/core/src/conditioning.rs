//! Within-drug conditioning: fuses the anchor (`r`) and adapter (`t`) streams
//! of one drug into a single token sequence plus a pooled vector.
//!
//! The pooled vector `g` of each variant:
//!
//! | variant            | pooled `g`                                             |
//! |--------------------|--------------------------------------------------------|
//! | `ConcatMlp`        | `MLP([Pool(Hr, mr); Pool(Ht, mt)])`                     |
//! | `OneWayTFromR`     | `Gamma(t <- r)`                                         |
//! | `OneWayRFromT`     | `Gamma(r <- t)`                                         |
//! | `TwoWayUntied`     | `MLP([Gamma(t <- r; p1); Gamma(r <- t; p2)])`           |
//! | `TwoWayTied`       | `MLP([Gamma(t <- r; p); Gamma(r <- t; p)])`             |
//!
//! with `Gamma(a <- b) = Pool(CA(Ha, Hb, Hb; mb), ma)`. The token output
//! consumed by the relation trunk is the query-side `CA` output for one-way
//! variants (so `g = Pool(tokens, mask)` there), and a per-token application
//! of the same MLP to position-aligned, zero-padded concatenations for the
//! two-way and concat variants. Those carry the `t` mask.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ca_block, init_ca_block, init_mlp, mlp, pool, AttnShape, Mode};
use crate::tensor::{ParamStore, Tensor};

pub const CA_T_FROM_R: &str = "fusion.ca_t_from_r";
pub const CA_R_FROM_T: &str = "fusion.ca_r_from_t";
pub const CA_TIED: &str = "fusion.ca";
pub const MIX: &str = "fusion.mix";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionVariant {
    #[serde(rename = "concat_mlp")]
    ConcatMlp,
    #[serde(rename = "oneway_t_from_r")]
    OneWayTFromR,
    #[serde(rename = "oneway_r_from_t")]
    OneWayRFromT,
    #[serde(rename = "twoway_untied")]
    #[default]
    TwoWayUntied,
    #[serde(rename = "twoway_tied")]
    TwoWayTied,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::ConcatMlp,
        FusionVariant::OneWayTFromR,
        FusionVariant::OneWayRFromT,
        FusionVariant::TwoWayUntied,
        FusionVariant::TwoWayTied,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FusionVariant::ConcatMlp => "concat_mlp",
            FusionVariant::OneWayTFromR => "oneway_t_from_r",
            FusionVariant::OneWayRFromT => "oneway_r_from_t",
            FusionVariant::TwoWayUntied => "twoway_untied",
            FusionVariant::TwoWayTied => "twoway_tied",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion variant '{s}'")))
    }
}

/// Registers the conditioning parameters `variant` needs.
pub fn init_fusion(store: &mut ParamStore, variant: FusionVariant, d: usize, rng: &mut ChaCha8Rng) {
    match variant {
        FusionVariant::ConcatMlp => init_mlp(store, MIX, 2 * d, d, d, rng),
        FusionVariant::OneWayTFromR => init_ca_block(store, CA_T_FROM_R, d, rng),
        FusionVariant::OneWayRFromT => init_ca_block(store, CA_R_FROM_T, d, rng),
        FusionVariant::TwoWayUntied => {
            init_ca_block(store, CA_T_FROM_R, d, rng);
            init_ca_block(store, CA_R_FROM_T, d, rng);
            init_mlp(store, MIX, 2 * d, d, d, rng);
        }
        FusionVariant::TwoWayTied => {
            init_ca_block(store, CA_TIED, d, rng);
            init_mlp(store, MIX, 2 * d, d, d, rng);
        }
    }
}

/// A projected stream on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StreamVar<'m> {
    pub tokens: Var,
    pub mask: &'m [bool],
}

/// Graph-level output of [`fuse_graph`].
#[derive(Clone, Debug)]
pub struct FusedVars {
    pub tokens: Var,
    pub mask: Vec<bool>,
    pub pooled: Var,
}

/// `CA(alpha, beta, beta; m_beta)` and its pool over `m_alpha`.
pub fn gamma_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    shape: AttnShape,
    alpha: StreamVar<'_>,
    beta: StreamVar<'_>,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var)> {
    let ca = ca_block(g, store, prefix, shape, alpha.tokens, beta.tokens, beta.tokens, beta.mask, mode)?;
    let pooled = pool(g, ca, alpha.mask)?;
    Ok((ca, pooled))
}

fn padded_mask(mask: &[bool], len: usize) -> Vec<bool> {
    let mut m = mask.to_vec();
    m.resize(len, false);
    m
}

/// Position-aligned concat of two masked sequences, mixed per token by the
/// shared MLP, re-masked with the `t` mask.
fn mix_tokens(
    g: &mut Graph,
    store: &ParamStore,
    first: StreamVar<'_>,
    second: StreamVar<'_>,
    out_mask: &[bool],
) -> Result<(Var, Vec<bool>)> {
    let len = g.shape(first.tokens).0.max(g.shape(second.tokens).0);
    let a = g.mask_rows(first.tokens, first.mask)?;
    let a = g.pad_rows(a, len)?;
    let b = g.mask_rows(second.tokens, second.mask)?;
    let b = g.pad_rows(b, len)?;
    let cat = g.concat_cols(&[a, b])?;
    let mixed = mlp(g, store, MIX, cat)?;
    let mask = padded_mask(out_mask, len);
    Ok((g.mask_rows(mixed, &mask)?, mask))
}

fn check_width(g: &Graph, v: Var, d: usize) -> Result<()> {
    let w = g.shape(v).1;
    if w != d {
        return Err(Error::Config(format!("stream width {w} does not match model width {d}")));
    }
    Ok(())
}

pub fn fuse_graph(
    g: &mut Graph,
    store: &ParamStore,
    variant: FusionVariant,
    shape: AttnShape,
    r: StreamVar<'_>,
    t: StreamVar<'_>,
    mode: &mut Mode<'_>,
) -> Result<FusedVars> {
    check_width(g, r.tokens, shape.d)?;
    check_width(g, t.tokens, shape.d)?;
    match variant {
        FusionVariant::ConcatMlp => {
            let pr = pool(g, r.tokens, r.mask)?;
            let pt = pool(g, t.tokens, t.mask)?;
            let cat = g.concat_cols(&[pr, pt])?;
            let pooled = mlp(g, store, MIX, cat)?;
            let (tokens, mask) = mix_tokens(g, store, r, t, t.mask)?;
            Ok(FusedVars { tokens, mask, pooled })
        }
        FusionVariant::OneWayTFromR => {
            let (tokens, pooled) = gamma_graph(g, store, CA_T_FROM_R, shape, t, r, mode)?;
            Ok(FusedVars {
                tokens,
                mask: t.mask.to_vec(),
                pooled,
            })
        }
        FusionVariant::OneWayRFromT => {
            let (tokens, pooled) = gamma_graph(g, store, CA_R_FROM_T, shape, r, t, mode)?;
            Ok(FusedVars {
                tokens,
                mask: r.mask.to_vec(),
                pooled,
            })
        }
        FusionVariant::TwoWayUntied | FusionVariant::TwoWayTied => {
            let (p_tr, p_rt) = if variant == FusionVariant::TwoWayTied {
                (CA_TIED, CA_TIED)
            } else {
                (CA_T_FROM_R, CA_R_FROM_T)
            };
            let (t_from_r, g_tr) = gamma_graph(g, store, p_tr, shape, t, r, mode)?;
            let (r_from_t, g_rt) = gamma_graph(g, store, p_rt, shape, r, t, mode)?;
            let cat = g.concat_cols(&[g_tr, g_rt])?;
            let pooled = mlp(g, store, MIX, cat)?;
            let (tokens, mask) = mix_tokens(
                g,
                store,
                StreamVar {
                    tokens: t_from_r,
                    mask: t.mask,
                },
                StreamVar {
                    tokens: r_from_t,
                    mask: r.mask,
                },
                t.mask,
            )?;
            Ok(FusedVars { tokens, mask, pooled })
        }
    }
}

/// Fused representation of one drug.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedDrug {
    pub tokens: Tensor,
    pub mask: Vec<bool>,
    pub pooled: Vec<f64>,
}

/// Value-level `Gamma(alpha <- beta)` in eval mode.
pub fn gamma(
    store: &ParamStore,
    prefix: &str,
    shape: AttnShape,
    alpha: (&Tensor, &[bool]),
    beta: (&Tensor, &[bool]),
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let a = g.constant(alpha.0.clone());
    let b = g.constant(beta.0.clone());
    let (_, pooled) = gamma_graph(
        &mut g,
        store,
        prefix,
        shape,
        StreamVar { tokens: a, mask: alpha.1 },
        StreamVar { tokens: b, mask: beta.1 },
        &mut Mode::Eval,
    )?;
    Ok(g.value(pooled).data().to_vec())
}

/// Value-level fusion in eval mode.
pub fn fuse(
    store: &ParamStore,
    variant: FusionVariant,
    shape: AttnShape,
    r: (&Tensor, &[bool]),
    t: (&Tensor, &[bool]),
) -> Result<FusedDrug> {
    let mut g = Graph::new();
    let rv = g.constant(r.0.clone());
    let tv = g.constant(t.0.clone());
    let out = fuse_graph(
        &mut g,
        store,
        variant,
        shape,
        StreamVar { tokens: rv, mask: r.1 },
        StreamVar { tokens: tv, mask: t.1 },
        &mut Mode::Eval,
    )?;
    Ok(FusedDrug {
        tokens: g.value(out.tokens).clone(),
        mask: out.mask,
        pooled: g.value(out.pooled).data().to_vec(),
    })
}
