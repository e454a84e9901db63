//! Role-separated relation trunk: two directional cross-attention states over
//! the fused sequences of a pair, pooled and concatenated into `z_ab`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::conditioning::StreamVar;
use crate::error::Result;
use crate::nn::{ca_block, init_ca_block, pool, AttnShape, Mode};
use crate::tensor::{ParamStore, Tensor};

pub const CA_A_GIVEN_B: &str = "trunk.ca_a_given_b";
pub const CA_B_GIVEN_A: &str = "trunk.ca_b_given_a";
pub const CA_TIED: &str = "trunk.ca";

fn prefixes(tied: bool) -> (&'static str, &'static str) {
    if tied {
        (CA_TIED, CA_TIED)
    } else {
        (CA_A_GIVEN_B, CA_B_GIVEN_A)
    }
}

pub fn init_trunk(store: &mut ParamStore, tied: bool, d: usize, rng: &mut ChaCha8Rng) {
    if tied {
        init_ca_block(store, CA_TIED, d, rng);
    } else {
        init_ca_block(store, CA_A_GIVEN_B, d, rng);
        init_ca_block(store, CA_B_GIVEN_A, d, rng);
    }
}

/// `(U_{a|b}, U_{b|a})`.
pub fn directional_states_graph(
    g: &mut Graph,
    store: &ParamStore,
    tied: bool,
    shape: AttnShape,
    a: StreamVar<'_>,
    b: StreamVar<'_>,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var)> {
    let (pa, pb) = prefixes(tied);
    let u_ab = ca_block(g, store, pa, shape, a.tokens, b.tokens, b.tokens, b.mask, mode)?;
    let u_ba = ca_block(g, store, pb, shape, b.tokens, a.tokens, a.tokens, a.mask, mode)?;
    Ok((u_ab, u_ba))
}

/// `z = [Pool(U_{a|b}, m_a); Pool(U_{b|a}, m_b)]`, a `1 x 2d` row.
pub fn relation_vector_graph(
    g: &mut Graph,
    u_ab: Var,
    u_ba: Var,
    mask_a: &[bool],
    mask_b: &[bool],
) -> Result<(Var, Var, Var)> {
    let p_ab = pool(g, u_ab, mask_a)?;
    let p_ba = pool(g, u_ba, mask_b)?;
    let z = g.concat_cols(&[p_ab, p_ba])?;
    Ok((p_ab, p_ba, z))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationState {
    pub u_a_given_b: Tensor,
    pub u_b_given_a: Tensor,
    pub p_a_given_b: Vec<f64>,
    pub p_b_given_a: Vec<f64>,
    pub z: Vec<f64>,
}

/// Value-level trunk evaluation in eval mode. Pairs are used in the order
/// given; no re-ordering or symmetrization is applied.
pub fn relation_state(
    store: &ParamStore,
    tied: bool,
    shape: AttnShape,
    a: (&Tensor, &[bool]),
    b: (&Tensor, &[bool]),
) -> Result<RelationState> {
    let mut g = Graph::new();
    let av = g.constant(a.0.clone());
    let bv = g.constant(b.0.clone());
    let (u_ab, u_ba) = directional_states_graph(
        &mut g,
        store,
        tied,
        shape,
        StreamVar { tokens: av, mask: a.1 },
        StreamVar { tokens: bv, mask: b.1 },
        &mut Mode::Eval,
    )?;
    let (p_ab, p_ba, z) = relation_vector_graph(&mut g, u_ab, u_ba, a.1, b.1)?;
    Ok(RelationState {
        u_a_given_b: g.value(u_ab).clone(),
        u_b_given_a: g.value(u_ba).clone(),
        p_a_given_b: g.value(p_ab).data().to_vec(),
        p_b_given_a: g.value(p_ba).data().to_vec(),
        z: g.value(z).data().to_vec(),
    })
}

/// `[second half; first half]`.
pub fn swap_halves(z: &[f64]) -> Vec<f64> {
    let h = z.len() / 2;
    z[h..].iter().chain(&z[..h]).copied().collect()
}
