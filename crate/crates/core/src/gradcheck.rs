//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::PairRecord;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::nn::Mode;
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter tensor; 0 checks all of them.
    /// Sampling always includes the coordinate with the largest gradient.
    pub max_coords_per_param: usize,
    /// Relative error is `|a - n| / max(|a|, |n|, denom_floor)`.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: 8,
            denom_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub eps: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval<F>(loss_fn: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(params, &mut g)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::InvalidArgument("loss closure must return a scalar".into()));
    }
    Ok(v.data()[0])
}

/// Compares analytic gradients from `loss_fn` against central differences for
/// every trainable parameter in `params`.
///
/// `loss_fn` builds the loss on the given graph. It must be deterministic;
/// two evaluations at the same parameters that differ in any bit are
/// reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    if opts.eps.is_nan() || opts.eps <= 0.0 || opts.tolerance.is_nan() || opts.tolerance <= 0.0 {
        return Err(Error::InvalidArgument("eps and tolerance must be positive".into()));
    }
    let mut g = Graph::new();
    let loss = loss_fn(params, &mut g)?;
    let base = g.value(loss).data()[0];
    let again = eval(&loss_fn, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations gave {base:e} and {again:e}; disable dropout"
        )));
    }
    let analytic = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut checks = Vec::new();
    let names: Vec<String> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let n = params.get(&name)?.tensor.len();
        let grad: Vec<f64> = match analytic.get(&name) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match opts.max_coords_per_param {
            k if k > 0 && k < n => {
                let top = (0..n)
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .unwrap_or(0);
                let mut c = vec![top];
                c.extend(sample(&mut rng, n, k).into_iter().filter(|&i| i != top).take(k - 1));
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for &i in &coords {
            let orig = work.get(&name)?.tensor.data()[i];
            work.get_mut(&name)?.tensor.data_mut()[i] = orig + opts.eps;
            let plus = eval(&loss_fn, &work)?;
            work.get_mut(&name)?.tensor.data_mut()[i] = orig - opts.eps;
            let minus = eval(&loss_fn, &work)?;
            work.get_mut(&name)?.tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.denom_floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        checks.push(ParamCheck {
            name,
            checked: coords.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= opts.tolerance,
        params: checks,
        max_rel_error,
        eps: opts.eps,
        tolerance: opts.tolerance,
    })
}

/// Checks the summed eval-mode loss of `arch` over `records`.
pub fn model_gradcheck(
    arch: &Architecture,
    params: &ParamStore,
    records: &[&PairRecord],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no pairs for the gradient check".into()));
    }
    finite_diff_check(
        |s, g| {
            let mut total = arch.pair_loss_graph(g, s, records[0], &mut Mode::Eval)?;
            for r in &records[1..] {
                let l = arch.pair_loss_graph(g, s, r, &mut Mode::Eval)?;
                total = g.add(total, l)?;
            }
            Ok(total)
        },
        params,
        opts,
    )
}
