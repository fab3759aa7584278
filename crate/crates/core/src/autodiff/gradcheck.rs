//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::{Gradients, ParamId, ParameterStore};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Stores with more scalars than this are checked on a random sample.
pub const FULL_CHECK_LIMIT: usize = 400;
pub const SAMPLE_SIZE: usize = 200;

/// Relative errors are taken against at least `FLOOR_PER_UNIT_LOSS · max(1, |L|)`.
/// Central differences carry roundoff of roughly `ε_mach·|L|/ε`, which would
/// otherwise dominate coordinates whose true gradient is near zero.
pub const FLOOR_PER_UNIT_LOSS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
    pub max_abs_error: f64,
    pub denominator_floor: f64,
    /// Coordinates where both gradients were below the floor.
    pub below_floor: usize,
}

fn eval_loss<F>(store: &ParameterStore, build: &F) -> Result<f64>
where
    F: Fn(&ParameterStore, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(store, &mut g)?;
    let v = g.value(loss);
    if v.shape() != (1, 1) {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            left: v.shape(),
            right: (1, 1),
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

pub fn analytic_gradients<F>(store: &ParameterStore, build: &F) -> Result<(f64, Gradients)>
where
    F: Fn(&ParameterStore, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(store, &mut g)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    g.backward(loss)?;
    Ok((v, g.param_gradients()))
}

/// Compares analytic gradients against `(L(θ+εe) − L(θ−εe)) / 2ε`.
///
/// Relative error per coordinate uses the denominator
/// `max(|analytic|, |numeric|, floor)` with the floor from
/// [`FLOOR_PER_UNIT_LOSS`]. Every coordinate is checked for small stores,
/// otherwise a seeded sample of [`SAMPLE_SIZE`] coordinates.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    build: F,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Graph) -> Result<NodeId>,
{
    let (loss, grads) = analytic_gradients(store, &build)?;
    let floor = FLOOR_PER_UNIT_LOSS * loss.abs().max(1.0);

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        for k in 0..store.value(id).len() {
            coords.push((id, k));
        }
    }
    if coords.len() > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = sample(&mut rng, coords.len(), SAMPLE_SIZE);
        let mut idx: Vec<usize> = picked.into_iter().collect();
        idx.sort_unstable();
        coords = idx.into_iter().map(|i| coords[i]).collect();
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: coords.len(),
        max_abs_error: 0.0,
        denominator_floor: floor,
        below_floor: 0,
    };
    for (id, k) in coords {
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + eps;
        let plus = eval_loss(store, &build);
        store.value_mut(id).data_mut()[k] = orig - eps;
        let minus = eval_loss(store, &build);
        store.value_mut(id).data_mut()[k] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
        let peak = analytic.abs().max(numeric.abs());
        if peak < floor {
            report.below_floor += 1;
        }
        let abs = (analytic - numeric).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        let rel = abs / peak.max(floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = store.name(id).to_owned();
            report.worst_index = k;
        }
    }
    Ok(report)
}
