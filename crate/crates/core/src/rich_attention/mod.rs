//! Attention scores with order and log-distance penalties on the layout axes.
//!
//! For local pairs, each head scores
//! `q_i·k_j/√d + Σ_a [o·ln p + (1−o)·ln(1−p)] − θ_a²(d − μ)²/2`
//! where `p = σ(affine([q_i; k_j]))` and `μ = affine([q_i; k_j])`.

pub mod score;

use std::io::Write;
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Init, Mask, NodeId, ParamId, ParameterStore, Tensor, WEIGHT_STD};
use crate::doc_model::BoundingBox;
use crate::error::{Error, Result};

/// Page coordinates are mapped onto a `0..GRID_SCALE` grid before features are taken.
pub const GRID_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::X, Axis::Y];

    fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
        }
    }
}

/// Order and log-distance of every ordered token pair, per axis.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    n: usize,
    order: [Rc<Tensor>; 2],
    logdist: [Rc<Tensor>; 2],
}

impl PairFeatures {
    /// `centers` already on the grid.
    pub fn from_grid_centers(centers: &[(f64, f64)]) -> Self {
        let n = centers.len();
        let build = |coord: &dyn Fn(usize) -> f64| {
            let mut o = Tensor::zeros(n, n);
            let mut d = Tensor::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let (ci, cj) = (coord(i), coord(j));
                    o.set(i, j, if ci < cj { 1.0 } else { 0.0 });
                    d.set(i, j, (ci - cj).abs().ln_1p());
                }
            }
            (Rc::new(o), Rc::new(d))
        };
        let (ox, dx) = build(&|i| centers[i].0);
        let (oy, dy) = build(&|i| centers[i].1);
        Self {
            n,
            order: [ox, oy],
            logdist: [dx, dy],
        }
    }

    /// `boxes` in normalized page units.
    pub fn from_boxes(boxes: &[BoundingBox]) -> Self {
        let centers: Vec<(f64, f64)> = boxes
            .iter()
            .map(|b| {
                let (x, y) = b.center();
                (x * GRID_SCALE, y * GRID_SCALE)
            })
            .collect();
        Self::from_grid_centers(&centers)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn order(&self, axis: Axis) -> &Rc<Tensor> {
        &self.order[axis.index()]
    }

    pub fn logdist(&self, axis: Axis) -> &Rc<Tensor> {
        &self.logdist[axis.index()]
    }
}

/// Which penalty terms contribute to the scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSet {
    pub order_x: bool,
    pub logdist_x: bool,
    pub order_y: bool,
    pub logdist_y: bool,
}

impl FeatureSet {
    pub const ALL: Self = Self {
        order_x: true,
        logdist_x: true,
        order_y: true,
        logdist_y: true,
    };
    pub const NONE: Self = Self {
        order_x: false,
        logdist_x: false,
        order_y: false,
        logdist_y: false,
    };

    pub fn order(&self, axis: Axis) -> bool {
        match axis {
            Axis::X => self.order_x,
            Axis::Y => self.order_y,
        }
    }

    pub fn logdist(&self, axis: Axis) -> bool {
        match axis {
            Axis::X => self.logdist_x,
            Axis::Y => self.logdist_y,
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }
}

/// Penalty parameters for one axis of one head.
#[derive(Debug, Clone, Copy)]
pub struct AxisParams {
    pub order_q: ParamId,
    pub order_k: ParamId,
    pub order_b: ParamId,
    pub dist_q: ParamId,
    pub dist_k: ParamId,
    pub dist_b: ParamId,
    pub theta: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    /// Present when the layer was built with rich attention.
    pub rich: Option<[AxisParams; 2]>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub hidden: usize,
    pub head_dim: usize,
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    /// Projections go under `attn_prefix`, penalty parameters under `rich_prefix`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        attn_prefix: &str,
        rich_prefix: Option<&str>,
        hidden: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || hidden % num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {hidden} is not divisible by {num_heads} heads"
            )));
        }
        let dh = hidden / num_heads;
        let w = Init::TruncatedNormal { std: WEIGHT_STD };
        let mut heads = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            let p = format!("{attn_prefix}/head{h}");
            let mut reg = |name: &str, r, c, init| store.register(&format!("{p}/{name}"), r, c, init, rng);
            let (wq, bq) = (reg("wq", hidden, dh, w)?, reg("bq", 1, dh, Init::Zeros)?);
            let (wk, bk) = (reg("wk", hidden, dh, w)?, reg("bk", 1, dh, Init::Zeros)?);
            let (wv, bv) = (reg("wv", hidden, dh, w)?, reg("bv", 1, dh, Init::Zeros)?);
            let rich = match rich_prefix {
                None => None,
                Some(rp) => {
                    let mut axis = |a: Axis| -> Result<AxisParams> {
                        let q = format!("{rp}/head{h}/{}", a.as_str());
                        let mut reg = |name: &str, r, c, init| {
                            store.register(&format!("{q}/{name}"), r, c, init, rng)
                        };
                        Ok(AxisParams {
                            order_q: reg("order_q", dh, 1, w)?,
                            order_k: reg("order_k", dh, 1, w)?,
                            order_b: reg("order_b", 1, 1, Init::Zeros)?,
                            dist_q: reg("dist_q", dh, 1, w)?,
                            dist_k: reg("dist_k", dh, 1, w)?,
                            dist_b: reg("dist_b", 1, 1, Init::Zeros)?,
                            theta: reg("theta", 1, 1, Init::Constant(1.0))?,
                        })
                    };
                    Some([axis(Axis::X)?, axis(Axis::Y)?])
                }
            };
            heads.push(HeadParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                rich,
            });
        }
        let wo = store.register(&format!("{attn_prefix}/wo"), hidden, hidden, w, rng)?;
        let bo = store.register(&format!("{attn_prefix}/bo"), 1, hidden, Init::Zeros, rng)?;
        Ok(Self {
            hidden,
            head_dim: dh,
            heads,
            wo,
            bo,
        })
    }

    pub fn has_rich(&self) -> bool {
        self.heads.iter().all(|h| h.rich.is_some())
    }
}

/// `affine([q_i; k_j])` for all pairs, as `q·w_q + (k·w_k)ᵀ + b`.
fn pair_affine(
    g: &mut Graph,
    store: &ParameterStore,
    q: NodeId,
    k: NodeId,
    wq: ParamId,
    wk: ParamId,
    b: ParamId,
) -> Result<NodeId> {
    let (wq, wk, b) = (g.param(store, wq), g.param(store, wk), g.param(store, b));
    let a = g.matmul(q, wq)?;
    let c = g.matmul(k, wk)?;
    let ct = g.transpose(c);
    let s = g.add(a, ct)?;
    g.add(s, b)
}

/// Ideal-order logits `affine([q_i; k_j])`; `p = σ` of these.
pub fn order_logits(
    g: &mut Graph,
    store: &ParameterStore,
    axis: &AxisParams,
    q: NodeId,
    k: NodeId,
) -> Result<NodeId> {
    pair_affine(g, store, q, k, axis.order_q, axis.order_k, axis.order_b)
}

/// Ideal log-distances `μ_ij`.
pub fn ideal_distance(
    g: &mut Graph,
    store: &ParameterStore,
    axis: &AxisParams,
    q: NodeId,
    k: NodeId,
) -> Result<NodeId> {
    pair_affine(g, store, q, k, axis.dist_q, axis.dist_k, axis.dist_b)
}

/// Sum of the enabled penalties over local pairs, `n × n`.
pub fn rich_penalty(
    g: &mut Graph,
    store: &ParameterStore,
    axes: &[AxisParams; 2],
    q_local: NodeId,
    k_local: NodeId,
    pair: &PairFeatures,
    features: FeatureSet,
) -> Result<Option<NodeId>> {
    let n = g.shape(q_local).0;
    if pair.len() != n || g.shape(k_local).0 != n {
        return Err(Error::ShapeMismatch {
            op: "rich_penalty",
            left: (n, n),
            right: (pair.len(), pair.len()),
        });
    }
    let mut total: Option<NodeId> = None;
    let mut add = |g: &mut Graph, t: NodeId| -> Result<()> {
        total = Some(match total {
            None => t,
            Some(s) => g.add(s, t)?,
        });
        Ok(())
    };
    for axis in Axis::BOTH {
        let ap = &axes[axis.index()];
        if features.order(axis) {
            let z = order_logits(g, store, ap, q_local, k_local)?;
            let s = g.order_score(z, pair.order(axis).clone())?;
            add(g, s)?;
        }
        if features.logdist(axis) {
            let mu = ideal_distance(g, store, ap, q_local, k_local)?;
            let theta = g.param(store, ap.theta);
            let s = g.distance_score(mu, theta, pair.logdist(axis).clone())?;
            add(g, s)?;
        }
    }
    Ok(total)
}

/// Pre-softmax scores of one head over `num_global + n` positions. The
/// penalty applies to local pairs only; global rows and columns keep the
/// scaled dot product.
#[allow(clippy::too_many_arguments)]
pub fn head_scores(
    g: &mut Graph,
    store: &ParameterStore,
    head: &HeadParams,
    q: NodeId,
    k: NodeId,
    pair: Option<&PairFeatures>,
    features: FeatureSet,
    num_global: usize,
) -> Result<NodeId> {
    let (m, dh) = g.shape(q);
    let kt = g.transpose(k);
    let dot = g.matmul(q, kt)?;
    let dot = g.scale(dot, 1.0 / (dh as f64).sqrt());
    let (Some(axes), Some(pair)) = (head.rich.as_ref(), pair) else {
        return Ok(dot);
    };
    if features.is_empty() || m == num_global {
        return Ok(dot);
    }
    let n = m - num_global;
    let ql = g.slice_rows(q, num_global, n)?;
    let kl = g.slice_rows(k, num_global, n)?;
    match rich_penalty(g, store, axes, ql, kl, pair, features)? {
        None => Ok(dot),
        Some(p) => {
            let p = g.pad_leading(p, num_global);
            g.add(dot, p)
        }
    }
}

/// Multi-head masked attention followed by the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParameterStore,
    params: &AttentionParams,
    x: NodeId,
    mask: &Rc<Mask>,
    pair: Option<&PairFeatures>,
    features: FeatureSet,
    num_global: usize,
) -> Result<NodeId> {
    let mut outs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let (q, k, v) = project(g, store, head, x)?;
        let s = head_scores(g, store, head, q, k, pair, features, num_global)?;
        let a = g.masked_softmax(s, mask.clone())?;
        outs.push(g.matmul(a, v)?);
    }
    let ctx = g.concat_cols(&outs)?;
    let (wo, bo) = (g.param(store, params.wo), g.param(store, params.bo));
    g.affine(ctx, wo, bo)
}

fn project(
    g: &mut Graph,
    store: &ParameterStore,
    head: &HeadParams,
    x: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let mut aff = |w, b| {
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.affine(x, w, b)
    };
    Ok((aff(head.wq, head.bq)?, aff(head.wk, head.bk)?, aff(head.wv, head.bv)?))
}

/// One penalty matrix for inspection.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    pub head: usize,
    pub axis: Axis,
    /// `"order"` or `"distance"`.
    pub kind: &'static str,
    pub values: Tensor,
}

/// Evaluates every head's order and distance penalties on `states`
/// (`num_global + n` rows).
pub fn penalty_matrices(
    store: &ParameterStore,
    params: &AttentionParams,
    states: &Tensor,
    pair: &PairFeatures,
    num_global: usize,
) -> Result<Vec<PenaltyMatrix>> {
    let mut out = Vec::new();
    let n = states.rows() - num_global;
    for (h, head) in params.heads.iter().enumerate() {
        let Some(axes) = head.rich.as_ref() else { continue };
        let mut g = Graph::new();
        let x = g.constant(states.clone());
        let (q, k, _) = project(&mut g, store, head, x)?;
        let ql = g.slice_rows(q, num_global, n)?;
        let kl = g.slice_rows(k, num_global, n)?;
        for axis in Axis::BOTH {
            let ap = &axes[axis.index()];
            let z = order_logits(&mut g, store, ap, ql, kl)?;
            let so = g.order_score(z, pair.order(axis).clone())?;
            let mu = ideal_distance(&mut g, store, ap, ql, kl)?;
            let th = g.param(store, ap.theta);
            let sd = g.distance_score(mu, th, pair.logdist(axis).clone())?;
            out.push(PenaltyMatrix {
                head: h,
                axis,
                kind: "order",
                values: g.value(so).clone(),
            });
            out.push(PenaltyMatrix {
                head: h,
                axis,
                kind: "distance",
                values: g.value(sd).clone(),
            });
        }
    }
    Ok(out)
}

/// Writes `head,axis,kind,i,j,value` rows.
pub fn write_penalty_csv<W: Write>(mut w: W, matrices: &[PenaltyMatrix]) -> std::io::Result<()> {
    writeln!(w, "head,axis,kind,i,j,value")?;
    for m in matrices {
        for i in 0..m.values.rows() {
            for j in 0..m.values.cols() {
                writeln!(
                    w,
                    "{},{},{},{i},{j},{}",
                    m.head,
                    m.axis.as_str(),
                    m.kind,
                    m.values.get(i, j)
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: usize, c: usize, seed: u64) -> Tensor {
        let mut g = rng(seed);
        Tensor::from_vec(r, c, (0..r * c).map(|_| g.random_range(-1.0..1.0)).collect())
    }

    fn random_centers(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut g = rng(seed);
        (0..n)
            .map(|_| (g.random_range(0..1000) as f64, g.random_range(0..1000) as f64))
            .collect()
    }

    fn full_mask(m: usize) -> Rc<Mask> {
        Rc::new(Mask::from_fn(m, m, |_, _| true))
    }

    #[test]
    fn pair_feature_examples() {
        let p = PairFeatures::from_grid_centers(&[(5.0, 5.0), (5.0, 5.0)]);
        assert_eq!(p.order(Axis::X).get(0, 1), 0.0);
        assert_eq!(p.order(Axis::X).get(1, 0), 0.0);
        assert_eq!(p.logdist(Axis::Y).get(0, 1), 0.0);

        let p = PairFeatures::from_grid_centers(&[(0.0, 0.0), (9.0, 0.0)]);
        assert_eq!(p.order(Axis::X).get(0, 1), 1.0);
        assert_eq!(p.order(Axis::X).get(1, 0), 0.0);
        assert!((p.logdist(Axis::X).get(0, 1) - 10f64.ln()).abs() < 1e-15);
        assert_eq!(p.logdist(Axis::X).get(1, 0), p.logdist(Axis::X).get(0, 1));
    }

    #[test]
    fn pair_features_translation_invariant() {
        // Integer pixels on a 1024 page map to exact grid values.
        let mut g = rng(4);
        let boxes: Vec<BoundingBox> = (0..12)
            .map(|_| {
                let (x, y) = (g.random_range(0..800) as f64, g.random_range(0..800) as f64);
                BoundingBox::new(x, y, x + 40.0, y + 12.0).unwrap()
            })
            .collect();
        let norm = |bs: &[BoundingBox]| -> Vec<BoundingBox> {
            bs.iter()
                .map(|b| BoundingBox::new(b.x0 / 1024.0, b.y0 / 1024.0, b.x1 / 1024.0, b.y1 / 1024.0).unwrap())
                .collect()
        };
        let moved: Vec<BoundingBox> = boxes.iter().map(|b| b.translate(100.0, 64.0)).collect();
        let (a, b) = (
            PairFeatures::from_boxes(&norm(&boxes)),
            PairFeatures::from_boxes(&norm(&moved)),
        );
        for axis in Axis::BOTH {
            assert_eq!(a.order(axis), b.order(axis));
            assert_eq!(a.logdist(axis), b.logdist(axis));
        }
    }

    fn setup(hidden: usize, heads: usize, rich: bool, seed: u64) -> (ParameterStore, AttentionParams) {
        let mut store = ParameterStore::new();
        let p = AttentionParams::register(
            &mut store,
            "attn",
            rich.then_some("rich"),
            hidden,
            heads,
            &mut rng(seed),
        )
        .unwrap();
        (store, p)
    }

    fn zero_rich(store: &mut ParameterStore, params: &AttentionParams) {
        for h in &params.heads {
            for a in h.rich.as_ref().unwrap() {
                for id in [a.order_q, a.order_k, a.order_b, a.dist_q, a.dist_k, a.dist_b] {
                    store.value_mut(id).scale_in_place(0.0);
                }
            }
        }
    }

    fn scores(
        store: &ParameterStore,
        params: &AttentionParams,
        x: &Tensor,
        pair: Option<&PairFeatures>,
        features: FeatureSet,
        num_global: usize,
    ) -> Tensor {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (q, k, _) = project(&mut g, store, &params.heads[0], xn).unwrap();
        let s = head_scores(&mut g, store, &params.heads[0], q, k, pair, features, num_global).unwrap();
        g.value(s).clone()
    }

    #[test]
    fn empty_feature_set_is_plain_attention() {
        let (store, params) = setup(8, 2, true, 1);
        let (plain_store, plain) = setup(8, 2, false, 1);
        let x = random_tensor(5, 8, 2);
        let pair = PairFeatures::from_grid_centers(&random_centers(5, 3));
        let a = scores(&store, &params, &x, Some(&pair), FeatureSet::NONE, 0);
        // Same seed draws the same projections first in both stores.
        assert_eq!(store.value(params.heads[0].wq), plain_store.value(plain.heads[0].wq));
        let b = scores(&plain_store, &plain, &x, Some(&pair), FeatureSet::ALL, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn colocated_tokens_with_zero_affines() {
        let (mut store, params) = setup(8, 1, true, 5);
        zero_rich(&mut store, &params);
        let x = random_tensor(3, 8, 6);
        let pair = PairFeatures::from_grid_centers(&[(10.0, 10.0); 3]);
        let rich = scores(&store, &params, &x, Some(&pair), FeatureSet::ALL, 0);
        let plain = scores(&store, &params, &x, None, FeatureSet::ALL, 0);
        for i in 0..3 {
            for j in 0..3 {
                let diff = rich.get(i, j) - plain.get(i, j);
                assert!((diff - 2.0 * 0.5f64.ln()).abs() < 1e-12);
                assert!((diff + 1.3863).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn global_rows_use_dot_product_only() {
        let (store, params) = setup(8, 1, true, 7);
        let x = random_tensor(5, 8, 8);
        let pair = PairFeatures::from_grid_centers(&random_centers(4, 9));
        let rich = scores(&store, &params, &x, Some(&pair), FeatureSet::ALL, 1);
        let plain = scores(&store, &params, &x, None, FeatureSet::ALL, 1);
        for j in 0..5 {
            assert_eq!(rich.get(0, j), plain.get(0, j));
            assert_eq!(rich.get(j, 0), plain.get(j, 0));
        }
        assert!(rich.get(2, 3) < plain.get(2, 3));
    }

    #[test]
    fn penalties_are_non_positive() {
        let (store, params) = setup(8, 2, true, 11);
        let x = random_tensor(6, 8, 12);
        let pair = PairFeatures::from_grid_centers(&random_centers(6, 13));
        for m in penalty_matrices(&store, &params, &x, &pair, 0).unwrap() {
            assert!(m.values.data().iter().all(|&v| v <= 0.0));
        }
    }

    #[test]
    fn swapping_axes_and_parameters_commutes() {
        let (mut store, params) = setup(8, 1, true, 21);
        let x = random_tensor(5, 8, 22);
        let centers = random_centers(5, 23);
        let swapped: Vec<(f64, f64)> = centers.iter().map(|&(a, b)| (b, a)).collect();
        let before = scores(&store, &params, &x, Some(&PairFeatures::from_grid_centers(&centers)), FeatureSet::ALL, 0);
        let [ax, ay] = params.heads[0].rich.unwrap();
        let pairs = [
            (ax.order_q, ay.order_q),
            (ax.order_k, ay.order_k),
            (ax.order_b, ay.order_b),
            (ax.dist_q, ay.dist_q),
            (ax.dist_k, ay.dist_k),
            (ax.dist_b, ay.dist_b),
            (ax.theta, ay.theta),
        ];
        for (a, b) in pairs {
            let (va, vb) = (store.value(a).clone(), store.value(b).clone());
            *store.value_mut(a) = vb;
            *store.value_mut(b) = va;
        }
        let after = scores(&store, &params, &x, Some(&PairFeatures::from_grid_centers(&swapped)), FeatureSet::ALL, 0);
        assert!(before.max_abs_diff(&after) < 1e-12);
    }

    #[test]
    fn softmax_ignores_row_constants() {
        let (store, params) = setup(8, 1, true, 31);
        let x = random_tensor(4, 8, 32);
        let pair = PairFeatures::from_grid_centers(&random_centers(4, 33));
        let s = scores(&store, &params, &x, Some(&pair), FeatureSet::ALL, 0);
        let mut shifted = s.clone();
        for i in 0..4 {
            for v in shifted.row_mut(i) {
                *v += 3.0 * i as f64 - 1.0;
            }
        }
        let mut g = Graph::new();
        let (a, b) = (g.constant(s), g.constant(shifted));
        let (pa, pb) = (
            g.masked_softmax(a, full_mask(4)).unwrap(),
            g.masked_softmax(b, full_mask(4)).unwrap(),
        );
        assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-12);
    }

    #[test]
    fn rich_layer_gradients_match_finite_differences() {
        let (mut store, params) = setup(4, 2, true, 41);
        // Larger weights keep every gradient well away from zero.
        for id in store.ids().collect::<Vec<_>>() {
            let t = random_tensor(store.value(id).rows(), store.value(id).cols(), 100 + id.index() as u64);
            *store.value_mut(id) = t.map(|v| 0.5 * v);
        }
        let x = random_tensor(4, 4, 42);
        let pair = PairFeatures::from_grid_centers(&random_centers(3, 43));
        let mask = Rc::new(Mask::from_fn(4, 4, |i, j| i == 0 || j == 0 || i.abs_diff(j) <= 1));
        let target = random_tensor(4, 4, 44);
        let report = grad_check(
            &mut store,
            |s, g| {
                let xn = g.constant(x.clone());
                let y = multi_head_attention(g, s, &params, xn, &mask, Some(&pair), FeatureSet::ALL, 1)?;
                let t = g.constant(target.clone());
                g.squared_error(y, t)
            },
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
