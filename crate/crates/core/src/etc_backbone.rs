//! Local-global transformer over Super-Tokens with MLM and tagging heads.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Init, Mask, NodeId, ParamId, ParameterStore, Tensor, WEIGHT_STD};
use crate::doc_model::{Document, MAX_SEQ};
use crate::error::{Error, Result};
use crate::graph_builder::LayoutGraph;
use crate::rich_attention::{multi_head_attention, AttentionParams, FeatureSet, PairFeatures};
use crate::supertoken_gcn::{run_layers, EdgeIndex, GcnConfig, GcnParams, InputEmbedding};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub local_radius: usize,
    pub num_global: usize,
    pub max_seq: usize,
    pub use_rich_attention: bool,
    pub use_gcn: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden: 32,
            num_heads: 4,
            local_radius: 8,
            num_global: 1,
            max_seq: MAX_SEQ,
            use_rich_attention: true,
            use_gcn: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gcn: GcnConfig,
    pub num_tags: usize,
    pub features: FeatureSet,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.local_radius == 0 {
            return Err(Error::Config("local radius must be at least 1".into()));
        }
        if b.num_global != 1 {
            return Err(Error::Config("exactly one global token is supported".into()));
        }
        if b.num_heads == 0 || b.hidden % b.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                b.hidden, b.num_heads
            )));
        }
        if b.max_seq == 0 || b.max_seq > MAX_SEQ {
            return Err(Error::Config(format!("max_seq must be in 1..={MAX_SEQ}")));
        }
        if self.gcn.hidden != b.hidden {
            return Err(Error::Config(format!(
                "graph encoder width {} differs from transformer width {}",
                self.gcn.hidden, b.hidden
            )));
        }
        if self.num_tags == 0 {
            return Err(Error::Config("num_tags must be positive".into()));
        }
        self.gcn.validate()
    }
}

/// Global positions come first: the global token attends to and is attended
/// by every position; local `i` and `j` see each other iff `|i − j| ≤ r`.
pub fn build_mask(n: usize, r: usize, num_global: usize) -> Result<Mask> {
    if n == 0 {
        return Err(Error::invalid("cannot build an attention mask for an empty sequence"));
    }
    let m = n + num_global;
    Ok(Mask::from_fn(m, m, |i, j| {
        i < num_global || j < num_global || (i - num_global).abs_diff(j - num_global) <= r
    }))
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1_scale: ParamId,
    pub ln1_shift: ParamId,
    pub ffn1_w: ParamId,
    pub ffn1_b: ParamId,
    pub ffn2_w: ParamId,
    pub ffn2_b: ParamId,
    pub ln2_scale: ParamId,
    pub ln2_shift: ParamId,
}

impl LayerParams {
    fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        index: usize,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let h = cfg.hidden;
        let p = format!("etc/layer{index}");
        let rich = format!("richattn/layer{index}");
        let attn = AttentionParams::register(
            store,
            &format!("{p}/attn"),
            cfg.use_rich_attention.then_some(rich.as_str()),
            h,
            cfg.num_heads,
            rng,
        )?;
        let w = Init::TruncatedNormal { std: WEIGHT_STD };
        let mut reg = |name: &str, r, c, init| store.register(&format!("{p}/{name}"), r, c, init, rng);
        Ok(Self {
            attn,
            ln1_scale: reg("ln1_scale", 1, h, Init::Constant(1.0))?,
            ln1_shift: reg("ln1_shift", 1, h, Init::Zeros)?,
            ffn1_w: reg("ffn1_w", h, 4 * h, w)?,
            ffn1_b: reg("ffn1_b", 1, 4 * h, Init::Zeros)?,
            ffn2_w: reg("ffn2_w", 4 * h, h, w)?,
            ffn2_b: reg("ffn2_b", 1, h, Init::Zeros)?,
            ln2_scale: reg("ln2_scale", 1, h, Init::Constant(1.0))?,
            ln2_shift: reg("ln2_shift", 1, h, Init::Zeros)?,
        })
    }
}

fn norm(g: &mut Graph, store: &ParameterStore, x: NodeId, scale: ParamId, shift: ParamId) -> Result<NodeId> {
    let n = g.layer_norm(x);
    let (s, b) = (g.param(store, scale), g.param(store, shift));
    let y = g.mul(n, s)?;
    g.add(y, b)
}

/// Attention and feed-forward blocks, each with a residual and layer norm.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    g: &mut Graph,
    store: &ParameterStore,
    layer: &LayerParams,
    x: NodeId,
    mask: &Rc<Mask>,
    pair: Option<&PairFeatures>,
    features: FeatureSet,
    num_global: usize,
) -> Result<NodeId> {
    let a = multi_head_attention(g, store, &layer.attn, x, mask, pair, features, num_global)?;
    let r1 = g.add(x, a)?;
    let h1 = norm(g, store, r1, layer.ln1_scale, layer.ln1_shift)?;
    let (w1, b1) = (g.param(store, layer.ffn1_w), g.param(store, layer.ffn1_b));
    let f = g.affine(h1, w1, b1)?;
    let f = g.gelu(f);
    let (w2, b2) = (g.param(store, layer.ffn2_w), g.param(store, layer.ffn2_b));
    let f = g.affine(f, w2, b2)?;
    let r2 = g.add(h1, f)?;
    norm(g, store, r2, layer.ln2_scale, layer.ln2_shift)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Mlm,
    Tagging,
}

/// Parameter handles for the whole model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: InputEmbedding,
    pub gcn: Option<GcnParams>,
    pub global: ParamId,
    pub layers: Vec<LayerParams>,
    pub mlm_w: ParamId,
    pub mlm_b: ParamId,
    pub tag_w: ParamId,
    pub tag_b: ParamId,
}

impl Model {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let b = config.backbone;
        let h = b.hidden;
        let embed = InputEmbedding::register(
            store,
            "embed",
            config.gcn.vocab_size,
            config.gcn.embed_dim,
            h,
            rng,
        )?;
        let gcn = if b.use_gcn {
            Some(GcnParams::register(store, "gcn", config.gcn, rng)?)
        } else {
            None
        };
        let w = Init::TruncatedNormal { std: WEIGHT_STD };
        let global = store.register("etc/global", 1, h, w, rng)?;
        let layers = (0..b.num_layers)
            .map(|i| LayerParams::register(store, i, &b, rng))
            .collect::<Result<Vec<_>>>()?;
        let vocab = config.gcn.vocab_size;
        let mlm_w = store.register("etc/mlm_w", h, vocab, w, rng)?;
        let mlm_b = store.register("etc/mlm_b", 1, vocab, Init::Zeros, rng)?;
        let tag_w = store.register("etc/tag_w", h, config.num_tags, w, rng)?;
        let tag_b = store.register("etc/tag_b", 1, config.num_tags, Init::Zeros, rng)?;
        Ok(Self {
            config,
            embed,
            gcn,
            global,
            layers,
            mlm_w,
            mlm_b,
            tag_w,
            tag_b,
        })
    }

    /// Logits for the local tokens, `n × vocab` or `n × num_tags`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        input: &PreparedDoc,
        ids: &[usize],
        mode: Mode,
    ) -> Result<NodeId> {
        let hidden = self.encode(g, store, input, ids)?;
        let n = input.len();
        let local = g.slice_rows(hidden, self.config.backbone.num_global, n)?;
        let (w, b) = match mode {
            Mode::Mlm => (self.mlm_w, self.mlm_b),
            Mode::Tagging => (self.tag_w, self.tag_b),
        };
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.affine(local, w, b)
    }

    /// Final hidden states including the global row.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        input: &PreparedDoc,
        ids: &[usize],
    ) -> Result<NodeId> {
        let b = &self.config.backbone;
        if ids.len() != input.len() {
            return Err(Error::invalid(format!(
                "{} input ids for a {}-token document",
                ids.len(),
                input.len()
            )));
        }
        let mut x = self.input_states(g, store, input, ids)?;
        let global = g.param(store, self.global);
        x = g.concat_rows(&[global, x])?;
        let pair = b.use_rich_attention.then_some(&input.pair);
        for layer in &self.layers {
            x = transformer_layer(g, store, layer, x, &input.mask, pair, self.config.features, b.num_global)?;
        }
        Ok(x)
    }

    /// Super-Tokens, or the plain input embedding when the graph encoder is off.
    pub fn input_states(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        input: &PreparedDoc,
        ids: &[usize],
    ) -> Result<NodeId> {
        let x = self.embed.forward(g, store, ids, &input.geometry)?;
        match &self.gcn {
            Some(p) => run_layers(g, store, p, x, &input.edges),
            None => Ok(x),
        }
    }
}

/// Per-document tensors that do not depend on parameters. Tokens must be in
/// serialized order with normalized coordinates.
#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub ids: Vec<usize>,
    pub geometry: Tensor,
    pub edges: EdgeIndex,
    pub pair: PairFeatures,
    pub mask: Rc<Mask>,
}

impl PreparedDoc {
    pub fn new(doc: &Document, config: &ModelConfig) -> Result<Self> {
        let b = &config.backbone;
        if doc.tokens.len() > b.max_seq {
            return Err(Error::invalid(format!(
                "document has {} tokens, above max_seq {}",
                doc.tokens.len(),
                b.max_seq
            )));
        }
        let graph = LayoutGraph::build(doc, config.gcn.max_neighbors)?;
        let (ids, geometry) = InputEmbedding::inputs(doc);
        Ok(Self {
            ids,
            geometry,
            edges: EdgeIndex::new(&graph),
            pair: PairFeatures::from_boxes(&doc.boxes()),
            mask: Rc::new(build_mask(doc.tokens.len(), b.local_radius, b.num_global)?),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Attention weights of every head of one layer, for inspection.
pub fn attention_weights(
    store: &ParameterStore,
    layer: &LayerParams,
    states: &Tensor,
    mask: &Rc<Mask>,
    pair: Option<&PairFeatures>,
    features: FeatureSet,
    num_global: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for head in &layer.attn.heads {
        let mut g = Graph::new();
        let x = g.constant(states.clone());
        let mut aff = |w, b| {
            let (w, b) = (g.param(store, w), g.param(store, b));
            g.affine(x, w, b)
        };
        let (q, k) = (aff(head.wq, head.bq)?, aff(head.wk, head.bk)?);
        let s = crate::rich_attention::head_scores(&mut g, store, head, q, k, pair, features, num_global)?;
        let a = g.masked_softmax(s, mask.clone())?;
        out.push(g.value(a).clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::doc_model::{normalize_coords, serialize, BoundingBox, Token};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub(crate) fn small_config(hidden: usize, rich: bool, gcn: bool) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                num_layers: 2,
                hidden,
                num_heads: 2,
                local_radius: 2,
                num_global: 1,
                max_seq: MAX_SEQ,
                use_rich_attention: rich,
                use_gcn: gcn,
            },
            gcn: GcnConfig {
                num_layers: 2,
                hidden,
                max_neighbors: 8,
                vocab_size: 20,
                embed_dim: 6,
            },
            num_tags: 5,
            features: FeatureSet::ALL,
        }
    }

    fn random_doc(n: usize, seed: u64) -> Document {
        let mut r = rng(seed);
        let tokens: Vec<Token> = (0..n)
            .map(|i| {
                let (x, y) = (r.random_range(0..900) as f64, r.random_range(0..980) as f64);
                Token {
                    text: format!("t{i}"),
                    vocab_id: r.random_range(0..20),
                    bbox: BoundingBox::new(x, y, x + 60.0, y + 20.0).unwrap(),
                    word_index: i,
                }
            })
            .collect();
        let doc = Document::new(tokens, 1000.0, 1000.0, vec![]).unwrap();
        let doc = doc.permuted(&serialize(&doc.boxes()));
        normalize_coords(&doc).unwrap()
    }

    fn inflate(store: &mut ParameterStore, scale: f64, seed: u64) {
        let mut r = rng(seed);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).data_mut() {
                *v += scale * r.random_range(-1.0..1.0);
            }
        }
    }

    #[test]
    fn mask_counts() {
        let m = build_mask(5, 1, 1).unwrap();
        let local: usize = (1..6).map(|i| (1..6).filter(|&j| m.is_allowed(i, j)).count()).sum();
        assert_eq!(local, 13);
        assert_eq!(m.allowed_count(), 13 + 5 + 6);
        let full = build_mask(4, 10, 1).unwrap();
        assert_eq!(full.allowed_count(), 25);
        for i in 0..6 {
            assert!(m.row(i).iter().any(|&a| a) && m.is_allowed(i, i));
        }
        assert!(build_mask(0, 1, 1).is_err());
        let (c512, c1024) = (
            build_mask(512, 8, 1).unwrap().allowed_count(),
            build_mask(1024, 8, 1).unwrap().allowed_count(),
        );
        assert!(c1024 as f64 <= 2.2 * c512 as f64);
    }

    fn setup(cfg: ModelConfig, seed: u64) -> (ParameterStore, Model) {
        let mut store = ParameterStore::new();
        let m = Model::register(&mut store, cfg, &mut rng(seed)).unwrap();
        (store, m)
    }

    #[test]
    fn zero_sublayers_reduce_to_double_layer_norm() {
        let cfg = small_config(8, true, false);
        let (mut store, model) = setup(cfg, 1);
        let layer = &model.layers[0];
        let mut zero = vec![layer.attn.wo, layer.attn.bo, layer.ffn2_w, layer.ffn2_b];
        zero.extend([layer.ffn1_w, layer.ffn1_b]);
        for id in zero {
            store.value_mut(id).scale_in_place(0.0);
        }
        let x = Tensor::from_vec(4, 8, (0..32).map(|i| (i as f64 * 0.7).cos()).collect());
        let mask = Rc::new(build_mask(3, 2, 1).unwrap());
        let mut g = Graph::new();
        let xn = g.constant(x);
        let y = transformer_layer(&mut g, &store, layer, xn, &mask, None, FeatureSet::ALL, 1).unwrap();
        let l1 = g.layer_norm(xn);
        let l2 = g.layer_norm(l1);
        assert!(g.value(y).max_abs_diff(g.value(l2)) < 1e-12);
    }

    #[test]
    fn distant_tokens_only_meet_through_the_global_token() {
        let cfg = small_config(8, true, false);
        let (mut store, model) = setup(cfg.clone(), 2);
        inflate(&mut store, 0.3, 3);
        let doc = random_doc(10, 4);
        let prep = PreparedDoc::new(&doc, &cfg).unwrap();
        let run = |prep: &PreparedDoc, ids: &[usize], layers: usize| {
            let m = Model {
                layers: model.layers[..layers].to_vec(),
                ..model.clone()
            };
            let mut g = Graph::new();
            let h = m.encode(&mut g, &store, prep, ids).unwrap();
            g.value(h).clone()
        };
        let mut ids = prep.ids.clone();
        ids[0] = (ids[0] + 1) % 20;

        // One layer: the global row still holds its input, so nothing beyond r moves.
        let (a, b) = (run(&prep, &prep.ids, 1), run(&prep, &ids, 1));
        for k in 0..10 {
            assert_eq!(a.row(1 + k) == b.row(1 + k), k > 2, "position {k}");
        }

        // Two layers: position 9 is beyond 2r and hears token 0 via the global row.
        let (a, b) = (run(&prep, &prep.ids, 2), run(&prep, &ids, 2));
        assert_ne!(a.row(1 + 9), b.row(1 + 9));

        // Cutting local reads of the global row removes that path entirely.
        let mut cut = prep.clone();
        cut.mask = Rc::new(Mask::from_fn(11, 11, |i, j| {
            if j == 0 {
                i == 0
            } else {
                prep.mask.is_allowed(i, j)
            }
        }));
        let (a, b) = (run(&cut, &prep.ids, 2), run(&cut, &ids, 2));
        assert_eq!(a.row(1 + 9), b.row(1 + 9));
    }

    #[test]
    fn masked_positions_get_zero_weight_and_gradient() {
        let cfg = small_config(8, true, false);
        let (mut store, model) = setup(cfg.clone(), 5);
        inflate(&mut store, 0.3, 6);
        let doc = random_doc(12, 7);
        let prep = PreparedDoc::new(&doc, &cfg).unwrap();
        let states = Tensor::from_vec(13, 8, (0..104).map(|i| (i as f64 * 0.3).sin()).collect());
        let weights = attention_weights(
            &store,
            &model.layers[0],
            &states,
            &prep.mask,
            Some(&prep.pair),
            FeatureSet::ALL,
            1,
        )
        .unwrap();
        for w in &weights {
            for i in 0..13 {
                for j in 0..13 {
                    if !prep.mask.is_allowed(i, j) {
                        assert_eq!(w.get(i, j), 0.0);
                    }
                }
            }
        }
        // Gradient onto scores at masked positions is exactly zero.
        let mut g = Graph::new();
        let scores = g.input(Tensor::from_vec(13, 13, (0..169).map(|i| (i as f64 * 0.11).sin()).collect()));
        let a = g.masked_softmax(scores, prep.mask.clone()).unwrap();
        let w = g.constant(Tensor::from_vec(13, 13, (0..169).map(|i| (i as f64 * 0.37).cos()).collect()));
        let prod = g.mul(a, w).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let grad = g.grad(scores).unwrap();
        let mut nonzero_allowed = 0;
        for i in 0..13 {
            for j in 0..13 {
                if prep.mask.is_allowed(i, j) {
                    nonzero_allowed += (grad.get(i, j) != 0.0) as usize;
                } else {
                    assert_eq!(grad.get(i, j), 0.0);
                }
            }
        }
        assert!(nonzero_allowed > 0);
    }

    #[test]
    fn toggling_gcn_only_changes_inputs() {
        let (a, b) = (small_config(8, true, true), small_config(8, true, false));
        let doc = random_doc(9, 8);
        let (pa, pb) = (PreparedDoc::new(&doc, &a).unwrap(), PreparedDoc::new(&doc, &b).unwrap());
        assert_eq!(*pa.mask, *pb.mask);
        assert_eq!(pa.pair.order(crate::rich_attention::Axis::X), pb.pair.order(crate::rich_attention::Axis::X));
        let (sa, ma) = setup(a, 9);
        let (sb, mb) = setup(b, 9);
        assert_eq!(sa.value(ma.embed.word), sb.value(mb.embed.word));
        assert!(sa.len() > sb.len());
    }

    #[test]
    fn one_token_document() {
        let cfg = small_config(8, true, true);
        let (store, model) = setup(cfg.clone(), 10);
        let doc = random_doc(1, 11);
        let prep = PreparedDoc::new(&doc, &cfg).unwrap();
        for (mode, width) in [(Mode::Mlm, 20), (Mode::Tagging, 5)] {
            let mut g = Graph::new();
            let y = model.forward(&mut g, &store, &prep, &prep.ids, mode).unwrap();
            assert_eq!(g.shape(y), (1, width));
            assert!(g.value(y).all_finite());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config(8, true, true);
        let (s1, m1) = setup(cfg.clone(), 12);
        let (s2, m2) = setup(cfg.clone(), 12);
        let doc = random_doc(15, 13);
        let prep = PreparedDoc::new(&doc, &cfg).unwrap();
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let y1 = m1.forward(&mut g1, &s1, &prep, &prep.ids, Mode::Tagging).unwrap();
        let y2 = m2.forward(&mut g2, &s2, &prep, &prep.ids, Mode::Tagging).unwrap();
        assert_eq!(g1.value(y1), g2.value(y2));
    }

    #[test]
    fn too_long_document_rejected() {
        let mut cfg = small_config(8, true, true);
        cfg.backbone.max_seq = 4;
        assert!(PreparedDoc::new(&random_doc(5, 14), &cfg).is_err());
    }

    #[test]
    fn full_model_gradients() {
        let cfg = small_config(16, true, true);
        let (mut store, model) = setup(cfg.clone(), 15);
        inflate(&mut store, 0.2, 16);
        let doc = random_doc(6, 17);
        let prep = PreparedDoc::new(&doc, &cfg).unwrap();
        let targets = Rc::new(vec![Some(1), Some(2), Some(3), Some(0), Some(4), Some(0)]);
        let report = grad_check(
            &mut store,
            |s, g| {
                let y = model.forward(g, s, &prep, &prep.ids, Mode::Tagging)?;
                g.cross_entropy(y, targets.clone())
            },
            1e-5,
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
