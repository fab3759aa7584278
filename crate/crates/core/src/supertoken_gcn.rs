//! Message passing over the layout graph, producing one Super-Token per token.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Init, Mask, NodeId, ParamId, ParameterStore, Tensor, WEIGHT_STD};
use crate::doc_model::{serialize, Document};
use crate::error::{Error, Result};
use crate::graph_builder::{LayoutGraph, EDGE_DIM, MAX_NEIGHBORS, NODE_GEOMETRY_DIM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcnConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub max_neighbors: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl GcnConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden: 32,
            max_neighbors: MAX_NEIGHBORS,
            vocab_size,
            embed_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_layers == 0 || self.embed_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config(format!("invalid graph encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Word embedding plus box geometry, projected to the hidden size.
#[derive(Debug, Clone)]
pub struct InputEmbedding {
    pub word: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub vocab_size: usize,
}

impl InputEmbedding {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Init::TruncatedNormal { std: WEIGHT_STD };
        Ok(Self {
            word: store.register(&format!("{prefix}/word"), vocab_size, embed_dim, w, rng)?,
            w: store.register(
                &format!("{prefix}/proj_w"),
                embed_dim + NODE_GEOMETRY_DIM,
                hidden,
                w,
                rng,
            )?,
            b: store.register(&format!("{prefix}/proj_b"), 1, hidden, Init::Zeros, rng)?,
            vocab_size,
        })
    }

    /// `ids` index the word table; `geometry` is `n × 6`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        ids: &[usize],
        geometry: &Tensor,
    ) -> Result<NodeId> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "vocabulary id {bad} out of range for a table of {}",
                self.vocab_size
            )));
        }
        let table = g.param(store, self.word);
        let words = g.gather_rows(table, Rc::new(ids.to_vec()))?;
        let geo = g.constant(geometry.clone());
        let x = g.concat_cols(&[words, geo])?;
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.affine(x, w, b)
    }

    /// Token ids and geometry rows of a normalized document.
    pub fn inputs(doc: &Document) -> (Vec<usize>, Tensor) {
        let ids = doc.tokens.iter().map(|t| t.vocab_id as usize).collect();
        let rows: Vec<Vec<f64>> = doc
            .tokens
            .iter()
            .map(|t| {
                let b = &t.bbox;
                vec![b.x0, b.y0, b.x1, b.y1, b.height(), b.width()]
            })
            .collect();
        let geo = if rows.is_empty() {
            Tensor::zeros(0, NODE_GEOMETRY_DIM)
        } else {
            Tensor::from_rows(&rows)
        };
        (ids, geo)
    }
}

#[derive(Debug, Clone)]
pub struct GcnLayerParams {
    pub mlp1_w: ParamId,
    pub mlp1_b: ParamId,
    pub mlp2_w: ParamId,
    pub mlp2_b: ParamId,
    pub attn_q: ParamId,
    pub attn_k: ParamId,
    pub ln_scale: ParamId,
    pub ln_shift: ParamId,
}

#[derive(Debug, Clone)]
pub struct GcnParams {
    pub config: GcnConfig,
    pub layers: Vec<GcnLayerParams>,
}

impl GcnParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        config: GcnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let w = Init::TruncatedNormal { std: WEIGHT_STD };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut reg = |name: &str, r, c, init| {
                store.register(&format!("{prefix}/layer{l}/{name}"), r, c, init, rng)
            };
            layers.push(GcnLayerParams {
                mlp1_w: reg("mlp1_w", 2 * h + EDGE_DIM, h, w)?,
                mlp1_b: reg("mlp1_b", 1, h, Init::Zeros)?,
                mlp2_w: reg("mlp2_w", h, h, w)?,
                mlp2_b: reg("mlp2_b", 1, h, Init::Zeros)?,
                attn_q: reg("attn_q", h, h, w)?,
                attn_k: reg("attn_k", h, h, w)?,
                ln_scale: reg("ln_scale", 1, h, Init::Constant(1.0))?,
                ln_shift: reg("ln_shift", 1, h, Init::Zeros)?,
            });
        }
        Ok(Self { config, layers })
    }
}

/// Graph connectivity in the form the layers consume.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub n: usize,
    /// Receiving vertex `k` of each edge.
    pub receivers: Rc<Vec<usize>>,
    /// Sending vertex `l` of each edge.
    pub senders: Rc<Vec<usize>>,
    pub features: Tensor,
    /// `n × E`: vertex `k` may attend to edge `e` iff `e` ends at `k`.
    pub incoming: Rc<Mask>,
}

impl EdgeIndex {
    pub fn new(graph: &LayoutGraph) -> Self {
        let receivers: Vec<usize> = graph.edges.iter().map(|e| e.0).collect();
        let senders: Vec<usize> = graph.edges.iter().map(|e| e.1).collect();
        let e = graph.edges.len();
        let features = Tensor::from_vec(
            e,
            EDGE_DIM,
            graph.edge_features.iter().flat_map(|f| f.iter().copied()).collect(),
        );
        let incoming = Mask::from_fn(graph.n, e, |k, j| receivers[j] == k);
        Self {
            n: graph.n,
            receivers: Rc::new(receivers),
            senders: Rc::new(senders),
            features,
            incoming: Rc::new(incoming),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.receivers.len()
    }
}

/// `MLP(concat(s_k, s_l, e_kl))` for every edge, `E × hidden`.
pub fn messages(
    g: &mut Graph,
    store: &ParameterStore,
    layer: &GcnLayerParams,
    states: NodeId,
    edges: &EdgeIndex,
) -> Result<NodeId> {
    let sk = g.gather_rows(states, edges.receivers.clone())?;
    let sl = g.gather_rows(states, edges.senders.clone())?;
    let ef = g.constant(edges.features.clone());
    let x = g.concat_cols(&[sk, sl, ef])?;
    let (w1, b1) = (g.param(store, layer.mlp1_w), g.param(store, layer.mlp1_b));
    let hdn = g.affine(x, w1, b1)?;
    let hdn = g.relu(hdn);
    let (w2, b2) = (g.param(store, layer.mlp2_w), g.param(store, layer.mlp2_b));
    g.affine(hdn, w2, b2)
}

/// One-head attention of each vertex over the messages on its incoming
/// edges; zero for vertices without edges.
pub fn aggregate(
    g: &mut Graph,
    store: &ParameterStore,
    layer: &GcnLayerParams,
    states: NodeId,
    msgs: NodeId,
    edges: &EdgeIndex,
) -> Result<NodeId> {
    let (n, h) = g.shape(states);
    if edges.num_edges() == 0 {
        return Ok(g.constant(Tensor::zeros(n, h)));
    }
    let (wq, wk) = (g.param(store, layer.attn_q), g.param(store, layer.attn_k));
    let q = g.matmul(states, wq)?;
    let k = g.matmul(msgs, wk)?;
    let kt = g.transpose(k);
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (h as f64).sqrt());
    let a = g.masked_softmax(s, edges.incoming.clone())?;
    g.matmul(a, msgs)
}

/// `layer_norm(s + aggregate(s))` followed by the learned scale and shift.
pub fn gcn_layer(
    g: &mut Graph,
    store: &ParameterStore,
    layer: &GcnLayerParams,
    states: NodeId,
    edges: &EdgeIndex,
) -> Result<NodeId> {
    let agg = if edges.num_edges() == 0 {
        let (n, h) = g.shape(states);
        g.constant(Tensor::zeros(n, h))
    } else {
        let m = messages(g, store, layer, states, edges)?;
        aggregate(g, store, layer, states, m, edges)?
    };
    let sum = g.add(states, agg)?;
    let normed = g.layer_norm(sum);
    let (scale, shift) = (g.param(store, layer.ln_scale), g.param(store, layer.ln_shift));
    let y = g.mul(normed, scale)?;
    g.add(y, shift)
}

/// Applies every layer in turn to already embedded states.
pub fn run_layers(
    g: &mut Graph,
    store: &ParameterStore,
    params: &GcnParams,
    mut states: NodeId,
    edges: &EdgeIndex,
) -> Result<NodeId> {
    for layer in &params.layers {
        states = gcn_layer(g, store, layer, states, edges)?;
    }
    Ok(states)
}

/// Embeds, runs every layer, and returns rows in serialized token order.
pub fn encode_supertokens(
    g: &mut Graph,
    store: &ParameterStore,
    embed: &InputEmbedding,
    params: &GcnParams,
    doc: &Document,
    graph: &LayoutGraph,
) -> Result<NodeId> {
    if graph.n != doc.tokens.len() {
        return Err(Error::invalid(format!(
            "layout graph has {} vertices for {} tokens",
            graph.n,
            doc.tokens.len()
        )));
    }
    let (ids, geo) = InputEmbedding::inputs(doc);
    let states = embed.forward(g, store, &ids, &geo)?;
    let states = run_layers(g, store, params, states, &EdgeIndex::new(graph))?;
    let order = serialize(&doc.boxes());
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return Ok(states);
    }
    g.gather_rows(states, Rc::new(order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::doc_model::{BoundingBox, Token};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg(hidden: usize, layers: usize) -> GcnConfig {
        GcnConfig {
            num_layers: layers,
            hidden,
            max_neighbors: 8,
            vocab_size: 20,
            embed_dim: 6,
        }
    }

    fn setup(c: GcnConfig, seed: u64) -> (ParameterStore, InputEmbedding, GcnParams) {
        let mut store = ParameterStore::new();
        let mut r = rng(seed);
        let e = InputEmbedding::register(&mut store, "embed", c.vocab_size, c.embed_dim, c.hidden, &mut r).unwrap();
        let p = GcnParams::register(&mut store, "gcn", c, &mut r).unwrap();
        (store, e, p)
    }

    fn inflate(store: &mut ParameterStore, scale: f64, seed: u64) {
        let mut r = rng(seed);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).data_mut() {
                *v += scale * r.random_range(-1.0..1.0);
            }
        }
    }

    fn random_doc(n: usize, seed: u64) -> Document {
        let mut r = rng(seed);
        let tokens = (0..n)
            .map(|i| {
                let (x, y) = (r.random_range(0.0..0.9), r.random_range(0.0..0.95));
                Token {
                    text: format!("t{i}"),
                    vocab_id: r.random_range(0..20),
                    bbox: BoundingBox::new(x, y, x + 0.08, y + 0.03).unwrap(),
                    word_index: i,
                }
            })
            .collect();
        Document::new(tokens, 1.0, 1.0, vec![]).unwrap()
    }

    fn run(store: &ParameterStore, e: &InputEmbedding, p: &GcnParams, doc: &Document, graph: &LayoutGraph) -> Tensor {
        let mut g = Graph::new();
        let out = encode_supertokens(&mut g, store, e, p, doc, graph).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn embedding_examples() {
        let (mut store, e, _) = setup(cfg(8, 1), 1);
        let geo = Tensor::from_rows(&vec![vec![0.1, 0.2, 0.3, 0.25, 0.05, 0.2]; 2]);
        let mut g = Graph::new();
        let s = e.forward(&mut g, &store, &[3, 3], &geo).unwrap();
        assert_eq!(g.value(s).row(0), g.value(s).row(1));

        let mut g = Graph::new();
        let mut geo2 = geo.clone();
        geo2.set(1, 0, 0.5);
        let s = e.forward(&mut g, &store, &[3, 4], &geo2).unwrap();
        let mut g0 = Graph::new();
        let s0 = e.forward(&mut g0, &store, &[3, 4], &geo).unwrap();
        assert_eq!(g.value(s).row(0), g0.value(s0).row(0));
        assert_ne!(g.value(s).row(1), g0.value(s0).row(1));

        for id in [e.word, e.w, e.b] {
            store.value_mut(id).scale_in_place(0.0);
        }
        let mut g = Graph::new();
        let s = e.forward(&mut g, &store, &[1, 2], &geo).unwrap();
        assert_eq!(g.value(s).max_abs(), 0.0);

        let mut g = Graph::new();
        assert!(e.forward(&mut g, &store, &[20], &Tensor::zeros(1, 6)).is_err());
    }

    fn two_vertex_edges(f: [f64; EDGE_DIM]) -> EdgeIndex {
        let mut back = f;
        for v in back.iter_mut().take(6) {
            *v = -*v;
        }
        EdgeIndex::new(&LayoutGraph {
            n: 2,
            edges: vec![(0, 1), (1, 0)],
            edge_features: vec![f, back],
            node_features: vec![],
        })
    }

    #[test]
    fn message_examples() {
        let (mut store, _, p) = setup(cfg(4, 1), 2);
        let layer = &p.layers[0];
        let mut feat = [0.0; EDGE_DIM];
        feat[0] = 0.3;
        feat[1] = -0.2;
        let edges = two_vertex_edges(feat);
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 0.2, 0.1], vec![-0.3, 0.4, 0.9, -0.6]]);

        inflate(&mut store, 0.5, 3);
        let mut g = Graph::new();
        let s = g.constant(x.clone());
        let m = messages(&mut g, &store, layer, s, &edges).unwrap();
        assert_ne!(g.value(m).row(0), g.value(m).row(1));

        let same = Tensor::from_rows(&vec![vec![0.5, -1.0, 0.2, 0.1]; 2]);
        let edges = two_vertex_edges([0.0; EDGE_DIM]);
        let mut g = Graph::new();
        let s = g.constant(same);
        let m = messages(&mut g, &store, layer, s, &edges).unwrap();
        assert_eq!(g.value(m).row(0), g.value(m).row(1));

        for id in [layer.mlp1_w, layer.mlp1_b, layer.mlp2_w, layer.mlp2_b] {
            store.value_mut(id).scale_in_place(0.0);
        }
        let mut g = Graph::new();
        let s = g.constant(x);
        let m = messages(&mut g, &store, layer, s, &edges).unwrap();
        assert_eq!(g.value(m).max_abs(), 0.0);
    }

    fn aggregate_of(msgs: Tensor, receivers: Vec<usize>, n: usize, store: &ParameterStore, layer: &GcnLayerParams) -> Tensor {
        let e = receivers.len();
        let edges = EdgeIndex {
            n,
            senders: Rc::new(vec![0; e]),
            incoming: Rc::new(Mask::from_fn(n, e, |k, j| receivers[j] == k)),
            receivers: Rc::new(receivers),
            features: Tensor::zeros(e, EDGE_DIM),
        };
        let mut g = Graph::new();
        let states = g.constant(Tensor::full(n, 4, 0.3));
        let m = g.constant(msgs);
        let a = aggregate(&mut g, store, layer, states, m, &edges).unwrap();
        g.value(a).clone()
    }

    #[test]
    fn aggregate_examples() {
        let (mut store, _, p) = setup(cfg(4, 1), 4);
        inflate(&mut store, 0.5, 5);
        let layer = &p.layers[0];
        let m = Tensor::row_vector(&[1.0, -2.0, 0.5, 3.0]);
        let out = aggregate_of(m.clone(), vec![0], 2, &store, layer);
        assert!(out.row(0).iter().zip(m.row(0)).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(out.row(1), &[0.0; 4]);

        let two = Tensor::from_rows(&[m.row(0).to_vec(), m.row(0).to_vec()]);
        let out = aggregate_of(two, vec![1, 1], 2, &store, layer);
        assert!(out.row(1).iter().zip(m.row(0)).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(out.row(0), &[0.0; 4]);
    }

    #[test]
    fn layer_without_edges_is_layer_norm() {
        let (store, _, p) = setup(cfg(4, 1), 6);
        let edges = EdgeIndex::new(&LayoutGraph {
            n: 2,
            edges: vec![],
            edge_features: vec![],
            node_features: vec![],
        });
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0, 1.0, -1.0]]);
        let mut g = Graph::new();
        let s = g.constant(x.clone());
        let out = gcn_layer(&mut g, &store, &p.layers[0], s, &edges).unwrap();
        let ln = g.layer_norm(s);
        assert!(g.value(out).max_abs_diff(g.value(ln)) < 1e-15);
    }

    #[test]
    fn permutation_equivariance() {
        let (mut store, e, p) = setup(cfg(8, 2), 7);
        inflate(&mut store, 0.3, 8);
        let doc = random_doc(30, 9);
        let graph = LayoutGraph::build(&doc, 8).unwrap();
        let base = run(&store, &e, &p, &doc, &graph);
        let mut r = rng(10);
        for _ in 0..3 {
            let mut perm: Vec<usize> = (0..30).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
            let shuffled = doc.permuted(&perm);
            let g2 = LayoutGraph::build(&shuffled, 8).unwrap();
            let out = run(&store, &e, &p, &shuffled, &g2);
            assert!(base.max_abs_diff(&out) < 1e-9);
        }
    }

    #[test]
    fn receptive_field_on_path_graph() {
        let (mut store, e, p) = setup(cfg(8, 2), 11);
        inflate(&mut store, 0.3, 12);
        // Tokens on one line; the graph is forced to be a path.
        let n = 7;
        let tokens: Vec<Token> = (0..n)
            .map(|i| Token {
                text: "a".into(),
                vocab_id: (i % 20) as u32,
                bbox: BoundingBox::new(0.1 * i as f64, 0.1, 0.1 * i as f64 + 0.05, 0.12).unwrap(),
                word_index: i,
            })
            .collect();
        let doc = Document::new(tokens, 1.0, 1.0, vec![]).unwrap();
        let graph = LayoutGraph::build(&doc, 8).unwrap();
        assert_eq!(graph.edges.len(), 2 * (n - 1));
        let base = run(&store, &e, &p, &doc, &graph);
        let mut moved = doc.clone();
        moved.tokens[0].vocab_id = 19;
        let out = run(&store, &e, &p, &moved, &graph);
        for k in 0..n {
            let changed = base.row(k) != out.row(k);
            assert_eq!(changed, k <= 2, "vertex {k}");
        }
    }

    #[test]
    fn separate_components_do_not_interact() {
        let (mut store, e, p) = setup(cfg(8, 2), 13);
        inflate(&mut store, 0.3, 14);
        // Serialized up front so graph indices and output rows coincide.
        let doc = random_doc(6, 15);
        let d = doc.permuted(&serialize(&doc.boxes()));
        let edges = vec![(0, 1), (1, 0), (1, 2), (2, 1), (3, 4), (4, 3), (4, 5), (5, 4)];
        let graph = LayoutGraph {
            n: 6,
            edge_features: edges
                .iter()
                .map(|&(k, l)| crate::graph_builder::edge_feature(&d.tokens[k].bbox, &d.tokens[l].bbox).to_array())
                .collect(),
            edges,
            node_features: vec![],
        };
        let base = run(&store, &e, &p, &d, &graph);
        let mut moved = d.clone();
        moved.tokens[0].vocab_id = (moved.tokens[0].vocab_id + 1) % 20;
        let out = run(&store, &e, &p, &moved, &graph);
        for k in 3..6 {
            assert_eq!(base.row(k), out.row(k));
        }
        assert_ne!(base.row(0), out.row(0));
    }

    #[test]
    fn stacked_layers_stay_finite() {
        for seed in 0..10 {
            let (mut store, e, p) = setup(cfg(8, 3), 100 + seed);
            inflate(&mut store, 1.0, 200 + seed);
            let doc = random_doc(20, 300 + seed);
            let graph = LayoutGraph::build(&doc, 8).unwrap();
            assert!(run(&store, &e, &p, &doc, &graph).all_finite());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, e, p) = setup(cfg(4, 2), 21);
        inflate(&mut store, 0.4, 22);
        let doc = random_doc(5, 23);
        let graph = LayoutGraph::build(&doc, 8).unwrap();
        let target = Tensor::from_vec(5, 4, (0..20).map(|i| (i as f64 * 0.37).sin()).collect());
        let report = grad_check(
            &mut store,
            |s, g| {
                let out = encode_supertokens(g, s, &e, &p, &doc, &graph)?;
                let t = g.constant(target.clone());
                g.squared_error(out, t)
            },
            1e-5,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
