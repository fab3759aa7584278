//! The full oracle suite: derivations, geometry, decoding and gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, GradCheckReport, ParameterStore, Tensor};
use crate::decoder_metrics::{
    bioes_decode, bioes_encode, oracle::viterbi_exhaustive, viterbi, DecodeMode, LabelSchema,
};
use crate::derivation_oracles::{run_suite, CheckResult, DistanceVariant};
use crate::doc_model::{normalize_coords, serialize, BoundingBox, Document, EntitySpan, Token};
use crate::error::Result;
use crate::etc_backbone::{BackboneConfig, Mode, Model, ModelConfig, PreparedDoc};
use crate::graph_builder::oracle::{brute_force_gabriel, connected_components};
use crate::graph_builder::{beta_skeleton_edges, Point};
use crate::rich_attention::FeatureSet;
use crate::supertoken_gcn::GcnConfig;

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn random_points(n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|_| (rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)))
        .collect()
}

/// Point sets (of `n` points) where the sweep construction differs from the
/// cubic brute-force test.
pub fn skeleton_mismatches(seed: u64, sets: usize, n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sets)
        .filter(|_| {
            let pts = random_points(n, &mut rng);
            beta_skeleton_edges(&pts) != brute_force_gabriel(&pts)
        })
        .count()
}

/// Point sets whose skeleton has more than one connected component.
pub fn disconnected_skeletons(seed: u64, sets: usize, n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sets)
        .filter(|_| {
            let pts = random_points(n, &mut rng);
            connected_components(n, &beta_skeleton_edges(&pts)) != 1
        })
        .count()
}

/// Trials where constrained Viterbi disagrees with exhaustive enumeration.
/// Odd trials use small integer scores so that ties occur.
pub fn viterbi_mismatches(seed: u64, trials: usize) -> Result<usize> {
    let schema = LabelSchema::new(["a", "b"])?;
    let k = schema.num_tags();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for t in 0..trials {
        let n = rng.random_range(1..=6);
        let data: Vec<f64> = (0..n * k)
            .map(|_| {
                if t % 2 == 1 {
                    rng.random_range(-2i32..=2) as f64
                } else {
                    rng.sample(StandardNormal)
                }
            })
            .collect();
        let logits = Tensor::from_vec(n, k, data);
        if viterbi(&logits, &schema)? != viterbi_exhaustive(&logits, &schema) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Random non-overlapping spans over `n` tokens of types `a`, `b`.
pub fn random_spans(n: usize, rng: &mut impl Rng) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < n {
        if rng.random_bool(0.4) {
            let len = rng.random_range(1..=4).min(n - i);
            let label = if rng.random_bool(0.5) { "a" } else { "b" };
            spans.push(EntitySpan::new(label, i, i + len - 1));
            i += len;
        } else {
            i += 1;
        }
    }
    spans
}

/// Span sets that do not survive encode then decode unchanged.
pub fn bioes_round_trip_failures(seed: u64, trials: usize) -> Result<usize> {
    let schema = LabelSchema::new(["a", "b"])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let n = rng.random_range(0..=30);
        let spans = random_spans(n, &mut rng);
        let tags = bioes_encode(&spans, n, &schema)?;
        if bioes_decode(&tags, &schema, DecodeMode::Strict)? != spans {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Six tokens on a small page, serialized and normalized.
pub fn six_token_document(seed: u64, vocab_size: usize) -> Result<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..6)
        .map(|i| {
            let x = rng.random_range(0.0..900.0);
            let y = rng.random_range(0.0..950.0);
            Ok(Token {
                text: format!("w{i}"),
                vocab_id: rng.random_range(0..vocab_size as u32),
                bbox: BoundingBox::new(x, y, x + 60.0, y + 20.0)?,
                word_index: i,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = Document::new(tokens, 1000.0, 1000.0, Vec::new())?;
    normalize_coords(&doc.permuted(&serialize(&doc.boxes())))
}

/// Desk model with two graph and two transformer layers, width 16, Rich
/// Attention on, tagging cross-entropy on a six-token document.
///
/// Parameters are perturbed away from initialization first so that
/// activations are not all in the near-linear regime.
pub fn model_grad_check(seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig {
        backbone: BackboneConfig {
            num_layers: 2,
            hidden: 16,
            num_heads: 2,
            local_radius: 2,
            use_rich_attention: true,
            use_gcn: true,
            ..BackboneConfig::default()
        },
        gcn: GcnConfig {
            num_layers: 2,
            hidden: 16,
            max_neighbors: 8,
            vocab_size: 20,
            embed_dim: 6,
        },
        num_tags: 5,
        features: FeatureSet::ALL,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let model = Model::register(&mut store, config.clone(), &mut rng)?;
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += 0.2 * rng.random_range(-1.0..1.0);
        }
    }
    let doc = six_token_document(seed.wrapping_add(1), 20)?;
    let prep = PreparedDoc::new(&doc, &config)?;
    let targets: Rc<Vec<Option<usize>>> = Rc::new((0..6).map(|_| Some(rng.random_range(0..5))).collect());
    grad_check(
        &mut store,
        |s, g| {
            let y = model.forward(g, s, &prep, &prep.ids, Mode::Tagging)?;
            g.cross_entropy(y, targets.clone())
        },
        crate::autodiff::gradcheck::DEFAULT_EPS,
        seed,
    )
}

/// Every check, each listed once.
pub fn run_all(seed: u64, variant: DistanceVariant) -> Result<Vec<CheckResult>> {
    let mut out = run_suite(seed, variant)?;
    let count = |name: &str, bad: usize| CheckResult::within(name, 0.5, bad as f64);
    out.push(count("beta_skeleton_vs_brute_force", skeleton_mismatches(seed, 20, 50)));
    out.push(count("gabriel_connectivity", disconnected_skeletons(seed + 1, 100, 50)));
    out.push(count("viterbi_vs_enumeration", viterbi_mismatches(seed, 200)?));
    out.push(count("bioes_round_trip", bioes_round_trip_failures(seed, 1000)?));
    let g = model_grad_check(seed)?;
    out.push(CheckResult::within("model_gradients", GRAD_TOLERANCE, g.max_rel_error));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_and_decoding_agree() {
        assert_eq!(skeleton_mismatches(3, 5, 30), 0);
        assert_eq!(disconnected_skeletons(3, 10, 30), 0);
        assert_eq!(viterbi_mismatches(3, 40).unwrap(), 0);
        assert_eq!(bioes_round_trip_failures(3, 100).unwrap(), 0);
    }

    #[test]
    fn random_spans_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let n = rng.random_range(0..20);
            crate::doc_model::validate_spans(&random_spans(n, &mut rng), n).unwrap();
        }
    }
}
