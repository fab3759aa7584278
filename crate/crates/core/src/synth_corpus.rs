//! Synthetic multi-column forms with gold entities and a tunable rate of
//! entities broken apart by reading-order serialization.
//!
//! A page is a grid of blocks, `rows_per_column` per column. A block holds one
//! or two entities, or filler text labelled `other`, wrapped at
//! `tokens_per_line`. Each row either places its blocks side by side in one
//! shared band (probability `interleave_prob`), so serialization interleaves
//! their lines, or stacks them in separate bands.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::doc_model::{
    contiguous_runs, serialize, write_corpus, BoundingBox, Document, EntitySpan, Token, Vocabulary,
};
use crate::error::{Error, Result};
use crate::graph_builder::beta_skeleton_edges;

pub const TOKEN_W: f64 = 60.0;
pub const TOKEN_H: f64 = 20.0;
pub const H_GAP: f64 = 10.0;
pub const LINE_PITCH: f64 = 30.0;
pub const MARGIN: f64 = 40.0;
pub const COLUMN_GAP: f64 = 60.0;
/// Vertical space between consecutive bands.
pub const BAND_GAP: f64 = 30.0;
pub const MAX_JITTER: f64 = 0.1;
pub const SPLIT_SEED_STRIDE: u64 = 1_000_000;

const OTHER_LEN: (usize, usize) = (2, 6);
const OTHER_PROB: f64 = 0.2;
const PAIR_PROB: f64 = 0.5;
const FILLER_ZIPF_EXPONENT: f64 = 1.0;

/// Type cues; split evenly across the configured entity types.
const CUE_WORDS: &[&str] = &[
    "INVOICE", "REPORT", "STATEMENT", "RECEIPT", "ORDER", "SUMMARY", "MEMO", "FORM",
    "APPLICATION", "CERTIFICATE", "NOTICE", "AGREEMENT", "RECORD", "REQUEST", "SCHEDULE",
    "BULLETIN", "MANIFEST", "LEDGER", "DATE", "NAME", "TOTAL", "ADDRESS", "PHONE", "FAX",
    "EMAIL", "ACCOUNT", "AMOUNT", "TAX", "SUBTOTAL", "DUE", "REF", "QTY", "PRICE", "CODE",
    "SIGNATURE", "TITLE", "USD", "EUR", "PAID", "APPROVED", "PENDING", "YES", "NO", "CASH",
    "CHECK", "VISA", "NET", "GROSS", "FINAL", "SIGNED", "VOID", "OPEN", "CLOSED", "URGENT",
];

/// Shared by entity continuations and `other` blocks; drawn with Zipfian
/// frequencies in list order.
const FILLER_WORDS: &[&str] = &[
    "THE", "OF", "AND", "TO", "IN", "FOR", "ON", "WITH", "BY", "AT", "FROM", "AS", "IS", "BE",
    "THIS", "THAT", "ARE", "OR", "AN", "WAS", "ITEM", "PAGE", "LINE", "UNIT", "PART", "STREET",
    "ROAD", "SUITE", "FLOOR", "ROOM", "BOX", "DEPT", "OFFICE", "BRANCH", "JOHN", "MARY", "SMITH",
    "JONES", "BROWN", "LEE", "GARCIA", "MILLER", "DAVIS", "WILSON", "TAYLOR", "MOORE", "JAN",
    "FEB", "MAR", "APR", "MAY", "JUN", "JUL", "AUG", "SEP", "OCT", "NOV", "DEC", "ONE", "TWO",
    "THREE", "FOUR", "FIVE", "SIX", "SEVEN", "EIGHT", "NINE", "TEN", "NORTH", "SOUTH", "EAST",
    "WEST", "MAIN", "PARK", "HILL", "LAKE", "RIVER", "GREEN", "SERVICE", "PRODUCT", "SUPPLY",
    "MATERIAL", "LABOR", "FREIGHT", "DISCOUNT", "BALANCE", "CREDIT", "DEBIT",
];

fn toy_vocab() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(Vocabulary::toy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_docs: usize,
    /// Labelled entity types; filler blocks are unlabelled.
    pub entity_types: Vec<String>,
    pub columns: usize,
    pub rows_per_column: usize,
    pub tokens_per_line: usize,
    /// Inclusive entity length range in tokens.
    pub entity_len: (usize, usize),
    pub interleave_prob: f64,
    /// Jitter amplitude as a fraction of token height.
    pub jitter: f64,
    pub page_height: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_docs: 100,
            entity_types: vec!["header".into(), "question".into(), "answer".into()],
            columns: 2,
            rows_per_column: 4,
            tokens_per_line: 3,
            entity_len: (1, 5),
            interleave_prob: 0.8,
            jitter: MAX_JITTER,
            page_height: 1400.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_docs == 0 || self.rows_per_column == 0 || self.tokens_per_line == 0 {
            return bad("n_docs, rows_per_column and tokens_per_line must be positive".into());
        }
        if !(1..=3).contains(&self.columns) {
            return bad(format!("columns must be 1..=3, got {}", self.columns));
        }
        let (lo, hi) = self.entity_len;
        if lo == 0 || lo > hi {
            return bad(format!("entity length range {lo}..={hi} is empty or starts at 0"));
        }
        if self.entity_types.is_empty() || self.entity_types.len() > CUE_WORDS.len() {
            return bad(format!("need 1..={} entity types", CUE_WORDS.len()));
        }
        let mut names = self.entity_types.clone();
        names.sort();
        names.dedup();
        if names.len() != self.entity_types.len() || names.iter().any(|n| n.is_empty() || n == "other") {
            return bad("entity types must be distinct, non-empty and not `other`".into());
        }
        if !(0.0..=1.0).contains(&self.interleave_prob) {
            return bad(format!("interleave_prob {} outside [0, 1]", self.interleave_prob));
        }
        if !(0.0..=MAX_JITTER).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, {MAX_JITTER}]", self.jitter));
        }
        if !(self.page_height.is_finite() && self.page_height > 2.0 * MARGIN) {
            return bad(format!("page height {} too small", self.page_height));
        }
        Ok(())
    }

    pub fn page_width(&self) -> f64 {
        let cols = self.columns as f64;
        2.0 * MARGIN + cols * self.column_width() + (cols - 1.0) * COLUMN_GAP
    }

    fn column_width(&self) -> f64 {
        self.tokens_per_line as f64 * (TOKEN_W + H_GAP) - H_GAP
    }

    fn cue_pool(&self, t: usize) -> &'static [&'static str] {
        let per = CUE_WORDS.len() / self.entity_types.len();
        &CUE_WORDS[t * per..(t + 1) * per]
    }
}

/// One block's token stream before layout.
#[derive(Debug, Clone)]
struct Block {
    words: Vec<&'static str>,
    /// Entity index (within the block) per word.
    entity: Vec<Option<usize>>,
    types: Vec<usize>,
}

impl Block {
    fn lines(&self, per_line: usize) -> usize {
        self.words.len().div_ceil(per_line)
    }
}

fn filler(rng: &mut ChaCha8Rng) -> &'static str {
    let zipf = Zipf::new(FILLER_WORDS.len() as f64, FILLER_ZIPF_EXPONENT).expect("valid Zipf parameters");
    let rank = zipf.sample(rng) as usize;
    FILLER_WORDS[rank.clamp(1, FILLER_WORDS.len()) - 1]
}

fn sample_block(config: &GenConfig, rng: &mut ChaCha8Rng) -> Block {
    let mut block = Block {
        words: Vec::new(),
        entity: Vec::new(),
        types: Vec::new(),
    };
    if rng.random_bool(OTHER_PROB) {
        let n = rng.random_range(OTHER_LEN.0..=OTHER_LEN.1);
        for _ in 0..n {
            block.words.push(filler(rng));
            block.entity.push(None);
        }
        return block;
    }
    let k = config.entity_types.len();
    let first = rng.random_range(0..k);
    let mut types = vec![first];
    if k > 1 && rng.random_bool(PAIR_PROB) {
        types.push((first + 1) % k);
    }
    for (e, &t) in types.iter().enumerate() {
        let n = rng.random_range(config.entity_len.0..=config.entity_len.1);
        block.words.push(*config.cue_pool(t).choose(rng).expect("non-empty"));
        block.entity.push(Some(e));
        for _ in 1..n {
            block.words.push(filler(rng));
            block.entity.push(Some(e));
        }
    }
    block.types = types;
    block
}

/// A generated page plus, for each entity, its serialized token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDocument {
    pub document: Document,
    pub entities: Vec<Vec<usize>>,
    pub entity_labels: Vec<String>,
    /// Block index per serialized token.
    pub block_of: Vec<usize>,
}

impl SynthDocument {
    /// Entities whose tokens are not contiguous after serialization.
    pub fn split_entities(&self) -> Vec<usize> {
        (0..self.entities.len())
            .filter(|&e| contiguous_runs(self.entities[e].clone()).len() > 1)
            .collect()
    }
}

pub fn generate_document(config: &GenConfig, doc_seed: u64) -> Result<SynthDocument> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(doc_seed);
    let tpl = config.tokens_per_line;
    let amp = config.jitter * TOKEN_H;
    let col_x = |c: usize| MARGIN + c as f64 * (config.column_width() + COLUMN_GAP);

    let mut words: Vec<(&'static str, BoundingBox)> = Vec::new();
    let mut token_entity: Vec<Option<usize>> = Vec::new();
    let mut token_block: Vec<usize> = Vec::new();
    let mut entity_labels: Vec<String> = Vec::new();
    let mut y = MARGIN;
    let mut n_blocks = 0;

    for _ in 0..config.rows_per_column {
        let blocks: Vec<Block> = (0..config.columns).map(|_| sample_block(config, &mut rng)).collect();
        let shared = config.columns > 1 && rng.random_bool(config.interleave_prob);
        let mut band_top = y;
        for (c, block) in blocks.iter().enumerate() {
            let height = block.lines(tpl) as f64 * LINE_PITCH - (LINE_PITCH - TOKEN_H);
            let top = if shared { band_top } else { y };
            if top + height > config.page_height - MARGIN {
                return Err(Error::LayoutOverflow(format!(
                    "block ends at y={:.0}, page height {} (seed {doc_seed})",
                    top + height,
                    config.page_height
                )));
            }
            let base = entity_labels.len();
            for &t in &block.types {
                entity_labels.push(config.entity_types[t].clone());
            }
            for (i, (&w, &e)) in block.words.iter().zip(&block.entity).enumerate() {
                let x0 = col_x(c) + (i % tpl) as f64 * (TOKEN_W + H_GAP) + rng.random_range(-amp..=amp);
                let y0 = top + (i / tpl) as f64 * LINE_PITCH + rng.random_range(-amp..=amp);
                let (x0, y0) = (x0.max(0.0), y0.max(0.0));
                words.push((w, BoundingBox::new(x0, y0, x0 + TOKEN_W, y0 + TOKEN_H)?));
                token_entity.push(e.map(|e| base + e));
                token_block.push(n_blocks);
            }
            n_blocks += 1;
            if shared {
                y = y.max(top + height + BAND_GAP);
            } else {
                y = top + height + BAND_GAP;
            }
            if !shared {
                band_top = y;
            }
        }
    }

    let boxes: Vec<BoundingBox> = words.iter().map(|w| w.1).collect();
    let order = serialize(&boxes);
    let vocab = toy_vocab();
    let tokens: Vec<Token> = order
        .iter()
        .map(|&i| Token {
            text: words[i].0.to_owned(),
            vocab_id: vocab.lookup_or_unk(words[i].0),
            bbox: words[i].1,
            word_index: i,
        })
        .collect();
    let mut entities: Vec<Vec<usize>> = vec![Vec::new(); entity_labels.len()];
    for (pos, &i) in order.iter().enumerate() {
        if let Some(e) = token_entity[i] {
            entities[e].push(pos);
        }
    }
    let mut spans = Vec::new();
    for (e, pos) in entities.iter().enumerate() {
        for (s, t) in contiguous_runs(pos.clone()) {
            spans.push(EntitySpan::new(entity_labels[e].clone(), s, t));
        }
    }
    spans.sort_by_key(|s| s.start);
    let block_of = order.iter().map(|&i| token_block[i]).collect();
    let document = Document::new(tokens, config.page_width(), config.page_height, spans)?;
    Ok(SynthDocument {
        document,
        entities,
        entity_labels,
        block_of,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

/// `(train, dev, test)` sizes: a tenth each for dev and test, the rest train.
pub fn split_sizes(n_docs: usize) -> (usize, usize, usize) {
    let held = n_docs / 10;
    (n_docs - 2 * held, held, held)
}

/// Seed of document `i` in split `k` (0 train, 1 dev, 2 test).
pub fn doc_seed(seed: u64, split: u64, i: usize) -> u64 {
    seed.wrapping_add(split * SPLIT_SEED_STRIDE).wrapping_add(i as u64)
}

pub fn generate_corpus(config: &GenConfig) -> Result<SynthCorpus> {
    config.validate()?;
    if config.n_docs as u64 >= SPLIT_SEED_STRIDE {
        return Err(Error::Config(format!("n_docs must be below {SPLIT_SEED_STRIDE}")));
    }
    let (a, b, c) = split_sizes(config.n_docs);
    let split = |k: u64, n: usize| -> Result<Vec<Document>> {
        (0..n)
            .map(|i| generate_document(config, doc_seed(config.seed, k, i)).map(|d| d.document))
            .collect()
    };
    Ok(SynthCorpus {
        train: split(0, a)?,
        dev: split(1, b)?,
        test: split(2, c)?,
    })
}

/// Gold span count per label, every configured type listed.
pub fn label_distribution(types: &[String], docs: &[Document]) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = types.iter().map(|t| (t.clone(), 0)).collect();
    for d in docs {
        for s in &d.gold_spans {
            *out.entry(s.label.clone()).or_default() += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: GenConfig,
    pub split_sizes: BTreeMap<String, usize>,
    pub split_seeds: BTreeMap<String, u64>,
    pub label_distribution: BTreeMap<String, usize>,
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `manifest.json`.
pub fn write_corpus_dir(dir: &Path, config: &GenConfig, corpus: &SynthCorpus) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)];
    let mut all = Vec::new();
    for (name, docs) in splits {
        write_corpus(&dir.join(format!("{name}.jsonl")), docs)?;
        all.extend(docs.iter().cloned());
    }
    let manifest = CorpusManifest {
        config: config.clone(),
        split_sizes: splits.iter().map(|(n, d)| (n.to_string(), d.len())).collect(),
        split_seeds: splits
            .iter()
            .enumerate()
            .map(|(k, (n, _))| (n.to_string(), doc_seed(config.seed, k as u64, 0)))
            .collect(),
        label_distribution: label_distribution(&config.entity_types, &all),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn bfs(n: usize, adj: &[Vec<usize>], sources: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; n];
    let mut q = VecDeque::new();
    for &s in sources {
        dist[s] = 0;
        q.push_back(s);
    }
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    dist
}

/// For each split entity, the largest graph distance between one fragment
/// and the nearest token of the rest of that entity, in the β-skeleton.
pub fn fragment_distances(doc: &SynthDocument) -> Vec<usize> {
    let tokens = &doc.document.tokens;
    let centers: Vec<(f64, f64)> = tokens.iter().map(|t| t.bbox.center()).collect();
    let mut adj = vec![Vec::new(); tokens.len()];
    for (a, b) in beta_skeleton_edges(&centers) {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut out = Vec::new();
    for e in doc.split_entities() {
        let runs = contiguous_runs(doc.entities[e].clone());
        let mut worst = 0;
        for (ri, &(s, t)) in runs.iter().enumerate() {
            let from: Vec<usize> = (s..=t).collect();
            let dist = bfs(tokens.len(), &adj, &from);
            let nearest = runs
                .iter()
                .enumerate()
                .filter(|&(rj, _)| rj != ri)
                .flat_map(|(_, &(a, b))| a..=b)
                .map(|p| dist[p])
                .min()
                .unwrap_or(0);
            worst = worst.max(nearest);
        }
        out.push(worst);
    }
    out
}
