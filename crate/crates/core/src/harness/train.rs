//! Masked-language-model pretraining, BIOES fine-tuning and evaluation.

use std::path::Path;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId, ParameterStore};
use crate::decoder_metrics::{
    bioes_decode, bioes_encode, viterbi, DecodeMode, LabelSchema, Prf, PrfAccumulator, PrfReport,
};
use crate::doc_model::{normalize_coords, Document, EntitySpan, Vocabulary};
use crate::error::{Error, Result};
use crate::etc_backbone::{Mode, Model, ModelConfig, PreparedDoc};
use crate::harness::config::RunConfig;

/// Stream reserved for the fixed evaluation masks.
const EVAL_STREAM: u64 = u64::MAX;

/// A document with its parameter-independent tensors and gold tags.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: PreparedDoc,
    pub gold: Vec<EntitySpan>,
    pub tags: Vec<usize>,
}

/// Normalizes and prepares documents; empty documents are skipped. Gold
/// labels outside the schema are an error.
pub fn prepare(docs: &[Document], model: &ModelConfig, schema: &LabelSchema) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        if d.is_empty() {
            continue;
        }
        let tags = bioes_encode(&d.gold_spans, d.len(), schema).map_err(|e| {
            Error::Config(format!("document {i} does not match the label schema: {e}"))
        })?;
        let norm = normalize_coords(d)?;
        out.push(Example {
            input: PreparedDoc::new(&norm, model)?,
            gold: d.gold_spans.clone(),
            tags,
        });
    }
    Ok(out)
}

/// Masked inputs and per-position targets.
///
/// Each position is selected with probability `rate`; a selected position is
/// replaced by `mask_id` (80%), a uniformly random id (10%), or kept (10%).
pub fn mask_tokens<R: Rng + ?Sized>(
    ids: &[usize],
    rate: f64,
    vocab_size: usize,
    mask_id: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut inputs = ids.to_vec();
    let mut targets = vec![None; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if !rng.random_bool(rate) {
            continue;
        }
        targets[i] = Some(id);
        let r: f64 = rng.random();
        if r < 0.8 {
            inputs[i] = mask_id;
        } else if r < 0.9 {
            inputs[i] = rng.random_range(0..vocab_size);
        }
    }
    (inputs, targets)
}

#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub step: usize,
    pub f1: f64,
    pub store: ParameterStore,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOutcome {
    /// `(step, loss)` for every step taken.
    pub losses: Vec<(usize, f64)>,
    pub dev_log: Vec<(usize, Prf)>,
    pub best: Option<BestCheckpoint>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParameterStore,
    pub schema: LabelSchema,
    pub vocab_size: usize,
    mask_id: Option<usize>,
}

impl Trainer {
    /// Registers a fresh model; initialization draws from the run seed.
    pub fn new(config: &RunConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        let schema = LabelSchema::new(config.entity_types.iter().cloned())?;
        let mc = config.model_config(vocab.len(), schema.num_tags())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let model = Model::register(&mut store, mc, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            model,
            store,
            schema,
            vocab_size: vocab.len(),
            mask_id: vocab.mask_id().map(|m| m as usize),
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Loads parameter values; with `resume` also the optimizer state and step.
    pub fn load_checkpoint(&mut self, dir: &Path, resume: bool) -> Result<()> {
        self.store.load(dir)?;
        if !resume {
            self.store.reset_optimizer();
        }
        Ok(())
    }

    pub fn prepare(&self, docs: &[Document]) -> Result<Vec<Example>> {
        prepare(docs, &self.model.config, &self.schema)
    }

    /// Generator for one training step, independent of earlier steps.
    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
        r.set_stream(step + 1);
        r
    }

    fn train_step<F>(&mut self, data: &[Example], loss_fn: F) -> Result<f64>
    where
        F: Fn(&Model, &ParameterStore, &mut Graph, &Example, &mut ChaCha8Rng) -> Result<NodeId>,
    {
        if data.is_empty() {
            return Err(Error::invalid("training corpus is empty"));
        }
        let step = self.store.step();
        let mut rng = self.step_rng(step);
        let k = self.config.batch_size.min(data.len());
        let mut picked: Vec<usize> = sample(&mut rng, data.len(), k).into_vec();
        picked.sort_unstable();
        let mut grads = Gradients::default();
        let mut total = 0.0;
        for i in picked {
            let mut g = Graph::new();
            let loss = loss_fn(&self.model, &self.store, &mut g, &data[i], &mut rng)?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss {v} at step {step}")));
            }
            total += v;
            g.backward(loss)?;
            grads.merge(&g.param_gradients());
        }
        grads.scale(1.0 / k as f64);
        let lr = self.config.learning_rate_at(step as usize);
        self.store.adam_step(&grads, lr);
        Ok(total / k as f64)
    }

    fn require_mask_id(&self) -> Result<usize> {
        self.mask_id
            .ok_or_else(|| Error::Config("vocabulary has no [MASK] piece".into()))
    }

    pub fn mlm_step(&mut self, data: &[Example]) -> Result<f64> {
        let mask_id = self.require_mask_id()?;
        let (rate, vocab) = (self.config.mask_rate, self.vocab_size);
        self.train_step(data, |model, store, g, ex, rng| {
            let (inputs, targets) = mask_tokens(&ex.input.ids, rate, vocab, mask_id, rng);
            let logits = model.forward(g, store, &ex.input, &inputs, Mode::Mlm)?;
            g.cross_entropy(logits, Rc::new(targets))
        })
    }

    pub fn tagging_step(&mut self, data: &[Example]) -> Result<f64> {
        self.train_step(data, |model, store, g, ex, _| {
            let logits = model.forward(g, store, &ex.input, &ex.input.ids, Mode::Tagging)?;
            g.cross_entropy(logits, Rc::new(ex.tags.iter().map(|&t| Some(t)).collect()))
        })
    }

    /// MLM loss over fixed masks: total cross-entropy divided by the number of
    /// masked positions.
    pub fn mlm_eval_loss(&self, store: &ParameterStore, data: &[Example]) -> Result<f64> {
        let mask_id = self.require_mask_id()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(EVAL_STREAM);
        let (mut sum, mut count) = (0.0, 0usize);
        for ex in data {
            let (inputs, targets) =
                mask_tokens(&ex.input.ids, self.config.mask_rate, self.vocab_size, mask_id, &mut rng);
            let n = targets.iter().filter(|t| t.is_some()).count();
            if n == 0 {
                continue;
            }
            let mut g = Graph::new();
            let logits = self.model.forward(&mut g, store, &ex.input, &inputs, Mode::Mlm)?;
            let loss = g.cross_entropy(logits, Rc::new(targets))?;
            sum += g.value(loss).item() * n as f64;
            count += n;
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }

    /// Constrained Viterbi tags for one document.
    pub fn predict_tags(&self, store: &ParameterStore, ex: &Example) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let logits = self.model.forward(&mut g, store, &ex.input, &ex.input.ids, Mode::Tagging)?;
        viterbi(g.value(logits), &self.schema)
    }

    pub fn evaluate(&self, store: &ParameterStore, data: &[Example]) -> Result<PrfReport> {
        let mut acc = PrfAccumulator::default();
        for ex in data {
            let tags = self.predict_tags(store, ex)?;
            let pred = bioes_decode(&tags, &self.schema, DecodeMode::Strict)?;
            acc.add(&pred, &ex.gold);
        }
        Ok(acc.report())
    }

    /// Fraction of tokens whose decoded tag equals the gold tag.
    pub fn token_accuracy(&self, store: &ParameterStore, data: &[Example]) -> Result<f64> {
        let (mut right, mut total) = (0usize, 0usize);
        for ex in data {
            let tags = self.predict_tags(store, ex)?;
            right += tags.iter().zip(&ex.tags).filter(|(a, b)| a == b).count();
            total += tags.len();
        }
        Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
    }

    /// Trains until the store reaches `config.steps`, evaluating on `dev`
    /// every `eval_every` steps and at the end. The best dev micro F1 (the
    /// earliest on ties) is kept.
    pub fn finetune(&mut self, train: &[Example], dev: &[Example]) -> Result<FinetuneOutcome> {
        let mut out = FinetuneOutcome::default();
        let steps = self.config.steps;
        while (self.store.step() as usize) < steps {
            let step = self.store.step() as usize;
            let loss = self.tagging_step(train)?;
            out.losses.push((step, loss));
            let done = step + 1;
            if !dev.is_empty() && (done % self.config.eval_every == 0 || done == steps) {
                let prf = self.evaluate(&self.store, dev)?.micro;
                out.dev_log.push((done, prf));
                if out.best.as_ref().is_none_or(|b| prf.f1 > b.f1) {
                    out.best = Some(BestCheckpoint {
                        step: done,
                        f1: prf.f1,
                        store: self.store.clone(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Trains the MLM head until the store reaches `config.steps`.
    pub fn pretrain(&mut self, train: &[Example]) -> Result<Vec<(usize, f64)>> {
        let mut losses = Vec::new();
        while (self.store.step() as usize) < self.config.steps {
            let step = self.store.step() as usize;
            losses.push((step, self.mlm_step(train)?));
        }
        Ok(losses)
    }
}

/// Gold tags pushed through decoding and scoring, bypassing the model.
pub fn evaluate_gold(docs: &[Document], schema: &LabelSchema) -> Result<PrfReport> {
    let mut acc = PrfAccumulator::default();
    for d in docs {
        let tags = bioes_encode(&d.gold_spans, d.len(), schema)?;
        let pred = bioes_decode(&tags, schema, DecodeMode::Strict)?;
        acc.add(&pred, &d.gold_spans);
    }
    Ok(acc.report())
}
