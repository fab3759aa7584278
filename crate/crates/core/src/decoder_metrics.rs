//! BIOES tagging, constrained Viterbi decoding, and entity-level scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::autodiff::Tensor;
use crate::doc_model::EntitySpan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    O,
    B(usize),
    I(usize),
    E(usize),
    S(usize),
}

/// Tag ids: `O = 0`, then `B, I, E, S` for each entity type in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    types: Vec<String>,
}

impl LabelSchema {
    pub fn new<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Result<Self> {
        let types: Vec<String> = types.into_iter().map(Into::into).collect();
        let unique: BTreeSet<&String> = types.iter().collect();
        if unique.len() != types.len() {
            return Err(Error::invalid("duplicate entity type in label schema"));
        }
        Ok(Self { types })
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn num_tags(&self) -> usize {
        4 * self.types.len() + 1
    }

    pub fn type_index(&self, label: &str) -> Option<usize> {
        self.types.iter().position(|t| t == label)
    }

    pub fn id(&self, tag: Tag) -> usize {
        match tag {
            Tag::O => 0,
            Tag::B(t) => 1 + 4 * t,
            Tag::I(t) => 2 + 4 * t,
            Tag::E(t) => 3 + 4 * t,
            Tag::S(t) => 4 + 4 * t,
        }
    }

    pub fn tag(&self, id: usize) -> Tag {
        if id == 0 {
            return Tag::O;
        }
        let t = (id - 1) / 4;
        match (id - 1) % 4 {
            0 => Tag::B(t),
            1 => Tag::I(t),
            2 => Tag::E(t),
            _ => Tag::S(t),
        }
    }

    pub fn tag_name(&self, id: usize) -> String {
        match self.tag(id) {
            Tag::O => "O".to_owned(),
            Tag::B(t) => format!("B-{}", self.types[t]),
            Tag::I(t) => format!("I-{}", self.types[t]),
            Tag::E(t) => format!("E-{}", self.types[t]),
            Tag::S(t) => format!("S-{}", self.types[t]),
        }
    }

    pub fn can_start(&self, id: usize) -> bool {
        matches!(self.tag(id), Tag::O | Tag::B(_) | Tag::S(_))
    }

    pub fn can_end(&self, id: usize) -> bool {
        matches!(self.tag(id), Tag::O | Tag::E(_) | Tag::S(_))
    }

    pub fn allowed(&self, from: usize, to: usize) -> bool {
        match (self.tag(from), self.tag(to)) {
            (Tag::O | Tag::E(_) | Tag::S(_), next) => matches!(next, Tag::O | Tag::B(_) | Tag::S(_)),
            (Tag::B(t) | Tag::I(t), Tag::I(u) | Tag::E(u)) => t == u,
            _ => false,
        }
    }
}

pub fn validate_tags(tags: &[usize], schema: &LabelSchema) -> Result<()> {
    let bad = |position, message: String| Err(Error::InvalidTags { position, message });
    for (i, &t) in tags.iter().enumerate() {
        if t >= schema.num_tags() {
            return bad(i, format!("tag id {t} out of range"));
        }
        if i == 0 && !schema.can_start(t) {
            return bad(i, format!("sequence cannot start with {}", schema.tag_name(t)));
        }
        if i > 0 && !schema.allowed(tags[i - 1], t) {
            return bad(
                i,
                format!("{} cannot follow {}", schema.tag_name(t), schema.tag_name(tags[i - 1])),
            );
        }
    }
    if let Some(&last) = tags.last() {
        if !schema.can_end(last) {
            return bad(
                tags.len() - 1,
                format!("sequence cannot end with {}", schema.tag_name(last)),
            );
        }
    }
    Ok(())
}

pub fn bioes_encode(spans: &[EntitySpan], n: usize, schema: &LabelSchema) -> Result<Vec<usize>> {
    let mut tags = vec![0; n];
    let mut taken = vec![false; n];
    for s in spans {
        let t = schema
            .type_index(&s.label)
            .ok_or_else(|| Error::invalid(format!("unknown entity type `{}`", s.label)))?;
        if s.start > s.end || s.end >= n {
            return Err(Error::invalid(format!("span {s:?} out of range for {n} tokens")));
        }
        if taken[s.start..=s.end].iter().any(|&x| x) {
            return Err(Error::invalid(format!("span {s:?} overlaps another span")));
        }
        taken[s.start..=s.end].iter_mut().for_each(|x| *x = true);
        if s.start == s.end {
            tags[s.start] = schema.id(Tag::S(t));
        } else {
            tags[s.start] = schema.id(Tag::B(t));
            for tag in &mut tags[s.start + 1..s.end] {
                *tag = schema.id(Tag::I(t));
            }
            tags[s.end] = schema.id(Tag::E(t));
        }
    }
    Ok(tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Reject sequences that violate the transition rules.
    Strict,
    /// Keep complete spans and drop unfinished fragments.
    Repair,
}

pub fn bioes_decode(tags: &[usize], schema: &LabelSchema, mode: DecodeMode) -> Result<Vec<EntitySpan>> {
    if mode == DecodeMode::Strict {
        validate_tags(tags, schema)?;
    }
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &id) in tags.iter().enumerate() {
        if id >= schema.num_tags() {
            return Err(Error::InvalidTags {
                position: i,
                message: format!("tag id {id} out of range"),
            });
        }
        match schema.tag(id) {
            Tag::O => open = None,
            Tag::S(t) => {
                spans.push(EntitySpan::new(schema.types[t].clone(), i, i));
                open = None;
            }
            Tag::B(t) => open = Some((t, i)),
            Tag::I(t) => {
                if !matches!(open, Some((u, _)) if u == t) {
                    open = None;
                }
            }
            Tag::E(t) => {
                if let Some((u, start)) = open {
                    if u == t {
                        spans.push(EntitySpan::new(schema.types[t].clone(), start, i));
                    }
                }
                open = None;
            }
        }
    }
    Ok(spans)
}

/// Highest-scoring valid tag sequence under hard transition constraints;
/// among equal scores the lexicographically smallest id sequence wins.
pub fn viterbi(logits: &Tensor, schema: &LabelSchema) -> Result<Vec<usize>> {
    let (n, k) = logits.shape();
    if k != schema.num_tags() {
        return Err(Error::ShapeMismatch {
            op: "viterbi",
            left: (n, k),
            right: (n, schema.num_tags()),
        });
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("viterbi logits".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // best[t][s]: best score of positions t.. given tag s at t.
    let mut best = vec![vec![f64::NEG_INFINITY; k]; n];
    for s in 0..k {
        if schema.can_end(s) {
            best[n - 1][s] = logits.get(n - 1, s);
        }
    }
    for t in (0..n - 1).rev() {
        for s in 0..k {
            let tail = (0..k)
                .filter(|&u| schema.allowed(s, u))
                .map(|u| best[t + 1][u])
                .fold(f64::NEG_INFINITY, f64::max);
            best[t][s] = logits.get(t, s) + tail;
        }
    }
    let pick = |row: &[f64], ok: &dyn Fn(usize) -> bool| {
        let mut arg = None;
        for s in (0..k).filter(|&s| ok(s)) {
            if arg.is_none_or(|a: usize| row[s] > row[a]) {
                arg = Some(s);
            }
        }
        arg.expect("the all-O sequence is always valid")
    };
    let mut path = Vec::with_capacity(n);
    path.push(pick(&best[0], &|s| schema.can_start(s)));
    for t in 1..n {
        let prev = path[t - 1];
        path.push(pick(&best[t], &|s| schema.allowed(prev, s)));
    }
    Ok(path)
}

/// Reference decoder that enumerates every valid sequence.
pub mod oracle {
    use super::LabelSchema;
    use crate::autodiff::Tensor;

    /// Exhaustive search in lexicographic order; the first strictly better
    /// sequence replaces the incumbent.
    pub fn viterbi_exhaustive(logits: &Tensor, schema: &LabelSchema) -> Vec<usize> {
        let n = logits.rows();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut cur = Vec::with_capacity(n);
        fn dfs(
            logits: &Tensor,
            schema: &LabelSchema,
            cur: &mut Vec<usize>,
            best: &mut Option<(f64, Vec<usize>)>,
        ) {
            let n = logits.rows();
            if cur.len() == n {
                if cur.last().is_some_and(|&l| !schema.can_end(l)) {
                    return;
                }
                let score: f64 = cur.iter().enumerate().map(|(t, &s)| logits.get(t, s)).sum();
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    *best = Some((score, cur.clone()));
                }
                return;
            }
            for s in 0..schema.num_tags() {
                let ok = match cur.last() {
                    None => schema.can_start(s),
                    Some(&p) => schema.allowed(p, s),
                };
                if ok {
                    cur.push(s);
                    dfs(logits, schema, cur, best);
                    cur.pop();
                }
            }
        }
        dfs(logits, schema, &mut cur, &mut best);
        best.map(|b| b.1).unwrap_or_default()
    }

    pub fn sequence_score(logits: &Tensor, tags: &[usize]) -> f64 {
        tags.iter().enumerate().map(|(t, &s)| logits.get(t, s)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize, other: usize| {
            if den > 0 {
                num as f64 / den as f64
            } else if other == 0 {
                1.0
            } else {
                0.0
            }
        };
        let precision = ratio(correct, predicted, gold);
        let recall = ratio(correct, gold, predicted);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TypeCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Exact-match span counts accumulated over documents.
#[derive(Debug, Clone, Default)]
pub struct PrfAccumulator {
    counts: BTreeMap<String, TypeCounts>,
}

impl PrfAccumulator {
    pub fn add(&mut self, pred: &[EntitySpan], gold: &[EntitySpan]) {
        let gold_set: BTreeSet<&EntitySpan> = gold.iter().collect();
        let pred_set: BTreeSet<&EntitySpan> = pred.iter().collect();
        for s in &pred_set {
            let c = self.counts.entry(s.label.clone()).or_default();
            c.predicted += 1;
            if gold_set.contains(s) {
                c.correct += 1;
            }
        }
        for s in &gold_set {
            self.counts.entry(s.label.clone()).or_default().gold += 1;
        }
    }

    pub fn report(&self) -> PrfReport {
        let total = self.counts.values().fold(TypeCounts::default(), |a, c| TypeCounts {
            correct: a.correct + c.correct,
            predicted: a.predicted + c.predicted,
            gold: a.gold + c.gold,
        });
        let micro = Prf::from_counts(total.correct, total.predicted, total.gold);
        let per_type: BTreeMap<String, (Prf, TypeCounts)> = self
            .counts
            .iter()
            .map(|(t, c)| (t.clone(), (Prf::from_counts(c.correct, c.predicted, c.gold), *c)))
            .collect();
        let in_gold: Vec<&(Prf, TypeCounts)> = per_type.values().filter(|(_, c)| c.gold > 0).collect();
        let macro_avg = if in_gold.is_empty() {
            // Nothing to average: agree with the micro convention.
            micro
        } else {
            let m = in_gold.len() as f64;
            Prf {
                precision: in_gold.iter().map(|(p, _)| p.precision).sum::<f64>() / m,
                recall: in_gold.iter().map(|(p, _)| p.recall).sum::<f64>() / m,
                f1: in_gold.iter().map(|(p, _)| p.f1).sum::<f64>() / m,
            }
        };
        PrfReport {
            micro,
            macro_avg,
            support: total.gold,
            per_type,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrfReport {
    pub micro: Prf,
    /// Unweighted means over the types present in gold.
    pub macro_avg: Prf,
    pub support: usize,
    pub per_type: BTreeMap<String, (Prf, TypeCounts)>,
}

impl PrfReport {
    /// Columns `type,precision,recall,f1,support`, one row per type followed
    /// by `micro` and `macro`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "type,precision,recall,f1,support")?;
        let mut row = |name: &str, p: &Prf, support: usize| {
            writeln!(
                w,
                "{name},{:.6},{:.6},{:.6},{support}",
                p.precision, p.recall, p.f1
            )
        };
        for (t, (p, c)) in &self.per_type {
            row(t, p, c.gold)?;
        }
        row("micro", &self.micro, self.support)?;
        row("macro", &self.macro_avg, self.support)
    }
}

pub fn entity_prf(pred: &[EntitySpan], gold: &[EntitySpan]) -> PrfReport {
    let mut acc = PrfAccumulator::default();
    acc.add(pred, gold);
    acc.report()
}
