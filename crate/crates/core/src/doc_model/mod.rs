//! OCR'd form documents: geometry, serialization order, and gold entity spans.

mod corpus;
mod funsd;
mod vocab;

pub use corpus::{read_corpus, write_corpus, CorpusRecord};
pub use funsd::{load_funsd, FunsdLabel, LoadReport, FUNSD_LABELS};
pub use vocab::{tokenize_words, Vocabulary, MASK_PIECE, UNK_PIECE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_SEQ: usize = 1024;

/// Axis-aligned box in page units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x0, self.y0, self.x1, self.y1];
        if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "box coordinates must be finite and non-negative: {self:?}"
            )));
        }
        if self.x0 > self.x1 || self.y0 > self.y1 {
            return Err(Error::invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            x0: self.x0 / s,
            y0: self.y0 / s,
            x1: self.x1 / s,
            y1: self.y1 / s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub vocab_id: u32,
    pub bbox: BoundingBox,
    /// Index of the OCR word this piece came from.
    pub word_index: usize,
}

/// Inclusive token range carrying an entity label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            label: label.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Checks range and pairwise non-overlap of spans over `n` tokens.
pub fn validate_spans(spans: &[EntitySpan], n: usize) -> Result<()> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for s in &sorted {
        if s.start > s.end || s.end >= n {
            return Err(Error::invalid(format!(
                "span {s:?} out of range for {n} tokens"
            )));
        }
    }
    for w in sorted.windows(2) {
        if w[1].start <= w[0].end {
            return Err(Error::invalid(format!(
                "overlapping spans {:?} and {:?}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// A single-page document with tokens in serialized order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<Token>,
    pub page_width: f64,
    pub page_height: f64,
    pub gold_spans: Vec<EntitySpan>,
}

impl Document {
    pub fn new(
        tokens: Vec<Token>,
        page_width: f64,
        page_height: f64,
        gold_spans: Vec<EntitySpan>,
    ) -> Result<Self> {
        let doc = Self {
            tokens,
            page_width,
            page_height,
            gold_spans,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() > MAX_SEQ {
            return Err(Error::invalid(format!(
                "document has {} tokens, above the maximum of {MAX_SEQ}",
                self.tokens.len()
            )));
        }
        if !(self.page_width.is_finite() && self.page_height.is_finite())
            || self.page_width < 0.0
            || self.page_height < 0.0
        {
            return Err(Error::invalid("page dimensions must be finite and non-negative"));
        }
        // Normalization divides by the larger page side; allow for its rounding.
        let tol = 1e-9 * self.page_width.max(self.page_height).max(1.0);
        for (i, t) in self.tokens.iter().enumerate() {
            t.bbox.validate()?;
            if t.bbox.x1 > self.page_width + tol || t.bbox.y1 > self.page_height + tol {
                return Err(Error::invalid(format!(
                    "token {i} box {:?} lies outside the {}x{} page",
                    t.bbox, self.page_width, self.page_height
                )));
            }
            if t.text.is_empty() {
                return Err(Error::invalid(format!("token {i} has empty text")));
            }
        }
        validate_spans(&self.gold_spans, self.tokens.len())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.tokens.iter().map(|t| t.bbox).collect()
    }

    /// Reorders tokens by `perm` (new position `i` holds old token `perm[i]`).
    /// Gold spans are dropped; they are only meaningful in one order.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            tokens: perm.iter().map(|&i| self.tokens[i].clone()).collect(),
            page_width: self.page_width,
            page_height: self.page_height,
            gold_spans: Vec::new(),
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Left-to-right, top-to-bottom reading order.
///
/// Tokens are sorted by vertical center and chained into the same line while
/// consecutive centers are closer than half the median token height. Lines are
/// read in order of mean vertical center, tokens within a line by horizontal
/// center; remaining ties fall back to (y-center, x-center, input index).
pub fn serialize(boxes: &[BoundingBox]) -> Vec<usize> {
    let n = boxes.len();
    if n <= 1 {
        return (0..n).collect();
    }
    let centers: Vec<(f64, f64)> = boxes.iter().map(BoundingBox::center).collect();
    let mut heights: Vec<f64> = boxes.iter().map(BoundingBox::height).collect();
    let threshold = 0.5 * median(&mut heights);

    let key = |i: usize, j: usize| {
        centers[i]
            .1
            .total_cmp(&centers[j].1)
            .then(centers[i].0.total_cmp(&centers[j].0))
            .then(i.cmp(&j))
    };
    let mut by_y: Vec<usize> = (0..n).collect();
    by_y.sort_by(|&a, &b| key(a, b));

    let mut lines: Vec<Vec<usize>> = Vec::new();
    let mut prev_y = f64::NAN;
    for &i in &by_y {
        let y = centers[i].1;
        match lines.last_mut() {
            Some(line) if (y - prev_y).abs() < threshold => line.push(i),
            _ => lines.push(vec![i]),
        }
        prev_y = y;
    }

    let mut keyed: Vec<(f64, Vec<usize>)> = lines
        .into_iter()
        .map(|mut line| {
            let mean_y = line.iter().map(|&i| centers[i].1).sum::<f64>() / line.len() as f64;
            line.sort_by(|&a, &b| {
                centers[a]
                    .0
                    .total_cmp(&centers[b].0)
                    .then_with(|| key(a, b))
            });
            (mean_y, line)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| key(a.1[0], b.1[0])));
    keyed.into_iter().flat_map(|(_, line)| line).collect()
}

/// Divides every coordinate (and the page size) by `max(page_width, page_height)`.
pub fn normalize_coords(doc: &Document) -> Result<Document> {
    if !(doc.page_width > 0.0 && doc.page_height > 0.0) {
        return Err(Error::invalid(format!(
            "cannot normalize a {}x{} page",
            doc.page_width, doc.page_height
        )));
    }
    let s = doc.page_width.max(doc.page_height);
    Ok(Document {
        tokens: doc
            .tokens
            .iter()
            .map(|t| Token {
                bbox: t.bbox.scaled(s),
                ..t.clone()
            })
            .collect(),
        page_width: doc.page_width / s,
        page_height: doc.page_height / s,
        gold_spans: doc.gold_spans.clone(),
    })
}

/// Splits a set of serialized positions into maximal contiguous runs.
pub(crate) fn contiguous_runs(mut positions: Vec<usize>) -> Vec<(usize, usize)> {
    positions.sort_unstable();
    positions.dedup();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for p in positions {
        match runs.last_mut() {
            Some((_, end)) if *end + 1 == p => *end = p,
            _ => runs.push((p, p)),
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn tok(b: BoundingBox) -> Token {
        Token {
            text: "t".into(),
            vocab_id: 2,
            bbox: b,
            word_index: 0,
        }
    }

    #[test]
    fn single_token_serializes_to_identity() {
        assert_eq!(serialize(&[bx(5.0, 5.0, 10.0, 10.0)]), vec![0]);
    }

    #[test]
    fn top_token_first_regardless_of_x() {
        // y-centers 100 and 10, heights 10
        let boxes = [bx(0.0, 95.0, 10.0, 105.0), bx(500.0, 5.0, 510.0, 15.0)];
        assert_eq!(serialize(&boxes), vec![1, 0]);
    }

    #[test]
    fn same_line_read_left_to_right() {
        let boxes = [
            bx(200.0, 12.0, 240.0, 32.0),
            bx(0.0, 10.0, 40.0, 30.0),
            bx(100.0, 9.0, 140.0, 29.0),
        ];
        assert_eq!(serialize(&boxes), vec![1, 2, 0]);
    }

    #[test]
    fn two_columns_interleave_row_by_row() {
        // Left column block "a1 a2" over two lines, right column "b1 b2" beside it.
        let boxes = [
            bx(0.0, 0.0, 50.0, 20.0),    // a1
            bx(0.0, 30.0, 50.0, 50.0),   // a2
            bx(300.0, 0.0, 350.0, 20.0), // b1
            bx(300.0, 30.0, 350.0, 50.0),
        ];
        assert_eq!(serialize(&boxes), vec![0, 2, 1, 3]);
    }

    #[test]
    fn normalize_examples() {
        let d = Document::new(vec![tok(bx(0.0, 0.0, 100.0, 50.0))], 200.0, 100.0, vec![]).unwrap();
        let n = normalize_coords(&d).unwrap();
        assert_eq!(n.tokens[0].bbox, bx(0.0, 0.0, 0.5, 0.25));

        let d = Document::new(vec![tok(bx(100.0, 100.0, 100.0, 100.0))], 100.0, 100.0, vec![])
            .unwrap();
        assert_eq!(normalize_coords(&d).unwrap().tokens[0].bbox, bx(1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn normalize_is_idempotent_on_unit_page() {
        let d = Document::new(vec![tok(bx(3.0, 7.0, 90.0, 41.0))], 130.0, 100.0, vec![]).unwrap();
        let once = normalize_coords(&d).unwrap();
        assert_eq!(once.page_width, 1.0);
        assert_eq!(normalize_coords(&once).unwrap(), once);
    }

    #[test]
    fn normalize_rejects_zero_page() {
        let d = Document {
            tokens: vec![],
            page_width: 0.0,
            page_height: 10.0,
            gold_spans: vec![],
        };
        assert!(normalize_coords(&d).is_err());
    }

    #[test]
    fn contiguous_runs_split() {
        assert_eq!(contiguous_runs(vec![5, 1, 2, 7, 6]), vec![(1, 2), (5, 7)]);
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<BoundingBox>> {
        prop::collection::vec((0.0..900.0f64, 0.0..900.0f64, 1.0..80.0f64, 5.0..30.0f64), 1..40)
            .prop_map(|v| {
                v.into_iter()
                    .map(|(x, y, w, h)| bx(x, y, x + w, y + h))
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn serialize_is_a_permutation(boxes in arb_boxes()) {
            let mut p = serialize(&boxes);
            p.sort_unstable();
            prop_assert_eq!(p, (0..boxes.len()).collect::<Vec<_>>());
        }

        #[test]
        fn serialize_ignores_input_order(boxes in arb_boxes(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..boxes.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<BoundingBox> = perm.iter().map(|&i| boxes[i]).collect();
            let a: Vec<(u64, u64)> = serialize(&boxes)
                .into_iter()
                .map(|i| (boxes[i].center().0.to_bits(), boxes[i].center().1.to_bits()))
                .collect();
            let b: Vec<(u64, u64)> = serialize(&shuffled)
                .into_iter()
                .map(|i| (shuffled[i].center().0.to_bits(), shuffled[i].center().1.to_bits()))
                .collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn normalize_preserves_aspect_ratios(boxes in arb_boxes(), w in 980.0..2000.0f64, h in 980.0..2000.0f64) {
            let d = Document::new(boxes.iter().map(|&b| tok(b)).collect(), w, h, vec![]).unwrap();
            let n = normalize_coords(&d).unwrap();
            let s = w.max(h);
            for (a, b) in d.tokens.iter().zip(&n.tokens) {
                prop_assert_eq!(b.bbox.x0, a.bbox.x0 / s);
                prop_assert_eq!(b.bbox.y1, a.bbox.y1 / s);
                let (ra, rb) = (a.bbox.width() * b.bbox.height(), a.bbox.height() * b.bbox.width());
                prop_assert!((ra - rb).abs() <= 1e-12 * ra.abs().max(1.0));
            }
        }
    }
}
