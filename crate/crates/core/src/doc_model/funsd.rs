//! Reader for FUNSD-style annotation files.
//!
//! Schema: a top-level `form` array whose entries carry `box`, `text`,
//! `label`, `words` (each with `box` and `text`), and `linking`. The
//! annotation does not record the page size, so the page is taken as the
//! tight extent of all word boxes.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{contiguous_runs, serialize, tokenize_words, BoundingBox, Document, EntitySpan, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FunsdLabel {
    Header,
    Question,
    Answer,
    Other,
}

pub const FUNSD_LABELS: [FunsdLabel; 4] = [
    FunsdLabel::Header,
    FunsdLabel::Question,
    FunsdLabel::Answer,
    FunsdLabel::Other,
];

impl FunsdLabel {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "header" => Some(Self::Header),
            "question" => Some(Self::Question),
            "answer" => Some(Self::Answer),
            "other" => Some(Self::Other),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Header => "header",
            Self::Question => "question",
            Self::Answer => "answer",
            Self::Other => "other",
        }
    }
}

/// What the loader had to adjust while building a [`Document`].
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub path: PathBuf,
    pub entities: usize,
    /// Entity ids whose tokens were not contiguous after serialization,
    /// with the number of fragments each became.
    pub split_entities: Vec<(i64, usize)>,
    pub skipped_empty_words: usize,
    pub labels_seen: Vec<FunsdLabel>,
    /// Link pairs as read; not used for tagging.
    pub links: Vec<(i64, i64)>,
}

fn parse_err(path: &Path, key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        key: key.into(),
        message: message.into(),
    }
}

fn parse_box(path: &Path, key: &str, v: Option<&Value>) -> Result<BoundingBox> {
    let arr = v
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(path, key, "expected an array of 4 numbers"))?;
    if arr.len() != 4 {
        return Err(parse_err(path, key, "expected an array of 4 numbers"));
    }
    let mut c = [0.0; 4];
    for (i, x) in arr.iter().enumerate() {
        c[i] = x
            .as_f64()
            .ok_or_else(|| parse_err(path, key, "box coordinate is not a number"))?;
    }
    let b = BoundingBox {
        x0: c[0].min(c[2]).max(0.0),
        y0: c[1].min(c[3]).max(0.0),
        x1: c[0].max(c[2]).max(0.0),
        y1: c[1].max(c[3]).max(0.0),
    };
    b.validate()
        .map_err(|e| parse_err(path, key, e.to_string()))?;
    Ok(b)
}

/// Loads one annotation file. Entities labelled `other` contribute tokens but
/// no span; an entity whose tokens are not contiguous in serialized order is
/// split into maximal contiguous sub-spans.
pub fn load_funsd(path: &Path, vocab: &Vocabulary) -> Result<(Document, LoadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| parse_err(path, "<root>", e.to_string()))?;
    let form = root
        .get("form")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(path, "form", "missing top-level `form` array"))?;

    let mut report = LoadReport {
        path: path.to_owned(),
        ..LoadReport::default()
    };
    let mut words: Vec<(String, BoundingBox)> = Vec::new();
    let mut word_entity: Vec<usize> = Vec::new();
    let mut entity_meta: Vec<(i64, FunsdLabel)> = Vec::new();

    for (ei, entry) in form.iter().enumerate() {
        let key = |k: &str| format!("form[{ei}].{k}");
        parse_box(path, &key("box"), entry.get("box"))?;
        entry
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(path, key("text"), "expected a string"))?;
        let label_str = entry
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(path, key("label"), "expected a string"))?;
        let label = FunsdLabel::parse(label_str)
            .ok_or_else(|| parse_err(path, key("label"), format!("unknown label `{label_str}`")))?;
        let id = entry.get("id").and_then(Value::as_i64).unwrap_or(ei as i64);
        let entry_words = entry
            .get("words")
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err(path, key("words"), "expected an array"))?;
        let linking = entry
            .get("linking")
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err(path, key("linking"), "expected an array"))?;
        for (li, link) in linking.iter().enumerate() {
            let pair = link
                .as_array()
                .filter(|a| a.len() == 2)
                .and_then(|a| Some((a[0].as_i64()?, a[1].as_i64()?)))
                .ok_or_else(|| {
                    parse_err(path, key(&format!("linking[{li}]")), "expected a pair of ids")
                })?;
            report.links.push(pair);
        }

        if !report.labels_seen.contains(&label) {
            report.labels_seen.push(label);
        }
        report.entities += 1;
        entity_meta.push((id, label));
        for (wi, w) in entry_words.iter().enumerate() {
            let wkey = format!("form[{ei}].words[{wi}]");
            let b = parse_box(path, &format!("{wkey}.box"), w.get("box"))?;
            let t = w
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| parse_err(path, format!("{wkey}.text"), "expected a string"))?;
            let t = t.trim();
            if t.is_empty() {
                report.skipped_empty_words += 1;
                continue;
            }
            words.push((t.to_owned(), b));
            word_entity.push(entity_meta.len() - 1);
        }
    }

    let tokens = tokenize_words(&words, vocab)?;
    let boxes: Vec<BoundingBox> = tokens.iter().map(|t| t.bbox).collect();
    let order = serialize(&boxes);
    let tokens: Vec<_> = order.iter().map(|&i| tokens[i].clone()).collect();

    let mut positions: Vec<Vec<usize>> = vec![Vec::new(); entity_meta.len()];
    for (pos, t) in tokens.iter().enumerate() {
        positions[word_entity[t.word_index]].push(pos);
    }
    let mut spans = Vec::new();
    for (e, pos) in positions.into_iter().enumerate() {
        let (id, label) = entity_meta[e];
        if pos.is_empty() {
            continue;
        }
        let runs = contiguous_runs(pos);
        if runs.len() > 1 {
            report.split_entities.push((id, runs.len()));
        }
        if label == FunsdLabel::Other {
            continue;
        }
        for (s, t) in runs {
            spans.push(EntitySpan::new(label.as_str(), s, t));
        }
    }
    spans.sort_by_key(|s| s.start);

    let (w, h) = boxes
        .iter()
        .fold((0.0f64, 0.0f64), |(w, h), b| (w.max(b.x1), h.max(b.y1)));
    let doc = Document::new(tokens, w.max(1.0), h.max(1.0), spans)?;
    Ok((doc, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(json: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(json.as_bytes()).unwrap();
        f
    }

    #[test]
    fn one_question_entity() {
        let f = write(
            r#"{"form": [{"id": 0, "box": [10, 10, 120, 30], "text": "DATE NAME", "label": "question",
                "words": [{"box": [10, 10, 60, 30], "text": "DATE"}, {"box": [70, 10, 120, 30], "text": "NAME"}],
                "linking": []}]}"#,
        );
        let (doc, report) = load_funsd(f.path(), &Vocabulary::toy()).unwrap();
        assert!(!doc.tokens.is_empty());
        assert_eq!(doc.gold_spans, vec![EntitySpan::new("question", 0, 1)]);
        assert!(report.split_entities.is_empty());
    }

    #[test]
    fn empty_form() {
        let f = write(r#"{"form": []}"#);
        let (doc, _) = load_funsd(f.path(), &Vocabulary::toy()).unwrap();
        assert!(doc.tokens.is_empty() && doc.gold_spans.is_empty());
    }

    #[test]
    fn other_contributes_tokens_only() {
        let f = write(
            r#"{"form": [{"id": 3, "box": [0, 0, 50, 20], "text": "THE", "label": "other",
                "words": [{"box": [0, 0, 50, 20], "text": "THE"}], "linking": [[3, 4]]}]}"#,
        );
        let (doc, report) = load_funsd(f.path(), &Vocabulary::toy()).unwrap();
        assert_eq!(doc.tokens.len(), 1);
        assert!(doc.gold_spans.is_empty());
        assert_eq!(report.links, vec![(3, 4)]);
    }

    #[test]
    fn split_entity_becomes_fragments() {
        // Two-line question in the left column, answer on the first line to the right.
        let f = write(
            r#"{"form": [
              {"id": 0, "box": [0, 0, 50, 50], "text": "TOTAL AMOUNT", "label": "question",
               "words": [{"box": [0, 0, 50, 20], "text": "TOTAL"}, {"box": [0, 30, 50, 50], "text": "AMOUNT"}], "linking": []},
              {"id": 1, "box": [300, 0, 350, 20], "text": "USD", "label": "answer",
               "words": [{"box": [300, 0, 350, 20], "text": "USD"}], "linking": []}]}"#,
        );
        let (doc, report) = load_funsd(f.path(), &Vocabulary::toy()).unwrap();
        assert_eq!(
            doc.gold_spans,
            vec![
                EntitySpan::new("question", 0, 0),
                EntitySpan::new("answer", 1, 1),
                EntitySpan::new("question", 2, 2)
            ]
        );
        assert_eq!(report.split_entities, vec![(0, 2)]);
    }

    #[test]
    fn malformed_file_names_the_key() {
        let f = write(r#"{"form": [{"box": [0, 0, 1, 1], "text": "x", "label": "question", "linking": []}]}"#);
        let err = load_funsd(f.path(), &Vocabulary::toy()).unwrap_err().to_string();
        assert!(err.contains("form[0].words"), "{err}");
        assert!(err.contains(&f.path().display().to_string()));

        let f = write(r#"{"nope": 1}"#);
        let err = load_funsd(f.path(), &Vocabulary::toy()).unwrap_err().to_string();
        assert!(err.contains("form"), "{err}");
    }
}
