//! Line-delimited JSON corpus: one document per line.
//!
//! `{"page_w", "page_h", "tokens": [{"text", "box": [x0,y0,x1,y1]}],
//!   "entities": [{"label", "start", "end"}]}`

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, Document, EntitySpan, Token, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusToken {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub page_w: f64,
    pub page_h: f64,
    pub tokens: Vec<CorpusToken>,
    pub entities: Vec<EntitySpan>,
}

impl CorpusRecord {
    pub fn from_document(doc: &Document) -> Self {
        Self {
            page_w: doc.page_width,
            page_h: doc.page_height,
            tokens: doc
                .tokens
                .iter()
                .map(|t| CorpusToken {
                    text: t.text.clone(),
                    bbox: [t.bbox.x0, t.bbox.y0, t.bbox.x1, t.bbox.y1],
                })
                .collect(),
            entities: doc.gold_spans.clone(),
        }
    }

    /// Tokens are stored already segmented; each maps to its own word index.
    pub fn into_document(self, vocab: &Vocabulary) -> Result<Document> {
        let tokens = self
            .tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let [x0, y0, x1, y1] = t.bbox;
                Ok(Token {
                    vocab_id: vocab.lookup_or_unk(&t.text),
                    text: t.text,
                    bbox: BoundingBox::new(x0, y0, x1, y1)?,
                    word_index: i,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Document::new(tokens, self.page_w, self.page_h, self.entities)
    }
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for d in docs {
        let line = serde_json::to_string(&CorpusRecord::from_document(d))
            .map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Document>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            key: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        docs.push(rec.into_document(vocab).map_err(|e| Error::Parse {
            path: path.to_owned(),
            key: format!("line {}", i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(docs)
}
