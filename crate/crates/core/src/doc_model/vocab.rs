use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{BoundingBox, Token};
use crate::error::{Error, Result};

pub const UNK_PIECE: &str = "[UNK]";
pub const MASK_PIECE: &str = "[MASK]";

/// Word-piece vocabulary: one piece per line, line number is the id, and the
/// first line is the unknown-word fallback.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_lines<I, S>(lines: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut pieces = Vec::new();
        let mut index = HashMap::new();
        for line in lines {
            let piece = line.as_ref().trim_end_matches(['\r', '\n']).to_owned();
            if piece.is_empty() {
                continue;
            }
            if index.contains_key(&piece) {
                return Err(Error::invalid(format!("duplicate vocabulary piece `{piece}`")));
            }
            index.insert(piece.clone(), pieces.len() as u32);
            pieces.push(piece);
        }
        if pieces.is_empty() {
            return Err(Error::invalid("vocabulary is empty"));
        }
        Ok(Self { pieces, index })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(text.lines())
    }

    /// The toy vocabulary bundled with the crate.
    pub fn toy() -> Self {
        Self::from_lines(include_str!("../../assets/toy_vocab.txt").lines())
            .expect("bundled vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn mask_id(&self) -> Option<u32> {
        self.id(MASK_PIECE)
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn lookup_or_unk(&self, piece: &str) -> u32 {
        self.id(piece).unwrap_or(0)
    }

    /// Greedy longest-match segmentation. Pieces after the first may be
    /// spelled with or without a `##` prefix in the vocabulary. A word that
    /// cannot be fully segmented becomes a single fallback token.
    pub fn segment(&self, word: &str) -> Vec<(String, u32)> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let sub: String = chars[start..end].iter().collect();
                let hit = if start > 0 {
                    self.id(&format!("##{sub}")).or_else(|| self.id(&sub))
                } else {
                    self.id(&sub)
                };
                if let Some(id) = hit {
                    found = Some((sub, id, end));
                    break;
                }
            }
            match found {
                Some((sub, id, end)) => {
                    out.push((sub, id));
                    start = end;
                }
                None => return vec![(word.to_owned(), self.unk_id())],
            }
        }
        out
    }
}

/// Splits OCR words into vocabulary pieces; every piece inherits its word's
/// box and index.
pub fn tokenize_words(words: &[(String, BoundingBox)], vocab: &Vocabulary) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    for (wi, (text, bbox)) in words.iter().enumerate() {
        bbox.validate()
            .map_err(|e| Error::invalid(format!("word {wi} (`{text}`): {e}")))?;
        if text.is_empty() {
            return Err(Error::invalid(format!("word {wi} has empty text")));
        }
        for (piece, id) in vocab.segment(text) {
            tokens.push(Token {
                text: piece,
                vocab_id: id,
                bbox: *bbox,
                word_index: wi,
            });
        }
    }
    Ok(tokens)
}
