//! Locating and reading corpora: line-delimited JSON splits or FUNSD
//! annotation directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::doc_model::{load_funsd, read_corpus, Document, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Funsd,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
    pub format: CorpusFormat,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FunsdSummary {
    pub files: usize,
    pub entities: usize,
    pub labels: BTreeSet<String>,
    pub split_entities: usize,
    pub skipped_empty_words: usize,
}

pub fn load_vocab(path: Option<&Path>) -> Result<Vocabulary> {
    match path {
        Some(p) => Vocabulary::from_file(p),
        None => Ok(Vocabulary::toy()),
    }
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "json") && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Every `*.json` annotation file in `dir`, in file-name order.
pub fn load_funsd_dir(dir: &Path, vocab: &Vocabulary) -> Result<(Vec<Document>, FunsdSummary)> {
    let files = json_files(dir)?;
    let mut summary = FunsdSummary::default();
    let mut docs = Vec::with_capacity(files.len());
    for f in files {
        let (doc, report) = load_funsd(&f, vocab)?;
        summary.files += 1;
        summary.entities += report.entities;
        summary.split_entities += report.split_entities.len();
        summary.skipped_empty_words += report.skipped_empty_words;
        summary
            .labels
            .extend(report.labels_seen.iter().map(|l| l.as_str().to_owned()));
        docs.push(doc);
    }
    Ok((docs, summary))
}

fn annotation_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("annotations");
    if nested.is_dir() {
        nested
    } else {
        dir.to_owned()
    }
}

/// Reads a corpus from `path`:
/// - a `.jsonl` file, used for every split;
/// - a directory with `train.jsonl` (and optionally `dev.jsonl`, `test.jsonl`);
/// - a FUNSD release with `training_data/` and `testing_data/`, where the
///   test set doubles as dev;
/// - a directory of FUNSD annotation files, used for every split.
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Splits> {
    if path.is_file() {
        let docs = read_corpus(path, vocab)?;
        return Ok(Splits {
            train: docs.clone(),
            dev: docs.clone(),
            test: docs,
            format: CorpusFormat::Jsonl,
        });
    }
    if !path.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus not found"),
        ));
    }
    if path.join("train.jsonl").is_file() {
        let read = |name: &str| -> Result<Vec<Document>> {
            let p = path.join(name);
            if p.is_file() {
                read_corpus(&p, vocab)
            } else {
                Ok(Vec::new())
            }
        };
        return Ok(Splits {
            train: read("train.jsonl")?,
            dev: read("dev.jsonl")?,
            test: read("test.jsonl")?,
            format: CorpusFormat::Jsonl,
        });
    }
    let train_dir = path.join("training_data");
    if train_dir.is_dir() {
        let (train, _) = load_funsd_dir(&annotation_dir(&train_dir), vocab)?;
        let test_dir = path.join("testing_data");
        let test = if test_dir.is_dir() {
            load_funsd_dir(&annotation_dir(&test_dir), vocab)?.0
        } else {
            Vec::new()
        };
        return Ok(Splits {
            train,
            dev: test.clone(),
            test,
            format: CorpusFormat::Funsd,
        });
    }
    let (docs, summary) = load_funsd_dir(&annotation_dir(path), vocab)?;
    if summary.files == 0 {
        return Err(Error::invalid(format!(
            "{}: no train.jsonl and no FUNSD annotation files",
            path.display()
        )));
    }
    Ok(Splits {
        train: docs.clone(),
        dev: docs.clone(),
        test: docs,
        format: CorpusFormat::Funsd,
    })
}
