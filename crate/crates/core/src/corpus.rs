//! Code-to-text corpus ingestion and stale-docstring simulation.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text::sentence_ends;

/// One function together with its reference docstring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub code: String,
    pub docstring: String,
    pub language: String,
}

/// A documentation drift instance: the code before and after a change, the
/// stale docstring that needs repair, and the reference used for scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftCase {
    pub id: String,
    pub code_old: String,
    pub code_new: String,
    pub doc_stale: String,
    pub doc_ref: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("empty text has no first sentence")]
    EmptyText,
}

const FIELDS: [&str; 4] = ["id", "code", "docstring", "language"];

/// Reads a JSONL corpus, returning at most `limit` records in file order.
///
/// Every record is validated; the first invalid line aborts ingestion.
pub fn load_corpus(path: &Path, limit: Option<usize>) -> Result<Vec<CorpusRecord>, CorpusError> {
    let body = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let limit = limit.unwrap_or(usize::MAX);
    let mut records = Vec::new();
    let mut seen = HashSet::new();

    for (idx, raw) in body.lines().enumerate() {
        if records.len() >= limit {
            break;
        }
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record = parse_record(raw, line)?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn parse_record(raw: &str, line: usize) -> Result<CorpusRecord, CorpusError> {
    let malformed = |reason: String| CorpusError::Malformed { line, reason };
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
    let object = value
        .as_object()
        .ok_or_else(|| malformed("expected a JSON object".to_string()))?;

    let mut fields = FIELDS.iter().map(|&name| match object.get(name) {
        None => Err(malformed(format!("missing field {name}"))),
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(malformed(format!("field {name} must be a string"))),
    });
    let mut next = || fields.next().expect("four fields");
    let record = CorpusRecord {
        id: next()?,
        code: next()?,
        docstring: next()?,
        language: next()?,
    };

    if record.id.is_empty() {
        return Err(malformed("empty id".to_string()));
    }
    if record.code.is_empty() {
        return Err(malformed(format!("record {}: empty code", record.id)));
    }
    if record.docstring.trim().is_empty() {
        return Err(malformed(format!("record {}: empty docstring", record.id)));
    }
    Ok(record)
}

/// Returns the trimmed text up to and including its first sentence-ending
/// period, or the whole trimmed text when there is none.
pub fn first_sentence(text: &str) -> Result<&str, CorpusError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    Ok(match sentence_ends(trimmed).first() {
        Some(&end) => &trimmed[..end],
        None => trimmed,
    })
}

/// Manufactures a drift case by truncating the reference docstring to its
/// first sentence. The code is left unchanged.
pub fn simulate_drift(record: &CorpusRecord) -> Result<DriftCase, CorpusError> {
    let stale = first_sentence(&record.docstring)?;
    Ok(DriftCase {
        id: record.id.clone(),
        code_old: record.code.clone(),
        code_new: record.code.clone(),
        doc_stale: stale.to_string(),
        doc_ref: record.docstring.clone(),
    })
}

/// Draws `n` records without replacement using `seed`, keeping file order.
/// Returns all records when `n` is at least the corpus size.
pub fn sample(records: Vec<CorpusRecord>, n: usize, seed: u64) -> Vec<CorpusRecord> {
    if n >= records.len() {
        return records;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, records.len(), n).into_vec();
    picked.sort_unstable();
    let mut slots: Vec<Option<CorpusRecord>> = records.into_iter().map(Some).collect();
    picked
        .into_iter()
        .map(|i| slots[i].take().expect("indices are distinct"))
        .collect()
}
