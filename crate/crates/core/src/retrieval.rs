//! Documentation chunk store with exact cosine top-k retrieval.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::astsig::SignatureSummary;
use crate::corpus::CorpusRecord;
use crate::jsonl::{write_atomic, JsonlError};
use crate::text::{prefix_chars, word_tokens};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_MAX_CHARS: usize = 600;
pub const MIN_MAX_CHARS: usize = 64;
/// Characters of new code appended to the signature summary to form a query.
pub const QUERY_CODE_CHARS: usize = 512;
/// Scores closer than 1e-12 count as tied.
const TIE_RESOLUTION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocChunk {
    pub chunk_id: String,
    pub source_id: String,
    pub text: String,
    /// Unit-norm embedding; empty until the chunk is stored.
    #[serde(default)]
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RetrievedContext {
    pub chunks: Vec<(DocChunk, f64)>,
}

impl RetrievedContext {
    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding endpoint {endpoint} failed (status {status:?}): {message}")]
    Remote {
        endpoint: String,
        status: Option<u16>,
        message: String,
        retryable: bool,
    },
    #[error("embedder returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedder returned a vector of dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedder returned a zero vector")]
    ZeroVector,
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            EmbedError::Remote {
                retryable: true,
                ..
            }
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("vector store has not been built")]
    NotBuilt,
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(String),
    #[error("store uses embedder {store} but {given} was supplied")]
    EmbedderMismatch { store: String, given: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] JsonlError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// Maps texts to unit vectors of a fixed dimension.
pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Hashed bag-of-words term frequencies, L2-normalized. Deterministic and
/// non-negative, so cosine scores fall in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBowEmbedder {
    dimension: usize,
}

impl HashedBowEmbedder {
    pub const DEFAULT_DIMENSION: usize = 256;

    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dimension as u64) as usize
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let tokens = word_tokens(text);
        if tokens.is_empty() {
            // Token-free text still needs a unit vector.
            v[self.bucket("")] = 1.0;
            return v;
        }
        for t in &tokens {
            v[self.bucket(t)] += 1.0;
        }
        unit(v).expect("non-empty counts")
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIMENSION)
    }
}

impl Embedder for HashedBowEmbedder {
    fn id(&self) -> String {
        format!("hashed-bow-{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Scales `v` to unit L2 norm.
pub fn unit(mut v: Vec<f64>) -> Result<Vec<f64>, EmbedError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbedError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

/// Embeds `texts` and checks count, dimension and norm of the result.
pub fn embed_checked(
    embedder: &dyn Embedder,
    texts: &[String],
) -> Result<Vec<Vec<f64>>, EmbedError> {
    let vectors = embedder.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbedError::CountMismatch {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    vectors
        .into_iter()
        .map(|v| {
            if v.len() != embedder.dimension() {
                return Err(EmbedError::Dimension {
                    expected: embedder.dimension(),
                    got: v.len(),
                });
            }
            unit(v)
        })
        .collect()
}

/// Splits each docstring on blank-line paragraph boundaries and greedily
/// packs paragraphs into chunks of at most `max_chars` characters.
/// Paragraphs longer than the limit are split on whitespace.
pub fn chunk_corpus(records: &[CorpusRecord], max_chars: usize) -> Vec<DocChunk> {
    let max_chars = max_chars.max(MIN_MAX_CHARS);
    let mut out = Vec::new();
    for record in records {
        let mut pieces = Vec::new();
        for paragraph in paragraphs(&record.docstring) {
            if paragraph.chars().count() <= max_chars {
                pieces.push(paragraph.to_string());
            } else {
                pieces.extend(split_long(paragraph, max_chars));
            }
        }

        let mut current = String::new();
        let mut texts = Vec::new();
        for piece in pieces {
            let joined = current.chars().count() + 2 + piece.chars().count();
            if current.is_empty() {
                current = piece;
            } else if joined <= max_chars {
                current.push_str("\n\n");
                current.push_str(&piece);
            } else {
                texts.push(std::mem::replace(&mut current, piece));
            }
        }
        if !current.is_empty() {
            texts.push(current);
        }

        out.extend(texts.into_iter().enumerate().map(|(i, text)| DocChunk {
            chunk_id: format!("{}#{i}", record.id),
            source_id: record.id.clone(),
            text,
            vector: Vec::new(),
        }));
    }
    out
}

fn paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push(text[s..end].trim());
            }
        } else {
            start.get_or_insert(offset);
            end = offset + line.len();
        }
        offset += line.len();
    }
    if let Some(s) = start {
        out.push(text[s..end].trim());
    }
    out.retain(|p| !p.is_empty());
    out
}

fn split_long(paragraph: &str, max_chars: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for word in paragraph.split_whitespace() {
        let mut word = word;
        while word.chars().count() > max_chars {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            let head = prefix_chars(word, max_chars);
            out.push(head.to_string());
            word = &word[head.len()..];
        }
        if word.is_empty() {
            continue;
        }
        if current.is_empty() {
            current = word.to_string();
        } else if current.chars().count() + 1 + word.chars().count() <= max_chars {
            current.push(' ');
            current.push_str(word);
        } else {
            out.push(std::mem::replace(&mut current, word.to_string()));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Retrieval query for a piece of new code.
pub fn retrieval_query(signatures: &SignatureSummary, code_new: &str) -> String {
    format!(
        "{}\n{}",
        signatures.rendered,
        prefix_chars(code_new, QUERY_CODE_CHARS)
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    dimension: usize,
    embedder: String,
    count: usize,
}

/// In-memory chunk index. Retrieval is an exact scan.
#[derive(Debug, Clone)]
pub struct VectorStore {
    dimension: usize,
    embedder_id: String,
    chunks: Vec<DocChunk>,
    built: bool,
}

impl VectorStore {
    pub fn new(embedder: &dyn Embedder) -> Self {
        Self {
            dimension: embedder.dimension(),
            embedder_id: embedder.id(),
            chunks: Vec::new(),
            built: false,
        }
    }

    /// Embeds and stores `chunks`, then marks the store ready.
    pub fn build(
        &mut self,
        chunks: Vec<DocChunk>,
        embedder: &dyn Embedder,
    ) -> Result<(), RetrievalError> {
        self.insert_all(chunks, embedder)?;
        self.built = true;
        Ok(())
    }

    pub fn insert(
        &mut self,
        chunk: DocChunk,
        embedder: &dyn Embedder,
    ) -> Result<(), RetrievalError> {
        self.insert_all(vec![chunk], embedder)
    }

    fn insert_all(
        &mut self,
        chunks: Vec<DocChunk>,
        embedder: &dyn Embedder,
    ) -> Result<(), RetrievalError> {
        self.check_embedder(embedder)?;
        let mut ids: HashSet<&str> = self.chunks.iter().map(|c| c.chunk_id.as_str()).collect();
        for c in &chunks {
            if !ids.insert(c.chunk_id.as_str()) {
                return Err(RetrievalError::DuplicateChunk(c.chunk_id.clone()));
            }
        }
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            embed_checked(embedder, &texts)?
        };
        self.chunks.extend(
            chunks
                .into_iter()
                .zip(vectors)
                .map(|(c, vector)| DocChunk { vector, ..c }),
        );
        Ok(())
    }

    fn check_embedder(&self, embedder: &dyn Embedder) -> Result<(), RetrievalError> {
        if embedder.id() != self.embedder_id {
            return Err(RetrievalError::EmbedderMismatch {
                store: self.embedder_id.clone(),
                given: embedder.id(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn chunks(&self) -> &[DocChunk] {
        &self.chunks
    }

    /// The `k` chunks most similar to `query`, best first; ties go to the
    /// smaller chunk id.
    pub fn retrieve(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<RetrievedContext, RetrievalError> {
        if !self.built {
            return Err(RetrievalError::NotBuilt);
        }
        self.check_embedder(embedder)?;
        if k == 0 || self.chunks.is_empty() {
            return Ok(RetrievedContext::default());
        }
        let q = embed_checked(embedder, &[query.to_string()])?.remove(0);
        let mut scored: Vec<(usize, f64)> = self
            .chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (i, cosine(&q, &c.vector)))
            .collect();
        // Equal scores can differ in the last bits after normalization.
        let rank = |s: f64| (s * TIE_RESOLUTION).round() as i64;
        scored.sort_by(|(ia, sa), (ib, sb)| {
            rank(*sb)
                .cmp(&rank(*sa))
                .then_with(|| self.chunks[*ia].chunk_id.cmp(&self.chunks[*ib].chunk_id))
        });
        Ok(RetrievedContext {
            chunks: scored
                .into_iter()
                .take(k)
                .map(|(i, s)| (self.chunks[i].clone(), s))
                .collect(),
        })
    }

    /// Header line followed by one JSON line per chunk.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let header = StoreHeader {
            dimension: self.dimension,
            embedder: self.embedder_id.clone(),
            count: self.chunks.len(),
        };
        let mut body = serde_json::to_string(&header).expect("header serializes");
        body.push('\n');
        for c in &self.chunks {
            body.push_str(&serde_json::to_string(c).expect("chunk serializes"));
            body.push('\n');
        }
        write_atomic(path, body.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let format = |message: String| RetrievalError::Format {
            path: path.to_path_buf(),
            message,
        };
        let body = fs::read_to_string(path).map_err(|e| JsonlError::io(path, e))?;
        let mut lines = body
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines
            .next()
            .ok_or_else(|| format("missing header".to_string()))?;
        let header: StoreHeader =
            serde_json::from_str(head).map_err(|e| format(format!("line 1: {e}")))?;

        let mut chunks = Vec::with_capacity(header.count);
        let mut ids = HashSet::new();
        for (idx, line) in lines {
            let chunk: DocChunk =
                serde_json::from_str(line).map_err(|e| format(format!("line {}: {e}", idx + 1)))?;
            if chunk.vector.len() != header.dimension {
                return Err(format(format!(
                    "line {}: vector dimension {}",
                    idx + 1,
                    chunk.vector.len()
                )));
            }
            let norm = chunk.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(format(format!("line {}: vector norm {norm}", idx + 1)));
            }
            if !ids.insert(chunk.chunk_id.clone()) {
                return Err(RetrievalError::DuplicateChunk(chunk.chunk_id));
            }
            chunks.push(chunk);
        }
        if chunks.len() != header.count {
            return Err(format(format!(
                "header declares {} chunks, found {}",
                header.count,
                chunks.len()
            )));
        }
        Ok(Self {
            dimension: header.dimension,
            embedder_id: header.embedder,
            chunks,
            built: true,
        })
    }
}
