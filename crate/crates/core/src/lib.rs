//! Documentation drift detection and repair.
//!
//! The pipeline runs in stages: [`impact`] decides whether a code change can
//! invalidate a docstring, [`astsig`] and [`retrieval`] assemble structural and
//! semantic context, [`agent`] drives the generate/critique/refine loop against
//! a [`backend`], [`normalize`] cleans raw model output, and [`evalsuite`]
//! scores repaired docstrings against references.

pub mod agent;
pub mod astsig;
pub mod backend;
pub mod corpus;
pub mod evalsuite;
pub mod impact;
pub mod jsonl;
pub mod normalize;
pub mod retrieval;
pub mod text;

pub use agent::{
    build_prompt, rule_critic, run_critic, update_doc, Critic, CriticVerdict, Gate, Pipeline,
    PromptBundle, RunTrace,
};
pub use astsig::{extract_signatures, SignatureSummary};
pub use backend::{
    Backend, BackendConfig, BackendError, Completion, HttpBackend, MockBackend, RemoteEmbedder,
};
pub use corpus::{first_sentence, load_corpus, simulate_drift, CorpusRecord, DriftCase};
pub use evalsuite::{
    aggregate, bleu4, emb_f1, judge, summary_exact, AggregateReport, ExampleScore,
};
pub use impact::{diff, is_relevant, CodeDelta, DriftClass, DriftKind, Relevance};
pub use normalize::{normalize, Payload, Rule};
pub use retrieval::{
    chunk_corpus, DocChunk, Embedder, HashedBowEmbedder, RetrievedContext, VectorStore,
};
