//! The docstring update loop: relevance gate, context assembly, generation,
//! critique and feedback-driven refinement.

use serde::{Deserialize, Serialize};

use crate::astsig::{self, SignatureSummary};
use crate::backend::{Backend, BackendError};
use crate::corpus::DriftCase;
use crate::impact::{self, DriftKind};
use crate::normalize::normalize;
use crate::retrieval::{retrieval_query, Embedder, RetrievalError, RetrievedContext, VectorStore};
use crate::text::{canonical, end_of_token, split_sentences, whitespace_token_count};

pub const SYSTEM_INSTRUCTION: &str = include_str!("../assets/system_instruction.v1.txt");
pub const CRITIC_INSTRUCTION: &str = include_str!("../assets/critic_instruction.v1.txt");

pub const DEFAULT_MAX_RETRIES: usize = 2;
pub const DEFAULT_SOURCE_TOKEN_CAP: usize = 256;
pub const DEFAULT_TARGET_TOKEN_CAP: usize = 96;

pub const CRITIC_PREFIX: &str = "Critic: ";
pub const CONTEXT_PREFIX: &str = "Context: ";
pub const AST_PREFIX: &str = "AST: ";
pub const UNPARSABLE_CRITIC: &str = "critic response unparsable";

/// Marker line standing in for code dropped by the token cap.
const ELISION: &str = "...";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_instruction: String,
    pub code_new: String,
    pub doc_stale: String,
    pub ast_section: String,
    pub rag_section: String,
    pub critic_feedback: Vec<String>,
}

impl PromptBundle {
    /// Full prompt: every section in order, feedback lines last.
    pub fn render(&self) -> String {
        join_sections(&[&self.system_instruction, &self.body_sections()])
    }

    /// The prompt without the system instruction, sent as the user message.
    pub fn user_message(&self) -> String {
        self.body_sections()
    }

    fn body_sections(&self) -> String {
        let code = format!("Code:\n{}", self.code_new);
        let doc = format!("Stale docstring:\n{}", self.doc_stale);
        let mut out = join_sections(&[&code, &doc, &self.ast_section, &self.rag_section]);
        for line in &self.critic_feedback {
            out.push('\n');
            out.push_str(line);
        }
        out
    }

    /// Appends one critic reason as a `Critic: ` line.
    pub fn push_feedback(&mut self, reason: &str) {
        self.critic_feedback
            .push(format!("{CRITIC_PREFIX}{}", one_line(reason)));
    }
}

fn join_sections(sections: &[&str]) -> String {
    sections
        .iter()
        .map(|s| s.trim_end())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Assembles the composite prompt. The code is capped so that code plus
/// stale docstring fit in `source_token_cap` whitespace tokens.
pub fn build_prompt(
    case: &DriftCase,
    sig: &SignatureSummary,
    ctx: &RetrievedContext,
    feedback: &[String],
    source_token_cap: usize,
) -> PromptBundle {
    let rag_section = ctx
        .chunks
        .iter()
        .map(|(chunk, _)| format!("{CONTEXT_PREFIX}{}", one_line(&chunk.text)))
        .collect::<Vec<_>>()
        .join("\n");
    let mut bundle = PromptBundle {
        system_instruction: SYSTEM_INSTRUCTION.trim_end().to_string(),
        code_new: cap_code(&case.code_new, &case.doc_stale, source_token_cap),
        doc_stale: case.doc_stale.clone(),
        ast_section: format!("{AST_PREFIX}{}", sig.rendered),
        rag_section,
        critic_feedback: Vec::new(),
    };
    for reason in feedback {
        bundle.push_feedback(reason);
    }
    bundle
}

/// Drops lines from the middle of the body until the code fits the token
/// budget left after the stale docstring. Header lines (decorators and the
/// first definition line through its closing colon) are kept.
pub fn cap_code(code: &str, doc_stale: &str, source_token_cap: usize) -> String {
    let budget = source_token_cap.saturating_sub(whitespace_token_count(doc_stale));
    if whitespace_token_count(code) <= budget {
        return code.to_string();
    }
    let lines: Vec<&str> = code.lines().collect();
    let header_len = header_lines(&lines);
    let header = &lines[..header_len];
    let header_tokens: usize = header.iter().map(|l| whitespace_token_count(l)).sum();
    if header_tokens >= budget {
        let joined = header.join("\n");
        let cut = end_of_token(&joined, budget).unwrap_or(joined.len());
        return joined[..cut].to_string();
    }

    let body = &lines[header_len..];
    let mut remaining = budget - header_tokens - 1;
    let (mut front, mut back) = (0, body.len());
    let mut take_front = true;
    while front < back {
        let line = if take_front {
            body[front]
        } else {
            body[back - 1]
        };
        let cost = whitespace_token_count(line);
        if cost > remaining {
            break;
        }
        remaining -= cost;
        if take_front {
            front += 1;
        } else {
            back -= 1;
        }
        take_front = !take_front;
    }

    let indent: String = body
        .get(front)
        .map(|l| l.chars().take_while(|c| c.is_whitespace()).collect())
        .unwrap_or_default();
    let mut out: Vec<String> = header
        .iter()
        .chain(&body[..front])
        .map(|l| l.to_string())
        .collect();
    out.push(format!("{indent}{ELISION}"));
    out.extend(body[back..].iter().map(|l| l.to_string()));
    out.join("\n")
}

fn header_lines(lines: &[&str]) -> usize {
    let is_def = |l: &str| {
        let t = l.trim_start();
        t.starts_with("def ") || t.starts_with("async def ") || t.starts_with("class ")
    };
    let Some(start) = lines.iter().position(|l| is_def(l)) else {
        return 0;
    };
    let mut end = start;
    while end < lines.len() && !lines[end].trim_end().ends_with(':') {
        end += 1;
    }
    (end + 1).min(lines.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub is_good: bool,
    pub reason: String,
}

impl CriticVerdict {
    pub fn good() -> Self {
        Self {
            is_good: true,
            reason: String::new(),
        }
    }

    pub fn bad(reason: impl Into<String>) -> Self {
        let reason = reason.into();
        debug_assert!(!reason.is_empty());
        Self {
            is_good: false,
            reason,
        }
    }

    /// Reads a `GOOD` / `BAD: <reason>` first line.
    pub fn parse(response: &str) -> Self {
        let first = response
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .unwrap_or("");
        if first.starts_with("GOOD") {
            return Self::good();
        }
        if let Some(rest) = first.strip_prefix("BAD") {
            let reason = rest.trim_start_matches([':', ' ', '-']).trim();
            return Self::bad(if reason.is_empty() {
                "no reason given"
            } else {
                reason
            });
        }
        Self::bad(UNPARSABLE_CRITIC)
    }
}

/// Asks a model to judge `draft` against `code_new`.
pub fn run_critic(
    draft: &str,
    code_new: &str,
    backend: &dyn Backend,
) -> Result<CriticVerdict, BackendError> {
    let response = backend.complete(
        CRITIC_INSTRUCTION.trim_end(),
        &critic_message(draft, code_new),
    )?;
    Ok(CriticVerdict::parse(&response.text))
}

fn critic_message(draft: &str, code_new: &str) -> String {
    format!("Code:\n{code_new}\n\nDocstring:\n{draft}")
}

/// Deterministic critic that flags the formatting failure modes only.
pub fn rule_critic(draft: &str, sig: &SignatureSummary) -> CriticVerdict {
    let text = draft.trim();
    if text.is_empty() {
        return CriticVerdict::bad("draft is empty");
    }
    if text.contains("\"\"\"") || text.contains("'''") {
        return CriticVerdict::bad("docstring delimiter artifact in draft");
    }
    if text.contains("```") {
        return CriticVerdict::bad("code fence artifact in draft");
    }
    let sentences: Vec<String> = split_sentences(text)
        .iter()
        .map(|s| canonical(s))
        .filter(|s| !s.is_empty())
        .collect();
    if let Some(w) = sentences.windows(2).find(|w| w[0] == w[1]) {
        return CriticVerdict::bad(format!("repetition: sentence {:?} is repeated", w[0]));
    }
    for entry in &sig.entries {
        if let Some(head) = entry.split_once('(').map(|(h, _)| format!("{h}(")) {
            if text.contains(&head) {
                return CriticVerdict::bad(format!("leaked code: draft contains {head:?}"));
            }
        }
    }
    CriticVerdict::good()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTrace {
    pub case_id: String,
    pub relevant: bool,
    pub drift_kind: DriftKind,
    pub drift_detail: String,
    pub draft_initial: String,
    pub draft_final: String,
    /// Refinements performed after the first draft.
    pub attempts: usize,
    pub verdicts: Vec<CriticVerdict>,
    pub accepted: bool,
    /// Rendered generation prompts, in order.
    pub prompts: Vec<String>,
    /// Set when a backend or retrieval failure aborted this case.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunTrace {
    /// The loop ran out of refinements without an accepted draft.
    pub fn retries_exhausted(&self) -> bool {
        self.relevant && self.error.is_none() && !self.accepted
    }
}

/// Which critic reviews drafts.
#[derive(Clone, Copy)]
pub enum Critic<'a> {
    Model(&'a dyn Backend),
    Rules,
}

/// Retrieval-augmented context source.
#[derive(Clone, Copy)]
pub struct Retrieval<'a> {
    pub store: &'a VectorStore,
    pub embedder: &'a dyn Embedder,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestRole {
    Generator,
    Critic,
}

/// Receives each outbound request before it is sent.
pub trait Journal: Send + Sync {
    fn record(&self, case_id: &str, role: RequestRole, system: &str, user: &str);
}

/// How the relevance gate treats a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    /// Skip generation when the code delta is irrelevant.
    #[default]
    Diff,
    /// Always generate. For cases whose drift is in the docstring itself,
    /// such as simulated stale docstrings over unchanged code.
    Bypass,
}

/// Everything the loop needs besides the case itself.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub gate: Gate,
    pub generator: &'a dyn Backend,
    pub critic: Critic<'a>,
    pub retrieval: Option<Retrieval<'a>>,
    pub language: &'a str,
    pub source_token_cap: usize,
    pub target_token_cap: usize,
    pub journal: Option<&'a dyn Journal>,
}

impl<'a> Pipeline<'a> {
    pub fn new(generator: &'a dyn Backend, critic: Critic<'a>) -> Self {
        Self {
            gate: Gate::Diff,
            generator,
            critic,
            retrieval: None,
            language: "python",
            source_token_cap: DEFAULT_SOURCE_TOKEN_CAP,
            target_token_cap: DEFAULT_TARGET_TOKEN_CAP,
            journal: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum StepError {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
}

/// Repairs the stale docstring of `case`.
///
/// Irrelevant changes return the stale docstring untouched without calling
/// any backend. Otherwise every draft is normalized and reviewed; a rejected
/// draft's reason is appended to the prompt and the model is asked again, at
/// most `max_retries` times. The last draft is returned either way.
pub fn update_doc(case: &DriftCase, pipeline: &Pipeline<'_>, max_retries: usize) -> RunTrace {
    let relevance = impact::is_relevant(&impact::diff(&case.code_old, &case.code_new));
    let (relevant, detail) = match pipeline.gate {
        Gate::Diff => (relevance.relevant, relevance.class.detail),
        Gate::Bypass if relevance.relevant => (true, relevance.class.detail),
        Gate::Bypass => (true, format!("gate bypassed: {}", relevance.class.detail)),
    };
    let mut trace = RunTrace {
        case_id: case.id.clone(),
        relevant,
        drift_kind: relevance.class.kind,
        drift_detail: detail,
        draft_initial: case.doc_stale.clone(),
        draft_final: case.doc_stale.clone(),
        attempts: 0,
        verdicts: Vec::new(),
        accepted: false,
        prompts: Vec::new(),
        error: None,
    };
    if !trace.relevant {
        return trace;
    }
    if let Err(e) = refine(case, pipeline, max_retries, &mut trace) {
        log::warn!("case {}: {e}", case.id);
        trace.error = Some(e.to_string());
        trace.accepted = false;
    }
    trace
}

fn refine(
    case: &DriftCase,
    p: &Pipeline<'_>,
    max_retries: usize,
    trace: &mut RunTrace,
) -> Result<(), StepError> {
    let sig = astsig::extract_signatures(&case.code_new, p.language).unwrap_or_else(|e| {
        log::warn!("case {}: no signature summary: {e}", case.id);
        SignatureSummary::empty()
    });
    let ctx = match p.retrieval {
        Some(r) => r
            .store
            .retrieve(&retrieval_query(&sig, &case.code_new), r.k, r.embedder)?,
        None => RetrievedContext::default(),
    };
    let mut prompt = build_prompt(case, &sig, &ctx, &[], p.source_token_cap);

    let mut draft = generate(case, p, &prompt, trace)?;
    trace.draft_initial = draft.clone();
    trace.draft_final = draft.clone();
    loop {
        let verdict = match p.critic {
            Critic::Model(backend) => {
                let user = critic_message(&draft, &case.code_new);
                if let Some(j) = p.journal {
                    j.record(
                        &case.id,
                        RequestRole::Critic,
                        CRITIC_INSTRUCTION.trim_end(),
                        &user,
                    );
                }
                run_critic(&draft, &case.code_new, backend)?
            }
            Critic::Rules => rule_critic(&draft, &sig),
        };
        let good = verdict.is_good;
        let reason = verdict.reason.clone();
        trace.verdicts.push(verdict);
        if good {
            trace.accepted = true;
            return Ok(());
        }
        if trace.attempts >= max_retries {
            return Ok(());
        }
        prompt.push_feedback(&reason);
        draft = generate(case, p, &prompt, trace)?;
        trace.draft_final = draft.clone();
        trace.attempts += 1;
    }
}

fn generate(
    case: &DriftCase,
    p: &Pipeline<'_>,
    prompt: &PromptBundle,
    trace: &mut RunTrace,
) -> Result<String, BackendError> {
    let user = prompt.user_message();
    trace.prompts.push(prompt.render());
    if let Some(j) = p.journal {
        j.record(
            &case.id,
            RequestRole::Generator,
            &prompt.system_instruction,
            &user,
        );
    }
    let completion = p.generator.complete(&prompt.system_instruction, &user)?;
    Ok(normalize(&completion.text, p.target_token_cap).text)
}
