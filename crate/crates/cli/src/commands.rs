//! Subcommand implementations. Each returns the text to print on stdout.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use docsync_core::agent::{
    update_doc, Critic, Journal, Pipeline, RequestRole, Retrieval, RunTrace,
};
use docsync_core::astsig::extract_signatures;
use docsync_core::backend::{Backend, HttpBackend, MockBackend, RemoteEmbedder};
use docsync_core::corpus::{self, load_corpus, simulate_drift, CorpusRecord, DriftCase};
use docsync_core::evalsuite::{
    aggregate, bleu4, emb_f1, judge, render_main_table, render_refinement_table, summary_exact,
    AggregateReport, EvalError, ExampleScore,
};
use docsync_core::impact::{diff, is_relevant};
use docsync_core::jsonl::{read_jsonl, to_jsonl, write_atomic, write_jsonl};
use docsync_core::normalize::normalize;
use docsync_core::retrieval::{chunk_corpus, Embedder, HashedBowEmbedder, VectorStore};
use docsync_core::Gate;
use serde::{Deserialize, Serialize};

use crate::config::{CriticKind, EmbedderKind, PipelineConfig};
use crate::error::CliError;

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable") + "\n"
}

pub fn make_embedder(cfg: &PipelineConfig) -> Result<Box<dyn Embedder>, CliError> {
    match cfg.embedder {
        EmbedderKind::DeterministicLocal => {
            Ok(Box::new(HashedBowEmbedder::new(cfg.embedding_dimension)))
        }
        EmbedderKind::Remote => {
            let backend = cfg
                .embedding_backend
                .clone()
                .unwrap_or_else(|| cfg.backend.clone());
            Ok(Box::new(RemoteEmbedder::new(
                backend,
                cfg.embedding_dimension,
            )?))
        }
    }
}

fn load_records(
    path: &Path,
    limit: Option<usize>,
    sample: Option<usize>,
    seed: u64,
) -> Result<Vec<CorpusRecord>, CliError> {
    let records = load_corpus(path, limit)?;
    Ok(match sample {
        Some(n) => corpus::sample(records, n, seed),
        None => records,
    })
}

#[derive(Serialize)]
struct IngestSummary {
    records: usize,
    languages: BTreeMap<String, usize>,
}

pub fn ingest(
    cfg: &PipelineConfig,
    corpus: &Path,
    out: Option<&Path>,
    limit: Option<usize>,
    sample: Option<usize>,
) -> Result<String, CliError> {
    let records = load_records(corpus, limit, sample, cfg.seed)?;
    if let Some(out) = out {
        write_jsonl(out, &records)?;
    }
    let mut languages = BTreeMap::new();
    for r in &records {
        *languages.entry(r.language.clone()).or_insert(0) += 1;
    }
    Ok(json_line(&IngestSummary {
        records: records.len(),
        languages,
    }))
}

pub fn simulate(
    cfg: &PipelineConfig,
    corpus: &Path,
    out: &Path,
    limit: Option<usize>,
    sample: Option<usize>,
) -> Result<String, CliError> {
    let records = load_records(corpus, limit, sample, cfg.seed)?;
    let cases = records
        .iter()
        .map(simulate_drift)
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(out, &cases)?;
    Ok(format!("{}\n", cases.len()))
}

pub fn index(
    cfg: &PipelineConfig,
    corpus: &Path,
    out: &Path,
    limit: Option<usize>,
    max_chars: Option<usize>,
) -> Result<String, CliError> {
    let records = load_corpus(corpus, limit)?;
    let chunks = chunk_corpus(&records, max_chars.unwrap_or(cfg.chunk_max_chars));
    let embedder = make_embedder(cfg)?;
    let mut store = VectorStore::new(embedder.as_ref());
    store.build(chunks, embedder.as_ref())?;
    store.save(out)?;
    Ok(format!("{}\n", store.len()))
}

pub fn ast(
    cfg: &PipelineConfig,
    file: &Path,
    language: Option<&str>,
    as_json: bool,
) -> Result<String, CliError> {
    let source = read_text(file)?;
    let lang = language.unwrap_or(&cfg.language);
    let summary = extract_signatures(&source, lang)
        .map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
    if summary.parse_degraded {
        log::warn!(
            "{}: source has syntax errors; summary may be partial",
            file.display()
        );
    }
    Ok(if as_json {
        json_line(&summary)
    } else {
        format!("{}\n", summary.rendered)
    })
}

pub fn classify(old: &Path, new: &Path) -> Result<String, CliError> {
    let relevance = is_relevant(&diff(&read_text(old)?, &read_text(new)?));
    Ok(json_line(&relevance))
}

/// Appends every outbound request to a JSONL file and flushes before the
/// request is sent.
pub struct FileJournal {
    writer: Mutex<BufWriter<File>>,
}

#[derive(Serialize, Deserialize)]
pub struct JournalEntry {
    pub case_id: String,
    pub role: RequestRole,
    pub system: String,
    pub user: String,
}

impl FileJournal {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file =
            File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self {
            writer: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl Journal for FileJournal {
    fn record(&self, case_id: &str, role: RequestRole, system: &str, user: &str) {
        let entry = JournalEntry {
            case_id: case_id.to_string(),
            role,
            system: system.to_string(),
            user: user.to_string(),
        };
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let result = w
            .write_all(json_line(&entry).as_bytes())
            .and_then(|_| w.flush());
        if let Err(e) = result {
            log::error!("request journal write failed: {e}");
        }
    }
}

pub fn journal_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".requests.jsonl");
    out.with_file_name(name)
}

pub struct RepairOptions<'a> {
    pub cases: &'a Path,
    pub out: &'a Path,
    pub max_retries: Option<usize>,
    pub mock: Option<&'a Path>,
    pub store: Option<&'a Path>,
    pub keep_going: bool,
    pub bypass_gate: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RepairSummary {
    pub cases: usize,
    pub relevant: usize,
    pub accepted: usize,
    pub retries_exhausted: usize,
    pub errors: usize,
}

pub fn repair(cfg: &PipelineConfig, opts: &RepairOptions<'_>) -> Result<String, CliError> {
    let cases: Vec<DriftCase> = read_jsonl(opts.cases)?;
    let mut ids = HashSet::new();
    for case in &cases {
        if !ids.insert(case.id.as_str()) {
            return Err(CliError::Data(format!(
                "{}: duplicate case id {}",
                opts.cases.display(),
                case.id
            )));
        }
    }

    let mock = opts.mock.map(MockBackend::from_fixture).transpose()?;
    let http;
    let generator: &dyn Backend = match &mock {
        Some(m) => m,
        None => {
            http = HttpBackend::new(cfg.backend.clone())?;
            &http
        }
    };
    let critic_http = match (&mock, cfg.critic, &cfg.critic_backend) {
        (None, CriticKind::Model, Some(c)) => Some(HttpBackend::new(c.clone())?),
        _ => None,
    };
    let critic = match cfg.critic {
        CriticKind::Rules => Critic::Rules,
        CriticKind::Model => Critic::Model(
            critic_http
                .as_ref()
                .map(|c| c as &dyn Backend)
                .unwrap_or(generator),
        ),
    };

    let store = opts.store.map(VectorStore::load).transpose()?;
    let embedder = match &store {
        Some(_) => Some(make_embedder(cfg)?),
        None => None,
    };
    let journal = FileJournal::create(&journal_path(opts.out))?;

    let mut pipeline = Pipeline::new(generator, critic);
    pipeline.gate = if opts.bypass_gate {
        Gate::Bypass
    } else {
        cfg.relevance_gate
    };
    pipeline.language = &cfg.language;
    pipeline.source_token_cap = cfg.source_token_cap;
    pipeline.target_token_cap = cfg.target_token_cap;
    pipeline.journal = Some(&journal);
    if let (Some(store), Some(embedder)) = (&store, &embedder) {
        pipeline.retrieval = Some(Retrieval {
            store,
            embedder: embedder.as_ref(),
            k: cfg.retrieval_k,
        });
    }
    let max_retries = opts.max_retries.unwrap_or(cfg.max_retries);

    // A scripted mock answers in call order, so cases must run in order.
    let workers = if mock.is_some() { 1 } else { cfg.workers };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    let stop = AtomicBool::new(false);
    let keep_going = opts.keep_going;
    let traces: Vec<Option<RunTrace>> = pool.install(|| {
        use rayon::prelude::*;
        cases
            .par_iter()
            .map(|case| {
                if stop.load(Ordering::SeqCst) {
                    return None;
                }
                let trace = update_doc(case, &pipeline, max_retries);
                if trace.error.is_some() && !keep_going {
                    stop.store(true, Ordering::SeqCst);
                }
                Some(trace)
            })
            .collect()
    });

    if !keep_going {
        if let Some(failed) = traces.iter().flatten().find(|t| t.error.is_some()) {
            return Err(CliError::Backend(format!(
                "case {}: {}",
                failed.case_id,
                failed.error.as_deref().unwrap_or_default()
            )));
        }
    }
    let traces: Vec<RunTrace> = traces.into_iter().flatten().collect();
    write_jsonl(opts.out, &traces)?;

    let summary = RepairSummary {
        cases: traces.len(),
        relevant: traces.iter().filter(|t| t.relevant).count(),
        accepted: traces.iter().filter(|t| t.accepted).count(),
        retries_exhausted: traces.iter().filter(|t| t.retries_exhausted()).count(),
        errors: traces.iter().filter(|t| t.error.is_some()).count(),
    };
    Ok(json_line(&summary))
}

#[derive(Serialize)]
struct NormalizedText<'a> {
    text: &'a str,
    applied_rules: &'a [docsync_core::Rule],
}

pub fn normalize_text(cfg: &PipelineConfig, text: &str, max_tokens: Option<usize>) -> String {
    let payload = normalize(text, max_tokens.unwrap_or(cfg.target_token_cap));
    json_line(&NormalizedText {
        text: &payload.text,
        applied_rules: &payload.applied_rules,
    })
}

/// Re-applies normalization to the drafts of generated traces.
pub fn normalize_traces(
    cfg: &PipelineConfig,
    input: &Path,
    out: &Path,
    max_tokens: Option<usize>,
) -> Result<String, CliError> {
    let cap = max_tokens.unwrap_or(cfg.target_token_cap);
    let mut traces: Vec<RunTrace> = read_jsonl(input)?;
    let mut changed = 0;
    for t in traces.iter_mut().filter(|t| t.relevant) {
        let initial = normalize(&t.draft_initial, cap).text;
        let last = normalize(&t.draft_final, cap).text;
        if initial != t.draft_initial || last != t.draft_final {
            changed += 1;
        }
        t.draft_initial = initial;
        t.draft_final = last;
    }
    write_jsonl(out, &traces)?;
    Ok(format!("{changed}\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Draft {
    Initial,
    Final,
}

pub struct EvalOptions<'a> {
    pub traces: &'a Path,
    pub refs: &'a Path,
    pub out: &'a Path,
    pub system: Option<&'a str>,
    pub draft: Draft,
    pub judge: bool,
    pub judge_mock: Option<&'a Path>,
    pub compare: bool,
    pub baselines: &'a [(String, PathBuf)],
    pub report: Option<&'a Path>,
}

/// Candidate text of a trace. Generated drafts are normalized; passthroughs
/// of the stale docstring are scored as written.
pub fn candidate(trace: &RunTrace, draft: Draft, cap: usize) -> String {
    let text = match draft {
        Draft::Initial => &trace.draft_initial,
        Draft::Final => &trace.draft_final,
    };
    if trace.relevant {
        normalize(text, cap).text
    } else {
        text.trim().to_string()
    }
}

pub struct Scorer<'a> {
    pub embedder: &'a dyn Embedder,
    pub judge: Option<&'a dyn Backend>,
}

impl Scorer<'_> {
    /// Scores `(case_id, candidate)` pairs against their references, in input
    /// order. Pairs whose reference has no tokens are skipped with a warning.
    pub fn score(
        &self,
        items: &[(String, String)],
        refs: &HashMap<&str, &DriftCase>,
    ) -> Result<Vec<ExampleScore>, CliError> {
        let mut scores = Vec::with_capacity(items.len());
        for (id, cand) in items {
            let case = refs[id.as_str()];
            let reference = case.doc_ref.trim();
            let bleu = match bleu4(cand, reference) {
                Ok(b) => b,
                Err(EvalError::EmptyReference) => {
                    log::warn!("case {id}: reference has no tokens; excluded");
                    continue;
                }
                Err(e) => return Err(CliError::Data(e.to_string())),
            };
            let judged = match self.judge {
                Some(backend) => judge(cand, &case.code_new, backend)?,
                None => None,
            };
            scores.push(ExampleScore {
                case_id: id.clone(),
                bleu4: bleu,
                emb_f1: emb_f1(cand, reference, self.embedder)?,
                summary_exact: summary_exact(cand, reference),
                judge: judged,
            });
        }
        Ok(scores)
    }
}

fn index_refs<'r>(
    refs: &'r [DriftCase],
    path: &Path,
) -> Result<HashMap<&'r str, &'r DriftCase>, CliError> {
    let mut map = HashMap::new();
    for case in refs {
        if map.insert(case.id.as_str(), case).is_some() {
            return Err(CliError::Data(format!(
                "{}: duplicate case id {}",
                path.display(),
                case.id
            )));
        }
    }
    Ok(map)
}

/// Keeps traces that have a reference, warning about the rest.
fn matched<'t>(
    traces: &'t [RunTrace],
    refs: &HashMap<&str, &DriftCase>,
    path: &Path,
) -> Result<Vec<&'t RunTrace>, CliError> {
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    let mut unmatched = Vec::new();
    for t in traces {
        if !seen.insert(t.case_id.as_str()) {
            return Err(CliError::Data(format!(
                "{}: duplicate case id {}",
                path.display(),
                t.case_id
            )));
        }
        if refs.contains_key(t.case_id.as_str()) {
            kept.push(t);
        } else {
            unmatched.push(t.case_id.as_str());
        }
    }
    if !unmatched.is_empty() {
        log::warn!(
            "{}: {} trace(s) without a reference excluded: {}",
            path.display(),
            unmatched.len(),
            unmatched.join(", ")
        );
    }
    if kept.is_empty() {
        return Err(CliError::Data("no cases matched".to_string()));
    }
    Ok(kept)
}

fn report_of(system: &str, scores: &[ExampleScore]) -> Result<AggregateReport, CliError> {
    aggregate(system, scores).map_err(|_| CliError::Data(format!("{system}: no cases matched")))
}

pub fn eval(cfg: &PipelineConfig, opts: &EvalOptions<'_>) -> Result<String, CliError> {
    let traces: Vec<RunTrace> = read_jsonl(opts.traces)?;
    let refs: Vec<DriftCase> = read_jsonl(opts.refs)?;
    let ref_index = index_refs(&refs, opts.refs)?;
    let kept = matched(&traces, &ref_index, opts.traces)?;

    let embedder = make_embedder(cfg)?;
    let judge_mock = opts.judge_mock.map(MockBackend::from_fixture).transpose()?;
    let judge_http = match (&judge_mock, opts.judge) {
        (None, true) => Some(HttpBackend::new(
            cfg.judge_backend
                .clone()
                .unwrap_or_else(|| cfg.backend.clone()),
        )?),
        _ => None,
    };
    let judge_backend: Option<&dyn Backend> = match (&judge_mock, &judge_http) {
        (Some(m), _) => Some(m),
        (_, Some(h)) => Some(h),
        _ => None,
    };
    let scorer = Scorer {
        embedder: embedder.as_ref(),
        judge: judge_backend,
    };
    let cap = cfg.target_token_cap;
    let pick = |draft: Draft, ts: &[&RunTrace]| -> Vec<(String, String)> {
        ts.iter()
            .map(|t| (t.case_id.clone(), candidate(t, draft, cap)))
            .collect()
    };

    let default_name = match opts.draft {
        Draft::Initial => "DocSync (Initial)",
        Draft::Final => "DocSync (Final)",
    };
    let system = opts.system.unwrap_or(default_name);
    let scores = scorer.score(&pick(opts.draft, &kept), &ref_index)?;
    let main = report_of(system, &scores)?;

    let mut body = to_jsonl(&scores);
    body.push_str(&json_line(&main));
    write_atomic(opts.out, body.as_bytes())?;

    if !opts.compare {
        return Ok(json_line(&main));
    }

    let mut rows = Vec::new();
    let stale: Vec<(String, String)> = kept
        .iter()
        .map(|t| {
            (
                t.case_id.clone(),
                ref_index[t.case_id.as_str()].doc_stale.trim().to_string(),
            )
        })
        .collect();
    rows.push(report_of(
        "Stale docstring",
        &scorer.score(&stale, &ref_index)?,
    )?);
    for (name, path) in opts.baselines {
        let other: Vec<RunTrace> = read_jsonl(path)?;
        let other_kept = matched(&other, &ref_index, path)?;
        rows.push(report_of(
            name,
            &scorer.score(&pick(Draft::Final, &other_kept), &ref_index)?,
        )?);
    }
    let (initial, last) = match opts.draft {
        Draft::Final => {
            let initial = report_of(
                "DocSync (Initial)",
                &scorer.score(&pick(Draft::Initial, &kept), &ref_index)?,
            )?;
            (initial, main.clone())
        }
        Draft::Initial => {
            let last = report_of(
                "DocSync (Final)",
                &scorer.score(&pick(Draft::Final, &kept), &ref_index)?,
            )?;
            (main.clone(), last)
        }
    };
    rows.push(initial.clone());
    rows.push(last.clone());

    let text = format!(
        "Main results\n{}\nRefinement loop\n{}",
        render_main_table(&rows),
        render_refinement_table(&initial, &last)
    );
    if let Some(path) = opts.report {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(text)
}

/// Reads the trailing aggregate line of an eval output file.
pub fn read_aggregate(path: &Path) -> Result<AggregateReport, CliError> {
    let body = read_text(path)?;
    let last = body
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| CliError::Data(format!("{}: empty eval file", path.display())))?;
    serde_json::from_str(last).map_err(|e| {
        CliError::Data(format!(
            "{}: last line is not an aggregate report: {e}",
            path.display()
        ))
    })
}

pub fn report(evals: &[PathBuf], refinement: bool) -> Result<String, CliError> {
    let reports = evals
        .iter()
        .map(|p| read_aggregate(p))
        .collect::<Result<Vec<_>, _>>()?;
    if refinement {
        let [initial, last] = reports.as_slice() else {
            return Err(CliError::Usage(
                "--refinement needs exactly two eval files: initial, then final".into(),
            ));
        };
        return Ok(render_refinement_table(initial, last));
    }
    Ok(render_main_table(&reports))
}
