//! Reference-based metrics, model-judged scores and their aggregation.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError};
use crate::corpus::first_sentence;
use crate::retrieval::{cosine, embed_checked, EmbedError, Embedder};
use crate::text::{canonical, word_tokens};

pub const JUDGE_RUBRIC: &str = include_str!("../assets/judge_rubric.v1.txt");
/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;
pub const BLEU_AGGREGATION: &str = "sentence-level BLEU-4, macro-averaged over examples";
pub const EMB_F1_LABEL: &str = "emb_f1 (BERTScore proxy)";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("reference has no tokens")]
    EmptyReference,
    #[error("cannot aggregate an empty score list")]
    NoScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub case_id: String,
    pub bleu4: f64,
    pub emb_f1: f64,
    pub summary_exact: u8,
    #[serde(default)]
    pub judge: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub system: String,
    pub n: usize,
    pub mean_bleu4: f64,
    pub mean_emb_f1: f64,
    pub mean_summary_exact: f64,
    /// Judge statistics over examples that have a judge score; `None` when
    /// no example was judged.
    pub judge_n: usize,
    pub mean_judge: Option<f64>,
    pub judge_ci_low: Option<f64>,
    pub judge_ci_high: Option<f64>,
    pub bleu4_aggregation: String,
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sentence-level BLEU-4 with add-one smoothing of zero higher-order
/// precisions and the standard brevity penalty.
pub fn bleu4(candidate: &str, reference: &str) -> Result<f64, EvalError> {
    let reference = word_tokens(reference);
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let candidate = word_tokens(candidate);
    if candidate.is_empty() {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngrams(&candidate, n);
        let refs = ngrams(&reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand
            .iter()
            .map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += precision.ln();
    }

    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((brevity * (log_sum / 4.0).exp()).clamp(0.0, 1.0))
}

/// Greedy token matching F1 over context-free token embeddings.
pub fn emb_f1(
    candidate: &str,
    reference: &str,
    embedder: &dyn Embedder,
) -> Result<f64, EmbedError> {
    let cand = word_tokens(candidate);
    let refs = word_tokens(reference);
    if cand.is_empty() || refs.is_empty() {
        return Ok(0.0);
    }
    let mut vocab: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for t in cand.iter().chain(&refs) {
        if seen.insert(t.as_str()) {
            vocab.push(t.clone());
        }
    }
    let vectors = embed_checked(embedder, &vocab)?;
    let lookup: HashMap<&str, &Vec<f64>> = vocab.iter().map(String::as_str).zip(&vectors).collect();

    let best = |from: &[String], to: &[String]| -> f64 {
        from.iter()
            .map(|a| {
                to.iter()
                    .map(|b| cosine(lookup[a.as_str()], lookup[b.as_str()]))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let precision = best(&cand, &refs);
    let recall = best(&refs, &cand);
    if precision + recall <= 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * precision * recall / (precision + recall)).clamp(0.0, 1.0))
}

/// 1 when both texts open with the same sentence, ignoring case and
/// whitespace.
pub fn summary_exact(candidate: &str, reference: &str) -> u8 {
    match (first_sentence(candidate), first_sentence(reference)) {
        (Ok(c), Ok(r)) => u8::from(canonical(c) == canonical(r)),
        _ => 0,
    }
}

/// Asks a judge model for a 1-5 score. `None` when the reply holds no
/// integer in range.
pub fn judge(
    candidate: &str,
    code: &str,
    backend: &dyn Backend,
) -> Result<Option<u8>, BackendError> {
    let user = format!("Code:\n{code}\n\nDocstring:\n{candidate}");
    let response = backend.complete(JUDGE_RUBRIC.trim_end(), &user)?;
    let score = parse_judge(&response.text);
    if score.is_none() {
        log::warn!("judge reply has no score in 1..5: {:?}", response.text);
    }
    Ok(score)
}

/// The first integer in `1..=5` appearing in `text`.
pub fn parse_judge(text: &str) -> Option<u8> {
    text.split(|c: char| !c.is_ascii_digit())
        .filter(|d| !d.is_empty())
        .filter_map(|d| d.parse::<u64>().ok())
        .find(|v| (1..=5).contains(v))
        .map(|v| v as u8)
}

/// Means over all examples, and a normal-approximation 95% interval for the
/// judge mean using the sample standard deviation.
pub fn aggregate(system: &str, scores: &[ExampleScore]) -> Result<AggregateReport, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::NoScores);
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&ExampleScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let judged: Vec<f64> = scores
        .iter()
        .filter_map(|s| s.judge)
        .map(f64::from)
        .collect();
    let (mean_judge, low, high) = match mean_with_ci(&judged) {
        Some((m, l, h)) => (Some(m), Some(l), Some(h)),
        None => (None, None, None),
    };
    Ok(AggregateReport {
        system: system.to_string(),
        n: scores.len(),
        mean_bleu4: mean(|s| s.bleu4),
        mean_emb_f1: mean(|s| s.emb_f1),
        mean_summary_exact: mean(|s| f64::from(s.summary_exact)),
        judge_n: judged.len(),
        mean_judge,
        judge_ci_low: low,
        judge_ci_high: high,
        bleu4_aggregation: BLEU_AGGREGATION.to_string(),
    })
}

fn mean_with_ci(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, mean, mean));
    }
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = Z_95 * variance.sqrt() / n.sqrt();
    Some((mean, mean - half, mean + half))
}

fn judge_cell(r: &AggregateReport) -> String {
    match (r.mean_judge, r.judge_ci_low, r.judge_ci_high) {
        (Some(m), Some(l), Some(h)) => format!("{m:.2} [{l:.2}, {h:.2}]"),
        _ => "n/a".to_string(),
    }
}

fn table(first_header: &str, rows: &[(String, &AggregateReport)]) -> String {
    let headers = [
        first_header,
        "BLEU",
        "F1",
        "Summary Exact",
        "Judge (95% CI)",
    ];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|(name, r)| {
            [
                name.clone(),
                format!("{:.3}", r.mean_bleu4),
                format!("{:.3}", r.mean_emb_f1),
                format!("{:.3}", r.mean_summary_exact),
                judge_cell(r),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..5)
        .map(|i| {
            cells
                .iter()
                .map(|c| c[i].len())
                .chain([headers[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |vals: [&str; 5]| {
        let padded: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if i == 0 {
                    format!("{v:<w$}", w = widths[i])
                } else {
                    format!("{v:>w$}", w = widths[i])
                }
            })
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
    let mut out = vec![line(headers), rule.clone()];
    out.extend(
        cells
            .iter()
            .map(|c| line([&c[0], &c[1], &c[2], &c[3], &c[4]])),
    );
    out.push(rule);
    out.push(format!("F1 = {EMB_F1_LABEL}; BLEU = {BLEU_AGGREGATION}."));
    out.join("\n") + "\n"
}

/// Systems as rows, one column per metric.
pub fn render_main_table(reports: &[AggregateReport]) -> String {
    let rows: Vec<(String, &AggregateReport)> =
        reports.iter().map(|r| (r.system.clone(), r)).collect();
    table("Model", &rows)
}

/// First draft against loop output.
pub fn render_refinement_table(initial: &AggregateReport, last: &AggregateReport) -> String {
    table(
        "Setting",
        &[
            (initial.system.clone(), initial),
            (last.system.clone(), last),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::retrieval::HashedBowEmbedder;

    fn score(id: &str, judge: Option<u8>) -> ExampleScore {
        ExampleScore {
            case_id: id.into(),
            bleu4: 0.5,
            emb_f1: 0.5,
            summary_exact: 1,
            judge,
        }
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert_eq!(
            bleu4("the quick brown fox jumps", "the quick brown fox jumps").unwrap(),
            1.0
        );
        assert_eq!(bleu4("Hi", "hi.").unwrap(), 1.0);
        assert_eq!(bleu4("alpha beta", "gamma delta").unwrap(), 0.0);
        assert_eq!(bleu4("", "gamma delta").unwrap(), 0.0);
        assert!(matches!(
            bleu4("x", " ... "),
            Err(EvalError::EmptyReference)
        ));
    }

    #[test]
    fn bleu_cat_on_mat_closed_form() {
        // p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 = 0/3 smoothed to 1/4; equal lengths.
        let expected = 2f64.powf(-1.25);
        let got = bleu4("the cat sat on the mat", "the cat is on the mat").unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn emb_f1_examples() {
        let e = HashedBowEmbedder::default();
        assert!((emb_f1("open the file", "open the file", &e).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(emb_f1("", "x", &e).unwrap(), 0.0);
        let disjoint = emb_f1("alpha beta gamma", "delta epsilon zeta", &e).unwrap();
        assert!(disjoint < 0.1, "{disjoint}");
    }

    #[test]
    fn summary_exact_examples() {
        assert_eq!(
            summary_exact("Loads a file.", "Loads a file. Then parses it."),
            1
        );
        assert_eq!(
            summary_exact("loads  a FILE. Other.", "Loads a file. Then parses it."),
            1
        );
        assert_eq!(summary_exact("Loads the file.", "Loads a file."), 0);
        assert_eq!(summary_exact("", "Loads a file."), 0);
    }

    #[test]
    fn judge_parsing() {
        assert_eq!(parse_judge("4"), Some(4));
        assert_eq!(parse_judge("Score: 5 - perfect match"), Some(5));
        assert_eq!(parse_judge("excellent"), None);
        assert_eq!(parse_judge("10/10, so 5"), Some(5));
        assert_eq!(parse_judge("0"), None);
    }

    #[test]
    fn judge_call_uses_rubric() {
        let mock = MockBackend::new(["3 - fair", "great"]);
        assert_eq!(judge("Doc.", "def f(): pass", &mock).unwrap(), Some(3));
        assert_eq!(judge("Doc.", "def f(): pass", &mock).unwrap(), None);
        assert!(mock.requests()[0].0.contains("1=Irrelevant, 5=Perfect"));
    }

    #[test]
    fn aggregate_ci() {
        let scores: Vec<ExampleScore> = [3, 3, 4, 4].iter().map(|j| score("c", Some(*j))).collect();
        let r = aggregate("sys", &scores).unwrap();
        let half = 1.96 * (1.0f64 / 3.0).sqrt() / 2.0;
        assert!((r.mean_judge.unwrap() - 3.5).abs() < 1e-12);
        assert!((r.judge_ci_low.unwrap() - (3.5 - half)).abs() < 1e-12);
        assert!((r.judge_ci_high.unwrap() - (3.5 + half)).abs() < 1e-12);
        assert!((r.judge_ci_low.unwrap() - 2.934).abs() < 1e-3);

        let same: Vec<ExampleScore> = (0..5).map(|_| score("c", Some(2))).collect();
        let r = aggregate("sys", &same).unwrap();
        assert_eq!(r.judge_ci_low, r.judge_ci_high);

        let one = aggregate("sys", &[score("c", Some(4))]).unwrap();
        assert_eq!(
            (one.judge_ci_low, one.judge_ci_high),
            (Some(4.0), Some(4.0))
        );

        let unjudged = aggregate("sys", &[score("c", None), score("d", Some(5))]).unwrap();
        assert_eq!(
            (unjudged.n, unjudged.judge_n, unjudged.mean_judge),
            (2, 1, Some(5.0))
        );

        assert!(matches!(aggregate("sys", &[]), Err(EvalError::NoScores)));
    }

    #[test]
    fn tables_have_expected_shape() {
        let a = aggregate("DocSync (Initial)", &[score("c", Some(3))]).unwrap();
        let b = aggregate("DocSync (Final)", &[score("c", None)]).unwrap();
        let t = render_refinement_table(&a, &b);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Setting") && lines[0].contains("Summary Exact"));
        assert!(
            lines[2].starts_with("DocSync (Initial)") && lines[2].ends_with("3.00 [3.00, 3.00]")
        );
        assert!(lines[3].starts_with("DocSync (Final)") && lines[3].ends_with("n/a"));
        assert!(render_main_table(&[a, b]).starts_with("Model"));
    }
}
