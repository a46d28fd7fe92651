use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;

use docsync_core::backend::escape_line;
use docsync_core::{AggregateReport, DriftCase, ExampleScore, RunTrace};
use serde::de::DeserializeOwned;

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus.jsonl");

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn docsync(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_docsync"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("DOCSYNC_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn lines<T: DeserializeOwned>(path: &Path) -> Vec<T> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_mock(path: &Path, replies: &[String]) {
    let body: String = replies.iter().map(|r| escape_line(r) + "\n").collect();
    fs::write(path, body).unwrap();
}

/// One BAD then GOOD per case, the second draft restoring the reference.
fn refine_script(cases: &[DriftCase]) -> Vec<String> {
    cases
        .iter()
        .flat_map(|c| {
            [
                format!("\"\"\"{}\"\"\"", c.doc_stale),
                "BAD: mention the remaining behavior".to_string(),
                c.doc_ref.clone(),
                "GOOD".to_string(),
            ]
        })
        .collect()
}

fn simulated(dir: &Path, limit: usize) -> (PathBuf, Vec<DriftCase>) {
    let out = dir.join("cases.jsonl");
    let limit = limit.to_string();
    let r = docsync(
        dir,
        &[
            "simulate",
            "--corpus",
            CORPUS,
            "--out",
            "cases.jsonl",
            "--limit",
            &limit,
        ],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let cases = lines(&out);
    (out, cases)
}

#[test]
fn simulate_writes_one_case_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let r = docsync(
        dir.path(),
        &["simulate", "--corpus", CORPUS, "--out", "cases.jsonl"],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.stdout.trim(), "32");
    let cases: Vec<DriftCase> = lines(&dir.path().join("cases.jsonl"));
    assert_eq!(cases.len(), 32);
    assert!(cases
        .iter()
        .all(|c| c.code_old == c.code_new && c.doc_ref.starts_with(&c.doc_stale)));
}

#[test]
fn simulate_limit_zero_creates_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let r = docsync(
        dir.path(),
        &[
            "simulate",
            "--corpus",
            CORPUS,
            "--out",
            "cases.jsonl",
            "--limit",
            "0",
        ],
        &[],
    );
    assert_eq!(r.code, 0);
    assert_eq!(r.stdout.trim(), "0");
    assert_eq!(
        fs::read_to_string(dir.path().join("cases.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn corrupt_corpus_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let good = fs::read_to_string(CORPUS).unwrap();
    let first = good.lines().next().unwrap();
    fs::write(
        dir.path().join("bad.jsonl"),
        format!("{first}\n{{\"id\": \"x\", \"code\": \"pass\"}}\n"),
    )
    .unwrap();
    let r = docsync(
        dir.path(),
        &["simulate", "--corpus", "bad.jsonl", "--out", "cases.jsonl"],
        &[],
    );
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 2"), "{}", r.stderr);
    let names: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names, vec!["bad.jsonl"]);
}

#[test]
fn ingest_reports_languages_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let r = docsync(dir.path(), &["ingest", "--corpus", CORPUS], &[]);
    assert_eq!(
        r.stdout.trim(),
        r#"{"records":32,"languages":{"python":32}}"#
    );
    let r = docsync(
        dir.path(),
        &[
            "ingest", "--corpus", CORPUS, "--sample", "5", "--out", "s.jsonl",
        ],
        &[],
    );
    assert_eq!(r.code, 0);
    let a = fs::read_to_string(dir.path().join("s.jsonl")).unwrap();
    docsync(
        dir.path(),
        &[
            "ingest", "--corpus", CORPUS, "--sample", "5", "--out", "s.jsonl",
        ],
        &[],
    );
    assert_eq!(a, fs::read_to_string(dir.path().join("s.jsonl")).unwrap());
    docsync(
        dir.path(),
        &[
            "ingest", "--corpus", CORPUS, "--sample", "5", "--out", "t.jsonl",
        ],
        &[("DOCSYNC_SEED", "7")],
    );
    assert_ne!(a, fs::read_to_string(dir.path().join("t.jsonl")).unwrap());
    assert_eq!(a.lines().count(), 5);
}

#[test]
fn repair_with_mock_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cases) = simulated(dir.path(), 3);
    write_mock(&dir.path().join("mock.txt"), &refine_script(&cases));
    let args = |out: &'static str| {
        [
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            out,
            "--mock",
            "mock.txt",
            "--bypass-gate",
        ]
    };
    let a = docsync(dir.path(), &args("a.jsonl"), &[]);
    let b = docsync(dir.path(), &args("b.jsonl"), &[]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(b.code, 0, "{}", b.stderr);
    assert_eq!(
        a.stdout.trim(),
        r#"{"cases":3,"relevant":3,"accepted":3,"retries_exhausted":0,"errors":0}"#
    );
    let bytes = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(bytes, fs::read(dir.path().join("b.jsonl")).unwrap());
    let traces: Vec<RunTrace> = lines(&dir.path().join("a.jsonl"));
    assert_eq!(traces.len(), 3);
    assert!(traces
        .iter()
        .all(|t| t.attempts == 1 && t.verdicts.len() == 2));

    let journal = fs::read_to_string(dir.path().join("a.jsonl.requests.jsonl")).unwrap();
    assert_eq!(journal.lines().count(), 12);
    assert!(journal
        .lines()
        .next()
        .unwrap()
        .contains(r#""role":"generator""#));
}

#[test]
fn max_retries_zero_never_refines() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cases) = simulated(dir.path(), 4);
    let script: Vec<String> = cases
        .iter()
        .flat_map(|c| [c.doc_stale.clone(), "BAD: wrong".to_string()])
        .collect();
    write_mock(&dir.path().join("mock.txt"), &script);
    let r = docsync(
        dir.path(),
        &[
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            "t.jsonl",
            "--mock",
            "mock.txt",
            "--bypass-gate",
            "--max-retries",
            "0",
        ],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(
        r.stdout.trim(),
        r#"{"cases":4,"relevant":4,"accepted":0,"retries_exhausted":4,"errors":0}"#
    );
    let traces: Vec<RunTrace> = lines(&dir.path().join("t.jsonl"));
    assert!(traces.iter().all(|t| t.attempts == 0 && !t.accepted));
}

#[test]
fn config_file_and_env_override_retries() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cases) = simulated(dir.path(), 2);
    let script: Vec<String> = cases
        .iter()
        .flat_map(|c| [c.doc_stale.clone(), "BAD: wrong".to_string()])
        .collect();
    write_mock(&dir.path().join("mock.txt"), &script);
    fs::write(
        dir.path().join("custom.toml"),
        "max_retries = 5\nrelevance_gate = \"bypass\"\n",
    )
    .unwrap();
    let args = [
        "repair",
        "--cases",
        "cases.jsonl",
        "--out",
        "t.jsonl",
        "--mock",
        "mock.txt",
    ];
    let r = docsync(
        dir.path(),
        &args,
        &[
            ("DOCSYNC_CONFIG", "custom.toml"),
            ("DOCSYNC_MAX_RETRIES", "0"),
        ],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let traces: Vec<RunTrace> = lines(&dir.path().join("t.jsonl"));
    assert!(traces.iter().all(|t| t.relevant && t.attempts == 0));

    fs::write(dir.path().join("broken.toml"), "max_retries = \"two\"\n").unwrap();
    let r = docsync(dir.path(), &args, &[("DOCSYNC_CONFIG", "broken.toml")]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("broken.toml"), "{}", r.stderr);
}

#[test]
fn whitespace_only_delta_skips_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let case = DriftCase {
        id: "ws".into(),
        code_old: "def f(a):\n    return a\n".into(),
        code_new: "def f(a):\n\n    return  a\n".into(),
        doc_stale: "Return a.".into(),
        doc_ref: "Return a unchanged.".into(),
    };
    fs::write(
        dir.path().join("cases.jsonl"),
        serde_json::to_string(&case).unwrap() + "\n",
    )
    .unwrap();
    fs::write(dir.path().join("empty.txt"), "").unwrap();
    let r = docsync(
        dir.path(),
        &[
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            "t.jsonl",
            "--mock",
            "empty.txt",
        ],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let traces: Vec<RunTrace> = lines(&dir.path().join("t.jsonl"));
    assert!(!traces[0].relevant);
    assert_eq!(traces[0].draft_final, "Return a.");
    assert_eq!(
        fs::read_to_string(dir.path().join("t.jsonl.requests.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn unreachable_backend_aborts_unless_keep_going() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path(), 3);
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let url = format!("http://127.0.0.1:{port}/v1");
    let env = [
        ("DOCSYNC_ENDPOINT_URL", url.as_str()),
        ("DOCSYNC_MAX_RETRIES_NETWORK", "0"),
        ("DOCSYNC_WORKERS", "1"),
    ];
    let r = docsync(
        dir.path(),
        &[
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            "t.jsonl",
            "--bypass-gate",
        ],
        &env,
    );
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(!dir.path().join("t.jsonl").exists());
    let journal = fs::read_to_string(dir.path().join("t.jsonl.requests.jsonl")).unwrap();
    assert_eq!(
        journal.lines().count(),
        1,
        "request is journaled before it fails"
    );

    let r = docsync(
        dir.path(),
        &[
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            "t.jsonl",
            "--bypass-gate",
            "--keep-going",
        ],
        &env,
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains(r#""errors":3"#), "{}", r.stdout);
    let traces: Vec<RunTrace> = lines(&dir.path().join("t.jsonl"));
    assert!(traces.iter().all(|t| t.error.is_some() && !t.accepted));
}

#[test]
fn stale_docs_as_the_system_score_full_summary_exact() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path(), 32);
    fs::write(dir.path().join("empty.txt"), "").unwrap();
    let r = docsync(
        dir.path(),
        &[
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            "t.jsonl",
            "--mock",
            "empty.txt",
        ],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = docsync(
        dir.path(),
        &[
            "eval",
            "--traces",
            "t.jsonl",
            "--refs",
            "cases.jsonl",
            "--out",
            "e.jsonl",
            "--system",
            "Stale",
        ],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: AggregateReport = serde_json::from_str(r.stdout.trim()).unwrap();
    assert_eq!(report.n, 32);
    assert_eq!(report.mean_summary_exact, 1.0);
    assert!(report.mean_bleu4 < 1.0);

    let body = fs::read_to_string(dir.path().join("e.jsonl")).unwrap();
    let rows: Vec<&str> = body.lines().collect();
    assert_eq!(rows.len(), 33);
    let _: ExampleScore = serde_json::from_str(rows[0]).unwrap();
    let last: AggregateReport = serde_json::from_str(rows[32]).unwrap();
    assert_eq!(last, report);
}

#[test]
fn empty_traces_match_nothing() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path(), 2);
    fs::write(dir.path().join("t.jsonl"), "").unwrap();
    let r = docsync(
        dir.path(),
        &[
            "eval",
            "--traces",
            "t.jsonl",
            "--refs",
            "cases.jsonl",
            "--out",
            "e.jsonl",
        ],
        &[],
    );
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("no cases matched"), "{}", r.stderr);
    assert!(!dir.path().join("e.jsonl").exists());
}

#[test]
fn unmatched_traces_are_excluded_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cases) = simulated(dir.path(), 2);
    fs::write(dir.path().join("empty.txt"), "").unwrap();
    docsync(
        dir.path(),
        &[
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            "t.jsonl",
            "--mock",
            "empty.txt",
        ],
        &[],
    );
    let mut traces: Vec<RunTrace> = lines(&dir.path().join("t.jsonl"));
    let mut stray = traces[0].clone();
    stray.case_id = "stray".into();
    traces.push(stray);
    let body: String = traces
        .iter()
        .map(|t| serde_json::to_string(t).unwrap() + "\n")
        .collect();
    fs::write(dir.path().join("t.jsonl"), body).unwrap();
    let r = docsync(
        dir.path(),
        &[
            "eval",
            "--traces",
            "t.jsonl",
            "--refs",
            "cases.jsonl",
            "--out",
            "e.jsonl",
        ],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stderr.contains("stray"), "{}", r.stderr);
    let report: AggregateReport = serde_json::from_str(r.stdout.trim()).unwrap();
    assert_eq!(report.n, cases.len());
}

#[test]
fn compare_renders_both_tables_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cases) = simulated(dir.path(), 6);
    write_mock(&dir.path().join("mock.txt"), &refine_script(&cases));
    let judge: Vec<String> = (0..cases.len() * 3)
        .map(|i| ["4", "3", "5"][i % 3].to_string())
        .collect();
    write_mock(&dir.path().join("judge.txt"), &judge);

    let run = |tag: &str| {
        let traces = format!("t{tag}.jsonl");
        let eval = format!("e{tag}.jsonl");
        let r = docsync(
            dir.path(),
            &[
                "repair",
                "--cases",
                "cases.jsonl",
                "--out",
                &traces,
                "--mock",
                "mock.txt",
                "--bypass-gate",
            ],
            &[],
        );
        assert_eq!(r.code, 0, "{}", r.stderr);
        let r = docsync(
            dir.path(),
            &[
                "eval",
                "--traces",
                &traces,
                "--refs",
                "cases.jsonl",
                "--out",
                &eval,
                "--judge-mock",
                "judge.txt",
                "--compare",
            ],
            &[],
        );
        assert_eq!(r.code, 0, "{}", r.stderr);
        (
            r.stdout,
            fs::read(dir.path().join(&traces)).unwrap(),
            fs::read(dir.path().join(&eval)).unwrap(),
        )
    };
    let first = run("1");
    let second = run("2");
    assert_eq!(first, second);

    let tables = first.0;
    let refinement = tables.split("Refinement loop").nth(1).unwrap();
    let rows: Vec<&str> = refinement
        .lines()
        .filter(|l| l.starts_with("DocSync ("))
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("DocSync (Initial)") && rows[1].starts_with("DocSync (Final)"));
    assert!(tables.contains("Stale docstring"));
    for header in ["BLEU", "F1", "Summary Exact", "Judge (95% CI)"] {
        assert!(tables.contains(header), "{header}");
    }
    assert!(!tables.contains("n/a"), "every row is judged");
}

#[test]
fn report_combines_eval_files() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cases) = simulated(dir.path(), 3);
    write_mock(&dir.path().join("mock.txt"), &refine_script(&cases));
    docsync(
        dir.path(),
        &[
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            "t.jsonl",
            "--mock",
            "mock.txt",
            "--bypass-gate",
        ],
        &[],
    );
    for draft in ["initial", "final"] {
        let out = format!("{draft}.jsonl");
        let r = docsync(
            dir.path(),
            &[
                "eval",
                "--traces",
                "t.jsonl",
                "--refs",
                "cases.jsonl",
                "--out",
                &out,
                "--draft",
                draft,
            ],
            &[],
        );
        assert_eq!(r.code, 0, "{}", r.stderr);
    }
    let r = docsync(
        dir.path(),
        &["report", "initial.jsonl", "final.jsonl", "--refinement"],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.starts_with("Setting"));
    assert!(r.stdout.contains("DocSync (Initial)") && r.stdout.contains("DocSync (Final)"));
    let r = docsync(dir.path(), &["report", "final.jsonl"], &[]);
    assert!(r.stdout.starts_with("Model"));
    let r = docsync(dir.path(), &["report", "final.jsonl", "--refinement"], &[]);
    assert_eq!(r.code, 1);
}

#[test]
fn normalize_command_text_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let r = docsync(
        dir.path(),
        &["normalize", "--text", "\"\"\" Parses the input string."],
        &[],
    );
    assert_eq!(
        r.stdout.trim(),
        r#"{"text":"Parses the input string.","applied_rules":["StripDelimiters"]}"#
    );

    let (_, cases) = simulated(dir.path(), 1);
    write_mock(
        &dir.path().join("mock.txt"),
        &[cases[0].doc_stale.clone(), "GOOD".into()],
    );
    docsync(
        dir.path(),
        &[
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            "t.jsonl",
            "--mock",
            "mock.txt",
            "--bypass-gate",
        ],
        &[],
    );
    let mut traces: Vec<RunTrace> = lines(&dir.path().join("t.jsonl"));
    traces[0].draft_final = format!("{} {}", cases[0].doc_stale, cases[0].doc_stale);
    fs::write(
        dir.path().join("raw.jsonl"),
        serde_json::to_string(&traces[0]).unwrap() + "\n",
    )
    .unwrap();
    let r = docsync(
        dir.path(),
        &["normalize", "--in", "raw.jsonl", "--out", "n.jsonl"],
        &[],
    );
    assert_eq!(r.stdout.trim(), "1");
    let fixed: Vec<RunTrace> = lines(&dir.path().join("n.jsonl"));
    assert_eq!(fixed[0].draft_final, cases[0].doc_stale);
}

#[test]
fn ast_classify_and_index() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("a.py"),
        "def connect(host, port):\n    pass\n\nclass DB:\n    pass\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("b.py"),
        "def connect(host, port):\n    # retry\n    pass\n\nclass DB:\n    pass\n",
    )
    .unwrap();
    let r = docsync(dir.path(), &["ast", "a.py"], &[]);
    assert_eq!(r.stdout, "def connect(host, port) | class DB\n");
    let r = docsync(dir.path(), &["classify", "a.py", "b.py"], &[]);
    assert_eq!(
        r.stdout.trim(),
        r#"{"relevant":false,"kind":"Irrelevant","detail":"comment only"}"#
    );
    let r = docsync(dir.path(), &["ast", "a.py", "--language", "cobol"], &[]);
    assert_eq!(r.code, 2);

    let r = docsync(
        dir.path(),
        &["index", "--corpus", CORPUS, "--out", "store.jsonl"],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.stdout.trim(), "32");
    let header = fs::read_to_string(dir.path().join("store.jsonl")).unwrap();
    assert!(header.starts_with(r#"{"dimension":256,"embedder":"hashed-bow-256","count":32}"#));

    let (_, cases) = simulated(dir.path(), 1);
    write_mock(
        &dir.path().join("mock.txt"),
        &[cases[0].doc_stale.clone(), "GOOD".into()],
    );
    let r = docsync(
        dir.path(),
        &[
            "repair",
            "--cases",
            "cases.jsonl",
            "--out",
            "t.jsonl",
            "--mock",
            "mock.txt",
            "--bypass-gate",
            "--store",
            "store.jsonl",
        ],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let traces: Vec<RunTrace> = lines(&dir.path().join("t.jsonl"));
    assert_eq!(traces[0].prompts[0].matches("\nContext: ").count(), 3);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(docsync(dir.path(), &["frobnicate"], &[]).code, 1);
    assert_eq!(
        docsync(dir.path(), &["simulate", "--corpus", CORPUS], &[]).code,
        1
    );
    assert_eq!(docsync(dir.path(), &["--help"], &[]).code, 0);
    assert_eq!(
        docsync(
            dir.path(),
            &["ast", "a.py"],
            &[("DOCSYNC_CHUNK_MAX_CHARS", "3")]
        )
        .code,
        1
    );
}
