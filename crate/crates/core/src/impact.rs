//! Relevance gate and drift classification for code changes.
//!
//! A change is irrelevant when the new source has the same syntax tree as
//! the old one once comments and docstring literals are removed. Relevant
//! changes get a single best-matching [`DriftKind`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use tree_sitter::{Node, Tree};

use crate::astsig::{self, canonical_text, Definition, DefinitionKind};

/// Line-level difference between two versions of a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDelta {
    pub old_source: String,
    pub new_source: String,
    /// Inserted or modified lines of `new_source`, as sorted, disjoint,
    /// 1-based inclusive ranges.
    pub changed_line_spans: Vec<(usize, usize)>,
    /// Deleted or modified lines of `old_source`, same convention.
    #[serde(default)]
    pub removed_line_spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriftKind {
    ParameterFlux,
    TypeMigration,
    ReturnValueDivergence,
    SideEffectIntroduction,
    ConstraintChange,
    /// Cross-file example decay. Never produced by the single-file heuristic.
    TutorialRot,
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftClass {
    pub kind: DriftKind,
    pub detail: String,
}

impl DriftClass {
    fn new(kind: DriftKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

/// Relevance verdict for a delta.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relevance {
    pub relevant: bool,
    #[serde(flatten)]
    pub class: DriftClass,
}

/// Detail used when the new source cannot be parsed.
pub const FAIL_OPEN_DETAIL: &str = "unknown, treat as relevant: new source has syntax errors";

/// Line diff from a longest-common-subsequence alignment.
pub fn diff(old_source: &str, new_source: &str) -> CodeDelta {
    let old: Vec<&str> = old_source.lines().collect();
    let new: Vec<&str> = new_source.lines().collect();
    let (old_kept, new_kept) = lcs_alignment(&old, &new);
    CodeDelta {
        old_source: old_source.to_string(),
        new_source: new_source.to_string(),
        changed_line_spans: spans(&new_kept),
        removed_line_spans: spans(&old_kept),
    }
}

/// Marks which lines of each side belong to one longest common subsequence.
fn lcs_alignment(a: &[&str], b: &[&str]) -> (Vec<bool>, Vec<bool>) {
    let (n, m) = (a.len(), b.len());
    // suffix[i][j] = LCS length of a[i..] and b[j..]
    let width = m + 1;
    let mut suffix = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i * width + j] = if a[i] == b[j] {
                suffix[(i + 1) * width + j + 1] + 1
            } else {
                suffix[(i + 1) * width + j].max(suffix[i * width + j + 1])
            };
        }
    }
    let mut a_kept = vec![false; n];
    let mut b_kept = vec![false; m];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            a_kept[i] = true;
            b_kept[j] = true;
            i += 1;
            j += 1;
        } else if suffix[(i + 1) * width + j] >= suffix[i * width + j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    (a_kept, b_kept)
}

fn spans(kept: &[bool]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (idx, _) in kept.iter().enumerate().filter(|(_, k)| !**k) {
        let line = idx + 1;
        match out.last_mut() {
            Some((_, end)) if *end + 1 == line => *end = line,
            _ => out.push((line, line)),
        }
    }
    out
}

/// Decides whether `delta` can invalidate documentation.
pub fn is_relevant(delta: &CodeDelta) -> Relevance {
    let Ok(new_tree) = astsig::parse_python(&delta.new_source) else {
        return fail_open();
    };
    if new_tree.root_node().has_error() {
        return fail_open();
    }
    let Ok(old_tree) = astsig::parse_python(&delta.old_source) else {
        return fail_open();
    };

    let old = |mode| structure(&old_tree, &delta.old_source, mode);
    let new = |mode| structure(&new_tree, &delta.new_source, mode);

    if old(Strip::Nothing) == new(Strip::Nothing) {
        let detail = if delta.old_source == delta.new_source {
            "no changes"
        } else {
            "whitespace only"
        };
        return irrelevant(detail);
    }
    if old(Strip::Comments) == new(Strip::Comments) {
        return irrelevant("comment only");
    }
    if old(Strip::Docstrings) == new(Strip::Docstrings) {
        return irrelevant("docstring only");
    }
    if old(Strip::Both) == new(Strip::Both) {
        return irrelevant("comments and docstrings only");
    }

    Relevance {
        relevant: true,
        class: classify(&old_tree, &delta.old_source, &new_tree, &delta.new_source),
    }
}

fn fail_open() -> Relevance {
    Relevance {
        relevant: true,
        class: DriftClass::new(DriftKind::Irrelevant, FAIL_OPEN_DETAIL),
    }
}

fn irrelevant(detail: &str) -> Relevance {
    Relevance {
        relevant: false,
        class: DriftClass::new(DriftKind::Irrelevant, detail),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Strip {
    Nothing,
    Comments,
    Docstrings,
    Both,
}

impl Strip {
    fn comments(self) -> bool {
        matches!(self, Strip::Comments | Strip::Both)
    }

    fn docstrings(self) -> bool {
        matches!(self, Strip::Docstrings | Strip::Both)
    }
}

/// Preorder serialization of the syntax tree: named nodes open with their
/// kind and close with `)`, leaves contribute their text. Layout is absent by
/// construction, but block structure is kept.
fn structure(tree: &Tree, source: &str, strip: Strip) -> Vec<String> {
    let mut out = Vec::new();
    serialize(tree.root_node(), source, strip, &mut out);
    out
}

fn serialize(node: Node<'_>, source: &str, strip: Strip, out: &mut Vec<String>) {
    if node.kind() == "comment" && strip.comments() {
        return;
    }
    if strip.docstrings() && is_docstring(node) {
        return;
    }
    if node.child_count() == 0 {
        out.push(astsig::text(node, source).to_string());
        return;
    }
    if node.is_named() {
        out.push(node.kind().to_string());
    }
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        serialize(child, source, strip, out);
    }
    if node.is_named() {
        out.push(")".to_string());
    }
}

/// A string expression statement that is the first statement of a module,
/// class body or function body.
fn is_docstring(node: Node<'_>) -> bool {
    if node.kind() != "expression_statement" || node.named_child_count() != 1 {
        return false;
    }
    let is_string = node
        .named_child(0)
        .is_some_and(|c| matches!(c.kind(), "string" | "concatenated_string"));
    if !is_string {
        return false;
    }
    let Some(parent) = node.parent() else {
        return false;
    };
    if !matches!(parent.kind(), "module" | "block") {
        return false;
    }
    let mut cursor = parent.walk();
    let first = parent
        .named_children(&mut cursor)
        .find(|c| c.kind() != "comment");
    first.is_some_and(|f| f.id() == node.id())
}

/// Facts compared between the two versions of a function.
#[derive(Debug, Default, PartialEq, Eq)]
struct BodyFacts {
    returns: Vec<String>,
    calls: BTreeSet<String>,
    mutations: BTreeSet<String>,
    constraints: Vec<String>,
}

fn classify(old_tree: &Tree, old_src: &str, new_tree: &Tree, new_src: &str) -> DriftClass {
    let old_defs = functions(old_tree, old_src);
    let new_defs = functions(new_tree, new_src);

    let removed: Vec<&str> = old_defs
        .keys()
        .filter(|k| !new_defs.contains_key(*k))
        .map(String::as_str)
        .collect();
    let added: Vec<&str> = new_defs
        .keys()
        .filter(|k| !old_defs.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !removed.is_empty() || !added.is_empty() {
        return DriftClass::new(
            DriftKind::ParameterFlux,
            format!(
                "definitions removed [{}], added [{}]",
                removed.join(", "),
                added.join(", ")
            ),
        );
    }

    let pairs: Vec<(&Definition<'_>, &Definition<'_>)> = old_defs
        .iter()
        .map(|(name, old)| (old, &new_defs[name]))
        .collect();

    for (old, new) in &pairs {
        let old_names: Vec<&str> = old.parameters.iter().map(|p| p.name.as_str()).collect();
        let new_names: Vec<&str> = new.parameters.iter().map(|p| p.name.as_str()).collect();
        if old_names != new_names {
            return DriftClass::new(
                DriftKind::ParameterFlux,
                format!(
                    "{}: parameters ({}) -> ({})",
                    new.qualified_name,
                    old_names.join(", "),
                    new_names.join(", ")
                ),
            );
        }
    }
    for (old, new) in &pairs {
        for (op, np) in old.parameters.iter().zip(&new.parameters) {
            if op.annotation != np.annotation {
                return DriftClass::new(
                    DriftKind::TypeMigration,
                    format!(
                        "{}: parameter {} annotation {} -> {}",
                        new.qualified_name,
                        np.name,
                        op.annotation.as_deref().unwrap_or("none"),
                        np.annotation.as_deref().unwrap_or("none")
                    ),
                );
            }
        }
    }

    let facts: Vec<(BodyFacts, BodyFacts)> = pairs
        .iter()
        .map(|(old, new)| (body_facts(old.node, old_src), body_facts(new.node, new_src)))
        .collect();

    for ((old, new), (of, nf)) in pairs.iter().zip(&facts) {
        if old.return_annotation != new.return_annotation {
            return DriftClass::new(
                DriftKind::ReturnValueDivergence,
                format!(
                    "{}: return annotation {} -> {}",
                    new.qualified_name,
                    old.return_annotation.as_deref().unwrap_or("none"),
                    new.return_annotation.as_deref().unwrap_or("none")
                ),
            );
        }
        if of.returns != nf.returns {
            return DriftClass::new(
                DriftKind::ReturnValueDivergence,
                format!(
                    "{}: returns [{}] -> [{}]",
                    new.qualified_name,
                    of.returns.join("; "),
                    nf.returns.join("; ")
                ),
            );
        }
    }
    for ((_, new), (of, nf)) in pairs.iter().zip(&facts) {
        let calls: Vec<&str> = nf.calls.difference(&of.calls).map(String::as_str).collect();
        let writes: Vec<&str> = nf
            .mutations
            .difference(&of.mutations)
            .map(String::as_str)
            .collect();
        if !calls.is_empty() || !writes.is_empty() {
            let mut evidence = calls
                .iter()
                .map(|c| format!("calls {c}"))
                .collect::<Vec<_>>();
            evidence.extend(writes.iter().map(|w| format!("writes {w}")));
            return DriftClass::new(
                DriftKind::SideEffectIntroduction,
                format!("{}: {}", new.qualified_name, evidence.join(", ")),
            );
        }
    }
    for ((_, new), (of, nf)) in pairs.iter().zip(&facts) {
        if of.constraints != nf.constraints {
            return DriftClass::new(
                DriftKind::ConstraintChange,
                format!("{}: guards or constants changed", new.qualified_name),
            );
        }
    }
    DriftClass::new(DriftKind::ConstraintChange, "internal logic changed")
}

fn functions<'t>(tree: &'t Tree, source: &str) -> BTreeMap<String, Definition<'t>> {
    astsig::definitions(tree, source)
        .into_iter()
        .filter(|d| d.kind == DefinitionKind::Function)
        .map(|d| (d.qualified_name.clone(), d))
        .collect()
}

fn body_facts(function: Node<'_>, source: &str) -> BodyFacts {
    let mut facts = BodyFacts::default();
    if let Some(body) = function.child_by_field_name("body") {
        gather(body, source, &mut facts);
    }
    facts
}

fn gather(node: Node<'_>, source: &str, facts: &mut BodyFacts) {
    match node.kind() {
        "comment" => return,
        "return_statement" | "yield" => {
            let value = node
                .named_child(0)
                .map(|v| canonical_text(v, source))
                .unwrap_or_default();
            facts.returns.push(format!("{} {value}", node.kind()));
        }
        "call" => {
            if let Some(callee) = node.child_by_field_name("function") {
                facts.calls.insert(canonical_text(callee, source));
            }
        }
        "assignment" | "augmented_assignment" => {
            if let Some(target) = node.child_by_field_name("left") {
                if matches!(target.kind(), "attribute" | "subscript") {
                    facts.mutations.insert(canonical_text(target, source));
                }
            }
        }
        "global_statement" | "nonlocal_statement" | "delete_statement" => {
            facts.mutations.insert(canonical_text(node, source));
        }
        "comparison_operator" | "assert_statement" | "raise_statement" | "integer" | "float" => {
            facts.constraints.push(canonical_text(node, source));
        }
        _ => {}
    }
    let mut cursor = node.walk();
    for child in node.named_children(&mut cursor) {
        if !is_docstring(child) {
            gather(child, source, facts);
        }
    }
}
