//! Linearized signature summaries of Python source.
//!
//! Definitions are read from a tree-sitter concrete syntax tree. Classes are
//! rendered as `class <Name>`, functions as `def <qualified>(<params>)` with
//! annotations, defaults and decorators dropped. Methods and nested functions
//! are qualified by their enclosing definitions, e.g. `def DB.query(self, sql)`.

use serde::{Deserialize, Serialize};
use tree_sitter::{Node, Parser, Tree};

pub const SEPARATOR: &str = " | ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureSummary {
    pub entries: Vec<String>,
    pub rendered: String,
    /// Set when the source had syntax errors and only the recoverable
    /// definitions were summarized.
    #[serde(default)]
    pub parse_degraded: bool,
}

impl SignatureSummary {
    pub fn new(entries: Vec<String>, parse_degraded: bool) -> Self {
        let rendered = entries.join(SEPARATOR);
        Self {
            entries,
            rendered,
            parse_degraded,
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), false)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AstError {
    #[error("unsupported language {0:?}")]
    UnsupportedLanguage(String),
    #[error("parser failed to produce a tree")]
    ParserFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefinitionKind {
    Class,
    Function,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parameter {
    /// Bare name, keeping a `*` or `**` prefix for variadic parameters.
    pub name: String,
    pub annotation: Option<String>,
}

/// A class or function definition found in the tree.
#[derive(Debug, Clone)]
pub struct Definition<'tree> {
    pub kind: DefinitionKind,
    pub qualified_name: String,
    pub parameters: Vec<Parameter>,
    pub return_annotation: Option<String>,
    pub node: Node<'tree>,
}

impl Definition<'_> {
    pub fn render(&self) -> String {
        match self.kind {
            DefinitionKind::Class => format!("class {}", self.qualified_name),
            DefinitionKind::Function => {
                let params: Vec<&str> = self.parameters.iter().map(|p| p.name.as_str()).collect();
                let mut out = format!("def {}({})", self.qualified_name, params.join(", "));
                if let Some(ret) = &self.return_annotation {
                    out.push_str(" -> ");
                    out.push_str(ret);
                }
                out
            }
        }
    }
}

pub fn is_supported(language: &str) -> bool {
    matches!(language.to_ascii_lowercase().as_str(), "python" | "py")
}

/// Parses Python source. Syntax errors are represented inside the tree.
pub fn parse_python(source: &str) -> Result<Tree, AstError> {
    let mut parser = Parser::new();
    parser
        .set_language(&tree_sitter_python::LANGUAGE.into())
        .map_err(|_| AstError::ParserFailed)?;
    parser.parse(source, None).ok_or(AstError::ParserFailed)
}

/// Extracts the signature summary of `source`.
pub fn extract_signatures(source: &str, language: &str) -> Result<SignatureSummary, AstError> {
    if !is_supported(language) {
        return Err(AstError::UnsupportedLanguage(language.to_string()));
    }
    let tree = parse_python(source)?;
    let entries = definitions(&tree, source)
        .iter()
        .map(Definition::render)
        .collect();
    Ok(SignatureSummary::new(entries, tree.root_node().has_error()))
}

/// All class and function definitions in source order.
pub fn definitions<'t>(tree: &'t Tree, source: &str) -> Vec<Definition<'t>> {
    let mut out = Vec::new();
    let mut scope = Vec::new();
    collect(tree.root_node(), source, &mut scope, &mut out);
    out
}

fn collect<'t>(
    node: Node<'t>,
    source: &str,
    scope: &mut Vec<String>,
    out: &mut Vec<Definition<'t>>,
) {
    let kind = match node.kind() {
        "class_definition" => Some(DefinitionKind::Class),
        "function_definition" => Some(DefinitionKind::Function),
        _ => None,
    };
    let name = node
        .child_by_field_name("name")
        .map(|n| text(n, source).to_string())
        .filter(|n| !n.is_empty());

    if let (Some(kind), Some(name)) = (kind, name) {
        let mut qualified = scope.join(".");
        if !qualified.is_empty() {
            qualified.push('.');
        }
        qualified.push_str(&name);

        let (parameters, return_annotation) = match kind {
            DefinitionKind::Class => (Vec::new(), None),
            DefinitionKind::Function => (
                node.child_by_field_name("parameters")
                    .map(|p| parameters(p, source))
                    .unwrap_or_default(),
                node.child_by_field_name("return_type")
                    .map(|r| canonical_text(r, source)),
            ),
        };
        out.push(Definition {
            kind,
            qualified_name: qualified,
            parameters,
            return_annotation,
            node,
        });

        scope.push(name);
        let mut cursor = node.walk();
        for child in node.named_children(&mut cursor) {
            collect(child, source, scope, out);
        }
        scope.pop();
        return;
    }

    let mut cursor = node.walk();
    for child in node.named_children(&mut cursor) {
        collect(child, source, scope, out);
    }
}

fn parameters(list: Node<'_>, source: &str) -> Vec<Parameter> {
    let mut out = Vec::new();
    let mut cursor = list.walk();
    for child in list.named_children(&mut cursor) {
        let annotation = child
            .child_by_field_name("type")
            .map(|t| canonical_text(t, source));
        let name_node = match child.kind() {
            "identifier" | "list_splat_pattern" | "dictionary_splat_pattern" => Some(child),
            "default_parameter" | "typed_default_parameter" => child.child_by_field_name("name"),
            "typed_parameter" => child.named_child(0),
            _ => None,
        };
        if let Some(n) = name_node {
            out.push(Parameter {
                name: canonical_text(n, source),
                annotation,
            });
        }
    }
    out
}

pub(crate) fn text<'s>(node: Node<'_>, source: &'s str) -> &'s str {
    node.utf8_text(source.as_bytes()).unwrap_or("")
}

/// Token text of `node` with layout removed: leaves are joined with a single
/// space only where two word characters would otherwise fuse, after commas,
/// and around `|` and `->`.
pub fn canonical_text(node: Node<'_>, source: &str) -> String {
    let mut leaves = Vec::new();
    push_leaves(node, source, &mut leaves);
    let mut out = String::new();
    for leaf in leaves {
        let spaced = matches!(leaf, "|" | "->" | "=" | "or" | "and" | "not" | "in" | "is");
        let fuse = out.chars().next_back().is_some_and(is_word)
            && leaf.chars().next().is_some_and(is_word);
        if !out.is_empty()
            && (fuse || spaced || out.ends_with(',') || out.ends_with(" |") || out.ends_with(" ->"))
        {
            out.push(' ');
        }
        out.push_str(leaf);
    }
    out
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn push_leaves<'s>(node: Node<'_>, source: &'s str, out: &mut Vec<&'s str>) {
    if node.child_count() == 0 || node.kind() == "string" {
        let t = text(node, source);
        if !t.is_empty() {
            out.push(t);
        }
        return;
    }
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        if child.kind() != "comment" {
            push_leaves(child, source, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn summary(src: &str) -> SignatureSummary {
        extract_signatures(src, "python").unwrap()
    }

    #[test]
    fn connect_db_example() {
        let src =
            "def connect(host, port):\n    return socket(host, port)\n\nclass DB:\n    pass\n";
        assert_eq!(summary(src).rendered, "def connect(host, port) | class DB");
    }

    #[test]
    fn empty_source() {
        let s = summary("");
        assert!(s.entries.is_empty());
        assert_eq!(s.rendered, "");
        assert!(!s.parse_degraded);
    }

    #[test]
    fn methods_are_qualified() {
        let s = summary("class DB:\n    def query(self, sql):\n        pass\n");
        assert_eq!(s.entries, ["class DB", "def DB.query(self, sql)"]);
    }

    #[test]
    fn annotations_defaults_and_decorators_are_stripped() {
        let src = "@cache\ndef load(path: Union[str, Path], mode='r', *args, retries: int = 3, **kwargs) -> Optional[Dict[str,int]]:\n    pass\n";
        assert_eq!(
            summary(src).rendered,
            "def load(path, mode, *args, retries, **kwargs) -> Optional[Dict[str, int]]"
        );
    }

    #[test]
    fn nested_and_async_definitions() {
        let src = "async def outer(a):\n    def inner(b):\n        class Local:\n            pass\n    return inner\n";
        assert_eq!(
            summary(src).entries,
            [
                "def outer(a)",
                "def outer.inner(b)",
                "class outer.inner.Local"
            ]
        );
    }

    #[test]
    fn keyword_and_positional_markers_are_omitted() {
        assert_eq!(
            summary("def f(a, /, b, *, c):\n    pass\n").rendered,
            "def f(a, b, c)"
        );
    }

    #[test]
    fn unsupported_language() {
        assert!(matches!(
            extract_signatures("fn main() {}", "rust"),
            Err(AstError::UnsupportedLanguage(_))
        ));
    }

    #[test]
    fn syntax_errors_degrade_gracefully() {
        let src = "def ok(a):\n    return a\n\ndef broken(x:\n    pass\n\nclass Fine:\n    pass\n";
        let s = summary(src);
        assert!(s.parse_degraded);
        assert!(
            s.entries.contains(&"def ok(a)".to_string()),
            "{:?}",
            s.entries
        );
    }

    #[test]
    fn reformatting_does_not_change_summary() {
        let a = "def f(a: Dict[str, int], b=1) -> List[int]:\n    return [a]\n";
        let b =
            "def f(\n    a : Dict[ str,int ],\n    b = 1,\n)->List[ int ]:\n        return [a]\n";
        assert_eq!(summary(a), summary(b));
    }

    proptest! {
        #[test]
        fn rendered_round_trips_and_names_are_verbatim(
            names in proptest::collection::vec("[a-z][a-z0-9_]{0,6}", 1..5),
            params in proptest::collection::vec("[a-z][a-z0-9]{0,5}", 0..4),
        ) {
            let mut src = String::new();
            for (i, n) in names.iter().enumerate() {
                src.push_str(&format!("def {n}_{i}({}):\n    pass\n\n", params.join(", ")));
            }
            let s = summary(&src);
            let split: Vec<String> = if s.rendered.is_empty() {
                Vec::new()
            } else {
                s.rendered.split(SEPARATOR).map(String::from).collect()
            };
            prop_assert_eq!(&split, &s.entries);
            for p in &params {
                prop_assert!(src.contains(p.as_str()));
            }
        }
    }
}
