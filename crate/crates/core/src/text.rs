//! Small text utilities shared by the corpus, normalizer and metrics.

/// Abbreviations that do not end a sentence when the next word is lowercase.
const ABBREVIATIONS: [&str; 3] = ["e.g.", "i.e.", "etc."];

/// Byte offsets one past every sentence-terminating period in `text`.
///
/// A period terminates a sentence when it is followed by whitespace or the
/// end of input, unless it closes one of [`ABBREVIATIONS`] and the next
/// non-whitespace character is lowercase.
pub fn sentence_ends(text: &str) -> Vec<usize> {
    let mut ends = Vec::new();
    for (idx, ch) in text.char_indices() {
        if ch != '.' {
            continue;
        }
        let end = idx + 1;
        let rest = &text[end..];
        match rest.chars().next() {
            None => ends.push(end),
            Some(next) if next.is_whitespace() => {
                if closes_abbreviation(&text[..end]) {
                    let follower = rest.trim_start().chars().next();
                    if follower.is_some_and(char::is_lowercase) {
                        continue;
                    }
                }
                ends.push(end);
            }
            Some(_) => {}
        }
    }
    ends
}

fn closes_abbreviation(prefix: &str) -> bool {
    ABBREVIATIONS.iter().any(|abbr| {
        prefix.len() >= abbr.len()
            && prefix[prefix.len() - abbr.len()..].eq_ignore_ascii_case(abbr)
            && prefix[..prefix.len() - abbr.len()]
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric())
    })
}

/// Splits `text` into consecutive segments, each ending at a sentence
/// boundary except possibly the last. Concatenating the segments yields
/// `text` exactly; whitespace between sentences leads the following segment.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut segments = Vec::new();
    let mut start = 0;
    for end in sentence_ends(text) {
        segments.push(&text[start..end]);
        start = end;
    }
    if start < text.len() {
        segments.push(&text[start..]);
    }
    segments
}

/// Lowercases and collapses all whitespace runs to single spaces.
pub fn canonical(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercase word tokens: maximal runs of alphanumerics and underscores.
/// Punctuation and whitespace both separate tokens and are dropped.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Number of whitespace-separated tokens, the approximation used for all
/// token caps.
pub fn whitespace_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Byte offset just past the `n`-th whitespace token (1-based), or `None`
/// when `text` has fewer than `n` tokens.
pub fn end_of_token(text: &str, n: usize) -> Option<usize> {
    if n == 0 {
        return Some(0);
    }
    let mut seen = 0;
    let mut in_token = false;
    for (idx, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if in_token {
                seen += 1;
                if seen == n {
                    return Some(idx);
                }
            }
            in_token = false;
        } else {
            in_token = true;
        }
    }
    if in_token && seen + 1 == n {
        Some(text.len())
    } else {
        None
    }
}

/// Truncates to at most `max_chars` characters on a char boundary.
pub fn prefix_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}
