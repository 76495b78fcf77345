//! Text normalization shared by exact matching, fuzzy matching and hashing.

use unicode_normalization::UnicodeNormalization;

/// Lowercase, NFC-normalize, map every non-alphanumeric character to a space,
/// collapse whitespace and trim.
///
/// ```
/// use pqa_core::text::normalize_text;
/// assert_eq!(normalize_text("Apple iPhone 13 (128 GB, Blue)"), "apple iphone 13 128 gb blue");
/// ```
pub fn normalize_text(raw: &str) -> String {
    let lowered: String = raw.nfc().flat_map(char::to_lowercase).nfc().collect();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Tokens of the normalized form of `raw`.
pub fn tokens(raw: &str) -> Vec<String> {
    normalize_text(raw)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// A token of the raw text together with its byte span in the raw text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpannedToken {
    pub norm: String,
    pub start: usize,
    pub end: usize,
}

/// Splits `raw` on non-alphanumeric characters, keeping the byte span of each
/// piece so that matches found on normalized tokens can be mapped back.
pub fn spanned_tokens(raw: &str) -> Vec<SpannedToken> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in raw.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            push_spanned(&mut out, raw, s, i);
        }
    }
    if let Some(s) = start {
        push_spanned(&mut out, raw, s, raw.len());
    }
    out
}

fn push_spanned(out: &mut Vec<SpannedToken>, raw: &str, start: usize, end: usize) {
    let norm = normalize_text(&raw[start..end]);
    // A raw piece can normalize to several tokens (rare lowercase expansions).
    for t in norm.split(' ').filter(|t| !t.is_empty()) {
        out.push(SpannedToken {
            norm: t.to_owned(),
            start,
            end,
        });
    }
}
