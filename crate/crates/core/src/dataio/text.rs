//! Cleanup of product titles and descriptions before tokenization.

use std::sync::LazyLock;

use regex::{Captures, Regex};

static TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"</?[A-Za-z][^<>]*>").expect("tag pattern"));

// Numeric references may omit the trailing semicolon ("L&#39" in scraped listings).
static CHAR_REF: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"&#(?:[xX]([0-9A-Fa-f]{1,6})|([0-9]{1,7}));?|&(amp|lt|gt|quot|apos|nbsp);")
        .expect("entity pattern")
});

/// Strips HTML tags, decodes character references and normalizes whitespace.
///
/// Tags become a single space so that `a<br>b` keeps its word boundary.
/// References that do not name a valid scalar value are left as written.
/// The transform is applied until it reaches a fixed point, which makes the
/// function idempotent even for doubly escaped input like `&#38;#39;`.
pub fn clean_text(raw: &str) -> String {
    let mut current = clean_once(raw);
    loop {
        let next = clean_once(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

fn clean_once(raw: &str) -> String {
    let untagged = TAG.replace_all(raw, " ");
    let decoded = CHAR_REF.replace_all(&untagged, |caps: &Captures<'_>| decode(caps));
    collapse_whitespace(&decoded)
}

fn decode(caps: &Captures<'_>) -> String {
    let whole = caps.get(0).expect("match").as_str();
    let code = if let Some(hex) = caps.get(1) {
        u32::from_str_radix(hex.as_str(), 16).ok()
    } else if let Some(dec) = caps.get(2) {
        dec.as_str().parse::<u32>().ok()
    } else {
        let named = match caps.get(3).map(|m| m.as_str()) {
            Some("amp") => '&',
            Some("lt") => '<',
            Some("gt") => '>',
            Some("quot") => '"',
            Some("apos") => '\'',
            Some("nbsp") => '\u{a0}',
            _ => return whole.to_string(),
        };
        return named.to_string();
    };
    match code.filter(|&c| c != 0).and_then(char::from_u32) {
        Some(c) => c.to_string(),
        None => whole.to_string(),
    }
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}
