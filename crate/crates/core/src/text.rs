//! String normalisation shared by metrics, EM/IN tagging and the baseline
//! text pipeline.

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases, collapses whitespace runs to one space and strips leading and
/// trailing punctuation.
pub fn normalize_value(s: &str) -> String {
    let lowered = s.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_matches(is_punct).trim().to_string()
}

/// Whitespace + punctuation splitter: alphanumeric runs stay together, every
/// other non-space character becomes its own token.
pub fn simple_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in s.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if is_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Tokenises with [`simple_tokens`], lowercases and rejoins with single spaces.
pub fn tokenize_lower(s: &str) -> String {
    simple_tokens(&s.to_lowercase()).join(" ")
}
