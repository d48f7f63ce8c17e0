//! Shared text normalization.

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whitespace token count; a backend-independent proxy for model tokens.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}
