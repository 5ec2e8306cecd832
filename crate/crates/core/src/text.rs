//! Word counting and verbatim matching.
//!
//! Every word limit in the pipelines is measured with [`word_count`], and every
//! grounding check (quotes, aspect spans, evidence excerpts) goes through
//! [`verbatim_contains`].

use std::borrow::Cow;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextError {
    #[error("needle must not be empty")]
    EmptyNeedle,
}

/// Number of maximal runs of non-whitespace characters.
///
/// Hyphenated compounds and punctuation-attached tokens count as one word.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Rewrites CRLF line endings as LF. Borrows when nothing changes.
pub fn normalize_newlines(text: &str) -> Cow<'_, str> {
    if !text.contains("\r\n") {
        return Cow::Borrowed(text);
    }
    Cow::Owned(text.replace("\r\n", "\n"))
}

/// Byte-exact substring test after line-ending normalization of both sides.
///
/// No case folding and no whitespace collapsing.
pub fn verbatim_contains(haystack: &str, needle: &str) -> Result<bool, TextError> {
    if needle.is_empty() {
        return Err(TextError::EmptyNeedle);
    }
    let haystack = normalize_newlines(haystack);
    let needle = normalize_newlines(needle);
    Ok(haystack.contains(needle.as_ref()))
}

/// Convenience form of [`verbatim_contains`] that treats an empty needle as a miss.
pub fn is_verbatim(haystack: &str, needle: &str) -> bool {
    verbatim_contains(haystack, needle).unwrap_or(false)
}
