//! Final-answer extraction and canonicalization.

use std::ops::Range;

use regex::Regex;

pub const DEFAULT_MARKER: &str = "The answer is";

/// Trim, lowercase, collapse internal whitespace.
pub fn canonical(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone)]
pub enum AnswerExtractor {
    /// Span after the last occurrence of the marker, up to the end of that
    /// line, without a trailing period.
    Marker(String),
    /// Last match of the pattern; capture group 1 if present.
    Pattern(Regex),
}

impl Default for AnswerExtractor {
    fn default() -> Self {
        AnswerExtractor::Marker(DEFAULT_MARKER.into())
    }
}

impl AnswerExtractor {
    pub fn marker(m: impl Into<String>) -> Self {
        AnswerExtractor::Marker(m.into())
    }

    pub fn pattern(p: &str) -> Result<Self, regex::Error> {
        Regex::new(p).map(AnswerExtractor::Pattern)
    }

    /// Byte range of the answer within `text`.
    pub fn span(&self, text: &str) -> Option<Range<usize>> {
        match self {
            AnswerExtractor::Marker(m) => {
                let start = text.rfind(m.as_str())? + m.len();
                let rest = &text[start..];
                let line_end = rest.find('\n').unwrap_or(rest.len());
                let line = &rest[..line_end];
                let lead = line.len() - line.trim_start_matches(|c: char| c.is_whitespace() || c == ':').len();
                let body = line[lead..].trim_end().trim_end_matches('.').trim_end();
                (!body.is_empty()).then(|| start + lead..start + lead + body.len())
            }
            AnswerExtractor::Pattern(re) => {
                let caps = re.captures_iter(text).last()?;
                let m = caps.get(1).or_else(|| caps.get(0))?;
                (!m.as_str().trim().is_empty()).then(|| m.range())
            }
        }
    }

    pub fn extract(&self, text: &str) -> Option<String> {
        self.span(text).map(|r| text[r].to_string())
    }
}
