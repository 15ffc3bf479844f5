//! Rule-based shallow chunking and chunk-span validation.

use std::fmt;
use std::str::FromStr;

use crate::error::{CalecError, Result};
use crate::text::{Lexicon, Tag};

/// End-exclusive spans over content tokens forming a sorted, contiguous,
/// non-overlapping cover.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkSpans(Vec<(usize, usize)>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SpanViolation {
    Empty { span: usize },
    OutOfBounds { span: usize, end: usize, len: usize },
    Overlap { span: usize },
    Gap { token: usize },
}

impl fmt::Display for SpanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpanViolation::Empty { span } => write!(f, "span {span} is empty"),
            SpanViolation::OutOfBounds { span, end, len } => {
                write!(f, "span {span} ends at {end} beyond {len} content tokens")
            }
            SpanViolation::Overlap { span } => write!(f, "span {span} overlaps its predecessor"),
            SpanViolation::Gap { token } => write!(f, "coverage gap at token {token}"),
        }
    }
}

/// Checks order, bounds and coverage; reports the first violation.
pub fn validate_spans(spans: &[(usize, usize)], content_len: usize) -> Result<(), SpanViolation> {
    let mut next = 0;
    for (k, &(s, e)) in spans.iter().enumerate() {
        if s >= e {
            return Err(SpanViolation::Empty { span: k });
        }
        if e > content_len {
            return Err(SpanViolation::OutOfBounds { span: k, end: e, len: content_len });
        }
        if s < next {
            return Err(SpanViolation::Overlap { span: k });
        }
        if s > next {
            return Err(SpanViolation::Gap { token: next });
        }
        next = e;
    }
    if next < content_len {
        return Err(SpanViolation::Gap { token: next });
    }
    Ok(())
}

impl ChunkSpans {
    pub fn new(spans: Vec<(usize, usize)>, content_len: usize) -> Result<Self> {
        validate_spans(&spans, content_len).map_err(|v| CalecError::Span(v.to_string()))?;
        Ok(Self(spans))
    }

    pub fn singletons(content_len: usize) -> Self {
        Self((0..content_len).map(|i| (i, i + 1)).collect())
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn content_len(&self) -> usize {
        self.0.last().map_or(0, |s| s.1)
    }

    /// Chunk index of every content token.
    pub fn chunk_of_tokens(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.content_len());
        for (k, &(s, e)) in self.0.iter().enumerate() {
            out.extend(std::iter::repeat_n(k, e - s));
        }
        out
    }

    /// Parses the `s:e,s:e` dataset field.
    pub fn parse(field: &str, content_len: usize) -> Result<Self> {
        let spans: Vec<(usize, usize)> = field.parse::<RawSpans>()?.0;
        Self::new(spans, content_len)
    }

    pub fn to_field(&self) -> String {
        self.0.iter().map(|(s, e)| format!("{s}:{e}")).collect::<Vec<_>>().join(",")
    }
}

struct RawSpans(Vec<(usize, usize)>);

impl FromStr for RawSpans {
    type Err = CalecError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CalecError::Span(format!("malformed span field `{s}`"));
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (a, b) = part.trim().split_once(':').ok_or_else(bad)?;
            out.push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?));
        }
        Ok(RawSpans(out))
    }
}

/// Greedy chunking: `(det|adj)* noun+` form noun chunks, `(aux|verb)+` form
/// verb chunks, everything else is a singleton.
pub fn rule_chunk(words: &[String], lexicon: &Lexicon) -> Result<ChunkSpans> {
    if words.is_empty() {
        return Err(CalecError::Span("cannot chunk an empty sentence".into()));
    }
    let unknown: Vec<String> = words.iter().filter(|w| lexicon.tag(w).is_none()).cloned().collect();
    if !unknown.is_empty() {
        return Err(CalecError::Tagging(unknown));
    }
    let tags: Vec<Tag> = words.iter().map(|w| lexicon.tag(w).expect("checked")).collect();
    let n = tags.len();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < n {
        let start = i;
        match tags[i] {
            Tag::Det | Tag::Adj | Tag::Noun => {
                let mut j = i;
                while j < n && matches!(tags[j], Tag::Det | Tag::Adj) {
                    j += 1;
                }
                let nouns_from = j;
                while j < n && tags[j] == Tag::Noun {
                    j += 1;
                }
                i = if j > nouns_from { j } else { start + 1 };
            }
            Tag::Aux | Tag::Verb => {
                while i < n && matches!(tags[i], Tag::Aux | Tag::Verb) {
                    i += 1;
                }
            }
            Tag::Prep | Tag::Other => i += 1,
        }
        spans.push((start, i));
    }
    Ok(ChunkSpans(spans))
}
