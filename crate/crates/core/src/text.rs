//! Word-level vocabulary, part-of-speech lexicon and token sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CalecError, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";

const SPECIALS: [&str; 4] = [CLS, SEP, BOS, EOS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Det,
    Adj,
    Noun,
    Aux,
    Verb,
    Prep,
    Other,
}

/// Word to coarse tag mapping used by the rule chunker.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: Vec<(String, Tag)>,
    #[serde(skip)]
    index: HashMap<String, Tag>,
}

impl Lexicon {
    pub fn new(entries: impl IntoIterator<Item = (String, Tag)>) -> Self {
        let mut lex = Lexicon::default();
        for (w, t) in entries {
            if !lex.index.contains_key(&w) {
                lex.index.insert(w.clone(), t);
                lex.entries.push((w, t));
            }
        }
        lex
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.entries.iter().cloned().collect();
    }

    pub fn tag(&self, word: &str) -> Option<Tag> {
        self.index.get(word).copied()
    }

    pub fn words(&self) -> impl Iterator<Item = (&str, Tag)> {
        self.entries.iter().map(|(w, t)| (w.as_str(), *t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Shared encoder/decoder vocabulary: the four markers followed by the
/// lexicon words in lexicon order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_lexicon(lex: &Lexicon) -> Self {
        let words: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(lex.words().map(|(w, _)| w.to_string()))
            .collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids.get(word).copied().ok_or_else(|| CalecError::Tagging(vec![word.to_string()]))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(CalecError::Vocab { id, size: self.words.len() })
    }

    pub fn cls(&self) -> usize {
        0
    }

    pub fn sep(&self) -> usize {
        1
    }

    pub fn bos(&self) -> usize {
        2
    }

    pub fn eos(&self) -> usize {
        3
    }

    pub fn is_marker(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn encode_words(&self, words: &[String]) -> Result<Vec<usize>> {
        let mut unknown = Vec::new();
        let ids: Vec<usize> = words
            .iter()
            .map(|w| match self.ids.get(w) {
                Some(i) => *i,
                None => {
                    unknown.push(w.clone());
                    0
                }
            })
            .collect();
        if unknown.is_empty() {
            Ok(ids)
        } else {
            Err(CalecError::Tagging(unknown))
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.word(i).map(str::to_string)).collect()
    }
}

/// `[CLS] w_1 .. w_M [SEP]` as vocabulary ids, plus the raw content words.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    words: Vec<String>,
}

impl TokenSequence {
    pub fn new(words: &[String], vocab: &Vocab) -> Result<Self> {
        let mut tokens = Vec::with_capacity(words.len() + 2);
        tokens.push(vocab.cls());
        tokens.extend(vocab.encode_words(words)?);
        tokens.push(vocab.sep());
        Ok(Self { tokens, words: words.to_vec() })
    }

    /// Builds from raw ids; ids must already include both markers.
    pub fn from_ids(tokens: Vec<usize>, words: Vec<String>, vocab: &Vocab) -> Result<Self> {
        if tokens.len() < 2 || tokens.len() != words.len() + 2 {
            return Err(CalecError::Shape(format!(
                "{} ids for {} content words",
                tokens.len(),
                words.len()
            )));
        }
        let (cls, sep) = (vocab.cls(), vocab.sep());
        let markers_ok = tokens[0] == cls
            && tokens[tokens.len() - 1] == sep
            && tokens[1..tokens.len() - 1].iter().all(|&t| t != cls && t != sep);
        if !markers_ok {
            return Err(CalecError::Data("markers must appear exactly once at the ends".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(CalecError::Vocab { id: bad, size: vocab.len() });
        }
        Ok(Self { tokens, words })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Content token ids (markers stripped).
    pub fn content(&self) -> &[usize] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Lexicon {
        Lexicon::new([("a".to_string(), Tag::Det), ("dog".to_string(), Tag::Noun)])
    }

    #[test]
    fn vocab_layout_and_roundtrip() {
        let v = Vocab::from_lexicon(&lex());
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("dog").unwrap(), 5);
        assert!(v.is_marker(v.eos()));
        let words = vec!["a".to_string(), "dog".to_string()];
        let seq = TokenSequence::new(&words, &v).unwrap();
        assert_eq!(seq.tokens(), &[0, 4, 5, 1]);
        assert_eq!(v.decode(seq.content()).unwrap(), words);
    }

    #[test]
    fn unknown_words_are_listed() {
        let v = Vocab::from_lexicon(&lex());
        let err = v.encode_words(&["cat".into(), "a".into(), "emu".into()]).unwrap_err();
        match err {
            CalecError::Tagging(w) => assert_eq!(w, vec!["cat", "emu"]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn from_ids_checks_markers() {
        let v = Vocab::from_lexicon(&lex());
        assert!(TokenSequence::from_ids(vec![0, 4, 1], vec!["a".into()], &v).is_ok());
        assert!(TokenSequence::from_ids(vec![0, 0, 1], vec!["a".into()], &v).is_err());
        assert!(TokenSequence::from_ids(vec![0, 9, 1], vec!["a".into()], &v).is_err());
    }
}
