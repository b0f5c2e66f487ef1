//! Toy token vocabulary shared by instructions, world descriptions and policy
//! outputs.
//!
//! Layout, in id order: reserved tokens, coordinate tokens `0..=coord_max`,
//! template function words, the world's attribute lexicon, concept names.
//! Template words outside the vocabulary map to the generic token.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synthworld::{AttrId, WorldConfig};

pub type TokenId = u32;

pub const EOS: TokenId = 0;
pub const GENERIC: TokenId = 1;
pub const YES: TokenId = 2;
pub const NO: TokenId = 3;
pub const LBRACKET: TokenId = 4;
pub const COMMA: TokenId = 5;
pub const RBRACKET: TokenId = 6;
const RESERVED: [&str; 7] = ["<eos>", "<w>", "yes", "no", "[", ",", "]"];

/// Words from the instruction templates that get their own token.
pub const FUNCTION_WORDS: &[&str] = &[
    "is",
    "in",
    "the",
    "this",
    "a",
    "of",
    "image",
    "picture",
    "photo",
    "caption",
    "describe",
    "give",
    "provide",
    "present",
    "visible",
    "box",
    "bounding",
    "coordinates",
    "position",
    "detail",
    "personalized",
    "and",
    "for",
    "same",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub coord_offset: u32,
    pub coord_count: u32,
    pub word_offset: u32,
    pub word_count: u32,
    pub attr_offset: u32,
    pub attr_count: u32,
    pub name_offset: u32,
    pub name_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    lookup: HashMap<String, TokenId>,
    pub layout: VocabLayout,
}

impl Vocabulary {
    /// Builds the vocabulary for a world whose concepts carry `names`.
    pub fn new(world: &WorldConfig, names: &[String]) -> Result<Self> {
        let coord_max = world.width.max(world.height);
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let coord_offset = words.len() as u32;
        words.extend((0..=coord_max).map(|c| c.to_string()));
        let word_offset = words.len() as u32;
        words.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        let attr_offset = words.len() as u32;
        let lexicon = world.lexicon();
        words.extend(lexicon.iter().map(|s| s.to_string()));
        let name_offset = words.len() as u32;
        words.extend(names.iter().cloned());

        let mut lookup = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!(
                    "vocabulary word {w:?} must be a single non-empty token"
                )));
            }
            if lookup.insert(w.to_lowercase(), i as TokenId).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "vocabulary word {w:?} appears twice"
                )));
            }
        }
        Ok(Self {
            layout: VocabLayout {
                coord_offset,
                coord_count: coord_max + 1,
                word_offset,
                word_count: FUNCTION_WORDS.len() as u32,
                attr_offset,
                attr_count: lexicon.len() as u32,
                name_offset,
                name_count: names.len() as u32,
            },
            words,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, t: TokenId) -> Option<&str> {
        self.words.get(t as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Case-insensitive lookup.
    pub fn token(&self, word: &str) -> Option<TokenId> {
        self.lookup.get(&word.to_lowercase()).copied()
    }

    pub fn attr_token(&self, a: AttrId) -> TokenId {
        self.layout.attr_offset + TokenId::from(a)
    }

    /// Lexicon entry of an attribute token.
    pub fn attr_of(&self, t: TokenId) -> Option<AttrId> {
        t.checked_sub(self.layout.attr_offset)
            .filter(|&a| a < self.layout.attr_count)
            .and_then(|a| AttrId::try_from(a).ok())
    }

    pub fn coord_token(&self, c: u32) -> Option<TokenId> {
        (c < self.layout.coord_count).then_some(self.layout.coord_offset + c)
    }

    pub fn coord_value(&self, t: TokenId) -> Option<u32> {
        t.checked_sub(self.layout.coord_offset)
            .filter(|&c| c < self.layout.coord_count)
    }

    /// Index of `t` within the name block.
    pub fn name_slot(&self, t: TokenId) -> Option<usize> {
        t.checked_sub(self.layout.name_offset)
            .filter(|&i| i < self.layout.name_count)
            .map(|i| i as usize)
    }

    pub fn name_token(&self, name: &str) -> Option<TokenId> {
        self.token(name).filter(|&t| self.name_slot(t).is_some())
    }

    pub fn is_punctuation(t: TokenId) -> bool {
        matches!(t, LBRACKET | COMMA | RBRACKET)
    }

    /// Splits text into tokens. Brackets and commas are tokens of their own,
    /// other punctuation separates words, unknown words become [`GENERIC`].
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut cur = String::new();
        let flush = |cur: &mut String, out: &mut Vec<TokenId>| {
            if !cur.is_empty() {
                out.push(self.token(cur).unwrap_or(GENERIC));
                cur.clear();
            }
        };
        for ch in text.chars() {
            match ch {
                '[' | ',' | ']' => {
                    flush(&mut cur, &mut out);
                    out.push(match ch {
                        '[' => LBRACKET,
                        ',' => COMMA,
                        _ => RBRACKET,
                    });
                }
                c if c.is_alphanumeric() || c == '_' || c == '-' => cur.push(c),
                _ => flush(&mut cur, &mut out),
            }
        }
        flush(&mut cur, &mut out);
        out
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<oov>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn hash(&self) -> String {
        format!("{:016x}", seed::fnv1a(self.words.join("\u{1f}").as_bytes()))
    }
}

/// Token sequence with an optional single end-of-sequence token at the end.
/// Sequences cut off at the length cap carry no end token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    /// Content tokens followed by the end token.
    pub fn terminated(mut content: Vec<TokenId>) -> Self {
        content.push(EOS);
        Self(content)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Tokens without the trailing end token.
    pub fn content(&self) -> &[TokenId] {
        match self.0.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.0,
        }
    }

    pub fn content_len(&self) -> usize {
        self.content().len()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (i, &t) in self.0.iter().enumerate() {
            if t as usize >= vocab_size {
                return Err(Error::TokenOutOfVocab {
                    token: t,
                    size: vocab_size,
                });
            }
            if t == EOS && i + 1 != self.0.len() {
                return Err(Error::InvalidConfig(format!(
                    "end token at position {i} of a {}-token sequence",
                    self.0.len()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn vocab16() -> Vocabulary {
        let cfg = WorldConfig {
            width: 16,
            height: 16,
            ..Default::default()
        };
        Vocabulary::new(&cfg, &["Alice".to_string(), "Bob".to_string()]).unwrap()
    }

    #[test]
    fn layout_is_contiguous() {
        let v = vocab16();
        let l = v.layout;
        assert_eq!(l.coord_offset, 7);
        assert_eq!(l.coord_count, 17);
        assert_eq!(l.word_offset, l.coord_offset + l.coord_count);
        assert_eq!(l.attr_offset, l.word_offset + l.word_count);
        assert_eq!(l.name_offset, l.attr_offset + l.attr_count);
        assert_eq!(v.len() as u32, l.name_offset + l.name_count);
    }

    #[test]
    fn tokenize_brackets_and_case() {
        let v = vocab16();
        let toks = v.tokenize("the box is [0,0,4,4] end");
        assert_eq!(v.render(&toks), "the box is [ 0 , 0 , 4 , 4 ] <w>");
        assert_eq!(v.tokenize("ALICE"), vec![v.name_token("alice").unwrap()]);
        assert_eq!(v.tokenize("Yes."), vec![YES]);
        assert_eq!(v.tokenize("99"), vec![GENERIC]);
    }

    #[test]
    fn duplicate_words_rejected() {
        let cfg = WorldConfig::default();
        assert!(Vocabulary::new(&cfg, &["red".to_string()]).is_err());
        assert!(Vocabulary::new(&cfg, &["two words".to_string()]).is_err());
    }

    #[test]
    fn sequence_content_and_validation() {
        let s = TokenSequence::terminated(vec![5, 6]);
        assert_eq!(s.content(), &[5, 6]);
        assert!(s.is_terminated());
        assert!(s.validate(10).is_ok());
        assert!(TokenSequence::new(vec![EOS, 5]).validate(10).is_err());
        assert!(TokenSequence::new(vec![11]).validate(10).is_err());
        let cut = TokenSequence::new(vec![5, 6]);
        assert_eq!(cut.content_len(), 2);
    }
}
