//! Token inventory and a deterministic whitespace + greedy longest-match tokenizer.
//!
//! Ids `0..7` are reserved for the special tokens, ordinary tokens follow in
//! file order, and the two mention flags used for disambiguation inputs are
//! appended after the last ordinary token. Word-internal pieces carry a `##`
//! prefix, so decoding can rejoin them without a separator.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`Vocabulary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const SOS: TokenId = TokenId(0);
    pub const EOS: TokenId = TokenId(1);
    pub const MENTION_OPEN: TokenId = TokenId(2);
    pub const MENTION_CLOSE: TokenId = TokenId(3);
    pub const LINK_OPEN: TokenId = TokenId(4);
    pub const LINK_CLOSE: TokenId = TokenId(5);
    pub const UNK: TokenId = TokenId(6);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Number of specials at the front of every vocabulary.
pub const NUM_LEADING_SPECIALS: usize = 7;

const LEADING_SPECIALS: [&str; NUM_LEADING_SPECIALS] = ["<s>", "</s>", "[", "]", "(", ")", "<unk>"];
const START_ENT: &str = "[START_ENT]";
const END_ENT: &str = "[END_ENT]";

/// Marker for word-internal pieces.
pub const CONTINUATION_PREFIX: &str = "##";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    num_ordinary: usize,
    max_piece_chars: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary token strings (specials are implicit).
    pub fn new<I, S>(ordinary: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = LEADING_SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for (i, s) in LEADING_SPECIALS.iter().enumerate() {
            index.insert(s.to_string(), TokenId(i as u32));
        }
        let mut max_piece_chars = 0;
        for (line, tok) in ordinary.into_iter().enumerate() {
            let tok: String = tok.into();
            check_ordinary(&tok).map_err(|reason| Error::InvalidVocabToken {
                line: line + 1,
                token: tok.clone(),
                reason,
            })?;
            if index.contains_key(&tok) {
                return Err(Error::InvalidVocabToken {
                    line: line + 1,
                    token: tok,
                    reason: "duplicate token",
                });
            }
            let piece = tok.strip_prefix(CONTINUATION_PREFIX).unwrap_or(&tok);
            max_piece_chars = max_piece_chars.max(piece.chars().count());
            index.insert(tok.clone(), TokenId(tokens.len() as u32));
            tokens.push(tok);
        }
        let num_ordinary = tokens.len() - NUM_LEADING_SPECIALS;
        for s in [START_ENT, END_ENT] {
            index.insert(s.to_string(), TokenId(tokens.len() as u32));
            tokens.push(s.to_string());
        }
        Ok(Self {
            tokens,
            index,
            num_ordinary,
            max_piece_chars,
        })
    }

    /// Builds a whole-word vocabulary from the distinct whitespace-separated
    /// words of `texts`, in first-seen order. Words that are not valid tokens
    /// (e.g. ones containing markup brackets) are skipped.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut seen = std::collections::HashSet::new();
        let mut words = Vec::new();
        for text in texts {
            for w in text.split_whitespace() {
                if check_ordinary(w).is_ok() && seen.insert(w) {
                    words.push(w.to_string());
                }
            }
        }
        Self::new(words).expect("words are pre-validated and deduplicated")
    }

    /// Parses the vocabulary file format: one ordinary token per line.
    pub fn from_lines(text: &str) -> Result<Self> {
        Self::new(text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)))
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for tok in self.ordinary_tokens() {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn ordinary_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens[NUM_LEADING_SPECIALS..NUM_LEADING_SPECIALS + self.num_ordinary]
            .iter()
            .map(String::as_str)
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start_ent(&self) -> TokenId {
        TokenId((NUM_LEADING_SPECIALS + self.num_ordinary) as u32)
    }

    pub fn end_ent(&self) -> TokenId {
        TokenId((NUM_LEADING_SPECIALS + self.num_ordinary + 1) as u32)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id.index() < NUM_LEADING_SPECIALS || id == self.start_ent() || id == self.end_ent()
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token_str(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id.index())
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id: id.0,
                size: self.tokens.len(),
            })
    }

    pub fn is_continuation(&self, id: TokenId) -> bool {
        !self.is_special(id)
            && self
                .tokens
                .get(id.index())
                .is_some_and(|t| t.starts_with(CONTINUATION_PREFIX))
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_with_offsets(text)
            .into_iter()
            .map(|(id, _)| id)
            .collect()
    }

    /// Tokenizes `text`, pairing each token with its character range in `text`.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<(TokenId, Range<usize>)> {
        let mut out = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                i += 1;
                continue;
            }
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() {
                i += 1;
            }
            self.encode_word(&chars[start..i], start, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &[char], base: usize, out: &mut Vec<(TokenId, Range<usize>)>) {
        let mut pos = 0;
        let mut buf = String::new();
        while pos < word.len() {
            let longest = self.max_piece_chars.min(word.len() - pos);
            let mut matched = None;
            for len in (1..=longest).rev() {
                buf.clear();
                if pos > 0 {
                    buf.push_str(CONTINUATION_PREFIX);
                }
                buf.extend(&word[pos..pos + len]);
                if let Some(&id) = self.index.get(&buf) {
                    if !self.is_special(id) {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            let (id, len) = matched.unwrap_or((TokenId::UNK, 1));
            out.push((id, base + pos..base + pos + len));
            pos += len;
        }
    }

    /// Joins tokens with single spaces, gluing `##` pieces to their predecessor.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token_str(id)?;
            match tok.strip_prefix(CONTINUATION_PREFIX) {
                Some(piece) if !self.is_special(id) => out.push_str(piece),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }
}

fn check_ordinary(tok: &str) -> std::result::Result<(), &'static str> {
    if tok.is_empty() {
        return Err("empty token");
    }
    if tok.chars().any(char::is_whitespace) {
        return Err("token contains whitespace");
    }
    if tok == CONTINUATION_PREFIX {
        return Err("continuation marker without a piece");
    }
    if LEADING_SPECIALS.contains(&tok) || tok == START_ENT || tok == END_ENT {
        return Err("token collides with a reserved special");
    }
    Ok(())
}
