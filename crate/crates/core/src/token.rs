//! Word-level vocabulary and the reference tokenizer.
//!
//! Text is lowercased, split on whitespace, and every maximal run of
//! alphanumeric characters becomes one token while every other
//! non-whitespace character becomes a single-character token. A
//! whitespace-delimited chunk that is exactly the surface form of a
//! structural symbol (`<docid>`, `</docid>`, ...) maps to that symbol.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
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

pub const DOCID_OPEN: TokenId = TokenId(0);
pub const DOCID_CLOSE: TokenId = TokenId(1);
pub const REF_OPEN: TokenId = TokenId(2);
pub const REF_CLOSE: TokenId = TokenId(3);
pub const ANSWER_OPEN: TokenId = TokenId(4);
pub const EOS: TokenId = TokenId(5);
pub const UNK: TokenId = TokenId(6);

/// Surface forms of the reserved symbols, indexed by id.
pub const SPECIAL_SURFACES: [&str; 7] = [
    "<docid>", "</docid>", "<ref>", "</ref>", "<answer>", "<eos>", "<unk>",
];

pub const NUM_SPECIALS: usize = SPECIAL_SURFACES.len();

pub fn is_special(token: TokenId) -> bool {
    token.index() < NUM_SPECIALS
}

fn special_for(chunk: &str) -> Option<TokenId> {
    SPECIAL_SURFACES
        .iter()
        .position(|s| *s == chunk)
        .map(|i| TokenId(i as u32))
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("token id {0} is outside a vocabulary of size {1}")]
    InvalidToken(u32, usize),
    #[error("vocabulary file line {line}: expected special `{expected}`, found `{found}`")]
    BadSpecial {
        line: usize,
        expected: &'static str,
        found: String,
    },
    #[error("vocabulary file line {line}: duplicate or empty token `{token}`")]
    BadToken { line: usize, token: String },
    #[error("vocabulary file has {0} lines; the seven reserved symbols are required")]
    Truncated(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

enum Piece<'a> {
    Special(TokenId),
    Word(&'a str),
}

/// Splits text into structural symbols and raw (not yet lowercased) word pieces.
fn pieces(text: &str) -> impl Iterator<Item = Piece<'_>> {
    text.split_whitespace().flat_map(|chunk| {
        let mut out = Vec::new();
        if let Some(id) = special_for(chunk) {
            out.push(Piece::Special(id));
            return out;
        }
        let mut start: Option<usize> = None;
        for (i, c) in chunk.char_indices() {
            if c.is_alphanumeric() {
                if start.is_none() {
                    start = Some(i);
                }
            } else {
                if let Some(s) = start.take() {
                    out.push(Piece::Word(&chunk[s..i]));
                }
                out.push(Piece::Word(&chunk[i..i + c.len_utf8()]));
            }
        }
        if let Some(s) = start {
            out.push(Piece::Word(&chunk[s..]));
        }
        out
    })
}

/// Tokenizes text into lowercased word and punctuation tokens. Structural
/// surface forms are kept verbatim.
pub fn tokenize(text: &str) -> Vec<String> {
    pieces(text)
        .map(|p| match p {
            Piece::Special(id) => SPECIAL_SURFACES[id.index()].to_string(),
            Piece::Word(w) => w.to_lowercase(),
        })
        .collect()
}

/// Tokenizes text, dropping any chunk that spells a structural symbol.
/// Used for untrusted content (queries, document bodies) that is placed
/// into a decoding context.
pub fn tokenize_plain(text: &str) -> Vec<String> {
    pieces(text)
        .filter_map(|p| match p {
            Piece::Special(_) => None,
            Piece::Word(w) => Some(w.to_lowercase()),
        })
        .collect()
}

/// Normalized, structural-symbol-free rendering of `text`.
pub fn plain_text(text: &str) -> String {
    tokenize_plain(text).join(" ")
}

/// The normalization that `decode(encode(t))` reproduces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
        Self {
            id_to_token,
            token_to_id,
        }
    }

    /// Vocabulary containing only the reserved symbols.
    pub fn specials_only() -> Self {
        Self::from_tokens(std::iter::empty())
    }

    /// Builds a vocabulary from texts alone. Specials come first, then
    /// every observed token in lexicographic order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for piece in pieces(text) {
                if let Piece::Word(w) = piece {
                    words.insert(w.to_lowercase());
                }
            }
        }
        Self::from_tokens(words)
    }

    /// Vocabulary over corpus DocIDs and bodies, the task prefixes, and
    /// `extra_texts`.
    pub fn build(
        corpus: &Corpus,
        extra_texts: &[String],
    ) -> Result<Self, crate::corpus::CorpusError> {
        let mut words = BTreeSet::new();
        let mut add = |text: &str| {
            for piece in pieces(text) {
                if let Piece::Word(w) = piece {
                    words.insert(w.to_lowercase());
                }
            }
        };
        for doc in corpus.iter() {
            let doc = doc?;
            add(&doc.doc_id);
            add(&doc.body);
        }
        for prefix in crate::render::TASK_PREFIXES {
            add(prefix);
        }
        for text in extra_texts {
            add(text);
        }
        Ok(Self::from_tokens(words))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str, VocabError> {
        self.id_to_token
            .get(id.index())
            .map(String::as_str)
            .ok_or(VocabError::InvalidToken(id.0, self.len()))
    }

    pub fn check(&self, id: TokenId) -> Result<(), VocabError> {
        if id.index() < self.len() {
            Ok(())
        } else {
            Err(VocabError::InvalidToken(id.0, self.len()))
        }
    }

    fn lookup(&self, word: &str) -> TokenId {
        match self.token_to_id.get(word) {
            Some(&id) => id,
            None => {
                let lower = word.to_lowercase();
                self.token_to_id.get(&lower).copied().unwrap_or(UNK)
            }
        }
    }

    /// Encodes text, mapping structural surface forms to their reserved ids
    /// and out-of-vocabulary tokens to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        pieces(text)
            .map(|p| match p {
                Piece::Special(id) => id,
                Piece::Word(w) => self.lookup(w),
            })
            .collect()
    }

    /// Encodes untrusted content: structural surface forms are dropped.
    pub fn encode_plain(&self, text: &str) -> Vec<TokenId> {
        pieces(text)
            .filter_map(|p| match p {
                Piece::Special(_) => None,
                Piece::Word(w) => Some(self.lookup(w)),
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, VocabError> {
        let mut out = String::new();
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(t)?);
        }
        Ok(out)
    }

    /// One token per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for token in &self.id_to_token {
            writeln!(w, "{token}")?;
        }
        Ok(())
    }

    /// Reads the one-token-per-line format; the seven reserved symbols
    /// must occupy the first seven lines.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        let mut seen = BTreeSet::new();
        let mut count = 0;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            count += 1;
            if i < NUM_SPECIALS {
                if line != SPECIAL_SURFACES[i] {
                    return Err(VocabError::BadSpecial {
                        line: i + 1,
                        expected: SPECIAL_SURFACES[i],
                        found: line,
                    });
                }
                continue;
            }
            if line.is_empty()
                || line.contains(char::is_whitespace)
                || special_for(&line).is_some()
                || !seen.insert(line.clone())
            {
                return Err(VocabError::BadToken {
                    line: i + 1,
                    token: line,
                });
            }
            tokens.push(line);
        }
        if count < NUM_SPECIALS {
            return Err(VocabError::Truncated(count));
        }
        Ok(Self::from_tokens(tokens))
    }
}
