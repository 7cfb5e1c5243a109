//! Dynamic activation of DocID constraints during generation.
//!
//! A history is inside a DocID span when scanning backward from its end
//! meets `<docid>` before `</docid>`. [`scan_state`] is that literal scan;
//! [`step_state`] is the O(1)-per-token incremental form the decoder uses.

use thiserror::Error;

use crate::token::{is_special, TokenId, DOCID_CLOSE, DOCID_OPEN, EOS};
use crate::trie::{DocIdTrie, ExclusionSet, TrieError};

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("`</docid>` emitted outside a DocID span")]
    UnmatchedClose,
    #[error("`<docid>` emitted inside a DocID span")]
    NestedOpen,
    #[error("reserved token {0} emitted inside a DocID span")]
    SpecialInsideSpan(TokenId),
    #[error("no legal continuation inside DocID span")]
    DeadEnd,
    #[error(transparent)]
    Trie(#[from] TrieError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ConstraintState {
    #[default]
    Unconstrained,
    /// Tokens emitted since the most recent `<docid>`.
    InsideDocId(Vec<TokenId>),
}

impl ConstraintState {
    pub fn is_inside(&self) -> bool {
        matches!(self, Self::InsideDocId(_))
    }
}

/// What the unconstrained part of the output grammar allows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodePhase {
    /// Between DocID spans of a ranked list: open another span or end.
    DocIdList,
    /// Any text; only an unmatched `</docid>` is forbidden.
    FreeText,
}

/// Literal backward scan over the full history.
pub fn scan_state(generated: &[TokenId]) -> ConstraintState {
    for (i, &t) in generated.iter().enumerate().rev() {
        if t == DOCID_CLOSE {
            return ConstraintState::Unconstrained;
        }
        if t == DOCID_OPEN {
            return ConstraintState::InsideDocId(generated[i + 1..].to_vec());
        }
    }
    ConstraintState::Unconstrained
}

/// Incremental equivalent of `scan_state(history + [emitted])`.
pub fn step_state(
    prev: ConstraintState,
    emitted: TokenId,
) -> Result<ConstraintState, ConstraintError> {
    match prev {
        ConstraintState::Unconstrained => match emitted {
            DOCID_OPEN => Ok(ConstraintState::InsideDocId(Vec::new())),
            DOCID_CLOSE => Err(ConstraintError::UnmatchedClose),
            _ => Ok(ConstraintState::Unconstrained),
        },
        ConstraintState::InsideDocId(mut inner) => match emitted {
            DOCID_CLOSE => Ok(ConstraintState::Unconstrained),
            DOCID_OPEN => Err(ConstraintError::NestedOpen),
            t if is_special(t) => Err(ConstraintError::SpecialInsideSpan(t)),
            t => {
                inner.push(t);
                Ok(ConstraintState::InsideDocId(inner))
            }
        },
    }
}

/// Set of admissible next tokens.
///
/// `Only` holds an ascending list; `AllExcept` an ascending list of
/// forbidden ids over the scorer's full vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenMask {
    Only(Vec<TokenId>),
    AllExcept(Vec<TokenId>),
}

impl TokenMask {
    pub fn only(mut tokens: Vec<TokenId>) -> Self {
        tokens.sort_unstable();
        tokens.dedup();
        Self::Only(tokens)
    }

    pub fn all_except(mut tokens: Vec<TokenId>) -> Self {
        tokens.sort_unstable();
        tokens.dedup();
        Self::AllExcept(tokens)
    }

    pub fn allows(&self, t: TokenId) -> bool {
        match self {
            Self::Only(v) => v.binary_search(&t).is_ok(),
            Self::AllExcept(v) => v.binary_search(&t).is_err(),
        }
    }

    /// Removes `tokens` from the admissible set.
    pub fn without(self, tokens: &[TokenId]) -> Self {
        match self {
            Self::Only(v) => Self::Only(v.into_iter().filter(|t| !tokens.contains(t)).collect()),
            Self::AllExcept(mut v) => {
                v.extend_from_slice(tokens);
                Self::all_except(v)
            }
        }
    }

    /// Admissible tokens within a vocabulary of `vocab_size`.
    pub fn tokens(&self, vocab_size: usize) -> Vec<TokenId> {
        match self {
            Self::Only(v) => v
                .iter()
                .copied()
                .filter(|t| t.index() < vocab_size)
                .collect(),
            Self::AllExcept(v) => (0..vocab_size as u32)
                .map(TokenId)
                .filter(|t| v.binary_search(t).is_err())
                .collect(),
        }
    }

    /// The single admissible token, if the mask forces one.
    pub fn forced(&self) -> Option<TokenId> {
        match self {
            Self::Only(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }
}

/// Mask for unconstrained free text: everything but `</docid>`.
pub fn free_text_mask() -> TokenMask {
    TokenMask::AllExcept(vec![DOCID_CLOSE])
}

/// Admissible next tokens for `state`.
///
/// In the DocID-list phase `<docid>` is only offered while at least one
/// DocID remains unexcluded, so every admitted token keeps a complete
/// DocID reachable.
pub fn allowed_mask(
    state: &ConstraintState,
    trie: &DocIdTrie,
    excl: &ExclusionSet,
    phase: DecodePhase,
) -> Result<TokenMask, ConstraintError> {
    match state {
        ConstraintState::InsideDocId(prefix) => {
            let cont = trie.allowed_continuations(prefix, excl)?;
            if cont.is_dead_end() {
                return Err(ConstraintError::DeadEnd);
            }
            let mut tokens = cont.tokens;
            if cont.close_permitted {
                tokens.push(DOCID_CLOSE);
            }
            Ok(TokenMask::only(tokens))
        }
        ConstraintState::Unconstrained => match phase {
            DecodePhase::DocIdList => {
                let mut tokens = vec![EOS];
                if trie.has_available(excl) {
                    tokens.push(DOCID_OPEN);
                }
                Ok(TokenMask::only(tokens))
            }
            DecodePhase::FreeText => Ok(free_text_mask()),
        },
    }
}
