//! Next-token scorers.
//!
//! Decoding and loss evaluation only see [`LmScorer`]. Two implementations
//! ship here: the count-based [`NgramLm`] and [`RemoteLm`], which forwards
//! contexts to a model server.

mod ngram;
mod remote;

pub use ngram::NgramLm;
pub use remote::{RemoteLm, DEFAULT_TIMEOUT};

use thiserror::Error;

use crate::token::TokenId;

/// Default lower bound on any reported log-probability, ln(1e-12).
pub const DEFAULT_LOGPROB_FLOOR: f64 = -27.631021115928547;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("token id {0} is outside a vocabulary of size {1}")]
    InvalidToken(u32, usize),
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("smoothing constant must be positive, got {0}")]
    InvalidSmoothing(f64),
    #[error("remote scorer timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("remote scorer returned {got} log-probabilities for a vocabulary of {expected}")]
    VocabularyMismatch { expected: usize, got: usize },
    #[error("malformed remote response: {0}")]
    MalformedResponse(String),
    #[error("remote scorer connection failed: {0}")]
    Connection(#[source] std::io::Error),
}

/// Next-token log-probability provider.
///
/// Implementations must be deterministic, return exactly `vocab_size()`
/// finite entries, and be normalized in probability space.
pub trait LmScorer: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError>;
}

impl<T: LmScorer + ?Sized> LmScorer for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        (**self).next_logprobs(context)
    }
}

impl<T: LmScorer + ?Sized> LmScorer for Box<T> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        (**self).next_logprobs(context)
    }
}

pub(crate) fn check_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<(), LmError> {
    match tokens.iter().find(|t| t.index() >= vocab_size) {
        Some(t) => Err(LmError::InvalidToken(t.0, vocab_size)),
        None => Ok(()),
    }
}

/// Every token equally likely.
#[derive(Debug, Clone, Copy)]
pub struct UniformLm {
    vocab_size: usize,
}

impl UniformLm {
    pub fn new(vocab_size: usize) -> Result<Self, LmError> {
        if vocab_size == 0 {
            return Err(LmError::EmptyVocabulary);
        }
        Ok(Self { vocab_size })
    }
}

impl LmScorer for UniformLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        check_tokens(context, self.vocab_size)?;
        Ok(vec![-(self.vocab_size as f64).ln(); self.vocab_size])
    }
}

/// `ln Σ exp(x)` over the given entries.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
