use std::collections::HashMap;

use super::{check_tokens, LmError, LmScorer, DEFAULT_LOGPROB_FLOOR};
use crate::token::TokenId;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    /// Ascending by token.
    next: Vec<(TokenId, u64)>,
}

/// Add-α smoothed n-gram model with backoff to the longest context that
/// has been observed.
///
/// For the chosen context `h`, `P(w | h) = (c(h, w) + α) / (c(h) + α·V)`.
/// When nothing was observed at all the distribution is uniform.
#[derive(Debug, Clone)]
pub struct NgramLm {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    floor: f64,
    /// Keyed by context of length 0..order.
    tables: HashMap<Vec<TokenId>, ContextCounts>,
}

impl NgramLm {
    pub fn train<S: AsRef<[TokenId]>>(
        texts: &[S],
        order: usize,
        alpha: f64,
        vocab_size: usize,
    ) -> Result<Self, LmError> {
        if vocab_size == 0 {
            return Err(LmError::EmptyVocabulary);
        }
        if order == 0 {
            return Err(LmError::InvalidOrder);
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LmError::InvalidSmoothing(alpha));
        }
        let mut raw: HashMap<Vec<TokenId>, HashMap<TokenId, u64>> = HashMap::new();
        for text in texts {
            let text = text.as_ref();
            check_tokens(text, vocab_size)?;
            for (i, &w) in text.iter().enumerate() {
                for k in 0..order.min(i + 1) {
                    let ctx = text[i - k..i].to_vec();
                    *raw.entry(ctx).or_default().entry(w).or_insert(0) += 1;
                }
            }
        }
        let tables = raw
            .into_iter()
            .map(|(ctx, next)| {
                let mut next: Vec<_> = next.into_iter().collect();
                next.sort_unstable();
                let total = next.iter().map(|&(_, c)| c).sum();
                (ctx, ContextCounts { total, next })
            })
            .collect();
        Ok(Self {
            order,
            alpha,
            vocab_size,
            floor: DEFAULT_LOGPROB_FLOOR,
            tables,
        })
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Count of `w` after exactly `context`.
    pub fn count(&self, context: &[TokenId], w: TokenId) -> u64 {
        self.tables
            .get(context)
            .and_then(|c| {
                c.next
                    .binary_search_by_key(&w, |&(t, _)| t)
                    .ok()
                    .map(|i| c.next[i].1)
            })
            .unwrap_or(0)
    }

    fn matched(&self, context: &[TokenId]) -> Option<&ContextCounts> {
        let max = (self.order - 1).min(context.len());
        (0..=max)
            .rev()
            .map(|k| &context[context.len() - k..])
            .find_map(|h| self.tables.get(h).filter(|c| c.total > 0))
    }
}

impl LmScorer for NgramLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let tail_start = context.len().saturating_sub(self.order - 1);
        check_tokens(&context[tail_start..], self.vocab_size)?;
        let v = self.vocab_size as f64;
        let (total, next): (u64, &[(TokenId, u64)]) = match self.matched(context) {
            Some(c) => (c.total, &c.next),
            None => (0, &[]),
        };
        let denom = total as f64 + self.alpha * v;
        let base = (self.alpha / denom).ln().max(self.floor);
        let mut out = vec![base; self.vocab_size];
        for &(t, c) in next {
            out[t.index()] = ((c as f64 + self.alpha) / denom).ln().max(self.floor);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().copied().map(TokenId).collect()
    }

    #[test]
    fn bigram_counts() {
        let (a, b) = (7, 8);
        let alpha = 0.1;
        let v = 10;
        let lm = NgramLm::train(&[t(&[a, b]), t(&[a, b])], 2, alpha, v).unwrap();
        let lp = lm.next_logprobs(&t(&[a])).unwrap();
        let expected = (2.0 + alpha) / (2.0 + alpha * v as f64);
        assert!((lp[b as usize].exp() - expected).abs() < 1e-12);
        let other = alpha / (2.0 + alpha * v as f64);
        assert!((lp[0].exp() - other).abs() < 1e-12);
    }

    #[test]
    fn no_data_is_uniform() {
        let lm = NgramLm::train::<Vec<TokenId>>(&[], 3, 0.1, 4).unwrap();
        let lp = lm.next_logprobs(&t(&[1, 2])).unwrap();
        for x in lp {
            assert!((x.exp() - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn unigram_hand_count() {
        // 10 tokens: id 0 x4, id 1 x3, id 2 x2, id 3 x1; V = 5.
        let text = t(&[0, 1, 0, 2, 1, 0, 3, 2, 1, 0]);
        let lm = NgramLm::train(&[text], 1, 0.5, 5).unwrap();
        let lp = lm.next_logprobs(&t(&[3, 3])).unwrap();
        let expected = [4.5 / 12.5, 3.5 / 12.5, 2.5 / 12.5, 1.5 / 12.5, 0.5 / 12.5];
        for (x, e) in lp.iter().zip(expected) {
            assert!((x.exp() - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backs_off_to_shorter_context() {
        let lm = NgramLm::train(&[t(&[1, 2, 3])], 3, 0.1, 5).unwrap();
        // Context [4, 2] unseen as a bigram context; [2] was seen once before 3.
        let lp = lm.next_logprobs(&t(&[4, 2])).unwrap();
        assert!((lp[3].exp() - 1.1 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn unique_bigram_probability() {
        let alpha = 0.1;
        let v = 6;
        let lm = NgramLm::train(&[t(&[1, 2, 3, 4, 5])], 2, alpha, v).unwrap();
        for w in [[1, 2], [2, 3], [3, 4], [4, 5]] {
            let lp = lm.next_logprobs(&t(&[w[0]])).unwrap();
            let expected = (1.0 + alpha) / (1.0 + alpha * v as f64);
            assert!((lp[w[1] as usize].exp() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            NgramLm::train::<Vec<TokenId>>(&[], 2, 0.1, 0),
            Err(LmError::EmptyVocabulary)
        ));
        assert!(matches!(
            NgramLm::train::<Vec<TokenId>>(&[], 0, 0.1, 3),
            Err(LmError::InvalidOrder)
        ));
        assert!(matches!(
            NgramLm::train::<Vec<TokenId>>(&[], 2, 0.0, 3),
            Err(LmError::InvalidSmoothing(_))
        ));
        assert!(matches!(
            NgramLm::train(&[t(&[9])], 2, 0.1, 3),
            Err(LmError::InvalidToken(9, 3))
        ));
        let lm = NgramLm::train(&[t(&[1])], 2, 0.1, 3).unwrap();
        assert!(lm.next_logprobs(&t(&[5])).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalized_and_floored(
            texts in proptest::collection::vec(proptest::collection::vec(0u32..12, 0..20), 0..6),
            context in proptest::collection::vec(0u32..12, 0..6),
            order in 1usize..5,
        ) {
            let texts: Vec<Vec<TokenId>> = texts.into_iter().map(|x| t(&x)).collect();
            let lm = NgramLm::train(&texts, order, 0.1, 12).unwrap();
            let lp = lm.next_logprobs(&t(&context)).unwrap();
            let again = lm.next_logprobs(&t(&context)).unwrap();
            proptest::prop_assert_eq!(&lp, &again);
            let sum: f64 = lp.iter().map(|x| x.exp()).sum();
            proptest::prop_assert!((sum - 1.0).abs() <= 1e-6);
            proptest::prop_assert!(lp.iter().all(|&x| x.is_finite() && x >= DEFAULT_LOGPROB_FLOOR));
        }
    }
}
