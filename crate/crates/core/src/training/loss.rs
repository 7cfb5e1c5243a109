use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::examples::{TaskKind, TrainingExample};
use super::TrainingError;
use crate::decoder::{score_sequence, DecodeError};
use crate::lm::LmScorer;
use crate::token::{Vocabulary, EOS};

/// Weights of the retrieval, closed-book, RAG and auxiliary objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub rank: f64,
    pub gen: f64,
    pub rag: f64,
    pub aux: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            rank: 1.0,
            gen: 1.0,
            rag: 1.0,
            aux: 1.0,
        }
    }
}

impl Lambdas {
    pub fn new(rank: f64, gen: f64, rag: f64, aux: f64) -> Result<Self, TrainingError> {
        let l = Self {
            rank,
            gen,
            rag,
            aux,
        };
        if [rank, gen, rag, aux]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(TrainingError::InvalidLambda(l));
        }
        Ok(l)
    }
}

impl std::str::FromStr for Lambdas {
    type Err = String;

    /// Parses `rank,gen,rag,aux`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<_, _>>()?;
        let [r, g, a, x] = parts[..] else {
            return Err(format!(
                "expected four comma-separated weights, got {}",
                parts.len()
            ));
        };
        Lambdas::new(r, g, a, x).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rank: f64,
    pub l_gen: f64,
    pub l_ref: f64,
    pub l_ans: f64,
    pub l_rag: f64,
    pub l_aux: f64,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn from_components(
        l_rank: f64,
        l_gen: f64,
        l_ref: f64,
        l_ans: f64,
        l_aux: f64,
        lambdas: Lambdas,
    ) -> Self {
        let l_rag = l_ref + l_ans;
        Self {
            l_rank,
            l_gen,
            l_ref,
            l_ans,
            l_rag,
            l_aux,
            combined: lambdas.rank * l_rank
                + lambdas.gen * l_gen
                + lambdas.rag * l_rag
                + lambdas.aux * l_aux,
        }
    }

    /// Same components under different weights.
    pub fn reweighted(&self, lambdas: Lambdas) -> Self {
        Self::from_components(
            self.l_rank,
            self.l_gen,
            self.l_ref,
            self.l_ans,
            self.l_aux,
            lambdas,
        )
    }
}

/// Teacher-forced negative log-likelihood of `target <eos>` after `input`.
pub fn sequence_loss<L: LmScorer + ?Sized>(
    lm: &L,
    vocab: &Vocabulary,
    example: &TrainingExample,
) -> Result<f64, DecodeError> {
    let context = vocab.encode(&example.input);
    let mut target = vocab.encode(&example.target);
    if target.is_empty() {
        return Err(DecodeError::EmptyTarget);
    }
    target.push(EOS);
    // Clamp the -0.0 a fully determined target would give.
    Ok((-score_sequence(lm, &context, &target, None)?).max(0.0))
}

/// Per-objective NLL sums over a batch. Noise-flagged answer examples count
/// with weight `tau`, clean ones with weight 1.
pub fn combined_loss<L: LmScorer + ?Sized>(
    lm: &L,
    vocab: &Vocabulary,
    batch: &[TrainingExample],
    lambdas: Lambdas,
    tau: f64,
) -> Result<LossBreakdown, TrainingError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(TrainingError::InvalidTau(tau));
    }
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|ex| sequence_loss(lm, vocab, ex))
        .collect::<Result<_, _>>()?;
    let (mut rank, mut gen, mut reference, mut answer, mut aux) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (ex, loss) in batch.iter().zip(losses) {
        match ex.task {
            TaskKind::Retrieval => rank += loss,
            TaskKind::ClosedBook => gen += loss,
            TaskKind::RagReference => reference += loss,
            TaskKind::RagAnswer if ex.noise_flag => answer += tau * loss,
            TaskKind::RagAnswer => answer += loss,
            _ => aux += loss,
        }
    }
    Ok(LossBreakdown::from_components(
        rank, gen, reference, answer, aux, lambdas,
    ))
}
