//! Effective run settings, echoed into every output artifact.

use serde::{Deserialize, Serialize};

use crate::decoder::{
    RagParams, DEFAULT_ANSWER_CAP, DEFAULT_K_CONTEXT, DEFAULT_K_RETRIEVE, DEFAULT_REFERENCE_CAP,
};
use crate::lm::DEFAULT_LOGPROB_FLOOR;
use crate::render::DEFAULT_DOC_BUDGET;
use crate::training::{
    Bm25Params, FactoryConfig, Lambdas, DEFAULT_CANDIDATES, DEFAULT_LIST_K, DEFAULT_TAU,
};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: Option<String>,
    pub gold: Option<String>,
    pub k_retrieve: usize,
    pub k_context: usize,
    pub tau: f64,
    pub lambda: Lambdas,
    pub order: usize,
    pub alpha: f64,
    pub bm25: Bm25Params,
    pub budget: usize,
    pub candidates: usize,
    pub list_k: usize,
    pub aux_per_task: usize,
    pub seed: u64,
    pub remote_lm: Option<String>,
    pub logprob_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            gold: None,
            k_retrieve: DEFAULT_K_RETRIEVE,
            k_context: DEFAULT_K_CONTEXT,
            tau: DEFAULT_TAU,
            lambda: Lambdas::default(),
            order: DEFAULT_ORDER,
            alpha: DEFAULT_ALPHA,
            bm25: Bm25Params::default(),
            budget: DEFAULT_DOC_BUDGET,
            candidates: DEFAULT_CANDIDATES,
            list_k: DEFAULT_LIST_K,
            aux_per_task: 0,
            seed: DEFAULT_SEED,
            remote_lm: None,
            logprob_floor: DEFAULT_LOGPROB_FLOOR,
        }
    }
}

impl RunConfig {
    pub fn rag_params(&self) -> RagParams {
        RagParams {
            k_retrieve: self.k_retrieve,
            k_context: self.k_context,
            budget: self.budget,
            reference_cap: DEFAULT_REFERENCE_CAP,
            answer_cap: DEFAULT_ANSWER_CAP,
        }
    }

    pub fn factory(&self) -> FactoryConfig {
        FactoryConfig {
            list_k: self.list_k,
            k_context: self.k_context,
            budget: self.budget,
            tau: self.tau,
            aux_per_task: self.aux_per_task,
        }
    }

    /// Header line for JSONL outputs.
    pub fn header(&self) -> String {
        serde_json::json!({ "run_config": self }).to_string()
    }
}
