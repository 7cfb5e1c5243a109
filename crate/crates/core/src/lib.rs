//! Generative retrieval and retrieval-augmented generation over a pluggable
//! next-token scorer.
//!
//! The engine decodes ranked lists of document identifiers under a prefix
//! trie constraint, continues in the same stream into references and an
//! answer, builds ranking-oriented training targets, and scores them with
//! teacher-forced losses and standard retrieval and QA metrics.

pub mod config;
pub mod constraint;
pub mod corpus;
pub mod decoder;
pub mod evaluation;
pub mod lm;
pub mod render;
pub mod token;
pub mod training;
pub mod trie;

pub use config::RunConfig;
pub use constraint::{
    allowed_mask, scan_state, step_state, ConstraintState, DecodePhase, TokenMask,
};
pub use corpus::{ingest_corpus, Corpus, CorpusError, Document, GoldRecord};
pub use decoder::{
    generate_closed_book, generate_docid_list, generate_rag, generate_rag_pipeline, score_sequence,
    DecodeCost, DecodeError, RagMode, RagParams, RagResult, RankedDocIds,
};
pub use evaluation::{evaluate_run, EvalReport, TaskCategory};
pub use lm::{LmError, LmScorer, NgramLm, RemoteLm, UniformLm};
pub use token::{TokenId, Vocabulary};
pub use trie::{DocIdTrie, ExclusionSet};
