//! Training targets and teacher-forced objectives.

mod bm25;
mod examples;
mod loss;

use std::io::{BufRead, Write};

use thiserror::Error;

pub use bm25::{Bm25Index, Bm25Params};
pub use examples::{
    build_training_set, extract_reference, make_closed_book_example,
    make_docid_understanding_examples, make_rag_examples, make_retrieval_example, merge_ranked,
    pseudo_query, stopwords, summary, FactoryConfig, ListBuilder, OverlapReranker, RagSample,
    Reranker, TaskKind, TrainingExample, DEFAULT_CANDIDATES, DEFAULT_LIST_K, DEFAULT_TAU,
};
pub use loss::{combined_loss, sequence_loss, Lambdas, LossBreakdown};

use crate::corpus::CorpusError;
use crate::decoder::DecodeError;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("tau must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("loss weights must be finite and non-negative, got {0:?}")]
    InvalidLambda(Lambdas),
    #[error("noise sampling needs at least one sentence in the context documents")]
    NoSentences,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One JSON object per line. Lines carrying a `run_config` key are skipped.
pub fn read_examples<R: BufRead>(reader: R) -> Result<Vec<TrainingExample>, TrainingError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| TrainingError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if value.get("run_config").is_some() {
            continue;
        }
        out.push(
            serde_json::from_value(value).map_err(|e| TrainingError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn write_examples<W: Write>(mut w: W, examples: &[TrainingExample]) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let ex = vec![TrainingExample {
            task: TaskKind::AuxQuery2DocIds,
            input: "pseudo query: x".into(),
            target: "<docid> a # b </docid>".into(),
            noise_flag: false,
        }];
        let mut buf = b"{\"run_config\":{}}\n".to_vec();
        write_examples(&mut buf, &ex).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"task\":\"aux_query2docids\""));
        assert_eq!(read_examples(&buf[..]).unwrap(), ex);
        assert!(matches!(
            read_examples(&b"{\"task\":\"bogus\"}\n"[..]),
            Err(TrainingError::Parse { line: 1, .. })
        ));
    }
}
