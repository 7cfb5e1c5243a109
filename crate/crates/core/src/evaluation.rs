//! Retrieval and downstream metrics, and run-level reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GoldRecord;
use crate::decoder::DecodeRecord;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined: provenance is empty")]
    EmptyProvenance,
    #[error("metric undefined: no gold answers")]
    EmptyGold,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no gold record for query `{0}`")]
    MissingGold(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase, drop ASCII punctuation and the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn normalized_tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

fn check_provenance(provenance: &[String]) -> Result<BTreeSet<&str>, EvalError> {
    let set: BTreeSet<&str> = provenance.iter().map(String::as_str).collect();
    if set.is_empty() {
        return Err(EvalError::EmptyProvenance);
    }
    Ok(set)
}

/// `|top-k(retrieved) ∩ provenance| / |provenance|`.
pub fn recall_at_k(
    retrieved: &[String],
    provenance: &[String],
    k: usize,
) -> Result<f64, EvalError> {
    let gold = check_provenance(provenance)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let hits: BTreeSet<&str> = retrieved
        .iter()
        .take(k)
        .map(String::as_str)
        .filter(|d| gold.contains(d))
        .collect();
    Ok(hits.len() as f64 / gold.len() as f64)
}

/// Recall at the provenance size.
pub fn r_precision(retrieved: &[String], provenance: &[String]) -> Result<f64, EvalError> {
    let r = check_provenance(provenance)?.len();
    recall_at_k(retrieved, provenance, r)
}

fn check_golds(golds: &[String]) -> Result<(), EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    Ok(())
}

fn best_over<F: Fn(&str) -> f64>(golds: &[String], f: F) -> Result<f64, EvalError> {
    check_golds(golds)?;
    Ok(golds.iter().map(|g| f(g)).fold(0.0, f64::max))
}

pub fn exact_match(prediction: &str, golds: &[String]) -> Result<f64, EvalError> {
    let p = normalize_answer(prediction);
    best_over(golds, |g| f64::from(u8::from(normalize_answer(g) == p)))
}

/// Classification-style agreement; same matching as [`exact_match`].
pub fn accuracy(prediction: &str, golds: &[String]) -> Result<f64, EvalError> {
    exact_match(prediction, golds)
}

fn f_measure(overlap: usize, pred_len: usize, gold_len: usize) -> f64 {
    match (pred_len, gold_len) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ if overlap == 0 => 0.0,
        _ => {
            let p = overlap as f64 / pred_len as f64;
            let r = overlap as f64 / gold_len as f64;
            2.0 * p * r / (p + r)
        }
    }
}

fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, pred.len(), gold.len())
}

/// Bag-of-tokens F1, best over golds.
pub fn f1(prediction: &str, golds: &[String]) -> Result<f64, EvalError> {
    let p = normalized_tokens(prediction);
    best_over(golds, |g| token_f1(&p, &normalized_tokens(g)))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure with equal weight on precision and recall, best over golds.
pub fn rouge_l(prediction: &str, golds: &[String]) -> Result<f64, EvalError> {
    let p = normalized_tokens(prediction);
    best_over(golds, |g| {
        let g = normalized_tokens(g);
        f_measure(lcs(&p, &g), p.len(), g.len())
    })
}

/// Whether some gold occurs as a contiguous token run of the prediction.
pub fn has_answer(prediction: &str, golds: &[String]) -> Result<f64, EvalError> {
    let p = normalized_tokens(prediction);
    best_over(golds, |g| {
        let g = normalized_tokens(g);
        let found = !g.is_empty() && p.windows(g.len()).any(|w| w == g.as_slice());
        f64::from(u8::from(found))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    Retrieval,
    Qa,
    Classification,
    Dialogue,
    LongForm,
}

impl TaskCategory {
    pub fn metric_names(self) -> &'static [&'static str] {
        match self {
            Self::Retrieval => &["r_precision", "recall@1", "recall@5", "recall@10"],
            Self::Qa => &["em", "f1", "has_answer"],
            Self::Classification => &["accuracy"],
            Self::Dialogue => &["f1"],
            Self::LongForm => &["rouge_l"],
        }
    }
}

/// Max over provenance groups, skipping empty ones.
fn best_group<F: Fn(&[String]) -> Result<f64, EvalError>>(
    gold: &GoldRecord,
    f: F,
) -> Result<f64, EvalError> {
    let mut best: Option<f64> = None;
    for group in gold.provenance_groups.iter().filter(|g| !g.is_empty()) {
        let v = f(group)?;
        best = Some(best.map_or(v, |b: f64| b.max(v)));
    }
    best.ok_or(EvalError::EmptyProvenance)
}

fn score_query(
    pred: &DecodeRecord,
    gold: &GoldRecord,
    category: TaskCategory,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut out = BTreeMap::new();
    match category {
        TaskCategory::Retrieval => {
            out.insert(
                "r_precision".into(),
                best_group(gold, |g| r_precision(&pred.docids, g))?,
            );
            for k in [1, 5, 10] {
                out.insert(
                    format!("recall@{k}"),
                    best_group(gold, |g| recall_at_k(&pred.docids, g, k))?,
                );
            }
        }
        TaskCategory::Qa => {
            out.insert("em".into(), exact_match(&pred.answer, &gold.answers)?);
            out.insert("f1".into(), f1(&pred.answer, &gold.answers)?);
            out.insert(
                "has_answer".into(),
                has_answer(&pred.answer, &gold.answers)?,
            );
        }
        TaskCategory::Classification => {
            out.insert("accuracy".into(), accuracy(&pred.answer, &gold.answers)?);
        }
        TaskCategory::Dialogue => {
            out.insert("f1".into(), f1(&pred.answer, &gold.answers)?);
        }
        TaskCategory::LongForm => {
            out.insert("rouge_l".into(), rouge_l(&pred.answer, &gold.answers)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub query_id: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub category: TaskCategory,
    /// Predictions read.
    pub total_queries: usize,
    /// Predictions that contributed to the aggregates.
    pub scored_queries: usize,
    pub skipped: Vec<String>,
    pub warnings: Vec<String>,
    /// Mean of each metric over scored queries.
    pub metrics: BTreeMap<String, f64>,
    pub per_query: Vec<QueryScores>,
}

/// Joins predictions with golds by query id and aggregates the category's
/// metrics.
pub fn evaluate_run(
    predictions: &[DecodeRecord],
    golds: &[GoldRecord],
    category: TaskCategory,
) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &GoldRecord> =
        golds.iter().map(|g| (g.query_id.as_str(), g)).collect();
    let joined: Vec<(&DecodeRecord, &GoldRecord)> = predictions
        .iter()
        .map(|p| {
            by_id
                .get(p.query_id.as_str())
                .map(|g| (p, *g))
                .ok_or_else(|| EvalError::MissingGold(p.query_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let scored: Vec<Result<BTreeMap<String, f64>, EvalError>> = joined
        .par_iter()
        .map(|(p, g)| score_query(p, g, category))
        .collect();

    let mut warnings = Vec::new();
    if predictions.is_empty() {
        warnings.push("prediction file is empty".to_string());
    }
    let mut skipped = Vec::new();
    let mut per_query = Vec::new();
    for ((p, _), result) in joined.iter().zip(scored) {
        match result {
            Ok(metrics) => per_query.push(QueryScores {
                query_id: p.query_id.clone(),
                metrics,
            }),
            Err(e @ (EvalError::EmptyProvenance | EvalError::EmptyGold)) => {
                warnings.push(format!("query `{}` skipped: {e}", p.query_id));
                skipped.push(p.query_id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let metrics = category
        .metric_names()
        .iter()
        .map(|&name| {
            let mean = if per_query.is_empty() {
                0.0
            } else {
                per_query.iter().map(|q| q.metrics[name]).sum::<f64>() / per_query.len() as f64
            };
            (name.to_string(), mean)
        })
        .collect();
    Ok(EvalReport {
        category,
        total_queries: predictions.len(),
        scored_queries: per_query.len(),
        skipped,
        warnings,
        metrics,
        per_query,
    })
}

/// Decode records, one per line; lines carrying a `run_config` key are
/// skipped.
pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<DecodeRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| EvalError::Parse {
            line: i + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if value.get("run_config").is_some() {
            continue;
        }
        out.push(serde_json::from_value(value).map_err(|e| parse(e.to_string()))?);
    }
    Ok(out)
}

/// Tab-separated per-query table, one column per metric.
pub fn write_per_query_tsv<W: Write>(mut w: W, report: &EvalReport) -> std::io::Result<()> {
    let names = report.category.metric_names();
    writeln!(w, "query_id\t{}", names.join("\t"))?;
    for q in &report.per_query {
        let cells: Vec<String> = names
            .iter()
            .map(|n| format!("{:.6}", q.metrics[*n]))
            .collect();
        writeln!(w, "{}\t{}", q.query_id, cells.join("\t"))?;
    }
    Ok(())
}
