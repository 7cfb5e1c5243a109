use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError};
use crate::token::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Inverted index over title, section and body tokens.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avgdl: f64,
    /// term -> (document number, term frequency), ascending by document.
    postings: HashMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self, CorpusError> {
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_lens = Vec::with_capacity(corpus.len());
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        for (n, doc) in corpus.iter().enumerate() {
            let doc = doc?;
            let tokens = doc.indexed_tokens();
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((n as u32, count));
            }
            doc_ids.push(doc.doc_id.clone());
            doc_lens.push(tokens.len() as u32);
        }
        let avgdl = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().map(|&l| l as f64).sum::<f64>() / doc_lens.len() as f64
        };
        Ok(Self {
            params,
            doc_ids,
            doc_lens,
            avgdl,
            postings,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn average_length(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        let i = self
            .doc_ids
            .binary_search_by(|d| d.as_str().cmp(doc_id))
            .ok()?;
        Some(self.doc_lens[i])
    }

    /// Postings for `term` as (DocID, term frequency).
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|p| {
                p.iter()
                    .map(|&(d, tf)| (self.doc_ids[d as usize].as_str(), tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Top `k` documents by BM25; ties broken by DocID. Repeated query
    /// terms contribute once per occurrence.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(d, tf) in list {
                let tf = tf as f64;
                let len = self.doc_lens[d as usize] as f64;
                let norm = k1 * (1.0 - b + b * len / self.avgdl);
                *scores.entry(d).or_insert(0.0) += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        // Document numbers follow DocID order, so ties resolve lexicographically.
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|(d, s)| (self.doc_ids[d as usize].clone(), s))
            .collect()
    }
}
