use std::collections::BTreeSet;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bm25::Bm25Index;
use super::TrainingError;
use crate::corpus::{Corpus, CorpusError, Document, GoldRecord};
use crate::render::{self, DEFAULT_DOC_BUDGET};
use crate::token::{plain_text, tokenize, tokenize_plain};

/// Noise-sampling probability used when none is configured.
pub const DEFAULT_TAU: f64 = 0.2;
/// BM25 candidates handed to the reranker.
pub const DEFAULT_CANDIDATES: usize = 100;
/// Length of ranked DocID list targets.
pub const DEFAULT_LIST_K: usize = 10;

static STOPWORDS_FILE: &str = include_str!("../../data/stopwords.txt");

pub fn stopwords() -> &'static BTreeSet<&'static str> {
    static SET: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_FILE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "retrieval")]
    Retrieval,
    #[serde(rename = "closed_book")]
    ClosedBook,
    #[serde(rename = "rag_reference")]
    RagReference,
    #[serde(rename = "rag_answer")]
    RagAnswer,
    #[serde(rename = "aux_query2docids")]
    AuxQuery2DocIds,
    #[serde(rename = "aux_summary2docids")]
    AuxSummary2DocIds,
    #[serde(rename = "aux_docid2summary")]
    AuxDocId2Summary,
    #[serde(rename = "aux_docid2related")]
    AuxDocId2Related,
}

impl TaskKind {
    pub fn is_aux(self) -> bool {
        matches!(
            self,
            Self::AuxQuery2DocIds
                | Self::AuxSummary2DocIds
                | Self::AuxDocId2Summary
                | Self::AuxDocId2Related
        )
    }

    /// Tasks whose target is a ranked DocID list.
    pub fn targets_docid_list(self) -> bool {
        matches!(
            self,
            Self::Retrieval
                | Self::AuxQuery2DocIds
                | Self::AuxSummary2DocIds
                | Self::AuxDocId2Related
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub task: TaskKind,
    pub input: String,
    pub target: String,
    #[serde(default)]
    pub noise_flag: bool,
}

impl TrainingExample {
    /// Input, target and end marker as one stream.
    pub fn rendered(&self) -> String {
        format!("{} {} <eos>", self.input, self.target)
    }
}

/// Reorders BM25 candidates for a query.
pub trait Reranker: Send + Sync {
    fn rerank(
        &self,
        query: &str,
        candidates: &[(String, f64)],
        corpus: &Corpus,
    ) -> Result<Vec<String>, CorpusError>;
}

/// Orders candidates by the number of distinct query tokens that occur in
/// the document's title, section or body; BM25 order breaks ties.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapReranker;

impl Reranker for OverlapReranker {
    fn rerank(
        &self,
        query: &str,
        candidates: &[(String, f64)],
        corpus: &Corpus,
    ) -> Result<Vec<String>, CorpusError> {
        let query: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut scored = Vec::with_capacity(candidates.len());
        for (id, _) in candidates {
            let doc = corpus.get(id)?;
            let tokens: BTreeSet<String> = doc.indexed_tokens().into_iter().collect();
            scored.push((query.intersection(&tokens).count(), id.clone()));
        }
        // Stable: equal overlap keeps BM25 order.
        scored.sort_by_key(|s| std::cmp::Reverse(s.0));
        Ok(scored.into_iter().map(|(_, id)| id).collect())
    }
}

/// Labeled DocIDs first, then reranked extras not already present,
/// truncated to `k`.
pub fn merge_ranked(labeled: &[String], reranked: &[String], k: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labeled
        .iter()
        .chain(reranked)
        .filter(|d| seen.insert(d.as_str()))
        .take(k)
        .cloned()
        .collect()
}

/// Candidate generation for ranked-list construction.
pub struct ListBuilder<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a Bm25Index,
    pub reranker: &'a dyn Reranker,
    pub candidates: usize,
}

impl<'a> ListBuilder<'a> {
    pub fn new(corpus: &'a Corpus, index: &'a Bm25Index, reranker: &'a dyn Reranker) -> Self {
        Self {
            corpus,
            index,
            reranker,
            candidates: DEFAULT_CANDIDATES,
        }
    }

    /// BM25 top candidates, reranked.
    pub fn reranked(&self, query: &str) -> Result<Vec<String>, CorpusError> {
        let hits = self.index.retrieve(query, self.candidates);
        self.reranker.rerank(query, &hits, self.corpus)
    }

    /// Ranked DocID list for a query with known relevant documents.
    pub fn construct_ranked_docid_list(
        &self,
        query: &str,
        labeled: &[String],
        k: usize,
    ) -> Result<Vec<String>, TrainingError> {
        if let Some(missing) = labeled.iter().find(|d| !self.corpus.contains(d)) {
            return Err(CorpusError::UnknownDocId(missing.clone()).into());
        }
        if labeled.len() >= k {
            return Ok(merge_ranked(labeled, &[], k));
        }
        Ok(merge_ranked(labeled, &self.reranked(query)?, k))
    }
}

pub fn make_retrieval_example(query: &str, docid_list: &[String]) -> TrainingExample {
    TrainingExample {
        task: TaskKind::Retrieval,
        input: render::retrieval_input(query),
        target: render::docid_list(docid_list),
        noise_flag: false,
    }
}

pub fn make_closed_book_example(query: &str, answer: &str) -> TrainingExample {
    TrainingExample {
        task: TaskKind::ClosedBook,
        input: render::closed_book_input(query),
        target: plain_text(answer),
        noise_flag: false,
    }
}

/// Inputs for one retrieval-augmented training query.
#[derive(Debug, Clone, Copy)]
pub struct RagSample<'a> {
    pub query: &'a str,
    /// Full ranked DocID list that precedes the documents.
    pub docids: &'a [String],
    pub context_docs: &'a [Document],
    pub reference: &'a str,
    pub answer: &'a str,
    pub budget: usize,
}

/// Reference and answer examples for one query. With probability `tau`
/// the answer example sees a random context sentence instead of the gold
/// reference and is flagged as noisy.
pub fn make_rag_examples<R: Rng + ?Sized>(
    sample: &RagSample<'_>,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<TrainingExample>, TrainingError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(TrainingError::InvalidTau(tau));
    }
    let sentences: Vec<&str> = sample
        .context_docs
        .iter()
        .flat_map(|d| d.sentences.iter().map(String::as_str))
        .collect();
    if tau > 0.0 && sentences.is_empty() {
        return Err(TrainingError::NoSentences);
    }
    let context = render::rag_context(
        sample.query,
        sample.docids,
        sample.context_docs,
        sample.budget,
    );
    let noisy = rng.gen_bool(tau);
    let reference = if noisy {
        sentences[rng.gen_range(0..sentences.len())]
    } else {
        sample.reference
    };
    Ok(vec![
        TrainingExample {
            task: TaskKind::RagReference,
            input: format!("{context} {}", render::ref_open()),
            target: plain_text(sample.reference),
            noise_flag: false,
        },
        TrainingExample {
            task: TaskKind::RagAnswer,
            input: format!(
                "{context} {} {}",
                render::reference_segment(reference),
                render::answer_open()
            ),
            target: plain_text(sample.answer),
            noise_flag: noisy,
        },
    ])
}

/// A sentence with stopwords and punctuation removed.
pub fn pseudo_query(sentence: &str) -> String {
    let stop = stopwords();
    let kept: Vec<String> = tokenize_plain(sentence)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric) && !stop.contains(t.as_str()))
        .collect();
    if kept.is_empty() {
        plain_text(sentence)
    } else {
        kept.join(" ")
    }
}

/// First one or two sentences.
pub fn summary(doc: &Document) -> String {
    doc.sentences
        .iter()
        .take(2)
        .cloned()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Most answer-bearing sentence of `doc`, with query overlap as tie-break.
pub fn extract_reference(doc: &Document, answers: &[String], query: &str) -> Option<String> {
    let answer_tokens: BTreeSet<String> = answers.iter().flat_map(|a| tokenize(a)).collect();
    let query_tokens: BTreeSet<String> = tokenize(query).into_iter().collect();
    let mut best: Option<(usize, usize, &String)> = None;
    for s in &doc.sentences {
        let toks: BTreeSet<String> = tokenize(s).into_iter().collect();
        let a = toks.intersection(&answer_tokens).count();
        let q = toks.intersection(&query_tokens).count();
        if best.is_none_or(|(ba, bq, _)| (a, q) > (ba, bq)) {
            best = Some((a, q, s));
        }
    }
    best.map(|(_, _, s)| s.clone())
}

fn sample_documents<R: Rng + ?Sized>(ids: &[&str], count: usize, rng: &mut R) -> Vec<usize> {
    let mut picked = sample(rng, ids.len(), count.min(ids.len())).into_vec();
    picked.sort_unstable();
    picked
}

/// The four DocID-understanding tasks, `per_task_count` documents each.
pub fn make_docid_understanding_examples<R: Rng + ?Sized>(
    builder: &ListBuilder<'_>,
    per_task_count: usize,
    list_k: usize,
    rng: &mut R,
) -> Result<Vec<TrainingExample>, TrainingError> {
    let corpus = builder.corpus;
    if corpus.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    let ids: Vec<&str> = corpus.doc_ids().collect();
    let mut out = Vec::new();
    let tasks = [
        TaskKind::AuxQuery2DocIds,
        TaskKind::AuxSummary2DocIds,
        TaskKind::AuxDocId2Summary,
        TaskKind::AuxDocId2Related,
    ];
    for task in tasks {
        for i in sample_documents(&ids, per_task_count, rng) {
            let doc = corpus.get(ids[i])?;
            if doc.sentences.is_empty() {
                log::warn!("skipping `{}`: no sentences", doc.doc_id);
                continue;
            }
            let labeled = std::slice::from_ref(&doc.doc_id);
            let example = match task {
                TaskKind::AuxQuery2DocIds => {
                    let sentence = &doc.sentences[rng.gen_range(0..doc.sentences.len())];
                    let query = pseudo_query(sentence);
                    let list = builder.construct_ranked_docid_list(&query, labeled, list_k)?;
                    TrainingExample {
                        task,
                        input: render::task_input(render::PSEUDO_QUERY_PREFIX, &query),
                        target: render::docid_list(&list),
                        noise_flag: false,
                    }
                }
                TaskKind::AuxSummary2DocIds => {
                    let text = summary(&doc);
                    let list = builder.construct_ranked_docid_list(&text, labeled, list_k)?;
                    TrainingExample {
                        task,
                        input: render::task_input(render::SUMMARY_PREFIX, &text),
                        target: render::docid_list(&list),
                        noise_flag: false,
                    }
                }
                TaskKind::AuxDocId2Summary => TrainingExample {
                    task,
                    input: render::task_input(render::RECITE_PREFIX, &doc.doc_id),
                    target: plain_text(&summary(&doc)),
                    noise_flag: false,
                },
                TaskKind::AuxDocId2Related => {
                    let mut extras = builder.reranked(&doc.body)?;
                    extras.retain(|d| d != &doc.doc_id);
                    let list = merge_ranked(&[], &extras, list_k);
                    TrainingExample {
                        task,
                        input: render::task_input(render::RELATED_PREFIX, &doc.doc_id),
                        target: render::docid_list(&list),
                        noise_flag: false,
                    }
                }
                _ => unreachable!("only auxiliary tasks are generated here"),
            };
            out.push(example);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactoryConfig {
    pub list_k: usize,
    pub k_context: usize,
    pub budget: usize,
    pub tau: f64,
    pub aux_per_task: usize,
}

impl Default for FactoryConfig {
    fn default() -> Self {
        Self {
            list_k: DEFAULT_LIST_K,
            k_context: 3,
            budget: DEFAULT_DOC_BUDGET,
            tau: DEFAULT_TAU,
            aux_per_task: 0,
        }
    }
}

/// Every supervised example for the gold records, followed by the
/// auxiliary tasks.
pub fn build_training_set<R: Rng + ?Sized>(
    builder: &ListBuilder<'_>,
    golds: &[GoldRecord],
    config: &FactoryConfig,
    rng: &mut R,
) -> Result<Vec<TrainingExample>, TrainingError> {
    let mut out = Vec::new();
    for gold in golds {
        let labeled = gold.provenance();
        let list = builder.construct_ranked_docid_list(
            &gold.input,
            &labeled,
            config.list_k.max(labeled.len()),
        )?;
        out.push(make_retrieval_example(&gold.input, &list));
        let Some(answer) = gold.answers.first() else {
            continue;
        };
        out.push(make_closed_book_example(&gold.input, answer));

        let context_docs: Vec<Document> = list
            .iter()
            .take(config.k_context)
            .map(|id| builder.corpus.get(id).map(|d| d.into_owned()))
            .collect::<Result<_, _>>()?;
        let source = labeled.first().or(list.first());
        let reference = match source {
            Some(id) => extract_reference(&*builder.corpus.get(id)?, &gold.answers, &gold.input),
            None => None,
        };
        let Some(reference) = reference else {
            log::warn!(
                "query `{}`: no reference sentence available, RAG examples skipped",
                gold.query_id
            );
            continue;
        };
        let sample = RagSample {
            query: &gold.input,
            docids: &list,
            context_docs: &context_docs,
            reference: &reference,
            answer,
            budget: config.budget,
        };
        match make_rag_examples(&sample, config.tau, rng) {
            Ok(examples) => out.extend(examples),
            Err(TrainingError::NoSentences) => {
                log::warn!(
                    "query `{}`: context has no sentences, RAG examples skipped",
                    gold.query_id
                )
            }
            Err(e) => return Err(e),
        }
    }
    if config.aux_per_task > 0 && !builder.corpus.is_empty() {
        out.extend(make_docid_understanding_examples(
            builder,
            config.aux_per_task,
            config.list_k,
            rng,
        )?);
    }
    Ok(out)
}
