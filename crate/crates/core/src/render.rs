//! Text layouts shared by training examples and decoding contexts.
//!
//! Every rendered string tokenizes to exactly the token stream the decoder
//! builds for the same inputs, so a scorer trained on rendered examples sees
//! the same sequences at inference time.

use crate::corpus::Document;
use crate::token::{plain_text, tokenize_plain, SPECIAL_SURFACES};

pub const RETRIEVE_PREFIX: &str = "retrieve:";
pub const ANSWER_PREFIX: &str = "answer:";
pub const RAG_PREFIX: &str = "rag:";
pub const PSEUDO_QUERY_PREFIX: &str = "pseudo query:";
pub const SUMMARY_PREFIX: &str = "summary:";
pub const RECITE_PREFIX: &str = "recite:";
pub const RELATED_PREFIX: &str = "related:";

pub const TASK_PREFIXES: [&str; 7] = [
    RETRIEVE_PREFIX,
    ANSWER_PREFIX,
    RAG_PREFIX,
    PSEUDO_QUERY_PREFIX,
    SUMMARY_PREFIX,
    RECITE_PREFIX,
    RELATED_PREFIX,
];

/// Tokens per rendered document, header included.
pub const DEFAULT_DOC_BUDGET: usize = 256;

pub fn docid_open() -> &'static str {
    SPECIAL_SURFACES[0]
}

pub fn docid_close() -> &'static str {
    SPECIAL_SURFACES[1]
}

pub fn ref_open() -> &'static str {
    SPECIAL_SURFACES[2]
}

pub fn ref_close() -> &'static str {
    SPECIAL_SURFACES[3]
}

pub fn answer_open() -> &'static str {
    SPECIAL_SURFACES[4]
}

fn join(parts: &[&str]) -> String {
    parts
        .iter()
        .filter(|p| !p.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

/// `prefix` followed by the query with structural symbols removed.
pub fn task_input(prefix: &str, query: &str) -> String {
    join(&[prefix, &plain_text(query)])
}

pub fn retrieval_input(query: &str) -> String {
    task_input(RETRIEVE_PREFIX, query)
}

pub fn closed_book_input(query: &str) -> String {
    join(&[&task_input(ANSWER_PREFIX, query), answer_open()])
}

pub fn docid_span(doc_id: &str) -> String {
    format!("{} {} {}", docid_open(), doc_id, docid_close())
}

pub fn docid_list(doc_ids: &[impl AsRef<str>]) -> String {
    doc_ids
        .iter()
        .map(|d| docid_span(d.as_ref()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses a string of adjacent `<docid> ... </docid>` spans.
///
/// Returns `None` when the text is not a well-formed list.
pub fn parse_docid_list(text: &str) -> Option<Vec<String>> {
    let mut out = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for chunk in text.split_whitespace() {
        match (chunk, current.as_mut()) {
            (c, None) if c == docid_open() => current = Some(Vec::new()),
            (c, Some(inner)) if c == docid_close() => {
                if inner.is_empty() {
                    return None;
                }
                out.push(inner.join(" "));
                current = None;
            }
            (c, Some(_)) if SPECIAL_SURFACES.contains(&c) => return None,
            (c, Some(inner)) => inner.push(c),
            (_, None) => return None,
        }
    }
    current.is_none().then_some(out)
}

/// Header line (the DocID) plus body, truncated at the body tail so the
/// whole rendering fits in `budget` tokens.
pub fn render_document(doc: &Document, budget: usize) -> String {
    let mut tokens = tokenize_plain(&doc.doc_id);
    tokens.truncate(budget);
    let room = budget - tokens.len();
    tokens.extend(tokenize_plain(&doc.body).into_iter().take(room));
    tokens.join(" ")
}

/// Query and retrieved DocIDs as they stand when the documents are injected.
pub fn rag_head(query: &str, doc_ids: &[impl AsRef<str>]) -> String {
    join(&[&task_input(RAG_PREFIX, query), &docid_list(doc_ids)])
}

/// Full context preceding the first reference segment.
pub fn rag_context(
    query: &str,
    doc_ids: &[impl AsRef<str>],
    docs: &[Document],
    budget: usize,
) -> String {
    let rendered: Vec<String> = docs.iter().map(|d| render_document(d, budget)).collect();
    let mut parts = vec![rag_head(query, doc_ids)];
    parts.extend(rendered);
    join(&parts.iter().map(String::as_str).collect::<Vec<_>>())
}

pub fn reference_segment(reference: &str) -> String {
    join(&[ref_open(), &plain_text(reference), ref_close()])
}
