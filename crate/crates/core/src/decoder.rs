//! Greedy constrained generation.
//!
//! A [`Session`] owns one growing token stream. The constraint state is
//! advanced incrementally with every token, and the session records how
//! many scorer calls it made and how many stream tokens the scorer had to
//! consume, which is the cost measure used to compare continuous and
//! pipeline RAG decoding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{
    allowed_mask, free_text_mask, scan_state, step_state, ConstraintError, ConstraintState,
    DecodePhase, TokenMask,
};
use crate::corpus::{Corpus, CorpusError, Document};
use crate::lm::{log_sum_exp, LmError, LmScorer};
use crate::render;
use crate::token::{
    is_special, TokenId, VocabError, Vocabulary, ANSWER_OPEN, DOCID_CLOSE, DOCID_OPEN, EOS,
    REF_CLOSE, REF_OPEN, UNK,
};
use crate::trie::{DocIdTrie, ExclusionSet, TrieError};

pub const DEFAULT_K_RETRIEVE: usize = 10;
pub const DEFAULT_K_CONTEXT: usize = 3;
pub const DEFAULT_REFERENCE_CAP: usize = 64;
pub const DEFAULT_ANSWER_CAP: usize = 64;

/// Structural tokens that may not appear inside a reference segment.
const REFERENCE_FORBIDDEN: [TokenId; 4] = [DOCID_OPEN, REF_OPEN, ANSWER_OPEN, EOS];
/// Structural tokens that may not appear inside an answer.
const ANSWER_FORBIDDEN: [TokenId; 4] = [DOCID_OPEN, REF_OPEN, REF_CLOSE, ANSWER_OPEN];

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("DocID trie is empty")]
    EmptyTrie,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mask admits no token within the scorer vocabulary")]
    EmptyMask,
    #[error("target token at position {0} is not admitted by the mask")]
    TargetOutsideMask(usize),
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("generated DocID span does not end on a corpus DocID")]
    IncompleteDocId,
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Trie(#[from] TrieError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeCost {
    pub scorer_calls: u64,
    /// Stream tokens consumed by the scorer, counting each token once per
    /// session that had to process it.
    pub context_tokens: u64,
}

impl std::ops::Add for DecodeCost {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            scorer_calls: self.scorer_calls + rhs.scorer_calls,
            context_tokens: self.context_tokens + rhs.context_tokens,
        }
    }
}

/// Ranked list produced by constrained decoding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedDocIds {
    pub docids: Vec<String>,
    /// Mask-renormalized log-probability of each `<docid> ... </docid>` span.
    pub per_docid_logprob: Vec<f64>,
}

impl RankedDocIds {
    pub fn len(&self) -> usize {
        self.docids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RagMode {
    Continuous,
    Pipeline,
}

impl std::str::FromStr for RagMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "pipeline" => Ok(Self::Pipeline),
            other => Err(format!(
                "unknown mode `{other}` (expected continuous or pipeline)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagParams {
    pub k_retrieve: usize,
    pub k_context: usize,
    /// Token budget per rendered document.
    pub budget: usize,
    pub reference_cap: usize,
    pub answer_cap: usize,
}

impl Default for RagParams {
    fn default() -> Self {
        Self {
            k_retrieve: DEFAULT_K_RETRIEVE,
            k_context: DEFAULT_K_CONTEXT,
            budget: render::DEFAULT_DOC_BUDGET,
            reference_cap: DEFAULT_REFERENCE_CAP,
            answer_cap: DEFAULT_ANSWER_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagResult {
    pub docids: RankedDocIds,
    pub context_docids: Vec<String>,
    pub references: Vec<String>,
    pub answer: String,
    /// Every token the decoder emitted; injected documents are not part of it.
    pub token_trace: Vec<TokenId>,
    pub decode_cost: DecodeCost,
    /// Retrieval produced nothing, so decoding went straight to the answer.
    pub empty_retrieval: bool,
}

/// Greedy choice among admitted tokens, lowest id on ties. Returns the
/// token and its log-probability renormalized over the admitted set.
pub fn greedy_pick(logprobs: &[f64], mask: &TokenMask) -> Option<(TokenId, f64)> {
    let allowed = mask.tokens(logprobs.len());
    let mut best: Option<TokenId> = None;
    for &t in &allowed {
        match best {
            Some(b) if logprobs[t.index()] <= logprobs[b.index()] => {}
            _ => best = Some(t),
        }
    }
    let best = best?;
    let norm = log_sum_exp(allowed.iter().map(|t| logprobs[t.index()]));
    Some((best, logprobs[best.index()] - norm))
}

/// One uninterrupted generation stream.
pub struct Session<'a, L: LmScorer + ?Sized> {
    lm: &'a L,
    history: Vec<TokenId>,
    trace: Vec<TokenId>,
    state: ConstraintState,
    processed: usize,
    cost: DecodeCost,
}

impl<'a, L: LmScorer + ?Sized> Session<'a, L> {
    pub fn new(lm: &'a L, context: Vec<TokenId>) -> Self {
        let state = scan_state(&context);
        Self {
            lm,
            history: context,
            trace: Vec::new(),
            state,
            processed: 0,
            cost: DecodeCost::default(),
        }
    }

    pub fn history(&self) -> &[TokenId] {
        &self.history
    }

    pub fn trace(&self) -> &[TokenId] {
        &self.trace
    }

    pub fn state(&self) -> &ConstraintState {
        &self.state
    }

    pub fn cost(&self) -> DecodeCost {
        self.cost
    }

    /// Appends a generated token.
    pub fn push(&mut self, t: TokenId) -> Result<(), DecodeError> {
        self.advance(t)?;
        self.trace.push(t);
        Ok(())
    }

    /// Appends context tokens (documents) that are not part of the trace.
    pub fn inject(&mut self, tokens: &[TokenId]) -> Result<(), DecodeError> {
        for &t in tokens {
            self.advance(t)?;
        }
        Ok(())
    }

    fn advance(&mut self, t: TokenId) -> Result<(), DecodeError> {
        let prev = std::mem::take(&mut self.state);
        self.state = step_state(prev, t)?;
        self.history.push(t);
        Ok(())
    }

    fn score(&mut self) -> Result<Vec<f64>, DecodeError> {
        self.cost.scorer_calls += 1;
        self.cost.context_tokens += (self.history.len() - self.processed) as u64;
        self.processed = self.history.len();
        Ok(self.lm.next_logprobs(&self.history)?)
    }

    /// Greedy choice under `mask`. A forced token costs no scorer call and
    /// has renormalized log-probability 0.
    pub fn choose(&mut self, mask: &TokenMask) -> Result<(TokenId, f64), DecodeError> {
        if let Some(t) = mask.forced() {
            return Ok((t, 0.0));
        }
        let lp = self.score()?;
        greedy_pick(&lp, mask).ok_or(DecodeError::EmptyMask)
    }
}

/// Continues `session` with a ranked DocID list of at most `k` entries.
pub fn decode_docid_list<L: LmScorer + ?Sized>(
    session: &mut Session<'_, L>,
    trie: &DocIdTrie,
    k: usize,
) -> Result<RankedDocIds, DecodeError> {
    let mut excl = ExclusionSet::new();
    let mut ranked = RankedDocIds::default();
    let mut span_lp = 0.0;
    while ranked.len() < k {
        let mask = allowed_mask(session.state(), trie, &excl, DecodePhase::DocIdList)?;
        let (t, lp) = session.choose(&mask)?;
        match t {
            EOS if !session.state().is_inside() => break,
            DOCID_CLOSE => {
                let ConstraintState::InsideDocId(prefix) = session.state() else {
                    return Err(ConstraintError::UnmatchedClose.into());
                };
                let docid = trie
                    .docid_at(prefix)
                    .ok_or(DecodeError::IncompleteDocId)?
                    .to_string();
                session.push(t)?;
                excl.exclude(trie, &docid)?;
                ranked.docids.push(docid);
                ranked.per_docid_logprob.push(span_lp + lp);
                span_lp = 0.0;
            }
            _ => {
                if t == DOCID_OPEN {
                    span_lp = 0.0;
                }
                span_lp += lp;
                session.push(t)?;
            }
        }
    }
    Ok(ranked)
}

/// Ranked DocID list for `query`, with the decoding cost.
pub fn generate_docid_list_traced<L: LmScorer + ?Sized>(
    lm: &L,
    trie: &DocIdTrie,
    vocab: &Vocabulary,
    query: &str,
    k: usize,
) -> Result<(RankedDocIds, DecodeCost), DecodeError> {
    if k == 0 {
        return Err(DecodeError::InvalidArgument("k must be at least 1".into()));
    }
    if trie.is_empty() {
        return Err(DecodeError::EmptyTrie);
    }
    let mut session = Session::new(lm, vocab.encode(&render::retrieval_input(query)));
    let ranked = decode_docid_list(&mut session, trie, k)?;
    Ok((ranked, session.cost()))
}

pub fn generate_docid_list<L: LmScorer + ?Sized>(
    lm: &L,
    trie: &DocIdTrie,
    vocab: &Vocabulary,
    query: &str,
    k: usize,
) -> Result<RankedDocIds, DecodeError> {
    generate_docid_list_traced(lm, trie, vocab, query, k).map(|(r, _)| r)
}

fn decode_segment<L: LmScorer + ?Sized>(
    session: &mut Session<'_, L>,
    mask: &TokenMask,
    stop: TokenId,
    cap: usize,
) -> Result<Vec<TokenId>, DecodeError> {
    let mut out = Vec::new();
    while out.len() < cap {
        let (t, _) = session.choose(mask)?;
        if t == stop {
            break;
        }
        session.push(t)?;
        out.push(t);
    }
    session.push(stop)?;
    Ok(out)
}

fn answer_mask() -> TokenMask {
    free_text_mask().without(&ANSWER_FORBIDDEN)
}

fn reference_mask() -> TokenMask {
    free_text_mask().without(&REFERENCE_FORBIDDEN)
}

/// Answers from the scorer alone.
pub fn generate_closed_book<L: LmScorer + ?Sized>(
    lm: &L,
    vocab: &Vocabulary,
    query: &str,
    max_tokens: usize,
) -> Result<String, DecodeError> {
    if max_tokens == 0 {
        return Err(DecodeError::InvalidArgument(
            "max_tokens must be at least 1".into(),
        ));
    }
    let mut session = Session::new(lm, vocab.encode(&render::closed_book_input(query)));
    let answer = decode_segment(&mut session, &answer_mask(), EOS, max_tokens)?;
    Ok(vocab.decode(&answer)?)
}

fn check_rag_params(p: &RagParams) -> Result<(), DecodeError> {
    if p.k_context == 0 || p.k_retrieve < p.k_context {
        return Err(DecodeError::InvalidArgument(format!(
            "need k_retrieve >= k_context >= 1, got {} and {}",
            p.k_retrieve, p.k_context
        )));
    }
    Ok(())
}

/// DocIDs, references and answer in one stream.
pub fn generate_rag<L: LmScorer + ?Sized>(
    lm: &L,
    trie: &DocIdTrie,
    corpus: &Corpus,
    vocab: &Vocabulary,
    query: &str,
    params: &RagParams,
) -> Result<RagResult, DecodeError> {
    rag(lm, trie, corpus, vocab, query, params, RagMode::Continuous)
}

/// Same outputs as [`generate_rag`], but after retrieval a fresh session
/// re-reads the query, the DocID list and the documents from scratch.
pub fn generate_rag_pipeline<L: LmScorer + ?Sized>(
    lm: &L,
    trie: &DocIdTrie,
    corpus: &Corpus,
    vocab: &Vocabulary,
    query: &str,
    params: &RagParams,
) -> Result<RagResult, DecodeError> {
    rag(lm, trie, corpus, vocab, query, params, RagMode::Pipeline)
}

pub fn rag<L: LmScorer + ?Sized>(
    lm: &L,
    trie: &DocIdTrie,
    corpus: &Corpus,
    vocab: &Vocabulary,
    query: &str,
    params: &RagParams,
    mode: RagMode,
) -> Result<RagResult, DecodeError> {
    check_rag_params(params)?;
    let head = render::task_input(render::RAG_PREFIX, query);
    let mut session = Session::new(lm, vocab.encode(&head));
    let ranked = if trie.is_empty() {
        RankedDocIds::default()
    } else {
        decode_docid_list(&mut session, trie, params.k_retrieve)?
    };
    let context_docids: Vec<String> = ranked
        .docids
        .iter()
        .take(params.k_context)
        .cloned()
        .collect();
    let docs: Vec<Document> = context_docids
        .iter()
        .map(|id| corpus.get(id).map(|d| d.into_owned()))
        .collect::<Result<_, _>>()?;

    let mut cost = DecodeCost::default();
    let mut trace = Vec::new();
    if mode == RagMode::Pipeline && !docs.is_empty() {
        cost = session.cost();
        trace = session.trace().to_vec();
        session = Session::new(lm, vocab.encode(&render::rag_head(query, &ranked.docids)));
    }

    for doc in &docs {
        session.inject(&vocab.encode_plain(&render::render_document(doc, params.budget)))?;
    }
    let mut references = Vec::with_capacity(docs.len());
    for _ in &docs {
        session.push(REF_OPEN)?;
        let tokens = decode_segment(
            &mut session,
            &reference_mask(),
            REF_CLOSE,
            params.reference_cap,
        )?;
        references.push(vocab.decode(&tokens)?);
    }
    session.push(ANSWER_OPEN)?;
    let answer = decode_segment(&mut session, &answer_mask(), EOS, params.answer_cap)?;

    trace.extend_from_slice(session.trace());
    Ok(RagResult {
        empty_retrieval: ranked.is_empty(),
        docids: ranked,
        context_docids,
        references,
        answer: vocab.decode(&answer)?,
        token_trace: trace,
        decode_cost: cost + session.cost(),
    })
}

/// A trace split along the output grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTrace {
    pub docid_spans: Vec<Vec<TokenId>>,
    pub references: Vec<Vec<TokenId>>,
    pub answer: Vec<TokenId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("trace violates the output grammar at position {0}")]
pub struct TraceError(pub usize);

/// Parses `(<docid> w+ </docid>)* (<ref> w* </ref>)* <answer> w* <eos>`,
/// where `w` is any non-structural token.
pub fn parse_trace(trace: &[TokenId]) -> Result<ParsedTrace, TraceError> {
    let plain = |t: TokenId| !is_special(t) || t == UNK;
    let mut i = 0;
    let mut docid_spans = Vec::new();
    while trace.get(i) == Some(&DOCID_OPEN) {
        let start = i + 1;
        i = start;
        while trace.get(i).is_some_and(|&t| plain(t) && t != UNK) {
            i += 1;
        }
        if i == start || trace.get(i) != Some(&DOCID_CLOSE) {
            return Err(TraceError(i));
        }
        docid_spans.push(trace[start..i].to_vec());
        i += 1;
    }
    let mut references = Vec::new();
    while trace.get(i) == Some(&REF_OPEN) {
        let start = i + 1;
        i = start;
        while trace.get(i).is_some_and(|&t| plain(t)) {
            i += 1;
        }
        if trace.get(i) != Some(&REF_CLOSE) {
            return Err(TraceError(i));
        }
        references.push(trace[start..i].to_vec());
        i += 1;
    }
    if trace.get(i) != Some(&ANSWER_OPEN) {
        return Err(TraceError(i));
    }
    let start = i + 1;
    i = start;
    while trace.get(i).is_some_and(|&t| plain(t)) {
        i += 1;
    }
    if trace.get(i) != Some(&EOS) || i + 1 != trace.len() {
        return Err(TraceError(i));
    }
    Ok(ParsedTrace {
        docid_spans,
        references,
        answer: trace[start..i].to_vec(),
    })
}

/// Supplies the admissible set after a given history.
pub trait MaskProvider {
    fn mask(&self, history: &[TokenId]) -> Result<TokenMask, DecodeError>;
}

/// DocID-list masks recomputed from scratch with the literal backward scan.
pub struct DocIdListMasks<'a> {
    pub trie: &'a DocIdTrie,
    pub excl: ExclusionSet,
}

impl MaskProvider for DocIdListMasks<'_> {
    fn mask(&self, history: &[TokenId]) -> Result<TokenMask, DecodeError> {
        Ok(allowed_mask(
            &scan_state(history),
            self.trie,
            &self.excl,
            DecodePhase::DocIdList,
        )?)
    }
}

/// Teacher-forced log-probability of `target` after `context`, optionally
/// renormalized over each step's admissible set.
pub fn score_sequence<L: LmScorer + ?Sized>(
    lm: &L,
    context: &[TokenId],
    target: &[TokenId],
    mask_provider: Option<&dyn MaskProvider>,
) -> Result<f64, DecodeError> {
    if target.is_empty() {
        return Err(DecodeError::EmptyTarget);
    }
    let v = lm.vocab_size();
    if let Some(t) = target.iter().find(|t| t.index() >= v) {
        return Err(LmError::InvalidToken(t.0, v).into());
    }
    let mut history = context.to_vec();
    let mut total = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let lp = lm.next_logprobs(&history)?;
        total += match mask_provider {
            None => lp[t.index()],
            Some(provider) => {
                let mask = provider.mask(&history)?;
                if !mask.allows(t) {
                    return Err(DecodeError::TargetOutsideMask(i));
                }
                lp[t.index()] - log_sum_exp(mask.tokens(v).iter().map(|a| lp[a.index()]))
            }
        };
        history.push(t);
    }
    Ok(total)
}

/// One line of a decode result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub query_id: String,
    pub docids: Vec<String>,
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub cost: DecodeCost,
}

impl DecodeRecord {
    pub fn from_ranked(query_id: &str, ranked: RankedDocIds, cost: DecodeCost) -> Self {
        Self {
            query_id: query_id.to_string(),
            docids: ranked.docids,
            references: Vec::new(),
            answer: String::new(),
            cost,
        }
    }

    pub fn from_rag(query_id: &str, result: RagResult) -> Self {
        Self {
            query_id: query_id.to_string(),
            docids: result.docids.docids,
            references: result.references,
            answer: result.answer,
            cost: result.decode_cost,
        }
    }
}
