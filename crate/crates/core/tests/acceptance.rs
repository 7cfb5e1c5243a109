//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use corpuslm::constraint::{scan_state, step_state, ConstraintError, ConstraintState};
use corpuslm::corpus::{Corpus, CorpusError, Document, GoldRecord};
use corpuslm::decoder::{generate_docid_list, parse_trace, rag, RagMode, RagParams, RankedDocIds};
use corpuslm::evaluation::{exact_match, f1, has_answer, r_precision, recall_at_k, rouge_l};
use corpuslm::lm::{log_sum_exp, LmScorer, NgramLm, UniformLm};
use corpuslm::render;
use corpuslm::token::{
    is_special, TokenId, Vocabulary, ANSWER_OPEN, DOCID_CLOSE, DOCID_OPEN, EOS, REF_CLOSE, REF_OPEN,
};
use corpuslm::training::{
    build_training_set, combined_loss, make_rag_examples, merge_ranked, pseudo_query,
    sequence_loss, Bm25Index, Bm25Params, FactoryConfig, Lambdas, ListBuilder, OverlapReranker,
    RagSample, Reranker, TaskKind, TrainingExample,
};
use corpuslm::trie::{DocIdTrie, ExclusionSet};
use corpuslm::RunConfig;

use common::{random_corpus, random_instance, random_query};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct SuiteDecode {
    retrieval_lists: Vec<(RankedDocIds, usize)>,
    rag_lists: Vec<(RankedDocIds, usize)>,
    corpora_ok: Vec<bool>,
    traces_ok: usize,
    trace_failures: Vec<String>,
    elapsed: Duration,
}

/// 1,000 random instances, each decoded once as a plain ranked list and
/// once through continuous RAG.
fn randomized_decodes() -> SuiteDecode {
    let start = Instant::now();
    let results: Vec<_> = (0..1000u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, 5..=100);
            let k = rng.gen_range(1..=10);
            let query = inst.queries.choose(&mut rng).unwrap().clone();
            let ranked = generate_docid_list(&inst.lm, &inst.trie, &inst.vocab, &query, k).unwrap();
            let params = RagParams {
                k_retrieve: k,
                k_context: rng.gen_range(1..=k.min(3)),
                budget: rng.gen_range(4..=64),
                reference_cap: rng.gen_range(1..=16),
                answer_cap: rng.gen_range(1..=16),
            };
            let result = rag(
                &inst.lm,
                &inst.trie,
                &inst.corpus,
                &inst.vocab,
                &query,
                &params,
                RagMode::Continuous,
            )
            .unwrap();
            let in_corpus = ranked
                .docids
                .iter()
                .chain(&result.docids.docids)
                .all(|d| inst.corpus.contains(d));
            let trace = match parse_trace(&result.token_trace) {
                Ok(parsed) => {
                    let spans: Vec<String> = parsed
                        .docid_spans
                        .iter()
                        .map(|s| inst.trie.docid_at(s).map(String::from).unwrap_or_default())
                        .collect();
                    if spans != result.docids.docids {
                        Err(format!(
                            "seed {seed}: trace spans {spans:?} != {:?}",
                            result.docids.docids
                        ))
                    } else if parsed.references.len() != result.context_docids.len() {
                        Err(format!(
                            "seed {seed}: {} reference segments for {} documents",
                            parsed.references.len(),
                            result.context_docids.len()
                        ))
                    } else if inst.vocab.decode(&parsed.answer).unwrap() != result.answer {
                        Err(format!(
                            "seed {seed}: answer tokens disagree with answer text"
                        ))
                    } else {
                        Ok(())
                    }
                }
                Err(e) => Err(format!("seed {seed}: {e}")),
            };
            ((ranked, k), (result.docids, k), in_corpus, trace)
        })
        .collect();
    let elapsed = start.elapsed();
    let mut out = SuiteDecode {
        retrieval_lists: Vec::new(),
        rag_lists: Vec::new(),
        corpora_ok: Vec::new(),
        traces_ok: 0,
        trace_failures: Vec::new(),
        elapsed,
    };
    for (r, g, ok, trace) in results {
        out.retrieval_lists.push(r);
        out.rag_lists.push(g);
        out.corpora_ok.push(ok);
        match trace {
            Ok(()) => out.traces_ok += 1,
            Err(e) => out.trace_failures.push(e),
        }
    }
    out
}

fn criterion_1(suite: &SuiteDecode) -> Outcome {
    let lists: Vec<&(RankedDocIds, usize)> = suite
        .retrieval_lists
        .iter()
        .chain(&suite.rag_lists)
        .collect();
    let invalid = suite.corpora_ok.iter().filter(|ok| !**ok).count();
    let duplicated = lists
        .iter()
        .filter(|(r, _)| r.docids.iter().collect::<BTreeSet<_>>().len() != r.len())
        .count();
    let oversized = lists.iter().filter(|(r, k)| r.len() > *k).count();
    let emitted: usize = lists.iter().map(|(r, _)| r.len()).sum();
    ensure!(
        invalid == 0,
        "{invalid} decodes emitted an out-of-corpus DocID"
    );
    ensure!(duplicated == 0, "{duplicated} lists contain duplicates");
    ensure!(oversized == 0, "{oversized} lists exceed k");
    ensure!(emitted > 0, "no DocIDs were emitted at all");
    ensure!(
        suite.elapsed < Duration::from_secs(60),
        "runtime {:?} exceeds 60 s",
        suite.elapsed
    );
    Ok(format!(
        "{} decodes, {emitted} DocIDs, 0 invalid, 0 duplicate lists, {:.1?}",
        lists.len(),
        suite.elapsed
    ))
}

fn well_formed_history<R: Rng>(rng: &mut R, vocab: u32) -> Vec<TokenId> {
    let len = rng.gen_range(0..60);
    let mut h = Vec::with_capacity(len);
    let mut inside = false;
    for _ in 0..len {
        let word = TokenId(rng.gen_range(7..vocab));
        let t = if inside {
            if rng.gen_bool(0.25) {
                inside = false;
                DOCID_CLOSE
            } else {
                word
            }
        } else {
            match rng.gen_range(0..10) {
                0..=2 => {
                    inside = true;
                    DOCID_OPEN
                }
                3 => *[REF_OPEN, REF_CLOSE, ANSWER_OPEN, EOS].choose(rng).unwrap(),
                _ => word,
            }
        };
        h.push(t);
    }
    h
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut checks = 0;
    for _ in 0..10_000 {
        let h = well_formed_history(&mut rng, 40);
        let mut state = ConstraintState::Unconstrained;
        for (i, &t) in h.iter().enumerate() {
            state = match step_state(state, t) {
                Ok(s) => s,
                Err(_) => {
                    mismatches += 1;
                    break;
                }
            };
            checks += 1;
            if state != scan_state(&h[..=i]) {
                mismatches += 1;
            }
        }
    }
    // Arbitrary token soup: the fold must agree with the scan until the
    // first malformed token, and reject exactly that token.
    let mut rejected = 0;
    for _ in 0..10_000 {
        let h: Vec<TokenId> = (0..rng.gen_range(0..40))
            .map(|_| {
                if rng.gen_bool(0.3) {
                    TokenId(rng.gen_range(0..7))
                } else {
                    TokenId(rng.gen_range(7..40))
                }
            })
            .collect();
        let mut state = ConstraintState::Unconstrained;
        for (i, &t) in h.iter().enumerate() {
            let before = scan_state(&h[..i]);
            match step_state(state, t) {
                Ok(s) => {
                    checks += 1;
                    if s != scan_state(&h[..=i]) {
                        mismatches += 1;
                    }
                    state = s;
                }
                Err(e) => {
                    rejected += 1;
                    let justified = match e {
                        ConstraintError::UnmatchedClose => !before.is_inside() && t == DOCID_CLOSE,
                        ConstraintError::NestedOpen => before.is_inside() && t == DOCID_OPEN,
                        ConstraintError::SpecialInsideSpan(x) => {
                            before.is_inside() && x == t && is_special(t)
                        }
                        _ => false,
                    };
                    if !justified {
                        mismatches += 1;
                    }
                    break;
                }
            }
        }
    }
    ensure!(mismatches == 0, "{mismatches} mismatches");
    Ok(format!("20000 histories, {checks} prefix comparisons, {rejected} malformed tokens rejected, 0 mismatches"))
}

fn spellable(
    trie: &DocIdTrie,
    excl: &ExclusionSet,
    prefix: &mut Vec<TokenId>,
    out: &mut Vec<String>,
    dead: &mut usize,
) {
    let cont = trie.allowed_continuations(prefix, excl).unwrap();
    if cont.is_dead_end() {
        *dead += 1;
        return;
    }
    if cont.close_permitted {
        out.push(trie.docid_at(prefix).unwrap().to_string());
    }
    for t in cont.tokens {
        prefix.push(t);
        spellable(trie, excl, prefix, out, dead);
        prefix.pop();
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=100);
        let corpus = random_corpus(&mut rng, n);
        let vocab = Vocabulary::build(&corpus, &[]).unwrap();
        let trie = DocIdTrie::build(&corpus, &vocab).unwrap();
        let ids: Vec<String> = corpus.doc_ids().map(String::from).collect();
        for size in [0, 1, n / 2, n.saturating_sub(1), n] {
            let mut excl = ExclusionSet::new();
            let excluded: BTreeSet<String> = ids.choose_multiple(&mut rng, size).cloned().collect();
            for d in &excluded {
                excl.exclude(&trie, d).unwrap();
            }
            let mut found = Vec::new();
            let mut dead = 0;
            spellable(&trie, &excl, &mut Vec::new(), &mut found, &mut dead);
            let found_set: BTreeSet<String> = found.iter().cloned().collect();
            let expected: BTreeSet<String> = ids
                .iter()
                .filter(|d| !excluded.contains(*d))
                .cloned()
                .collect();
            let root_dead = expected.is_empty() && dead == 1;
            if found_set != expected || found.len() != found_set.len() || (dead > 0 && !root_dead) {
                mismatches += 1;
            }
            cases += 1;
        }
    }
    ensure!(
        mismatches == 0,
        "{mismatches} of {cases} exclusion cases disagree"
    );
    Ok(format!(
        "{cases} (corpus, exclusion) cases enumerated exhaustively, 0 mismatches"
    ))
}

/// Brute-force greedy list decoding that never consults the trie: the
/// admissible set is recomputed from the raw DocID token paths.
fn greedy_oracle(
    lm: &NgramLm,
    vocab: &Vocabulary,
    docs: &[(String, Vec<TokenId>)],
    query: &str,
    k: usize,
) -> (Vec<String>, Vec<f64>) {
    let mut history = vocab.encode(&render::retrieval_input(query));
    let mut remaining: Vec<&(String, Vec<TokenId>)> = docs.iter().collect();
    let (mut out, mut lps) = (Vec::new(), Vec::new());
    let pick = |history: &[TokenId], allowed: &BTreeSet<TokenId>| -> (TokenId, f64) {
        let lp = lm.next_logprobs(history).unwrap();
        let mut best = *allowed.iter().next().unwrap();
        for &t in allowed {
            if lp[t.index()] > lp[best.index()] {
                best = t;
            }
        }
        let norm = log_sum_exp(allowed.iter().map(|t| lp[t.index()]));
        (
            best,
            if allowed.len() == 1 {
                0.0
            } else {
                lp[best.index()] - norm
            },
        )
    };
    while out.len() < k {
        let mut allowed = BTreeSet::from([EOS]);
        if !remaining.is_empty() {
            allowed.insert(DOCID_OPEN);
        }
        let (t, mut span) = pick(&history, &allowed);
        if t == EOS {
            break;
        }
        history.push(t);
        let mut prefix: Vec<TokenId> = Vec::new();
        loop {
            let mut allowed = BTreeSet::new();
            for (_, path) in &remaining {
                if path.starts_with(&prefix) {
                    match path.get(prefix.len()) {
                        Some(&next) => allowed.insert(next),
                        None => allowed.insert(DOCID_CLOSE),
                    };
                }
            }
            let (t, lp) = pick(&history, &allowed);
            span += lp;
            history.push(t);
            if t == DOCID_CLOSE {
                let pos = remaining.iter().position(|(_, p)| *p == prefix).unwrap();
                out.push(remaining.remove(pos).0.clone());
                lps.push(span);
                break;
            }
            prefix.push(t);
        }
    }
    (out, lps)
}

fn criterion_4() -> Outcome {
    let results: Vec<Result<usize, String>> = (0..300u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let inst = random_instance(&mut rng, 1..=20);
            let k = rng.gen_range(1..=10);
            let query = random_query(&mut rng);
            let docs: Vec<(String, Vec<TokenId>)> = inst
                .corpus
                .doc_ids()
                .map(|d| (d.to_string(), inst.vocab.encode(d)))
                .collect();
            let got = generate_docid_list(&inst.lm, &inst.trie, &inst.vocab, &query, k).unwrap();
            let (want, want_lp) = greedy_oracle(&inst.lm, &inst.vocab, &docs, &query, k);
            if got.docids != want {
                return Err(format!(
                    "seed {seed}: {:?} != oracle {:?}",
                    got.docids, want
                ));
            }
            if got
                .per_docid_logprob
                .iter()
                .zip(&want_lp)
                .any(|(a, b)| (a - b).abs() > 1e-9)
            {
                return Err(format!("seed {seed}: span log-probabilities differ"));
            }
            Ok(got.len())
        })
        .collect();
    let mut emitted = 0;
    for r in results {
        emitted += r?;
    }
    Ok(format!(
        "300 instances (<= 20 documents) identical to the brute-force oracle, {emitted} DocIDs"
    ))
}

struct FixedReranker(Vec<String>);

impl Reranker for FixedReranker {
    fn rerank(&self, _: &str, _: &[(String, f64)], _: &Corpus) -> Result<Vec<String>, CorpusError> {
        Ok(self.0.clone())
    }
}

fn criterion_5() -> Outcome {
    let corpus = Corpus::from_documents(
        ["D1", "D2", "D3"].map(|t| Document::new(t, "", "shared text here.").unwrap()),
    )
    .unwrap();
    let (d1, d2, d3) = ("D1 #".to_string(), "D2 #".to_string(), "D3 #".to_string());
    let index = Bm25Index::build(&corpus, Bm25Params::default()).unwrap();
    let stub = FixedReranker(vec![d1.clone(), d3.clone(), d2.clone()]);
    let builder = ListBuilder::new(&corpus, &index, &stub);
    let got = builder
        .construct_ranked_docid_list("text", std::slice::from_ref(&d3), 3)
        .unwrap();
    ensure!(
        got == vec![d3.clone(), d1.clone(), d2.clone()],
        "fixture gave {got:?}"
    );
    ensure!(
        merge_ranked(
            std::slice::from_ref(&d3),
            &[d1.clone(), d3.clone(), d2.clone()],
            3
        ) == got,
        "merge rule disagrees"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let n = rng.gen_range(5..=40);
        let corpus = random_corpus(&mut rng, n);
        let index = Bm25Index::build(&corpus, Bm25Params::default()).unwrap();
        let builder = ListBuilder::new(&corpus, &index, &OverlapReranker);
        let ids: Vec<String> = corpus.doc_ids().map(String::from).collect();
        let take = rng.gen_range(0..=5);
        let labeled: Vec<String> = ids.choose_multiple(&mut rng, take).cloned().collect();
        let k = rng.gen_range(labeled.len().max(1)..=labeled.len() + 8);
        let list = builder
            .construct_ranked_docid_list(&random_query(&mut rng), &labeled, k)
            .unwrap();
        let distinct: BTreeSet<&String> = list.iter().collect();
        ensure!(
            distinct.len() == list.len(),
            "case {case}: duplicates in {list:?}"
        );
        ensure!(
            list.len() <= k,
            "case {case}: length {} > k {k}",
            list.len()
        );
        ensure!(
            list.starts_with(&labeled),
            "case {case}: labeled {labeled:?} is not a prefix of {list:?}"
        );
        ensure!(
            list.iter().all(|d| corpus.contains(d)),
            "case {case}: out-of-corpus DocID"
        );
    }
    Ok("fixture [D3, D1, D2] and 500 randomized property checks".into())
}

fn bm25_oracle(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    docs.iter()
        .map(|d| {
            query
                .iter()
                .map(|t| {
                    let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
                    let tf = d.iter().filter(|x| *x == t).count() as f64;
                    let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl))
                })
                .sum()
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let corpus = Corpus::from_documents([
        Document::new("d1", "s", "apple pear").unwrap(),
        Document::new("d2", "s", "plum fig").unwrap(),
        Document::new("d3", "s", "apple kiwi").unwrap(),
    ])
    .unwrap();
    let index = Bm25Index::build(&corpus, Bm25Params { k1: 1.2, b: 0.75 }).unwrap();
    let hits = index.retrieve("plum", 3);
    let want = (8.0f64 / 3.0).ln();
    ensure!(
        hits.len() == 1 && hits[0].0 == "d2 # s",
        "unexpected hits {hits:?}"
    );
    let err = (hits[0].1 - want).abs();
    ensure!(err < 1e-9, "score {} vs ln(8/3) = {want}", hits[0].1);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let n = rng.gen_range(3..30);
        let corpus = random_corpus(&mut rng, n);
        let index = Bm25Index::build(&corpus, Bm25Params::default()).unwrap();
        let docs: Vec<Document> = corpus.iter().map(|d| d.unwrap().into_owned()).collect();
        let tokens: Vec<Vec<String>> = docs.iter().map(Document::indexed_tokens).collect();
        let query = random_query(&mut rng);
        let oracle = bm25_oracle(&tokens, &corpuslm::token::tokenize(&query), 1.2, 0.75);
        for (id, score) in index.retrieve(&query, n) {
            let i = docs.iter().position(|d| d.doc_id == id).unwrap();
            ensure!(
                (score - oracle[i]).abs() < 1e-9,
                "`{id}`: {score} vs oracle {}",
                oracle[i]
            );
        }
    }
    Ok(format!(
        "ln(8/3) fixture error {err:.1e}; 50 random corpora match the closed form"
    ))
}

fn random_example<R: Rng>(rng: &mut R, tasks: &[TaskKind]) -> TrainingExample {
    TrainingExample {
        task: *tasks.choose(rng).unwrap(),
        input: random_query(rng),
        target: random_query(rng),
        noise_flag: rng.gen_bool(0.3),
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tasks = [
        TaskKind::Retrieval,
        TaskKind::ClosedBook,
        TaskKind::RagReference,
        TaskKind::RagAnswer,
        TaskKind::AuxQuery2DocIds,
        TaskKind::AuxSummary2DocIds,
        TaskKind::AuxDocId2Summary,
        TaskKind::AuxDocId2Related,
    ];
    let corpus = random_corpus(&mut rng, 10);
    let vocab = Vocabulary::build(&corpus, &[]).unwrap();
    let uniform = UniformLm::new(vocab.len()).unwrap();
    let ln_v = (vocab.len() as f64).ln();
    for _ in 0..200 {
        let ex = random_example(&mut rng, &tasks);
        let len = vocab.encode(&ex.target).len() + 1;
        let loss = sequence_loss(&uniform, &vocab, &ex).unwrap();
        ensure!(
            (loss - len as f64 * ln_v).abs() < 1e-9,
            "uniform loss {loss} vs {}",
            len as f64 * ln_v
        );
    }
    let defaults = RunConfig::default().lambda;
    ensure!(
        defaults == Lambdas::new(1.0, 1.0, 1.0, 1.0).unwrap(),
        "default weights {defaults:?}"
    );
    for _ in 0..100 {
        let batch: Vec<TrainingExample> = (0..rng.gen_range(1..20))
            .map(|_| random_example(&mut rng, &tasks))
            .collect();
        let streams: Vec<Vec<TokenId>> =
            batch.iter().map(|e| vocab.encode(&e.rendered())).collect();
        let lm = NgramLm::train(&streams, rng.gen_range(1..4), 0.1, vocab.len()).unwrap();
        let tau = rng.gen_range(0.0..=1.0);
        let base = combined_loss(&lm, &vocab, &batch, defaults, tau).unwrap();
        ensure!(
            base.l_rag == base.l_ref + base.l_ans,
            "l_rag {} != {} + {}",
            base.l_rag,
            base.l_ref,
            base.l_ans
        );
        let sum = base.l_rank + base.l_gen + base.l_rag + base.l_aux;
        ensure!(
            (base.combined - sum).abs() <= 1e-9 * sum.max(1.0),
            "default combination is not the plain sum"
        );
        let w = Lambdas::new(
            rng.gen_range(0.0..3.0),
            rng.gen_range(0.0..3.0),
            rng.gen_range(0.0..3.0),
            rng.gen_range(0.0..3.0),
        )
        .unwrap();
        let weighted = combined_loss(&lm, &vocab, &batch, w, tau).unwrap();
        let want =
            w.rank * base.l_rank + w.gen * base.l_gen + w.rag * base.l_rag + w.aux * base.l_aux;
        ensure!(
            (weighted.combined - want).abs() <= 1e-9 * want.max(1.0),
            "combined {} vs {want}",
            weighted.combined
        );
        let only_rank = combined_loss(
            &lm,
            &vocab,
            &batch,
            Lambdas::new(1.0, 0.0, 0.0, 0.0).unwrap(),
            tau,
        )
        .unwrap();
        ensure!(
            only_rank.combined == base.l_rank,
            "lambda (1,0,0,0) does not isolate l_rank"
        );
    }
    Ok("200 uniform-loss checks, 100 batches: additivity exact, linear in lambda, defaults (1,1,1,1)".into())
}

fn criterion_8() -> Outcome {
    let docs = vec![
        Document::new("A", "x", "First sentence here. Second one there.").unwrap(),
        Document::new("B", "y", "Third sentence. Fourth sentence!").unwrap(),
    ];
    let ids: Vec<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
    let sample = RagSample {
        query: "which sentence",
        docids: &ids,
        context_docs: &docs,
        reference: "First sentence here.",
        answer: "first",
        budget: 256,
    };
    let tau = RunConfig::default().tau;
    ensure!(tau == 0.2, "default tau is {tau}");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 10_000;
    let mut noisy = 0;
    for _ in 0..draws {
        let ex = make_rag_examples(&sample, tau, &mut rng).unwrap();
        noisy += usize::from(ex[1].noise_flag);
    }
    let rate = noisy as f64 / draws as f64;
    ensure!((0.17..=0.23).contains(&rate), "noise rate {rate}");
    Ok(format!(
        "noise rate {rate:.4} over {draws} draws at tau = 0.2"
    ))
}

fn criterion_9() -> Outcome {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    // Single letters stand for arbitrary tokens; "a" is avoided because
    // answer normalization drops it as an article.
    ensure!(
        r_precision(&s(&["A", "B", "C"]), &s(&["A"])).unwrap() == 1.0,
        "r_precision single"
    );
    ensure!(
        r_precision(&s(&["A", "C", "B"]), &s(&["A", "B"])).unwrap() == 0.5,
        "r_precision 0.5"
    );
    ensure!(
        r_precision(&[], &s(&["A"])).unwrap() == 0.0,
        "r_precision empty"
    );
    ensure!(
        recall_at_k(&s(&["B", "X"]), &s(&["A", "B"]), 1).unwrap() == 0.5,
        "recall@1"
    );
    ensure!(
        recall_at_k(&s(&["A", "B"]), &s(&["A", "B"]), 5).unwrap() == 1.0,
        "recall full"
    );
    ensure!(
        recall_at_k(&s(&["C"]), &s(&["A", "B"]), 5).unwrap() == 0.0,
        "recall disjoint"
    );
    ensure!(
        exact_match("The Answer!", &s(&["answer"])).unwrap() == 1.0,
        "EM normalized"
    );
    ensure!(
        exact_match("yes", &s(&["no"])).unwrap() == 0.0,
        "EM mismatch"
    );
    ensure!(f1("x y", &s(&["x z"])).unwrap() == 0.5, "F1 0.5");
    let r = rouge_l("x y z", &s(&["x z"])).unwrap();
    ensure!((r - 0.8).abs() < 1e-15, "ROUGE-L {r}");
    ensure!(
        has_answer("the answer is paris", &s(&["Paris"])).unwrap() == 1.0,
        "has_answer hit"
    );
    ensure!(
        has_answer("", &s(&["Paris"])).unwrap() == 0.0,
        "has_answer empty"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pool = ["A", "B", "C", "D", "E", "F", "G"];
    for case in 0..1000 {
        let retrieved: Vec<String> = (0..rng.gen_range(0..8))
            .map(|_| pool.choose(&mut rng).unwrap().to_string())
            .collect();
        let prov: Vec<String> = (0..rng.gen_range(1..5))
            .map(|_| pool.choose(&mut rng).unwrap().to_string())
            .collect();
        let r = prov.iter().collect::<BTreeSet<_>>().len();
        let lhs = r_precision(&retrieved, &prov).unwrap();
        let rhs = recall_at_k(&retrieved, &prov, r).unwrap();
        ensure!(lhs == rhs, "case {case}: {lhs} != {rhs}");
    }
    Ok("all fixtures exact; r_precision == recall@|provenance| on 1000 random cases".into())
}

/// 50 documents, synthetic gold queries, and an n-gram scorer fitted on
/// the documents and the training examples built from those golds.
fn rag_fixture() -> (Corpus, Vocabulary, DocIdTrie, NgramLm, Vec<GoldRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let corpus = random_corpus(&mut rng, 50);
    let ids: Vec<String> = corpus.doc_ids().map(String::from).collect();
    let golds: Vec<GoldRecord> = (0..25)
        .map(|i| {
            let id = ids.choose(&mut rng).unwrap();
            let doc = corpus.get(id).unwrap();
            let sentence = doc.sentences.choose(&mut rng).unwrap();
            let answer = corpuslm::token::tokenize_plain(sentence)[0].clone();
            GoldRecord {
                query_id: format!("q{i}"),
                input: pseudo_query(sentence),
                answers: vec![answer],
                provenance_groups: vec![vec![id.clone()]],
            }
        })
        .collect();
    let index = Bm25Index::build(&corpus, Bm25Params::default()).unwrap();
    let builder = ListBuilder::new(&corpus, &index, &OverlapReranker);
    let config = FactoryConfig {
        aux_per_task: 10,
        ..FactoryConfig::default()
    };
    let examples = build_training_set(&builder, &golds, &config, &mut rng).unwrap();
    let texts: Vec<String> = examples.iter().map(TrainingExample::rendered).collect();
    let vocab = Vocabulary::build(&corpus, &texts).unwrap();
    let trie = DocIdTrie::build(&corpus, &vocab).unwrap();
    let mut streams: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|d| vocab.encode_plain(&render::render_document(&d.unwrap(), usize::MAX)))
        .collect();
    streams.extend(texts.iter().map(|t| vocab.encode(t)));
    let lm = NgramLm::train(&streams, 3, 0.1, vocab.len()).unwrap();
    (corpus, vocab, trie, lm, golds)
}

fn criterion_10() -> Outcome {
    let (corpus, vocab, trie, lm, golds) = rag_fixture();
    let params = RagParams::default();
    let mut lowest_gap = u64::MAX;
    for g in &golds {
        let cont = rag(
            &lm,
            &trie,
            &corpus,
            &vocab,
            &g.input,
            &params,
            RagMode::Continuous,
        )
        .unwrap();
        let pipe = rag(
            &lm,
            &trie,
            &corpus,
            &vocab,
            &g.input,
            &params,
            RagMode::Pipeline,
        )
        .unwrap();
        ensure!(
            !cont.empty_retrieval,
            "query `{}` retrieved nothing",
            g.query_id
        );
        let (c, p) = (
            cont.decode_cost.context_tokens,
            pipe.decode_cost.context_tokens,
        );
        ensure!(
            c < p,
            "query `{}`: continuous {c} >= pipeline {p}",
            g.query_id
        );
        lowest_gap = lowest_gap.min(p - c);
        ensure!(
            cont.docids == pipe.docids,
            "query `{}`: retrieval differs",
            g.query_id
        );
        ensure!(
            cont.references == pipe.references && cont.answer == pipe.answer,
            "query `{}`: outputs differ under identical contexts",
            g.query_id
        );
    }
    Ok(format!("{} queries on 50 documents, continuous cheaper on all (min gap {lowest_gap} tokens), outputs agree", golds.len()))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_corpuslm"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = fixture("corpus.jsonl");
    let gold = fixture("gold.jsonl");
    let (corpus, gold) = (corpus.to_str().unwrap(), gold.to_str().unwrap());
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "ingest",
            vec!["ingest".into(), "--corpus".into(), corpus.into()],
        ),
        (
            "traindata",
            vec![
                "traindata".into(),
                "--corpus".into(),
                corpus.into(),
                "--gold".into(),
                gold.into(),
                "--tau".into(),
                "0.5".into(),
                "--aux-per-task".into(),
                "3".into(),
                "--seed".into(),
                "11".into(),
            ],
        ),
        (
            "index",
            vec!["index".into(), "--corpus".into(), corpus.into()],
        ),
        (
            "retrieve",
            vec![
                "retrieve".into(),
                "--corpus".into(),
                corpus.into(),
                "--gold".into(),
                gold.into(),
                "--train-data".into(),
                path("traindata.a"),
                "--seed".into(),
                "11".into(),
            ],
        ),
        (
            "rag",
            vec![
                "rag".into(),
                "--corpus".into(),
                corpus.into(),
                "--gold".into(),
                gold.into(),
                "--train-data".into(),
                path("traindata.a"),
                "--k-context".into(),
                "2".into(),
            ],
        ),
        (
            "rag-pipeline",
            vec![
                "rag".into(),
                "--mode".into(),
                "pipeline".into(),
                "--corpus".into(),
                corpus.into(),
                "--gold".into(),
                gold.into(),
                "--train-data".into(),
                path("traindata.a"),
            ],
        ),
        (
            "loss",
            vec![
                "loss".into(),
                "--corpus".into(),
                corpus.into(),
                "--train-data".into(),
                path("traindata.a"),
                "--examples".into(),
                path("traindata.a"),
                "--tau".into(),
                "0.5".into(),
            ],
        ),
        (
            "eval",
            vec![
                "eval".into(),
                "--gold".into(),
                gold.into(),
                "--predictions".into(),
                path("rag.a"),
                "--category".into(),
                "qa".into(),
                "--per-query".into(),
                path("eval-tsv.RUN"),
            ],
        ),
        (
            "eval-retrieval",
            vec![
                "eval".into(),
                "--gold".into(),
                gold.into(),
                "--predictions".into(),
                path("retrieve.a"),
                "--category".into(),
                "retrieval".into(),
            ],
        ),
    ];
    let mut compared = 0;
    for (name, args) in &commands {
        for run in ["a", "b"] {
            let mut args: Vec<String> = args
                .iter()
                .map(|a| a.replace(".RUN", &format!(".{run}")))
                .collect();
            args.push("--out".into());
            args.push(path(&format!("{name}.{run}")));
            run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
        }
        let files: Vec<(String, String)> = if *name == "index" {
            ["vocab.txt", "trie.txt", "manifest.json"]
                .iter()
                .map(|f| {
                    (
                        format!("{}/{f}", path("index.a")),
                        format!("{}/{f}", path("index.b")),
                    )
                })
                .collect()
        } else if *name == "eval" {
            vec![
                (path("eval.a"), path("eval.b")),
                (path("eval-tsv.a"), path("eval-tsv.b")),
            ]
        } else {
            vec![(path(&format!("{name}.a")), path(&format!("{name}.b")))]
        };
        for (a, b) in files {
            let (x, y) = (
                std::fs::read(&a).map_err(|e| e.to_string())?,
                std::fs::read(&b).map_err(|e| e.to_string())?,
            );
            ensure!(!x.is_empty(), "`{name}` produced an empty artifact");
            ensure!(x == y, "`{name}` outputs differ between runs ({a} vs {b})");
            compared += 1;
        }
    }
    Ok(format!(
        "{} command configurations, {compared} artifacts byte-identical across two runs",
        commands.len()
    ))
}

fn criterion_12(suite: &SuiteDecode) -> Outcome {
    let total = suite.traces_ok + suite.trace_failures.len();
    ensure!(
        suite.trace_failures.is_empty(),
        "{} of {total} traces fail: {}",
        suite.trace_failures.len(),
        suite.trace_failures[0]
    );
    Ok(format!(
        "{total} of {total} RAG traces parse; spans, references and answers consistent"
    ))
}

fn main() {
    let suite = catch_unwind(randomized_decodes);
    let suite = suite.as_ref().ok();
    let need_suite = |f: fn(&SuiteDecode) -> Outcome| -> Box<dyn Fn() -> Outcome> {
        Box::new(move || match suite {
            Some(s) => f(s),
            None => Err("randomized decode suite panicked".into()),
        })
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("constrained-decoding validity", need_suite(criterion_1)),
        ("scan-oracle equivalence", Box::new(criterion_2)),
        ("trie exclusion equivalence", Box::new(criterion_3)),
        ("greedy-oracle equivalence", Box::new(criterion_4)),
        ("merge rule", Box::new(criterion_5)),
        ("BM25 closed form", Box::new(criterion_6)),
        ("loss identities", Box::new(criterion_7)),
        ("noise sampling rate", Box::new(criterion_8)),
        ("metric fixtures", Box::new(criterion_9)),
        ("continuous vs pipeline cost", Box::new(criterion_10)),
        ("CLI determinism", Box::new(criterion_11)),
        ("output-grammar totality", need_suite(criterion_12)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
