#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

use corpuslm::corpus::{Corpus, Document};
use corpuslm::lm::NgramLm;
use corpuslm::render;
use corpuslm::token::{TokenId, Vocabulary, EOS};
use corpuslm::trie::DocIdTrie;

const TITLE_WORDS: [&str; 12] = [
    "river", "north", "castle", "red", "old", "bay", "lake", "stone", "king", "port", "hill", "new",
];
const SECTION_WORDS: [&str; 6] = ["history", "geography", "early", "life", "career", "notes"];
const BODY_WORDS: [&str; 24] = [
    "water", "city", "built", "founded", "year", "people", "trade", "war", "bridge", "market",
    "church", "road", "field", "tower", "ship", "gold", "salt", "wool", "mill", "forest", "valley",
    "coast", "island", "harbour",
];

/// A corpus of `n` documents with distinct DocIDs that share many prefixes.
pub fn random_corpus<R: Rng>(rng: &mut R, n: usize) -> Corpus {
    let mut docs = Vec::with_capacity(n);
    let mut seen = std::collections::BTreeSet::new();
    while docs.len() < n {
        let title: Vec<&str> = (0..rng.gen_range(1..=3))
            .map(|_| *TITLE_WORDS.choose(rng).unwrap())
            .collect();
        let section: Vec<&str> = (0..rng.gen_range(0..=2))
            .map(|_| *SECTION_WORDS.choose(rng).unwrap())
            .collect();
        let (title, section) = (title.join(" "), section.join(" "));
        if !seen.insert((title.clone(), section.clone())) {
            continue;
        }
        let sentences: Vec<String> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let words: Vec<&str> = (0..rng.gen_range(3..=8))
                    .map(|_| *BODY_WORDS.choose(rng).unwrap())
                    .collect();
                format!("{}.", words.join(" "))
            })
            .collect();
        docs.push(Document::new(&title, &section, &sentences.join(" ")).unwrap());
    }
    Corpus::from_documents(docs).unwrap()
}

pub fn random_query<R: Rng>(rng: &mut R) -> String {
    let pool: Vec<&str> = TITLE_WORDS.iter().chain(&BODY_WORDS).copied().collect();
    let words: Vec<&str> = (0..rng.gen_range(1..=5))
        .map(|_| *pool.choose(rng).unwrap())
        .collect();
    words.join(" ")
}

pub struct Instance {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub trie: DocIdTrie,
    pub lm: NgramLm,
    pub queries: Vec<String>,
}

/// Random corpus plus an n-gram scorer fitted on random DocID lists, RAG
/// streams and token noise, so decodes explore varied paths.
pub fn random_instance<R: Rng>(rng: &mut R, docs: std::ops::RangeInclusive<usize>) -> Instance {
    let n = rng.gen_range(docs);
    let corpus = random_corpus(rng, n);
    let queries: Vec<String> = (0..4).map(|_| random_query(rng)).collect();
    let vocab = Vocabulary::build(&corpus, &queries).unwrap();
    let trie = DocIdTrie::build(&corpus, &vocab).unwrap();
    let ids: Vec<String> = corpus.doc_ids().map(String::from).collect();
    let mut streams: Vec<Vec<TokenId>> = Vec::new();
    for _ in 0..rng.gen_range(5..30) {
        let q = random_query(rng);
        let take = rng.gen_range(0..=ids.len().min(6));
        let list: Vec<&String> = ids.choose_multiple(rng, take).collect();
        let mut s = vocab.encode(&render::rag_head(&q, &list));
        if rng.gen_bool(0.5) {
            let sentence = random_query(rng);
            s.extend(vocab.encode(&render::reference_segment(&sentence)));
        }
        s.extend(vocab.encode(&format!("{} {}", render::answer_open(), random_query(rng))));
        s.push(EOS);
        streams.push(s);
    }
    for _ in 0..rng.gen_range(0..10) {
        let len = rng.gen_range(1..20);
        streams.push(
            (0..len)
                .map(|_| TokenId(rng.gen_range(0..vocab.len() as u32)))
                .collect(),
        );
    }
    let order = rng.gen_range(1..=4);
    let alpha = rng.gen_range(0.01..1.0);
    let lm = NgramLm::train(&streams, order, alpha, vocab.len()).unwrap();
    Instance {
        corpus,
        vocab,
        trie,
        lm,
        queries,
    }
}
