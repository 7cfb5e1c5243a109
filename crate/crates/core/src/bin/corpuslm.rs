use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use corpuslm::corpus::{ingest_corpus, read_gold_file, Corpus, GoldRecord};
use corpuslm::decoder::{generate_docid_list_traced, rag, RagMode};
use corpuslm::evaluation::{evaluate_run, read_predictions, write_per_query_tsv, TaskCategory};
use corpuslm::lm::{LmScorer, NgramLm, RemoteLm};
use corpuslm::render::{render_document, DEFAULT_DOC_BUDGET};
use corpuslm::token::Vocabulary;
use corpuslm::training::{
    build_training_set, combined_loss, read_examples, write_examples, Bm25Index, Bm25Params,
    Lambdas, ListBuilder, OverlapReranker, TrainingExample,
};
use corpuslm::trie::DocIdTrie;
use corpuslm::RunConfig;

#[derive(Parser)]
#[command(
    name = "corpuslm",
    version,
    about = "Generative retrieval and RAG decoding engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct Opts {
    /// Passage corpus, one JSON object per line.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Gold task records, one JSON object per line.
    #[arg(long, global = true)]
    gold: Option<PathBuf>,
    /// Output file (directory for `index`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 10)]
    k_retrieve: usize,
    #[arg(long, global = true, default_value_t = 3)]
    k_context: usize,
    /// Noise sampling probability.
    #[arg(long, global = true, default_value_t = 0.2)]
    tau: f64,
    /// Loss weights as rank,gen,rag,aux.
    #[arg(long, global = true, default_value = "1,1,1,1")]
    lambda: Lambdas,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "continuous")]
    mode: RagMode,
    /// host:port of a model server to score with instead of the n-gram model.
    #[arg(long, global = true)]
    remote_lm: Option<String>,
    #[arg(long, global = true, default_value_t = 1.2)]
    bm25_k1: f64,
    #[arg(long, global = true, default_value_t = 0.75)]
    bm25_b: f64,
    /// Token budget per injected document.
    #[arg(long, global = true, default_value_t = DEFAULT_DOC_BUDGET)]
    budget: usize,
    /// n-gram order of the reference scorer.
    #[arg(long, global = true, default_value_t = 3)]
    order: usize,
    /// Add-alpha smoothing of the reference scorer.
    #[arg(long, global = true, default_value_t = 0.1)]
    alpha: f64,
    /// BM25 candidates handed to the reranker.
    #[arg(long, global = true, default_value_t = 100)]
    candidates: usize,
    /// Length of ranked DocID list targets.
    #[arg(long, global = true, default_value_t = 10)]
    list_k: usize,
    /// Documents sampled per DocID-understanding task.
    #[arg(long, global = true, default_value_t = 0)]
    aux_per_task: usize,
    /// Training examples the reference scorer is fitted on, besides the corpus.
    #[arg(long, global = true)]
    train_data: Option<PathBuf>,
    /// Directory written by `index`; its vocabulary and trie are reused.
    #[arg(long, global = true)]
    index: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a corpus and report its statistics.
    Ingest,
    /// Write vocabulary, DocID trie and manifest into the `--out` directory.
    Index,
    /// Build training examples from gold records and the corpus.
    Traindata,
    /// Decode a ranked DocID list for every gold query.
    Retrieve,
    /// Decode DocIDs, references and an answer for every gold query.
    Rag,
    /// Teacher-forced losses over a training example file.
    Loss {
        #[arg(long)]
        examples: PathBuf,
    },
    /// Score a prediction file against gold records.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum)]
        category: TaskCategory,
        /// Optional per-query table.
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
}

impl Opts {
    fn config(&self) -> Result<RunConfig> {
        if !(0.0..=1.0).contains(&self.tau) {
            bail!("--tau must lie in [0, 1], got {}", self.tau);
        }
        Ok(RunConfig {
            corpus: self.corpus.as_ref().map(|p| p.display().to_string()),
            gold: self.gold.as_ref().map(|p| p.display().to_string()),
            k_retrieve: self.k_retrieve,
            k_context: self.k_context,
            tau: self.tau,
            lambda: self.lambda,
            order: self.order,
            alpha: self.alpha,
            bm25: Bm25Params {
                k1: self.bm25_k1,
                b: self.bm25_b,
            },
            budget: self.budget,
            candidates: self.candidates,
            list_k: self.list_k,
            aux_per_task: self.aux_per_task,
            seed: self.seed,
            remote_lm: self.remote_lm.clone(),
            ..RunConfig::default()
        })
    }

    fn corpus(&self) -> Result<Corpus> {
        let path = self.corpus.as_deref().context("--corpus is required")?;
        ingest_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
    }

    fn golds(&self) -> Result<Vec<GoldRecord>> {
        let path = self.gold.as_deref().context("--gold is required")?;
        read_gold_file(path).with_context(|| format!("reading gold records {}", path.display()))
    }

    fn train_data(&self) -> Result<Vec<TrainingExample>> {
        match &self.train_data {
            Some(path) => read_example_file(path),
            None => Ok(Vec::new()),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn read_example_file(path: &Path) -> Result<Vec<TrainingExample>> {
    read_examples(open(path)?).with_context(|| format!("reading examples {}", path.display()))
}

/// Buffers the whole artifact so nothing is written when a command fails.
fn emit(out: Option<&Path>, body: &[u8]) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body)?;
            Ok(stdout.flush()?)
        }
    }
}

fn json_line(value: &serde_json::Value) -> String {
    let mut s = value.to_string();
    s.push('\n');
    s
}

fn pretty(value: &serde_json::Value) -> Vec<u8> {
    let mut body = serde_json::to_vec_pretty(value).expect("JSON value serializes");
    body.push(b'\n');
    body
}

/// Vocabulary, trie and scorer shared by the decoding commands.
struct Engine {
    vocab: Vocabulary,
    trie: DocIdTrie,
    lm: Box<dyn LmScorer>,
}

fn engine(opts: &Opts, config: &RunConfig, corpus: &Corpus) -> Result<Engine> {
    let examples = opts.train_data()?;
    let (vocab, trie) = match &opts.index {
        Some(dir) => {
            let vocab = Vocabulary::read_from(open(&dir.join("vocab.txt"))?)
                .context("reading vocab.txt")?;
            let trie = DocIdTrie::read_snapshot(open(&dir.join("trie.txt"))?, corpus, &vocab)
                .context("reading trie.txt")?;
            (vocab, trie)
        }
        None => {
            let texts: Vec<String> = examples.iter().map(TrainingExample::rendered).collect();
            let vocab = Vocabulary::build(corpus, &texts)?;
            let trie = DocIdTrie::build(corpus, &vocab)?;
            (vocab, trie)
        }
    };
    let lm: Box<dyn LmScorer> = match &config.remote_lm {
        Some(addr) => Box::new(RemoteLm::new(addr, vocab.len())?),
        None => {
            let mut streams = Vec::with_capacity(corpus.len() + examples.len());
            for doc in corpus.iter() {
                streams.push(vocab.encode_plain(&render_document(&*doc?, usize::MAX)));
            }
            streams.extend(examples.iter().map(|e| vocab.encode(&e.rendered())));
            Box::new(NgramLm::train(
                &streams,
                config.order,
                config.alpha,
                vocab.len(),
            )?)
        }
    };
    log::info!(
        "vocabulary {} tokens, trie {} DocIDs",
        vocab.len(),
        trie.len()
    );
    Ok(Engine { vocab, trie, lm })
}

fn cmd_ingest(opts: &Opts, config: &RunConfig) -> Result<()> {
    let corpus = opts.corpus()?;
    let report = json!({
        "config": config,
        "stats": corpus.stats(),
        "on_disk": corpus.is_on_disk(),
    });
    emit(opts.out.as_deref(), &pretty(&report))
}

fn cmd_index(opts: &Opts, config: &RunConfig) -> Result<()> {
    let dir = opts
        .out
        .as_deref()
        .context("--out directory is required for `index`")?;
    let corpus = opts.corpus()?;
    let examples = opts.train_data()?;
    let texts: Vec<String> = examples.iter().map(TrainingExample::rendered).collect();
    let vocab = Vocabulary::build(&corpus, &texts)?;
    let trie = DocIdTrie::build(&corpus, &vocab)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut vocab_file = Vec::new();
    vocab.write_to(&mut vocab_file)?;
    let mut trie_file = Vec::new();
    trie.write_snapshot(&mut trie_file)?;
    std::fs::write(dir.join("vocab.txt"), vocab_file)?;
    std::fs::write(dir.join("trie.txt"), trie_file)?;
    let manifest = json!({
        "config": config,
        "documents": corpus.len(),
        "vocab_size": vocab.len(),
        "trie_docids": trie.len(),
        "trie_nodes": trie.node_count(),
    });
    std::fs::write(dir.join("manifest.json"), pretty(&manifest))?;
    Ok(())
}

fn cmd_traindata(opts: &Opts, config: &RunConfig) -> Result<()> {
    let corpus = opts.corpus()?;
    let golds = opts.golds()?;
    let index = Bm25Index::build(&corpus, config.bm25)?;
    let mut builder = ListBuilder::new(&corpus, &index, &OverlapReranker);
    builder.candidates = config.candidates;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let examples = build_training_set(&builder, &golds, &config.factory(), &mut rng)?;
    let mut body = json_line(&json!({ "run_config": config })).into_bytes();
    write_examples(&mut body, &examples)?;
    emit(opts.out.as_deref(), &body)
}

fn cmd_retrieve(opts: &Opts, config: &RunConfig) -> Result<()> {
    let corpus = opts.corpus()?;
    let golds = opts.golds()?;
    let e = engine(opts, config, &corpus)?;
    let lines: Vec<String> = golds
        .par_iter()
        .map(|g| {
            let (ranked, cost) =
                generate_docid_list_traced(&*e.lm, &e.trie, &e.vocab, &g.input, config.k_retrieve)
                    .with_context(|| format!("query `{}`", g.query_id))?;
            Ok(json_line(&json!({
                "query_id": g.query_id,
                "docids": ranked.docids,
                "per_docid_logprob": ranked.per_docid_logprob,
                "cost": cost,
            })))
        })
        .collect::<Result<_>>()?;
    let mut body = config.header();
    body.push('\n');
    body.extend(lines);
    emit(opts.out.as_deref(), body.as_bytes())
}

fn cmd_rag(opts: &Opts, config: &RunConfig) -> Result<()> {
    let corpus = opts.corpus()?;
    let golds = opts.golds()?;
    let e = engine(opts, config, &corpus)?;
    let params = config.rag_params();
    let lines: Vec<String> = golds
        .par_iter()
        .map(|g| {
            let r = rag(
                &*e.lm, &e.trie, &corpus, &e.vocab, &g.input, &params, opts.mode,
            )
            .with_context(|| format!("query `{}`", g.query_id))?;
            Ok(json_line(&json!({
                "query_id": g.query_id,
                "docids": r.docids.docids,
                "per_docid_logprob": r.docids.per_docid_logprob,
                "context_docids": r.context_docids,
                "references": r.references,
                "answer": r.answer,
                "token_trace": r.token_trace,
                "empty_retrieval": r.empty_retrieval,
                "cost": r.decode_cost,
            })))
        })
        .collect::<Result<_>>()?;
    let mut header = serde_json::to_value(config)?;
    header["mode"] = serde_json::to_value(opts.mode)?;
    let mut body = json_line(&json!({ "run_config": header }));
    body.extend(lines);
    emit(opts.out.as_deref(), body.as_bytes())
}

fn cmd_loss(opts: &Opts, config: &RunConfig, examples: &Path) -> Result<()> {
    let corpus = opts.corpus()?;
    let e = engine(opts, config, &corpus)?;
    let batch = read_example_file(examples)?;
    let loss = combined_loss(&*e.lm, &e.vocab, &batch, config.lambda, config.tau)?;
    let report = json!({
        "config": config,
        "examples": batch.len(),
        "loss": loss,
    });
    emit(opts.out.as_deref(), &pretty(&report))
}

fn cmd_eval(
    opts: &Opts,
    config: &RunConfig,
    predictions: &Path,
    category: TaskCategory,
    per_query: Option<&Path>,
) -> Result<()> {
    let golds = opts.golds()?;
    let preds = read_predictions(open(predictions)?)
        .with_context(|| format!("reading {}", predictions.display()))?;
    let report = evaluate_run(&preds, &golds, category)?;
    if let Some(path) = per_query {
        let mut w = BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        write_per_query_tsv(&mut w, &report)?;
        w.flush()?;
    }
    let body = pretty(&json!({ "config": config, "report": report }));
    emit(opts.out.as_deref(), &body)
}

fn run(cli: Cli) -> Result<()> {
    let opts = &cli.opts;
    let config = opts.config()?;
    match &cli.command {
        Command::Ingest => cmd_ingest(opts, &config),
        Command::Index => cmd_index(opts, &config),
        Command::Traindata => cmd_traindata(opts, &config),
        Command::Retrieve => cmd_retrieve(opts, &config),
        Command::Rag => cmd_rag(opts, &config),
        Command::Loss { examples } => cmd_loss(opts, &config, examples),
        Command::Eval {
            predictions,
            category,
            per_query,
        } => cmd_eval(opts, &config, predictions, *category, per_query.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORPUSLM_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
