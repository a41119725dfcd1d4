use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use event_retriever::corpus::load_queries;
use event_retriever::embedding::TextEmbedder;
use event_retriever::fusion::fuse_submissions;
use event_retriever::metrics::weights::published_rows;
use event_retriever::metrics::{
    evaluate, fit_overall_weights, OverallWeights, Task, DEFAULT_RECALL_KS,
};
use event_retriever::pipeline::{
    build_index, embed_corpus, read_embeddings, write_embeddings, Pipeline, RetrievalRun,
};
use event_retriever::submission::{read_stage_records, write_stage_records, Stage, StageRecord};
use event_retriever::synthetic::{generate, SyntheticSpec};
use event_retriever::{
    Corpus, GroundTruth, PipelineConfig, SubmissionTable, VectorIndex, DEFAULT_RRF_K,
};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "event-retriever",
    version,
    about = "Event-centric image retrieval"
)]
struct Cli {
    /// Log filter, e.g. `info` or `event_retriever=debug`.
    #[arg(
        long,
        global = true,
        env = "EVENT_RETRIEVER_LOG",
        default_value = "info"
    )]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and print its size.
    Ingest {
        corpus: PathBuf,
        /// Write the validated corpus back out as JSONL.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed corpus documents (or query captions) to JSONL.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embed these captions instead of the corpus.
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Build the article index into the configured directory.
    Index {
        #[arg(long)]
        config: PathBuf,
        /// Use precomputed embeddings instead of calling the text provider.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Run all stages over a query set.
    Retrieve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        outputs: RunOutputs,
        /// Dense-retrieval pools as JSONL.
        #[arg(long)]
        dense_out: Option<PathBuf>,
    },
    /// Rerank saved dense pools and select images.
    RerankOnly {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Dense pools written by `retrieve --dense-out`.
        #[arg(long)]
        dense: PathBuf,
        #[command(flatten)]
        outputs: RunOutputs,
    },
    /// Fuse submission files with Reciprocal Rank Fusion.
    Fuse {
        #[arg(required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Smoothing constant; falls back to the config's `rrf_k`, then 60.
        #[arg(long)]
        rrf_k: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        output_len: usize,
        #[arg(long, default_value = "#")]
        pad_token: String,
    },
    /// Score a submission against ground truth.
    Eval {
        #[arg(long)]
        submission: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Image)]
        task: TaskArg,
        /// `default`, `uniform`, `none`, or a JSON/TOML file mapping metric
        /// names to weights.
        #[arg(long, default_value = "default")]
        weights: String,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RECALL_KS)]
        ks: Vec<usize>,
        #[arg(long, default_value = "#")]
        pad_token: String,
        /// Also write the report as JSON.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Serve `POST /retrieve` and `GET /health`.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Fit overall-score weights to leaderboard rows.
    FitWeights {
        /// CSV `mAP,MRR,R@1,R@5,R@10,overall`; defaults to the built-in rows.
        #[arg(long)]
        rows: Option<PathBuf>,
    },
    /// Write a synthetic corpus, planted queries, ground truth and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        articles: usize,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 7)]
        corpus_seed: u64,
        /// Seed written into the config for the local-test providers.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also build the index.
        #[arg(long)]
        build_index: bool,
    },
}

#[derive(Args)]
struct RunOutputs {
    /// Image submission CSV.
    #[arg(long)]
    out: PathBuf,
    /// Reranked article lists as JSONL.
    #[arg(long)]
    articles_out: Option<PathBuf>,
    /// Scored candidate pools as JSONL.
    #[arg(long)]
    candidates_out: Option<PathBuf>,
    /// Reranked articles as a submission CSV.
    #[arg(long)]
    article_submission: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Image,
    Article,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Image => Task::Image,
            TaskArg::Article => Task::Article,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&cli.log).context("invalid --log filter")?)
        .with_writer(std::io::stderr)
        .init();
    match cli.command {
        Command::Ingest { corpus, out } => ingest(&corpus, out.as_deref()),
        Command::Embed {
            config,
            out,
            queries,
        } => embed(&config, &out, queries.as_deref()),
        Command::Index { config, embeddings } => {
            println!("{}", index(&config, embeddings.as_deref())?);
            Ok(())
        }
        Command::Retrieve {
            config,
            queries,
            outputs,
            dense_out,
        } => {
            let pipeline = Pipeline::open(PipelineConfig::load(&config)?)?;
            let queries = load_queries(&queries)?;
            let run = pipeline.run_retrieval(&queries)?;
            if let Some(p) = dense_out {
                write_records(&p, &run.dense_records())?;
            }
            write_outputs(&run, &outputs)
        }
        Command::RerankOnly {
            config,
            queries,
            dense,
            outputs,
        } => {
            let pipeline = Pipeline::open(PipelineConfig::load(&config)?)?;
            let queries = load_queries(&queries)?;
            let pools: Vec<_> = read_records(&dense)?
                .iter()
                .filter(|r| r.stage == Stage::Articles)
                .map(StageRecord::to_ranked_list)
                .collect();
            let run = pipeline.run_from_dense(&queries, &pools)?;
            write_outputs(&run, &outputs)
        }
        Command::Fuse {
            runs,
            out,
            rrf_k,
            config,
            output_len,
            pad_token,
        } => {
            let k = match (rrf_k, config) {
                (Some(k), _) => k,
                (None, Some(c)) => PipelineConfig::load(&c)?.rrf_k,
                (None, None) => DEFAULT_RRF_K,
            };
            let tables = runs
                .iter()
                .map(|p| read_submission(p, &pad_token, output_len))
                .collect::<Result<Vec<_>>>()?;
            let fused = fuse_submissions(tables, k, output_len)?;
            write_submission(&out, &fused)?;
            tracing::info!(runs = runs.len(), rrf_k = k, rows = fused.len(), "fused");
            Ok(())
        }
        Command::Eval {
            submission,
            truth,
            task,
            weights,
            ks,
            pad_token,
            json_out,
        } => {
            let sub = read_submission(&submission, &pad_token, 10)?;
            let truth = GroundTruth::read_csv(open(&truth)?)?;
            let weights = parse_weights(&weights)?;
            let report = evaluate(&sub, &truth, task.into(), &ks, weights.as_ref())?;
            print!("{}", report.to_table());
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(p) = json_out {
                std::fs::write(&p, json + "\n")
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Command::Serve { config, addr } => {
            let pipeline = Pipeline::open(PipelineConfig::load(&config)?)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(event_retriever_server::serve(pipeline, addr))
                .with_context(|| format!("serving on {addr}"))
        }
        Command::FitWeights { rows } => fit_weights(rows.as_deref()),
        Command::Synth {
            out,
            articles,
            queries,
            corpus_seed,
            seed,
            build_index: build,
        } => {
            let fixture = generate(&SyntheticSpec {
                articles,
                queries,
                seed: corpus_seed,
                ..SyntheticSpec::default()
            });
            let paths = fixture.write_to(&out, seed)?;
            if build {
                let summary = index(&paths.config, None)?;
                tracing::info!(%summary, "index built");
            }
            println!("{}", paths.config.display());
            Ok(())
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_submission(path: &Path, pad: &str, default_len: usize) -> Result<SubmissionTable> {
    SubmissionTable::read_csv(open(path)?, pad, default_len)
        .with_context(|| format!("reading {}", path.display()))
}

fn write_submission(path: &Path, table: &SubmissionTable) -> Result<()> {
    let mut w = create(path)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<StageRecord>> {
    read_stage_records(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn write_records(path: &Path, records: &[StageRecord]) -> Result<()> {
    let mut w = create(path)?;
    write_stage_records(records, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_outputs(run: &RetrievalRun, o: &RunOutputs) -> Result<()> {
    write_submission(&o.out, &run.submission()?)?;
    if let Some(p) = &o.articles_out {
        write_records(p, &run.article_records())?;
    }
    if let Some(p) = &o.candidates_out {
        write_records(p, &run.candidate_records())?;
    }
    if let Some(p) = &o.article_submission {
        write_submission(p, &run.article_submission()?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    articles: usize,
    images: usize,
    articles_without_images: usize,
}

fn ingest(path: &Path, out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::ingest(path)?;
    let summary = IngestSummary {
        articles: corpus.article_count(),
        images: corpus.image_count(),
        articles_without_images: corpus
            .articles()
            .iter()
            .filter(|a| a.image_ids.is_empty())
            .count(),
    };
    println!("{}", serde_json::to_string(&summary)?);
    if let Some(out) = out {
        let mut w = create(out)?;
        corpus.write_jsonl(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn embed(config: &Path, out: &Path, queries: Option<&Path>) -> Result<()> {
    let cfg = PipelineConfig::load(config)?;
    let embedder =
        TextEmbedder::from_spec(cfg.providers.text.clone(), cfg.seed, Default::default())?;
    let entries = match queries {
        Some(q) => {
            let queries = load_queries(q)?;
            let texts: Vec<&str> = queries.iter().map(|q| q.caption.as_str()).collect();
            let vectors = if texts.is_empty() {
                Vec::new()
            } else {
                embedder.embed_texts(&texts)?
            };
            queries
                .iter()
                .zip(vectors)
                .map(|(q, v)| event_retriever::index::IndexEntry::new(q.query_id.clone(), v))
                .collect()
        }
        None => embed_corpus(&Corpus::ingest(&cfg.corpus)?, &embedder)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_embeddings(&entries, out)?;
    tracing::info!(count = entries.len(), out = %out.display(), "embeddings written");
    Ok(())
}

fn index(config: &Path, embeddings: Option<&Path>) -> Result<serde_json::Value> {
    let cfg = PipelineConfig::load(config)?;
    let corpus = Corpus::ingest(&cfg.corpus)?;
    let index = match embeddings {
        Some(p) => {
            let entries = read_embeddings(p)?;
            if let Some(e) = entries
                .iter()
                .find(|e| corpus.article(&e.item_id).is_none())
            {
                bail!("embedding {:?} does not name a corpus article", e.item_id);
            }
            VectorIndex::build(entries, cfg.index.clone())?
        }
        None => build_index(&cfg, &corpus)?,
    };
    index.save(&cfg.index_dir)?;
    Ok(serde_json::json!({
        "index_dir": cfg.index_dir,
        "count": index.len(),
        "dim": index.dim(),
        "backend": cfg.index.name(),
    }))
}

fn parse_weights(spec: &str) -> Result<Option<OverallWeights>> {
    let w = match spec {
        "none" => return Ok(None),
        "default" => OverallWeights::default(),
        "uniform" => OverallWeights::uniform(),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            if path.ends_with(".toml") {
                toml::from_str(&text)?
            } else {
                serde_json::from_str(&text)?
            }
        }
    };
    w.validate()?;
    Ok(Some(w))
}

fn fit_weights(rows: Option<&Path>) -> Result<()> {
    let rows = match rows {
        None => published_rows(),
        Some(p) => {
            let mut r = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_reader(open(p)?);
            let mut rows = Vec::new();
            for (i, rec) in r.records().enumerate() {
                let rec = rec?;
                if i == 0 && rec.get(0).is_some_and(|c| c.parse::<f64>().is_err()) {
                    continue;
                }
                let vals = rec
                    .iter()
                    .map(|c| c.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .with_context(|| format!("row {}", i + 1))?;
                if vals.len() != 6 {
                    bail!("row {}: expected 6 columns, found {}", i + 1, vals.len());
                }
                rows.push(([vals[0], vals[1], vals[2], vals[3], vals[4]], vals[5]));
            }
            rows
        }
    };
    if rows.is_empty() {
        bail!("no rows to fit");
    }
    let fit = fit_overall_weights(&rows);
    println!("{}", serde_json::to_string_pretty(&fit)?);
    Ok(())
}
