//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p event-retriever-cli --test acceptance`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use event_retriever::embedding::format_document;
use event_retriever::image_stage::{collect_candidates, rank_aware_select};
use event_retriever::index::IndexEntry;
use event_retriever::metrics::weights::{
    fit_overall_weights, published_rows, OverallWeights, DEFAULT_FIT_RMSE, PUBLISHED_ROWS,
};
use event_retriever::metrics::{map_single_relevant, mrr, recall_at_k, Task};
use event_retriever::rerank::DEFAULT_INSTRUCT;
use event_retriever::{
    assemble_prompt, fuse_submissions, rrf_fuse, score_yes_from_logits, Article, CandidateImage,
    EmbeddingVector, GroundTruth, IndexBackend, MetricReport, PipelineConfig, RankedList,
    RerankRequest, RunSet, ScoredItem, StageConfig, SubmissionTable, VectorIndex,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const BIN: &str = env!("CARGO_BIN_EXE_event-retriever");
const GOLDEN_PROMPT: &str = include_str!("../../core/tests/golden/flood_prompt.txt");

fn main() {
    let criteria: &[Criterion] = &[
        ("exact-index oracle", exact_index_oracle),
        ("ann recall", ann_recall),
        ("prompt golden file", prompt_golden),
        ("logit scoring", logit_scoring),
        ("stage-3 hand traces", stage3_traces),
        ("rrf", rrf),
        ("metrics", metrics),
        ("end-to-end determinism and correctness", end_to_end),
        ("service equivalence", service_equivalence),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS  {name} ({secs:.2}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.2}s): {why}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    EmbeddingVector::normalized(v).unwrap()
}

fn random_entries(n: usize, dim: usize, seed: u64) -> Vec<IndexEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| IndexEntry::new(format!("doc{i:05}"), random_unit(&mut rng, dim)))
        .collect()
}

fn brute_force(entries: &[IndexEntry], q: &[f32], k: usize) -> Vec<String> {
    let mut scored: Vec<(f32, &str)> = entries
        .iter()
        .map(|e| {
            let s: f32 = e.vector.as_slice().iter().zip(q).map(|(a, b)| a * b).sum();
            (s, e.item_id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| match b.0.partial_cmp(&a.0).unwrap() {
        Ordering::Equal => a.1.cmp(b.1),
        o => o,
    });
    scored
        .into_iter()
        .take(k)
        .map(|(_, id)| id.to_string())
        .collect()
}

fn ids(items: Vec<ScoredItem>) -> Vec<String> {
    items.into_iter().map(|s| s.id).collect()
}

fn exact_index_oracle() -> Outcome {
    let data = random_entries(1000, 16, 11);
    let t0 = Instant::now();
    let index = VectorIndex::build(data.clone(), IndexBackend::Exact).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in 0..100 {
        let q = random_unit(&mut rng, 16);
        let got = ids(index.top_k(q.as_slice(), 10).map_err(|e| e.to_string())?);
        ensure!(
            got == brute_force(&data, q.as_slice(), 10),
            "query {n} differs"
        );
    }
    let elapsed = t0.elapsed();

    // Duplicated vectors tie; ids break the tie ascending.
    let v = data[0].vector.clone();
    let tied = vec![
        IndexEntry::new("c", v.clone()),
        IndexEntry::new("a", v.clone()),
        IndexEntry::new("b", v.clone()),
    ];
    let index = VectorIndex::build(tied, IndexBackend::Exact).map_err(|e| e.to_string())?;
    let got = ids(index.top_k(v.as_slice(), 3).map_err(|e| e.to_string())?);
    ensure!(got == ["a", "b", "c"], "tie order {got:?}");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(())
}

fn ann_recall() -> Outcome {
    let data = random_entries(10_000, 64, 21);
    let exact = VectorIndex::build(data.clone(), IndexBackend::Exact).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let ann = VectorIndex::build(data, IndexBackend::ann()).map_err(|e| e.to_string())?;
    let build = t0.elapsed();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let queries = 200;
    let mut hits = 0usize;
    for _ in 0..queries {
        let q = random_unit(&mut rng, 64);
        let truth = ids(exact.top_k(q.as_slice(), 10).map_err(|e| e.to_string())?);
        let got = ids(ann.top_k(q.as_slice(), 10).map_err(|e| e.to_string())?);
        hits += got.iter().filter(|id| truth.contains(id)).count();
    }
    let recall = hits as f64 / (queries * 10) as f64;
    println!(
        "      recall@10 = {recall:.4}, build = {:.2}s",
        build.as_secs_f64()
    );
    ensure!(recall >= 0.95, "recall@10 {recall:.4} < 0.95");
    ensure!(build < Duration::from_secs(60), "build took {build:?}");
    Ok(())
}

fn prompt_golden() -> Outcome {
    let article = Article {
        article_id: "hanoi-flood".into(),
        title: "Torrential Rain Causes Flooding in Hanoi".into(),
        pub_date: "October 14, 2023".into(),
        content: "Several major roads in Hanoi were submerged...".into(),
        image_ids: Vec::new(),
    };
    let req = RerankRequest::new(
        DEFAULT_INSTRUCT,
        "A flooded road after heavy rain in Hanoi.",
        format_document(&article, 8192),
    )
    .map_err(|e| e.to_string())?;
    let prompt = assemble_prompt(&req);
    ensure!(prompt == GOLDEN_PROMPT, "prompt differs from golden file");
    ensure!(
        prompt.contains(
            "Judge whether the Document meets the requirements based on the Query and the Instruct provided."
        ),
        "system sentence missing"
    );
    ensure!(
        prompt.ends_with("<think>\n\n</think>\n\n"),
        "empty think block missing"
    );
    Ok(())
}

fn p_yes(yes: f64, no: f64) -> Result<f64, String> {
    score_yes_from_logits(yes, no)
        .map(|s| s.value())
        .map_err(|e| e.to_string())
}

fn logit_scoring() -> Outcome {
    ensure!(p_yes(0.0, 0.0)? == 0.5, "(0, 0) is not exactly 0.5");
    let p = p_yes(3f64.ln(), 0.0)?;
    ensure!((p - 0.75).abs() <= 1e-9, "(ln 3, 0) gave {p}");
    let p = p_yes(1000.0, -1000.0)?;
    ensure!(p == 1.0, "(1000, -1000) gave {p}");
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10_000 {
        let a: f64 = rng.random_range(-50.0..50.0);
        let b: f64 = rng.random_range(-50.0..50.0);
        let sum = p_yes(a, b)? + p_yes(b, a)?;
        ensure!(
            (sum - 1.0).abs() <= 1e-9,
            "complement broken at ({a}, {b}): {sum}"
        );
    }
    Ok(())
}

fn ranked_with_counts(counts: &[usize]) -> (RankedList, HashMap<String, Vec<String>>) {
    let mut images = HashMap::new();
    let mut entries = Vec::new();
    for (r, &n) in counts.iter().enumerate() {
        let id = format!("r{}", r + 1);
        images.insert(
            id.clone(),
            (0..n).map(|j| format!("r{}-{j}", r + 1)).collect(),
        );
        entries.push(ScoredItem::new(id, 0.99 - r as f32 * 0.01));
    }
    (RankedList::new("q", entries), images)
}

fn scored(rank: usize, scores: &[f32]) -> Vec<CandidateImage> {
    scores
        .iter()
        .enumerate()
        .map(|(j, &s)| CandidateImage {
            image_id: format!("r{rank}-{j}"),
            source_article_id: format!("r{rank}"),
            article_rank: rank,
            score: s,
        })
        .collect()
}

fn stage3_traces() -> Outcome {
    let cfg = StageConfig::default();

    let (ranked, images) = ranked_with_counts(&[4; 10]);
    let c = collect_candidates(&ranked, &images, &cfg);
    let last = c.iter().map(|x| x.article_rank).max();
    ensure!(
        c.len() == 12 && last == Some(3),
        "stop-at-rank-3: {} candidates, last rank {last:?}",
        c.len()
    );

    let mut counts = vec![12, 5, 2];
    counts.extend([3; 7]);
    let (ranked, images) = ranked_with_counts(&counts);
    let c = collect_candidates(&ranked, &images, &cfg);
    ensure!(
        c.len() == 19,
        "distinct-article bound: {} candidates",
        c.len()
    );

    let (ranked, images) = ranked_with_counts(&[2, 1, 0, 1]);
    let small = StageConfig {
        k: 4,
        ..cfg.clone()
    };
    let got: Vec<String> = collect_candidates(&ranked, &images, &small)
        .into_iter()
        .map(|x| x.image_id)
        .collect();
    ensure!(
        got == ["r1-0", "r1-1", "r2-0", "r4-0"],
        "exhaustion: {got:?}"
    );

    let mut c = scored(1, &[0.5, 0.9, 0.7, 0.6]);
    c.extend(scored(2, &[0.8, 0.2, 0.3, 0.4]));
    c.extend(scored(3, &[0.1, 0.95, 0.85, 0.75]));
    let got = rank_aware_select(&c, &cfg);
    let want = [
        "r1-1", "r1-2", "r1-3", "r2-0", "r2-3", "r2-2", "r3-1", "r3-2", "r3-3", "r1-0",
    ];
    ensure!(got == want, "9+1 overflow: {got:?}");

    let got = rank_aware_select(&scored(1, &[0.3, 0.6]), &cfg);
    let mut want = vec!["r1-1", "r1-0"];
    want.extend(["#"; 8]);
    ensure!(got == want, "2+8 pads: {got:?}");

    let s: Vec<f32> = (0..12).map(|j| 0.12 - j as f32 * 0.01).collect();
    let got = rank_aware_select(&scored(1, &s), &cfg);
    let want: Vec<String> = (0..10).map(|j| format!("r1-{j}")).collect();
    ensure!(got == want, "3+7 same-article overflow: {got:?}");
    Ok(())
}

fn table(rows: &[(&str, &[&str])]) -> SubmissionTable {
    let mut t = SubmissionTable::new(10, "#").unwrap();
    for (q, ids) in rows {
        t.push_row(*q, ids.iter().map(|s| s.to_string()).collect())
            .unwrap();
    }
    t
}

fn rrf() -> Outcome {
    let single =
        RunSet::new(vec![table(&[("q", &["a", "b", "c"])])], 60.0).map_err(|e| e.to_string())?;
    let scores = single.scores("q").map_err(|e| e.to_string())?;
    let want = vec![
        ("a".to_string(), 1.0 / 61.0),
        ("b".to_string(), 1.0 / 62.0),
        ("c".to_string(), 1.0 / 63.0),
    ];
    ensure!(scores == want, "single run: {scores:?}");

    let consensus = RunSet::new(
        vec![
            table(&[("q", &["a", "c", "d"])]),
            table(&[("q", &["b", "c", "e"])]),
        ],
        60.0,
    )
    .map_err(|e| e.to_string())?;
    let fused = rrf_fuse(&consensus, "q", 10, "#").map_err(|e| e.to_string())?;
    ensure!(fused[0] == "c", "consensus fixture: {fused:?}");
    ensure!(2.0 / 62.0 > 1.0 / 61.0, "2/62 should beat 1/61");

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let pool: Vec<String> = (0..25).map(|i| format!("img{i:02}")).collect();
    let mut runs = Vec::new();
    for _ in 0..5 {
        let mut t = SubmissionTable::new(10, "#").unwrap();
        for q in 0..20 {
            let mut ids = pool.clone();
            ids.shuffle(&mut rng);
            ids.truncate(rng.random_range(3..=10));
            t.push_row(format!("q{q:02}"), ids).unwrap();
        }
        runs.push(t);
    }
    let baseline = fuse_submissions(runs.clone(), 60.0, 10)
        .map_err(|e| e.to_string())?
        .to_csv_string();
    for n in 0..100 {
        runs.shuffle(&mut rng);
        let got = fuse_submissions(runs.clone(), 60.0, 10)
            .map_err(|e| e.to_string())?
            .to_csv_string();
        ensure!(got == baseline, "permutation {n} changed the fused output");
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(dir.path().join("corpus.jsonl"), "").map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("config.toml");
    let mut text = PipelineConfig::local("corpus.jsonl", "index")
        .to_toml_string()
        .map_err(|e| e.to_string())?;
    text = text
        .lines()
        .filter(|l| !l.starts_with("rrf_k"))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&cfg_path, text).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    ensure!(cfg.rrf_k == 60.0, "config default rrf_k {}", cfg.rrf_k);
    Ok(())
}

fn metrics() -> Outcome {
    let mut truth = GroundTruth::new();
    for q in ["q1", "q2", "q3", "q4"] {
        truth.insert(q, "art", "hit").unwrap();
    }
    let sub = table(&[
        ("q1", &["hit", "x1", "x2"]),
        ("q2", &["x1", "x2", "hit", "x3"]),
        ("q3", &["x1", "x2", "x3", "x4", "x5", "x6", "hit"]),
        ("q4", &["x1", "x2"]),
    ]);
    let t = Task::Image;
    let r = |k| recall_at_k(&sub, &truth, t, k).map_err(|e| e.to_string());
    ensure!(r(1)? == 0.25, "R@1 {}", r(1)?);
    ensure!(r(5)? == 0.5, "R@5 {}", r(5)?);
    ensure!(r(10)? == 0.75, "R@10 {}", r(10)?);
    let m = mrr(&sub, &truth, t).map_err(|e| e.to_string())?;
    let want = (1.0 + 1.0 / 3.0 + 1.0 / 7.0 + 0.0) / 4.0;
    ensure!(m == want, "MRR {m} != {want}");

    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let pool: Vec<String> = (0..30).map(|i| format!("i{i:02}")).collect();
    let mut truth = GroundTruth::new();
    let mut sub = SubmissionTable::new(10, "#").unwrap();
    for q in 0..200 {
        let qid = format!("q{q:03}");
        let rel = &pool[rng.random_range(0..pool.len())];
        truth.insert(&qid, "art", rel).unwrap();
        let mut ids = pool.clone();
        ids.shuffle(&mut rng);
        ids.truncate(rng.random_range(0..=10));
        sub.push_row(qid, ids).unwrap();
    }
    let map = map_single_relevant(&sub, &truth, t).map_err(|e| e.to_string())?;
    let m = mrr(&sub, &truth, t).map_err(|e| e.to_string())?;
    ensure!(map == m, "mAP {map} != MRR {m}");

    let row = [0.525, 0.525, 0.426, 0.657, 0.720];
    let uniform = OverallWeights::uniform()
        .apply(&row)
        .map_err(|e| e.to_string())?;
    ensure!((uniform - 0.5706).abs() < 1e-9, "uniform overall {uniform}");
    ensure!(
        (uniform - 0.5378).abs() > 0.03,
        "uniform weights unexpectedly reproduce 0.5378"
    );
    let rows = published_rows();
    let fit = fit_overall_weights(&rows);
    ensure!(
        rows.len() == PUBLISHED_ROWS.len() && fit.residuals.len() == rows.len(),
        "fit did not cover every row"
    );
    let total: f64 = fit.weights.iter().sum();
    ensure!(
        (total - 1.0).abs() < 1e-9 && fit.weights.iter().all(|w| *w >= 0.0),
        "fitted weights off the simplex: {:?}",
        fit.weights
    );
    ensure!(
        (fit.rmse - DEFAULT_FIT_RMSE).abs() < 1e-9,
        "fit rmse {}",
        fit.rmse
    );
    println!(
        "      uniform overall = {uniform:.4}; fitted weights {:?}, rmse {:.4}",
        fit.weights, fit.rmse
    );
    Ok(())
}

fn run(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("EVENT_RETRIEVER_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

struct Batch {
    config: PathBuf,
    queries: PathBuf,
    images: PathBuf,
    articles: PathBuf,
}

/// synth, index and retrieve through the binary.
fn batch(dir: &Path) -> Result<Batch, String> {
    let d = dir.to_str().unwrap();
    let config = PathBuf::from(run(&["synth", "--out", d, "--build-index"])?.trim());
    let b = Batch {
        queries: dir.join("queries.jsonl"),
        images: dir.join("images.csv"),
        articles: dir.join("articles.csv"),
        config,
    };
    run(&[
        "retrieve",
        "--config",
        b.config.to_str().unwrap(),
        "--queries",
        b.queries.to_str().unwrap(),
        "--out",
        b.images.to_str().unwrap(),
        "--article-submission",
        b.articles.to_str().unwrap(),
    ])?;
    Ok(b)
}

fn recall_at_1(dir: &Path, submission: &Path, task: &str) -> Result<f64, String> {
    let json = dir.join(format!("eval-{task}.json"));
    run(&[
        "eval",
        "--submission",
        submission.to_str().unwrap(),
        "--truth",
        dir.join("ground_truth.csv").to_str().unwrap(),
        "--task",
        task,
        "--json-out",
        json.to_str().unwrap(),
    ])?;
    let text = std::fs::read_to_string(json).map_err(|e| e.to_string())?;
    let report: MetricReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure!(
        report.queries == 100,
        "{} queries evaluated",
        report.queries
    );
    Ok(report.recall_at[&1])
}

fn end_to_end() -> Outcome {
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let a = batch(first.path())?;
    let elapsed = t0.elapsed();
    let b = batch(second.path())?;

    let articles = recall_at_1(first.path(), &a.articles, "article")?;
    let images = recall_at_1(first.path(), &a.images, "image")?;
    ensure!(articles == 1.0, "article Recall@1 {articles}");
    ensure!(images == 1.0, "image Recall@1 {images}");
    for (x, y) in [(&a.images, &b.images), (&a.articles, &b.articles)] {
        let x = std::fs::read(x).map_err(|e| e.to_string())?;
        let y = std::fs::read(y).map_err(|e| e.to_string())?;
        ensure!(
            !x.is_empty() && x == y,
            "submission CSVs differ between runs"
        );
    }
    ensure!(
        elapsed < Duration::from_secs(120),
        "pipeline took {elapsed:?}"
    );
    println!("      one full run = {:.2}s", elapsed.as_secs_f64());
    Ok(())
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .and_then(|l| l.local_addr())
        .map(|a| a.port())
        .unwrap()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

fn service_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = batch(dir.path())?;
    let rows = SubmissionTable::read_csv(
        std::fs::File::open(&b.images).map_err(|e| e.to_string())?,
        "#",
        10,
    )
    .map_err(|e| e.to_string())?;
    let queries = event_retriever::corpus::load_queries(&b.queries).map_err(|e| e.to_string())?;

    let addr = format!("127.0.0.1:{}", free_port());
    let _server = Server(
        Command::new(BIN)
            .args([
                "serve",
                "--config",
                b.config.to_str().unwrap(),
                "--addr",
                &addr,
            ])
            .env("EVENT_RETRIEVER_LOG", "warn")
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?,
    );
    let base = format!("http://{addr}");
    let agent = agent();
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        if let Ok(r) = agent.get(&format!("{base}/health")).call() {
            if r.status() == 200 {
                break;
            }
        }
        ensure!(Instant::now() < deadline, "service did not come up");
        std::thread::sleep(Duration::from_millis(100));
    }

    for q in queries.iter().take(20) {
        let mut resp = agent
            .post(&format!("{base}/retrieve"))
            .send_json(json!({"caption": q.caption, "query_id": q.query_id}))
            .map_err(|e| e.to_string())?;
        ensure!(
            resp.status() == 200,
            "{}: status {}",
            q.query_id,
            resp.status()
        );
        let body: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        let got: Vec<String> =
            serde_json::from_value(body["image_ids"].clone()).map_err(|e| e.to_string())?;
        ensure!(
            Some(got.clone()) == rows.padded(&q.query_id),
            "{}: service {got:?} vs batch {:?}",
            q.query_id,
            rows.padded(&q.query_id)
        );
    }
    Ok(())
}
