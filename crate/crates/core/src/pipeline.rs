//! Stage orchestration: ingest → build → fit → score → metrics → regress →
//! report, with config-hash-stamped outputs, a run manifest, and a snapshot /
//! model cache that refuses to serve artifacts built under a different config.

use crate::citemetrics::{metrics_for_corpus, write_metrics_csv, CitationGraph};
use crate::config::RunConfig;
use crate::corpus::{ingest_corpus, Corpus, Gender, IngestPaths};
use crate::embedding::{fit, read_model, write_model, EmbeddingModel};
use crate::error::{Error, Result};
use crate::hypergraph::{
    build_snapshot_with_vocab, build_vocab, draw_negatives, merge_history, read_snapshot,
    write_snapshot, Channel, HypergraphSnapshot, NodeVocab, SnapshotKey,
};
use crate::regression::{
    fit_model, format_text_table, write_report_csv, Column, ModelSpec, RegressionResult, Table,
};
use crate::scoring::{score_corpus, write_scores_csv};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Everything a stage needs besides its own section of the config.
pub struct PipelineCtx {
    pub config: RunConfig,
    pub config_hash: String,
    pub channels: Vec<Channel>,
    /// Override a stale cache / mixed-hash refusal and rebuild.
    pub force: bool,
}

impl PipelineCtx {
    pub fn new(config: RunConfig, channels: Vec<Channel>, force: bool) -> Self {
        let config_hash = config.hash();
        PipelineCtx {
            config,
            config_hash,
            channels,
            force,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.paths.out_dir.join(name)
    }

    fn cache(&self, name: &str) -> PathBuf {
        self.config.paths.cache_dir().join(name)
    }

    fn ensure_dirs(&self) -> Result<()> {
        for dir in [&self.config.paths.out_dir, &self.config.paths.cache_dir()] {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn ingest_paths(&self) -> IngestPaths {
        IngestPaths::in_dir(&self.config.paths.data_dir)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        ingest_corpus(&self.ingest_paths(), &self.config.ingest)
    }
}

/// Hash of the four input files, in fixed order.
pub fn corpus_hash(paths: &IngestPaths) -> Result<String> {
    let mut h = Sha256::new();
    for path in [&paths.papers, &paths.authors, &paths.citations, &paths.names] {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

/// Sidecar stamped next to every output file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Meta {
    pub stage: String,
    pub config_hash: String,
    pub corpus_hash: String,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_meta(path: &Path, meta: &Meta) -> Result<()> {
    let mp = meta_path(path);
    std::fs::write(&mp, serde_json::to_string_pretty(meta).unwrap())
        .map_err(|e| Error::io(mp.display().to_string(), e))
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let mp = meta_path(path);
    let text =
        std::fs::read_to_string(&mp).map_err(|e| Error::io(mp.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("{}: bad sidecar: {e}", mp.display())))
}

/// Error unless `path` exists; names the stage that should have produced it.
fn require_output(path: &Path, producing_stage: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::validation(format!(
            "missing {}; run the `{producing_stage}` stage first",
            path.display()
        )));
    }
    Ok(())
}

/// StaleCache unless the sidecar matches the current hashes (or force).
fn check_meta(ctx: &PipelineCtx, path: &Path, corpus: &str) -> Result<()> {
    if ctx.force {
        return Ok(());
    }
    let meta = read_meta(path)?;
    if meta.config_hash != ctx.config_hash || meta.corpus_hash != corpus {
        return Err(Error::StaleCache(format!(
            "{} was produced under config {} / corpus {}, current is {} / {}; rerun the producing stage or pass --force",
            path.display(),
            meta.config_hash,
            meta.corpus_hash,
            ctx.config_hash,
            corpus
        )));
    }
    Ok(())
}

fn append_manifest(ctx: &PipelineCtx, stage: &str, corpus: &str, outputs: &[PathBuf], wall_ms: u128) -> Result<()> {
    let path = ctx.out("manifest.jsonl");
    let line = serde_json::json!({
        "stage": stage,
        "config_hash": ctx.config_hash,
        "corpus_hash": corpus,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "wall_ms": wall_ms,
    });
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestSummary {
    n_papers: usize,
    n_authors: usize,
    n_citations: usize,
    warnings: u64,
    year_min: i32,
    year_max: i32,
    corpus_hash: String,
}

pub fn stage_synth(ctx: &PipelineCtx) -> Result<()> {
    let t = Instant::now();
    let out = crate::synth::generate(&ctx.config.synth, &ctx.config.paths.data_dir)?;
    ctx.ensure_dirs()?;
    let corpus = corpus_hash(&ctx.ingest_paths())?;
    append_manifest(ctx, "synth", &corpus, &[ctx.config.paths.data_dir.clone()], t.elapsed().as_millis())?;
    eprintln!(
        "synth: {} papers, {} citations -> {}",
        out.summary.n_papers_realized,
        out.summary.n_citations,
        ctx.config.paths.data_dir.display()
    );
    Ok(())
}

pub fn stage_ingest(ctx: &PipelineCtx) -> Result<()> {
    let t = Instant::now();
    ctx.ensure_dirs()?;
    let corpus = ctx.load_corpus()?;
    let chash = corpus_hash(&ctx.ingest_paths())?;
    let (year_min, year_max) = corpus.year_range().ok_or_else(|| Error::validation("empty corpus".to_string()))?;
    let summary = IngestSummary {
        n_papers: corpus.papers.len(),
        n_authors: corpus.authors.len(),
        n_citations: corpus.citations.len(),
        warnings: corpus.warnings,
        year_min,
        year_max,
        corpus_hash: chash.clone(),
    };
    let path = ctx.out("ingest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    write_meta(&path, &Meta { stage: "ingest".into(), config_hash: ctx.config_hash.clone(), corpus_hash: chash.clone() })?;
    append_manifest(ctx, "ingest", &chash, &[path], t.elapsed().as_millis())?;
    eprintln!(
        "ingest: {} papers, {} authors, {} citation edges, {} warnings",
        summary.n_papers, summary.n_authors, summary.n_citations, summary.warnings
    );
    Ok(())
}

fn snapshot_file(ch: Channel, year: i32) -> String {
    format!("snap_{}_{year}.bin", ch.as_str())
}

fn model_file(ch: Channel, year: i32) -> String {
    format!("model_{}_{year}.bin", ch.as_str())
}

pub fn stage_build(ctx: &PipelineCtx) -> Result<()> {
    let t = Instant::now();
    require_output(&ctx.out("ingest.json"), "ingest")?;
    check_meta(ctx, &ctx.out("ingest.json"), &corpus_hash(&ctx.ingest_paths())?)?;
    ctx.ensure_dirs()?;
    let corpus = ctx.load_corpus()?;
    let chash = corpus_hash(&ctx.ingest_paths())?;
    let (lo, hi) = corpus.year_range().unwrap();
    let key = SnapshotKey { corpus_hash: chash.clone(), config_hash: ctx.config_hash.clone() };
    let mut outputs = Vec::new();
    for &ch in &ctx.channels {
        let vocab = Arc::new(build_vocab(&corpus, ch, None, &ctx.config.build));
        for year in lo..=hi {
            let path = ctx.cache(&snapshot_file(ch, year));
            if path.exists() && !ctx.force {
                if let Ok((_, existing)) = read_snapshot(&path) {
                    if existing == key {
                        continue; // up to date
                    }
                }
                return Err(Error::StaleCache(format!(
                    "{} was built under a different config/corpus; pass --force to rebuild",
                    path.display()
                )));
            }
            let snap = build_snapshot_with_vocab(&corpus, ch, year, Arc::clone(&vocab), &ctx.config.build);
            write_snapshot(&path, &snap, &key)?;
            outputs.push(path);
        }
    }
    let stamp = ctx.out("build.json");
    std::fs::write(&stamp, serde_json::json!({"years": [lo, hi]}).to_string())
        .map_err(|e| Error::io(stamp.display().to_string(), e))?;
    write_meta(&stamp, &Meta { stage: "build".into(), config_hash: ctx.config_hash.clone(), corpus_hash: chash.clone() })?;
    append_manifest(ctx, "build", &chash, &outputs, t.elapsed().as_millis())?;
    eprintln!("build: snapshots for {lo}..={hi} on {} channel(s)", ctx.channels.len());
    Ok(())
}

fn load_snapshots(ctx: &PipelineCtx, ch: Channel, lo: i32, hi: i32, key: &SnapshotKey) -> Result<Vec<HypergraphSnapshot>> {
    let mut snaps = Vec::new();
    for year in lo..=hi {
        let path = ctx.cache(&snapshot_file(ch, year));
        require_output(&path, "build")?;
        let (snap, found) = read_snapshot(&path)?;
        if &found != key && !ctx.force {
            return Err(Error::StaleCache(format!(
                "{} belongs to config {} / corpus {}; rerun `build` or pass --force",
                path.display(),
                found.config_hash,
                found.corpus_hash
            )));
        }
        snaps.push(snap);
    }
    Ok(snaps)
}

pub fn stage_fit(ctx: &PipelineCtx) -> Result<()> {
    let t = Instant::now();
    require_output(&ctx.out("build.json"), "build")?;
    let chash = corpus_hash(&ctx.ingest_paths())?;
    check_meta(ctx, &ctx.out("build.json"), &chash)?;
    let corpus = ctx.load_corpus()?;
    let (lo, hi) = corpus.year_range().unwrap();
    let key = SnapshotKey { corpus_hash: chash.clone(), config_hash: ctx.config_hash.clone() };
    let horizon = ctx.config.score.horizon;
    let mut outputs = Vec::new();
    for &ch in &ctx.channels {
        let snaps = load_snapshots(ctx, ch, lo, hi, &key)?;
        let mut previous: Option<EmbeddingModel> = None;
        // models are needed through year_max + horizon for prescience
        for year in lo..=(hi + horizon) {
            let path = ctx.cache(&model_file(ch, year));
            if path.exists() && !ctx.force && check_meta(ctx, &path, &chash).is_ok() {
                let vocab = Arc::new(build_vocab(&corpus, ch, None, &ctx.config.build));
                previous = Some(read_model(&path, vocab)?);
                continue;
            }
            let merged = merge_history(&snaps, year.min(hi), ctx.config.fit.history_years)?;
            let merged = HypergraphSnapshot { year, ..merged };
            let negatives = draw_negatives(
                &merged,
                ctx.config.fit.negative_ratio,
                ctx.config.fit.seed ^ ((year as u64) << 8) ^ ch as u64,
            )?;
            let warm = if ctx.config.fit.warm_start { previous.as_ref() } else { None };
            let model = fit(&merged, &negatives, &ctx.config.fit, warm)?;
            write_model(&path, &model)?;
            write_meta(&path, &Meta { stage: "fit".into(), config_hash: ctx.config_hash.clone(), corpus_hash: chash.clone() })?;
            eprintln!(
                "fit: {}/{year} ll={:.3} epochs={}",
                ch.as_str(),
                model.fit_diag.final_ll,
                model.fit_diag.epochs
            );
            outputs.push(path);
            previous = Some(model);
        }
    }
    let stamp = ctx.out("fit.json");
    std::fs::write(&stamp, serde_json::json!({"years": [lo, hi + horizon]}).to_string())
        .map_err(|e| Error::io(stamp.display().to_string(), e))?;
    write_meta(&stamp, &Meta { stage: "fit".into(), config_hash: ctx.config_hash.clone(), corpus_hash: chash })?;
    append_manifest(ctx, "fit", &corpus_hash(&ctx.ingest_paths())?, &outputs, t.elapsed().as_millis())?;
    Ok(())
}

fn load_models(ctx: &PipelineCtx, corpus: &Corpus, chash: &str) -> Result<BTreeMap<(i32, Channel), EmbeddingModel>> {
    let (lo, hi) = corpus.year_range().unwrap();
    let horizon = ctx.config.score.horizon;
    let mut models = BTreeMap::new();
    for &ch in &ctx.channels {
        let vocab: Arc<NodeVocab> = Arc::new(build_vocab(corpus, ch, None, &ctx.config.build));
        for year in lo..=(hi + horizon) {
            let path = ctx.cache(&model_file(ch, year));
            require_output(&path, "fit")?;
            check_meta(ctx, &path, chash)?;
            models.insert((year, ch), read_model(&path, Arc::clone(&vocab))?);
        }
    }
    Ok(models)
}

pub fn stage_score(ctx: &PipelineCtx) -> Result<()> {
    let t = Instant::now();
    require_output(&ctx.out("fit.json"), "fit")?;
    let chash = corpus_hash(&ctx.ingest_paths())?;
    check_meta(ctx, &ctx.out("fit.json"), &chash)?;
    let corpus = ctx.load_corpus()?;
    let models = load_models(ctx, &corpus, &chash)?;
    let rows = score_corpus(
        &corpus,
        &models,
        ctx.config.score.horizon,
        &ctx.config.build,
        ctx.config.score.threads,
    )?;
    let path = ctx.out("scores.csv");
    write_scores_csv(&path, &rows)?;
    write_meta(&path, &Meta { stage: "score".into(), config_hash: ctx.config_hash.clone(), corpus_hash: chash.clone() })?;
    append_manifest(ctx, "score", &chash, &[path], t.elapsed().as_millis())?;
    eprintln!("score: {} rows", rows.len());
    Ok(())
}

pub fn stage_metrics(ctx: &PipelineCtx) -> Result<()> {
    let t = Instant::now();
    require_output(&ctx.out("ingest.json"), "ingest")?;
    let chash = corpus_hash(&ctx.ingest_paths())?;
    check_meta(ctx, &ctx.out("ingest.json"), &chash)?;
    ctx.ensure_dirs()?;
    let corpus = ctx.load_corpus()?;
    let graph = CitationGraph::from_corpus(&corpus);
    let rows = metrics_for_corpus(
        &corpus,
        &graph,
        &ctx.config.metrics.disruption_windows,
        ctx.config.metrics.two_step_min,
        ctx.config.metrics.forward_horizon,
    )?;
    let path = ctx.out("metrics.csv");
    write_metrics_csv(&path, &rows)?;
    write_meta(&path, &Meta { stage: "metrics".into(), config_hash: ctx.config_hash.clone(), corpus_hash: chash.clone() })?;
    append_manifest(ctx, "metrics", &chash, &[path], t.elapsed().as_millis())?;
    eprintln!("metrics: {} rows", rows.len());
    Ok(())
}

fn parse_opt(field: &str) -> Option<f64> {
    if field.is_empty() {
        None
    } else {
        field.parse().ok()
    }
}

/// Per-paper score columns reconstructed from scores.csv.
#[derive(Debug, Default, Clone)]
pub struct ScoreCols {
    pub pct_surprise_ctx: Option<f64>,
    pub pct_prescience_ctx: Option<f64>,
    pub pct_surprise_con: Option<f64>,
    pub pct_prescience_con: Option<f64>,
}

pub fn read_scores_csv(path: &Path) -> Result<BTreeMap<String, ScoreCols>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map: BTreeMap<String, ScoreCols> = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if i == 0 {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::validation(format!("{}: bad row {}", path.display(), i + 1)));
        }
        let entry = map.entry(f[0].to_string()).or_default();
        match f[1] {
            "context" => {
                entry.pct_surprise_ctx = parse_opt(f[4]);
                entry.pct_prescience_ctx = parse_opt(f[5]);
            }
            "content" => {
                entry.pct_surprise_con = parse_opt(f[4]);
                entry.pct_prescience_con = parse_opt(f[5]);
            }
            other => return Err(Error::validation(format!("unknown channel '{other}' in scores.csv"))),
        }
    }
    Ok(map)
}

#[derive(Debug, Default, Clone)]
pub struct MetricCols {
    pub disruption_5y: Option<f64>,
    pub disruption_3y: Option<f64>,
    pub two_step_credit: Option<f64>,
    pub outside_share: Option<f64>,
    pub cites_2y: f64,
}

pub fn read_metrics_csv(path: &Path) -> Result<BTreeMap<String, MetricCols>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if i == 0 {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::validation(format!("{}: bad row {}", path.display(), i + 1)));
        }
        map.insert(
            f[0].to_string(),
            MetricCols {
                disruption_5y: parse_opt(f[1]),
                disruption_3y: parse_opt(f[2]),
                two_step_credit: parse_opt(f[3]),
                outside_share: parse_opt(f[4]),
                cites_2y: f[5].parse().unwrap_or(0.0),
            },
        );
    }
    Ok(map)
}

/// Join scores, citation metrics, and corpus covariates into one table,
/// one row per paper.
pub fn build_analysis_table(
    corpus: &Corpus,
    scores: &BTreeMap<String, ScoreCols>,
    metrics: &BTreeMap<String, MetricCols>,
) -> Result<Table> {
    let n = corpus.papers.len();
    let mut t = Table::new(n);
    let mut paper_id = Vec::with_capacity(n);
    let mut year_cat = Vec::with_capacity(n);
    let mut field = Vec::with_capacity(n);
    let mut author = Vec::with_capacity(n);
    let mut female = Vec::with_capacity(n);
    let mut female_share = Vec::with_capacity(n);
    let mut solo = Vec::with_capacity(n);
    let mut career_age = Vec::with_capacity(n);
    let mut dept_size = Vec::with_capacity(n);
    let mut n_authors_col = Vec::with_capacity(n);
    let mut cols = ScoreVecs::default();
    let mut mets = MetricVecs::default();

    for p in &corpus.papers {
        paper_id.push(Some(p.paper_id.clone()));
        year_cat.push(Some(p.year.to_string()));
        field.push(p.field_ids_l1.iter().next().cloned());
        let first_author = p.author_ids.first();
        author.push(first_author.cloned());
        female.push(first_author.and_then(|a| {
            corpus.authors.get(a).and_then(|r| match r.resolved_gender {
                Gender::Female => Some(1.0),
                Gender::Male => Some(0.0),
                Gender::Unknown => None,
            })
        }));
        female_share.push(corpus.female_share(p).0);
        solo.push(Some(if p.is_solo() { 1.0 } else { 0.0 }));
        career_age.push(
            first_author.and_then(|a| corpus.career_age(a, p.year)).map(|v| v as f64),
        );
        dept_size.push(corpus.department_size(p).map(|v| v as f64));
        n_authors_col.push(Some(p.author_ids.len() as f64));
        let s = scores.get(&p.paper_id).cloned().unwrap_or_default();
        cols.push(&s);
        let m = metrics.get(&p.paper_id).cloned().unwrap_or_default();
        mets.push(&m);
    }

    t.add_cat("paper_id", paper_id)?;
    t.add_cat("year", year_cat)?;
    t.add_cat("field", field)?;
    t.add_cat("author_id", author)?;
    t.add_num("female", female)?;
    t.add_num("female_share", female_share)?;
    t.add_num("solo", solo)?;
    t.add_num("career_age", career_age)?;
    t.add_num("dept_size", dept_size)?;
    t.add_num("n_authors", n_authors_col)?;
    t.add_num("surprise_ref", cols.pct_surprise_ctx)?;
    t.add_num("prescience_ref", cols.pct_prescience_ctx)?;
    t.add_num("surprise_con", cols.pct_surprise_con)?;
    t.add_num("prescience_con", cols.pct_prescience_con)?;
    t.add_num("disruption_5y", mets.disruption_5y)?;
    t.add_num("disruption_3y", mets.disruption_3y)?;
    t.add_num("two_step_credit", mets.two_step_credit)?;
    t.add_num("outside_share", mets.outside_share)?;
    t.add_num("cites_2y", mets.cites_2y)?;
    Ok(t)
}

#[derive(Default)]
struct ScoreVecs {
    pct_surprise_ctx: Vec<Option<f64>>,
    pct_prescience_ctx: Vec<Option<f64>>,
    pct_surprise_con: Vec<Option<f64>>,
    pct_prescience_con: Vec<Option<f64>>,
}

impl ScoreVecs {
    fn push(&mut self, s: &ScoreCols) {
        self.pct_surprise_ctx.push(s.pct_surprise_ctx);
        self.pct_prescience_ctx.push(s.pct_prescience_ctx);
        self.pct_surprise_con.push(s.pct_surprise_con);
        self.pct_prescience_con.push(s.pct_prescience_con);
    }
}

#[derive(Default)]
struct MetricVecs {
    disruption_5y: Vec<Option<f64>>,
    disruption_3y: Vec<Option<f64>>,
    two_step_credit: Vec<Option<f64>>,
    outside_share: Vec<Option<f64>>,
    cites_2y: Vec<Option<f64>>,
}

impl MetricVecs {
    fn push(&mut self, m: &MetricCols) {
        self.disruption_5y.push(m.disruption_5y);
        self.disruption_3y.push(m.disruption_3y);
        self.two_step_credit.push(m.two_step_credit);
        self.outside_share.push(m.outside_share);
        self.cites_2y.push(Some(m.cites_2y));
    }
}

/// Load scores + metrics (refusing mixed config hashes), build the table, and
/// run every configured ModelSpec.
pub fn run_regressions(ctx: &PipelineCtx) -> Result<Vec<RegressionResult>> {
    let t = Instant::now();
    let scores_path = ctx.out("scores.csv");
    let metrics_path = ctx.out("metrics.csv");
    require_output(&scores_path, "score")?;
    require_output(&metrics_path, "metrics")?;
    let chash = corpus_hash(&ctx.ingest_paths())?;
    check_meta(ctx, &scores_path, &chash)?;
    check_meta(ctx, &metrics_path, &chash)?;
    if !ctx.force {
        let a = read_meta(&scores_path)?;
        let b = read_meta(&metrics_path)?;
        if a.config_hash != b.config_hash {
            return Err(Error::StaleCache(format!(
                "scores.csv ({}) and metrics.csv ({}) were produced under different configs; refusing the join (--force overrides)",
                a.config_hash, b.config_hash
            )));
        }
    }
    let corpus = ctx.load_corpus()?;
    let scores = read_scores_csv(&scores_path)?;
    let metrics = read_metrics_csv(&metrics_path)?;
    let table = build_analysis_table(&corpus, &scores, &metrics)?;

    if ctx.config.regress.spec_files.is_empty() {
        return Err(Error::validation(
            "no regression spec files configured under [regress]".to_string(),
        ));
    }
    let mut results = Vec::new();
    let mut outputs = Vec::new();
    for spec_path in &ctx.config.regress.spec_files {
        let spec = ModelSpec::load(spec_path)?;
        let result = fit_model(&table, &spec)?;
        let out_path = ctx.out(&format!("report_{}.csv", spec.name));
        write_report_csv(&out_path, &result)?;
        write_meta(&out_path, &Meta { stage: "regress".into(), config_hash: ctx.config_hash.clone(), corpus_hash: chash.clone() })?;
        print!("{}", format_text_table(&result));
        outputs.push(out_path);
        results.push(result);
    }
    append_manifest(ctx, "regress", &chash, &outputs, t.elapsed().as_millis())?;
    Ok(results)
}

pub fn stage_regress(ctx: &PipelineCtx) -> Result<()> {
    run_regressions(ctx).map(|_| ())
}

/// `report` additionally materializes the joined analysis table.
pub fn stage_report(ctx: &PipelineCtx) -> Result<()> {
    let scores_path = ctx.out("scores.csv");
    let metrics_path = ctx.out("metrics.csv");
    require_output(&scores_path, "score")?;
    require_output(&metrics_path, "metrics")?;
    let chash = corpus_hash(&ctx.ingest_paths())?;
    let corpus = ctx.load_corpus()?;
    let scores = read_scores_csv(&scores_path)?;
    let metrics = read_metrics_csv(&metrics_path)?;
    let table = build_analysis_table(&corpus, &scores, &metrics)?;
    let path = ctx.out("analysis.csv");
    write_table_csv(&path, &table)?;
    write_meta(&path, &Meta { stage: "report".into(), config_hash: ctx.config_hash.clone(), corpus_hash: chash })?;
    run_regressions(ctx).map(|_| ())
}

/// Dump the analysis table; missing values as empty fields.
pub fn write_table_csv(path: &Path, table: &Table) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        let names = table.column_names();
        writeln!(out, "{}", names.join(","))?;
        for row in 0..table.n_rows() {
            let mut fields = Vec::with_capacity(names.len());
            for name in &names {
                let cell = match table.column(name).unwrap() {
                    Column::Num(v) => v[row].map(|x| format!("{x:.12e}")).unwrap_or_default(),
                    Column::Cat(v) => v[row].clone().unwrap_or_default(),
                };
                fields.push(cell);
            }
            writeln!(out, "{}", fields.join(","))?;
        }
        out.flush()
    })()
    .map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_hash_is_stable_and_input_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["papers.jsonl", "authors.jsonl", "citations.jsonl", "names.tsv"] {
            std::fs::write(dir.path().join(f), f).unwrap();
        }
        let paths = IngestPaths::in_dir(dir.path());
        let h1 = corpus_hash(&paths).unwrap();
        assert_eq!(h1, corpus_hash(&paths).unwrap());
        std::fs::write(dir.path().join("papers.jsonl"), "changed").unwrap();
        assert_ne!(h1, corpus_hash(&paths).unwrap());
    }

    #[test]
    fn meta_sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("scores.csv");
        std::fs::write(&file, "x").unwrap();
        let meta = Meta {
            stage: "score".into(),
            config_hash: "abc".into(),
            corpus_hash: "def".into(),
        };
        write_meta(&file, &meta).unwrap();
        assert_eq!(read_meta(&file).unwrap(), meta);
    }

    #[test]
    fn missing_predecessor_names_the_stage() {
        let err = require_output(Path::new("/nonexistent/fit.json"), "fit").unwrap_err();
        assert!(err.to_string().contains("`fit`"));
    }
}
