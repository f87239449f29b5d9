//! Stage orchestration: ingest -> corpus -> embeddings -> topic model ->
//! measures -> report emission. Each stage checkpoints its output under
//! the output directory, keyed by a hash of the upstream config slice, so
//! a resumed run only redoes stages whose inputs changed. Failed stages
//! leave their outputs with a `.partial` suffix.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, CorpusSummary, IngestStats, WindowedCorpus};
use crate::detm::{DetmState, TrainLogEntry};
use crate::embeddings::{train_sgns, EmbeddingMatrix};
use crate::measures::{self, ChangePointResult, NoveltyRecord};
use crate::report::config::PipelineConfig;
use crate::report::{emit, PipelineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Corpus,
    Embed,
    Train,
    Measure,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Embed => "embed",
            Stage::Train => "train",
            Stage::Measure => "measure",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
}

/// Manifest of the emitted report files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBundle {
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryFile {
    summary: CorpusSummary,
    ingest: IngestStats,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeasuresOutput {
    pub change_points: Vec<ChangePointResult>,
    pub novelty: Vec<NoveltyRecord>,
    pub skipped_authors: Vec<(String, String)>,
    pub window_count: usize,
}

fn stage_err(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage: stage.name().into(),
        cause: e.to_string(),
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("hashable value serializes");
    hex(&Sha256::digest(&bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

/// Write through a `.partial` temporary so interrupted stages never leave
/// a complete-looking file.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let partial = partial_path(path);
    std::fs::write(&partial, bytes)?;
    std::fs::rename(&partial, path)
}

fn partial_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".partial");
    PathBuf::from(os)
}

struct Checkpoints {
    path: PathBuf,
    hashes: HashMap<String, String>,
}

impl Checkpoints {
    fn load(dir: &Path) -> Self {
        let path = dir.join("stages.json");
        let hashes = std::fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        Self { path, hashes }
    }

    fn valid(&self, stage: Stage, hash: &str, artifacts: &[PathBuf]) -> bool {
        self.hashes.get(stage.name()).map(String::as_str) == Some(hash)
            && artifacts.iter().all(|p| p.exists())
    }

    fn record(&mut self, stage: Stage, hash: &str) -> std::io::Result<()> {
        self.hashes.insert(stage.name().into(), hash.into());
        let map: BTreeMap<_, _> = self.hashes.iter().collect();
        write_atomic(&self.path, &serde_json::to_vec_pretty(&map).unwrap())
    }
}

/// Run all stages up to and including `upto`. With `resume`, stages whose
/// checkpoint hash matches the current config are loaded from disk
/// instead of recomputed. Returns the report bundle when `upto` is
/// [`Stage::Report`].
pub fn run_pipeline(
    cfg: &PipelineConfig,
    upto: Stage,
    resume: bool,
) -> Result<Option<ReportBundle>, PipelineError> {
    cfg.validate()?;
    let spec = cfg.window_spec()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)
        .map_err(|e| PipelineError::Config(format!("cannot create output dir: {e}")))?;
    let mut ckpt = Checkpoints::load(out);

    // -- corpus ------------------------------------------------------
    let corpus_hash = hash_json(&("corpus-v1", &cfg.corpus, cfg.seed));
    let corpus_json = out.join("corpus.json");
    let summary_json = out.join("summary.json");
    let corpus: WindowedCorpus =
        if resume && ckpt.valid(Stage::Corpus, &corpus_hash, std::slice::from_ref(&corpus_json)) {
            let text = std::fs::read_to_string(&corpus_json)
                .map_err(|e| stage_err(Stage::Corpus, e))?;
            serde_json::from_str(&text).map_err(|e| stage_err(Stage::Corpus, e))?
        } else {
            let (docs, stats) = corpus::ingest(&cfg.corpus.path, cfg.corpus.format, &spec)
                .map_err(|e| stage_err(Stage::Corpus, e))?;
            let corpus = corpus::build_corpus(
                &docs,
                spec,
                cfg.corpus.max_subdoc_tokens,
                cfg.corpus.min_word_count,
                cfg.corpus.dev_fraction,
                cfg.seed,
            )
            .map_err(|e| stage_err(Stage::Corpus, e))?;
            let summary = SummaryFile {
                summary: corpus.summary(),
                ingest: stats,
            };
            write_atomic(&corpus_json, &serde_json::to_vec(&corpus).unwrap())
                .map_err(|e| stage_err(Stage::Corpus, e))?;
            write_atomic(&summary_json, &serde_json::to_vec_pretty(&summary).unwrap())
                .map_err(|e| stage_err(Stage::Corpus, e))?;
            ckpt.record(Stage::Corpus, &corpus_hash)
                .map_err(|e| stage_err(Stage::Corpus, e))?;
            corpus
        };
    if upto == Stage::Corpus {
        return Ok(None);
    }

    // -- embeddings --------------------------------------------------
    let mut sgns_cfg = cfg.embeddings.clone();
    sgns_cfg.seed = cfg.seed;
    let embed_hash = hash_json(&("embed-v1", &corpus_hash, &sgns_cfg));
    let emb_path = out.join("embeddings.bin");
    let embeddings: EmbeddingMatrix =
        if resume && ckpt.valid(Stage::Embed, &embed_hash, std::slice::from_ref(&emb_path)) {
            EmbeddingMatrix::load_binary(&emb_path).map_err(|e| stage_err(Stage::Embed, e))?
        } else {
            let model = train_sgns(&corpus, &sgns_cfg).map_err(|e| stage_err(Stage::Embed, e))?;
            let partial = partial_path(&emb_path);
            model
                .input
                .save_binary(&partial)
                .map_err(|e| stage_err(Stage::Embed, e))?;
            std::fs::rename(&partial, &emb_path).map_err(|e| stage_err(Stage::Embed, e))?;
            ckpt.record(Stage::Embed, &embed_hash)
                .map_err(|e| stage_err(Stage::Embed, e))?;
            model.input
        };
    if upto == Stage::Embed {
        return Ok(None);
    }

    // -- topic model -------------------------------------------------
    let mut detm_cfg = cfg.detm.clone();
    detm_cfg.seed = cfg.seed;
    let train_hash = hash_json(&("train-v1", &embed_hash, &detm_cfg));
    let model_path = out.join("model.bin");
    let log_path = out.join("training_log.csv");
    let state: DetmState =
        if resume && ckpt.valid(Stage::Train, &train_hash, std::slice::from_ref(&model_path)) {
            DetmState::load_checkpoint(&model_path).map_err(|e| stage_err(Stage::Train, e))?
        } else {
            let init = DetmState::init(&embeddings, spec.count as usize, detm_cfg)
                .map_err(|e| stage_err(Stage::Train, e))?;
            let (fitted, log) = init.fit(&corpus).map_err(|e| stage_err(Stage::Train, e))?;
            write_atomic(&log_path, &training_log_csv(&log)?)
                .map_err(|e| stage_err(Stage::Train, e))?;
            let partial = partial_path(&model_path);
            fitted
                .save_checkpoint(&partial)
                .map_err(|e| stage_err(Stage::Train, e))?;
            std::fs::rename(&partial, &model_path).map_err(|e| stage_err(Stage::Train, e))?;
            ckpt.record(Stage::Train, &train_hash)
                .map_err(|e| stage_err(Stage::Train, e))?;
            fitted
        };
    if upto == Stage::Train {
        return Ok(None);
    }

    // -- measures ----------------------------------------------------
    let measure_hash = hash_json(&("measure-v1", &train_hash, &cfg.measures, &cfg.report.author_groups));
    let measures_path = out.join("measures.json");
    let measures: MeasuresOutput =
        if resume && ckpt.valid(Stage::Measure, &measure_hash, std::slice::from_ref(&measures_path)) {
            let text = std::fs::read_to_string(&measures_path)
                .map_err(|e| stage_err(Stage::Measure, e))?;
            serde_json::from_str(&text).map_err(|e| stage_err(Stage::Measure, e))?
        } else {
            let m = compute_measures(cfg, &corpus, &state)?;
            write_atomic(&measures_path, &serde_json::to_vec(&m).unwrap())
                .map_err(|e| stage_err(Stage::Measure, e))?;
            ckpt.record(Stage::Measure, &measure_hash)
                .map_err(|e| stage_err(Stage::Measure, e))?;
            m
        };
    if upto == Stage::Measure {
        return Ok(None);
    }

    // -- report ------------------------------------------------------
    let deltas = measures::summed_deltas_by_window(&measures.change_points, spec.count as usize);
    let topic_ids: Vec<usize> = if cfg.report.topics.is_empty() {
        (0..state.topic_count()).collect()
    } else {
        cfg.report.topics.clone()
    };
    let outputs: Vec<(&str, Vec<u8>)> = vec![
        (
            "word_ranking.csv",
            emit::word_ranking_csv(&measures.change_points, &spec)?,
        ),
        (
            "author_ranking.csv",
            emit::author_ranking_csv(&measures.novelty, &spec)?,
        ),
        (
            "novelty_histogram.csv",
            emit::novelty_histogram_csv(&measures.novelty, cfg.report.novelty_bins)?,
        ),
        ("window_deltas.csv", emit::window_deltas_csv(&deltas, &spec)?),
        (
            "topic_evolution.json",
            emit::topic_evolution_json(
                &state,
                &corpus,
                &spec,
                &topic_ids,
                &cfg.report.words,
                cfg.report.words_per_topic,
            )?,
        ),
    ];
    let mut files = Vec::new();
    for (name, bytes) in &outputs {
        let path = out.join(name);
        write_atomic(&path, bytes).map_err(|e| stage_err(Stage::Report, e))?;
        files.push(ManifestEntry {
            name: name.to_string(),
            sha256: hex(&Sha256::digest(bytes)),
        });
    }
    files.push(ManifestEntry {
        name: "summary.json".into(),
        sha256: file_sha256(&summary_json).map_err(|e| stage_err(Stage::Report, e))?,
    });
    files.sort_by(|a, b| a.name.cmp(&b.name));
    let bundle = ReportBundle { files };
    write_atomic(
        &out.join("manifest.json"),
        &serde_json::to_vec_pretty(&bundle).unwrap(),
    )
    .map_err(|e| stage_err(Stage::Report, e))?;
    ckpt.record(Stage::Report, &measure_hash)
        .map_err(|e| stage_err(Stage::Report, e))?;
    Ok(Some(bundle))
}

fn training_log_csv(log: &[TrainLogEntry]) -> Result<Vec<u8>, PipelineError> {
    let err = |e: csv::Error| stage_err(Stage::Train, e);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_elbo", "dev_perplexity", "learning_rate"])
        .map_err(err)?;
    for entry in log {
        w.write_record([
            entry.epoch.to_string(),
            emit::fmt_g9(entry.train_elbo),
            emit::fmt_g9(entry.dev_perplexity),
            emit::fmt_g9(entry.learning_rate),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| stage_err(Stage::Train, e))
}

fn load_author_groups(path: &Path) -> Result<HashMap<String, String>, PipelineError> {
    let err = |e: String| PipelineError::Config(format!("author_groups {}: {e}", path.display()));
    let mut map = HashMap::new();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() < 2 {
            return Err(err(format!("row {} needs author,group", i + 1)));
        }
        let author = rec[0].trim().to_string();
        let group = rec[1].trim().to_string();
        if i == 0 && author == "author" && group == "group" {
            continue;
        }
        map.insert(author, group);
    }
    Ok(map)
}

fn compute_measures(
    cfg: &PipelineConfig,
    corpus: &WindowedCorpus,
    state: &DetmState,
) -> Result<MeasuresOutput, PipelineError> {
    let groups = match &cfg.report.author_groups {
        Some(p) => load_author_groups(p)?,
        None => HashMap::new(),
    };
    let change_points = measures::all_change_points(
        state,
        corpus,
        cfg.measures.min_attested_windows,
        cfg.measures.min_seg_len,
    )
    .map_err(|e| stage_err(Stage::Measure, e))?;

    // one novelty record per (author, window) pair; normally an author
    // occupies a single window
    let mut pairs: Vec<(String, usize)> = corpus
        .subdocs
        .iter()
        .map(|s| (s.author.clone(), s.window))
        .collect();
    pairs.sort();
    pairs.dedup();
    let mut novelty = Vec::new();
    let mut skipped = Vec::new();
    for (author, window) in pairs {
        match measures::author_novelty_in_window(state, corpus, &author, window) {
            Ok(mut rec) => {
                if cfg.measures.jsd_log2 {
                    rec.novelty /= std::f64::consts::LN_2;
                }
                rec.group = groups.get(&author).cloned();
                novelty.push(rec);
            }
            Err(e) => skipped.push((author, e.to_string())),
        }
    }
    Ok(MeasuresOutput {
        change_points,
        novelty,
        skipped_authors: skipped,
        window_count: corpus.spec.count as usize,
    })
}
