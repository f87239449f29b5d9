//! Document ingestion, temporal windowing, sub-document splitting, and
//! bag-of-words corpus construction.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("document {id} has no tokens")]
    EmptyDocument { id: String },
    #[error("year {year} outside window range [{start}, {end})")]
    YearOutOfRange { year: i32, start: i32, end: i32 },
    #[error("vocabulary is empty after applying min_word_count={min_count}")]
    EmptyVocabulary { min_count: u32 },
    #[error("no documents to build a corpus from")]
    NoDocuments,
    #[error("invalid window spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dev_fraction {0}: must lie in (0, 1)")]
    InvalidDevFraction(f64),
    #[error("cannot parse directory entry {path}: expected <author>/<year>/<file>")]
    BadDirectoryLayout { path: String },
}

/// A time-stamped, pre-lemmatized document. Negative years are BCE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub author: String,
    pub year: i32,
    pub tokens: Vec<String>,
}

/// Tiling of the corpus time span into fixed-width year windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub start_year: i32,
    pub width_years: u32,
    pub count: u32,
}

impl WindowSpec {
    pub fn new(start_year: i32, width_years: u32, count: u32) -> Result<Self, CorpusError> {
        if width_years == 0 || count == 0 {
            return Err(CorpusError::InvalidSpec(format!(
                "width_years={width_years}, count={count}: both must be positive"
            )));
        }
        Ok(Self {
            start_year,
            width_years,
            count,
        })
    }

    /// Exclusive upper bound of the covered year range.
    pub fn end_year(&self) -> i32 {
        self.start_year + (self.width_years * self.count) as i32
    }

    pub fn contains(&self, year: i32) -> bool {
        year >= self.start_year && year < self.end_year()
    }

    /// Window index for a year inside the covered range.
    pub fn window_of(&self, year: i32) -> Result<usize, CorpusError> {
        if !self.contains(year) {
            return Err(CorpusError::YearOutOfRange {
                year,
                start: self.start_year,
                end: self.end_year(),
            });
        }
        Ok(((year - self.start_year) as u32 / self.width_years) as usize)
    }

    /// Start year of window `t`.
    pub fn window_start(&self, t: usize) -> i32 {
        self.start_year + (t as u32 * self.width_years) as i32
    }
}

/// Dense word <-> index mapping with corpus frequencies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    index: HashMap<String, u32>,
    words: Vec<String>,
    freqs: Vec<u64>,
}

impl Vocabulary {
    /// Build from (word, frequency) pairs, keeping words with frequency
    /// >= `min_count`, ordered by descending frequency then word.
    pub fn from_counts(counts: &HashMap<String, u64>, min_count: u32) -> Self {
        let mut kept: Vec<(&String, u64)> = counts
            .iter()
            .filter(|(_, &c)| c >= min_count as u64)
            .map(|(w, &c)| (w, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut index = HashMap::with_capacity(kept.len());
        let mut words = Vec::with_capacity(kept.len());
        let mut freqs = Vec::with_capacity(kept.len());
        for (i, (w, c)) in kept.into_iter().enumerate() {
            index.insert(w.clone(), i as u32);
            words.push(w.clone());
            freqs.push(c);
        }
        Self {
            index,
            words,
            freqs,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, idx: u32) -> &str {
        &self.words[idx as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn freq(&self, idx: u32) -> u64 {
        self.freqs[idx as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
}

/// A contiguous chunk of one document, the unit seen by the topic model.
/// Tokens are vocabulary indices; out-of-vocabulary tokens are dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subdoc {
    pub doc_id: String,
    pub author: String,
    pub window: usize,
    pub tokens: Vec<u32>,
    /// Sparse (vocab index, count) pairs, sorted by index.
    pub counts: Vec<(u32, u32)>,
    pub split: Split,
}

impl Subdoc {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowedCorpus {
    pub spec: WindowSpec,
    pub vocabulary: Vocabulary,
    pub subdocs: Vec<Subdoc>,
    /// Windows that ended up with zero subdocs (kept so window indices stay
    /// aligned with calendar time).
    pub empty_windows: Vec<usize>,
}

impl WindowedCorpus {
    pub fn train_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Train)
    }

    pub fn dev_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Dev)
    }

    fn split_indices(&self, split: Split) -> Vec<usize> {
        self.subdocs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subdocs_in_window(&self, t: usize) -> impl Iterator<Item = &Subdoc> {
        self.subdocs.iter().filter(move |s| s.window == t)
    }

    pub fn summary(&self) -> CorpusSummary {
        let mut authors: Vec<&str> = self.subdocs.iter().map(|s| s.author.as_str()).collect();
        authors.sort_unstable();
        authors.dedup();
        let mut docs: Vec<&str> = self.subdocs.iter().map(|s| s.doc_id.as_str()).collect();
        docs.sort_unstable();
        docs.dedup();
        let mut per_window = vec![0usize; self.spec.count as usize];
        for s in &self.subdocs {
            per_window[s.window] += 1;
        }
        CorpusSummary {
            document_count: docs.len(),
            author_count: authors.len(),
            vocabulary_size: self.vocabulary.len(),
            subdoc_count: self.subdocs.len(),
            per_window_subdocs: per_window,
        }
    }
}

/// Corpus summary emitted as JSON by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub document_count: usize,
    pub author_count: usize,
    pub vocabulary_size: usize,
    pub subdoc_count: usize,
    pub per_window_subdocs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Jsonl,
    PlainDir,
}

/// Counters for records dropped or rejected during ingestion.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestStats {
    pub ingested: usize,
    pub dropped_out_of_range: usize,
    pub skipped_empty: usize,
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    author: String,
    year: i32,
    tokens: Vec<String>,
}

/// Read documents from `path`. Documents whose year falls outside
/// `spec`'s covered range are dropped and counted; documents with no
/// tokens are skipped and counted.
pub fn ingest(
    path: &Path,
    format: CorpusFormat,
    spec: &WindowSpec,
) -> Result<(Vec<Document>, IngestStats), CorpusError> {
    match format {
        CorpusFormat::Jsonl => ingest_jsonl(path, spec),
        CorpusFormat::PlainDir => ingest_plain_dir(path, spec),
    }
}

fn ingest_jsonl(path: &Path, spec: &WindowSpec) -> Result<(Vec<Document>, IngestStats), CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    let mut stats = IngestStats::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        if rec.tokens.is_empty() {
            stats.skipped_empty += 1;
            continue;
        }
        if !spec.contains(rec.year) {
            stats.dropped_out_of_range += 1;
            continue;
        }
        stats.ingested += 1;
        docs.push(Document {
            id: rec.id,
            author: rec.author,
            year: rec.year,
            tokens: rec.tokens,
        });
    }
    Ok((docs, stats))
}

/// Directory layout: `<root>/<author>/<year>/<file>`; file contents are
/// whitespace-tokenized.
fn ingest_plain_dir(
    root: &Path,
    spec: &WindowSpec,
) -> Result<(Vec<Document>, IngestStats), CorpusError> {
    let mut docs = Vec::new();
    let mut stats = IngestStats::default();
    let mut author_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|source| CorpusError::Io {
            path: root.display().to_string(),
            source,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    author_dirs.sort();
    for author_dir in author_dirs {
        let author = author_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| CorpusError::BadDirectoryLayout {
                path: author_dir.display().to_string(),
            })?
            .to_string();
        let mut year_dirs: Vec<_> = std::fs::read_dir(&author_dir)
            .map_err(|source| CorpusError::Io {
                path: author_dir.display().to_string(),
                source,
            })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        year_dirs.sort();
        for year_dir in year_dirs {
            let year: i32 = year_dir
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CorpusError::BadDirectoryLayout {
                    path: year_dir.display().to_string(),
                })?;
            let mut files: Vec<_> = std::fs::read_dir(&year_dir)
                .map_err(|source| CorpusError::Io {
                    path: year_dir.display().to_string(),
                    source,
                })?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for file in files {
                let text = std::fs::read_to_string(&file).map_err(|source| CorpusError::Io {
                    path: file.display().to_string(),
                    source,
                })?;
                let tokens: Vec<String> =
                    text.split_whitespace().map(|t| t.to_string()).collect();
                if tokens.is_empty() {
                    stats.skipped_empty += 1;
                    continue;
                }
                if !spec.contains(year) {
                    stats.dropped_out_of_range += 1;
                    continue;
                }
                let id = file
                    .strip_prefix(root)
                    .unwrap_or(&file)
                    .display()
                    .to_string();
                stats.ingested += 1;
                docs.push(Document {
                    id,
                    author: author.clone(),
                    year,
                    tokens,
                });
            }
        }
    }
    Ok((docs, stats))
}

/// Assign each document to its window: `floor((year - start) / width)`.
pub fn assign_windows<'a>(
    docs: &'a [Document],
    spec: &WindowSpec,
) -> Result<Vec<(&'a Document, usize)>, CorpusError> {
    docs.iter()
        .map(|d| spec.window_of(d.year).map(|t| (d, t)))
        .collect()
}

/// Greedy fixed-size chunking: every piece except possibly the last has
/// exactly `max_tokens` tokens.
pub fn split_subdocs<T: Clone>(tokens: &[T], max_tokens: usize) -> Vec<Vec<T>> {
    assert!(max_tokens >= 1, "max_tokens must be >= 1");
    tokens.chunks(max_tokens).map(|c| c.to_vec()).collect()
}

/// Assemble the windowed bag-of-words corpus: builds the vocabulary over
/// all documents, chunks each document, maps tokens to indices (dropping
/// out-of-vocabulary tokens), and tags a seeded train/dev split at the
/// sub-document level.
pub fn build_corpus(
    docs: &[Document],
    spec: WindowSpec,
    max_subdoc_tokens: usize,
    min_word_count: u32,
    dev_fraction: f64,
    seed: u64,
) -> Result<WindowedCorpus, CorpusError> {
    if docs.is_empty() {
        return Err(CorpusError::NoDocuments);
    }
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(CorpusError::InvalidDevFraction(dev_fraction));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for d in docs {
        if d.tokens.is_empty() {
            return Err(CorpusError::EmptyDocument { id: d.id.clone() });
        }
        for t in &d.tokens {
            *counts.entry(t.clone()).or_default() += 1;
        }
    }
    let vocabulary = Vocabulary::from_counts(&counts, min_word_count);
    if vocabulary.is_empty() {
        return Err(CorpusError::EmptyVocabulary {
            min_count: min_word_count,
        });
    }

    let mut subdocs = Vec::new();
    for (doc, window) in assign_windows(docs, &spec)? {
        for chunk in split_subdocs(&doc.tokens, max_subdoc_tokens) {
            let tokens: Vec<u32> = chunk.iter().filter_map(|w| vocabulary.get(w)).collect();
            if tokens.is_empty() {
                continue;
            }
            let mut cmap: HashMap<u32, u32> = HashMap::new();
            for &t in &tokens {
                *cmap.entry(t).or_default() += 1;
            }
            let mut counts: Vec<(u32, u32)> = cmap.into_iter().collect();
            counts.sort_unstable_by_key(|&(i, _)| i);
            subdocs.push(Subdoc {
                doc_id: doc.id.clone(),
                author: doc.author.clone(),
                window,
                tokens,
                counts,
                split: Split::Train,
            });
        }
    }
    if subdocs.is_empty() {
        return Err(CorpusError::NoDocuments);
    }

    let n_dev = ((subdocs.len() as f64) * dev_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..subdocs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_dev) {
        subdocs[i].split = Split::Dev;
    }

    let mut seen = vec![false; spec.count as usize];
    for s in &subdocs {
        seen[s.window] = true;
    }
    let empty_windows: Vec<usize> = (0..spec.count as usize).filter(|&t| !seen[t]).collect();

    Ok(WindowedCorpus {
        spec,
        vocabulary,
        subdocs,
        empty_windows,
    })
}
