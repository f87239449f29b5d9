//! Skip-gram embeddings with negative sampling, trained on the corpus
//! sub-documents, plus nearest-neighbor queries and file persistence.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Vocabulary, WindowedCorpus};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("corpus has no (center, context) pair within the window size")]
    NoTrainingPairs,
    #[error("word {0:?} not in vocabulary")]
    OutOfVocabulary(String),
    #[error("k={k} must be smaller than the vocabulary size {v}")]
    TooManyNeighbors { k: usize, v: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad embedding file {path}: {reason}")]
    BadFile { path: String, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SgnsConfig {
    pub window_size: usize,
    pub dim: usize,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub initial_lr: f32,
    pub final_lr: f32,
    /// Subsample frequent words above this threshold (word2vec style);
    /// `None` disables subsampling.
    pub subsample_threshold: Option<f64>,
    /// Use the full window size for every center word instead of sampling
    /// it uniformly in [1, window_size].
    pub fixed_window: bool,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            window_size: 5,
            dim: 300,
            epochs: 10,
            negatives_per_positive: 5,
            initial_lr: 0.025,
            final_lr: 1e-4,
            subsample_threshold: None,
            fixed_window: false,
            seed: 0,
        }
    }
}

impl SgnsConfig {
    fn validate(&self) -> Result<(), EmbeddingError> {
        if self.window_size == 0 || self.dim == 0 || self.negatives_per_positive == 0 {
            return Err(EmbeddingError::InvalidConfig(
                "window_size, dim and negatives_per_positive must be positive".into(),
            ));
        }
        if self.initial_lr <= 0.0 || self.final_lr <= 0.0 {
            return Err(EmbeddingError::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Word vectors: `rho` is the V x L input matrix of the trained model.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub words: Vec<String>,
    pub dim: usize,
    /// Row-major V x L.
    pub rho: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn row(&self, idx: usize) -> &[f32] {
        &self.rho[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// k nearest neighbors by cosine similarity, excluding the query word,
    /// ties broken by vocabulary index.
    pub fn nearest_neighbors(
        &self,
        word: &str,
        k: usize,
    ) -> Result<Vec<(String, f64)>, EmbeddingError> {
        let idx = self
            .index_of(word)
            .ok_or_else(|| EmbeddingError::OutOfVocabulary(word.to_string()))?;
        if k >= self.vocab_size() {
            return Err(EmbeddingError::TooManyNeighbors {
                k,
                v: self.vocab_size(),
            });
        }
        let query = self.row(idx);
        let mut scored: Vec<(usize, f64)> = (0..self.vocab_size())
            .filter(|&i| i != idx)
            .map(|i| (i, cosine(query, self.row(i))))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.words[i].clone(), s))
            .collect())
    }

    /// Binary format: magic "EMB1", u64 V, u64 L, V length-prefixed UTF-8
    /// words, then V*L little-endian f32 rows.
    pub fn save_binary(&self, path: &Path) -> Result<(), EmbeddingError> {
        let io_err = |source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        w.write_all(b"EMB1").map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.vocab_size() as u64)
            .map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.dim as u64).map_err(io_err)?;
        for word in &self.words {
            let bytes = word.as_bytes();
            w.write_u32::<LittleEndian>(bytes.len() as u32).map_err(io_err)?;
            w.write_all(bytes).map_err(io_err)?;
        }
        for &x in &self.rho {
            w.write_f32::<LittleEndian>(x).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn load_binary(path: &Path) -> Result<Self, EmbeddingError> {
        let io_err = |source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        };
        let bad = |reason: &str| EmbeddingError::BadFile {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != b"EMB1" {
            return Err(bad("wrong magic"));
        }
        let v = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let l = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let mut words = Vec::with_capacity(v);
        for _ in 0..v {
            let len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io_err)?;
            words.push(String::from_utf8(buf).map_err(|_| bad("non-UTF-8 word"))?);
        }
        let mut rho = vec![0.0f32; v * l];
        for x in rho.iter_mut() {
            *x = r.read_f32::<LittleEndian>().map_err(io_err)?;
        }
        Ok(Self { words, dim: l, rho })
    }

    /// Text format: one "word v1 v2 ..." row per line.
    pub fn save_text(&self, path: &Path) -> Result<(), EmbeddingError> {
        let io_err = |source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        for (i, word) in self.words.iter().enumerate() {
            write!(w, "{word}").map_err(io_err)?;
            for &x in self.row(i) {
                write!(w, " {x}").map_err(io_err)?;
            }
            writeln!(w).map_err(io_err)?;
        }
        Ok(())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

struct NegativeTable {
    table: Vec<u32>,
}

impl NegativeTable {
    const SIZE: usize = 1 << 20;

    /// Unigram distribution raised to the 3/4 power.
    fn new(vocab: &Vocabulary) -> Self {
        let weights: Vec<f64> = (0..vocab.len())
            .map(|i| (vocab.freq(i as u32) as f64).powf(0.75))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut table = Vec::with_capacity(Self::SIZE);
        let mut acc = 0.0;
        let mut w = 0usize;
        for i in 0..Self::SIZE {
            let target = (i as f64 + 0.5) / Self::SIZE as f64;
            while acc + weights[w] / total < target && w + 1 < weights.len() {
                acc += weights[w] / total;
                w += 1;
            }
            table.push(w as u32);
        }
        Self { table }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        self.table[rng.gen_range(0..self.table.len())]
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Result of one SGNS training run. `input` is the rho matrix handed to
/// the topic model; `output` is the context matrix.
pub struct SgnsModel {
    pub input: EmbeddingMatrix,
    pub output: EmbeddingMatrix,
    /// Mean sampled objective per epoch (negative sampling log-likelihood).
    pub epoch_loss: Vec<f64>,
}

/// Train skip-gram with negative sampling over the corpus sub-documents.
/// Context pairs never cross sub-document boundaries. Single-threaded and
/// deterministic for a fixed seed.
pub fn train_sgns(
    corpus: &WindowedCorpus,
    config: &SgnsConfig,
) -> Result<SgnsModel, EmbeddingError> {
    config.validate()?;
    let vocab = &corpus.vocabulary;
    let v = vocab.len();
    if v == 0 {
        return Err(EmbeddingError::EmptyVocabulary);
    }
    let has_pair = corpus
        .subdocs
        .iter()
        .any(|s| s.tokens.len() >= 2);
    if !has_pair {
        return Err(EmbeddingError::NoTrainingPairs);
    }

    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // word2vec-style init: input uniform in [-0.5/dim, 0.5/dim], output zero
    let mut input = vec![0.0f32; v * dim];
    for x in input.iter_mut() {
        *x = (rng.gen::<f32>() - 0.5) / dim as f32;
    }
    let mut output = vec![0.0f32; v * dim];

    let total_tokens: u64 = corpus.subdocs.iter().map(|s| s.tokens.len() as u64).sum();
    let total_words = total_tokens * config.epochs as u64;
    let neg_table = NegativeTable::new(vocab);
    let corpus_tokens: u64 = (0..v).map(|i| vocab.freq(i as u32)).sum();

    let mut processed = 0u64;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut grad = vec![0.0f32; dim];

    for _epoch in 0..config.epochs {
        let mut loss_sum = 0.0f64;
        let mut loss_n = 0u64;
        for subdoc in &corpus.subdocs {
            // optional frequent-word subsampling
            let seq: Vec<u32> = match config.subsample_threshold {
                None => subdoc.tokens.clone(),
                Some(t) => subdoc
                    .tokens
                    .iter()
                    .copied()
                    .filter(|&w| {
                        let f = vocab.freq(w) as f64 / corpus_tokens as f64;
                        let keep = ((t / f).sqrt() + t / f).min(1.0);
                        rng.gen::<f64>() < keep
                    })
                    .collect(),
            };
            for (pos, &center) in seq.iter().enumerate() {
                processed += 1;
                let lr = {
                    let frac = processed as f32 / total_words.max(1) as f32;
                    (config.initial_lr * (1.0 - frac)).max(config.final_lr)
                };
                let b = if config.fixed_window {
                    config.window_size
                } else {
                    rng.gen_range(1..=config.window_size)
                };
                let lo = pos.saturating_sub(b);
                let hi = (pos + b).min(seq.len() - 1);
                for (ctx_pos, &ctx_word) in seq.iter().enumerate().take(hi + 1).skip(lo) {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = ctx_word as usize;
                    let in_row = center as usize * dim;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    // positive + negatives against the center's input vector
                    for neg in 0..=config.negatives_per_positive {
                        let (target, label) = if neg == 0 {
                            (context, 1.0f32)
                        } else {
                            let mut s = neg_table.sample(&mut rng) as usize;
                            if s == context {
                                s = neg_table.sample(&mut rng) as usize;
                            }
                            (s, 0.0f32)
                        };
                        let out_row = target * dim;
                        let mut dot = 0.0f32;
                        for d in 0..dim {
                            dot += input[in_row + d] * output[out_row + d];
                        }
                        let pred = sigmoid(dot);
                        let g = (label - pred) * lr;
                        loss_sum -= if label > 0.5 {
                            (pred.max(1e-7) as f64).ln()
                        } else {
                            ((1.0 - pred).max(1e-7) as f64).ln()
                        };
                        loss_n += 1;
                        for d in 0..dim {
                            grad[d] += g * output[out_row + d];
                            output[out_row + d] += g * input[in_row + d];
                        }
                    }
                    for d in 0..dim {
                        input[in_row + d] += grad[d];
                    }
                }
            }
        }
        epoch_loss.push(if loss_n > 0 {
            loss_sum / loss_n as f64
        } else {
            0.0
        });
    }

    let words: Vec<String> = vocab.words().to_vec();
    Ok(SgnsModel {
        input: EmbeddingMatrix {
            words: words.clone(),
            dim,
            rho: input,
        },
        output: EmbeddingMatrix {
            words,
            dim,
            rho: output,
        },
        epoch_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, Document, WindowSpec};

    fn corpus_from_tokens(token_seqs: &[Vec<&str>]) -> WindowedCorpus {
        let docs: Vec<Document> = token_seqs
            .iter()
            .enumerate()
            .map(|(i, toks)| Document {
                id: format!("d{i}"),
                author: "A".into(),
                year: 0,
                tokens: toks.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        build_corpus(&docs, WindowSpec::new(0, 75, 2).unwrap(), 500, 1, 0.1, 3).unwrap()
    }

    fn small_config(dim: usize, epochs: usize) -> SgnsConfig {
        SgnsConfig {
            dim,
            epochs,
            window_size: 2,
            seed: 11,
            ..SgnsConfig::default()
        }
    }

    #[test]
    fn alternating_corpus_pulls_pair_together() {
        let toks: Vec<&str> = (0..200).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
        let corpus = corpus_from_tokens(&[toks]);
        let cfg = |epochs| SgnsConfig {
            dim: 8,
            epochs,
            seed: 42,
            ..SgnsConfig::default()
        };
        let init = train_sgns(&corpus, &cfg(0)).unwrap();
        let trained = train_sgns(&corpus, &cfg(10)).unwrap();
        let ia = trained.input.index_of("a").unwrap();
        let ib = trained.input.index_of("b").unwrap();
        let init_cos = cosine(init.input.row(ia), init.input.row(ib));
        let trained_cos = cosine(trained.input.row(ia), trained.input.row(ib));
        assert!(
            trained_cos > init_cos,
            "trained {trained_cos} should exceed random baseline {init_cos}"
        );
    }

    #[test]
    fn planted_clusters_separate() {
        let cluster_a: Vec<String> = (0..10).map(|i| format!("a{i}")).collect();
        let cluster_b: Vec<String> = (0..10).map(|i| format!("b{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seqs: Vec<Vec<&str>> = Vec::new();
        for i in 0..60 {
            let src = if i % 2 == 0 { &cluster_a } else { &cluster_b };
            let toks: Vec<&str> = (0..60)
                .map(|_| src[rng.gen_range(0..src.len())].as_str())
                .collect();
            seqs.push(toks);
        }
        let corpus = corpus_from_tokens(&seqs);
        let model = train_sgns(&corpus, &small_config(16, 8)).unwrap();
        let emb = &model.input;
        let idx = |w: &str| emb.index_of(w).unwrap();
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for x in 0..10 {
            for y in (x + 1)..10 {
                intra.push(cosine(
                    emb.row(idx(&cluster_a[x])),
                    emb.row(idx(&cluster_a[y])),
                ));
                intra.push(cosine(
                    emb.row(idx(&cluster_b[x])),
                    emb.row(idx(&cluster_b[y])),
                ));
            }
        }
        for wa in &cluster_a {
            for wb in &cluster_b {
                inter.push(cosine(emb.row(idx(wa)), emb.row(idx(wb))));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&intra) > mean(&inter));
        // loss should improve from the first epoch to the last
        assert!(model.epoch_loss[model.epoch_loss.len() - 1] < model.epoch_loss[0]);
    }

    #[test]
    fn zero_epochs_equals_seeded_init() {
        let toks: Vec<&str> = (0..50).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
        let corpus = corpus_from_tokens(&[toks]);
        let m1 = train_sgns(&corpus, &small_config(8, 0)).unwrap();
        let m2 = train_sgns(&corpus, &small_config(8, 0)).unwrap();
        assert_eq!(m1.input.rho, m2.input.rho);
        assert!(m1.output.rho.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn determinism_bitwise() {
        let toks: Vec<&str> = (0..80)
            .map(|i| match i % 3 {
                0 => "a",
                1 => "b",
                _ => "c",
            })
            .collect();
        let corpus = corpus_from_tokens(&[toks]);
        let m1 = train_sgns(&corpus, &small_config(8, 3)).unwrap();
        let m2 = train_sgns(&corpus, &small_config(8, 3)).unwrap();
        assert_eq!(m1.input.rho, m2.input.rho);
        assert_eq!(m1.output.rho, m2.output.rho);
    }

    #[test]
    fn no_pairs_is_error() {
        let corpus = corpus_from_tokens(&[vec!["a"], vec!["b"]]);
        assert!(matches!(
            train_sgns(&corpus, &small_config(4, 1)),
            Err(EmbeddingError::NoTrainingPairs)
        ));
    }

    #[test]
    fn nearest_neighbors_identical_and_antipodal() {
        let emb = EmbeddingMatrix {
            words: vec!["a".into(), "b".into(), "c".into()],
            dim: 2,
            rho: vec![1.0, 0.5, 1.0, 0.5, -1.0, -0.5],
        };
        let nn = emb.nearest_neighbors("a", 2).unwrap();
        assert_eq!(nn[0].0, "b");
        assert!((nn[0].1 - 1.0).abs() < 1e-9);
        assert_eq!(nn[1].0, "c");
        assert!((nn[1].1 + 1.0).abs() < 1e-9);
        assert!(matches!(
            emb.nearest_neighbors("zzz", 1),
            Err(EmbeddingError::OutOfVocabulary(_))
        ));
        assert!(emb.nearest_neighbors("a", 3).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let emb = EmbeddingMatrix {
            words: vec!["alpha".into(), "beta".into()],
            dim: 3,
            rho: vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        emb.save_binary(&path).unwrap();
        let loaded = EmbeddingMatrix::load_binary(&path).unwrap();
        assert_eq!(loaded.words, emb.words);
        assert_eq!(loaded.dim, 3);
        assert_eq!(loaded.rho, emb.rho);
    }
}
