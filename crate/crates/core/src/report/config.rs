//! Pipeline configuration, loadable from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusFormat, WindowSpec};
use crate::detm::DetmConfig;
use crate::embeddings::SgnsConfig;
use crate::report::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
    pub start_year: i32,
    #[serde(default = "default_window_years")]
    pub window_years: u32,
    pub window_count: u32,
    #[serde(default = "default_max_subdoc_tokens")]
    pub max_subdoc_tokens: usize,
    #[serde(default = "default_min_word_count")]
    pub min_word_count: u32,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Jsonl
}
fn default_window_years() -> u32 {
    75
}
fn default_max_subdoc_tokens() -> usize {
    500
}
fn default_min_word_count() -> u32 {
    5
}
fn default_dev_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasuresSection {
    /// Words attested in fewer windows than this are excluded from the
    /// change-point ranking.
    pub min_attested_windows: usize,
    pub min_seg_len: usize,
    /// Report novelty in bits (JSD divided by ln 2) instead of nats.
    pub jsd_log2: bool,
}

impl Default for MeasuresSection {
    fn default() -> Self {
        Self {
            min_attested_windows: 4,
            min_seg_len: 1,
            jsd_log2: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSection {
    /// CSV of author,group rows; groups show up in the author ranking and
    /// novelty histogram.
    pub author_groups: Option<PathBuf>,
    pub novelty_bins: usize,
    /// Topics to include in the topic-evolution report; all topics when
    /// empty.
    pub topics: Vec<usize>,
    /// Words whose full topic curves go into the topic-evolution report.
    pub words: Vec<String>,
    pub words_per_topic: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            author_groups: None,
            novelty_bins: 10,
            topics: Vec::new(),
            words: Vec::new(),
            words_per_topic: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub embeddings: SgnsConfig,
    #[serde(default)]
    pub detm: DetmConfig,
    #[serde(default)]
    pub measures: MeasuresSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_threads() -> usize {
    1
}

impl PipelineConfig {
    /// Load from a TOML or JSON file, chosen by extension (TOML when
    /// ambiguous).
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        let cfg: PipelineConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("bad JSON config: {e}")))?
        } else {
            toml::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("bad TOML config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.corpus.path.exists() {
            return Err(PipelineError::Config(format!(
                "corpus path {} does not exist",
                self.corpus.path.display()
            )));
        }
        if let Some(g) = &self.report.author_groups {
            if !g.exists() {
                return Err(PipelineError::Config(format!(
                    "author_groups path {} does not exist",
                    g.display()
                )));
            }
        }
        if self.corpus.window_years == 0 || self.corpus.window_count == 0 {
            return Err(PipelineError::Config(
                "window_years and window_count must be positive".into(),
            ));
        }
        if !(self.corpus.dev_fraction > 0.0 && self.corpus.dev_fraction < 1.0) {
            return Err(PipelineError::Config(format!(
                "dev_fraction {} must lie in (0, 1)",
                self.corpus.dev_fraction
            )));
        }
        if self.threads == 0 {
            return Err(PipelineError::Config("threads must be >= 1".into()));
        }
        if self.report.novelty_bins == 0 {
            return Err(PipelineError::Config("novelty_bins must be >= 1".into()));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> Result<WindowSpec, PipelineError> {
        WindowSpec::new(
            self.corpus.start_year,
            self.corpus.window_years,
            self.corpus.window_count,
        )
        .map_err(|e| PipelineError::Config(e.to_string()))
    }
}
