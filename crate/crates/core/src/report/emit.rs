//! CSV/JSON emitters for the analysis artifacts.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::{WindowSpec, WindowedCorpus};
use crate::detm::DetmState;
use crate::measures::{ChangePointResult, NoveltyRecord};
use crate::report::PipelineError;

/// 9 significant digits; round-trips through `f64` parsing stably.
pub fn fmt_g9(x: f64) -> String {
    format!("{x:.8e}")
}

fn csv_error(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage: "report".into(),
        cause: e.to_string(),
    }
}

/// Words sorted by delta descending, ties by word. The gloss column is
/// intentionally empty: dictionary lookup is external data.
pub fn word_ranking_csv(
    results: &[ChangePointResult],
    spec: &WindowSpec,
) -> Result<Vec<u8>, PipelineError> {
    let mut sorted: Vec<&ChangePointResult> = results.iter().collect();
    sorted.sort_by(|a, b| {
        b.delta
            .partial_cmp(&a.delta)
            .unwrap()
            .then_with(|| a.word.cmp(&b.word))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["word", "cp_window_start_year", "delta", "gloss"])
        .map_err(csv_error)?;
    for r in sorted {
        w.write_record([
            r.word.as_str(),
            &spec.window_start(r.cp_index).to_string(),
            &fmt_g9(r.delta),
            "",
        ])
        .map_err(csv_error)?;
    }
    w.into_inner().map_err(csv_error)
}

/// Authors in descending novelty order.
pub fn author_ranking_csv(
    records: &[NoveltyRecord],
    spec: &WindowSpec,
) -> Result<Vec<u8>, PipelineError> {
    let mut sorted: Vec<&NoveltyRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.novelty
            .partial_cmp(&a.novelty)
            .unwrap()
            .then_with(|| a.author.cmp(&b.author))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["author", "window_start_year", "novelty", "group"])
        .map_err(csv_error)?;
    for r in sorted {
        w.write_record([
            r.author.as_str(),
            &spec.window_start(r.window_index).to_string(),
            &fmt_g9(r.novelty),
            r.group.as_deref().unwrap_or(""),
        ])
        .map_err(csv_error)?;
    }
    w.into_inner().map_err(csv_error)
}

/// Author counts per novelty bin and group; bin edges are equal-width
/// over [min, max] novelty, the last bin closed on the right.
pub fn novelty_histogram_csv(
    records: &[NoveltyRecord],
    bins: usize,
) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_index", "bin_start", "bin_end", "group", "count"])
        .map_err(csv_error)?;
    if records.is_empty() {
        return w.into_inner().map_err(csv_error);
    }
    let min = records.iter().map(|r| r.novelty).fold(f64::INFINITY, f64::min);
    let max = records
        .iter()
        .map(|r| r.novelty)
        .fold(f64::NEG_INFINITY, f64::max);
    let width = if max > min { (max - min) / bins as f64 } else { 1.0 };
    let mut groups: Vec<String> = records
        .iter()
        .map(|r| r.group.clone().unwrap_or_default())
        .collect();
    groups.sort();
    groups.dedup();
    let mut counts: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for r in records {
        let mut bin = ((r.novelty - min) / width).floor() as usize;
        if bin >= bins {
            bin = bins - 1;
        }
        *counts
            .entry((bin, r.group.clone().unwrap_or_default()))
            .or_default() += 1;
    }
    for bin in 0..bins {
        for g in &groups {
            let c = counts.get(&(bin, g.clone())).copied().unwrap_or(0);
            w.write_record([
                &bin.to_string(),
                &fmt_g9(min + bin as f64 * width),
                &fmt_g9(min + (bin + 1) as f64 * width),
                g,
                &c.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    w.into_inner().map_err(csv_error)
}

/// Per-window sum of change-point deltas.
pub fn window_deltas_csv(deltas: &[f64], spec: &WindowSpec) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["window_start_year", "summed_delta"])
        .map_err(csv_error)?;
    for (t, &d) in deltas.iter().enumerate() {
        w.write_record([&spec.window_start(t).to_string(), &fmt_g9(d)])
            .map_err(csv_error)?;
    }
    w.into_inner().map_err(csv_error)
}

#[derive(Serialize)]
struct TopicWindowJson {
    window: usize,
    start_year: i32,
    top_words: Vec<TopWordJson>,
}

#[derive(Serialize)]
struct TopWordJson {
    word: String,
    beta: f64,
}

#[derive(Serialize)]
struct TopicJson {
    topic: usize,
    windows: Vec<TopicWindowJson>,
}

#[derive(Serialize)]
struct WordCurveJson {
    word: String,
    phi: Vec<Vec<f64>>,
    support: Vec<f64>,
}

#[derive(Serialize)]
struct TopicEvolutionJson {
    topics: Vec<TopicJson>,
    words: Vec<WordCurveJson>,
}

/// Top words per requested topic and window, plus full topic curves for
/// the requested words.
pub fn topic_evolution_json(
    state: &DetmState,
    corpus: &WindowedCorpus,
    spec: &WindowSpec,
    topic_ids: &[usize],
    words: &[String],
    words_per_topic: usize,
) -> Result<Vec<u8>, PipelineError> {
    let stage_err = |cause: String| PipelineError::Stage {
        stage: "report".into(),
        cause,
    };
    let k = state.topic_count();
    let v = state.vocab_size();
    if words_per_topic > v {
        return Err(stage_err(format!(
            "words_per_topic {words_per_topic} exceeds vocabulary size {v}"
        )));
    }
    for &t in topic_ids {
        if t >= k {
            return Err(stage_err(format!("unknown topic id {t} (K = {k})")));
        }
    }
    let beta = state.beta();
    let topics = topic_ids
        .iter()
        .map(|&ki| TopicJson {
            topic: ki,
            windows: (0..state.t_count)
                .map(|t| TopicWindowJson {
                    window: t,
                    start_year: spec.window_start(t),
                    top_words: beta
                        .top_words(ki, t, words_per_topic)
                        .into_iter()
                        .map(|(vi, p)| TopWordJson {
                            word: corpus.vocabulary.word(vi as u32).to_string(),
                            beta: p,
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let mut word_curves = Vec::new();
    for word in words {
        let curve = state
            .word_topic_curve(corpus, word)
            .map_err(|e| stage_err(e.to_string()))?;
        word_curves.push(WordCurveJson {
            word: curve.word,
            phi: curve.phi,
            support: curve.support,
        });
    }
    serde_json::to_vec_pretty(&TopicEvolutionJson {
        topics,
        words: word_curves,
    })
    .map_err(|e| stage_err(e.to_string()))
}
