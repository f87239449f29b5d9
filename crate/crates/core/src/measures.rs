//! Diagnostics over the fitted model: per-window bimodality scores,
//! change-point location with deltas under an L2 cost, penalized multi-
//! segment PELT, and author novelty via Jensen-Shannon divergence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::WindowedCorpus;
use crate::detm::{DetmError, DetmState};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("distribution must have at least 2 entries, got {0}")]
    TooFewTopics(usize),
    #[error("input is not a probability distribution (sum = {0})")]
    NotSimplex(f64),
    #[error("sequence of length {len} too short for min_seg_len {min_seg_len}")]
    SequenceTooShort { len: usize, min_seg_len: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("author {0} not found in corpus")]
    UnknownAuthor(String),
    #[error("author {0} appears in window 0: no preceding window")]
    NoPrecedingWindow(String),
    #[error("window {0} has no subdocs to form a reference distribution")]
    EmptyReferenceWindow(usize),
    #[error("author {author} spans multiple windows: {windows:?}")]
    AmbiguousWindow { author: String, windows: Vec<usize> },
    #[error(transparent)]
    Detm(#[from] DetmError),
}

/// Per-word bimodality scores over windows. `None` marks windows where
/// the word is unattested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BimodalityCurve {
    pub word: String,
    pub scores: Vec<Option<f64>>,
    pub support: Vec<f64>,
}

impl BimodalityCurve {
    pub fn attested_windows(&self) -> usize {
        self.scores.iter().filter(|s| s.is_some()).count()
    }
}

/// Change-point of a word's bimodality sequence: the split minimizing the
/// two-segment L2 cost. `cp_index` is the first window of the right segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangePointResult {
    pub word: String,
    pub cp_index: usize,
    pub delta: f64,
    pub left_mean: f64,
    pub right_mean: f64,
}

/// Jensen-Shannon divergence of an author's aggregate topic distribution
/// from the preceding window's aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoveltyRecord {
    pub author: String,
    pub window_index: usize,
    pub novelty: f64,
    pub group: Option<String>,
}

fn check_simplex(dist: &[f64]) -> Result<(), MeasureError> {
    if dist.len() < 2 {
        return Err(MeasureError::TooFewTopics(dist.len()));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || dist.iter().any(|&p| p < 0.0) {
        return Err(MeasureError::NotSimplex(sum));
    }
    Ok(())
}

/// Degree to which the distribution's mass is evenly and exhaustively
/// split between its two largest entries:
/// `((1 - (first - second)) + (first + second)) / 2`, in (0, 1].
pub fn bimodality(dist: &[f64]) -> Result<f64, MeasureError> {
    check_simplex(dist)?;
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in dist {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    let evenly_distr = 1.0 - (first - second);
    let exhaustive = first + second;
    Ok((evenly_distr + exhaustive) / 2.0)
}

/// Best single split of `scores` into two constant segments under L2 cost.
/// Ties broken toward the smallest split index.
pub fn single_change_point(
    scores: &[f64],
    min_seg_len: usize,
) -> Result<(usize, f64, f64, f64), MeasureError> {
    let n = scores.len();
    let min_seg_len = min_seg_len.max(1);
    if n < 2 * min_seg_len {
        return Err(MeasureError::SequenceTooShort {
            len: n,
            min_seg_len,
        });
    }
    // prefix sums for O(1) segment SSE
    let mut sum = vec![0.0; n + 1];
    let mut sq = vec![0.0; n + 1];
    for (i, &x) in scores.iter().enumerate() {
        sum[i + 1] = sum[i] + x;
        sq[i + 1] = sq[i] + x * x;
    }
    let sse = |a: usize, b: usize| -> f64 {
        let s = sum[b] - sum[a];
        let q = sq[b] - sq[a];
        let len = (b - a) as f64;
        (q - s * s / len).max(0.0)
    };
    let mut best_tau = min_seg_len;
    let mut best_cost = f64::INFINITY;
    for tau in min_seg_len..=(n - min_seg_len) {
        let cost = sse(0, tau) + sse(tau, n);
        if cost < best_cost - 1e-12 {
            best_cost = cost;
            best_tau = tau;
        }
    }
    let left_mean = (sum[best_tau] - sum[0]) / best_tau as f64;
    let right_mean = (sum[n] - sum[best_tau]) / (n - best_tau) as f64;
    Ok((best_tau, (left_mean - right_mean).abs(), left_mean, right_mean))
}

/// Penalized optimal segmentation under piecewise-constant L2 cost (PELT).
/// Returns the change-point indices (each the first index of a new
/// segment), minimizing total SSE + penalty * (#change-points).
pub fn pelt_segment(scores: &[f64], penalty: f64, min_seg_len: usize) -> Vec<usize> {
    assert!(penalty > 0.0, "penalty must be positive");
    let n = scores.len();
    let min_seg_len = min_seg_len.max(1);
    if n < 2 * min_seg_len {
        return Vec::new();
    }
    let mut sum = vec![0.0; n + 1];
    let mut sq = vec![0.0; n + 1];
    for (i, &x) in scores.iter().enumerate() {
        sum[i + 1] = sum[i] + x;
        sq[i + 1] = sq[i] + x * x;
    }
    let cost = |a: usize, b: usize| -> f64 {
        let s = sum[b] - sum[a];
        let q = sq[b] - sq[a];
        let len = (b - a) as f64;
        (q - s * s / len).max(0.0)
    };

    // f[t] = optimal cost of scores[0..t]; first segment carries no penalty
    let mut f = vec![f64::INFINITY; n + 1];
    f[0] = -penalty;
    let mut prev = vec![0usize; n + 1];
    let mut candidates: Vec<usize> = vec![0];
    for t in 1..=n {
        let mut best = f64::INFINITY;
        let mut best_s = usize::MAX;
        for &s in &candidates {
            if t < s + min_seg_len || !f[s].is_finite() {
                continue;
            }
            let c = f[s] + cost(s, t) + penalty;
            // strict improvement keeps ties at the smallest split
            if c < best - 1e-12 {
                best = c;
                best_s = s;
            }
        }
        if best_s != usize::MAX {
            f[t] = best;
            prev[t] = best_s;
        }
        // pruning: L2 cost is subadditive, so a candidate beaten by this
        // much can never become optimal again
        candidates.retain(|&s| {
            t < s + min_seg_len || (f[s].is_finite() && f[s] + cost(s, t) <= f[t] + 1e-9)
        });
        candidates.push(t);
    }

    let mut cps = Vec::new();
    let mut t = n;
    while t > 0 {
        let s = prev[t];
        if s > 0 {
            cps.push(s);
        }
        t = s;
    }
    cps.reverse();
    cps
}

/// Jensen-Shannon divergence with natural logarithm, bounded by ln 2.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MeasureError> {
    if p.len() != q.len() {
        return Err(MeasureError::LengthMismatch(p.len(), q.len()));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            total += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            total += 0.5 * qi * (qi / m).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Linearly interpolate unattested windows between their nearest attested
/// neighbors; runs before the first / after the last attested window are
/// clamped to that neighbor's value. Returns `None` if nothing is attested.
pub fn interpolate_missing(scores: &[Option<f64>]) -> Option<Vec<f64>> {
    let attested: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|_| i))
        .collect();
    if attested.is_empty() {
        return None;
    }
    let mut out = vec![0.0; scores.len()];
    for i in 0..scores.len() {
        if let Some(v) = scores[i] {
            out[i] = v;
            continue;
        }
        let left = attested.iter().rev().find(|&&a| a < i).copied();
        let right = attested.iter().find(|&&a| a > i).copied();
        out[i] = match (left, right) {
            (Some(l), Some(r)) => {
                let w = (i - l) as f64 / (r - l) as f64;
                scores[l].unwrap() * (1.0 - w) + scores[r].unwrap() * w
            }
            (Some(l), None) => scores[l].unwrap(),
            (None, Some(r)) => scores[r].unwrap(),
            (None, None) => unreachable!(),
        };
    }
    Some(out)
}

/// Bimodality curve of one word from the fitted model's per-window
/// empirical topic distributions.
pub fn bimodality_curve(
    state: &DetmState,
    corpus: &WindowedCorpus,
    word: &str,
) -> Result<BimodalityCurve, MeasureError> {
    let curve = state.word_topic_curve(corpus, word)?;
    let t_count = curve.phi.len();
    let mut scores = Vec::with_capacity(t_count);
    for t in 0..t_count {
        if curve.support[t] > 0.0 {
            scores.push(Some(bimodality(&curve.phi[t])?));
        } else {
            scores.push(None);
        }
    }
    Ok(BimodalityCurve {
        word: word.to_string(),
        scores,
        support: curve.support,
    })
}

fn change_point_from_scores(
    word: &str,
    scores: &[Option<f64>],
    min_attested: usize,
    min_seg_len: usize,
) -> Result<Option<ChangePointResult>, MeasureError> {
    let attested = scores.iter().filter(|s| s.is_some()).count();
    if attested < min_attested {
        return Ok(None);
    }
    let Some(filled) = interpolate_missing(scores) else {
        return Ok(None);
    };
    if filled.len() < 2 * min_seg_len.max(1) {
        return Ok(None);
    }
    let (cp_index, delta, left_mean, right_mean) = single_change_point(&filled, min_seg_len)?;
    Ok(Some(ChangePointResult {
        word: word.to_string(),
        cp_index,
        delta,
        left_mean,
        right_mean,
    }))
}

/// Change-point of one word's bimodality curve. Words attested in fewer
/// than `min_attested` windows return `Ok(None)` (too sparse to rank).
pub fn word_change_point(
    state: &DetmState,
    corpus: &WindowedCorpus,
    word: &str,
    min_attested: usize,
    min_seg_len: usize,
) -> Result<Option<ChangePointResult>, MeasureError> {
    let curve = bimodality_curve(state, corpus, word)?;
    change_point_from_scores(word, &curve.scores, min_attested, min_seg_len)
}

/// Change-points for the whole vocabulary, computed from a single pass
/// over the subdocs. Words too sparse to rank are omitted.
pub fn all_change_points(
    state: &DetmState,
    corpus: &WindowedCorpus,
    min_attested: usize,
    min_seg_len: usize,
) -> Result<Vec<ChangePointResult>, MeasureError> {
    let curves = state.all_word_topic_curves(corpus)?;
    let mut out = Vec::new();
    for curve in curves {
        let t_count = curve.phi.len();
        let mut scores = Vec::with_capacity(t_count);
        for t in 0..t_count {
            if curve.support[t] > 0.0 {
                scores.push(Some(bimodality(&curve.phi[t])?));
            } else {
                scores.push(None);
            }
        }
        if let Some(r) = change_point_from_scores(&curve.word, &scores, min_attested, min_seg_len)? {
            out.push(r);
        }
    }
    Ok(out)
}

/// Token-count-weighted mean of `infer_theta` over a set of subdocs.
fn mean_theta(
    state: &DetmState,
    corpus: &WindowedCorpus,
    indices: &[usize],
) -> Result<Vec<f64>, DetmError> {
    let k = state.topic_count();
    let mut acc = vec![0.0; k];
    let mut weight = 0.0;
    for &i in indices {
        let s = &corpus.subdocs[i];
        let theta = state.infer_theta(&s.counts, s.window)?;
        let w = s.token_count() as f64;
        for (a, t) in acc.iter_mut().zip(&theta) {
            *a += w * t;
        }
        weight += w;
    }
    for a in acc.iter_mut() {
        *a /= weight;
    }
    Ok(acc)
}

/// Novelty of `author`: JSD between the author's aggregate topic
/// distribution and that of the window immediately preceding theirs.
pub fn author_novelty(
    state: &DetmState,
    corpus: &WindowedCorpus,
    author: &str,
) -> Result<NoveltyRecord, MeasureError> {
    let mut windows: Vec<usize> = corpus
        .subdocs
        .iter()
        .filter(|s| s.author == author)
        .map(|s| s.window)
        .collect();
    windows.sort_unstable();
    windows.dedup();
    match windows.len() {
        0 => Err(MeasureError::UnknownAuthor(author.to_string())),
        1 => author_novelty_in_window(state, corpus, author, windows[0]),
        _ => Err(MeasureError::AmbiguousWindow {
            author: author.to_string(),
            windows,
        }),
    }
}

/// Novelty of `author` restricted to their subdocs in window `t`.
pub fn author_novelty_in_window(
    state: &DetmState,
    corpus: &WindowedCorpus,
    author: &str,
    t: usize,
) -> Result<NoveltyRecord, MeasureError> {
    if t == 0 {
        return Err(MeasureError::NoPrecedingWindow(author.to_string()));
    }
    let author_idx: Vec<usize> = corpus
        .subdocs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.author == author && s.window == t)
        .map(|(i, _)| i)
        .collect();
    if author_idx.is_empty() {
        return Err(MeasureError::UnknownAuthor(author.to_string()));
    }
    let prev_idx: Vec<usize> = corpus
        .subdocs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.window == t - 1)
        .map(|(i, _)| i)
        .collect();
    if prev_idx.is_empty() {
        return Err(MeasureError::EmptyReferenceWindow(t - 1));
    }
    let author_dist = mean_theta(state, corpus, &author_idx)?;
    let reference = mean_theta(state, corpus, &prev_idx)?;
    Ok(NoveltyRecord {
        author: author.to_string(),
        window_index: t,
        novelty: jsd(&author_dist, &reference)?,
        group: None,
    })
}

/// Per-window sum of deltas over words whose change-point lands in that
/// window.
pub fn summed_deltas_by_window(results: &[ChangePointResult], t_count: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_count];
    for r in results {
        if r.cp_index < t_count {
            out[r.cp_index] += r.delta;
        }
    }
    out
}
