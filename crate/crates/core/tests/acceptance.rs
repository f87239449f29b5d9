//! Acceptance suite: one test per release criterion, each printing a
//! single PASS line with the measured values (run with
//! `cargo test --test acceptance -- --nocapture` to see them).
//!
//! Criteria 5-8 use generated corpora with planted structure (see
//! `diachron_core::synth`) because the measures operate on fitted models
//! and need known ground truth.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diachron_core::corpus::{self, WindowSpec};
use diachron_core::detm::{BatchDoc, DetmConfig, DetmState};
use diachron_core::embeddings::{train_sgns, EmbeddingMatrix, SgnsConfig};
use diachron_core::measures::{bimodality, jsd, pelt_segment, single_change_point};
use diachron_core::report::config::{
    CorpusSection, MeasuresSection, PipelineConfig, ReportSection,
};
use diachron_core::report::{run_pipeline, ReportBundle, Stage};
use diachron_core::synth;

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_bimodality_exactness() {
    let cases: &[(&[f64], f64)] = &[
        (&[0.5, 0.5, 0.0, 0.0], 1.0),
        (&[1.0, 0.0, 0.0], 0.5),
        (&[0.4, 0.3, 0.3], 0.8),
    ];
    for (dist, want) in cases {
        let got = bimodality(dist).unwrap();
        assert!(
            (got - want).abs() <= 1e-12,
            "bimodality({dist:?}) = {got}, want {want}"
        );
    }
    println!("criterion 1 PASS: bimodality hand values exact within 1e-12");
}

// ---------------------------------------------------------------- 2

fn sse(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum()
}

fn brute_force_split(scores: &[f64], min_seg_len: usize) -> (usize, f64) {
    let n = scores.len();
    let mut best = (min_seg_len, f64::INFINITY);
    for tau in min_seg_len..=(n - min_seg_len) {
        let cost = sse(&scores[..tau]) + sse(&scores[tau..]);
        if cost < best.1 - 1e-12 {
            best = (tau, cost);
        }
    }
    best
}

fn exhaustive_segmentation(scores: &[f64], penalty: f64, min_seg_len: usize) -> (Vec<usize>, f64) {
    let n = scores.len();
    let mut best: (Vec<usize>, f64) = (Vec::new(), f64::INFINITY);
    // bit i of the mask = a segment starts at index i + 1
    for mask in 0u32..(1 << (n - 1)) {
        let mut cps: Vec<usize> = (1..n).filter(|i| mask >> (i - 1) & 1 == 1).collect();
        let mut bounds = vec![0usize];
        bounds.append(&mut cps.clone());
        bounds.push(n);
        if bounds.windows(2).any(|w| w[1] - w[0] < min_seg_len) {
            continue;
        }
        let cost: f64 = bounds
            .windows(2)
            .map(|w| sse(&scores[w[0]..w[1]]))
            .sum::<f64>()
            + penalty * cps.len() as f64;
        if cost < best.1 - 1e-12 {
            cps.sort_unstable();
            best = (cps, cost);
        }
    }
    best
}

fn pelt_cost(scores: &[f64], cps: &[usize], penalty: f64) -> f64 {
    let mut bounds = vec![0usize];
    bounds.extend_from_slice(cps);
    bounds.push(scores.len());
    bounds
        .windows(2)
        .map(|w| sse(&scores[w[0]..w[1]]))
        .sum::<f64>()
        + penalty * cps.len() as f64
}

#[test]
fn criterion_2_segmentation_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240201);
    for case in 0..1000 {
        let n = rng.gen_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let (tau, _, _, _) = single_change_point(&scores, 1).unwrap();
        let (want_tau, want_cost) = brute_force_split(&scores, 1);
        if tau != want_tau {
            let got_cost = sse(&scores[..tau]) + sse(&scores[tau..]);
            assert!(
                (got_cost - want_cost).abs() <= 1e-9,
                "case {case}: tau {tau} vs {want_tau}, costs {got_cost} vs {want_cost}"
            );
        }
    }
    for case in 0..200 {
        let n = rng.gen_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let penalty = rng.gen_range(0.01..1.0);
        let got = pelt_segment(&scores, penalty, 1);
        let (want, want_cost) = exhaustive_segmentation(&scores, penalty, 1);
        if got != want {
            let got_cost = pelt_cost(&scores, &got, penalty);
            assert!(
                (got_cost - want_cost).abs() <= 1e-9,
                "case {case}: cps {got:?} vs {want:?}, costs {got_cost} vs {want_cost}"
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "segmentation oracles took {secs:.1} s (budget 10 s)");
    println!(
        "criterion 2 PASS: 1000 split + 200 PELT sequences match oracles ({secs:.2} s)"
    );
}

// ---------------------------------------------------------------- 3

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= sum);
    v
}

#[test]
fn criterion_3_jsd_analytic() {
    let ln2 = std::f64::consts::LN_2;
    let d = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    assert!((d - ln2).abs() <= 1e-9, "jsd of disjoint = {d}, want ln 2");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let k = rng.gen_range(2..=8);
        let p = random_simplex(&mut rng, k);
        let q = random_simplex(&mut rng, k);
        let pq = jsd(&p, &q).unwrap();
        let qp = jsd(&q, &p).unwrap();
        assert!((pq - qp).abs() <= 1e-12, "asymmetric: {pq} vs {qp}");
        assert!(pq >= 0.0 && pq <= ln2 + 1e-12, "out of range: {pq}");
        assert!(jsd(&p, &p).unwrap() <= 1e-12, "self-divergence nonzero");
    }
    println!("criterion 3 PASS: jsd analytic values, symmetry and range over 1000 pairs");
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_gradient_check() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (v, l, k, t) = (20usize, 4usize, 3usize, 3usize);
    let emb = EmbeddingMatrix {
        words: (0..v).map(|i| format!("w{i}")).collect(),
        dim: l,
        rho: (0..v * l).map(|_| rng.gen::<f32>() - 0.5).collect(),
    };
    let cfg = DetmConfig {
        topics: k,
        hidden: 6,
        sigma2_alpha: 0.01,
        sigma2_eta: 0.01,
        a2: 1.0,
        seed: 13,
        ..DetmConfig::default()
    };
    let mut st = DetmState::init(&emb, t, cfg).unwrap();
    // break the flat-walk symmetry so chained-KL grads are non-trivial
    for x in st.params.m_alpha.iter_mut() {
        *x += 0.01 * (rng.gen::<f64>() - 0.5);
    }
    for x in st.params.m_eta.iter_mut() {
        *x += 0.1 * (rng.gen::<f64>() - 0.5);
    }

    let docs: Vec<Vec<(u32, u32)>> = vec![
        vec![(0, 3), (5, 1), (7, 2)],
        vec![(1, 1), (2, 4)],
        vec![(10, 2), (19, 2), (3, 1)],
        vec![(4, 1), (12, 3)],
    ];
    let windows = [0usize, 1, 2, 1];
    let batch: Vec<BatchDoc<'_>> = docs
        .iter()
        .zip(windows)
        .map(|(c, w)| BatchDoc { counts: c, window: w })
        .collect();
    let eps = Array2::from_shape_fn((4, k), |(i, j)| 0.5 * ((i * k + j) as f64 / 12.0 - 0.5));
    let (kl_weight, scale, h) = (0.7, 2.5, 1e-5);

    let (_, grads) = st.elbo_with_noise(&batch, kl_weight, scale, &eps).unwrap();
    let g_slices: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, tensor) in g_slices.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let mut perturbed = st.clone();
            perturbed.params.slices_mut()[ti][i] += h;
            let (e_plus, _) = perturbed.elbo_with_noise(&batch, kl_weight, scale, &eps).unwrap();
            perturbed.params.slices_mut()[ti][i] -= 2.0 * h;
            let (e_minus, _) = perturbed.elbo_with_noise(&batch, kl_weight, scale, &eps).unwrap();
            let fd = (e_plus - e_minus) / (2.0 * h);
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-3);
            assert!(rel < 1e-4, "tensor {ti}[{i}]: analytic {a} vs fd {fd} (rel {rel})");
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 30.0, "gradient check took {secs:.1} s (budget 30 s)");
    println!(
        "criterion 4 PASS: {checked} partials, max relative error {max_rel:.2e} ({secs:.2} s)"
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_planted_two_topic_recovery() {
    let started = Instant::now();
    let planted = synth::two_topic_corpus(5);
    let spec = WindowSpec::new(planted.start_year, planted.window_years, planted.window_count)
        .unwrap();
    let corpus = corpus::build_corpus(&planted.documents, spec, 500, 5, 0.1, 5).unwrap();
    let sgns = SgnsConfig {
        dim: 16,
        epochs: 2,
        seed: 5,
        ..SgnsConfig::default()
    };
    let model = train_sgns(&corpus, &sgns).unwrap();
    let cfg = DetmConfig {
        topics: 2,
        hidden: 64,
        batch_size: 512,
        epochs: 60,
        patience: 6,
        learning_rate: 0.01,
        seed: 5,
        ..DetmConfig::default()
    };
    let init = DetmState::init(&model.input, spec.count as usize, cfg).unwrap();
    let (fitted, log) = init.fit(&corpus).unwrap();

    // smoothed training objective rises from start to finish
    let smooth = 5.min(log.len());
    let head: f64 = log[..smooth].iter().map(|e| e.train_elbo).sum::<f64>() / smooth as f64;
    let tail: f64 = log[log.len() - smooth..].iter().map(|e| e.train_elbo).sum::<f64>()
        / smooth as f64;
    assert!(
        tail > head,
        "smoothed ELBO did not increase: {head:.1} -> {tail:.1}"
    );

    // each topic's top-10 words stay inside one planted set, in every window
    let beta = fitted.beta();
    let vocab = &corpus.vocabulary;
    for k in 0..2 {
        let mut topic_set: Option<&str> = None;
        for t in 0..spec.count as usize {
            for (w, _) in beta.top_words(k, t, 10) {
                let word = vocab.word(w as u32);
                let set = if planted.set_a.iter().any(|x| x == word) {
                    "A"
                } else if planted.set_b.iter().any(|x| x == word) {
                    "B"
                } else {
                    panic!("topic {k} top word {word:?} is in neither planted set")
                };
                match topic_set {
                    None => topic_set = Some(set),
                    Some(s) => assert_eq!(
                        s, set,
                        "topic {k} mixes planted sets in window {t} ({word:?})"
                    ),
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "model sanity took {secs:.1} s (budget 300 s)");
    println!(
        "criterion 5 PASS: ELBO {head:.1} -> {tail:.1}, topic top-10s pure ({secs:.1} s)"
    );
}

// ---------------------------------------------------- shared 6/7/8

struct ShiftRun {
    _dir: tempfile::TempDir,
    out: PathBuf,
    bundle: ReportBundle,
    cfg: PipelineConfig,
    target_word: String,
    shift_window: usize,
    novel_author: String,
    control_author: String,
    spec: WindowSpec,
    secs: f64,
}

fn write_shift_inputs(dir: &Path) -> (PathBuf, PathBuf, synth::ShiftCorpus) {
    let planted = synth::shift_corpus(42);
    let corpus_path = dir.join("corpus.jsonl");
    let mut jsonl = String::new();
    for doc in &planted.documents {
        jsonl.push_str(&serde_json::to_string(doc).unwrap());
        jsonl.push('\n');
    }
    std::fs::write(&corpus_path, jsonl).unwrap();
    let groups_path = dir.join("author_groups.csv");
    let mut csv = String::from("author,group\n");
    for (a, g) in &planted.author_groups {
        csv.push_str(&format!("{a},{g}\n"));
    }
    std::fs::write(&groups_path, csv).unwrap();
    (corpus_path, groups_path, planted)
}

fn shift_config(corpus_path: &Path, groups_path: &Path, out: &Path) -> PipelineConfig {
    PipelineConfig {
        corpus: CorpusSection {
            path: corpus_path.to_path_buf(),
            format: corpus::CorpusFormat::Jsonl,
            start_year: 0,
            window_years: 75,
            window_count: 6,
            max_subdoc_tokens: 500,
            min_word_count: 5,
            dev_fraction: 0.1,
        },
        embeddings: SgnsConfig {
            dim: 16,
            epochs: 3,
            ..SgnsConfig::default()
        },
        detm: DetmConfig {
            topics: 3,
            hidden: 64,
            batch_size: 512,
            epochs: 120,
            patience: 8,
            learning_rate: 0.01,
            ..DetmConfig::default()
        },
        measures: MeasuresSection::default(),
        report: ReportSection {
            author_groups: Some(groups_path.to_path_buf()),
            ..ReportSection::default()
        },
        seed: 42,
        output_dir: out.to_path_buf(),
        threads: 1,
    }
}

fn shift_run() -> &'static ShiftRun {
    static RUN: OnceLock<ShiftRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (corpus_path, groups_path, planted) = write_shift_inputs(dir.path());
        let out = dir.path().join("out");
        let cfg = shift_config(&corpus_path, &groups_path, &out);
        let started = Instant::now();
        let bundle = run_pipeline(&cfg, Stage::Report, false).unwrap().unwrap();
        let secs = started.elapsed().as_secs_f64();
        let spec = cfg.window_spec().unwrap();
        ShiftRun {
            _dir: dir,
            out,
            bundle,
            cfg,
            target_word: planted.target_word,
            shift_window: planted.shift_window,
            novel_author: planted.novel_author,
            control_author: planted.control_author,
            spec,
            secs,
        }
    })
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_planted_shift_end_to_end() {
    let run = shift_run();
    assert!(
        run.secs < 600.0,
        "pipeline run took {:.1} s (budget 600 s)",
        run.secs
    );
    let rows = read_csv(&run.out.join("word_ranking.csv"));
    assert!(!rows.is_empty());
    assert_eq!(
        rows[0][0], run.target_word,
        "target word does not rank first: {:?}",
        rows[0]
    );
    let cp_year: i32 = rows[0][1].parse().unwrap();
    let cp_window = ((cp_year - run.spec.start_year) / run.spec.width_years as i32) as i64;
    let plant = run.shift_window as i64;
    assert!(
        (cp_window - plant).abs() <= 1,
        "change-point window {cp_window} not within 1 of plant {plant}"
    );
    let target_delta: f64 = rows[0][2].parse().unwrap();
    // the delta range is [0, 0.5] (bimodality lives in [0.5, 1]), so a
    // full-range step carries a small inference tolerance
    assert!(
        target_delta >= 0.5 - 0.05,
        "target delta {target_delta:.4} below 0.45"
    );
    let mut control: Vec<f64> = rows[1..]
        .iter()
        .map(|r| r[2].parse::<f64>().unwrap().abs())
        .collect();
    control.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = control[control.len() / 2];
    assert!(
        median <= 0.15,
        "median control delta {median:.4} above 0.15"
    );
    println!(
        "criterion 6 PASS: cp window {cp_window} (plant {plant}), target delta {target_delta:.3}, \
         median control delta {median:.4} ({:.1} s)",
        run.secs
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_planted_novelty() {
    let run = shift_run();
    let rows = read_csv(&run.out.join("author_ranking.csv"));
    assert!(!rows.is_empty());
    assert_eq!(
        rows[0][0], run.novel_author,
        "novel author does not rank first: {:?}",
        rows[0]
    );
    let novel: f64 = rows[0][2].parse().unwrap();
    let control_year = (run.spec.start_year + 4 * run.spec.width_years as i32).to_string();
    let control = rows
        .iter()
        .find(|r| r[0] == run.control_author && r[1] == control_year)
        .unwrap_or_else(|| panic!("control author {} missing", run.control_author));
    let control_novelty: f64 = control[2].parse().unwrap();
    assert!(
        control_novelty < 0.05,
        "control novelty {control_novelty:.4} not below 0.05"
    );
    println!(
        "criterion 7 PASS: novel author first (novelty {novel:.3}), control novelty \
         {control_novelty:.4}"
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_determinism() {
    let run = shift_run();
    let out2 = run._dir.path().join("out2");
    let mut cfg = run.cfg.clone();
    cfg.output_dir = out2;
    let bundle2 = run_pipeline(&cfg, Stage::Report, false).unwrap().unwrap();
    assert_eq!(run.bundle.files.len(), bundle2.files.len());
    for (a, b) in run.bundle.files.iter().zip(&bundle2.files) {
        assert_eq!(a.name, b.name);
        assert_eq!(
            a.sha256, b.sha256,
            "checksum of {} differs between identical runs",
            a.name
        );
    }
    println!(
        "criterion 8 PASS: {} report checksums identical across two runs",
        bundle2.files.len()
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_qualitative_note() {
    // Not a CI check: real-corpus behavior can't be validated against a
    // bundled fixture. Expected behavior when pointed at a Perseus-derived
    // JSONL corpus (documented for manual verification):
    //   * nearest_neighbors("bellum") surfaces battle vocabulary such as
    //     "proelium" among the top cosine neighbors;
    //   * early Christian authors cluster at the low end of the novelty
    //     ranking relative to contemporaneous pagan authors.
    println!(
        "criterion 9 PASS: qualitative expectations documented (manual, non-gating)"
    );
}
