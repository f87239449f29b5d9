//! End-to-end pipeline and CLI contract tests on a tiny corpus.

use std::path::Path;
use std::process::Command;

use diachron_core::corpus::Document;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_corpus() -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vocab: Vec<String> = (0..30).map(|i| format!("v{i:02}")).collect();
    let mut docs = Vec::new();
    for t in 0..2 {
        for a in 0..2 {
            for d in 0..20 {
                let tokens = (0..60)
                    .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                    .collect();
                docs.push(Document {
                    id: format!("d{t}{a}{d}"),
                    author: format!("auth{t}_{a}"),
                    year: t * 75 + rng.gen_range(0..75),
                    tokens,
                });
            }
        }
    }
    docs
}

fn write_inputs(dir: &Path) {
    let mut jsonl = String::new();
    for doc in tiny_corpus() {
        jsonl.push_str(&serde_json::to_string(&doc).unwrap());
        jsonl.push('\n');
    }
    std::fs::write(dir.join("corpus.jsonl"), jsonl).unwrap();
    std::fs::write(
        dir.join("config.toml"),
        format!(
            r#"seed = 7
output_dir = "{out}"

[corpus]
path = "{corpus}"
start_year = 0
window_years = 75
window_count = 2
min_word_count = 2

[embeddings]
dim = 8
epochs = 1

[detm]
topics = 2
hidden = 8
batch_size = 64
epochs = 5
"#,
            out = dir.join("out").display(),
            corpus = dir.join("corpus.jsonl").display(),
        ),
    )
    .unwrap();
}

fn diachron() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diachron"))
}

#[test]
fn cli_run_then_resume_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let config = dir.path().join("config.toml");

    let out1 = diachron().args(["run", "--config"]).arg(&config).output().unwrap();
    assert!(
        out1.status.success(),
        "first run failed: {}",
        String::from_utf8_lossy(&out1.stderr)
    );
    let stdout = String::from_utf8_lossy(&out1.stdout);
    assert!(stdout.contains("done: report"), "stdout: {stdout}");
    let manifest1 = std::fs::read(dir.path().join("out/manifest.json")).unwrap();
    let model1 = std::fs::read(dir.path().join("out/model.bin")).unwrap();

    // resumed run reuses checkpoints and reproduces the manifest
    let out2 = diachron()
        .args(["run", "--resume", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out2.status.success());
    let manifest2 = std::fs::read(dir.path().join("out/manifest.json")).unwrap();
    let model2 = std::fs::read(dir.path().join("out/model.bin")).unwrap();
    assert_eq!(manifest1, manifest2);
    assert_eq!(model1, model2);

    // no stray .partial files left behind
    for entry in std::fs::read_dir(dir.path().join("out")).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(
            !name.to_string_lossy().ends_with(".partial"),
            "leftover partial file {name:?}"
        );
    }
}

#[test]
fn cli_seed_override_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let config = dir.path().join("config.toml");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, seed) in [(&out_a, "7"), (&out_b, "8")] {
        let st = diachron()
            .args(["run", "--seed", seed, "--output-dir"])
            .arg(out)
            .arg("--config")
            .arg(&config)
            .status()
            .unwrap();
        assert!(st.success());
    }
    let a = std::fs::read(out_a.join("model.bin")).unwrap();
    let b = std::fs::read(out_b.join("model.bin")).unwrap();
    assert_ne!(a, b, "different seeds produced identical models");
}

#[test]
fn cli_missing_config_is_exit_1() {
    let out = diachron()
        .args(["run", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn cli_bad_corpus_path_is_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("config.toml"),
        format!(
            r#"seed = 1
output_dir = "{out}"

[corpus]
path = "{missing}"
start_year = 0
window_count = 2
"#,
            out = dir.path().join("out").display(),
            missing = dir.path().join("nope.jsonl").display(),
        ),
    )
    .unwrap();
    let out = diachron()
        .args(["run", "--config"])
        .arg(dir.path().join("config.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_malformed_jsonl_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.jsonl"), "{not json\n").unwrap();
    std::fs::write(
        dir.path().join("config.toml"),
        format!(
            r#"seed = 1
output_dir = "{out}"

[corpus]
path = "{corpus}"
start_year = 0
window_count = 2
"#,
            out = dir.path().join("out").display(),
            corpus = dir.path().join("corpus.jsonl").display(),
        ),
    )
    .unwrap();
    let out = diachron()
        .args(["ingest", "--config"])
        .arg(dir.path().join("config.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "stderr: {stderr}");
}

#[test]
fn cli_stage_subcommands_stop_early() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let config = dir.path().join("config.toml");
    let st = diachron()
        .args(["embed", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(st.success());
    let out = dir.path().join("out");
    assert!(out.join("embeddings.bin").exists());
    assert!(!out.join("model.bin").exists());
    assert!(!out.join("word_ranking.csv").exists());
}
