//! Generate the bundled synthetic planted-shift corpus: a JSONL corpus, an
//! author-groups CSV, and a ready-to-run pipeline config. Useful as a demo
//! input for `diachron run` when no real corpus is at hand.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use diachron_core::synth;

#[derive(Parser)]
#[command(name = "diachron-synth", version)]
struct Cli {
    /// Directory to write corpus.jsonl, author_groups.csv and config.toml.
    #[arg(long)]
    output_dir: PathBuf,

    /// Generation seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> std::io::Result<()> {
    let dir = &cli.output_dir;
    std::fs::create_dir_all(dir)?;
    let corpus = synth::shift_corpus(cli.seed);

    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join("corpus.jsonl"))?);
    for doc in &corpus.documents {
        serde_json::to_writer(&mut jsonl, doc)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;

    let mut groups = String::from("author,group\n");
    for (author, group) in &corpus.author_groups {
        groups.push_str(&format!("{author},{group}\n"));
    }
    std::fs::write(dir.join("author_groups.csv"), groups)?;

    let config = format!(
        r#"seed = {seed}
output_dir = "{dir}/out"

[corpus]
path = "{dir}/corpus.jsonl"
format = "jsonl"
start_year = {start_year}
window_years = {window_years}
window_count = {window_count}

[embeddings]
dim = 16
epochs = 3

[detm]
topics = 3
hidden = 64
batch_size = 512
epochs = 120
patience = 8
learning_rate = 0.01

[report]
author_groups = "{dir}/author_groups.csv"
words = ["{target}"]
"#,
        seed = cli.seed,
        dir = dir.display(),
        start_year = corpus.start_year,
        window_years = corpus.window_years,
        window_count = corpus.window_count,
        target = corpus.target_word,
    );
    std::fs::write(dir.join("config.toml"), config)?;
    println!(
        "wrote {} documents; target word {:?} shifts at window {}; novel author {:?} in window 4",
        corpus.documents.len(),
        corpus.target_word,
        corpus.shift_window,
        corpus.novel_author
    );
    Ok(())
}
