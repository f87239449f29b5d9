//! Synthetic corpora with planted structure.
//!
//! Real historical corpora cannot be bundled, so validation and demos use
//! generated corpora where the ground truth is known by construction: two
//! disjoint topic vocabularies, one target word that acquires a second
//! topic halfway through the time span, and one author whose vocabulary is
//! unattested in the preceding window.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;

/// Two disjoint 100-word vocabularies; every document draws uniformly from
/// exactly one of them.
pub struct TwoTopicCorpus {
    pub documents: Vec<Document>,
    pub set_a: Vec<String>,
    pub set_b: Vec<String>,
    pub start_year: i32,
    pub window_years: u32,
    pub window_count: u32,
}

/// Three planted topics plus a target word that shifts:
///
/// * topic A and topic B documents appear in every window, half and half;
/// * the target word occurs only inside topic-A documents in the first
///   `shift_window` windows, then equally inside topic-A and topic-B
///   documents from `shift_window` on — its topic distribution steps from
///   pure-A to an even A/B split;
/// * `novel_author` writes only topic-C words and only in window 4, where
///   topic C is otherwise unused — maximal novelty against window 3;
/// * `control_author` is an ordinary background author of window 4 whose
///   output matches the window-3 mixture.
pub struct ShiftCorpus {
    pub documents: Vec<Document>,
    pub target_word: String,
    pub control_words: Vec<String>,
    pub shift_window: usize,
    pub novel_author: String,
    pub control_author: String,
    pub author_groups: Vec<(String, String)>,
    pub start_year: i32,
    pub window_years: u32,
    pub window_count: u32,
}

fn word_set(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:03}")).collect()
}

fn uniform_doc(rng: &mut ChaCha8Rng, set: &[String], len: usize) -> Vec<String> {
    (0..len).map(|_| set[rng.gen_range(0..set.len())].clone()).collect()
}

fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// ~2,040 documents over 6 windows, 100 + 100 planted words.
pub fn two_topic_corpus(seed: u64) -> TwoTopicCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set_a = word_set("aqua", 100);
    let set_b = word_set("bellum", 100);
    let (start_year, window_years, window_count) = (0, 75, 6u32);
    let mut documents = Vec::new();
    for t in 0..window_count as i32 {
        for j in 0..4 {
            let author = format!("auctor{t}_{j}");
            for d in 0..85 {
                let set = if d % 2 == 0 { &set_a } else { &set_b };
                let year = start_year + t * window_years as i32 + rng.gen_range(0..window_years as i32);
                documents.push(Document {
                    id: format!("tt{t}_{j}_{d}"),
                    author: author.clone(),
                    year,
                    tokens: uniform_doc(&mut rng, set, 110),
                });
            }
        }
    }
    TwoTopicCorpus {
        documents,
        set_a,
        set_b,
        start_year,
        window_years,
        window_count,
    }
}

/// ~1,840 documents over 6 windows with a planted target-word shift at
/// window 3 and a planted novel author in window 4.
pub fn shift_corpus(seed: u64) -> ShiftCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set_a = word_set("ara", 90);
    let set_b = word_set("bos", 90);
    let set_c = word_set("crux", 30);
    let target_word = "figura".to_string();
    let (start_year, window_years, window_count) = (0, 75, 6u32);
    let shift_window = 3usize;
    let novel_author = "nova".to_string();
    let control_author = "bg4_0".to_string();

    let mut documents = Vec::new();
    let mut author_groups = Vec::new();
    let mut doc_id = 0usize;
    for t in 0..window_count as usize {
        // 60 target carriers per window: all in A docs before the shift,
        // split evenly between A and B docs from the shift on
        let (a_carriers, b_carriers) = if t < shift_window { (60, 0) } else { (30, 30) };
        let mut a_left = a_carriers;
        let mut b_left = b_carriers;
        for j in 0..6 {
            let author = format!("bg{t}_{j}");
            author_groups.push((author.clone(), "background".to_string()));
            for d in 0..50 {
                let in_a = d % 2 == 0;
                let set = if in_a { &set_a } else { &set_b };
                let mut tokens = uniform_doc(&mut rng, set, 120);
                let carry = if in_a && a_left > 0 {
                    a_left -= 1;
                    true
                } else if !in_a && b_left > 0 {
                    b_left -= 1;
                    true
                } else {
                    false
                };
                if carry {
                    for _ in 0..3 {
                        tokens.push(target_word.clone());
                    }
                    shuffle(&mut rng, &mut tokens);
                }
                let year = start_year
                    + (t as i32) * window_years as i32
                    + rng.gen_range(0..window_years as i32);
                documents.push(Document {
                    id: format!("sc{doc_id}"),
                    author: author.clone(),
                    year,
                    tokens,
                });
                doc_id += 1;
            }
        }
    }

    // the novel author: window 4 only, vocabulary unused anywhere else
    author_groups.push((novel_author.clone(), "planted".to_string()));
    for d in 0..40 {
        let year = start_year + 4 * window_years as i32 + rng.gen_range(0..window_years as i32);
        documents.push(Document {
            id: format!("nv{d}"),
            author: novel_author.clone(),
            year,
            tokens: uniform_doc(&mut rng, &set_c, 120),
        });
    }

    let control_words = set_a.iter().chain(set_b.iter()).cloned().collect();
    ShiftCorpus {
        documents,
        target_word,
        control_words,
        shift_window,
        novel_author,
        control_author,
        author_groups,
        start_year,
        window_years,
        window_count,
    }
}
