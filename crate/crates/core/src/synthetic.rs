//! A synthetic document-level translation task in which the target pronoun
//! of an `it` sentence agrees with the grammatical gender of the noun in the
//! preceding sentence. Without that sentence the pronoun is a three-way guess.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContrastiveExample, ParallelDocument, SegmentPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Gender {
    Masc,
    Fem,
    Neut,
}

impl Gender {
    fn article(self) -> &'static str {
        match self {
            Gender::Masc => "der",
            Gender::Fem => "die",
            Gender::Neut => "das",
        }
    }

    fn pronoun(self) -> &'static str {
        match self {
            Gender::Masc => "er",
            Gender::Fem => "sie",
            Gender::Neut => "es",
        }
    }
}

pub const PRONOUNS: [&str; 3] = ["er", "sie", "es"];

const NOUNS: &[(&str, &str, Gender)] = &[
    ("dog", "Hund", Gender::Masc),
    ("table", "Tisch", Gender::Masc),
    ("garden", "Garten", Gender::Masc),
    ("chair", "Stuhl", Gender::Masc),
    ("cat", "Katze", Gender::Fem),
    ("door", "Tuer", Gender::Fem),
    ("lamp", "Lampe", Gender::Fem),
    ("bottle", "Flasche", Gender::Fem),
    ("house", "Haus", Gender::Neut),
    ("book", "Buch", Gender::Neut),
    ("car", "Auto", Gender::Neut),
    ("window", "Fenster", Gender::Neut),
];

const ADJECTIVES: &[(&str, &str)] = &[
    ("big", "gross"),
    ("small", "klein"),
    ("red", "rot"),
    ("old", "alt"),
    ("new", "neu"),
    ("green", "gruen"),
    ("quiet", "leise"),
    ("cold", "kalt"),
];

/// Source verb and its target renderings; references pick one uniformly.
const VERBS: &[(&str, &[&str])] = &[
    ("is", &["ist"]),
    ("looks", &["wirkt", "erscheint"]),
    ("remains", &["bleibt", "verharrt"]),
    ("was", &["war"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub contrastive_examples: usize,
    /// Document lengths are drawn uniformly from this inclusive range.
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    /// Probability that a sentence following a noun sentence is an `it` sentence.
    pub pronoun_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_docs: 5000,
            dev_docs: 100,
            test_docs: 200,
            contrastive_examples: 600,
            min_doc_len: 2,
            max_doc_len: 4,
            pronoun_rate: 0.6,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<ParallelDocument>,
    pub dev: Vec<ParallelDocument>,
    pub test: Vec<ParallelDocument>,
    pub contrastive: Vec<ContrastiveExample>,
}

struct Sentence {
    source: String,
    /// Target with the pronoun slot (if any) still open.
    target_tail: String,
    noun_gender: Option<Gender>,
}

fn verb_phrase(rng: &mut ChaCha8Rng, fixed_rendering: bool) -> (String, String) {
    let (verb, renderings) = VERBS.choose(rng).expect("verbs");
    let (adj, adj_t) = ADJECTIVES.choose(rng).expect("adjectives");
    let rendering = if fixed_rendering { renderings[0] } else { renderings.choose(rng).expect("rendering") };
    (format!("{verb} {adj} ."), format!("{rendering} {adj_t} ."))
}

fn noun_sentence(rng: &mut ChaCha8Rng, fixed: bool) -> Sentence {
    let (noun, noun_t, gender) = *NOUNS.choose(rng).expect("nouns");
    let (vp, vp_t) = verb_phrase(rng, fixed);
    Sentence {
        source: format!("the {noun} {vp}"),
        target_tail: format!("{} {noun_t} {vp_t}", gender.article()),
        noun_gender: Some(gender),
    }
}

fn pronoun_sentence(rng: &mut ChaCha8Rng, fixed: bool) -> Sentence {
    let (vp, vp_t) = verb_phrase(rng, fixed);
    Sentence {
        source: format!("it {vp}"),
        target_tail: vp_t,
        noun_gender: None,
    }
}

fn document(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, id: String) -> ParallelDocument {
    let len = rng.random_range(cfg.min_doc_len.max(1)..=cfg.max_doc_len.max(cfg.min_doc_len.max(1)));
    let mut segments = Vec::with_capacity(len);
    let mut antecedent: Option<Gender> = None;
    for _ in 0..len {
        let pronoun = antecedent.is_some() && rng.random_bool(cfg.pronoun_rate);
        if pronoun {
            let gender = antecedent.take().expect("checked");
            let s = pronoun_sentence(rng, false);
            segments.push(SegmentPair::new(s.source, format!("{} {}", gender.pronoun(), s.target_tail)));
        } else {
            let s = noun_sentence(rng, false);
            antecedent = s.noun_gender;
            segments.push(SegmentPair::new(s.source, s.target_tail));
        }
    }
    ParallelDocument::new(id, segments).expect("documents are non-empty")
}

fn contrastive_example(rng: &mut ChaCha8Rng) -> ContrastiveExample {
    let ctx = noun_sentence(rng, true);
    let gender = ctx.noun_gender.expect("noun sentence");
    let p = pronoun_sentence(rng, true);
    let reference = format!("{} {}", gender.pronoun(), p.target_tail);
    let variants = PRONOUNS
        .iter()
        .filter(|&&pr| pr != gender.pronoun())
        .map(|pr| format!("{pr} {}", p.target_tail))
        .collect();
    ContrastiveExample {
        src: p.source,
        ctx_src: vec![ctx.source],
        ctx_tgt: vec![ctx.target_tail],
        reference,
        contrastive_variants: variants,
        antecedent_distance: Some(1),
    }
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let docs = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<ParallelDocument> {
        (0..n).map(|i| document(rng, cfg, format!("{prefix}{i}"))).collect()
    };
    let train = docs(cfg.train_docs, "train", &mut rng);
    let dev = docs(cfg.dev_docs, "dev", &mut rng);
    let test = docs(cfg.test_docs, "test", &mut rng);
    let contrastive = (0..cfg.contrastive_examples).map(|_| contrastive_example(&mut rng)).collect();
    SyntheticData {
        train,
        dev,
        test,
        contrastive,
    }
}

/// Single sentences of widely varying length for length-binned analysis:
/// noun sentences chained with `and`.
pub fn length_test_set(n: usize, seed: u64) -> Vec<SegmentPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let clauses = match rng.random_range(0..10) {
                0..=5 => rng.random_range(1..=3),
                6..=8 => rng.random_range(4..=8),
                _ => rng.random_range(9..=14),
            };
            let mut src = Vec::new();
            let mut tgt = Vec::new();
            for _ in 0..clauses {
                let s = noun_sentence(&mut rng, true);
                src.push(s.source.trim_end_matches(" .").to_string());
                tgt.push(s.target_tail.trim_end_matches(" .").to_string());
            }
            SegmentPair::new(format!("{} .", src.join(" and ")), format!("{} .", tgt.join(" und ")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pronouns_agree_with_the_previous_noun() {
        let data = generate(&SyntheticConfig {
            train_docs: 300,
            ..SyntheticConfig::default()
        });
        let mut pronouns = 0;
        for doc in &data.train {
            for w in doc.segments.windows(2) {
                if w[1].source.starts_with("it ") {
                    pronouns += 1;
                    let noun_t = w[0].target.split_whitespace().nth(1).unwrap();
                    let gender = NOUNS.iter().find(|n| n.1 == noun_t).unwrap().2;
                    assert!(w[1].target.starts_with(gender.pronoun()));
                }
            }
            assert!(!doc.segments[0].source.starts_with("it "));
        }
        assert!(pronouns > 200);
    }

    #[test]
    fn contrastive_items_are_valid_and_deterministic() {
        let cfg = SyntheticConfig {
            train_docs: 10,
            ..SyntheticConfig::default()
        };
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        for ex in &a.contrastive {
            ex.validate().unwrap();
            assert_eq!(ex.contrastive_variants.len(), 2);
        }
    }
}
