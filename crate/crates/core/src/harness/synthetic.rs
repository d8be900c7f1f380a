use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{split_ranges, Example, HarnessError};
use crate::encoder::SpanItem;
use crate::kb_store::RawAssertion;
use crate::neural_kernels::{seeded_rng, Rng64};
use crate::text_prep::tokenize;

/// Words that can be answers; recurring across examples.
pub const ANSWER_WORDS: [&str; 40] = [
    "water", "fire", "music", "summer", "winter", "bread", "stone", "river", "cloud", "garden", "honey", "thunder",
    "silver", "forest", "island", "candle", "paper", "mountain", "desert", "ocean", "copper", "velvet", "lemon",
    "pepper", "meadow", "harbor", "window", "timber", "marble", "canyon", "valley", "feather", "silk", "salt", "iron",
    "glass", "cotton", "amber", "coral", "ivory",
];

/// Things the passages describe.
pub const ENTITY_WORDS: [&str; 16] = [
    "cup", "box", "coat", "lamp", "door", "hat", "bag", "car", "book", "ball", "bird", "tree", "chair", "key", "ship",
    "shoe",
];

const CONSONANTS: &[u8] = b"bdfgklmnprtvz";
const VOWELS: &[u8] = b"aeiou";
const GOLD_RELATIONS: [&str; 8] = [
    "CapableOf",
    "RelatedTo",
    "UsedFor",
    "HasA",
    "AtLocation",
    "Causes",
    "Desires",
    "IsA",
];
const DROPPED_RELATIONS: [&str; 3] = ["ExternalURL", "Synonym", "EtymologicallyRelatedTo"];
const SPAN_QUESTIONS: [&str; 3] = [
    "what is the color of the {} ?",
    "what does the {} suggest ?",
    "which word goes with the {} ?",
];
const KNOWLEDGE_QUESTION: &str = "what does the {} suggest ?";
const OVERLAP_PREFIX: &str = "It be.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Knowledge-required questions, split 80/10/10.
    pub examples: usize,
    pub span_train: usize,
    pub span_heldout: usize,
    pub candidates: usize,
    pub sentences: usize,
    pub answer_pool: usize,
    pub entity_pool: usize,
    /// Fraction of questions whose candidates share the words "it is".
    pub overlap_rate: f64,
    /// Fraction of questions whose asked attribute has any fact in the KB.
    pub coverage_rate: f64,
    /// Fraction of covered questions with an extra low-weight fact.
    pub noise_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            examples: 2500,
            span_train: 1000,
            span_heldout: 200,
            candidates: 3,
            sentences: 3,
            answer_pool: 30,
            entity_pool: 8,
            overlap_rate: 0.5,
            coverage_rate: 1.0,
            noise_rate: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.candidates < 2 || self.candidates > self.answer_pool {
            return bad("need 2 <= candidates <= answer_pool");
        }
        if self.answer_pool > ANSWER_WORDS.len() {
            return bad("answer_pool exceeds the built-in answer words");
        }
        if self.entity_pool > ENTITY_WORDS.len() {
            return bad("entity_pool exceeds the built-in entity words");
        }
        if self.sentences == 0 || self.sentences > self.entity_pool {
            return bad("sentences must be between 1 and entity_pool");
        }
        for r in [self.overlap_rate, self.coverage_rate, self.noise_rate] {
            if !(0.0..=1.0).contains(&r) {
                return bad("rates must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// The three linked corpora plus bookkeeping about where the answers live.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub examples: Vec<Example>,
    pub span_train: Vec<SpanItem>,
    pub span_heldout: Vec<SpanItem>,
    pub kb: Vec<RawAssertion>,
    /// Per example, the index into `kb` of the assertion naming its answer.
    pub gold_fact: Vec<Option<usize>>,
    /// Per example, the passage token index of the asked attribute.
    pub reference_token: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn train(&self) -> &[Example] {
        &self.examples[split_ranges(self.examples.len())[0].clone()]
    }
    pub fn dev(&self) -> &[Example] {
        &self.examples[split_ranges(self.examples.len())[1].clone()]
    }
    pub fn test(&self) -> &[Example] {
        &self.examples[split_ranges(self.examples.len())[2].clone()]
    }

    fn render(lines: impl Iterator<Item = RawAssertion>) -> String {
        lines
            .map(|a| format!("{}\t{}\t{}\t{}\n", a.subject, a.relation, a.object, a.weight))
            .collect()
    }

    pub fn kb_tsv(&self) -> String {
        Self::render(self.kb.iter().cloned())
    }

    /// The KB with the answer-naming assertion of every example whose index
    /// satisfies `drop` removed.
    pub fn kb_tsv_without_gold(&self, drop: impl Fn(usize) -> bool) -> String {
        let removed: HashSet<usize> = self
            .gold_fact
            .iter()
            .enumerate()
            .filter(|(i, _)| drop(*i))
            .filter_map(|(_, g)| *g)
            .collect();
        Self::render(
            self.kb
                .iter()
                .enumerate()
                .filter(|(i, _)| !removed.contains(i))
                .map(|(_, a)| a.clone()),
        )
    }
}

fn pseudo_word(rng: &mut Rng64, taken: &mut HashSet<String>) -> String {
    loop {
        let mut w = String::new();
        for _ in 0..3 {
            w.push(*CONSONANTS.choose(rng).unwrap() as char);
            w.push(*VOWELS.choose(rng).unwrap() as char);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// Exactly `round(rate * len)` flags set, at random positions.
fn exact_flags(len: usize, rate: f64, rng: &mut Rng64) -> Vec<bool> {
    let hits = (rate * len as f64).round() as usize;
    let mut flags: Vec<bool> = (0..len).map(|i| i < hits).collect();
    flags.shuffle(rng);
    flags
}

fn weight(rng: &mut Rng64, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo..hi) * 1000.0).round() / 1000.0
}

struct Passage {
    text: String,
    entities: Vec<&'static str>,
    attributes: Vec<String>,
}

fn passage(spec: &SyntheticSpec, rng: &mut Rng64, taken: &mut HashSet<String>) -> Passage {
    let entities: Vec<&'static str> = ENTITY_WORDS[..spec.entity_pool]
        .choose_multiple(rng, spec.sentences)
        .copied()
        .collect();
    let attributes: Vec<String> = (0..spec.sentences).map(|_| pseudo_word(rng, taken)).collect();
    let text = entities
        .iter()
        .zip(&attributes)
        .map(|(e, a)| format!("the {e} is {a} ."))
        .collect::<Vec<_>>()
        .join(" ");
    Passage {
        text,
        entities,
        attributes,
    }
}

fn token_index(text: &str, word: &str) -> usize {
    tokenize(text)
        .iter()
        .position(|t| t.surface == word)
        .expect("planted word is present")
}

/// Generates the knowledge-required dataset, the span-supervision items and
/// the KB that links each asked attribute to its answer.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus, HarnessError> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let mut taken: HashSet<String> = ANSWER_WORDS
        .iter()
        .chain(&ENTITY_WORDS)
        .map(|s| s.to_string())
        .collect();
    let pool = &ANSWER_WORDS[..spec.answer_pool];

    let overlap = exact_flags(spec.examples, spec.overlap_rate, &mut rng);
    let covered = exact_flags(spec.examples, spec.coverage_rate, &mut rng);
    let noisy = exact_flags(spec.examples, spec.noise_rate, &mut rng);

    let mut examples = Vec::with_capacity(spec.examples);
    let mut kb = Vec::new();
    let mut gold_fact = Vec::with_capacity(spec.examples);
    let mut reference_token = Vec::with_capacity(spec.examples);
    for i in 0..spec.examples {
        let p = passage(spec, &mut rng, &mut taken);
        let asked = rng.random_range(0..spec.sentences);
        let answers: Vec<&str> = pool.choose_multiple(&mut rng, spec.candidates).copied().collect();
        let label = rng.random_range(0..spec.candidates);
        let mut answers = answers;
        // the first drawn word is the gold answer; move it to the label slot
        answers.swap(0, label);
        let gold = answers[label];
        let candidates: Vec<String> = answers
            .iter()
            .map(|a| {
                if overlap[i] {
                    format!("it is {a}")
                } else {
                    a.to_string()
                }
            })
            .collect();

        let attr = &p.attributes[asked];
        if covered[i] {
            gold_fact.push(Some(kb.len()));
            kb.push(RawAssertion {
                subject: attr.clone(),
                relation: GOLD_RELATIONS.choose(&mut rng).unwrap().to_string(),
                object: gold.to_string(),
                weight: weight(&mut rng, 1.0, 4.5),
            });
            if noisy[i] {
                kb.push(RawAssertion {
                    subject: attr.clone(),
                    relation: "RelatedTo".into(),
                    object: answers.choose(&mut rng).unwrap().to_string(),
                    weight: weight(&mut rng, 0.05, 0.5),
                });
            }
        } else {
            gold_fact.push(None);
        }
        for (s, other) in p.attributes.iter().enumerate() {
            if s != asked {
                kb.push(RawAssertion {
                    subject: other.clone(),
                    relation: GOLD_RELATIONS.choose(&mut rng).unwrap().to_string(),
                    object: answers.choose(&mut rng).unwrap().to_string(),
                    weight: weight(&mut rng, 1.0, 3.0),
                });
            }
        }
        if i % 10 == 0 {
            kb.push(RawAssertion {
                subject: attr.clone(),
                relation: DROPPED_RELATIONS.choose(&mut rng).unwrap().to_string(),
                object: gold.to_string(),
                weight: 1.0,
            });
        }
        reference_token.push(token_index(&p.text, attr));
        examples.push(Example {
            id: format!("syn-{i:05}"),
            question: KNOWLEDGE_QUESTION.replace("{}", p.entities[asked]),
            passage: p.text,
            candidates,
            label,
        });
    }

    let mut span_item = |rng: &mut Rng64| {
        let p = passage(spec, rng, &mut taken);
        let asked = rng.random_range(0..spec.sentences);
        let mut question = SPAN_QUESTIONS.choose(rng).unwrap().replace("{}", p.entities[asked]);
        if rng.random_bool(0.5) {
            question = format!("{OVERLAP_PREFIX} {question}");
        }
        let at = token_index(&p.text, &p.attributes[asked]);
        SpanItem {
            question,
            passage: p.text,
            answer_start_token: at,
            answer_end_token: at,
        }
    };
    let span_train = (0..spec.span_train).map(|_| span_item(&mut rng)).collect();
    let span_heldout = (0..spec.span_heldout).map(|_| span_item(&mut rng)).collect();
    Ok(SyntheticCorpus {
        examples,
        span_train,
        span_heldout,
        kb,
        gold_fact,
        reference_token,
    })
}
