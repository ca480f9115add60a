//! Planted-change corpus generator.
//!
//! Every target word gets two context topics. Stable words draw their
//! context from an even mix of both topics in both slices. Planted words
//! draw only from their first topic in slice 1 and only from their second
//! topic in slice 2. Gold scores are 1 for planted words and 0 otherwise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Dataset, TargetWordRecord};
use crate::error::{Error, Result};

const TARGET_WORDS: [&str; 16] = [
    "plane", "tip", "graft", "record", "stroke", "bit", "circle", "ball", "head", "land", "lane",
    "rag", "fiction", "face", "risk", "gas",
];

const TOPICS: [&str; 12] = [
    "sea", "war", "food", "law", "sky", "farm", "music", "trade", "church", "school", "sport",
    "court",
];

const FILLER: [&str; 8] = ["the", "a", "of", "and", "was", "is", "to", "in"];

#[derive(Clone, Debug)]
pub struct PlantedChangeConfig {
    pub sentences_per_slice: usize,
    pub planted: usize,
    pub stable: usize,
    pub words_per_topic: usize,
    pub topic_words_per_sentence: usize,
    pub filler_per_sentence: usize,
    pub seed: u64,
}

impl Default for PlantedChangeConfig {
    fn default() -> Self {
        Self {
            sentences_per_slice: 2000,
            planted: 3,
            stable: 9,
            words_per_topic: 12,
            topic_words_per_sentence: 4,
            filler_per_sentence: 2,
            seed: 17,
        }
    }
}

/// Target words in generation order: planted first, then stable.
pub fn target_words(cfg: &PlantedChangeConfig) -> Vec<&'static str> {
    TARGET_WORDS[..cfg.planted + cfg.stable].to_vec()
}

pub fn planted_change_dataset(cfg: &PlantedChangeConfig) -> Result<Dataset> {
    let n_targets = cfg.planted + cfg.stable;
    if n_targets == 0 || n_targets > TARGET_WORDS.len() {
        return Err(Error::Config(format!(
            "between 1 and {} target words supported, asked for {n_targets}",
            TARGET_WORDS.len()
        )));
    }
    if cfg.words_per_topic == 0 || cfg.topic_words_per_sentence == 0 {
        return Err(Error::Config("topics and sentences need context words".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topic_vocab: Vec<Vec<String>> = TOPICS
        .iter()
        .map(|t| (0..cfg.words_per_topic).map(|i| format!("{t}{i}")).collect())
        .collect();

    // Each target gets a distinct ordered pair of topics.
    let mut pairs: Vec<(usize, usize)> = (0..TOPICS.len())
        .flat_map(|a| (0..TOPICS.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    let pairs = &pairs[..n_targets];

    let mut slices: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for (slice, sentences) in slices.iter_mut().enumerate() {
        for i in 0..cfg.sentences_per_slice {
            let target = i % n_targets;
            let (first, second) = pairs[target];
            let planted = target < cfg.planted;
            let topic = if planted {
                if slice == 0 { first } else { second }
            } else if rng.gen_bool(0.5) {
                first
            } else {
                second
            };
            let mut words: Vec<&str> = Vec::new();
            for _ in 0..cfg.topic_words_per_sentence {
                words.push(topic_vocab[topic].choose(&mut rng).expect("nonempty topic"));
            }
            for _ in 0..cfg.filler_per_sentence {
                words.push(FILLER.choose(&mut rng).expect("nonempty filler"));
            }
            words.shuffle(&mut rng);
            let at = rng.gen_range(0..=words.len());
            words.insert(at, TARGET_WORDS[target]);
            sentences.push(words.join(" "));
        }
    }
    let [s1, s2] = slices;
    let targets = (0..n_targets)
        .map(|i| TargetWordRecord {
            word: TARGET_WORDS[i].to_string(),
            gold_score: if i < cfg.planted { 1.0 } else { 0.0 },
        })
        .collect();
    Ok(Dataset {
        t1: Corpus::from_sentences("t1", s1),
        t2: Corpus::from_sentences("t2", s2),
        targets,
    })
}
