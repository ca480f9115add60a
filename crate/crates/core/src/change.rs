//! Time-specific word embeddings and cosine-distance change scores.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode_sequence, sample_sentences, Corpus, TargetWordRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::vocab::Vocab;

pub const DEFAULT_SAMPLE_SIZE: usize = 200;
pub const DEFAULT_LAST_LAYERS: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WordTimeEmbedding {
    pub word: String,
    pub time_point: String,
    pub vector: Vec<f64>,
    /// Number of occurrence vectors averaged into `vector`.
    pub support: usize,
}

fn check_layers(model: &Model, h: usize) -> Result<()> {
    let l = model.config().layers;
    if h == 0 || h > l {
        return Err(Error::Config(format!("h = {h} outside 1..={l}")));
    }
    Ok(())
}

/// One vector per occurrence of `word` in `sentence`: the mean of that
/// position's outputs over the last `h` transformer layers.
pub fn embed_occurrences(
    model: &Model,
    vocab: &Vocab,
    sentence: &str,
    time: usize,
    word: &str,
    h: usize,
) -> Result<Vec<Vec<f64>>> {
    check_layers(model, h)?;
    let absent = || Error::AbsentWord {
        word: word.to_string(),
        time: format!("t{}", time + 1),
    };
    let word_id = vocab.id(word).ok_or_else(absent)?;
    let cfg = model.config();
    let seq = encode_sequence(vocab, sentence, time, cfg.mode, cfg.max_len)?;
    let positions: Vec<usize> = seq
        .token_ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == word_id)
        .map(|(p, _)| p)
        .collect();
    if positions.is_empty() {
        return Err(absent());
    }
    let states = model.encode(&seq)?;
    let last = &states.layers[states.layers.len() - h..];
    Ok(positions
        .into_iter()
        .map(|p| {
            let mut v = vec![0.0; cfg.hidden];
            for layer in last {
                for (acc, x) in v.iter_mut().zip(layer.row(p)) {
                    *acc += x;
                }
            }
            v.iter_mut().for_each(|x| *x /= h as f64);
            v
        })
        .collect())
}

/// Flat mean of every occurrence vector over up to `n` sampled sentences.
#[allow(clippy::too_many_arguments)]
pub fn time_specific_embedding(
    model: &Model,
    vocab: &Vocab,
    corpus: &Corpus,
    time: usize,
    word: &str,
    n: usize,
    h: usize,
    rng: &mut ChaCha8Rng,
) -> Result<WordTimeEmbedding> {
    check_layers(model, h)?;
    let sentences = sample_sentences(corpus, word, n, rng)?;
    let mut occurrences = Vec::new();
    for s in sentences {
        match embed_occurrences(model, vocab, s, time, word, h) {
            Ok(vs) => occurrences.extend(vs),
            // the only occurrence can be truncated away by max_len
            Err(Error::AbsentWord { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if occurrences.is_empty() {
        return Err(Error::AbsentWord {
            word: word.to_string(),
            time: corpus.time_point.clone(),
        });
    }
    Ok(WordTimeEmbedding {
        word: word.to_string(),
        time_point: corpus.time_point.clone(),
        vector: mean_vector(&occurrences),
        support: occurrences.len(),
    })
}

fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (acc, x) in out.iter_mut().zip(v) {
            *acc += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// `1 − cos(u, v)`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_distance", (1, u.len()), (1, v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Scored {
        score: f64,
        support_t1: usize,
        support_t2: usize,
    },
    Unscored {
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEntry {
    pub word: String,
    pub gold: Option<f64>,
    pub outcome: Outcome,
}

impl ScoreEntry {
    pub fn score(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Scored { score, .. } => Some(score),
            Outcome::Unscored { .. } => None,
        }
    }
}

/// Scored words by descending score (ties by word), then unscored words.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub entries: Vec<ScoreEntry>,
    pub n: usize,
    pub h: usize,
}

impl ScoreReport {
    pub fn new(mut entries: Vec<ScoreEntry>, n: usize, h: usize) -> Self {
        entries.sort_by(|a, b| match (a.score(), b.score()) {
            (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.word.cmp(&b.word)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.word.cmp(&b.word),
        });
        Self { entries, n, h }
    }

    pub fn scored(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries
            .iter()
            .filter_map(|e| e.score().map(|s| (e.word.as_str(), s)))
    }

    pub fn n_unscored(&self) -> usize {
        self.entries.iter().filter(|e| e.score().is_none()).count()
    }

    /// `word<TAB>score<TAB>support_t1<TAB>support_t2`, preceded by a `#`
    /// comment line with the sampling parameters. Unscored words are written
    /// as `word<TAB>NA<TAB>reason`.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# n={} h={}\n", self.n, self.h);
        for e in &self.entries {
            match &e.outcome {
                Outcome::Scored {
                    score,
                    support_t1,
                    support_t2,
                } => {
                    let _ = writeln!(out, "{}\t{}\t{}\t{}", e.word, score, support_t1, support_t2);
                }
                Outcome::Unscored { reason } => {
                    let _ = writeln!(out, "{}\tNA\t{}", e.word, reason);
                }
            }
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    /// Parses [`ScoreReport::to_tsv`] output. Gold scores are left empty.
    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let (mut n, mut h) = (0, 0);
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for kv in comment.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("n", v)) => n = v.parse().unwrap_or(0),
                        Some(("h", v)) => h = v.parse().unwrap_or(0),
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let outcome = match fields.as_slice() {
                [_, "NA", reason] => Outcome::Unscored {
                    reason: reason.to_string(),
                },
                [_, score, s1, s2] => {
                    let score: f64 = score
                        .parse()
                        .map_err(|_| err(line_no, format!("invalid score '{score}'")))?;
                    if !(0.0..=2.0).contains(&score) {
                        return Err(err(line_no, format!("score {score} outside [0, 2]")));
                    }
                    let support = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| err(line_no, format!("invalid support '{s}'")))
                    };
                    Outcome::Scored {
                        score,
                        support_t1: support(s1)?,
                        support_t2: support(s2)?,
                    }
                }
                _ => {
                    return Err(err(
                        line_no,
                        "expected `word<TAB>score<TAB>support_t1<TAB>support_t2` or `word<TAB>NA<TAB>reason`"
                            .into(),
                    ))
                }
            };
            let word = fields[0].trim();
            if word.is_empty() {
                return Err(err(line_no, "empty word".into()));
            }
            entries.push(ScoreEntry {
                word: word.to_string(),
                gold: None,
                outcome,
            });
        }
        Ok(Self::new(entries, n, h))
    }
}

/// FNV-1a, used to give each word its own sampling stream.
fn word_seed(seed: u64, word: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash ^ seed
}

/// Change score for every target word.
///
/// `corpus1` is encoded at time point 0 and `corpus2` at time point 1. Each
/// word's sampling stream depends only on `seed` and the word, so identical
/// corpora yield identical samples in both slices. Words missing from a
/// slice are reported as unscored (`absent@t1`, `absent@t2`).
#[allow(clippy::too_many_arguments)]
pub fn semantic_change_scores(
    model: &Model,
    vocab: &Vocab,
    corpus1: &Corpus,
    corpus2: &Corpus,
    targets: &[TargetWordRecord],
    n: usize,
    h: usize,
    seed: u64,
) -> Result<ScoreReport> {
    check_layers(model, h)?;
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut entries = Vec::with_capacity(targets.len());
    for target in targets {
        let word = target.word.as_str();
        let mut slices = Vec::with_capacity(2);
        let mut missing = Vec::new();
        for (time, corpus) in [corpus1, corpus2].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(word_seed(seed, word));
            match time_specific_embedding(model, vocab, corpus, time, word, n, h, &mut rng) {
                Ok(e) => slices.push(e),
                Err(Error::AbsentWord { .. }) => missing.push(format!("t{}", time + 1)),
                Err(e) => return Err(e),
            }
        }
        let outcome = if missing.is_empty() {
            Outcome::Scored {
                score: cosine_distance(&slices[0].vector, &slices[1].vector)?,
                support_t1: slices[0].support,
                support_t2: slices[1].support,
            }
        } else {
            Outcome::Unscored {
                reason: format!("absent@{}", missing.join("+")),
            }
        };
        entries.push(ScoreEntry {
            word: word.to_string(),
            gold: Some(target.gold_score),
            outcome,
        });
    }
    Ok(ScoreReport::new(entries, n, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_distance_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector)
        ));
    }

    fn entry(word: &str, score: Option<f64>) -> ScoreEntry {
        ScoreEntry {
            word: word.into(),
            gold: None,
            outcome: match score {
                Some(score) => Outcome::Scored {
                    score,
                    support_t1: 1,
                    support_t2: 2,
                },
                None => Outcome::Unscored {
                    reason: "absent@t2".into(),
                },
            },
        }
    }

    #[test]
    fn report_sorting_and_tsv() {
        let r = ScoreReport::new(
            vec![
                entry("b", Some(0.5)),
                entry("z", None),
                entry("a", Some(0.5)),
                entry("c", Some(0.9)),
            ],
            50,
            2,
        );
        let words: Vec<&str> = r.entries.iter().map(|e| e.word.as_str()).collect();
        assert_eq!(words, ["c", "a", "b", "z"]);
        let tsv = r.to_tsv();
        assert!(tsv.starts_with("# n=50 h=2\n"));
        assert!(tsv.contains("z\tNA\tabsent@t2\n"));
        let back = ScoreReport::parse_tsv(&tsv, Path::new("x")).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn malformed_tsv_names_line() {
        match ScoreReport::parse_tsv("# n=1 h=1\na\t0.1\t1\t1\nb\tx\n", Path::new("s.tsv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
