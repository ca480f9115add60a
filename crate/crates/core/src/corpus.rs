//! Time-sliced corpora, vocabulary construction, sequence encoding, MLM
//! masking and sentence sampling.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::vocab::{
    TimeVocab, TimedSequence, Vocab, MASK, MASK_ID, MASK_TIME, PAD, PAD_ID, PAD_TIME, UNK, UNK_ID,
    UNK_TIME,
};

pub const CORPUS_T1: &str = "corpus_t1.txt";
pub const CORPUS_T2: &str = "corpus_t2.txt";
pub const TARGETS: &str = "targets.tsv";

pub const DEFAULT_MIN_FREQ: usize = 2;
pub const DEFAULT_MASK_PROB: f64 = 0.15;

/// All sentences of one time slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub time_point: String,
    pub sentences: Vec<String>,
    pub doc_count: usize,
}

impl Corpus {
    pub fn from_sentences(time_point: impl Into<String>, sentences: Vec<String>) -> Self {
        let doc_count = sentences.len();
        Self {
            time_point: time_point.into(),
            sentences,
            doc_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetWordRecord {
    pub word: String,
    pub gold_score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub lowercase: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

/// Splits on whitespace and separates punctuation into its own tokens.
/// `_`, `-` and `'` stay inside words.
pub fn tokenize(sentence: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in sentence.split_whitespace() {
        let mut start = 0;
        for (i, ch) in chunk.char_indices() {
            if is_split_punct(ch) {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + ch.len_utf8()]);
                start = i + ch.len_utf8();
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

fn is_split_punct(ch: char) -> bool {
    ch.is_ascii_punctuation() && !matches!(ch, '_' | '-' | '\'' | '[' | ']' | '<' | '>')
}

pub fn load_corpus(path: impl AsRef<Path>, time_point: &str) -> Result<Corpus> {
    load_corpus_with(path, time_point, LoadOptions::default())
}

/// One sentence per line; blank lines are dropped.
pub fn load_corpus_with(
    path: impl AsRef<Path>,
    time_point: &str,
    opts: LoadOptions,
) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.utf8_error()),
        )
    })?;
    let sentences: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| if opts.lowercase { l.to_lowercase() } else { l.to_string() })
        .collect();
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    Ok(Corpus::from_sentences(time_point, sentences))
}

/// `word<TAB>gold_score` per line, no header.
pub fn load_targets(path: impl AsRef<Path>) -> Result<Vec<TargetWordRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_targets(&text, path)
}

pub(crate) fn parse_targets(text: &str, path: &Path) -> Result<Vec<TargetWordRecord>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(word), Some(score), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(line_no, "expected `word<TAB>gold_score`".into()));
        };
        let word = word.trim();
        if word.is_empty() {
            return Err(parse_err(line_no, "empty target word".into()));
        }
        let gold_score: f64 = score
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid score '{}'", score.trim())))?;
        if !(0.0..=1.0).contains(&gold_score) {
            return Err(parse_err(line_no, format!("gold score {gold_score} outside [0, 1]")));
        }
        out.push(TargetWordRecord {
            word: word.to_lowercase(),
            gold_score,
        });
    }
    Ok(out)
}

/// Two time slices and their graded targets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub t1: Corpus,
    pub t2: Corpus,
    pub targets: Vec<TargetWordRecord>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(dir, LoadOptions::default())
    }

    pub fn load_with(dir: impl AsRef<Path>, opts: LoadOptions) -> Result<Self> {
        let dir = dir.as_ref();
        for name in [CORPUS_T1, CORPUS_T2, TARGETS] {
            let p = dir.join(name);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset file"),
                ));
            }
        }
        Ok(Self {
            t1: load_corpus_with(dir.join(CORPUS_T1), "t1", opts)?,
            t2: load_corpus_with(dir.join(CORPUS_T2), "t2", opts)?,
            targets: load_targets(dir.join(TARGETS))?,
        })
    }

    pub fn corpora(&self) -> [&Corpus; 2] {
        [&self.t1, &self.t2]
    }

    pub fn time_vocab(&self) -> TimeVocab {
        time_vocab_for(&[&self.t1, &self.t2]).expect("t1 and t2 are distinct")
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| -> Result<PathBuf> {
            let p = dir.join(name);
            crate::io::write_atomic(&p, body.as_bytes())?;
            Ok(p)
        };
        write(CORPUS_T1, join_lines(&self.t1.sentences))?;
        write(CORPUS_T2, join_lines(&self.t2.sentences))?;
        let targets: Vec<String> = self
            .targets
            .iter()
            .map(|t| format!("{}\t{}", t.word, t.gold_score))
            .collect();
        write(TARGETS, join_lines(&targets))?;
        Ok(())
    }
}

fn join_lines(lines: &[String]) -> String {
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

/// Time vocabulary with one point per corpus, in the given order.
pub fn time_vocab_for(corpora: &[&Corpus]) -> Result<TimeVocab> {
    TimeVocab::new(
        corpora.iter().map(|c| c.time_point.clone()).collect(),
        corpora.iter().map(|c| c.doc_count).collect(),
    )
}

/// Vocabulary over all corpora.
///
/// Id order: specials, one time token per corpus (in the given order),
/// targets (sorted), then remaining words with frequency ≥ `min_freq` by
/// descending frequency, ties broken lexicographically. Targets are always
/// included as whole words.
pub fn build_vocab(
    corpora: &[&Corpus],
    targets: &[TargetWordRecord],
    min_freq: usize,
) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in corpora {
        for s in &c.sentences {
            for tok in tokenize(s) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }

    let mut tokens: Vec<String> = vec![PAD.into(), UNK.into(), MASK.into()];
    tokens.extend(corpora.iter().map(|c| Vocab::time_token(&c.time_point)));

    let mut target_words: Vec<String> = targets.iter().map(|t| t.word.clone()).collect();
    target_words.sort();
    target_words.dedup();
    tokens.extend(target_words.iter().cloned());

    let reserved: std::collections::HashSet<&str> = tokens.iter().map(String::as_str).collect();
    let mut rest: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, n)| *n >= min_freq && !reserved.contains(w))
        .collect();
    rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let rest: Vec<String> = rest.into_iter().map(|(w, _)| w.to_string()).collect();
    tokens.extend(rest);

    Vocab::from_tokens(tokens, corpora.len(), target_words)
}

/// Maps a sentence at 0-based time point `time` to ids.
///
/// Every word carries the sentence's time id; `[UNK]` positions carry the
/// reserved unknown-time id. Prepend modes put the time token first. The
/// result is truncated to `max_len`.
pub fn encode_sequence(
    vocab: &Vocab,
    sentence: &str,
    time: usize,
    mode: AttentionMode,
    max_len: usize,
) -> Result<TimedSequence> {
    let time_id = TimeVocab::id_of_point(time);
    let mut token_ids = Vec::new();
    let mut time_ids = Vec::new();
    if mode.prepends_time_token() {
        let id = vocab.time_token_id(time).ok_or_else(|| {
            Error::Contract(format!("no time token for time point index {time}"))
        })?;
        token_ids.push(id);
        time_ids.push(time_id);
    } else if time >= vocab.n_time_tokens() {
        return Err(Error::Contract(format!(
            "time point index {time} outside the {} known time points",
            vocab.n_time_tokens()
        )));
    }
    for tok in tokenize(sentence) {
        let id = vocab.id_or_unk(tok);
        token_ids.push(id);
        time_ids.push(if id == UNK_ID { UNK_TIME } else { time_id });
    }
    token_ids.truncate(max_len);
    time_ids.truncate(max_len);
    TimedSequence::new(token_ids, time_ids)
}

/// Right-pads every sequence to the longest one with `[PAD]` and the
/// reserved pad-time id.
pub fn pad_batch(seqs: &[TimedSequence]) -> Vec<TimedSequence> {
    let width = seqs.iter().map(TimedSequence::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut s = s.clone();
            s.token_ids.resize(width, PAD_ID);
            s.time_ids.resize(width, PAD_TIME);
            s
        })
        .collect()
}

/// A sequence prepared for MLM, with `(position, original id)` labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: TimedSequence,
    pub labels: Vec<(usize, usize)>,
}

/// BERT-style corruption: each non-reserved position is selected with
/// `mask_prob`; selected positions become `[MASK]` (80%), a random word
/// (10%) or stay unchanged (10%). `[MASK]` positions take the reserved
/// mask-time id.
pub fn mask_for_mlm<R: Rng>(
    seq: &TimedSequence,
    vocab: &Vocab,
    rng: &mut R,
    mask_prob: f64,
) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Config(format!("mask_prob {mask_prob} outside [0, 1]")));
    }
    let mut input = seq.clone();
    let mut labels = Vec::new();
    let first_word = vocab.first_word_id();
    let n_words = vocab.len() - first_word;
    for pos in 0..seq.len() {
        let id = seq.token_ids[pos];
        if vocab.is_reserved(id) {
            continue;
        }
        if rng.gen::<f64>() >= mask_prob {
            continue;
        }
        labels.push((pos, id));
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            input.token_ids[pos] = MASK_ID;
            input.time_ids[pos] = MASK_TIME;
        } else if roll < 0.9 && n_words > 0 {
            input.token_ids[pos] = first_word + rng.gen_range(0..n_words);
        }
    }
    Ok(MaskedSequence { input, labels })
}

/// Indices of sentences containing `word` as a whole token.
pub fn sentences_containing(corpus: &Corpus, word: &str) -> Vec<usize> {
    corpus
        .sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| tokenize(s).contains(&word))
        .map(|(i, _)| i)
        .collect()
}

/// Uniform sample of up to `n` sentences containing `word`, without
/// replacement, returned in corpus order.
pub fn sample_sentences<'c, R: Rng>(
    corpus: &'c Corpus,
    word: &str,
    n: usize,
    rng: &mut R,
) -> Result<Vec<&'c str>> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let hits = sentences_containing(corpus, word);
    if hits.is_empty() {
        return Err(Error::AbsentWord {
            word: word.to_string(),
            time: corpus.time_point.clone(),
        });
    }
    let mut chosen: Vec<usize> = if hits.len() <= n {
        hits
    } else {
        index::sample(rng, hits.len(), n)
            .into_iter()
            .map(|i| hits[i])
            .collect()
    };
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|i| corpus.sentences[i].as_str())
        .collect())
}
