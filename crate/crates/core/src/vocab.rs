//! Token and time-point vocabularies, and the id sequences the encoder
//! consumes.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const N_SPECIAL: usize = 3;

/// Reserved time ids, one per special token.
pub const PAD_TIME: usize = 0;
pub const UNK_TIME: usize = 1;
pub const MASK_TIME: usize = 2;

/// Ordered time points plus reserved ids for the special tokens.
///
/// Time id layout: `[PAD]`, `[UNK]`, `[MASK]`, then one id per time point
/// in chronological order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeVocab {
    labels: Vec<String>,
    doc_counts: Vec<usize>,
}

impl TimeVocab {
    pub fn new(labels: Vec<String>, doc_counts: Vec<usize>) -> Result<Self> {
        if labels.len() != doc_counts.len() {
            return Err(Error::Config(format!(
                "{} time labels but {} doc counts",
                labels.len(),
                doc_counts.len()
            )));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::Config("duplicate time point labels".into()));
        }
        Ok(Self { labels, doc_counts })
    }

    pub fn n_points(&self) -> usize {
        self.labels.len()
    }

    /// Total number of time ids including the reserved ones.
    pub fn size(&self) -> usize {
        N_SPECIAL + self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn doc_counts(&self) -> &[usize] {
        &self.doc_counts
    }

    /// 0-based position of a time point label.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Time id for the 0-based time point `index`.
    pub fn id_of_point(index: usize) -> usize {
        N_SPECIAL + index
    }

    /// 0-based time point for a time id, `None` for reserved ids.
    pub fn point_of_id(id: usize) -> Option<usize> {
        id.checked_sub(N_SPECIAL)
    }
}

/// Word vocabulary with reserved specials, one token per time point, and
/// whole-word target entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    targets: BTreeSet<String>,
    n_time_tokens: usize,
}

impl Vocab {
    /// Builds from the full ordered token list. The first three entries must
    /// be the specials, followed by `n_time_tokens` time tokens.
    pub fn from_tokens(
        tokens: Vec<String>,
        n_time_tokens: usize,
        targets: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        if tokens.len() < N_SPECIAL + n_time_tokens
            || tokens[PAD_ID] != PAD
            || tokens[UNK_ID] != UNK
            || tokens[MASK_ID] != MASK
        {
            return Err(Error::Config("vocabulary must start with [PAD] [UNK] [MASK]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token '{t}'")));
            }
        }
        let targets: BTreeSet<String> = targets.into_iter().collect();
        if let Some(missing) = targets.iter().find(|t| !index.contains_key(*t)) {
            return Err(Error::Config(format!("target '{missing}' missing from vocabulary")));
        }
        Ok(Self {
            tokens,
            index,
            targets,
            n_time_tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn targets(&self) -> &BTreeSet<String> {
        &self.targets
    }

    pub fn n_time_tokens(&self) -> usize {
        self.n_time_tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to `[UNK]`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn time_token(label: &str) -> String {
        format!("<{label}>")
    }

    /// Vocabulary id of the time token for the 0-based time point.
    pub fn time_token_id(&self, point: usize) -> Option<usize> {
        (point < self.n_time_tokens).then_some(N_SPECIAL + point)
    }

    /// First id of an ordinary word (after specials and time tokens).
    pub fn first_word_id(&self) -> usize {
        N_SPECIAL + self.n_time_tokens
    }

    /// Specials and time tokens are never masked.
    pub fn is_reserved(&self, id: usize) -> bool {
        id < self.first_word_id()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }
}

/// Token ids paired position by position with time ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimedSequence {
    pub token_ids: Vec<usize>,
    pub time_ids: Vec<usize>,
}

impl TimedSequence {
    pub fn new(token_ids: Vec<usize>, time_ids: Vec<usize>) -> Result<Self> {
        if token_ids.len() != time_ids.len() {
            return Err(Error::Contract(format!(
                "{} token ids but {} time ids",
                token_ids.len(),
                time_ids.len()
            )));
        }
        Ok(Self {
            token_ids,
            time_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Copy with every time id replaced by `time_id`, except reserved ones.
    pub fn with_time(&self, time_id: usize) -> Self {
        Self {
            token_ids: self.token_ids.clone(),
            time_ids: self
                .time_ids
                .iter()
                .map(|&t| if t < N_SPECIAL { t } else { time_id })
                .collect(),
        }
    }
}
