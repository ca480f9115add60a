//! Binary checkpoint: model, token vocabulary and time vocabulary.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TATT" | version u32 | header_len u64 | header (UTF-8 key=value lines)
//!        | parameters (f64, blocks in layout order, row-major) | crc32 u32
//! ```
//!
//! The CRC covers every preceding byte.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Model, ModelConfig};
use crate::vocab::{TimeVocab, Vocab};

pub const MAGIC: &[u8; 4] = b"TATT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub time_vocab: TimeVocab,
}

impl Checkpoint {
    pub fn new(model: Model, vocab: Vocab, time_vocab: TimeVocab) -> Result<Self> {
        let cfg = model.config();
        if vocab.len() != cfg.token_vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                cfg.token_vocab_size
            )));
        }
        if time_vocab.size() != cfg.time_vocab_size {
            return Err(Error::Config(format!(
                "time vocabulary has {} ids, model expects {}",
                time_vocab.size(),
                cfg.time_vocab_size
            )));
        }
        Ok(Self {
            model,
            vocab,
            time_vocab,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for p in self.model.params() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    fn header(&self) -> String {
        let c = self.model.config();
        let mut h = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(h, "{k}={v}");
        };
        kv("layers", &c.layers);
        kv("hidden", &c.hidden);
        kv("heads", &c.heads);
        kv("head_dim", &c.head_dim);
        kv("ff_dim", &c.ff_dim);
        kv("max_len", &c.max_len);
        kv("token_vocab_size", &c.token_vocab_size);
        kv("time_vocab_size", &c.time_vocab_size);
        kv("mode", &c.mode);
        kv("seed", &c.seed);
        // {:?} on f64 round-trips exactly
        kv("init_std", &format!("{:?}", c.init_std));
        kv("ln_eps", &format!("{:?}", c.ln_eps));
        kv("n_time_tokens", &self.vocab.n_time_tokens());
        for (label, count) in self.time_vocab.labels().iter().zip(self.time_vocab.doc_counts()) {
            kv("time", &format!("{count} {label}"));
        }
        for t in self.vocab.tokens() {
            kv("token", t);
        }
        for t in self.vocab.targets() {
            kv("target", t);
        }
        for p in self.model.params() {
            kv("param", &format!("{} {} {}", p.value.rows(), p.value.cols(), p.name));
        }
        h
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(m.to_string());
        if bytes.len() < 4 + 4 + 8 + 4 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch (truncated or damaged)"));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header =
            std::str::from_utf8(&body[16..header_end]).map_err(|_| corrupt("header is not UTF-8"))?;
        let parsed = Header::parse(header)?;
        let payload = &body[header_end..];

        let expected: usize = parsed.params.iter().map(|(r, c, _)| r * c).sum();
        if payload.len() != expected * 8 {
            return Err(Error::Corrupt(format!(
                "parameter payload holds {} bytes, header describes {}",
                payload.len(),
                expected * 8
            )));
        }
        let mut values = Vec::with_capacity(parsed.params.len());
        let mut floats = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        for (rows, cols, _) in &parsed.params {
            let data: Vec<f64> = floats.by_ref().take(rows * cols).collect();
            values.push(Matrix::new(*rows, *cols, data)?);
        }
        let time_vocab = TimeVocab::new(parsed.time_labels, parsed.doc_counts.clone())
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        let mut cfg = parsed.cfg;
        cfg.doc_counts = parsed.doc_counts;
        let model = Model::from_parameters(cfg, values)?;
        for (p, (_, _, name)) in model.params().iter().zip(&parsed.params) {
            if &p.name != name {
                return Err(Error::Corrupt(format!(
                    "parameter '{name}' found where '{}' was expected",
                    p.name
                )));
            }
        }
        let vocab = Vocab::from_tokens(parsed.tokens, parsed.n_time_tokens, parsed.targets)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        Self::new(model, vocab, time_vocab).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Header {
    cfg: ModelConfig,
    doc_counts: Vec<usize>,
    time_labels: Vec<String>,
    tokens: Vec<String>,
    targets: Vec<String>,
    n_time_tokens: usize,
    params: Vec<(usize, usize, String)>,
}

impl Header {
    fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Corrupt(format!("header: {m}"));
        let mut scalars: HashMap<&str, &str> = HashMap::new();
        let (mut time_labels, mut doc_counts) = (Vec::new(), Vec::new());
        let (mut tokens, mut targets, mut params) = (Vec::new(), Vec::new(), Vec::new());
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
            match k {
                "token" => tokens.push(v.to_string()),
                "target" => targets.push(v.to_string()),
                "time" => {
                    let (count, label) = v
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("time entry {v:?}")))?;
                    doc_counts.push(count.parse().map_err(|_| bad(format!("doc count {count:?}")))?);
                    time_labels.push(label.to_string());
                }
                "param" => {
                    let mut it = v.splitn(3, ' ');
                    let mut dim = || -> Result<usize> {
                        it.next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad(format!("param entry {v:?}")))
                    };
                    let (r, c) = (dim()?, dim()?);
                    let name = it.next().ok_or_else(|| bad(format!("param entry {v:?}")))?;
                    params.push((r, c, name.to_string()));
                }
                _ => {
                    scalars.insert(k, v);
                }
            }
        }
        fn get<T: std::str::FromStr>(s: &HashMap<&str, &str>, k: &str) -> Result<T> {
            let v = s
                .get(k)
                .ok_or_else(|| Error::Corrupt(format!("header: missing {k}")))?;
            v.parse()
                .map_err(|_| Error::Corrupt(format!("header: invalid {k} {v:?}")))
        }
        let mode: AttentionMode = get(&scalars, "mode")?;
        let cfg = ModelConfig {
            layers: get(&scalars, "layers")?,
            hidden: get(&scalars, "hidden")?,
            heads: get(&scalars, "heads")?,
            head_dim: get(&scalars, "head_dim")?,
            ff_dim: get(&scalars, "ff_dim")?,
            max_len: get(&scalars, "max_len")?,
            token_vocab_size: get(&scalars, "token_vocab_size")?,
            time_vocab_size: get(&scalars, "time_vocab_size")?,
            mode,
            seed: get(&scalars, "seed")?,
            init_std: get(&scalars, "init_std")?,
            ln_eps: get(&scalars, "ln_eps")?,
            doc_counts: Vec::new(),
        };
        Ok(Self {
            cfg,
            doc_counts,
            time_labels,
            tokens,
            targets,
            n_time_tokens: get(&scalars, "n_time_tokens")?,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_sequence, Corpus, TargetWordRecord};

    fn tiny(mode: AttentionMode) -> Checkpoint {
        let c1 = Corpus::from_sentences("1990s", vec!["the cat sat".into(), "a cat ran".into()]);
        let c2 = Corpus::from_sentences("2010s", vec!["the cat = sat".into()]);
        let targets = vec![TargetWordRecord {
            word: "cat".into(),
            gold_score: 0.5,
        }];
        let vocab = build_vocab(&[&c1, &c2], &targets, 1).unwrap();
        let tv = crate::corpus::time_vocab_for(&[&c1, &c2]).unwrap();
        let mut cfg = ModelConfig::new(2, 8, 2, vocab.len(), &tv, mode);
        cfg.max_len = 8;
        cfg.seed = 5;
        Checkpoint::new(Model::build(cfg).unwrap(), vocab, tv).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in AttentionMode::ALL {
            let ck = tiny(mode);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back.model.config(), ck.model.config());
            assert_eq!(back.vocab.tokens(), ck.vocab.tokens());
            assert_eq!(back.vocab.targets(), ck.vocab.targets());
            assert_eq!(back.time_vocab, ck.time_vocab);
            let seq = encode_sequence(&ck.vocab, "the cat sat", 1, mode, 8).unwrap();
            let a = ck.model.encode(&seq).unwrap();
            let b = back.model.encode(&seq).unwrap();
            for (x, y) in a.layers.iter().zip(&b.layers) {
                let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(x), bits(y));
            }
            assert_eq!(back.to_bytes(), ck.to_bytes());
        }
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = tiny(AttentionMode::Temporal).to_bytes();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Corrupt(_))
            ));
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn other_version_names_both() {
        let mut bytes = tiny(AttentionMode::Standard).to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, expected: FORMAT_VERSION }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains(&FORMAT_VERSION.to_string()), "{msg}");
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let ck = tiny(AttentionMode::ScaledDocCount);
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert!(matches!(
            Checkpoint::load(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
