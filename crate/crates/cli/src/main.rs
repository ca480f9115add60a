//! `tempattn`: train, score, evaluate and inspect time-aware encoders.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use tempattn::change::{semantic_change_scores, ScoreReport, DEFAULT_LAST_LAYERS, DEFAULT_SAMPLE_SIZE};
use tempattn::corpus::{build_vocab, encode_sequence, load_targets, DEFAULT_MIN_FREQ, TARGETS};
use tempattn::metrics::{evaluate, rank_scatter, scatter_csv};
use tempattn::model::DEFAULT_MAX_LEN;
use tempattn::synthetic::{planted_change_dataset, PlantedChangeConfig};
use tempattn::training::{train_mlm, TrainConfig};
use tempattn::{AttentionMode, Checkpoint, Dataset, Error, Model, ModelConfig};

const METRICS_FILE: &str = "metrics.txt";
const SCATTER_FILE: &str = "scatter.csv";

#[derive(Parser)]
#[command(name = "tempattn", version, about = "Temporal attention for semantic change detection")]
struct Cli {
    /// Flat `key=value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with masked language modeling on both slices.
    Train(TrainArgs),
    /// Score every target word by cosine distance across slices.
    Score(ScoreArgs),
    /// Correlate a score file with gold change scores.
    Eval(EvalArgs),
    /// Dump one head's attention weights for a sentence as CSV.
    InspectAttention(InspectArgs),
    /// Write a synthetic dataset with planted meaning changes.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output checkpoint; the loss log goes beside it.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sentences sampled per slice.
    #[arg(long)]
    n: Option<usize>,
    /// Number of final layers averaged.
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Score TSV written by `score`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Gold scores; defaults to targets.tsv inside --dataset.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory receiving metrics.txt and scatter.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    sentence: Option<String>,
    /// Time point label, as stored in the checkpoint (e.g. t1).
    #[arg(long)]
    time: Option<String>,
    /// 0-based layer index.
    #[arg(long)]
    layer: Option<usize>,
    /// 0-based head index.
    #[arg(long)]
    head: Option<usize>,
    /// CSV path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

const KNOWN_KEYS: &[&str] = &[
    "dataset", "checkpoint", "mode", "layers", "hidden", "heads", "head-dim", "max-len", "lr",
    "epochs", "batch-size", "mask-prob", "max-steps", "min-freq", "n", "h", "seed", "layer",
    "head", "time", "out", "scores", "targets", "sentence", "sentences",
];

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Training { .. } | Error::DegenerateTime { .. } => 3,
            Error::TooFewScored(_) | Error::DegenerateMetric(_) => 4,
            _ => 2,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

/// Values from `--config`; explicit flags always win.
struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut values = HashMap::new();
        let Some(path) = path else {
            return Ok(Self { values });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Failure::usage(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            let key = k.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Failure::usage(format!(
                    "{}:{}: unknown key '{}'",
                    path.display(),
                    i + 1,
                    k.trim()
                )));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Failure::usage(format!("config: invalid value '{v}' for {key}"))),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<T> {
        self.get(flag, key)?
            .ok_or_else(|| Failure::usage(format!("--{key} is required")))
    }
}

fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".loss.csv");
    checkpoint.with_file_name(name)
}

fn cmd_train(a: TrainArgs, cfg: &FileConfig) -> CliResult<()> {
    let dataset_dir: PathBuf = cfg.require(a.dataset, "dataset")?;
    let ckpt_path: PathBuf = cfg.require(a.checkpoint, "checkpoint")?;
    let mode: AttentionMode = cfg
        .or(a.mode, "mode", "temporal".to_string())?
        .parse()
        .map_err(Failure::from)?;
    let layers = cfg.or(a.layers, "layers", 2)?;
    let hidden = cfg.or(a.hidden, "hidden", 128)?;
    let heads = cfg.or(a.heads, "heads", 2)?;
    let head_dim = cfg.get(a.head_dim, "head-dim")?;
    let max_len = cfg.or(a.max_len, "max-len", DEFAULT_MAX_LEN)?;
    let min_freq = cfg.or(a.min_freq, "min-freq", DEFAULT_MIN_FREQ)?;
    let defaults = TrainConfig::default();
    let tcfg = TrainConfig {
        learning_rate: cfg.or(a.lr, "lr", defaults.learning_rate)?,
        epochs: cfg.or(a.epochs, "epochs", defaults.epochs)?,
        batch_size: cfg.or(a.batch_size, "batch-size", defaults.batch_size)?,
        mask_prob: cfg.or(a.mask_prob, "mask-prob", defaults.mask_prob)?,
        seed: cfg.or(a.seed, "seed", defaults.seed)?,
        max_steps: cfg.get(a.max_steps, "max-steps")?,
        ..defaults
    };
    tcfg.validate()?;

    let data = Dataset::load(&dataset_dir)?;
    let vocab = build_vocab(&data.corpora(), &data.targets, min_freq)?;
    let time_vocab = data.time_vocab();
    let mut mcfg = ModelConfig::new(layers, hidden, heads, vocab.len(), &time_vocab, mode);
    if let Some(d) = head_dim {
        mcfg.head_dim = d;
    }
    mcfg.max_len = max_len;
    mcfg.seed = tcfg.seed;
    let mut model = Model::build(mcfg)?;
    println!(
        "training {mode} model: {} parameters, vocabulary {}",
        model.count_parameters().total,
        vocab.len()
    );

    let report = train_mlm(&mut model, &data.corpora(), &vocab, &tcfg).map_err(|e| match e {
        Error::Config(_) => Failure::from(e),
        other => Failure {
            code: 3,
            msg: other.to_string(),
        },
    })?;
    let every = (report.steps / 10).max(1);
    for r in report.log.iter().filter(|r| r.step % every == 0 || r.step == 1) {
        println!("step {} epoch {} loss {:.4}", r.step, r.epoch, r.loss);
    }
    if report.steps == 0 {
        return Err(Failure {
            code: 3,
            msg: "no optimizer step was taken (no masked tokens)".into(),
        });
    }
    Checkpoint::new(model, vocab, time_vocab)?.save(&ckpt_path)?;
    let log_path = loss_log_path(&ckpt_path);
    report.write_csv(&log_path)?;
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

fn cmd_score(a: ScoreArgs, cfg: &FileConfig) -> CliResult<()> {
    let dataset_dir: PathBuf = cfg.require(a.dataset, "dataset")?;
    let ckpt_path: PathBuf = cfg.require(a.checkpoint, "checkpoint")?;
    let out: PathBuf = cfg.require(a.out, "out")?;
    let n = cfg.or(a.n, "n", DEFAULT_SAMPLE_SIZE)?;
    let h = cfg.or(a.h, "h", DEFAULT_LAST_LAYERS)?;
    let seed = cfg.or(a.seed, "seed", 0)?;

    let ck = Checkpoint::load(&ckpt_path)?;
    let data = Dataset::load(&dataset_dir)?;
    let labels: Vec<&str> = data.corpora().iter().map(|c| c.time_point.as_str()).collect();
    if ck.time_vocab.labels() != labels.as_slice() {
        return Err(Failure::usage(format!(
            "dataset time points {:?} do not match checkpoint time points {:?}",
            labels,
            ck.time_vocab.labels()
        )));
    }
    if let Some(t) = data.targets.iter().find(|t| ck.vocab.id(&t.word).is_none()) {
        return Err(Failure::usage(format!(
            "target '{}' is not in the checkpoint vocabulary",
            t.word
        )));
    }
    let report = semantic_change_scores(
        &ck.model,
        &ck.vocab,
        &data.t1,
        &data.t2,
        &data.targets,
        n,
        h,
        seed,
    )?;
    report.write_tsv(&out)?;
    println!(
        "scored {} of {} targets, wrote {}",
        report.entries.len() - report.n_unscored(),
        report.entries.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs, cfg: &FileConfig) -> CliResult<()> {
    let scores: PathBuf = cfg.require(a.scores, "scores")?;
    let targets = match cfg.get(a.targets, "targets")? {
        Some(t) => t,
        None => {
            let dir: PathBuf = cfg.get(a.dataset, "dataset")?.ok_or_else(|| {
                Failure::usage("--targets or --dataset is required")
            })?;
            dir.join(TARGETS)
        }
    };
    let out: PathBuf = cfg.require(a.out, "out")?;

    let report = ScoreReport::read_tsv(&scores)?;
    let gold = load_targets(&targets)?;
    let eval = evaluate(&report, &gold)?;
    let rows = rank_scatter(&report, &gold)?;
    std::fs::create_dir_all(&out).map_err(|e| Failure::usage(format!("{}: {e}", out.display())))?;
    tempattn::io::write_atomic(out.join(METRICS_FILE), eval.to_metrics_file().as_bytes())?;
    tempattn::io::write_atomic(out.join(SCATTER_FILE), scatter_csv(&rows).as_bytes())?;
    println!(
        "pearson={:.6} spearman={:.6} (scored {}, unscored {})",
        eval.pearson_r, eval.spearman_rho, eval.n_scored, eval.n_unscored
    );
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_inspect(a: InspectArgs, cfg: &FileConfig) -> CliResult<()> {
    let ckpt_path: PathBuf = cfg.require(a.checkpoint, "checkpoint")?;
    let sentence: String = cfg.require(a.sentence, "sentence")?;
    let time: String = cfg.require(a.time, "time")?;
    let layer = cfg.or(a.layer, "layer", 0)?;
    let head = cfg.or(a.head, "head", 0)?;
    let out = cfg.get(a.out, "out")?;

    let ck = Checkpoint::load(&ckpt_path)?;
    let mcfg = ck.model.config();
    let point = ck.time_vocab.index_of(&time).ok_or_else(|| {
        Failure::usage(format!(
            "unknown time point '{time}'; checkpoint has {:?}",
            ck.time_vocab.labels()
        ))
    })?;
    if layer >= mcfg.layers || head >= mcfg.heads {
        return Err(Failure::usage(format!(
            "layer {layer} / head {head} out of range ({} layers, {} heads)",
            mcfg.layers, mcfg.heads
        )));
    }
    let seq = encode_sequence(&ck.vocab, &sentence.to_lowercase(), point, mcfg.mode, mcfg.max_len)?;
    if seq.is_empty() {
        return Err(Failure::usage("sentence has no tokens"));
    }
    let w = ck.model.attention_weights(&seq, layer, head)?;
    let labels: Vec<String> = ck.vocab.decode(&seq.token_ids).into_iter().map(csv_field).collect();
    let mut csv = String::from("token");
    for l in &labels {
        csv.push(',');
        csv.push_str(l);
    }
    csv.push('\n');
    for (i, l) in labels.iter().enumerate() {
        csv.push_str(l);
        for x in w.row(i) {
            let _ = write!(csv, ",{x}");
        }
        csv.push('\n');
    }
    match out {
        Some(p) => tempattn::io::write_atomic(&p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs, cfg: &FileConfig) -> CliResult<()> {
    let out: PathBuf = cfg.require(a.out, "out")?;
    let defaults = PlantedChangeConfig::default();
    let gen = PlantedChangeConfig {
        sentences_per_slice: cfg.or(a.sentences, "sentences", defaults.sentences_per_slice)?,
        seed: cfg.or(a.seed, "seed", defaults.seed)?,
        ..defaults
    };
    planted_change_dataset(&gen)?.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Score(a) => cmd_score(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::InspectAttention(a) => cmd_inspect(a, &cfg),
        Command::Generate(a) => cmd_generate(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
