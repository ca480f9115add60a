//! Bidirectional transformer encoder with token, position and (in temporal
//! modes) time-point embeddings, plus a tied MLM head.
//!
//! Layer structure is post-norm:
//!
//! ```text
//! x₀ = LN(tok + pos)
//! a  = concat_h(attend_h(x W_Q^h + b, x W_K^h + b, x W_V^h + b)) W_O + b_O
//! x' = LN(x + a)
//! x  = LN(x' + gelu(x' W₁ + b₁) W₂ + b₂)
//! ```
//!
//! In temporal modes each head also owns `W_T^h` (`D x d_k`) and builds
//! `T = Xᵗ W_T^h` from the shared time table. The time table never enters
//! the residual stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{record_attention, scale_factor, AttentionMode, ScoreKind};
use crate::corpus::MaskedSequence;
use crate::error::{Error, Result};
use crate::matrix::{matmul_nt, Matrix};
use crate::tape::{GradTape, NodeId};
use crate::vocab::{TimeVocab, TimedSequence, N_SPECIAL};

pub const DEFAULT_MAX_LEN: usize = 128;
pub const DEFAULT_INIT_STD: f64 = 0.02;
pub const DEFAULT_LN_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub token_vocab_size: usize,
    /// Reserved special-token time ids plus one per time point.
    pub time_vocab_size: usize,
    pub mode: AttentionMode,
    pub seed: u64,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Documents per time point; used by doc-count scaling.
    pub doc_counts: Vec<usize>,
}

impl ModelConfig {
    /// `layers x hidden` encoder with `heads` heads, `ff_dim = 4 · hidden`.
    pub fn new(
        layers: usize,
        hidden: usize,
        heads: usize,
        token_vocab_size: usize,
        time_vocab: &TimeVocab,
        mode: AttentionMode,
    ) -> Self {
        Self {
            layers,
            hidden,
            heads,
            head_dim: if heads > 0 { hidden / heads } else { 0 },
            ff_dim: 4 * hidden,
            max_len: DEFAULT_MAX_LEN,
            token_vocab_size,
            time_vocab_size: time_vocab.size(),
            mode,
            seed: 0,
            init_std: DEFAULT_INIT_STD,
            ln_eps: DEFAULT_LN_EPS,
            doc_counts: time_vocab.doc_counts().to_vec(),
        }
    }

    pub fn n_time_points(&self) -> usize {
        self.time_vocab_size.saturating_sub(N_SPECIAL)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return bad("layers, heads and head_dim must be positive".into());
        }
        if self.hidden != self.heads * self.head_dim {
            return bad(format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden, self.heads, self.head_dim
            ));
        }
        if self.ff_dim == 0 {
            return bad("ff_dim must be positive".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.token_vocab_size <= N_SPECIAL {
            return bad("token vocabulary holds no words".into());
        }
        if self.time_vocab_size <= N_SPECIAL {
            return bad(format!(
                "time vocabulary of size {} has no time points beyond the {N_SPECIAL} reserved ids",
                self.time_vocab_size
            ));
        }
        if self.doc_counts.len() != self.n_time_points() {
            return bad(format!(
                "{} doc counts for {} time points",
                self.doc_counts.len(),
                self.n_time_points()
            ));
        }
        if self.mode == AttentionMode::ScaledDocCount && self.doc_counts.contains(&0) {
            return bad("doc-count scaling needs positive doc counts".into());
        }
        if !(self.init_std > 0.0) || !(self.ln_eps > 0.0) {
            return bad("init_std and ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Exact trainable parameter count, computed from shapes alone.
    pub fn parameter_count(&self) -> ParameterCount {
        let (d, dk, h, l, f) = (
            self.hidden,
            self.head_dim,
            self.heads,
            self.layers,
            self.ff_dim,
        );
        let mut blocks = vec![
            ("token_embeddings", self.token_vocab_size * d),
            ("position_embeddings", self.max_len * d),
        ];
        if self.mode.is_temporal() {
            blocks.push(("time_embeddings", self.time_vocab_size * d));
        }
        blocks.push(("embedding_layer_norm", 2 * d));
        blocks.push(("attention_qkv", l * h * 3 * (d * dk + dk)));
        if self.mode.is_temporal() {
            blocks.push(("attention_time_projection", l * h * d * dk));
        }
        blocks.push(("attention_output", l * (d * d + d)));
        blocks.push(("feed_forward", l * (d * f + f + f * d + d)));
        blocks.push(("layer_norms", l * 4 * d));
        blocks.push(("mlm_bias", self.token_vocab_size));
        let blocks: Vec<(String, usize)> = blocks
            .into_iter()
            .map(|(n, c)| (n.to_string(), c))
            .collect();
        ParameterCount {
            total: blocks.iter().map(|b| b.1).sum(),
            blocks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub blocks: Vec<(String, usize)>,
}

impl ParameterCount {
    pub fn block(&self, name: &str) -> usize {
        self.blocks
            .iter()
            .find(|b| b.0 == name)
            .map_or(0, |b| b.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadLayout {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wt: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerLayout {
    heads: Vec<HeadLayout>,
    wo: usize,
    bo: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_gain: usize,
    ln2_bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    token_table: usize,
    position_table: usize,
    time_table: Option<usize>,
    emb_ln_gain: usize,
    emb_ln_bias: usize,
    layers: Vec<LayerLayout>,
    mlm_bias: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    TimeTable,
    Zeros,
    Ones,
}

/// Per-layer transformer outputs (embedding output excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Matrix>,
}

impl HiddenStates {
    pub fn last(&self) -> &Matrix {
        self.layers.last().expect("at least one layer")
    }
}

/// Node ids produced by one forward pass on a tape.
pub struct ForwardTrace {
    pub layer_outputs: Vec<NodeId>,
    /// `[layer][head]` attention weight nodes.
    pub weights: Vec<Vec<NodeId>>,
    /// Node for each parameter, in parameter order.
    pub params: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl Model {
    /// Deterministic initialization from `cfg.seed`.
    ///
    /// Weights and tables draw from N(0, init_std²) truncated at ±2σ; biases
    /// start at zero and layer-norm gains at one. Time-table rows whose norm
    /// falls below `0.1 · √D · init_std` are redrawn.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
        let std = cfg.init_std;
        let min_row_norm = 0.1 * (cfg.hidden as f64).sqrt() * std;
        let draw = |rng: &mut ChaCha8Rng| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                return x;
            }
        };
        Ok(Self::assemble(cfg, |init, rows, cols| match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Normal => Matrix::from_fn(rows, cols, |_, _| draw(&mut rng)),
            Init::TimeTable => {
                let mut m = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    loop {
                        for x in m.row_mut(r) {
                            *x = draw(&mut rng);
                        }
                        let norm = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm >= min_row_norm {
                            break;
                        }
                    }
                }
                m
            }
        }))
    }

    /// Rebuilds a model from stored parameter values in layout order.
    pub fn from_parameters(cfg: ModelConfig, values: Vec<Matrix>) -> Result<Self> {
        cfg.validate()?;
        let skeleton = Self::assemble(cfg, |_, r, c| Matrix::zeros(r, c));
        if skeleton.params.len() != values.len() {
            return Err(Error::Corrupt(format!(
                "expected {} parameter blocks, found {}",
                skeleton.params.len(),
                values.len()
            )));
        }
        let mut model = skeleton;
        for (p, v) in model.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Corrupt(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            if !v.is_finite() {
                return Err(Error::Corrupt(format!("parameter {} is not finite", p.name)));
            }
            p.value = v;
        }
        Ok(model)
    }

    fn assemble(cfg: ModelConfig, mut make: impl FnMut(Init, usize, usize) -> Matrix) -> Self {
        let mut params = Vec::new();
        let mut add = |name: String, init: Init, rows: usize, cols: usize| {
            params.push(Param {
                name,
                value: make(init, rows, cols),
            });
            params.len() - 1
        };
        let (d, dk, f) = (cfg.hidden, cfg.head_dim, cfg.ff_dim);
        let temporal = cfg.mode.is_temporal();

        let token_table = add("token_embeddings".into(), Init::Normal, cfg.token_vocab_size, d);
        let position_table = add("position_embeddings".into(), Init::Normal, cfg.max_len, d);
        let time_table =
            temporal.then(|| add("time_embeddings".into(), Init::TimeTable, cfg.time_vocab_size, d));
        let emb_ln_gain = add("embedding_ln.gain".into(), Init::Ones, 1, d);
        let emb_ln_bias = add("embedding_ln.bias".into(), Init::Zeros, 1, d);

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let heads = (0..cfg.heads)
                .map(|h| {
                    let p = format!("layer{l}.head{h}");
                    HeadLayout {
                        wq: add(format!("{p}.w_q"), Init::Normal, d, dk),
                        bq: add(format!("{p}.b_q"), Init::Zeros, 1, dk),
                        wk: add(format!("{p}.w_k"), Init::Normal, d, dk),
                        bk: add(format!("{p}.b_k"), Init::Zeros, 1, dk),
                        wv: add(format!("{p}.w_v"), Init::Normal, d, dk),
                        bv: add(format!("{p}.b_v"), Init::Zeros, 1, dk),
                        wt: temporal.then(|| add(format!("{p}.w_t"), Init::Normal, d, dk)),
                    }
                })
                .collect();
            let p = format!("layer{l}");
            layers.push(LayerLayout {
                heads,
                wo: add(format!("{p}.w_o"), Init::Normal, d, d),
                bo: add(format!("{p}.b_o"), Init::Zeros, 1, d),
                ln1_gain: add(format!("{p}.ln1.gain"), Init::Ones, 1, d),
                ln1_bias: add(format!("{p}.ln1.bias"), Init::Zeros, 1, d),
                w1: add(format!("{p}.ff.w1"), Init::Normal, d, f),
                b1: add(format!("{p}.ff.b1"), Init::Zeros, 1, f),
                w2: add(format!("{p}.ff.w2"), Init::Normal, f, d),
                b2: add(format!("{p}.ff.b2"), Init::Zeros, 1, d),
                ln2_gain: add(format!("{p}.ln2.gain"), Init::Ones, 1, d),
                ln2_bias: add(format!("{p}.ln2.bias"), Init::Zeros, 1, d),
            });
        }
        let mlm_bias = add("mlm_bias".into(), Init::Zeros, 1, cfg.token_vocab_size);

        Self {
            cfg,
            params,
            layout: Layout {
                token_table,
                position_table,
                time_table,
                emb_ln_gain,
                emb_ln_bias,
                layers,
                mlm_bias,
            },
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_values_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// Exact parameter count with per-block breakdown.
    pub fn count_parameters(&self) -> ParameterCount {
        self.cfg.parameter_count()
    }

    /// Sum of the sizes of every stored parameter block.
    pub fn stored_parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn token_embeddings(&self) -> &Matrix {
        &self.params[self.layout.token_table].value
    }

    pub fn validate_sequence(&self, seq: &TimedSequence) -> Result<()> {
        if seq.token_ids.len() != seq.time_ids.len() {
            return Err(Error::Contract("token/time id lengths differ".into()));
        }
        if seq.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        if seq.len() > self.cfg.max_len {
            return Err(Error::Length {
                len: seq.len(),
                max_len: self.cfg.max_len,
            });
        }
        if let Some(&id) = seq.token_ids.iter().find(|&&i| i >= self.cfg.token_vocab_size) {
            return Err(Error::Vocab {
                kind: "token",
                id,
                size: self.cfg.token_vocab_size,
            });
        }
        if let Some(&id) = seq.time_ids.iter().find(|&&i| i >= self.cfg.time_vocab_size) {
            return Err(Error::Vocab {
                kind: "time",
                id,
                size: self.cfg.time_vocab_size,
            });
        }
        Ok(())
    }

    /// Per-row multipliers for the scaled modes. Rows carrying a reserved
    /// time id use the sequence's time point.
    fn row_scales(&self, seq: &TimedSequence) -> Result<Vec<f64>> {
        let fallback = seq
            .time_ids
            .iter()
            .find_map(|&t| TimeVocab::point_of_id(t));
        seq.time_ids
            .iter()
            .map(|&t| match TimeVocab::point_of_id(t).or(fallback) {
                Some(point) => scale_factor(self.cfg.mode, point + 1, &self.cfg.doc_counts),
                None => Ok(1.0),
            })
            .collect()
    }

    /// Records a full forward pass of `seq` on `tape`.
    pub fn forward<'a>(&'a self, tape: &mut GradTape<'a>, seq: &TimedSequence) -> Result<ForwardTrace> {
        self.validate_sequence(seq)?;
        let n = seq.len();
        let eps = self.cfg.ln_eps;
        let params: Vec<NodeId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, &p.value))
            .collect();
        let lay = &self.layout;

        let tok = tape.gather(params[lay.token_table], seq.token_ids.clone())?;
        let pos = tape.gather(params[lay.position_table], (0..n).collect())?;
        let summed = tape.add(tok, pos)?;
        let mut x = tape.layer_norm(summed, params[lay.emb_ln_gain], params[lay.emb_ln_bias], eps)?;

        let time_rows = match lay.time_table {
            Some(table) => Some(tape.gather(params[table], seq.time_ids.clone())?),
            None => None,
        };
        let scales = if self.cfg.mode.is_scaled() {
            Some(self.row_scales(seq)?)
        } else {
            None
        };

        let mut layer_outputs = Vec::with_capacity(self.cfg.layers);
        let mut weights = Vec::with_capacity(self.cfg.layers);
        for layer in &lay.layers {
            let mut head_out = Vec::with_capacity(layer.heads.len());
            let mut head_w = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let q = affine(tape, x, params[head.wq], params[head.bq])?;
                let k = affine(tape, x, params[head.wk], params[head.bk])?;
                let v = affine(tape, x, params[head.wv], params[head.bv])?;
                let kind = match (head.wt, time_rows, &scales) {
                    (Some(wt), Some(xt), _) => ScoreKind::Temporal(tape.matmul(xt, params[wt])?),
                    (_, _, Some(s)) => ScoreKind::Scaled(s.clone()),
                    _ => ScoreKind::Standard,
                };
                let (y, w) = record_attention(tape, q, k, v, &kind)?;
                head_out.push(y);
                head_w.push(w);
            }
            let concat = tape.concat_cols(head_out)?;
            let attn = affine(tape, concat, params[layer.wo], params[layer.bo])?;
            let res1 = tape.add(x, attn)?;
            let x1 = tape.layer_norm(res1, params[layer.ln1_gain], params[layer.ln1_bias], eps)?;
            let hidden = affine(tape, x1, params[layer.w1], params[layer.b1])?;
            let act = tape.gelu(hidden);
            let ff = affine(tape, act, params[layer.w2], params[layer.b2])?;
            let res2 = tape.add(x1, ff)?;
            x = tape.layer_norm(res2, params[layer.ln2_gain], params[layer.ln2_bias], eps)?;
            layer_outputs.push(x);
            weights.push(head_w);
        }
        Ok(ForwardTrace {
            layer_outputs,
            weights,
            params,
        })
    }

    /// Hidden states of every transformer layer for `seq`.
    pub fn encode(&self, seq: &TimedSequence) -> Result<HiddenStates> {
        let mut tape = GradTape::new();
        let trace = self.forward(&mut tape, seq)?;
        Ok(HiddenStates {
            layers: trace
                .layer_outputs
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect(),
        })
    }

    /// Row-stochastic attention weights of one head.
    pub fn attention_weights(&self, seq: &TimedSequence, layer: usize, head: usize) -> Result<Matrix> {
        if layer >= self.cfg.layers || head >= self.cfg.heads {
            return Err(Error::Config(format!(
                "layer {layer} / head {head} outside {} layers x {} heads",
                self.cfg.layers, self.cfg.heads
            )));
        }
        let mut tape = GradTape::new();
        let trace = self.forward(&mut tape, seq)?;
        Ok(tape.value(trace.weights[layer][head]).clone())
    }

    /// Vocabulary logits through the tied output projection.
    pub fn mlm_logits(&self, h_last: &Matrix) -> Result<Matrix> {
        let mut logits = matmul_nt(h_last, self.token_embeddings())?;
        let bias = self.params[self.layout.mlm_bias].value.row(0);
        for r in 0..logits.rows() {
            for (x, b) in logits.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(logits)
    }

    /// Records the summed masked-token cross-entropy of one sequence.
    /// Returns `None` when the sequence has no labels.
    pub fn record_mlm_loss<'a>(
        &'a self,
        tape: &mut GradTape<'a>,
        masked: &MaskedSequence,
    ) -> Result<Option<NodeId>> {
        if masked.labels.is_empty() {
            return Ok(None);
        }
        let trace = self.forward(tape, &masked.input)?;
        let last = *trace.layer_outputs.last().expect("at least one layer");
        let positions: Vec<usize> = masked.labels.iter().map(|l| l.0).collect();
        let rows = tape.gather(last, positions)?;
        let logits = tape.matmul_nt(rows, trace.params[self.layout.token_table])?;
        let logits = tape.add_row(logits, trace.params[self.layout.mlm_bias])?;
        let targets = masked
            .labels
            .iter()
            .enumerate()
            .map(|(i, &(_, id))| (i, id))
            .collect();
        Ok(Some(tape.cross_entropy(logits, targets)?))
    }
}

fn affine(tape: &mut GradTape<'_>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}
