//! Masked-language-model training with Adam.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode_sequence, mask_for_mlm, Corpus, DEFAULT_MASK_PROB};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::tape::GradTape;
use crate::vocab::{TimedSequence, Vocab};

/// Global gradient-norm ceiling applied before every update.
pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 16,
            mask_prob: DEFAULT_MASK_PROB,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_shapes<'m>(shapes: impl IntoIterator<Item = &'m Matrix>) -> Self {
        let first: Vec<Matrix> = shapes
            .into_iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first.len()
        || params.len() != state.second.len()
    {
        return Err(Error::Contract(format!(
            "adam_step got {} params, {} grads, {} moment blocks",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first[i].shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean cross-entropy over the batch's masked positions.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LossRecord>,
    /// `(epoch, batch index)` of batches with no masked position.
    pub skipped_batches: Vec<(usize, usize)>,
    pub steps: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.log.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }

    /// `step,epoch,loss` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for r in &self.log {
            let _ = writeln!(out, "{},{},{}", r.step, r.epoch, r.loss);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Encodes every sentence of every corpus; corpus `k` is time point `k`.
pub fn encode_corpora(model: &Model, corpora: &[&Corpus], vocab: &Vocab) -> Result<Vec<TimedSequence>> {
    let cfg = model.config();
    if corpora.len() != cfg.n_time_points() {
        return Err(Error::Config(format!(
            "{} corpora for a model with {} time points",
            corpora.len(),
            cfg.n_time_points()
        )));
    }
    if vocab.len() != cfg.token_vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            cfg.token_vocab_size
        )));
    }
    let mut seqs = Vec::new();
    for (k, c) in corpora.iter().enumerate() {
        for s in &c.sentences {
            let seq = encode_sequence(vocab, s, k, cfg.mode, cfg.max_len)?;
            if !seq.is_empty() {
                seqs.push(seq);
            }
        }
    }
    Ok(seqs)
}

/// Trains `model` in place on the union of all time slices.
///
/// Each epoch shuffles the sequences with a seeded generator, then walks
/// them in batches. Sequences run through the encoder one at a time and
/// their gradients are summed, so no padding is needed. Batches without a
/// single masked position are skipped and recorded.
pub fn train_mlm(
    model: &mut Model,
    corpora: &[&Corpus],
    vocab: &Vocab,
    tcfg: &TrainConfig,
) -> Result<TrainReport> {
    tcfg.validate()?;
    if corpora.is_empty() {
        return Err(Error::Config("no corpora to train on".into()));
    }
    let seqs = encode_corpora(model, corpora, vocab)?;
    if seqs.is_empty() {
        return Err(Error::Training {
            step: 0,
            reason: "corpora contain no encodable sentence".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut state = OptimizerState::for_shapes(model.params().iter().map(|p| &p.value));
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..seqs.len()).collect();

    'epochs: for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(tcfg.batch_size).enumerate() {
            if tcfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'epochs;
            }
            let masked: Vec<_> = batch
                .iter()
                .map(|&i| mask_for_mlm(&seqs[i], vocab, &mut rng, tcfg.mask_prob))
                .collect::<Result<_>>()?;
            let n_labels: usize = masked.iter().map(|m| m.labels.len()).sum();
            if n_labels == 0 {
                report.skipped_batches.push((epoch, batch_idx));
                continue;
            }

            let step = report.steps + 1;
            let (loss_sum, mut grads) = batch_gradients(model, &masked)?;
            let loss = loss_sum / n_labels as f64;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            let scale = 1.0 / n_labels as f64;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            clip_global_norm(&mut grads, CLIP_NORM);
            let mut params: Vec<&mut Matrix> = model.param_values_mut().collect();
            adam_step(&mut params, &grads, &mut state, tcfg)?;

            report.steps = step;
            report.log.push(LossRecord { step, epoch, loss });
        }
    }
    Ok(report)
}

/// Summed loss and summed per-parameter gradients over a batch.
fn batch_gradients(
    model: &Model,
    batch: &[crate::corpus::MaskedSequence],
) -> Result<(f64, Vec<Matrix>)> {
    let mut grads: Vec<Matrix> = model
        .params()
        .iter()
        .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
        .collect();
    let mut loss_sum = 0.0;
    for m in batch {
        let mut tape = GradTape::new();
        let Some(loss) = model.record_mlm_loss(&mut tape, m)? else {
            continue;
        };
        loss_sum += tape.value(loss).data()[0];
        for (key, g) in tape.backward(loss)?.into_params() {
            grads[key].add_assign(&g);
        }
    }
    Ok((loss_sum, grads))
}

/// Mean masked-token loss of `model` over pre-masked sequences.
pub fn mlm_loss(model: &Model, batch: &[crate::corpus::MaskedSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for m in batch {
        let mut tape = GradTape::new();
        if let Some(loss) = model.record_mlm_loss(&mut tape, m)? {
            total += tape.value(loss).data()[0];
            count += m.labels.len();
        }
    }
    if count == 0 {
        return Err(Error::Contract("no masked positions to score".into()));
    }
    Ok(total / count as f64)
}
