//! Attention score variants: standard scaled dot-product, temporal
//! attention, and the fixed per-time-point scaling baselines.
//!
//! Temporal attention replaces `Q Kᵀ` with `Q (TᵀT / ‖T‖) Kᵀ`, where `T`
//! holds one projected time representation per row. `‖T‖` is the Frobenius
//! norm. The bilinear term is `d_k x d_k`, so output shapes match standard
//! attention exactly.
//!
//! Time-token prepending is a sequence rewrite and lives in
//! [`crate::corpus::encode_sequence`]; this module only does score math.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{GradTape, NodeId};

/// `‖T‖` must exceed this before it is used as a divisor.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Standard,
    Temporal,
    Prepend,
    TemporalPrepend,
    ScaledLinear,
    ScaledExponential,
    ScaledDocCount,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 7] = [
        AttentionMode::Standard,
        AttentionMode::Temporal,
        AttentionMode::Prepend,
        AttentionMode::TemporalPrepend,
        AttentionMode::ScaledLinear,
        AttentionMode::ScaledExponential,
        AttentionMode::ScaledDocCount,
    ];

    /// Whether the model carries a time table and per-head `W_T`.
    pub fn is_temporal(self) -> bool {
        matches!(self, AttentionMode::Temporal | AttentionMode::TemporalPrepend)
    }

    /// Whether sequences start with a time token.
    pub fn prepends_time_token(self) -> bool {
        matches!(self, AttentionMode::Prepend | AttentionMode::TemporalPrepend)
    }

    pub fn is_scaled(self) -> bool {
        matches!(
            self,
            AttentionMode::ScaledLinear
                | AttentionMode::ScaledExponential
                | AttentionMode::ScaledDocCount
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Standard => "standard",
            AttentionMode::Temporal => "temporal",
            AttentionMode::Prepend => "prepend",
            AttentionMode::TemporalPrepend => "temporal_prepend",
            AttentionMode::ScaledLinear => "scaled_linear",
            AttentionMode::ScaledExponential => "scaled_exponential",
            AttentionMode::ScaledDocCount => "scaled_doc_count",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        Ok(match norm.as_str() {
            "standard" => AttentionMode::Standard,
            "temporal" => AttentionMode::Temporal,
            "prepend" => AttentionMode::Prepend,
            "temporal_prepend" | "temporal_and_prepend" => AttentionMode::TemporalPrepend,
            "scaled_linear" | "linear" => AttentionMode::ScaledLinear,
            "scaled_exponential" | "scaled_exp" | "exponential" => {
                AttentionMode::ScaledExponential
            }
            "scaled_doc_count" | "scaled_doc" | "doc_count" => AttentionMode::ScaledDocCount,
            _ => return Err(Error::Contract(format!("unknown attention mode '{s}'"))),
        })
    }
}

/// Per-head inputs. `q`, `k` are `n x d_k`; `v` has `n` rows.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Projected time representations, `n x d_k`.
    pub t: Option<Matrix>,
    /// Positive per-row multipliers for the scaled baselines.
    pub scale: Option<Vec<f64>>,
}

impl AttentionInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Self {
        Self {
            q,
            k,
            v,
            t: None,
            scale: None,
        }
    }

    pub fn with_time(mut self, t: Matrix) -> Self {
        self.t = Some(t);
        self
    }

    pub fn with_scale(mut self, scale: Vec<f64>) -> Self {
        self.scale = Some(scale);
        self
    }

    fn validate(&self) -> Result<()> {
        let (n, dk) = self.q.shape();
        if n == 0 || dk == 0 {
            return Err(Error::Contract("attention inputs must be nonempty".into()));
        }
        if self.k.shape() != (n, dk) {
            return Err(Error::shape("attention q/k", self.q.shape(), self.k.shape()));
        }
        if self.v.rows() != n {
            return Err(Error::shape("attention q/v", self.q.shape(), self.v.shape()));
        }
        if let Some(t) = &self.t {
            if t.shape() != (n, dk) {
                return Err(Error::shape("attention q/t", self.q.shape(), t.shape()));
            }
        }
        if let Some(s) = &self.scale {
            if s.len() != n {
                return Err(Error::shape("attention scale", self.q.shape(), (s.len(), 1)));
            }
            check_scale(s)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub y: Matrix,
    /// Row-stochastic `n x n` attention weights.
    pub weights: Matrix,
}

/// How a head turns `q`, `k` into pre-softmax scores.
#[derive(Clone, Debug)]
pub enum ScoreKind {
    Standard,
    /// Node holding the `n x d_k` time representation matrix.
    Temporal(NodeId),
    Scaled(Vec<f64>),
}

/// Records the pre-softmax score matrix of one head on `tape`.
pub fn record_logits(
    tape: &mut GradTape<'_>,
    q: NodeId,
    k: NodeId,
    kind: &ScoreKind,
) -> Result<NodeId> {
    let dk = tape.value(q).cols();
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let raw = match kind {
        ScoreKind::Standard => tape.matmul_nt(q, k)?,
        ScoreKind::Temporal(t) => {
            let t = *t;
            let norm = tape.frobenius_norm(t);
            let norm_value = tape.value(norm).data()[0];
            if norm_value <= NORM_FLOOR {
                return Err(Error::DegenerateTime {
                    norm: norm_value,
                    floor: NORM_FLOOR,
                });
            }
            let tt = tape.transpose(t);
            let gram = tape.matmul(tt, t)?;
            let bilinear = tape.div_scalar(gram, norm)?;
            let qm = tape.matmul(q, bilinear)?;
            tape.matmul_nt(qm, k)?
        }
        ScoreKind::Scaled(s) => {
            check_scale(s)?;
            let qk = tape.matmul_nt(q, k)?;
            tape.scale_rows(qk, s.clone())?
        }
    };
    Ok(tape.scale(raw, inv_sqrt))
}

/// Records one attention head; returns `(y, weights)` nodes.
pub fn record_attention(
    tape: &mut GradTape<'_>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    kind: &ScoreKind,
) -> Result<(NodeId, NodeId)> {
    let logits = record_logits(tape, q, k, kind)?;
    let weights = tape.softmax_rows(logits);
    let y = tape.matmul(weights, v)?;
    Ok((y, weights))
}

fn check_scale(s: &[f64]) -> Result<()> {
    if let Some(bad) = s.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(Error::Contract(format!(
            "attention scale factors must be positive and finite, got {bad}"
        )));
    }
    Ok(())
}

fn run(inputs: &AttentionInputs, kind: impl FnOnce(&mut GradTape<'_>) -> ScoreKind) -> Result<AttentionOutput> {
    let mut tape = GradTape::new();
    let q = tape.input(inputs.q.clone());
    let k = tape.input(inputs.k.clone());
    let v = tape.input(inputs.v.clone());
    let kind = kind(&mut tape);
    let (y, w) = record_attention(&mut tape, q, k, v, &kind)?;
    Ok(AttentionOutput {
        y: tape.value(y).clone(),
        weights: tape.value(w).clone(),
    })
}

fn logits_of(inputs: &AttentionInputs, kind: impl FnOnce(&mut GradTape<'_>) -> ScoreKind) -> Result<Matrix> {
    let mut tape = GradTape::new();
    let q = tape.input(inputs.q.clone());
    let k = tape.input(inputs.k.clone());
    let kind = kind(&mut tape);
    let l = record_logits(&mut tape, q, k, &kind)?;
    Ok(tape.value(l).clone())
}

/// `softmax(Q Kᵀ / √d_k) V`.
pub fn standard_attention(inputs: &AttentionInputs) -> Result<AttentionOutput> {
    inputs.validate()?;
    if inputs.t.is_some() || inputs.scale.is_some() {
        return Err(Error::Contract(
            "standard attention takes neither time nor scale inputs".into(),
        ));
    }
    run(inputs, |_| ScoreKind::Standard)
}

/// `softmax(Q (TᵀT / ‖T‖) Kᵀ / √d_k) V`.
pub fn temporal_attention(inputs: &AttentionInputs) -> Result<AttentionOutput> {
    inputs.validate()?;
    let t = inputs
        .t
        .clone()
        .ok_or_else(|| Error::Contract("temporal attention requires a time matrix".into()))?;
    if inputs.scale.is_some() {
        return Err(Error::Contract("temporal attention takes no scale input".into()));
    }
    run(inputs, |tape| ScoreKind::Temporal(tape.input(t)))
}

/// Row i of the scores is `s_i · q_i kⱼᵀ / √d_k`.
pub fn scaled_attention(inputs: &AttentionInputs) -> Result<AttentionOutput> {
    inputs.validate()?;
    let s = inputs
        .scale
        .clone()
        .ok_or_else(|| Error::Contract("scaled attention requires scale factors".into()))?;
    if inputs.t.is_some() {
        return Err(Error::Contract("scaled attention takes no time matrix".into()));
    }
    run(inputs, |_| ScoreKind::Scaled(s))
}

/// Pre-softmax temporal scores, exposed for homogeneity checks.
pub fn temporal_logits(inputs: &AttentionInputs) -> Result<Matrix> {
    inputs.validate()?;
    let t = inputs
        .t
        .clone()
        .ok_or_else(|| Error::Contract("temporal attention requires a time matrix".into()))?;
    logits_of(inputs, |tape| ScoreKind::Temporal(tape.input(t)))
}

pub fn standard_logits(inputs: &AttentionInputs) -> Result<Matrix> {
    inputs.validate()?;
    logits_of(inputs, |_| ScoreKind::Standard)
}

/// Fixed multiplier for the scaled baselines.
///
/// `time_index` is 1-based, so a model with a single time point gets a
/// linear factor of 1 and reduces to standard attention. Exponential uses
/// `2^index`; doc-count uses the time point's share of all documents.
pub fn scale_factor(mode: AttentionMode, time_index: usize, doc_counts: &[usize]) -> Result<f64> {
    let n_t = doc_counts.len();
    if time_index == 0 || (n_t > 0 && time_index > n_t) {
        return Err(Error::Contract(format!(
            "time index {time_index} outside 1..={n_t}"
        )));
    }
    match mode {
        AttentionMode::ScaledLinear => Ok(time_index as f64),
        AttentionMode::ScaledExponential => Ok(2f64.powi(time_index as i32)),
        AttentionMode::ScaledDocCount => {
            if n_t == 0 || doc_counts.contains(&0) {
                return Err(Error::Contract(
                    "doc-count scaling needs a positive count for every time point".into(),
                ));
            }
            let total: usize = doc_counts.iter().sum();
            Ok(doc_counts[time_index - 1] as f64 / total as f64)
        }
        other => Err(Error::Contract(format!(
            "mode '{other}' has no fixed scale factor"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_is_value_row() {
        let inp = AttentionInputs::new(
            Matrix::from_rows(&[[1.0]]),
            Matrix::from_rows(&[[2.0]]),
            Matrix::from_rows(&[[7.0]]),
        );
        let out = standard_attention(&inp).unwrap();
        assert_eq!(out.y.row(0), &[7.0]);
        assert_eq!(out.weights.row(0), &[1.0]);

        let out = temporal_attention(&inp.clone().with_time(Matrix::from_rows(&[[0.3]]))).unwrap();
        assert_eq!(out.y.row(0), &[7.0]);
        assert_eq!(out.weights.row(0), &[1.0]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let q = Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.1], [3.0, 3.0]]);
        let k = Matrix::from_rows(&[[0.2, 0.4], [0.2, 0.4], [0.2, 0.4]]);
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]);
        let out = standard_attention(&AttentionInputs::new(q, k, v)).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((out.weights.get(r, c) - 1.0 / 3.0).abs() < 1e-15);
            }
            assert!((out.y.get(r, 0) - 1.0).abs() < 1e-15);
            assert!((out.y.get(r, 1) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn temporal_requires_time_and_rejects_zero_time() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let inp = AttentionInputs::new(m.clone(), m.clone(), m.clone());
        assert!(matches!(temporal_attention(&inp), Err(Error::Contract(_))));
        let zero = inp.with_time(Matrix::zeros(2, 2));
        assert!(matches!(
            temporal_attention(&zero),
            Err(Error::DegenerateTime { .. })
        ));
    }

    #[test]
    fn scaled_rejects_nonpositive_scale() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let inp = AttentionInputs::new(m.clone(), m.clone(), m).with_scale(vec![1.0, 0.0]);
        assert!(matches!(scaled_attention(&inp), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let inp = AttentionInputs::new(Matrix::zeros(2, 3), Matrix::zeros(2, 4), Matrix::zeros(2, 3));
        assert!(matches!(standard_attention(&inp), Err(Error::Shape { .. })));
    }

    #[test]
    fn scale_factor_examples() {
        let counts = [30, 10];
        assert_eq!(scale_factor(AttentionMode::ScaledLinear, 2, &counts).unwrap(), 2.0);
        assert_eq!(
            scale_factor(AttentionMode::ScaledExponential, 3, &[1, 1, 1]).unwrap(),
            8.0
        );
        assert_eq!(
            scale_factor(AttentionMode::ScaledDocCount, 1, &counts).unwrap(),
            0.75
        );
        assert!(scale_factor(AttentionMode::Temporal, 1, &counts).is_err());
        assert!(scale_factor(AttentionMode::ScaledLinear, 0, &counts).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in AttentionMode::ALL {
            assert_eq!(mode.as_str().parse::<AttentionMode>().unwrap(), mode);
        }
        assert_eq!(
            "temporal+prepend".parse::<AttentionMode>().unwrap(),
            AttentionMode::TemporalPrepend
        );
    }
}
