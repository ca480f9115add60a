#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tempattn::matrix::gelu;
use tempattn::corpus::MaskedSequence;
use tempattn::{
    AttentionMode, GradTape, Matrix, Model, ModelConfig, NodeId, Result, TimeVocab, TimedSequence,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between tape gradients and central differences
/// over every element of every leaf. `f` must return a 1x1 node.
pub fn gradient_error<F>(leaves: &[Matrix], f: F) -> f64
where
    F: for<'a> Fn(&mut GradTape<'a>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Matrix]| -> f64 {
        let mut tape = GradTape::new();
        let ids: Vec<NodeId> = vals.iter().enumerate().map(|(i, m)| tape.param(i, m)).collect();
        let out = f(&mut tape, &ids).expect("forward");
        tape.value(out).as_scalar().expect("scalar loss")
    };
    let mut tape = GradTape::new();
    let ids: Vec<NodeId> = leaves.iter().enumerate().map(|(i, m)| tape.param(i, m)).collect();
    let out = f(&mut tape, &ids).expect("forward");
    assert!(tape.replay_matches());
    let grads = tape.backward(out).expect("backward");

    let mut worst = 0.0f64;
    let mut vals = leaves.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let g = grads
            .param(i)
            .unwrap_or_else(|| Matrix::zeros(leaf.rows(), leaf.cols()));
        for e in 0..leaf.len() {
            let orig = vals[i].data()[e];
            vals[i].data_mut()[e] = orig + FD_STEP;
            let up = eval(&vals);
            vals[i].data_mut()[e] = orig - FD_STEP;
            let down = eval(&vals);
            vals[i].data_mut()[e] = orig;
            worst = worst.max(rel_err(g.data()[e], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Reduces any node to a scalar through fixed random projections, so every
/// output element contributes to the loss with a distinct weight.
pub fn project<'a>(tape: &mut GradTape<'a>, x: NodeId, left: &Matrix, right: &Matrix) -> Result<NodeId> {
    let l = tape.input(left.clone());
    let r = tape.input(right.clone());
    let lx = tape.matmul(l, x)?;
    tape.matmul(lx, r)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn attend(logits: Vec<Vec<f64>>, v: &Matrix) -> (Matrix, Matrix) {
    let n = logits.len();
    let mut w = Matrix::zeros(n, n);
    let mut y = Matrix::zeros(n, v.cols());
    for i in 0..n {
        let a = softmax(&logits[i]);
        for j in 0..n {
            w.set(i, j, a[j]);
            for c in 0..v.cols() {
                y.set(i, c, y.get(i, c) + a[j] * v.get(j, c));
            }
        }
    }
    (y, w)
}

/// `q_i · k_j / √d_k`, one scalar at a time.
pub fn scalar_standard(q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    scalar_scaled(q, k, v, &vec![1.0; q.rows()])
}

pub fn scalar_scaled(q: &Matrix, k: &Matrix, v: &Matrix, s: &[f64]) -> (Matrix, Matrix) {
    let (n, dk) = q.shape();
    let logits = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut acc = 0.0;
                    for a in 0..dk {
                        acc += q.get(i, a) * k.get(j, a);
                    }
                    s[i] * acc / (dk as f64).sqrt()
                })
                .collect()
        })
        .collect();
    attend(logits, v)
}

/// Element-wise expansion of `q_i (TᵀT/‖T‖) k_jᵀ / √d_k`.
pub fn scalar_temporal_logits(q: &Matrix, k: &Matrix, t: &Matrix) -> Vec<Vec<f64>> {
    let (n, dk) = q.shape();
    let mut norm = 0.0;
    for r in 0..t.rows() {
        for c in 0..dk {
            norm += t.get(r, c) * t.get(r, c);
        }
    }
    let norm = norm.sqrt();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut acc = 0.0;
                    for a in 0..dk {
                        for b in 0..dk {
                            let mut m = 0.0;
                            for r in 0..t.rows() {
                                m += t.get(r, a) * t.get(r, b);
                            }
                            acc += q.get(i, a) * (m / norm) * k.get(j, b);
                        }
                    }
                    acc / (dk as f64).sqrt()
                })
                .collect()
        })
        .collect()
}

pub fn scalar_temporal(q: &Matrix, k: &Matrix, v: &Matrix, t: &Matrix) -> (Matrix, Matrix) {
    attend(scalar_temporal_logits(q, k, t), v)
}

fn param<'m>(model: &'m Model, name: &str) -> &'m Matrix {
    &model
        .params()
        .iter()
        .find(|p| p.name == name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .value
}

fn layer_norm_rows(x: &[Vec<f64>], gain: &Matrix, bias: &Matrix, eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + eps).sqrt() * gain.get(0, c) + bias.get(0, c))
                .collect()
        })
        .collect()
}

fn affine_rows(x: &[Vec<f64>], w: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|c| {
                    let mut acc = b.get(0, c);
                    for (r, xv) in row.iter().enumerate() {
                        acc += xv * w.get(r, c);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

/// Independent scalar-loop forward pass for standard and temporal models;
/// one `n x D` matrix per transformer layer.
pub fn reference_encode(model: &Model, seq: &TimedSequence) -> Vec<Matrix> {
    let cfg = model.config();
    assert!(!cfg.mode.is_scaled(), "scaled modes are not covered");
    let n = seq.len();
    let tok = param(model, "token_embeddings");
    let pos = param(model, "position_embeddings");
    let summed: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..cfg.hidden).map(|c| tok.get(seq.token_ids[i], c) + pos.get(i, c)).collect())
        .collect();
    let mut x = layer_norm_rows(
        &summed,
        param(model, "embedding_ln.gain"),
        param(model, "embedding_ln.bias"),
        cfg.ln_eps,
    );
    let time_rows: Option<Vec<Vec<f64>>> = cfg.mode.is_temporal().then(|| {
        let table = param(model, "time_embeddings");
        seq.time_ids.iter().map(|&t| table.row(t).to_vec()).collect()
    });
    let mut out = Vec::new();
    for l in 0..cfg.layers {
        let mut concat = vec![Vec::new(); n];
        for h in 0..cfg.heads {
            let p = |s: &str| param(model, &format!("layer{l}.head{h}.{s}"));
            let q = to_matrix(&affine_rows(&x, p("w_q"), p("b_q")));
            let k = to_matrix(&affine_rows(&x, p("w_k"), p("b_k")));
            let v = to_matrix(&affine_rows(&x, p("w_v"), p("b_v")));
            let (y, _) = match &time_rows {
                Some(xt) => {
                    let zero = Matrix::zeros(1, cfg.head_dim);
                    let t = to_matrix(&affine_rows(xt, p("w_t"), &zero));
                    scalar_temporal(&q, &k, &v, &t)
                }
                None => scalar_standard(&q, &k, &v),
            };
            for (i, row) in concat.iter_mut().enumerate() {
                row.extend_from_slice(y.row(i));
            }
        }
        let p = |s: &str| param(model, &format!("layer{l}.{s}"));
        let attn = affine_rows(&concat, p("w_o"), p("b_o"));
        let res1: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
        let x1 = layer_norm_rows(&res1, p("ln1.gain"), p("ln1.bias"), cfg.ln_eps);
        let hidden: Vec<Vec<f64>> = affine_rows(&x1, p("ff.w1"), p("ff.b1"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let ff = affine_rows(&hidden, p("ff.w2"), p("ff.b2"));
        let res2: Vec<Vec<f64>> = x1
            .iter()
            .zip(&ff)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
        x = layer_norm_rows(&res2, p("ln2.gain"), p("ln2.bias"), cfg.ln_eps);
        out.push(to_matrix(&x));
    }
    out
}

fn masked_example(cfg: &ModelConfig) -> MaskedSequence {
    let prepend = cfg.mode.prepends_time_token();
    let mut tokens = vec![5, 9, 2, 7];
    let mut times = vec![3, 4, 2, 3];
    if prepend {
        tokens.insert(0, 3);
        times.insert(0, 3);
    }
    let off = usize::from(prepend);
    MaskedSequence {
        input: TimedSequence::new(tokens, times).unwrap(),
        labels: vec![(off, 5), (2 + off, 11), (3 + off, 7)],
    }
}

/// Largest relative error over every parameter of a one-layer model
/// (D=8, H=2) on a masked 4-token sequence.
pub fn model_gradient_error(mode: AttentionMode) -> f64 {
    let tv = TimeVocab::new(vec!["a".into(), "b".into()], vec![3, 5]).unwrap();
    let mut cfg = ModelConfig::new(1, 8, 2, 12, &tv, mode);
    cfg.max_len = 6;
    cfg.seed = 11;
    cfg.init_std = 0.5;
    let mut model = Model::build(cfg.clone()).unwrap();
    let ex = masked_example(&cfg);

    let loss_of = |m: &Model| {
        let mut tape = GradTape::new();
        let l = m.record_mlm_loss(&mut tape, &ex).unwrap().unwrap();
        tape.value(l).as_scalar().unwrap()
    };
    let grads: Vec<Matrix> = {
        let mut tape = GradTape::new();
        let l = model.record_mlm_loss(&mut tape, &ex).unwrap().unwrap();
        let g = tape.backward(l).unwrap();
        (0..model.params().len())
            .map(|k| {
                let p = &model.params()[k].value;
                g.param(k).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
            })
            .collect()
    };
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let orig = model.params()[k].value.data()[e];
            let set = |m: &mut Model, v: f64| {
                m.param_values_mut().nth(k).unwrap().data_mut()[e] = v;
            };
            set(&mut model, orig + FD_STEP);
            let up = loss_of(&model);
            set(&mut model, orig - FD_STEP);
            let down = loss_of(&model);
            set(&mut model, orig);
            let err = rel_err(g.data()[e], (up - down) / (2.0 * FD_STEP));
            worst = worst.max(err);
        }
    }
    worst
}
