mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{gradient_error, model_gradient_error, project, random_matrix, FD_TOL};
use tempattn::attention::{record_attention, ScoreKind};
use tempattn::{AttentionMode, GradTape, Matrix};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks a unary or n-ary op through random projections of its output.
fn check<F>(name: &str, leaves: Vec<Matrix>, out_shape: (usize, usize), op: F)
where
    F: for<'a> Fn(&mut GradTape<'a>, &[tempattn::NodeId]) -> tempattn::Result<tempattn::NodeId>,
{
    let mut r = rng(99);
    let left = random_matrix(&mut r, 1, out_shape.0);
    let right = random_matrix(&mut r, out_shape.1, 1);
    let err = gradient_error(&leaves, |tape, ids| {
        let out = op(tape, ids)?;
        project(tape, out, &left, &right)
    });
    assert!(err < FD_TOL, "{name}: relative error {err:e}");
}

#[test]
fn matmul_family() {
    let mut r = rng(1);
    check("matmul", vec![random_matrix(&mut r, 3, 4), random_matrix(&mut r, 4, 2)], (3, 2), |t, x| {
        t.matmul(x[0], x[1])
    });
    check("matmul_nt", vec![random_matrix(&mut r, 3, 4), random_matrix(&mut r, 5, 4)], (3, 5), |t, x| {
        t.matmul_nt(x[0], x[1])
    });
    check("transpose", vec![random_matrix(&mut r, 3, 2)], (2, 3), |t, x| Ok(t.transpose(x[0])));
    // same node on both sides
    check("gram", vec![random_matrix(&mut r, 4, 3)], (3, 3), |t, x| {
        let xt = t.transpose(x[0]);
        t.matmul(xt, x[0])
    });
}

#[test]
fn elementwise_ops() {
    let mut r = rng(2);
    check("add", vec![random_matrix(&mut r, 3, 3), random_matrix(&mut r, 3, 3)], (3, 3), |t, x| {
        t.add(x[0], x[1])
    });
    check("add_row", vec![random_matrix(&mut r, 3, 4), random_matrix(&mut r, 1, 4)], (3, 4), |t, x| {
        t.add_row(x[0], x[1])
    });
    check("scale", vec![random_matrix(&mut r, 2, 3)], (2, 3), |t, x| Ok(t.scale(x[0], -1.7)));
    check("scale_rows", vec![random_matrix(&mut r, 3, 4)], (3, 4), |t, x| {
        t.scale_rows(x[0], vec![0.5, 2.0, 3.0])
    });
    let s = Matrix::scalar(1.5);
    check("div_scalar", vec![random_matrix(&mut r, 3, 2), s], (3, 2), |t, x| t.div_scalar(x[0], x[1]));
    check("gelu", vec![random_matrix(&mut r, 3, 5).scale(3.0)], (3, 5), |t, x| Ok(t.gelu(x[0])));
}

#[test]
fn reductions_and_normalizers() {
    let mut r = rng(3);
    check("frobenius_norm", vec![random_matrix(&mut r, 3, 4)], (1, 1), |t, x| Ok(t.frobenius_norm(x[0])));
    check("softmax_rows", vec![random_matrix(&mut r, 3, 4).scale(4.0)], (3, 4), |t, x| {
        Ok(t.softmax_rows(x[0]))
    });
    let gain = Matrix::from_fn(1, 5, |_, c| 0.5 + 0.3 * c as f64);
    check(
        "layer_norm",
        vec![random_matrix(&mut r, 3, 5), gain, random_matrix(&mut r, 1, 5)],
        (3, 5),
        |t, x| t.layer_norm(x[0], x[1], x[2], 1e-12),
    );
    let logits = random_matrix(&mut r, 3, 6).scale(2.0);
    let err = gradient_error(&[logits], |t, x| {
        t.cross_entropy(x[0], vec![(0, 2), (1, 5), (2, 2), (0, 1)])
    });
    assert!(err < FD_TOL, "cross_entropy: {err:e}");
}

#[test]
fn indexing_ops() {
    let mut r = rng(4);
    check("gather", vec![random_matrix(&mut r, 5, 3)], (4, 3), |t, x| t.gather(x[0], vec![4, 0, 4, 2]));
    check("slice_cols", vec![random_matrix(&mut r, 3, 6)], (3, 2), |t, x| t.slice_cols(x[0], 3, 2));
    check(
        "concat_cols",
        vec![random_matrix(&mut r, 3, 2), random_matrix(&mut r, 3, 3)],
        (3, 7),
        |t, x| t.concat_cols(vec![x[1], x[0], x[0]]),
    );
}

#[test]
fn attention_heads() {
    let mut r = rng(5);
    let (n, dk) = (4, 3);
    let qkv = |r: &mut ChaCha8Rng| {
        vec![
            random_matrix(r, n, dk),
            random_matrix(r, n, dk),
            random_matrix(r, n, 2),
            random_matrix(r, n, dk),
        ]
    };
    check("standard head", qkv(&mut r)[..3].to_vec(), (n, 2), |t, x| {
        Ok(record_attention(t, x[0], x[1], x[2], &ScoreKind::Standard)?.0)
    });
    check("temporal head", qkv(&mut r), (n, 2), |t, x| {
        Ok(record_attention(t, x[0], x[1], x[2], &ScoreKind::Temporal(x[3]))?.0)
    });
    check("temporal weights", qkv(&mut r), (n, n), |t, x| {
        Ok(record_attention(t, x[0], x[1], x[2], &ScoreKind::Temporal(x[3]))?.1)
    });
    check("scaled head", qkv(&mut r)[..3].to_vec(), (n, 2), |t, x| {
        let s = ScoreKind::Scaled(vec![1.0, 2.0, 0.5, 4.0]);
        Ok(record_attention(t, x[0], x[1], x[2], &s)?.0)
    });
}

#[test]
fn whole_model_gradients_every_mode() {
    for mode in AttentionMode::ALL {
        let err = model_gradient_error(mode);
        assert!(err < FD_TOL, "{mode}: {err:e}");
    }
}
