//! Finite-difference verification of every differentiable graph operation
//! on randomized small inputs (64-bit). Each op is wrapped into a scalar
//! loss through a fixed random weighting so the check exercises the true
//! backward path.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nameinv_core::gradcheck::{finite_difference_check, LossProbe};
use nameinv_core::graph::{Graph, NodeId, RowSource};
use nameinv_core::tensor::Tensor;
use nameinv_core::Result;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Builds `loss = sum(weights .* op(params, extras...))`; the probe rebuilds
/// the graph for every evaluation so finite differences see the whole path.
struct OpProbe<B>
where
    B: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId> + Sync,
{
    build_op: B,
    weights: Tensor<f64>,
}

impl<B> OpProbe<B>
where
    B: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId> + Sync,
{
    fn graph(&self, params: &Tensor<f64>) -> Result<(Graph<f64>, NodeId, NodeId)> {
        let mut g = Graph::new();
        let p = g.param(params.clone());
        let y = (self.build_op)(&mut g, p)?;
        let loss = if g.output(y).is_scalar() {
            y
        } else {
            let w = g.constant(self.weights.clone());
            let weighted = g.mul(y, w)?;
            g.sum(weighted)?
        };
        Ok((g, loss, p))
    }
}

impl<B> LossProbe<f64> for OpProbe<B>
where
    B: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId> + Sync,
{
    fn value(&self, params: &Tensor<f64>) -> Result<f64> {
        let (g, loss, _) = self.graph(params)?;
        Ok(g.output(loss).scalar_value())
    }
    fn gradient(&self, params: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (mut g, loss, p) = self.graph(params)?;
        Ok(g.gradients(loss, &[p])?.remove(0))
    }
}

fn check_op<B>(params: Tensor<f64>, out_shape: &[usize], seed: u64, build_op: B)
where
    B: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = OpProbe {
        build_op,
        weights: random_tensor(out_shape, &mut rng),
    };
    let err = finite_difference_check(&probe, &params, STEP).unwrap();
    assert!(err < TOL, "max relative error {err:.3e} exceeds {TOL:.0e}");
}

#[test]
fn matmul_wrt_left() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random_tensor(&[4, 3], &mut rng);
    check_op(random_tensor(&[2, 4], &mut rng), &[2, 3], 101, move |g, p| {
        let bn = g.constant(b.clone());
        g.matmul(p, bn)
    });
}

#[test]
fn matmul_wrt_right() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&[3, 4], &mut rng);
    check_op(random_tensor(&[4, 2], &mut rng), &[3, 2], 102, move |g, p| {
        let an = g.constant(a.clone());
        g.matmul(an, p)
    });
}

#[test]
fn transpose_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check_op(random_tensor(&[3, 5], &mut rng), &[5, 3], 103, |g, p| {
        g.transpose(p)
    });
}

#[test]
fn add_and_mul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let other = random_tensor(&[3, 3], &mut rng);
    let o2 = other.clone();
    check_op(random_tensor(&[3, 3], &mut rng), &[3, 3], 104, move |g, p| {
        let c = g.constant(other.clone());
        g.add(p, c)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check_op(random_tensor(&[3, 3], &mut rng), &[3, 3], 105, move |g, p| {
        let c = g.constant(o2.clone());
        g.mul(p, c)
    });
}

#[test]
fn add_row_wrt_matrix_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bias = random_tensor(&[4], &mut rng);
    check_op(random_tensor(&[3, 4], &mut rng), &[3, 4], 106, move |g, p| {
        let b = g.constant(bias.clone());
        g.add_row(p, b)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mat = random_tensor(&[3, 4], &mut rng);
    check_op(random_tensor(&[4], &mut rng), &[3, 4], 107, move |g, p| {
        let m = g.constant(mat.clone());
        g.add_row(m, p)
    });
}

#[test]
fn scale_and_sum_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    check_op(random_tensor(&[2, 5], &mut rng), &[2, 5], 108, |g, p| {
        g.scale(p, -1.75)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    check_op(random_tensor(&[4, 2], &mut rng), &[], 109, |g, p| g.sum(p));
}

#[test]
fn layer_norm_wrt_input_gain_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gain = random_tensor(&[6], &mut rng).map(|v| v + 1.5);
    let bias = random_tensor(&[6], &mut rng);
    let (g2, b2) = (gain.clone(), bias.clone());
    check_op(random_tensor(&[3, 6], &mut rng), &[3, 6], 110, move |g, p| {
        let gn = g.constant(gain.clone());
        let bn = g.constant(bias.clone());
        g.layer_norm(p, gn, bn, 1e-5)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&[3, 6], &mut rng);
    let x2 = x.clone();
    let b3 = b2.clone();
    check_op(g2.clone(), &[3, 6], 111, move |g, p| {
        let xn = g.constant(x.clone());
        let bn = g.constant(b3.clone());
        g.layer_norm(xn, p, bn, 1e-5)
    });
    check_op(b2, &[3, 6], 112, move |g, p| {
        let xn = g.constant(x2.clone());
        let gn = g.constant(g2.clone());
        g.layer_norm(xn, gn, p, 1e-5)
    });
}

#[test]
fn gelu_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    check_op(random_tensor(&[4, 4], &mut rng), &[4, 4], 113, |g, p| {
        g.gelu(p)
    });
}

#[test]
fn masked_softmax_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mask = Arc::new(vec![
        true, false, true, true, //
        true, true, false, true, //
        true, true, true, false,
    ]);
    check_op(
        random_tensor(&[3, 4], &mut rng).map(|v| v * 3.0),
        &[3, 4],
        114,
        move |g, p| g.masked_softmax(p, Some(Arc::clone(&mask))),
    );
}

#[test]
fn row_select_slice_concat_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    check_op(random_tensor(&[4, 5], &mut rng), &[1, 5], 115, |g, p| {
        g.row_select(p, 2)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    check_op(random_tensor(&[3, 6], &mut rng), &[3, 2], 116, |g, p| {
        g.slice_cols(p, 2, 2)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    check_op(random_tensor(&[3, 4], &mut rng), &[3, 8], 117, |g, p| {
        let a = g.slice_cols(p, 0, 2)?;
        let b = g.slice_cols(p, 1, 3)?;
        let c = g.slice_cols(p, 1, 3)?;
        g.concat_cols(&[a, b, c])
    });
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    check_op(random_tensor(&[2, 4], &mut rng), &[2, 4], 118, |g, p| {
        let r0 = g.row_select(p, 0)?;
        let r1 = g.row_select(p, 1)?;
        g.stack_rows(&[r1, r0]).and_then(|s| {
            // reuse rows so multi-consumer accumulation is exercised
            let t = g.transpose(s)?;
            g.transpose(t)
        })
    });
}

#[test]
fn l2_normalize_rows_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    check_op(
        random_tensor(&[3, 5], &mut rng).map(|v| v + 2.0),
        &[3, 5],
        119,
        |g, p| g.l2_normalize_rows(p),
    );
}

#[test]
fn embed_sequence_wrt_class_and_context_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let pretrained = Arc::new(random_tensor(&[6, 4], &mut rng));
    let positional = Arc::new(random_tensor(&[5, 4], &mut rng));
    let rows = vec![
        RowSource::Pretrained(0),
        RowSource::Learnable(1),
        RowSource::Context(0),
        RowSource::Learnable(1), // reused row: gradients must accumulate
        RowSource::Pretrained(3),
    ];
    let ctx = random_tensor(&[2, 4], &mut rng);
    let (p2, q2, r2, c2) = (
        Arc::clone(&pretrained),
        Arc::clone(&positional),
        rows.clone(),
        ctx.clone(),
    );
    check_op(random_tensor(&[3, 4], &mut rng), &[5, 4], 120, move |g, p| {
        let c = g.constant(ctx.clone());
        g.embed_sequence(
            p,
            Some(c),
            Arc::clone(&pretrained),
            Arc::clone(&positional),
            &rows,
        )
    });
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let el = random_tensor(&[3, 4], &mut rng);
    check_op(c2, &[5, 4], 121, move |g, p| {
        let e = g.constant(el.clone());
        g.embed_sequence(e, Some(p), Arc::clone(&p2), Arc::clone(&q2), &r2)
    });
}

#[test]
fn softmax_cross_entropy_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    check_op(
        random_tensor(&[4, 5], &mut rng).map(|v| v * 4.0),
        &[],
        122,
        |g, p| g.softmax_cross_entropy(p, &[1, 0, 4, 2]),
    );
}

#[test]
fn sigmoid_bce_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let targets = Arc::new(
        Tensor::from_vec(&[3, 4], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
            .unwrap(),
    );
    check_op(
        random_tensor(&[3, 4], &mut rng).map(|v| v * 2.0 + 0.1),
        &[],
        123,
        move |g, p| g.sigmoid_bce(p, Arc::clone(&targets)),
    );
}

#[test]
fn cosine_logits_chain() {
    // Logit scale 10 keeps the softmax unsaturated; at much larger scales
    // some gradient components fall between the 1e-12 floor and what central
    // differences can resolve in f64, and the comparison stops being
    // meaningful.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let img = random_tensor(&[3, 6], &mut rng);
    check_op(
        random_tensor(&[4, 6], &mut rng).map(|v| v + 0.5),
        &[],
        124,
        move |g, p| {
            nameinv_core::head::classification_loss_graph(g, &img, p, &[0, 2, 3], 10.0)
        },
    );
}
