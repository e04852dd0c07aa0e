//! Finite-difference checks of every differentiable operation and of the
//! full transformer training loss (64-bit).

mod common;

use common::{central_diff, rel_err, random_vec, rng};
use ctxmt::autodiff::{Graph, Tensor, Var};
use ctxmt::model::{ModelConfig, PaddedBatch, TransformerModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const POINTS: u64 = 20;

/// Evaluates `sum(weights * build(inputs))` and, when `with_grad`, the
/// gradient of that scalar with respect to every input.
fn eval<F>(inputs: &[(Vec<usize>, Vec<f64>)], weights: Option<&[f64]>, build: &F, with_grad: bool) -> (f64, Vec<Vec<f64>>, usize)
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Var,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| g.leaf(Tensor::new(s.clone(), d.clone()).unwrap(), true))
        .collect();
    let out = build(&mut g, &vars);
    let n = g.value(out).numel();
    let shape = g.shape(out).to_vec();
    let loss = match weights {
        Some(w) => {
            let wv = g.constant(Tensor::new(shape, w.to_vec()).unwrap());
            let prod = g.mul(out, wv).unwrap();
            g.sum(prod)
        }
        None => g.sum(out),
    };
    let value = g.value(loss).item();
    let mut grads = Vec::new();
    if with_grad {
        g.backward(loss).unwrap();
        for v in &vars {
            grads.push(g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).numel()]));
        }
    }
    (value, grads, n)
}

/// Worst relative error over `POINTS` random points.
fn check<F>(name: &str, shapes: &[&[usize]], build: F, tol: f64) -> f64
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Var,
{
    let mut worst: f64 = 0.0;
    for seed in 0..POINTS {
        let mut r = rng(1000 + seed);
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
            .iter()
            .map(|s| (s.to_vec(), random_vec(&mut r, s.iter().product(), 1.0)))
            .collect();
        let (_, _, n) = eval(&inputs, None, &build, false);
        let weights = random_vec(&mut r, n, 1.0);
        let (_, grads, _) = eval(&inputs, Some(&weights), &build, true);
        for (i, analytic) in grads.iter().enumerate() {
            let numeric = central_diff(
                |x| {
                    let mut probe = inputs.clone();
                    probe[i].1 = x.to_vec();
                    eval(&probe, Some(&weights), &build, false).0
                },
                &inputs[i].1,
                H,
            );
            worst = worst.max(rel_err(analytic, &numeric));
        }
    }
    assert!(worst < tol, "{name}: relative error {worst:e} >= {tol:e}");
    worst
}

#[test]
fn matmul_gradients() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap(), 1e-6);
    check("matmul_nt", &[&[3, 4], &[5, 4]], |g, v| g.matmul_nt(v[0], v[1]).unwrap(), 1e-6);
    check("batch_matmul", &[&[2, 3, 4], &[2, 4, 2]], |g, v| g.batch_matmul(v[0], v[1], false).unwrap(), 1e-6);
    check("batch_matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.batch_matmul(v[0], v[1], true).unwrap(), 1e-6);
}

#[test]
fn sum_of_matmul_wrt_a() {
    // d sum(A B) / dA = 1 B^T, checked against finite differences.
    check(
        "sum(matmul)",
        &[&[4, 3], &[3, 5]],
        |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum(c)
        },
        1e-6,
    );
}

#[test]
fn elementwise_gradients() {
    check("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]).unwrap(), 1e-6);
    check("add_row", &[&[4, 3], &[3]], |g, v| g.add_row(v[0], v[1]).unwrap(), 1e-6);
    check("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]).unwrap(), 1e-6);
    check("mul_self", &[&[5]], |g, v| g.mul(v[0], v[0]).unwrap(), 1e-6);
    check("scale", &[&[5]], |g, v| g.scale(v[0], -2.5), 1e-6);
    check("relu", &[&[6, 4]], |g, v| g.relu(v[0]), 1e-6);
    check("sum", &[&[3, 2]], |g, v| g.sum(v[0]), 1e-6);
    check("mean", &[&[3, 2]], |g, v| g.mean(v[0]), 1e-6);
    check("reshape", &[&[3, 2]], |g, v| g.reshape(v[0], &[6]).unwrap(), 1e-6);
}

#[test]
fn softmax_gradients() {
    check("softmax_last", &[&[3, 5]], |g, v| g.softmax(v[0], 1).unwrap(), 1e-5);
    check("softmax_first", &[&[3, 5]], |g, v| g.softmax(v[0], 0).unwrap(), 1e-5);
    check("softmax_middle", &[&[2, 3, 4]], |g, v| g.softmax(v[0], 1).unwrap(), 1e-5);
    check("log_softmax", &[&[3, 5]], |g, v| g.log_softmax(v[0]), 1e-5);
}

#[test]
fn layer_norm_gradients() {
    check(
        "layer_norm",
        &[&[4, 6], &[6], &[6]],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        1e-5,
    );
}

#[test]
fn structural_gradients() {
    check("embedding", &[&[7, 3]], |g, v| g.embedding(v[0], &[3, 0, 3, 6]).unwrap(), 1e-6);
    check("split_heads", &[&[6, 4]], |g, v| g.split_heads(v[0], 2, 3, 2).unwrap(), 1e-6);
    check(
        "merge_heads",
        &[&[4, 3, 2]],
        |g, v| g.merge_heads(v[0], 2, 3, 2).unwrap(),
        1e-6,
    );
    let mut mask = Tensor::<f64>::zeros(&[2, 3, 3]);
    mask.data_mut()[2] = -1e9;
    mask.data_mut()[10] = -1e9;
    check(
        "masked_softmax",
        &[&[4, 3, 3]],
        move |g, v| {
            let s = g.add_mask(v[0], &mask, 2).unwrap();
            g.softmax(s, 2).unwrap()
        },
        1e-5,
    );
    check(
        "dropout",
        &[&[5, 4]],
        |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            g.dropout(v[0], 0.3, &mut r)
        },
        1e-6,
    );
}

#[test]
fn smoothed_ce_gradients() {
    check(
        "smoothed_ce",
        &[&[4, 5]],
        |g, v| g.smoothed_ce(v[0], &[Some(1), None, Some(4), Some(0)], 0.1).unwrap(),
        1e-5,
    );
    check("ce_unsmoothed", &[&[2, 3]], |g, v| g.smoothed_ce(v[0], &[Some(2), Some(0)], 0.0).unwrap(), 1e-5);
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 2,
        d_model: 8,
        ff_width: 12,
        heads: 2,
        vocab_size: 11,
        max_positions: 16,
        ..ModelConfig::default()
    }
    .without_dropout()
}

/// Training loss of the tiny model with parameter `group` replaced by `values`.
fn loss_with(model: &TransformerModel<f64>, batch: &PaddedBatch, group: usize, values: &[f64]) -> f64 {
    let mut m = model.clone();
    m.params_mut()[group].data_mut().copy_from_slice(values);
    let mut g = Graph::new();
    let vars = m.bind(&mut g);
    let loss = m.loss_graph(&mut g, &vars, batch, 0.1, None).unwrap();
    g.value(loss).item()
}

#[test]
fn transformer_loss_gradient_matches_finite_differences() {
    let model = TransformerModel::<f64>::new(tiny_config(), 5).unwrap();
    // Two target tokens per sentence, two sentences, one padded source.
    let src_a = [2u32, 7, 5, 4];
    let src_b = [2u32, 9, 4];
    let tgt_a = [2u32, 6, 8];
    let tgt_b = [2u32, 10, 4];
    let batch = PaddedBatch::from_pairs(&[(&src_a, &tgt_a), (&src_b, &tgt_b)]).unwrap();

    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let loss = model.loss_graph(&mut g, &vars, &batch, 0.1, None).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();
    drop(g);

    let mut worst: f64 = 0.0;
    let mut all_a = Vec::new();
    let mut all_n = Vec::new();
    for (i, name) in model.names().iter().enumerate() {
        let x = model.params()[i].data().to_vec();
        let numeric = central_diff(|v| loss_with(&model, &batch, i, v), &x, H);
        let scale = analytic[i].iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        if scale < 1e-8 {
            // Key biases shift every score of a query equally, so their true
            // gradient is zero and only rounding noise remains.
            continue;
        }
        let err = rel_err(&analytic[i], &numeric);
        assert!(err < 1e-3, "{name}: relative error {err:e}");
        worst = worst.max(err);
        all_a.extend_from_slice(&analytic[i]);
        all_n.extend(numeric);
    }
    assert!(rel_err(&all_a, &all_n) < 1e-3);
    assert!(worst < 1e-3);
}
