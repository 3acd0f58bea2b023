//! Central finite-difference gradient oracle shared by integration tests.
#![allow(dead_code)]

use marvis::model::{Marvis, Mode, ModelConfig};
use marvis::objective::{composite_loss, LossWeights};
use marvis::tensor::{Graph, PoolKind, ShiftAxis, Tensor, Var};
use marvis::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with an absolute floor of 1e-5.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Smaller step for the whole network: thousands of ReLU and max-pool
/// kinks lie downstream of every parameter, and a step that carries an
/// activation across one corrupts the difference quotient.
fn network_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

pub type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Largest relative error between backprop and central differences for the
/// scalar `sum(w * f(inputs))` with fixed random `w`.
pub fn op_gradient_error(shapes: &[Vec<usize>], f: &OpFn) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))
        .collect();
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |inputs: &[Tensor<f64>], backward: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vars).expect("forward");
        let w = weights
            .get_or_insert_with(|| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                Tensor::from_fn(g.shape(y), |_| r.random_range(-1.0..1.0))
            })
            .clone();
        let wv = g.constant(w);
        let prod = g.mul(y, wv).expect("weights match output");
        let loss = g.sum(prod);
        let value = g.item(loss);
        if !backward {
            return (value, Vec::new());
        }
        g.backward(loss).expect("backward");
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(&inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let h = step(x0);
            let mut moved = inputs.clone();
            moved[i].data_mut()[j] = x0 + h;
            let fp = eval(&moved, false).0;
            moved[i].data_mut()[j] = x0 - h;
            let fm = eval(&moved, false).0;
            worst = worst.max(rel_err(analytic[i][j], (fp - fm) / (2.0 * h)));
        }
    }
    worst
}

fn s(dims: &[usize]) -> Vec<usize> {
    dims.to_vec()
}

/// Every differentiable graph operation with a small representative input.
pub fn op_suite() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let t12: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let t12b = t12.clone();
    let e12: Vec<f64> = (0..12).map(|i| if i % 4 == 1 { 0.1 * i as f64 } else { 0.0 }).collect();
    vec![
        ("add", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("mul_bcast", vec![s(&[2, 3, 4, 4]), s(&[2, 1, 4, 4])], Box::new(|g, v| g.mul_bcast(v[0], v[1]))),
        ("mul_bcast_channel", vec![s(&[2, 3, 4, 4]), s(&[2, 3, 1, 1])], Box::new(|g, v| g.mul_bcast(v[0], v[1]))),
        ("add_bias", vec![s(&[2, 3, 2, 2]), s(&[3])], Box::new(|g, v| g.add_bias(v[0], v[1], 1))),
        ("scale", vec![s(&[5])], Box::new(|g, v| Ok(g.scale(v[0], 1.7)))),
        ("sum", vec![s(&[2, 3])], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![s(&[2, 3])], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("gelu", vec![s(&[3, 4])], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("relu", vec![s(&[3, 4])], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("sigmoid", vec![s(&[3, 4])], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        (
            "conv2d",
            vec![s(&[2, 3, 5, 5]), s(&[4, 3, 3, 3]), s(&[4])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        (
            "conv2d_strided",
            vec![s(&[1, 2, 6, 6]), s(&[3, 2, 3, 3])],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, 2, 1)),
        ),
        (
            "conv2d_grouped",
            vec![s(&[1, 4, 4, 4]), s(&[6, 2, 3, 3]), s(&[6])],
            Box::new(|g, v| g.conv2d_grouped(v[0], v[1], Some(v[2]), 1, 1, 2)),
        ),
        (
            "depthwise_conv2d",
            vec![s(&[2, 3, 4, 4]), s(&[3, 1, 3, 3]), s(&[3])],
            Box::new(|g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        (
            "linear",
            vec![s(&[2, 5, 4]), s(&[3, 4]), s(&[3])],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "layer_norm",
            vec![s(&[2, 3, 6]), s(&[6]), s(&[6])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "batch_norm",
            vec![s(&[3, 2, 3, 3]), s(&[2]), s(&[2])],
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], None, true, 1e-5)?.0)),
        ),
        (
            "batch_norm_eval",
            vec![s(&[2, 2, 3, 3]), s(&[2]), s(&[2])],
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.5, 2.0])), false, 1e-5)?.0)),
        ),
        ("maxpool2", vec![s(&[2, 2, 4, 6])], Box::new(|g, v| g.maxpool2(v[0]))),
        ("upsample2", vec![s(&[1, 2, 3, 2])], Box::new(|g, v| g.upsample2(v[0]))),
        ("spatial_pool_mean", vec![s(&[2, 3, 3, 4])], Box::new(|g, v| g.spatial_pool(v[0], PoolKind::Mean))),
        ("spatial_pool_max", vec![s(&[2, 3, 3, 4])], Box::new(|g, v| g.spatial_pool(v[0], PoolKind::Max))),
        ("channel_pool_mean", vec![s(&[2, 3, 3, 4])], Box::new(|g, v| g.channel_pool(v[0], PoolKind::Mean))),
        ("channel_pool_max", vec![s(&[2, 3, 3, 4])], Box::new(|g, v| g.channel_pool(v[0], PoolKind::Max))),
        (
            "concat",
            vec![s(&[2, 1, 3, 3]), s(&[2, 2, 3, 3])],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "axial_shift_width",
            vec![s(&[1, 5, 4, 6])],
            Box::new(|g, v| g.axial_shift(v[0], ShiftAxis::Width, &[-2, -1, 0, 1, 2])),
        ),
        (
            "axial_shift_height",
            vec![s(&[2, 4, 5, 3])],
            Box::new(|g, v| g.axial_shift(v[0], ShiftAxis::Height, &[-2, -1, 0, 1])),
        ),
        ("to_tokens", vec![s(&[2, 3, 2, 4])], Box::new(|g, v| g.to_tokens(v[0]))),
        ("from_tokens", vec![s(&[2, 8, 3])], Box::new(|g, v| g.from_tokens(v[0], 2, 4))),
        (
            "bce",
            vec![s(&[1, 1, 3, 4])],
            Box::new(move |g, v| {
                let p = g.sigmoid(v[0]);
                g.bce(p, &t12, 1e-7)
            }),
        ),
        (
            "dice",
            vec![s(&[1, 1, 3, 4])],
            Box::new(move |g, v| {
                let p = g.sigmoid(v[0]);
                g.dice(p, &t12b, 1e-7)
            }),
        ),
        (
            "egc",
            vec![s(&[1, 1, 3, 4])],
            Box::new(move |g, v| {
                let p = g.sigmoid(v[0]);
                g.egc(p, &e12)
            }),
        ),
    ]
}

/// Small configuration for whole-network checks; every width admits the
/// default attention reduction.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        stage_channels: [4, 8, 8, 10, 10],
        seed: 5,
        ..ModelConfig::default()
    }
}

pub struct ModelGradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    /// Parameters whose relative error exceeds 1e-3.
    pub over: Vec<String>,
}

/// Compare every parameter gradient of the composite loss through the full
/// network (training mode, float64) with central differences.
pub fn model_gradient_check(cfg: ModelConfig, batch: usize, size: usize) -> ModelGradReport {
    let mut model = Marvis::<f64>::new(cfg).expect("config");
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let input = Tensor::from_fn(&[batch, 2, size, size], |_| rng.random_range(0.0..1.0));
    let n = batch * size * size;
    let target: Vec<f64> = (0..n).map(|i| ((i / size) % size >= size / 2) as u8 as f64).collect();
    let emap: Vec<f64> = (0..n)
        .map(|_| if rng.random_range(0.0..1.0) < 0.05 { rng.random_range(0.0..1.0) } else { 0.0 })
        .collect();
    let weights = LossWeights::default();

    let loss_of = |model: &Marvis<f64>| -> f64 {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fwd = model.forward(&mut g, x, Mode::Train).expect("forward");
        let terms = composite_loss(&mut g, fwd.output, &target, Some(&emap), &weights).expect("loss");
        g.item(terms.total)
    };

    let analytic = {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fwd = model.forward(&mut g, x, Mode::Train).expect("forward");
        let terms = composite_loss(&mut g, fwd.output, &target, Some(&emap), &weights).expect("loss");
        g.backward(terms.total).expect("backward");
        model.gradients(&g, &fwd)
    };

    let mut report = ModelGradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        over: Vec::new(),
    };
    for i in 0..model.params().len() {
        for j in 0..model.params()[i].1.numel() {
            let x0 = model.params()[i].1.data()[j];
            let h = network_step(x0);
            model.params_mut()[i].1.data_mut()[j] = x0 + h;
            let fp = loss_of(&model);
            model.params_mut()[i].1.data_mut()[j] = x0 - h;
            let fm = loss_of(&model);
            model.params_mut()[i].1.data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic[i][j], numeric);
            report.checked += 1;
            if err > 1e-3 {
                report.over.push(format!("{}[{j}] {err:.3e}", model.params()[i].0));
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!(
                    "{}[{j}]: analytic {} numeric {numeric}",
                    model.params()[i].0,
                    analytic[i][j]
                );
            }
        }
    }
    report
}
