//! Central finite-difference oracle for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative error with an absolute floor so that near-zero gradients are
/// judged on the finite-difference noise scale.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Build `f` on fresh random leaves of the given shapes, reduce its output
/// with fixed random weights and compare every input gradient against
/// central differences.
pub(crate) fn check_gradients<F>(shapes: &[&[usize]], tol: f64, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))
        .collect();

    let eval = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tensor<f64>, Graph<f64>, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vars).expect("forward");
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                Tensor::from_fn(g.shape(y), |_| r.random_range(-1.0..1.0))
            }
        };
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv).expect("weights match output");
        let loss = g.sum(prod);
        (g.item(loss), w, g, vec![loss])
    };

    let (_, weights, mut g, loss) = eval(&inputs, None);
    g.backward(loss[0]).expect("backward");
    let analytic: Vec<Vec<f64>> = (0..inputs.len())
        .map(|i| {
            g.grad(Var(i))
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].numel()])
        })
        .collect();

    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let h = 1e-5 * x0.abs().max(1.0);
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] = x0 + h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] = x0 - h;
            let fp = eval(&plus, Some(&weights)).0;
            let fm = eval(&minus, Some(&weights)).0;
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic[i][j], numeric);
            assert!(
                err < tol,
                "input {i} element {j}: analytic {} numeric {numeric} rel err {err}",
                analytic[i][j]
            );
        }
    }
}
