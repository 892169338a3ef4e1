//! The numeric core in isolation: build a define-then-run graph, train it
//! with reverse-mode gradients and Adam, and cross-check the analytic
//! gradients against central finite differences.
//!
//! A two-layer tanh network fits `sin(x)` on `[-pi, pi]`.
//!
//! Run with: `cargo run --example autodiff`

use avan::nn;
use avan::tensorcore::{check_gradients, Adam, AdamConfig, Graph, Mode, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const N: usize = 64;
const HIDDEN: usize = 16;

fn main() -> avan::Result<()> {
    // Parameters live in a named store; the graph references them by name
    // and reads shapes from it.
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut params: ParamStore<f64> = ParamStore::new();
    nn::init_dense(&mut params, &mut rng, "fc1", HIDDEN, 1, true);
    nn::init_dense(&mut params, &mut rng, "fc2", 1, HIDDEN, true);

    // One graph, reused for every step: x -> dense -> tanh -> dense -> MSE.
    let mut g: Graph<f64> = Graph::new();
    let x = g.input("x", &[N, 1])?;
    let y = g.input("y", &[N, 1])?;
    let h = nn::dense_from_store(&mut g, &params, x, "fc1")?;
    let h = g.tanh(h);
    let yhat = nn::dense_from_store(&mut g, &params, h, "fc2")?;
    let loss = g.squared_error(yhat, y)?;

    // Fixed training batch: 64 points spread over one period.
    let xs: Vec<f64> = (0..N)
        .map(|i| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / (N - 1) as f64)
        .collect();
    let ys: Vec<f64> = xs.iter().map(|v| v.sin()).collect();
    let x_t = Tensor::new(&[N, 1], xs)?;
    let y_t = Tensor::new(&[N, 1], ys)?;
    let inputs = [("x", &x_t), ("y", &y_t)];

    // Before training: verify every parameter entry's analytic gradient.
    // The probe step can be generous because the checker extrapolates away
    // the O(h^2) truncation term; a wider step keeps roundoff noise out of
    // near-zero gradients.
    let report = check_gradients(&g, &params, &inputs, Mode::Eval, loss, 1e-3)?;
    println!(
        "gradient check: {} entries, max relative error {:.2e}",
        report.checked, report.max_rel_err
    );
    if let Some((name, idx, a, n)) = &report.worst {
        println!("worst entry: {name}[{idx}], analytic {a:.3e}, numeric {n:.3e}");
    }
    assert!(report.max_rel_err < 1e-4);

    let mut opt = Adam::new(AdamConfig { lr: 3e-2, ..AdamConfig::default() });
    for step in 0..=2000 {
        let eval = g.evaluate(&params, &inputs, Mode::Train)?;
        if step % 400 == 0 {
            // squared_error sums over the batch; report the per-point mean.
            println!("step {step:4}: mse {:.6}", eval.scalar(loss) / N as f64);
        }
        let grads = g.gradients(&eval, &params, loss)?;
        opt.step(&mut params, &grads)?;
    }

    let eval = g.evaluate(&params, &inputs, Mode::Eval)?;
    let fit = eval.value(yhat);
    println!("\n    x        sin(x)     fit");
    for i in (0..N).step_by(9) {
        let xv = x_t.data()[i];
        println!("{xv:8.3} {:9.4} {:9.4}", xv.sin(), fit[i]);
    }
    Ok(())
}
