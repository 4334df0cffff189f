//! Fit a two-layer regressor with the tape-based autodiff and verify its
//! gradients against finite differences.
//!
//! `cargo run -p scrapline --example autodiff_gradcheck`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scrapline::tensor::{grad_check, GradCheckOptions, Graph, Optimizer, OptimizerConfig, ParamTape, Tensor2D};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..32)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let target: Vec<f64> = rows.iter().map(|r| (2.0 * r[0] - r[1]).tanh()).collect();
    let x = Tensor2D::from_rows(&rows)?;

    let mut tape = ParamTape::new();
    let init = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        Tensor2D::new(r, c, (0..r * c).map(|_| rng.random_range(-0.5..0.5)).collect())
    };
    let w1 = tape.register("w1", init(2, 8, &mut rng)?)?;
    let b1 = tape.register("b1", Tensor2D::zeros(1, 8))?;
    let w2 = tape.register("w2", init(8, 1, &mut rng)?)?;
    let b2 = tape.register("b2", Tensor2D::zeros(1, 1))?;

    let forward = |g: &mut Graph, tape: &ParamTape| {
        let xi = g.input(x.clone())?;
        let (w1, b1, w2, b2) = (
            g.param(tape, w1)?,
            g.param(tape, b1)?,
            g.param(tape, w2)?,
            g.param(tape, b2)?,
        );
        let h = g.linear(xi, w1, b1)?;
        let h = g.tanh(h)?;
        let y = g.linear(h, w2, b2)?;
        g.mse(y, &target)
    };

    let report = grad_check(forward, &mut tape, &GradCheckOptions::default())?;
    println!(
        "grad check: {} coords, max rel error {:.2e} (tol {:.0e}) -> {}",
        report.coords_checked,
        report.max_rel_error,
        report.tolerance,
        if report.passed() { "ok" } else { "FAIL" }
    );

    let mut opt = Optimizer::new(OptimizerConfig::adam(0.05))?;
    for step in 0..=200 {
        tape.zero_grad();
        let mut g = Graph::new();
        let loss = forward(&mut g, &tape)?;
        g.backward(loss, &mut tape)?;
        opt.step(&mut tape)?;
        if step % 50 == 0 {
            println!("step {step:>3}  mse {:.5}", g.scalar(loss));
        }
    }
    Ok(())
}
