//! Evaluates a two-expert mixture posterior on a grid and checks that the
//! density integrates to one.

use ebmmoe::moe::{mixture_log_density, PosteriorBundle};
use ebmmoe::tensor::Tensor;

fn main() -> ebmmoe::Result<()> {
    let experts = vec![
        (Tensor::matrix(1, 1, vec![-1.5])?, Tensor::matrix(1, 1, vec![-1.0])?),
        (Tensor::matrix(1, 1, vec![2.0])?, Tensor::matrix(1, 1, vec![0.5])?),
    ];
    let bundle = PosteriorBundle::new(experts)?;
    let h = 1e-3;
    let grid: Vec<f64> = (0..=20_000).map(|i| -10.0 + i as f64 * h).collect();
    let z = Tensor::matrix(grid.len(), 1, grid.clone())?;
    let log_q = mixture_log_density(&bundle, &z)?;
    let mass: f64 = log_q.iter().map(|l| l.exp() * h).sum();
    println!("mass on [-10, 10]: {mass:.6}");
    for x in [-1.5, 0.0, 2.0] {
        let q = mixture_log_density(&bundle, &Tensor::matrix(1, 1, vec![x])?)?[0];
        println!("log q({x:+.1}) = {q:.4}");
    }
    Ok(())
}
