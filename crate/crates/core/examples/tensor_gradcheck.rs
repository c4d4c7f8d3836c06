//! Finite-difference check of the tape gradient for a small tanh MLP.
//!
//! Usage: `tensor_gradcheck [seed]`

use ebmmoe::nets::{MlpParams, MlpSpec};
use ebmmoe::rng::{normal_vec, seeded};
use ebmmoe::tensor::{finite_difference_check, Activation, Tensor};

fn main() -> ebmmoe::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = seeded(seed);
    let spec = MlpSpec {
        extents: vec![3, 8, 8, 2],
        hidden_activation: Activation::Tanh,
        output_activation: Activation::Identity,
    };
    let mlp = MlpParams::init(&spec, &mut rng)?;
    let x = Tensor::matrix(4, 3, normal_vec(&mut rng, 12))?;
    let worst = finite_difference_check(
        |tape, x| {
            let b = mlp.bind(tape, false);
            let y = mlp.forward(tape, &b, x)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        },
        &x,
        1e-5,
    )?;
    println!("max relative error of input gradients: {worst:.3e}");
    Ok(())
}
