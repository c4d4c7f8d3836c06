#![allow(dead_code)]

use ebmmoe::nets::{EnergyNet, Layer, MlpParams};
use ebmmoe::prior::{EbmPrior, ReferenceDistribution, ReferenceKind};
use ebmmoe::rng::{normal_vec, seeded};
use ebmmoe::tensor::{Activation, Tape, Tensor, Var};
use ebmmoe::Result;

pub fn gaussian_prior(dim: usize, energy: EnergyNet) -> EbmPrior {
    EbmPrior::new(energy, ReferenceDistribution::new(ReferenceKind::StandardGaussian, dim)).unwrap()
}

pub fn random_tensor(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor {
    let v = normal_vec(&mut seeded(seed), rows * cols);
    Tensor::matrix(rows, cols, v.into_iter().map(|x| scale * x).collect()).unwrap()
}

/// A random MLP with the given extents and weights of scale `scale`.
pub fn random_mlp(extents: &[usize], hidden: Activation, scale: f64, seed: u64) -> MlpParams {
    let layers = extents
        .windows(2)
        .enumerate()
        .map(|(i, w)| Layer {
            weight: random_tensor(w[1], w[0], scale, seed * 31 + 2 * i as u64),
            bias: {
                let t = random_tensor(1, w[1], scale, seed * 31 + 2 * i as u64 + 1);
                Tensor::new(vec![w[1]], t.into_values()).unwrap()
            },
        })
        .collect();
    MlpParams::from_layers(layers, hidden, Activation::Identity).unwrap()
}

/// Weighted sum `Σ w ⊙ y` with fixed weights, so every output entry
/// contributes a distinct amount to the scalar.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let [r, c] = tape.shape(y);
    let w = random_tensor(r, c, 1.0, seed);
    let wv = tape.constant(r, c, w.into_values())?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

/// Worst relative error between the tape's parameter gradients of
/// `Σ w ⊙ mlp(x)` and central differences on every parameter.
pub fn mlp_param_fd(mlp: &MlpParams, x: &Tensor, h: f64, seed: u64) -> f64 {
    let value = |m: &MlpParams| -> f64 {
        let mut t = Tape::new();
        let b = m.bind(&mut t, false);
        let xv = t.leaf(x, false);
        let y = m.forward(&mut t, &b, xv).unwrap();
        let s = weighted_sum(&mut t, y, seed).unwrap();
        t.scalar(s)
    };
    let mut t = Tape::new();
    let b = mlp.bind(&mut t, true);
    let xv = t.leaf(x, false);
    let y = mlp.forward(&mut t, &b, xv).unwrap();
    let s = weighted_sum(&mut t, y, seed).unwrap();
    let analytic = mlp.gradients(&b, &t.backward(s).unwrap());
    let mut worst: f64 = 0.0;
    let n_params = mlp.params().len();
    for p in 0..n_params {
        for k in 0..mlp.params()[p].len() {
            let mut plus = mlp.clone();
            plus.params_mut()[p].values_mut()[k] += h;
            let mut minus = mlp.clone();
            minus.params_mut()[p].values_mut()[k] -= h;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let a = analytic[p][k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    worst
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += (if i % 2 == 1 { 4.0 } else { 2.0 }) * f(x);
    }
    s * h / 3.0
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}
