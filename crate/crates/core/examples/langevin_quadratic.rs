//! Langevin chains on a quadratic tilt of the standard Gaussian, whose
//! target is `N(0, 1/(1+a))`. Prints the empirical variance as the chain
//! length grows.
//!
//! Usage: `langevin_quadratic [a] [step_size]`

use ebmmoe::langevin::{run_chains, LangevinConfig};
use ebmmoe::nets::EnergyNet;
use ebmmoe::prior::{EbmPrior, ReferenceDistribution, ReferenceKind};

fn main() -> ebmmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let a: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let s: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let prior = EbmPrior::new(
        EnergyNet::quadratic(1, a),
        ReferenceDistribution::new(ReferenceKind::StandardGaussian, 1),
    )?;
    println!("target variance {:.4}", 1.0 / (1.0 + a));
    for steps in [50, 200, 1000, 4000] {
        let cfg = LangevinConfig {
            steps,
            step_size: s,
            n_chains: 10_000,
            ..LangevinConfig::default()
        };
        let (z, _) = run_chains(&prior, &cfg)?;
        let v = z.values();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        println!("steps {steps:>5}  variance {var:.4}");
    }
    Ok(())
}
