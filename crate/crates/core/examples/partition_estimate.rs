//! Monte-Carlo `log Z` for a linear energy under the Laplace reference,
//! compared with the closed form `-ln(1 - w²)`.
//!
//! Usage: `partition_estimate [w] [samples]`

use ebmmoe::nets::EnergyNet;
use ebmmoe::prior::{estimate_log_partition, EbmPrior, ReferenceDistribution, ReferenceKind};
use ebmmoe::rng::seeded;

fn main() -> ebmmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let w: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1_000_000);
    let mut prior = EbmPrior::new(
        EnergyNet::linear(vec![w], 0.0),
        ReferenceDistribution::new(ReferenceKind::StandardLaplace, 1),
    )?;
    let estimate = estimate_log_partition(&mut prior, n, &mut seeded(0))?;
    println!("estimate {estimate:.5}  exact {:.5}", -(1.0 - w * w).ln());
    Ok(())
}
