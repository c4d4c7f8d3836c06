//! Modality-specific latents on the bitmap dataset: trains the extended
//! model with and without the energy term and prints both score sets.
//!
//! Usage: `extension_bitmap [iterations] [seed] [w_dim]`

use std::time::Instant;

use ebmmoe::cli::{evaluate_model, train_model};
use ebmmoe::config::RunConfig;
use ebmmoe::data::{generate, DatasetFamily};
use ebmmoe::eval::train_classifiers;

fn main() -> ebmmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let w_dim = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);

    let mut cfg = RunConfig::default();
    cfg.data.family = DatasetFamily::BitmapDigits;
    cfg.data.classes = 5;
    cfg.data.seed = seed;
    cfg.arch.w_dim = w_dim;
    cfg.train.extension_enabled = true;
    cfg.train.iterations = iterations;
    cfg.train.seed = seed;
    cfg.eval.seed = seed;

    let (train, test) = generate(&cfg.data)?;
    let classifiers = train_classifiers(&train, &test, &cfg.eval.classifier)?;
    for c in &classifiers.per_modality {
        println!("classifier held-out accuracy {:.3}", c.heldout_accuracy);
    }
    for freeze in [false, true] {
        let mut run = cfg.clone();
        run.train.freeze_energy = freeze;
        let started = Instant::now();
        let (model, records) = train_model(&run, &train)?;
        let s = evaluate_model(&run, &model, &classifiers, &test)?;
        println!(
            "{:<9} joint {:.3} cross {:.3} elbo {:.2} final objective {:.2} ({:.0}s)",
            if freeze { "baseline" } else { "ebm" },
            s.joint,
            s.cross,
            s.normalized_elbo,
            records.last().map_or(f64::NAN, |r| r.elbo),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
