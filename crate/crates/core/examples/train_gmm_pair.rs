//! Trains the EBM-prior model and the frozen-energy baseline on the paired
//! Gaussian-mixture toy data and compares their coherence scores.
//!
//! Usage: `cargo run --release --example train_gmm_pair -- [iterations] [seed]`

use std::time::Instant;

use ebmmoe::data::{generate_gmm_pair, DatasetSpec};
use ebmmoe::eval::{cross_coherence, joint_coherence, train_classifiers, ClassifierConfig, CrossOptions};
use ebmmoe::langevin::LangevinConfig;
use ebmmoe::nets::ArchSpec;
use ebmmoe::prior::ReferenceKind;
use ebmmoe::trainer::{train_loop, ModelBundle, TrainConfig};

fn main() -> ebmmoe::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let spec = DatasetSpec {
        seed,
        ..DatasetSpec::default()
    };
    let (train, test) = generate_gmm_pair(&spec)?;
    let classifiers = train_classifiers(&train, &test, &ClassifierConfig::default())?;
    for (i, c) in classifiers.per_modality.iter().enumerate() {
        println!("classifier {i}: held-out accuracy {:.3}", c.heldout_accuracy);
    }

    let arch = ArchSpec::default();
    let eval_chains = LangevinConfig {
        n_chains: 2000,
        seed: seed ^ 0xe7a1,
        ..LangevinConfig::default()
    };
    for freeze in [false, true] {
        let config = TrainConfig {
            iterations,
            seed,
            freeze_energy: freeze,
            ..TrainConfig::default()
        };
        let model = ModelBundle::init(&arch, &train.dims, ReferenceKind::StandardGaussian, false, seed)?;
        let started = Instant::now();
        let (model, metrics) = train_loop(model, &train, &config)?;
        let elapsed = started.elapsed().as_secs_f64();
        let joint = joint_coherence(&model, &classifiers.per_modality, &eval_chains)?;
        let cross = cross_coherence(&model, &classifiers.per_modality, &test, &CrossOptions::default())?;
        let tail: f64 = metrics.records.iter().rev().take(100).map(|r| r.elbo).sum::<f64>() / 100.0;
        println!(
            "{}: joint {:.3}  cross {:.3}  final elbo {:.3}  ({elapsed:.1}s)",
            if freeze { "baseline" } else { "ebm prior" },
            joint.score,
            cross.score,
            tail
        );
    }
    Ok(())
}
