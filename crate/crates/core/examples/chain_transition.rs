//! Trains a short gmm_pair model and records how classifier confidence on
//! generated samples changes along the prior's Langevin chain.
//!
//! Usage: `chain_transition [iterations]`

use ebmmoe::cli::{train_model, init_model};
use ebmmoe::config::RunConfig;
use ebmmoe::data::generate;
use ebmmoe::eval::{chain_transition_dump, mean_confidence, train_classifiers};

fn main() -> ebmmoe::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut cfg = RunConfig::default();
    cfg.train.iterations = iterations;
    let (train, test) = generate(&cfg.data)?;
    let classifiers = train_classifiers(&train, &test, &cfg.eval.classifier)?;
    let (trained, _) = train_model(&cfg, &train)?;
    let mut langevin = cfg.eval_langevin(cfg.eval.chain_samples);
    langevin.snapshot_steps = cfg.eval.snapshot_steps.clone();
    for (label, model) in [("untrained", init_model(&cfg)?), ("trained", trained)] {
        let dump = chain_transition_dump(&model, &langevin, None)?;
        let line: Vec<String> = dump
            .steps
            .iter()
            .map(|(step, views)| {
                let c = mean_confidence(&classifiers.per_modality, views).unwrap_or(f64::NAN);
                format!("s{step}={c:.3}")
            })
            .collect();
        println!("{label:<9} {}", line.join(" "));
    }
    Ok(())
}
