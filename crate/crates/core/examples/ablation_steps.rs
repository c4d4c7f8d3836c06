//! Runs a small ablation grid over energy width and Langevin steps and
//! prints one line per cell.
//!
//! Usage: `ablation_steps [iterations]`

use ebmmoe::cli::{ablation_cells, evaluate_model, train_model};
use ebmmoe::config::RunConfig;
use ebmmoe::data::generate;
use ebmmoe::eval::train_classifiers;

fn main() -> ebmmoe::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut cfg = RunConfig::default();
    cfg.train.iterations = iterations;
    cfg.ablation.energy_units = vec![16, 64];
    cfg.ablation.energy_layers = vec![2];
    cfg.ablation.steps = vec![5, 30];
    let (train, test) = generate(&cfg.data)?;
    let classifiers = train_classifiers(&train, &test, &cfg.eval.classifier)?;
    println!("D   L  S   joint  cross");
    for cell in ablation_cells(&cfg) {
        let run = cell.apply(&cfg);
        let (model, _) = train_model(&run, &train)?;
        let s = evaluate_model(&run, &model, &classifiers, &test)?;
        println!("{:<3} {:<2} {:<3} {:.3}  {:.3}", cell.units, cell.layers, cell.steps, s.joint, s.cross);
    }
    Ok(())
}
