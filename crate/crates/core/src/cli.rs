//! Command-line verbs and the experiment plumbing behind them.
//!
//! Output layout under `--out` (or `out_dir`):
//!
//! ```text
//! config.json              resolved configuration
//! train.mmds, test.mmds    gen-data
//! metrics.csv              train
//! checkpoints/             ckpt_NNNNNN.{json,bin}, final.{json,bin}
//! classifiers.{json,bin}   eval / chain-viz cache
//! scores.csv               eval
//! ablation.csv             ablate
//! chains/                  chain-viz
//! ```

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{hex_digest, RunConfig};
use crate::data::{generate, load_dataset, save_dataset, MultimodalDataset};
use crate::error::{Error, Result};
use crate::eval::{
    chain_transition_dump, cross_coherence, joint_coherence, mean_confidence, normalized_elbo, train_classifiers,
    ClassifierModel, ScoreRow,
};
use crate::io::write_atomic;
use crate::trainer::{IterationRecord, ModelBundle, NoHook, TrainHook, Trainer};

#[derive(Debug, Parser)]
#[command(name = "ebmmoe", version, about = "Multimodal VAE with an energy-based latent prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and test datasets.
    GenData(CommonArgs),
    /// Train a model and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training set; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score a checkpoint: joint and cross coherence, normalized ELBO.
    Eval(ArtifactArgs),
    /// Train and score every cell of the ablation grid.
    Ablate(CommonArgs),
    /// Dump decoded Langevin chain states at the snapshot steps.
    ChainViz(ArtifactArgs),
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the data, training and evaluation seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep the energy at zero (unimodal-prior baseline).
    #[arg(long)]
    pub freeze_energy: bool,
    /// Enable modality-specific latents.
    #[arg(long)]
    pub extension: bool,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ArtifactArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint manifest; defaults to `<out>/checkpoints/final.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test set; generated from the config when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

/// Stable process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::TrainingDivergence { .. } => 4,
        Error::Mismatch(_) => 5,
        _ => 1,
    }
}

/// Loads the config and applies command-line overrides.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    cfg.train.freeze_energy |= args.freeze_energy;
    cfg.train.extension_enabled |= args.extension;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&resolve_config(&a)?),
        Command::Train { common, resume, dataset } => {
            cmd_train(&resolve_config(&common)?, resume.as_deref(), dataset.as_deref())
        }
        Command::Eval(a) => {
            let cfg = resolve_config(&a.common)?;
            cmd_eval(&cfg, a.checkpoint.as_deref(), a.dataset.as_deref())
        }
        Command::Ablate(a) => cmd_ablate(&resolve_config(&a)?),
        Command::ChainViz(a) => cmd_chain_viz(&resolve_config(&a.common)?, a.checkpoint.as_deref()),
    }
}

fn save_config(cfg: &RunConfig) -> Result<()> {
    write_atomic(&cfg.out_dir.join("config.json"), cfg.to_json().as_bytes())
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let (train, test) = generate(&cfg.data)?;
    save_dataset(&train, &cfg.out_dir.join("train.mmds"))?;
    save_dataset(&test, &cfg.out_dir.join("test.mmds"))?;
    println!(
        "gen-data: {:?} K={} m={} n_train={} n_test={} -> {}",
        cfg.data.family,
        cfg.data.classes,
        cfg.data.modalities,
        train.len(),
        test.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn dataset_or_generated(path: Option<&Path>, cfg: &RunConfig, test: bool) -> Result<MultimodalDataset> {
    match path {
        Some(p) => load_dataset(p),
        None => {
            let (train, heldout) = generate(&cfg.data)?;
            Ok(if test { heldout } else { train })
        }
    }
}

fn check_dims(ds: &MultimodalDataset, cfg: &RunConfig) -> Result<()> {
    if ds.dims != cfg.data.view_dims() {
        return Err(Error::Mismatch(format!(
            "dataset view dims {:?} differ from the config's {:?}",
            ds.dims,
            cfg.data.view_dims()
        )));
    }
    Ok(())
}

pub fn init_model(cfg: &RunConfig) -> Result<ModelBundle> {
    ModelBundle::init(
        &cfg.arch,
        &cfg.data.view_dims(),
        cfg.reference,
        cfg.train.extension_enabled,
        cfg.train.seed,
    )
}

fn metrics_csv(records: &[IterationRecord]) -> String {
    let mut s = String::from(IterationRecord::CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Parses a metrics CSV written by `train`.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<IterationRecord>> {
    let mut lines = text.lines();
    let mut offset = 0;
    match lines.next() {
        Some(h) if h == IterationRecord::CSV_HEADER => offset += h.len() + 1,
        _ => {
            return Err(Error::Parse {
                offset: 0,
                detail: "missing metrics header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for line in lines {
        let bad = |detail: String| Error::Parse { offset, detail };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        out.push(IterationRecord {
            iter: f[0].parse().map_err(|e| bad(format!("{:?}: {e}", f[0])))?,
            elbo: num(f[1])?,
            recon_mean: num(f[2])?,
            prior_term: num(f[3])?,
            entropy_term: num(f[4])?,
            grad_norm_model: num(f[5])?,
            grad_norm_ebm: num(f[6])?,
            wall_ms: num(f[7])?,
        });
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Persists metrics and checkpoints while a [`Trainer`] runs.
struct CheckpointHook {
    out: PathBuf,
    digest: String,
    every: usize,
    records: Vec<IterationRecord>,
    last: Option<PathBuf>,
}

impl CheckpointHook {
    fn flush_metrics(&self) -> Result<()> {
        write_atomic(&self.out.join("metrics.csv"), metrics_csv(&self.records).as_bytes())
    }

    fn write_checkpoint(&mut self, trainer: &Trainer, name: &str) -> Result<PathBuf> {
        let path = self.out.join("checkpoints").join(name);
        let ck = checkpoint::model_checkpoint(&trainer.model, &trainer.state, trainer.iteration, &self.digest);
        checkpoint::save(&path, &ck)?;
        Ok(path)
    }
}

impl TrainHook for CheckpointHook {
    fn after_step(&mut self, trainer: &Trainer, record: &IterationRecord) -> Result<()> {
        self.records.push(*record);
        if self.every > 0 && trainer.iteration % self.every == 0 {
            let p = self.write_checkpoint(trainer, &format!("ckpt_{:06}.json", trainer.iteration))?;
            self.last = Some(p);
            self.flush_metrics()?;
        }
        Ok(())
    }

    fn last_checkpoint(&self) -> Option<PathBuf> {
        self.last.clone()
    }
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, dataset: Option<&Path>) -> Result<()> {
    let train = dataset_or_generated(dataset, cfg, false)?;
    check_dims(&train, cfg)?;
    let digest = cfg.model_digest();
    let mut model = init_model(cfg)?;
    let mut hook = CheckpointHook {
        out: cfg.out_dir.clone(),
        digest: digest.clone(),
        every: cfg.train.checkpoint_every,
        records: Vec::new(),
        last: None,
    };
    let mut trainer = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            let (state, iteration) = checkpoint::restore_model(&ck, &mut model, &digest)?;
            let metrics = cfg.out_dir.join("metrics.csv");
            if metrics.exists() {
                let text = std::fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
                hook.records = parse_metrics_csv(&text)?
                    .into_iter()
                    .filter(|r| r.iter < iteration)
                    .collect();
            }
            hook.last = Some(p.to_path_buf());
            Trainer::resume(model, state, iteration, cfg.train.clone())?
        }
        None => Trainer::new(model, cfg.train.clone())?,
    };
    save_config(cfg)?;
    let result = trainer.run(&train, &mut hook);
    hook.flush_metrics()?;
    result?;
    let final_path = hook.write_checkpoint(&trainer, "final.json")?;
    let last = hook.records.last();
    println!(
        "train: {} iterations, final elbo {}, checkpoint {}",
        trainer.iteration,
        last.map_or(f64::NAN, |r| r.elbo),
        final_path.display()
    );
    Ok(())
}

/// Loads a model checkpoint and checks it against the config.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<ModelBundle> {
    let ck = checkpoint::load(path)?;
    let mut model = init_model(cfg)?;
    checkpoint::restore_model(&ck, &mut model, &cfg.model_digest())?;
    Ok(model)
}

fn classifier_digest(cfg: &RunConfig) -> String {
    let id = serde_json::json!({ "data": cfg.data, "classifier": cfg.eval.classifier });
    hex_digest(id.to_string().as_bytes())
}

/// Per-modality classifiers trained on the config's training split, cached
/// in `<out>/classifiers.json`.
pub fn classifiers_for(cfg: &RunConfig) -> Result<ClassifierModel> {
    let path = cfg.out_dir.join("classifiers.json");
    let digest = classifier_digest(cfg);
    if let Ok(ck) = checkpoint::load(&path) {
        if let Ok(model) = checkpoint::restore_classifiers(&ck, &digest) {
            return Ok(model);
        }
    }
    let (train, test) = generate(&cfg.data)?;
    let model = train_classifiers(&train, &test, &cfg.eval.classifier)?;
    checkpoint::save(&path, &checkpoint::classifier_checkpoint(&model, &digest))?;
    Ok(model)
}

/// Evaluation scores of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub joint: f64,
    pub cross: f64,
    pub pairs: Vec<(usize, usize, f64)>,
    pub normalized_elbo: f64,
    pub classifier_accuracy: Vec<f64>,
    pub n_joint: usize,
    pub n_test: usize,
}

impl Scores {
    pub fn rows(&self, seed: u64) -> Vec<ScoreRow> {
        let row = |metric: String, value: f64, n: usize| ScoreRow { metric, value, n, seed };
        let mut rows = vec![
            row("joint_coherence".into(), self.joint, self.n_joint),
            row("cross_coherence".into(), self.cross, self.n_test),
        ];
        for &(i, j, s) in &self.pairs {
            rows.push(row(format!("cross_{i}_to_{j}"), s, self.n_test));
        }
        rows.push(row("normalized_elbo".into(), self.normalized_elbo, self.n_test));
        for (i, a) in self.classifier_accuracy.iter().enumerate() {
            rows.push(row(format!("classifier_accuracy_{i}"), *a, self.n_test));
        }
        rows
    }
}

pub fn evaluate_model(
    cfg: &RunConfig,
    model: &ModelBundle,
    classifiers: &ClassifierModel,
    test: &MultimodalDataset,
) -> Result<Scores> {
    let c = &classifiers.per_modality;
    let joint = joint_coherence(model, c, &cfg.eval_langevin(cfg.eval.joint_samples))?;
    let cross = cross_coherence(model, c, test, &cfg.eval.cross)?;
    let elbo = normalized_elbo(model, test, cfg.eval.partition_samples, cfg.eval.seed)?;
    Ok(Scores {
        joint: joint.score,
        cross: cross.score,
        pairs: cross.pairs,
        normalized_elbo: elbo,
        classifier_accuracy: c.iter().map(|c| c.heldout_accuracy).collect(),
        n_joint: joint.n_samples,
        n_test: test.len(),
    })
}

fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from(ScoreRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn default_checkpoint(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("checkpoints").join("final.json"))
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: Option<&Path>, dataset: Option<&Path>) -> Result<()> {
    let model = load_model(cfg, &default_checkpoint(cfg, ckpt))?;
    let test = dataset_or_generated(dataset, cfg, true)?;
    check_dims(&test, cfg)?;
    let classifiers = classifiers_for(cfg)?;
    let scores = evaluate_model(cfg, &model, &classifiers, &test)?;
    write_atomic(
        &cfg.out_dir.join("scores.csv"),
        scores_csv(&scores.rows(cfg.eval.seed)).as_bytes(),
    )?;
    println!(
        "eval: joint {} cross {} normalized_elbo {}",
        scores.joint, scores.cross, scores.normalized_elbo
    );
    Ok(())
}

/// One ablation cell: energy width, depth, Langevin steps and seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationCell {
    pub units: usize,
    pub layers: usize,
    pub steps: usize,
    pub seed: u64,
}

impl AblationCell {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.arch.energy_units = self.units;
        cfg.arch.energy_layers = self.layers;
        cfg.train.langevin.steps = self.steps;
        cfg.eval.langevin_steps = Some(self.steps);
        cfg.train.seed = self.seed;
        cfg.eval.seed = self.seed;
        cfg
    }
}

pub fn ablation_cells(cfg: &RunConfig) -> Vec<AblationCell> {
    let g = &cfg.ablation;
    let mut cells = Vec::new();
    for &units in &g.energy_units {
        for &layers in &g.energy_layers {
            for &steps in &g.steps {
                for &seed in &g.seeds {
                    cells.push(AblationCell { units, layers, steps, seed });
                }
            }
        }
    }
    cells
}

/// Trains a fresh model under `cfg` on `train`.
pub fn train_model(cfg: &RunConfig, train: &MultimodalDataset) -> Result<(ModelBundle, Vec<IterationRecord>)> {
    let mut trainer = Trainer::new(init_model(cfg)?, cfg.train.clone())?;
    let records = trainer.run(train, &mut NoHook)?;
    Ok((trainer.model, records))
}

pub const ABLATION_HEADER: &str = "D,L,S,seed,joint,cross,status";

fn status_text(e: &Error) -> String {
    let name = match e {
        Error::TrainingDivergence { .. } => "diverged",
        Error::Config(_) => "config_error",
        _ => "failed",
    };
    name.to_string()
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let (train, test) = generate(&cfg.data)?;
    let classifiers = classifiers_for(cfg)?;
    save_config(cfg)?;
    let cells = ablation_cells(cfg);
    if cells.is_empty() {
        return Err(Error::Config("ablation grid has no cells".into()));
    }
    let mut csv = format!("{ABLATION_HEADER}\n");
    for cell in &cells {
        let cell_cfg = cell.apply(cfg);
        let outcome = cell_cfg
            .validate()
            .and_then(|_| train_model(&cell_cfg, &train))
            .and_then(|(model, _)| evaluate_model(&cell_cfg, &model, &classifiers, &test));
        let (joint, cross, status) = match outcome {
            Ok(s) => (s.joint.to_string(), s.cross.to_string(), "ok".to_string()),
            Err(e) => (String::new(), String::new(), status_text(&e)),
        };
        println!(
            "ablate: D={} L={} S={} seed={} joint={joint} cross={cross} {status}",
            cell.units, cell.layers, cell.steps, cell.seed
        );
        csv.push_str(&format!(
            "{},{},{},{},{joint},{cross},{status}\n",
            cell.units, cell.layers, cell.steps, cell.seed
        ));
        write_atomic(&cfg.out_dir.join("ablation.csv"), csv.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_chain_viz(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<()> {
    if cfg.eval.snapshot_steps.is_empty() {
        return Err(Error::Config("eval.snapshot_steps must not be empty".into()));
    }
    let model = load_model(cfg, &default_checkpoint(cfg, ckpt))?;
    let mut langevin = cfg.eval_langevin(cfg.eval.chain_samples);
    langevin.snapshot_steps = cfg.eval.snapshot_steps.clone();
    if langevin.snapshot_steps.first() != Some(&0) || langevin.snapshot_steps.last() != Some(&langevin.steps) {
        return Err(Error::Config(format!(
            "eval.snapshot_steps must start at 0 and end at the Langevin step count {}",
            langevin.steps
        )));
    }
    langevin.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("eval.snapshot_steps: {m}")),
        other => other,
    })?;
    let classifiers = classifiers_for(cfg)?;
    let dir = cfg.out_dir.join("chains");
    let dump = chain_transition_dump(&model, &langevin, Some(&dir))?;
    let mut csv = String::from("step,mean_confidence\n");
    for (step, views) in &dump.steps {
        csv.push_str(&format!("{step},{}\n", mean_confidence(&classifiers.per_modality, views)?));
    }
    write_atomic(&dir.join("confidence.csv"), csv.as_bytes())?;
    println!("chain-viz: {} files in {}", dump.files.len(), dir.display());
    Ok(())
}
