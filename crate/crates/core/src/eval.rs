//! Coherence evaluation with per-modality classifiers.
//!
//! Joint coherence asks whether unconditional samples are consistent across
//! modalities. Cross coherence asks whether a view generated from another
//! modality's posterior keeps the source example's class.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::MultimodalDataset;
use crate::error::{Error, Result};
use crate::langevin::{run_chains, LangevinConfig};
use crate::nets::{encoder_forward, MlpParams, MlpSpec};
use crate::optim::{AdamConfig, AdamState};
use crate::prior::estimate_log_partition;
use crate::rng::{mix, normal_vec, substream};
use crate::tensor::{Activation, Tape, Tensor};
use crate::trainer::{elbo_terms, ModelBundle};

/// Anything that assigns class labels and confidences to rows.
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;

    /// Largest class probability per row.
    fn confidence(&self, x: &Tensor) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden_units: 32,
            hidden_layers: 1,
            epochs: 20,
            batch_size: 64,
            lr: 1e-2,
            seed: 7,
        }
    }
}

/// Softmax classifier for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub mlp: MlpParams,
    pub heldout_accuracy: f64,
}

impl Classifier {
    pub fn classes(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.mlp.forward_values(x)?;
        let k = logits.cols();
        let mut out = logits.into_values();
        for row in out.chunks_mut(k) {
            let lse = crate::tensor::logsumexp(row);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        Tensor::matrix(x.rows(), k, out)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Predictor for Classifier {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.mlp.forward_values(x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    fn confidence(&self, x: &Tensor) -> Result<Vec<f64>> {
        let p = self.probabilities(x)?;
        Ok((0..p.rows()).map(|r| p.row(r).iter().cloned().fold(0.0, f64::max)).collect())
    }
}

/// Always predicts one class with full confidence.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub usize);

impl Predictor for ConstantPredictor {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(vec![self.0; x.rows()])
    }

    fn confidence(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(vec![1.0; x.rows()])
    }
}

/// One classifier per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub per_modality: Vec<Classifier>,
}

pub fn accuracy(p: &dyn Predictor, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = p.predict(x)?;
    if labels.is_empty() {
        return Ok(1.0);
    }
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

/// Cross-entropy training on modality `modality` of `train`; accuracy is
/// measured on `heldout`.
pub fn train_classifier(
    train: &MultimodalDataset,
    heldout: &MultimodalDataset,
    modality: usize,
    cfg: &ClassifierConfig,
) -> Result<Classifier> {
    if train.is_empty() {
        return Err(Error::Contract("classifier training needs labeled data".into()));
    }
    if modality >= train.modalities() {
        return Err(Error::dims("train_classifier", &[train.modalities()], &[modality]));
    }
    let k = train.classes.max(1);
    let d = train.dims[modality];
    let mut extents = vec![d];
    extents.extend(std::iter::repeat(cfg.hidden_units).take(cfg.hidden_layers));
    extents.push(k);
    let mut rng = substream(mix(cfg.seed, modality as u64), 0);
    let mut mlp = MlpParams::init(
        &MlpSpec {
            extents,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
        },
        &mut rng,
    )?;
    let adam = AdamConfig::default();
    let mut state = AdamState::for_params(&mlp.params());
    let x_all = train.view_tensor(modality);
    let n = train.len();
    let bs = cfg.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut substream(mix(cfg.seed, modality as u64), 1 + epoch as u64));
        for chunk in order.chunks(bs) {
            let x = x_all.select_rows(chunk);
            let mut onehot = vec![0.0; chunk.len() * k];
            for (r, &i) in chunk.iter().enumerate() {
                onehot[r * k + train.labels[i].min(k - 1)] = 1.0;
            }
            let mut tape = Tape::new();
            let b = mlp.bind(&mut tape, true);
            let xv = tape.leaf(&x, false);
            let logits = mlp.forward(&mut tape, &b, xv)?;
            let lse = tape.logsumexp_rows(logits)?;
            let oh = tape.constant(chunk.len(), k, onehot)?;
            let picked = tape.mul(logits, oh)?;
            let picked = tape.row_sum(picked)?;
            let nll = tape.sub(lse, picked)?;
            let loss = tape.mean(nll)?;
            let grads = tape.backward(loss)?;
            let g = mlp.gradients(&b, &grads);
            state.step(mlp.params_mut(), &g, cfg.lr, &adam)?;
        }
    }
    let mut clf = Classifier {
        mlp,
        heldout_accuracy: 0.0,
    };
    clf.heldout_accuracy = accuracy(&clf, &heldout.view_tensor(modality), &heldout.labels)?;
    Ok(clf)
}

/// Trains one classifier per modality.
pub fn train_classifiers(train: &MultimodalDataset, heldout: &MultimodalDataset, cfg: &ClassifierConfig) -> Result<ClassifierModel> {
    let per_modality = (0..train.modalities())
        .map(|m| train_classifier(train, heldout, m, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassifierModel { per_modality })
}

/// Fraction of rows on which every modality's prediction is the same.
/// With a single modality every row agrees.
pub fn all_agree_fraction(predictions: &[Vec<usize>]) -> f64 {
    let Some(first) = predictions.first() else {
        return 1.0;
    };
    if first.is_empty() {
        return 1.0;
    }
    let agree = (0..first.len())
        .filter(|&r| predictions.iter().all(|p| p[r] == first[r]))
        .count();
    agree as f64 / first.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointCoherence {
    pub score: f64,
    pub n_samples: usize,
}

/// Draws `langevin.n_chains` latents from the prior, decodes every modality
/// and scores the all-agree fraction of the classifier predictions.
pub fn joint_coherence<P: Predictor>(model: &ModelBundle, classifiers: &[P], langevin: &LangevinConfig) -> Result<JointCoherence> {
    if classifiers.len() != model.modalities() {
        return Err(Error::dims("joint_coherence", &[model.modalities()], &[classifiers.len()]));
    }
    let (_, views) = model.generate_joint(langevin)?;
    let preds = views
        .iter()
        .zip(classifiers)
        .map(|(v, c)| c.predict(v))
        .collect::<Result<Vec<_>>>()?;
    Ok(JointCoherence {
        score: all_agree_fraction(&preds),
        n_samples: langevin.n_chains,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossOptions {
    /// Draw `z` from the source expert instead of using its mean.
    pub sampled: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossCoherence {
    /// Mean over ordered pairs; 1 when there are no pairs.
    pub score: f64,
    /// `(source, target, score)` for every ordered pair `source ≠ target`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub n_examples: usize,
}

/// Encodes each test example with one modality, decodes another and checks
/// the generated view's predicted class against the true label.
pub fn cross_coherence<P: Predictor>(
    model: &ModelBundle,
    classifiers: &[P],
    test: &MultimodalDataset,
    opts: &CrossOptions,
) -> Result<CrossCoherence> {
    let m = model.modalities();
    if classifiers.len() != m || test.modalities() != m {
        return Err(Error::dims("cross_coherence", &[m], &[classifiers.len(), test.modalities()]));
    }
    let n = test.len();
    let mut pairs = Vec::new();
    for i in 0..m {
        let (mean, logvar) = encoder_forward(&model.encoders[i], &test.view_tensor(i))?;
        let z = if opts.sampled {
            let mut rng = substream(mix(opts.seed, 0x5a), i as u64);
            let eps = normal_vec(&mut rng, mean.len());
            let v = mean
                .values()
                .iter()
                .zip(logvar.values())
                .zip(eps)
                .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                .collect();
            Tensor::new(mean.shape().to_vec(), v)?
        } else {
            mean
        };
        for j in (0..m).filter(|&j| j != i) {
            let w = model.draw_w_prior(j, n, mix(opts.seed, i as u64));
            let x = model.decode_mean(j, &z, w.as_ref())?;
            pairs.push((i, j, accuracy(&classifiers[j], &x, &test.labels)?));
        }
    }
    let score = if pairs.is_empty() {
        1.0
    } else {
        pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64
    };
    Ok(CrossCoherence {
        score,
        pairs,
        n_examples: n,
    })
}

/// Decoded views at each snapshot step of one set of chains.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainDump {
    /// `(step, per-modality decoded means)`.
    pub steps: Vec<(usize, Vec<Tensor>)>,
    pub files: Vec<PathBuf>,
}

pub fn chain_file_name(step: usize, modality: usize) -> String {
    format!("chain_s{step}_m{modality}.txt")
}

fn matrix_text(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Runs chains with snapshots and decodes every modality at each snapshot.
/// Modality-specific latents, when present, are drawn once and shared by
/// all snapshots. With `dir`, one text matrix per (step, modality) is
/// written there.
pub fn chain_transition_dump(model: &ModelBundle, langevin: &LangevinConfig, dir: Option<&Path>) -> Result<ChainDump> {
    let snaps = &langevin.snapshot_steps;
    if snaps.is_empty() {
        return Err(Error::Config("langevin.snapshot_steps must not be empty".into()));
    }
    if snaps.first() != Some(&0) || snaps.last() != Some(&langevin.steps) {
        return Err(Error::Config(format!(
            "langevin.snapshot_steps must start at 0 and end at steps = {}",
            langevin.steps
        )));
    }
    let (_, trace) = run_chains(&model.energy_prior, langevin)?;
    let ws: Vec<Option<Tensor>> = (0..model.modalities())
        .map(|j| model.draw_w_prior(j, langevin.n_chains, langevin.seed))
        .collect();
    let mut steps = Vec::with_capacity(trace.snapshots.len());
    for (step, z) in &trace.snapshots {
        let views = (0..model.modalities())
            .map(|j| model.decode_mean(j, z, ws[j].as_ref()))
            .collect::<Result<Vec<_>>>()?;
        steps.push((*step, views));
    }
    let mut files = Vec::new();
    if let Some(dir) = dir {
        for (step, views) in &steps {
            for (j, v) in views.iter().enumerate() {
                let path = dir.join(chain_file_name(*step, j));
                crate::io::write_atomic(&path, matrix_text(v).as_bytes())?;
                files.push(path);
            }
        }
    }
    Ok(ChainDump { steps, files })
}

/// Mean over modalities of the mean classifier confidence on `views`.
pub fn mean_confidence<P: Predictor>(classifiers: &[P], views: &[Tensor]) -> Result<f64> {
    let mut acc = 0.0;
    for (c, v) in classifiers.iter().zip(views) {
        let conf = c.confidence(v)?;
        acc += conf.iter().sum::<f64>() / conf.len().max(1) as f64;
    }
    Ok(acc / views.len().max(1) as f64)
}

/// Objective on `data` (one draw per expert) minus a fresh `log Z` estimate.
/// The model is not modified.
pub fn normalized_elbo(model: &ModelBundle, data: &MultimodalDataset, partition_samples: usize, seed: u64) -> Result<f64> {
    let terms = elbo_terms(model, &data.all(), mix(seed, 1))?;
    let mut prior = model.energy_prior.clone();
    let log_z = estimate_log_partition(&mut prior, partition_samples.max(1), &mut substream(seed, 2))?;
    Ok(terms.objective - log_z)
}

/// One `metric,value,n,seed` CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

impl ScoreRow {
    pub const CSV_HEADER: &'static str = "metric,value,n,seed";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.metric, self.value, self.n, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_gmm_pair, DatasetSpec};

    fn gmm(n: usize) -> (MultimodalDataset, MultimodalDataset) {
        generate_gmm_pair(&DatasetSpec {
            n_train: n,
            n_test: n / 2,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn agreement_count() {
        let p = vec![vec![3, 3, 1, 2], vec![3, 5, 1, 2]];
        assert_eq!(all_agree_fraction(&p), 0.75);
        assert_eq!(all_agree_fraction(&p[..1]), 1.0);
    }

    #[test]
    fn separable_data_is_learned() {
        let (train, test) = gmm(1500);
        let c = train_classifier(&train, &test, 1, &ClassifierConfig::default()).unwrap();
        assert!(c.heldout_accuracy >= 0.98, "{}", c.heldout_accuracy);
        let conf = c.confidence(&test.view_tensor(1)).unwrap();
        assert!(conf.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn single_class_is_trivial() {
        let (mut train, mut test) = gmm(300);
        train.classes = 1;
        test.classes = 1;
        train.labels.iter_mut().for_each(|l| *l = 0);
        test.labels.iter_mut().for_each(|l| *l = 0);
        let c = train_classifier(&train, &test, 0, &ClassifierConfig::default()).unwrap();
        assert_eq!(c.heldout_accuracy, 1.0);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        use rand::seq::SliceRandom;
        let (mut train, mut test) = gmm(1500);
        train.labels.shuffle(&mut substream(1, 1));
        test.labels.shuffle(&mut substream(1, 2));
        let c = train_classifier(&train, &test, 0, &ClassifierConfig::default()).unwrap();
        assert!((c.heldout_accuracy - 1.0 / 3.0).abs() <= 0.1, "{}", c.heldout_accuracy);
    }

    #[test]
    fn chain_dump_requires_endpoints() {
        let model = ModelBundle::init(&Default::default(), &[2, 2], Default::default(), false, 0).unwrap();
        let cfg = LangevinConfig {
            steps: 5,
            n_chains: 4,
            ..LangevinConfig::default()
        };
        let err = chain_transition_dump(&model, &cfg, None).unwrap_err();
        assert!(err.to_string().contains("snapshot_steps"));
        let ok = LangevinConfig {
            snapshot_steps: vec![0, 2, 5],
            ..cfg
        };
        let dump = chain_transition_dump(&model, &ok, None).unwrap();
        assert_eq!(dump.steps.len(), 3);
        assert_eq!(dump.steps[0].1.len(), 2);
    }
}
