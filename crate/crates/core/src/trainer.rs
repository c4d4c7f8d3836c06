//! Variational objective, gradient estimators and the joint training loop.
//!
//! One training iteration runs four phases in order:
//! 1. posterior sampling: one reparameterized draw per expert and example
//! 2. prior sampling: fresh short-run Langevin chains from `p₀`
//! 3. inference/generator update from the reparameterized objective
//! 4. energy update from the positive/negative phase difference
//!
//! Every random quantity of iteration `t` comes from streams keyed by
//! `(seed, t)`, so a run resumed from a checkpoint replays the same numbers
//! as an uninterrupted one.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{MultimodalBatch, MultimodalDataset};
use crate::error::{Error, Result};
use crate::langevin::{run_chains, LangevinConfig};
use crate::moe::{mixture_log_density_var, reparameterize};
use crate::nets::{ArchSpec, EncoderBinding, EncoderNet, EnergyNet, GeneratorNet, MlpBinding};
use crate::optim::{AdamConfig, AdamState};
use crate::prior::{estimate_log_partition, EbmPrior, ReferenceDistribution, ReferenceKind};
use crate::rng::{mix, normal_vec, substream};
use crate::tensor::{Tape, Tensor, Var};

const STREAM_POSTERIOR: u64 = 0;
const STREAM_W: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const TAG_LANGEVIN: u64 = 3;
const TAG_EPOCH: u64 = 0x4550_4f43;
const TAG_W_PRIOR: u64 = 0x5750_5249;

/// Modality-specific latents `w⁽ⁱ⁾ ∈ R^{d_w}` with their own encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Extension {
    pub w_dim: usize,
    pub w_encoders: Vec<EncoderNet>,
}

/// All learnable parameters: energy `α`, generators `β`, encoders `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub energy_prior: EbmPrior,
    pub generators: Vec<GeneratorNet>,
    pub encoders: Vec<EncoderNet>,
    pub extension: Option<Extension>,
}

impl ModelBundle {
    /// Fresh parameters. Base networks come from one stream and extension
    /// encoders from another, so enabling an empty extension does not change
    /// the base initialization.
    pub fn init(
        arch: &ArchSpec,
        data_dims: &[usize],
        reference: ReferenceKind,
        extension: bool,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if data_dims.is_empty() {
            return Err(Error::Config("a model needs at least one modality".into()));
        }
        let d = arch.latent_dim;
        let w_dim = if extension { arch.w_dim } else { 0 };
        let mut rng = substream(seed, 0);
        let energy = EnergyNet::init(arch, &mut rng)?;
        let energy_prior = EbmPrior::new(energy, ReferenceDistribution::new(reference, d))?;
        let mut generators = Vec::with_capacity(data_dims.len());
        let mut encoders = Vec::with_capacity(data_dims.len());
        for &dim in data_dims {
            generators.push(GeneratorNet::init(arch, d + w_dim, dim, &mut rng)?);
            encoders.push(EncoderNet::init(arch, dim, d, &mut rng)?);
        }
        let extension = if extension {
            let mut wrng = substream(seed, 1);
            let w_encoders = data_dims
                .iter()
                .map(|&dim| EncoderNet::init(arch, dim, w_dim, &mut wrng))
                .collect::<Result<Vec<_>>>()?;
            Some(Extension { w_dim, w_encoders })
        } else {
            None
        };
        ModelBundle::from_parts(energy_prior, generators, encoders, extension)
    }

    /// Assembles a model after checking that all parts agree on extents.
    pub fn from_parts(
        energy_prior: EbmPrior,
        generators: Vec<GeneratorNet>,
        encoders: Vec<EncoderNet>,
        extension: Option<Extension>,
    ) -> Result<Self> {
        let d = energy_prior.dim();
        let w = extension.as_ref().map_or(0, |e| e.w_dim);
        if generators.len() != encoders.len() || generators.is_empty() {
            return Err(Error::dims("model bundle", &[generators.len()], &[encoders.len()]));
        }
        for (g, e) in generators.iter().zip(&encoders) {
            if e.latent_dim() != d || g.input_dim() != d + w {
                return Err(Error::dims("model bundle", &[d, w], &[e.latent_dim(), g.input_dim()]));
            }
            if g.output_dim() != e.input_dim() {
                return Err(Error::dims("model bundle", &[g.output_dim()], &[e.input_dim()]));
            }
        }
        if let Some(ext) = &extension {
            if ext.w_encoders.len() != encoders.len() {
                return Err(Error::dims("model bundle", &[encoders.len()], &[ext.w_encoders.len()]));
            }
            for (we, e) in ext.w_encoders.iter().zip(&encoders) {
                if we.latent_dim() != ext.w_dim || we.input_dim() != e.input_dim() {
                    return Err(Error::dims("model bundle", &[ext.w_dim], &[we.latent_dim()]));
                }
            }
        }
        Ok(ModelBundle {
            energy_prior,
            generators,
            encoders,
            extension,
        })
    }

    pub fn modalities(&self) -> usize {
        self.generators.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.energy_prior.dim()
    }

    pub fn w_dim(&self) -> usize {
        self.extension.as_ref().map_or(0, |e| e.w_dim)
    }

    pub fn data_dims(&self) -> Vec<usize> {
        self.generators.iter().map(|g| g.output_dim()).collect()
    }

    /// Generator and encoder parameters (`β`, `φ`, and the w-encoders).
    pub fn model_params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for (g, e) in self.generators.iter().zip(&self.encoders) {
            out.extend(g.mlp.params());
            out.extend(e.params());
        }
        if let Some(ext) = &self.extension {
            for we in &ext.w_encoders {
                out.extend(we.params());
            }
        }
        out
    }

    pub fn model_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (g, e) in self.generators.iter_mut().zip(self.encoders.iter_mut()) {
            out.extend(g.mlp.params_mut());
            out.extend(e.params_mut());
        }
        if let Some(ext) = &mut self.extension {
            for we in ext.w_encoders.iter_mut() {
                out.extend(we.params_mut());
            }
        }
        out
    }

    pub fn model_param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, (g, e)) in self.generators.iter().zip(&self.encoders).enumerate() {
            out.extend(g.mlp.param_names(&format!("generator{i}")));
            out.extend(e.param_names(&format!("encoder{i}")));
        }
        if let Some(ext) = &self.extension {
            for (i, we) in ext.w_encoders.iter().enumerate() {
                out.extend(we.param_names(&format!("w_encoder{i}")));
            }
        }
        out
    }

    pub fn ebm_params(&self) -> Vec<&Tensor> {
        self.energy_prior.energy().params()
    }

    pub fn ebm_param_names(&self) -> Vec<String> {
        self.energy_prior.energy().param_names("energy")
    }

    /// Every parameter with its name, energy first.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.ebm_param_names()
            .into_iter()
            .zip(self.ebm_params())
            .chain(self.model_param_names().into_iter().zip(self.model_params()))
            .collect()
    }

    /// Mutable counterpart of [`ModelBundle::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.ebm_param_names().into_iter().chain(self.model_param_names()).collect();
        let mut params: Vec<&mut Tensor> = Vec::new();
        let ModelBundle {
            energy_prior,
            generators,
            encoders,
            extension,
        } = self;
        params.extend(energy_prior.energy_mut().params_mut());
        for (g, e) in generators.iter_mut().zip(encoders.iter_mut()) {
            params.extend(g.mlp.params_mut());
            params.extend(e.params_mut());
        }
        if let Some(ext) = extension {
            for we in ext.w_encoders.iter_mut() {
                params.extend(we.params_mut());
            }
        }
        names.into_iter().zip(params).collect()
    }

    /// Noiseless decoder mean of modality `j`. `w` is required exactly when
    /// the model carries an extension.
    pub fn decode_mean(&self, j: usize, z: &Tensor, w: Option<&Tensor>) -> Result<Tensor> {
        let input = match (w, self.w_dim()) {
            (_, 0) if self.extension.is_none() => z.clone(),
            (Some(w), _) => hstack(z, w)?,
            (None, wd) => hstack(z, &Tensor::zeros(vec![z.rows(), wd]))?,
        };
        let gen = &self.generators[j];
        if input.cols() != gen.input_dim() {
            return Err(Error::dims("decode_mean", input.shape(), &[gen.input_dim()]));
        }
        gen.mlp.forward_values(&input)
    }

    /// Modality-specific latents drawn from `p₀(W)` for unconditional or
    /// cross-modal generation; `None` without an extension.
    pub fn draw_w_prior(&self, j: usize, n: usize, seed: u64) -> Option<Tensor> {
        self.extension.as_ref().map(|ext| {
            let mut rng = substream(mix(seed, TAG_W_PRIOR), j as u64);
            Tensor::matrix(n, ext.w_dim, normal_vec(&mut rng, n * ext.w_dim)).expect("shape")
        })
    }

    /// Unconditional samples: `z` from Langevin chains on the prior, then
    /// every modality decoded to its noiseless mean.
    pub fn generate_joint(&self, langevin: &LangevinConfig) -> Result<(Tensor, Vec<Tensor>)> {
        let (z, _) = run_chains(&self.energy_prior, langevin)?;
        let views = (0..self.modalities())
            .map(|j| {
                let w = self.draw_w_prior(j, z.rows(), langevin.seed);
                self.decode_mean(j, &z, w.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((z, views))
    }
}

fn hstack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::dims("hstack", a.shape(), b.shape()));
    }
    let mut v = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        v.extend_from_slice(a.row(r));
        v.extend_from_slice(b.row(r));
    }
    Tensor::matrix(a.rows(), a.cols() + b.cols(), v)
}

/// Standard-normal draws consumed by one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    /// Per expert, `[batch × d]`.
    pub eps_z: Vec<Tensor>,
    /// Per modality, `[batch × d_w]`; empty without an extension.
    pub eps_w: Vec<Tensor>,
    /// `w_prior[i][j]`: prior draw of `w⁽ʲ⁾` for cross reconstruction from
    /// expert `i` (the diagonal is unused).
    pub w_prior: Vec<Vec<Tensor>>,
}

impl StepNoise {
    /// Draws from the posterior and W streams of `seed`.
    pub fn draw(model: &ModelBundle, batch: usize, seed: u64) -> StepNoise {
        let m = model.modalities();
        let d = model.latent_dim();
        let mut zr = substream(seed, STREAM_POSTERIOR);
        let eps_z = (0..m)
            .map(|_| Tensor::matrix(batch, d, normal_vec(&mut zr, batch * d)).expect("shape"))
            .collect();
        let (mut eps_w, mut w_prior) = (Vec::new(), Vec::new());
        if let Some(ext) = &model.extension {
            let dw = ext.w_dim;
            let mut wr = substream(seed, STREAM_W);
            let mut draw = || Tensor::matrix(batch, dw, normal_vec(&mut wr, batch * dw)).expect("shape");
            eps_w = (0..m).map(|_| draw()).collect();
            w_prior = (0..m).map(|_| (0..m).map(|_| draw()).collect()).collect();
        }
        StepNoise { eps_z, eps_w, w_prior }
    }
}

/// Per-example terms for one expert's draw `zᵢ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTerms {
    /// `log p(x⁽ʲ⁾ | zᵢ)` for every modality `j`, including `j = i`.
    pub recon: Vec<Vec<f64>>,
    /// `f_α(zᵢ) + log p₀(zᵢ)`, plus `log p₀(wᵢ)` with an extension.
    pub prior_term: Vec<f64>,
    /// `−log q(zᵢ | X)`, plus `−log q(wᵢ | xᵢ)` with an extension.
    pub neg_mixture_logq: Vec<f64>,
}

impl ExpertTerms {
    pub fn self_recon(&self, i: usize) -> &[f64] {
        &self.recon[i]
    }

    /// `(j, log p(x⁽ʲ⁾ | zᵢ))` for `j ≠ i`.
    pub fn cross_recon(&self, i: usize) -> impl Iterator<Item = (usize, &[f64])> {
        self.recon
            .iter()
            .enumerate()
            .filter(move |(j, _)| *j != i)
            .map(|(j, r)| (j, r.as_slice()))
    }

    /// Per-example total `Σⱼ reconⱼ + prior_term + neg_mixture_logq`.
    pub fn totals(&self) -> Vec<f64> {
        (0..self.prior_term.len())
            .map(|b| {
                let recon: f64 = self.recon.iter().map(|r| r[b]).sum();
                recon + self.prior_term[b] + self.neg_mixture_logq[b]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    pub experts: Vec<ExpertTerms>,
    /// The posterior draws `zᵢ`, one `[batch × d]` block per expert.
    pub draws: Vec<Tensor>,
    /// Mean over experts and examples of the per-example totals.
    pub objective: f64,
}

impl ElboTerms {
    fn mean_of(&self, f: impl Fn(&ExpertTerms, usize) -> f64) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for e in &self.experts {
            for b in 0..e.prior_term.len() {
                acc += f(e, b);
                n += 1;
            }
        }
        acc / n as f64
    }

    pub fn recon_mean(&self) -> f64 {
        self.mean_of(|e, b| e.recon.iter().map(|r| r[b]).sum())
    }

    pub fn prior_mean(&self) -> f64 {
        self.mean_of(|e, b| e.prior_term[b])
    }

    pub fn entropy_mean(&self) -> f64 {
        self.mean_of(|e, b| e.neg_mixture_logq[b])
    }
}

struct Bound {
    energy: MlpBinding,
    generators: Vec<MlpBinding>,
    encoders: Vec<EncoderBinding>,
    w_encoders: Vec<EncoderBinding>,
}

fn bind(model: &ModelBundle, tape: &mut Tape, track_model: bool, track_energy: bool) -> Bound {
    Bound {
        energy: model.energy_prior.energy().bind(tape, track_energy),
        generators: model.generators.iter().map(|g| g.mlp.bind(tape, track_model)).collect(),
        encoders: model.encoders.iter().map(|e| e.bind(tape, track_model)).collect(),
        w_encoders: match &model.extension {
            Some(ext) => ext.w_encoders.iter().map(|e| e.bind(tape, track_model)).collect(),
            None => Vec::new(),
        },
    }
}

struct Graph {
    objective: Var,
    recon: Vec<Vec<Var>>,
    prior: Vec<Var>,
    neg_logq: Vec<Var>,
    draws: Vec<Var>,
}

fn check_batch(model: &ModelBundle, batch: &MultimodalBatch, noise: &StepNoise) -> Result<()> {
    let m = model.modalities();
    if batch.modalities() != m {
        return Err(Error::dims("objective", &[m], &[batch.modalities()]));
    }
    if batch.is_empty() {
        return Err(Error::Contract("objective over an empty batch".into()));
    }
    for (j, v) in batch.views.iter().enumerate() {
        if v.cols() != model.generators[j].output_dim() || v.rows() != batch.len() {
            return Err(Error::dims("objective", &[batch.len(), model.generators[j].output_dim()], v.shape()));
        }
    }
    let d = model.latent_dim();
    let bad_z = noise.eps_z.len() != m || noise.eps_z.iter().any(|e| e.shape() != [batch.len(), d]);
    let bad_w = model.extension.is_some()
        && (noise.eps_w.len() != m || noise.w_prior.len() != m || noise.w_prior.iter().any(|r| r.len() != m));
    if bad_z || bad_w {
        return Err(Error::Contract("noise does not match the model and batch".into()));
    }
    Ok(())
}

fn build_graph(model: &ModelBundle, tape: &mut Tape, b: &Bound, batch: &MultimodalBatch, noise: &StepNoise) -> Result<Graph> {
    let m = model.modalities();
    let xs: Vec<Var> = batch.views.iter().map(|x| tape.leaf(x, false)).collect();
    let vars = model
        .generators
        .iter()
        .map(|g| tape.constant(1, g.output_dim(), vec![g.observation_variance; g.output_dim()]))
        .collect::<Result<Vec<_>>>()?;

    let mut experts = Vec::with_capacity(m);
    let mut draws = Vec::with_capacity(m);
    for i in 0..m {
        let (mean, logvar) = model.encoders[i].forward(tape, &b.encoders[i], xs[i])?;
        let eps = tape.leaf(&noise.eps_z[i], false);
        draws.push(reparameterize(tape, mean, logvar, eps)?);
        experts.push((mean, logvar));
    }

    // modality-specific latents: inferred w for self reconstruction, its
    // log-ratio against the fixed standard normal prior
    let mut w_self = Vec::new();
    let mut w_log_ratio = Vec::new();
    if let Some(ext) = &model.extension {
        let zeros = tape.constant(1, ext.w_dim, vec![0.0; ext.w_dim])?;
        let ones = tape.constant(1, ext.w_dim, vec![1.0; ext.w_dim])?;
        for i in 0..m {
            let (mw, lvw) = ext.w_encoders[i].forward(tape, &b.w_encoders[i], xs[i])?;
            let eps = tape.leaf(&noise.eps_w[i], false);
            let w = reparameterize(tape, mw, lvw, eps)?;
            let lp0 = tape.gaussian_log_density(w, zeros, ones)?;
            let var = tape.exp(lvw)?;
            let lq = tape.gaussian_log_density(w, mw, var)?;
            w_self.push(w);
            w_log_ratio.push((lp0, lq));
        }
    }

    let mut recon = Vec::with_capacity(m);
    let mut prior = Vec::with_capacity(m);
    let mut neg_logq = Vec::with_capacity(m);
    let mut totals = Vec::with_capacity(m);
    for i in 0..m {
        let z = draws[i];
        let mut row = Vec::with_capacity(m);
        for j in 0..m {
            let input = if model.extension.is_some() {
                let w = if i == j {
                    w_self[i]
                } else {
                    tape.leaf(&noise.w_prior[i][j], false)
                };
                tape.concat_cols(&[z, w])?
            } else {
                z
            };
            let mean = model.generators[j].mlp.forward(tape, &b.generators[j], input)?;
            row.push(tape.gaussian_log_density(xs[j], mean, vars[j])?);
        }
        let mut pt = model.energy_prior.log_unnormalized_var(tape, &b.energy, z)?;
        let lq = mixture_log_density_var(tape, &experts, z)?;
        let mut nq = tape.scale(lq, -1.0)?;
        if let Some(&(lp0, lqw)) = w_log_ratio.get(i) {
            pt = tape.add(pt, lp0)?;
            nq = tape.sub(nq, lqw)?;
        }
        let mut total = row[0];
        for &r in &row[1..] {
            total = tape.add(total, r)?;
        }
        total = tape.add(total, pt)?;
        total = tape.add(total, nq)?;
        recon.push(row);
        prior.push(pt);
        neg_logq.push(nq);
        totals.push(total);
    }
    let all = tape.concat_cols(&totals)?;
    let objective = tape.mean(all)?;
    Ok(Graph {
        objective,
        recon,
        prior,
        neg_logq,
        draws,
    })
}

fn read_terms(tape: &Tape, g: &Graph) -> ElboTerms {
    let experts = (0..g.prior.len())
        .map(|i| ExpertTerms {
            recon: g.recon[i].iter().map(|&v| tape.value(v).to_vec()).collect(),
            prior_term: tape.value(g.prior[i]).to_vec(),
            neg_mixture_logq: tape.value(g.neg_logq[i]).to_vec(),
        })
        .collect();
    ElboTerms {
        experts,
        draws: g.draws.iter().map(|&v| tape.to_tensor(v)).collect(),
        objective: tape.scalar(g.objective),
    }
}

fn as_divergence(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::SamplerDivergence { .. } | Error::Domain { .. } => Error::TrainingDivergence {
            iteration,
            detail: e.to_string(),
            last_checkpoint: None,
        },
        Error::TrainingDivergence {
            detail, last_checkpoint, ..
        } => Error::TrainingDivergence {
            iteration,
            detail,
            last_checkpoint,
        },
        other => other,
    }
}

/// Objective terms under fixed noise.
pub fn elbo_terms_with_noise(model: &ModelBundle, batch: &MultimodalBatch, noise: &StepNoise) -> Result<ElboTerms> {
    check_batch(model, batch, noise)?;
    let mut tape = Tape::new();
    let b = bind(model, &mut tape, false, false);
    let g = build_graph(model, &mut tape, &b, batch, noise).map_err(|e| as_divergence(e, 0))?;
    Ok(read_terms(&tape, &g))
}

/// Objective terms with one posterior draw per expert taken from `seed`.
pub fn elbo_terms(model: &ModelBundle, batch: &MultimodalBatch, seed: u64) -> Result<ElboTerms> {
    let noise = StepNoise::draw(model, batch.len(), seed);
    elbo_terms_with_noise(model, batch, &noise)
}

/// `log p(X | z) + f_α(z) + log p₀(z)` per row, evaluated directly from the
/// networks. Only defined for models without an extension.
pub fn log_joint(model: &ModelBundle, batch: &MultimodalBatch, z: &Tensor) -> Result<Vec<f64>> {
    if model.extension.is_some() {
        return Err(Error::Contract("log_joint is defined for the base model only".into()));
    }
    let mut total = crate::prior::log_unnormalized_density(&model.energy_prior, z)?;
    for (j, x) in batch.views.iter().enumerate() {
        let mean = model.decode_mean(j, z, None)?;
        let v = model.generators[j].observation_variance;
        for (r, t) in total.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (xk, mk) in x.row(r).iter().zip(mean.row(r)) {
                acc += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * (xk - mk).powi(2) / v;
            }
            *t += acc;
        }
    }
    Ok(total)
}

/// Gradients of `−objective` with respect to [`ModelBundle::model_params`],
/// flowing through the reparameterized draws. The energy is held fixed.
pub fn grad_model(model: &ModelBundle, batch: &MultimodalBatch, noise: &StepNoise) -> Result<(ElboTerms, Vec<Vec<f64>>)> {
    check_batch(model, batch, noise)?;
    let mut tape = Tape::new();
    let b = bind(model, &mut tape, true, false);
    let g = build_graph(model, &mut tape, &b, batch, noise).map_err(|e| as_divergence(e, 0))?;
    let loss = tape.scale(g.objective, -1.0)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for i in 0..model.modalities() {
        out.extend(model.generators[i].mlp.gradients(&b.generators[i], &grads));
        out.extend(model.encoders[i].gradients(&b.encoders[i], &grads));
    }
    if let Some(ext) = &model.extension {
        for (we, wb) in ext.w_encoders.iter().zip(&b.w_encoders) {
            out.extend(we.gradients(wb, &grads));
        }
    }
    Ok((read_terms(&tape, &g), out))
}

/// Two-phase energy gradient: mean `∂f/∂α` over the positive samples minus
/// the mean over the negative samples. This is the ascent direction.
pub fn grad_ebm(prior: &EbmPrior, positive: &[Tensor], negative: &Tensor) -> Result<Vec<Vec<f64>>> {
    let pos = Tensor::vstack(positive).map_err(|_| Error::Contract("grad_ebm needs positive samples".into()))?;
    if pos.rows() == 0 || negative.rows() == 0 {
        return Err(Error::Contract("grad_ebm needs nonempty positive and negative samples".into()));
    }
    if pos.cols() != prior.dim() || negative.cols() != prior.dim() {
        return Err(Error::dims("grad_ebm", pos.shape(), negative.shape()));
    }
    let energy = prior.energy();
    let mut tape = Tape::new();
    let b = energy.bind(&mut tape, true);
    let pv = tape.leaf(&pos, false);
    let nv = tape.leaf(negative, false);
    let fp = energy.forward(&mut tape, &b, pv)?;
    let fn_ = energy.forward(&mut tape, &b, nv)?;
    let mp = tape.mean(fp)?;
    let mn = tape.mean(fn_)?;
    let diff = tape.sub(mp, mn)?;
    let grads = tape.backward(diff)?;
    Ok(energy.gradients(&b, &grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_ebm: f64,
    pub adam: AdamConfig,
    /// Negative-phase sampler; its `seed` is replaced per iteration.
    pub langevin: LangevinConfig,
    pub seed: u64,
    pub extension_enabled: bool,
    /// Keeps `f_α ≡ 0`, reducing the prior to `p₀`.
    pub freeze_energy: bool,
    /// Reference draws for the per-iteration `log Z` estimate.
    pub partition_samples: usize,
    /// Checkpoint interval in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Fill the `wall_ms` column. Off by default so outputs are reproducible.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 64,
            lr_model: 1e-3,
            lr_ebm: 1e-4,
            adam: AdamConfig::default(),
            langevin: LangevinConfig::default(),
            seed: 0,
            extension_enabled: false,
            freeze_energy: false,
            partition_samples: 256,
            checkpoint_every: 0,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        for (name, lr) in [("lr_model", self.lr_model), ("lr_ebm", self.lr_ebm)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("train.{name} must be a non-negative number")));
            }
        }
        self.adam.validate()?;
        self.langevin.validate()
    }
}

/// Moment accumulators for the two parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub model: AdamState,
    pub ebm: AdamState,
}

impl OptimizerState {
    pub fn new(model: &ModelBundle) -> Self {
        OptimizerState {
            model: AdamState::for_params(&model.model_params()),
            ebm: AdamState::for_params(&model.ebm_params()),
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Objective minus the `log Z` estimate.
    pub elbo: f64,
    pub recon_mean: f64,
    pub prior_term: f64,
    pub entropy_term: f64,
    pub grad_norm_model: f64,
    pub grad_norm_ebm: f64,
    pub wall_ms: f64,
}

impl IterationRecord {
    pub const CSV_HEADER: &'static str =
        "iter,elbo,recon_mean,prior_term,entropy_term,grad_norm_model,grad_norm_ebm,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.elbo,
            self.recon_mean,
            self.prior_term,
            self.entropy_term,
            self.grad_norm_model,
            self.grad_norm_ebm,
            self.wall_ms
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceRecord {
    pub iter: usize,
    pub metric: String,
    pub value: f64,
}

/// The persisted record of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub config_digest: String,
    pub records: Vec<IterationRecord>,
    pub coherence: Vec<CoherenceRecord>,
}

fn l2(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

fn all_finite(params: &[&Tensor]) -> bool {
    params.iter().all(|p| p.is_finite())
}

/// Seed of all randomness used by iteration `iteration`.
pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    mix(seed, iteration as u64)
}

/// One iteration of joint training on `batch`.
pub fn train_step(
    model: &mut ModelBundle,
    batch: &MultimodalBatch,
    state: &mut OptimizerState,
    config: &TrainConfig,
    iteration: usize,
) -> Result<IterationRecord> {
    let started = Instant::now();
    let it_seed = iteration_seed(config.seed, iteration);
    let noise = StepNoise::draw(model, batch.len(), it_seed);
    let (terms, g_model) = grad_model(model, batch, &noise).map_err(|e| as_divergence(e, iteration))?;

    let g_ebm = if config.freeze_energy {
        None
    } else {
        let langevin = LangevinConfig {
            seed: mix(it_seed, TAG_LANGEVIN),
            snapshot_steps: Vec::new(),
            ..config.langevin.clone()
        };
        let (negatives, _) = run_chains(&model.energy_prior, &langevin).map_err(|e| as_divergence(e, iteration))?;
        Some(grad_ebm(&model.energy_prior, &terms.draws, &negatives).map_err(|e| as_divergence(e, iteration))?)
    };

    let log_z = if config.partition_samples > 0 {
        let mut rng = substream(it_seed, STREAM_PARTITION);
        estimate_log_partition(&mut model.energy_prior, config.partition_samples, &mut rng)
            .map_err(|e| as_divergence(e, iteration))?
    } else {
        0.0
    };

    state
        .model
        .step(model.model_params_mut(), &g_model, config.lr_model, &config.adam)?;
    if let Some(g) = &g_ebm {
        let descent: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        state
            .ebm
            .step(model.energy_prior.energy_mut().params_mut(), &descent, config.lr_ebm, &config.adam)?;
    }
    if !all_finite(&model.model_params()) || !all_finite(&model.ebm_params()) {
        return Err(Error::TrainingDivergence {
            iteration,
            detail: "parameter update produced non-finite values".into(),
            last_checkpoint: None,
        });
    }

    Ok(IterationRecord {
        iter: iteration,
        elbo: terms.objective - log_z,
        recon_mean: terms.recon_mean(),
        prior_term: terms.prior_mean(),
        entropy_term: terms.entropy_mean(),
        grad_norm_model: l2(&g_model),
        grad_norm_ebm: g_ebm.as_deref().map_or(0.0, l2),
        wall_ms: if config.record_wall_clock {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
    })
}

/// [`train_step`] for a model carrying modality-specific latents.
pub fn train_step_extended(
    model: &mut ModelBundle,
    batch: &MultimodalBatch,
    state: &mut OptimizerState,
    config: &TrainConfig,
    iteration: usize,
) -> Result<IterationRecord> {
    if model.extension.is_none() || !config.extension_enabled {
        return Err(Error::Contract(
            "train_step_extended needs a model with an extension and extension_enabled".into(),
        ));
    }
    train_step(model, batch, state, config, iteration)
}

/// Observer invoked after every completed iteration.
pub trait TrainHook {
    fn after_step(&mut self, trainer: &Trainer, record: &IterationRecord) -> Result<()>;

    /// Most recent checkpoint written, reported on divergence.
    fn last_checkpoint(&self) -> Option<PathBuf> {
        None
    }
}

/// A hook that does nothing.
pub struct NoHook;

impl TrainHook for NoHook {
    fn after_step(&mut self, _: &Trainer, _: &IterationRecord) -> Result<()> {
        Ok(())
    }
}

/// Owns the model and optimizer state across iterations.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelBundle,
    pub state: OptimizerState,
    /// Number of completed iterations.
    pub iteration: usize,
    pub config: TrainConfig,
    epoch_cache: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: ModelBundle, config: TrainConfig) -> Result<Self> {
        let state = OptimizerState::new(&model);
        Trainer::resume(model, state, 0, config)
    }

    /// Continues a run after `iteration` completed iterations.
    pub fn resume(model: ModelBundle, state: OptimizerState, iteration: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.extension_enabled != model.extension.is_some() {
            return Err(Error::Config("extension_enabled does not match the model".into()));
        }
        Ok(Trainer {
            model,
            state,
            iteration,
            config,
            epoch_cache: None,
        })
    }

    /// Example indices of the minibatch for `iteration`: consecutive slices
    /// of a per-epoch permutation, dropping the ragged tail.
    pub fn batch_indices(&mut self, n: usize, iteration: usize) -> Vec<usize> {
        let bs = self.config.batch_size.min(n);
        let per_epoch = n / bs;
        let epoch = iteration / per_epoch;
        let pos = iteration % per_epoch;
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut substream(mix(self.config.seed, TAG_EPOCH), epoch as u64));
            self.epoch_cache = Some((epoch, perm));
        }
        let perm = &self.epoch_cache.as_ref().expect("filled above").1;
        perm[pos * bs..(pos + 1) * bs].to_vec()
    }

    /// Runs the next iteration on a minibatch drawn from `dataset`.
    pub fn step(&mut self, dataset: &MultimodalDataset) -> Result<IterationRecord> {
        if dataset.is_empty() {
            return Err(Error::Contract("training on an empty dataset".into()));
        }
        let idx = self.batch_indices(dataset.len(), self.iteration);
        let batch = dataset.batch(&idx);
        let rec = train_step(&mut self.model, &batch, &mut self.state, &self.config, self.iteration)?;
        self.iteration += 1;
        Ok(rec)
    }

    /// Iterates until `config.iterations` are complete.
    pub fn run(&mut self, dataset: &MultimodalDataset, hook: &mut dyn TrainHook) -> Result<Vec<IterationRecord>> {
        let mut records = Vec::new();
        while self.iteration < self.config.iterations {
            let rec = self.step(dataset).map_err(|e| match e {
                Error::TrainingDivergence { iteration, detail, .. } => Error::TrainingDivergence {
                    iteration,
                    detail,
                    last_checkpoint: hook.last_checkpoint(),
                },
                other => other,
            })?;
            hook.after_step(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Trains for `config.iterations` iterations from `model`.
pub fn train_loop(model: ModelBundle, dataset: &MultimodalDataset, config: &TrainConfig) -> Result<(ModelBundle, RunMetrics)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let records = trainer.run(dataset, &mut NoHook)?;
    Ok((
        trainer.model,
        RunMetrics {
            seed: config.seed,
            config_digest: String::new(),
            records,
            coherence: Vec::new(),
        },
    ))
}
