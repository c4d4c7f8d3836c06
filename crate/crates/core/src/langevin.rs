//! Short-run unadjusted Langevin dynamics on the tilted prior:
//! `z' = z + (s²/2)·∇_z log p_α(z) + s·ε`.
//!
//! Each chain owns a ChaCha8 substream keyed by `(seed, chain index)`, so
//! results do not depend on how chains are grouped or scheduled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{grad_log_density_wrt_z, EbmPrior};
use crate::rng::{normal_vec, substream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
    pub n_chains: usize,
    /// Steps (in `0..=steps`) at which the chain state is recorded.
    pub snapshot_steps: Vec<usize>,
    pub seed: u64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            steps: 50,
            step_size: 0.1,
            n_chains: 64,
            snapshot_steps: Vec::new(),
            seed: 0,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("langevin.steps must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config("langevin.step_size must be positive".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::Config("langevin.n_chains must be >= 1".into()));
        }
        if self.snapshot_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("langevin.snapshot_steps must be strictly increasing".into()));
        }
        if self.snapshot_steps.iter().any(|&s| s > self.steps) {
            return Err(Error::Config("langevin.snapshot_steps must lie within [0, steps]".into()));
        }
        Ok(())
    }
}

/// Chain states recorded at the configured steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainTrace {
    pub snapshots: Vec<(usize, Tensor)>,
}

/// One Langevin update with per-chain generators; `rngs[i]` drives chain `i`.
pub fn langevin_step(prior: &EbmPrior, z: &Tensor, s: f64, rngs: &mut [Rng]) -> Result<Tensor> {
    if !(s > 0.0) {
        return Err(Error::Contract(format!("Langevin step size must be positive, got {s}")));
    }
    step_unchecked(prior, z, s, rngs, 0)
}

fn step_unchecked(prior: &EbmPrior, z: &Tensor, s: f64, rngs: &mut [Rng], step: usize) -> Result<Tensor> {
    if rngs.len() != z.rows() {
        return Err(Error::dims("langevin_step", z.shape(), &[rngs.len()]));
    }
    let grad = match grad_log_density_wrt_z(prior, z) {
        Ok(g) => g,
        Err(Error::NonFinite { .. }) => {
            let chain = (0..z.rows())
                .find(|&i| grad_log_density_wrt_z(prior, &z.select_rows(&[i])).is_err())
                .unwrap_or(0);
            return Err(Error::SamplerDivergence { chain, step });
        }
        Err(e) => return Err(e),
    };
    let d = z.cols();
    let half = 0.5 * s * s;
    let mut out = Vec::with_capacity(z.len());
    for (i, rng) in rngs.iter_mut().enumerate() {
        let g = grad.row(i);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDivergence { chain: i, step });
        }
        let eps = normal_vec(rng, d);
        for k in 0..d {
            out.push(z.row(i)[k] + half * g[k] + s * eps[k]);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        let chain = out.iter().position(|v| !v.is_finite()).unwrap_or(0) / d.max(1);
        return Err(Error::SamplerDivergence { chain, step });
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Test hook that skips the positive-step-size precondition.
#[doc(hidden)]
pub fn langevin_step_unchecked(prior: &EbmPrior, z: &Tensor, s: f64, rngs: &mut [Rng]) -> Result<Tensor> {
    step_unchecked(prior, z, s, rngs, 0)
}

/// Generator for chain `index` under `seed`.
pub fn chain_rng(seed: u64, index: usize) -> Rng {
    substream(seed, index as u64)
}

/// Chains per parallel work unit.
const CHUNK: usize = 256;

/// Draws `z₀ ~ p₀` for every chain and advances `steps` Langevin updates.
pub fn run_chains(prior: &EbmPrior, config: &LangevinConfig) -> Result<(Tensor, ChainTrace)> {
    config.validate()?;
    let starts: Vec<usize> = (0..config.n_chains).step_by(CHUNK).collect();
    let pieces = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(config.n_chains);
            let mut rngs: Vec<Rng> = (start..end).map(|i| chain_rng(config.seed, i)).collect();
            let mut values = Vec::with_capacity((end - start) * prior.dim());
            for rng in rngs.iter_mut() {
                for _ in 0..prior.dim() {
                    values.push(prior.reference().sample_one(rng));
                }
            }
            let z = Tensor::matrix(end - start, prior.dim(), values)?;
            run_from(prior, z, config, &mut rngs, start)
        })
        .collect::<Result<Vec<_>>>()?;

    let finals: Vec<Tensor> = pieces.iter().map(|(z, _)| z.clone()).collect();
    let mut trace = ChainTrace::default();
    for (k, &step) in config.snapshot_steps.iter().enumerate() {
        let parts: Vec<Tensor> = pieces.iter().map(|(_, s)| s[k].clone()).collect();
        trace.snapshots.push((step, Tensor::vstack(&parts)?));
    }
    Ok((Tensor::vstack(&finals)?, trace))
}

/// Runs `config.steps` updates from a given initial batch, using the chain
/// generators in `rngs`. `offset` is the global index of the first chain and
/// is only used in error reports.
pub fn run_from(
    prior: &EbmPrior,
    mut z: Tensor,
    config: &LangevinConfig,
    rngs: &mut [Rng],
    offset: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut snaps = Vec::with_capacity(config.snapshot_steps.len());
    let mut next = config.snapshot_steps.iter().peekable();
    if next.peek() == Some(&&0) {
        snaps.push(z.clone());
        next.next();
    }
    for t in 1..=config.steps {
        z = step_unchecked(prior, &z, config.step_size, rngs, t).map_err(|e| match e {
            Error::SamplerDivergence { chain, step } => Error::SamplerDivergence {
                chain: chain + offset,
                step,
            },
            other => other,
        })?;
        if next.peek() == Some(&&t) {
            snaps.push(z.clone());
            next.next();
        }
    }
    Ok((z, snaps))
}
