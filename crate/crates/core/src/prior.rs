//! Exponentially tilted prior `p_α(z) ∝ exp(f_α(z))·p₀(z)`.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{EnergyNet, MlpBinding};
use crate::rng::{normal_vec, Rng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    #[default]
    StandardGaussian,
    StandardLaplace,
}

/// Untilted base density `p₀`, iid across coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceDistribution {
    pub kind: ReferenceKind,
    pub dim: usize,
}

impl ReferenceDistribution {
    pub fn new(kind: ReferenceKind, dim: usize) -> Self {
        ReferenceDistribution { kind, dim }
    }

    /// Per-row `log p₀(z)` recorded on the tape, `[batch × 1]`.
    pub fn log_density_var(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match self.kind {
            ReferenceKind::StandardGaussian => {
                let d = self.dim;
                let zero = tape.constant(1, d, vec![0.0; d])?;
                let one = tape.constant(1, d, vec![1.0; d])?;
                tape.gaussian_log_density(z, zero, one)
            }
            ReferenceKind::StandardLaplace => tape.laplace_log_density(z),
        }
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        match self.kind {
            ReferenceKind::StandardGaussian => z
                .iter()
                .map(|v| -0.5 * crate::tensor::LN_2PI - 0.5 * v * v)
                .sum(),
            ReferenceKind::StandardLaplace => z.iter().map(|v| -v.abs() - std::f64::consts::LN_2).sum(),
        }
    }

    /// `∇_z log p₀(z)`; the Laplace subgradient at 0 is taken as 0.
    pub fn grad_log_density(&self, z: f64) -> f64 {
        match self.kind {
            ReferenceKind::StandardGaussian => -z,
            ReferenceKind::StandardLaplace => {
                if z > 0.0 {
                    -1.0
                } else if z < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sample_one(&self, rng: &mut Rng) -> f64 {
        match self.kind {
            ReferenceKind::StandardGaussian => normal_vec(rng, 1)[0],
            ReferenceKind::StandardLaplace => {
                let e: f64 = Exp1.sample(rng);
                let sign: bool = rand::Rng::random(rng);
                if sign {
                    e
                } else {
                    -e
                }
            }
        }
    }

    /// `n` iid draws as an `[n × dim]` tensor.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
        let values = match self.kind {
            ReferenceKind::StandardGaussian => normal_vec(rng, n * self.dim),
            ReferenceKind::StandardLaplace => (0..n * self.dim).map(|_| self.sample_one(rng)).collect(),
        };
        Tensor::matrix(n, self.dim, values).expect("shape")
    }
}

/// Cached Monte-Carlo estimate of `log Z(α)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionEstimate {
    pub log_z: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EbmPrior {
    energy: EnergyNet,
    reference: ReferenceDistribution,
    partition: Option<PartitionEstimate>,
}

impl EbmPrior {
    pub fn new(energy: EnergyNet, reference: ReferenceDistribution) -> Result<Self> {
        if energy.input_dim() != reference.dim {
            return Err(Error::dims("ebm prior", &[energy.input_dim()], &[reference.dim]));
        }
        Ok(EbmPrior {
            energy,
            reference,
            partition: None,
        })
    }

    pub fn energy(&self) -> &EnergyNet {
        &self.energy
    }

    /// Mutable access to `α`; drops any cached partition estimate.
    pub fn energy_mut(&mut self) -> &mut EnergyNet {
        self.partition = None;
        &mut self.energy
    }

    pub fn reference(&self) -> &ReferenceDistribution {
        &self.reference
    }

    pub fn dim(&self) -> usize {
        self.reference.dim
    }

    pub fn partition(&self) -> Option<PartitionEstimate> {
        self.partition
    }

    /// `f_α(z) + log p₀(z)` recorded on a tape, `[batch × 1]`.
    pub fn log_unnormalized_var(&self, tape: &mut Tape, binding: &MlpBinding, z: Var) -> Result<Var> {
        let f = self.energy.forward(tape, binding, z)?;
        let lp0 = self.reference.log_density_var(tape, z)?;
        tape.add(f, lp0)
    }
}

fn check_dim(prior: &EbmPrior, z: &Tensor, op: &'static str) -> Result<()> {
    if z.cols() != prior.dim() {
        return Err(Error::dims(op, z.shape(), &[prior.dim()]));
    }
    Ok(())
}

/// `log p_α(z) + log Z(α)` per row.
pub fn log_unnormalized_density(prior: &EbmPrior, z: &Tensor) -> Result<Vec<f64>> {
    check_dim(prior, z, "log_unnormalized_density")?;
    let mut tape = Tape::new();
    let b = prior.energy.bind(&mut tape, false);
    let zv = tape.leaf(z, false);
    let out = prior.log_unnormalized_var(&mut tape, &b, zv)?;
    Ok(tape.value(out).to_vec())
}

/// `∇_z [f_α(z) + log p₀(z)]` for each row of `z`.
pub fn grad_log_density_wrt_z(prior: &EbmPrior, z: &Tensor) -> Result<Tensor> {
    check_dim(prior, z, "grad_log_density_wrt_z")?;
    let mut tape = Tape::new();
    let b = prior.energy.bind(&mut tape, false);
    let zv = tape.leaf(z, true);
    let f = prior.energy.forward(&mut tape, &b, zv)?;
    // rows are independent, so the gradient of the sum is the per-row gradient
    let total = tape.sum(f)?;
    let mut g = tape.backward(total)?.get_or_zeros(zv, z.len());
    for (gv, &zk) in g.iter_mut().zip(z.values()) {
        *gv += prior.reference.grad_log_density(zk);
    }
    Tensor::new(z.shape().to_vec(), g)
}

const PARTITION_CHUNK: usize = 4096;

/// `log E_{p₀}[exp f_α(z)]` from `n_samples` reference draws, accumulated
/// with a running log-sum-exp. The estimate is cached on the prior.
pub fn estimate_log_partition(prior: &mut EbmPrior, n_samples: usize, rng: &mut Rng) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Contract("estimate_log_partition needs at least one sample".into()));
    }
    let mut running_max = f64::NEG_INFINITY;
    let mut running_sum = 0.0;
    let mut remaining = n_samples;
    while remaining > 0 {
        let n = remaining.min(PARTITION_CHUNK);
        remaining -= n;
        let z = prior.reference.sample(n, rng);
        let f = crate::nets::energy_forward(&prior.energy, &z)?;
        for &v in f.values() {
            if v > running_max {
                running_sum = running_sum * (running_max - v).exp() + 1.0;
                running_max = v;
            } else {
                running_sum += (v - running_max).exp();
            }
        }
    }
    let log_z = running_max + running_sum.ln() - (n_samples as f64).ln();
    prior.partition = Some(PartitionEstimate { log_z, n_samples });
    Ok(log_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::finite_difference_check;

    fn gaussian(dim: usize, energy: EnergyNet) -> EbmPrior {
        EbmPrior::new(energy, ReferenceDistribution::new(ReferenceKind::StandardGaussian, dim)).unwrap()
    }

    #[test]
    fn zero_energy_reference_values() {
        let p = gaussian(2, EnergyNet::zero(2));
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let v = log_unnormalized_density(&p, &z).unwrap()[0];
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

        let p = EbmPrior::new(
            EnergyNet::zero(1),
            ReferenceDistribution::new(ReferenceKind::StandardLaplace, 1),
        )
        .unwrap();
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let v = log_unnormalized_density(&p, &z).unwrap()[0];
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_shifts_density() {
        let base = gaussian(2, EnergyNet::linear(vec![0.3, -0.2], 0.0));
        let shifted = gaussian(2, EnergyNet::linear(vec![0.3, -0.2], 1.25));
        let z = Tensor::matrix(3, 2, vec![0.1, 2.0, -1.0, 0.5, 3.0, -3.0]).unwrap();
        let a = log_unnormalized_density(&base, &z).unwrap();
        let b = log_unnormalized_density(&shifted, &z).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_untilted_gaussian_is_minus_z() {
        let p = gaussian(2, EnergyNet::zero(2));
        let z = Tensor::matrix(2, 2, vec![0.5, -1.5, 2.0, 0.25]).unwrap();
        let g = grad_log_density_wrt_z(&p, &z).unwrap();
        let neg: Vec<f64> = z.values().iter().map(|v| -v).collect();
        assert_eq!(g.values(), neg.as_slice());
    }

    #[test]
    fn gradient_of_quadratic_tilt() {
        let a = 3.0;
        let p = gaussian(1, EnergyNet::quadratic(1, a));
        let z = Tensor::matrix(3, 1, vec![1.0, -0.4, 2.5]).unwrap();
        let g = grad_log_density_wrt_z(&p, &z).unwrap();
        for (gv, zv) in g.values().iter().zip(z.values()) {
            assert!((gv + (1.0 + a) * zv).abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_subgradient_at_zero() {
        let p = EbmPrior::new(
            EnergyNet::zero(2),
            ReferenceDistribution::new(ReferenceKind::StandardLaplace, 2),
        )
        .unwrap();
        let z = Tensor::matrix(1, 2, vec![0.0, -2.0]).unwrap();
        assert_eq!(grad_log_density_wrt_z(&p, &z).unwrap().values(), &[0.0, 1.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = crate::nets::ArchSpec {
            energy_units: 12,
            ..Default::default()
        };
        let mut e = EnergyNet::init(&arch, &mut seeded(3)).unwrap();
        let last = e.mlp.layers.len() - 1;
        for (i, w) in e.mlp.layers[last].weight.values_mut().iter_mut().enumerate() {
            *w = 0.3 * ((i as f64) * 1.3).cos();
        }
        let p = gaussian(2, e);
        let z = Tensor::matrix(2, 2, vec![0.3, -0.8, 1.2, 0.4]).unwrap();
        let analytic = grad_log_density_wrt_z(&p, &z).unwrap();
        let err = finite_difference_check(
            |t, zv| {
                let b = p.energy().bind(t, false);
                let l = p.log_unnormalized_var(t, &b, zv)?;
                t.sum(l)
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        assert!(analytic.is_finite());
    }

    #[test]
    fn zero_energy_partition_is_exactly_zero() {
        let mut p = gaussian(2, EnergyNet::zero(2));
        for n in [1, 7, 5000] {
            assert_eq!(estimate_log_partition(&mut p, n, &mut seeded(1)).unwrap(), 0.0);
        }
        assert_eq!(p.partition().unwrap().n_samples, 5000);
    }

    #[test]
    fn partition_cache_invalidated_by_energy_access() {
        let mut p = gaussian(1, EnergyNet::zero(1));
        estimate_log_partition(&mut p, 10, &mut seeded(1)).unwrap();
        assert!(p.partition().is_some());
        let _ = p.energy_mut();
        assert!(p.partition().is_none());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = gaussian(2, EnergyNet::zero(2));
        let z = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(log_unnormalized_density(&p, &z), Err(Error::Dimension { .. })));
    }
}
