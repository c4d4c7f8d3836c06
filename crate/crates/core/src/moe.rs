//! Uniform mixture of per-modality Gaussian experts,
//! `q(z|X) = (1/m)·Σ_i N(z; μ_i, diag exp(logvar_i))`.

use crate::error::{Error, Result};
use crate::rng::{normal_vec, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Per-modality posterior parameters for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorBundle {
    pub experts: Vec<(Tensor, Tensor)>,
}

impl PosteriorBundle {
    pub fn new(experts: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let Some((m0, _)) = experts.first() else {
            return Err(Error::Contract("a posterior bundle needs at least one expert".into()));
        };
        let shape = m0.shape().to_vec();
        for (m, lv) in &experts {
            if m.shape() != shape.as_slice() || lv.shape() != shape.as_slice() {
                return Err(Error::dims("posterior bundle", &shape, m.shape()));
            }
        }
        Ok(PosteriorBundle { experts })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn batch(&self) -> usize {
        self.experts[0].0.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.experts[0].0.cols()
    }
}

/// `μ + exp(½·logvar)·ε` on the tape; gradients reach `μ` and `logvar`.
pub fn reparameterize(tape: &mut Tape, mean: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let noise = tape.mul(sd, eps)?;
    tape.add(mean, noise)
}

/// Per-row `log q(z|X)` on the tape, combining experts with log-sum-exp.
pub fn mixture_log_density_var(tape: &mut Tape, experts: &[(Var, Var)], z: Var) -> Result<Var> {
    if experts.is_empty() {
        return Err(Error::Contract("mixture of zero experts".into()));
    }
    let mut comps = Vec::with_capacity(experts.len());
    for &(mean, logvar) in experts {
        let var = tape.exp(logvar)?;
        comps.push(tape.gaussian_log_density(z, mean, var)?);
    }
    let stacked = tape.concat_cols(&comps)?;
    let lse = tape.logsumexp_rows(stacked)?;
    let log_m = tape.constant(1, 1, vec![(experts.len() as f64).ln()])?;
    tape.sub(lse, log_m)
}

/// One reparameterized draw per expert and batch row.
pub fn sample_per_expert(bundle: &PosteriorBundle, rng: &mut Rng) -> Result<Vec<Tensor>> {
    bundle
        .experts
        .iter()
        .map(|(mean, logvar)| {
            let eps = normal_vec(rng, mean.len());
            let values = mean
                .values()
                .iter()
                .zip(logvar.values())
                .zip(eps)
                .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                .collect();
            Tensor::new(mean.shape().to_vec(), values)
        })
        .collect()
}

/// `log q(z|X)` for each row of `z`.
pub fn mixture_log_density(bundle: &PosteriorBundle, z: &Tensor) -> Result<Vec<f64>> {
    // a single-row bundle is broadcast over all rows of z
    if z.cols() != bundle.latent_dim() || (z.rows() != bundle.batch() && bundle.batch() != 1) {
        return Err(Error::dims("mixture_log_density", z.shape(), bundle.experts[0].0.shape()));
    }
    let mut tape = Tape::new();
    let experts: Vec<(Var, Var)> = bundle
        .experts
        .iter()
        .map(|(m, lv)| (tape.leaf(m, false), tape.leaf(lv, false)))
        .collect();
    let zv = tape.leaf(z, false);
    let out = mixture_log_density_var(&mut tape, &experts, zv)?;
    Ok(tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::finite_difference_check;

    fn t(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn vanishing_variance_returns_mean() {
        let b = PosteriorBundle::new(vec![(t(2, 2, &[0.5, -1.0, 2.0, 3.0]), t(2, 2, &[-40.0; 4]))]).unwrap();
        let z = sample_per_expert(&b, &mut seeded(1)).unwrap();
        assert_eq!(z.len(), 1);
        for (a, m) in z[0].values().iter().zip(b.experts[0].0.values()) {
            assert!((a - m).abs() < 1e-8);
        }
    }

    #[test]
    fn standard_draw_moments() {
        let n = 100_000;
        let b = PosteriorBundle::new(vec![(Tensor::zeros(vec![n, 1]), Tensor::zeros(vec![n, 1]))]).unwrap();
        let z = sample_per_expert(&b, &mut seeded(2)).unwrap();
        let v = z[0].values();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.02, "{mean} {var}");
    }

    #[test]
    fn duplicated_experts_equal_single_expert() {
        let m = t(2, 2, &[0.1, 0.2, -0.3, 1.0]);
        let lv = t(2, 2, &[0.0, -0.5, 0.3, 0.1]);
        let one = PosteriorBundle::new(vec![(m.clone(), lv.clone())]).unwrap();
        let two = PosteriorBundle::new(vec![(m.clone(), lv.clone()), (m, lv)]).unwrap();
        let z = t(2, 2, &[0.4, -0.1, 2.0, 0.0]);
        let a = mixture_log_density(&one, &z).unwrap();
        let b = mixture_log_density(&two, &z).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_pair_at_midpoint() {
        let b = PosteriorBundle::new(vec![(t(1, 1, &[0.0]), t(1, 1, &[0.0])), (t(1, 1, &[2.0]), t(1, 1, &[0.0]))])
            .unwrap();
        let v = mixture_log_density(&b, &t(1, 1, &[1.0])).unwrap()[0];
        let log_phi1 = -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - log_phi1).abs() < 1e-12);
        assert!((v + 1.41894).abs() < 1e-5);
    }

    #[test]
    fn mixture_gradient_matches_finite_differences() {
        let m1 = t(2, 2, &[0.1, 0.2, -0.3, 1.0]);
        let m2 = t(2, 2, &[1.1, -0.7, 0.3, 0.2]);
        let lv1 = t(2, 2, &[0.0, -0.5, 0.3, 0.1]);
        let lv2 = t(2, 2, &[0.2, 0.1, -0.3, 0.4]);
        let z = t(2, 2, &[0.4, -0.1, 2.0, 0.0]);
        let f = |tp: &mut Tape, x: Var| {
            let e = vec![
                (x, tp.leaf(&lv1, false)),
                (tp.leaf(&m2, false), tp.leaf(&lv2, false)),
            ];
            let zv = tp.leaf(&z, false);
            let l = mixture_log_density_var(tp, &e, zv)?;
            tp.sum(l)
        };
        assert!(finite_difference_check(f, &m1, 1e-5).unwrap() < 1e-4);
    }
}
