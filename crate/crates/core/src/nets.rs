//! Multilayer perceptrons for the generators, encoders and the energy term.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, Rng};
use crate::tensor::{Activation, Gradients, Tape, Tensor, Var};

/// One affine map; `weight` is `[out × in]`, `bias` is `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Layer extents `[in, h1, ..., out]` plus activations.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub extents: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Tape handles for each layer's `(weight, bias)`.
#[derive(Clone, Debug)]
pub struct MlpBinding(Vec<(Var, Var)>);

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        if spec.extents.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output extents".into()));
        }
        if spec.extents[..spec.extents.len() - 1].iter().any(|&e| e == 0) {
            return Err(Error::Config(format!("zero extent in {:?}", spec.extents)));
        }
        let layers = spec
            .extents
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Ok(Layer {
                    weight: Tensor::matrix(fan_out, fan_in, weights)?,
                    bias: Tensor::zeros(vec![fan_out]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpParams {
            layers,
            hidden_activation: spec.hidden_activation,
            output_activation: spec.output_activation,
        })
    }

    /// Assembles explicit layers, checking that extents chain.
    pub fn from_layers(
        layers: Vec<Layer>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::dims("mlp bias", l.weight.shape(), l.bias.shape()));
            }
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dims("mlp chain", w[0].weight.shape(), w[1].weight.shape()));
            }
        }
        Ok(MlpParams {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> MlpBinding {
        MlpBinding(
            self.layers
                .iter()
                .map(|l| (tape.leaf(&l.weight, track), tape.leaf(&l.bias, track)))
                .collect(),
        )
    }

    pub fn forward(&self, tape: &mut Tape, binding: &MlpBinding, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in binding.0.iter().enumerate() {
            let a = tape.matmul_t(h, w)?;
            let a = tape.add(a, b)?;
            let act = if i == last {
                self.output_activation
            } else {
                self.hidden_activation
            };
            h = tape.activation(a, act)?;
        }
        Ok(h)
    }

    /// Untracked forward pass on a `[batch × in]` tensor.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.leaf(x, false);
        let y = self.forward(&mut tape, &b, xv)?;
        Ok(tape.to_tensor(y))
    }

    /// Gradients in [`MlpParams::params`] order.
    pub fn gradients(&self, binding: &MlpBinding, grads: &Gradients) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .zip(&binding.0)
            .flat_map(|(l, &(w, b))| {
                [
                    grads.get_or_zeros(w, l.weight.len()),
                    grads.get_or_zeros(b, l.bias.len()),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.l{i}.w"), format!("{prefix}.l{i}.b")])
            .collect()
    }

    /// Zeroes the final affine map so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.len() - 1;
        let l = &mut self.layers[last];
        l.weight.values_mut().fill(0.0);
        l.bias.values_mut().fill(0.0);
    }
}

/// Network architecture shared by all modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub latent_dim: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    /// Width `D` of the energy network.
    pub energy_units: usize,
    /// Number of affine layers `L` in the energy network.
    pub energy_layers: usize,
    pub energy_activation: Activation,
    /// Saturation level `B` of the energy output, `f = B·tanh(h/B)`;
    /// 0 leaves the output unbounded.
    pub energy_bound: f64,
    pub observation_variance: f64,
    /// Extent of each modality-specific latent in the extended model.
    pub w_dim: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            latent_dim: 2,
            hidden_units: 64,
            hidden_layers: 2,
            activation: Activation::Tanh,
            energy_units: 64,
            energy_layers: 4,
            energy_activation: Activation::Softplus,
            energy_bound: 5.0,
            observation_variance: 1.0,
            w_dim: 0,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_units == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("latent_dim, hidden_units and hidden_layers must be positive".into()));
        }
        if self.energy_units == 0 || self.energy_layers < 2 {
            return Err(Error::Config("energy net needs energy_units > 0 and energy_layers >= 2".into()));
        }
        if !(self.energy_bound >= 0.0) || !self.energy_bound.is_finite() {
            return Err(Error::Config("energy_bound must be a non-negative number".into()));
        }
        if !(self.observation_variance > 0.0) {
            return Err(Error::Config("observation_variance must be positive".into()));
        }
        Ok(())
    }

    fn trunk_extents(&self, input: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(std::iter::repeat(self.hidden_units).take(self.hidden_layers))
            .collect()
    }
}

/// Decoder `x = G(z) + ε`, with `ε ~ N(0, observation_variance · I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub mlp: MlpParams,
    pub observation_variance: f64,
}

impl GeneratorNet {
    pub fn init(arch: &ArchSpec, input_dim: usize, data_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut extents = arch.trunk_extents(input_dim);
        extents.push(data_dim);
        let mlp = MlpParams::init(
            &MlpSpec {
                extents,
                hidden_activation: arch.activation,
                output_activation: Activation::Identity,
            },
            rng,
        )?;
        Ok(GeneratorNet {
            mlp,
            observation_variance: arch.observation_variance,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }
}

/// Decodes `z`; with `sample_noise` the observation noise is added.
pub fn generator_forward(net: &GeneratorNet, z: &Tensor, sample_noise: bool, rng: &mut Rng) -> Result<Tensor> {
    if z.cols() != net.input_dim() {
        return Err(Error::dims("generator_forward", z.shape(), &[net.input_dim()]));
    }
    let mut out = net.mlp.forward_values(z)?;
    if sample_noise {
        let sd = net.observation_variance.sqrt();
        let eps = normal_vec(rng, out.len());
        for (o, e) in out.values_mut().iter_mut().zip(eps) {
            *o += sd * e;
        }
    }
    Ok(out)
}

/// Diagonal Gaussian encoder with a shared trunk and two linear heads.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    pub trunk: MlpParams,
    pub mean_head: MlpParams,
    pub logvar_head: MlpParams,
}

#[derive(Clone, Debug)]
pub struct EncoderBinding {
    trunk: MlpBinding,
    mean: MlpBinding,
    logvar: MlpBinding,
}

impl EncoderNet {
    pub fn init(arch: &ArchSpec, data_dim: usize, latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        let trunk = MlpParams::init(
            &MlpSpec {
                extents: arch.trunk_extents(data_dim),
                hidden_activation: arch.activation,
                output_activation: arch.activation,
            },
            rng,
        )?;
        let head = |rng: &mut Rng| {
            MlpParams::init(
                &MlpSpec {
                    extents: vec![arch.hidden_units, latent_dim],
                    hidden_activation: Activation::Identity,
                    output_activation: Activation::Identity,
                },
                rng,
            )
        };
        let mean_head = head(rng)?;
        let logvar_head = head(rng)?;
        Ok(EncoderNet {
            trunk,
            mean_head,
            logvar_head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_head.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> EncoderBinding {
        EncoderBinding {
            trunk: self.trunk.bind(tape, track),
            mean: self.mean_head.bind(tape, track),
            logvar: self.logvar_head.bind(tape, track),
        }
    }

    /// Returns `(mean, logvar)` handles.
    pub fn forward(&self, tape: &mut Tape, b: &EncoderBinding, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(tape, &b.trunk, x)?;
        let mean = self.mean_head.forward(tape, &b.mean, h)?;
        let logvar = self.logvar_head.forward(tape, &b.logvar, h)?;
        Ok((mean, logvar))
    }

    pub fn gradients(&self, b: &EncoderBinding, grads: &Gradients) -> Vec<Vec<f64>> {
        let mut g = self.trunk.gradients(&b.trunk, grads);
        g.extend(self.mean_head.gradients(&b.mean, grads));
        g.extend(self.logvar_head.gradients(&b.logvar, grads));
        g
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.trunk.params();
        p.extend(self.mean_head.params());
        p.extend(self.logvar_head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.trunk.params_mut();
        p.extend(self.mean_head.params_mut());
        p.extend(self.logvar_head.params_mut());
        p
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut n = self.trunk.param_names(&format!("{prefix}.trunk"));
        n.extend(self.mean_head.param_names(&format!("{prefix}.mean")));
        n.extend(self.logvar_head.param_names(&format!("{prefix}.logvar")));
        n
    }
}

/// Returns `(mean, logvar)` for a `[batch × D]` input.
pub fn encoder_forward(net: &EncoderNet, x: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.cols() != net.input_dim() {
        return Err(Error::dims("encoder_forward", x.shape(), &[net.input_dim()]));
    }
    let mut tape = Tape::new();
    let b = net.bind(&mut tape, false);
    let xv = tape.leaf(x, false);
    let (m, lv) = net.forward(&mut tape, &b, xv)?;
    Ok((tape.to_tensor(m), tape.to_tensor(lv)))
}

/// Fixed input transform applied before the energy MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EnergyFeatures {
    #[default]
    Identity,
    /// Elementwise `z ⊙ z`; with one linear layer this gives quadratic tilts.
    Square,
}

/// Scalar function `f_α(z)` realized as an MLP `R^d → R`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyNet {
    pub mlp: MlpParams,
    pub features: EnergyFeatures,
    /// Output saturation `B > 0`, or `None` for an unbounded output.
    pub bound: Option<f64>,
}

impl EnergyNet {
    /// `energy_layers` affine maps of width `energy_units`; the last map is
    /// zero so the net starts at `f ≡ 0`.
    pub fn init(arch: &ArchSpec, rng: &mut Rng) -> Result<Self> {
        let mut extents = vec![arch.latent_dim];
        extents.extend(std::iter::repeat(arch.energy_units).take(arch.energy_layers - 1));
        extents.push(1);
        let mut mlp = MlpParams::init(
            &MlpSpec {
                extents,
                hidden_activation: arch.energy_activation,
                output_activation: Activation::Identity,
            },
            rng,
        )?;
        mlp.zero_output_layer();
        Ok(EnergyNet {
            mlp,
            features: EnergyFeatures::Identity,
            bound: (arch.energy_bound > 0.0).then_some(arch.energy_bound),
        })
    }

    /// `f(z) = −½·a·Σ_k z_k²` on `R^dim`.
    pub fn quadratic(dim: usize, a: f64) -> Self {
        let layer = Layer {
            weight: Tensor::matrix(1, dim, vec![-0.5 * a; dim]).expect("shape"),
            bias: Tensor::zeros(vec![1]),
        };
        EnergyNet {
            mlp: MlpParams::from_layers(vec![layer], Activation::Identity, Activation::Identity)
                .expect("single layer"),
            features: EnergyFeatures::Square,
            bound: None,
        }
    }

    /// `f(z) = w·z + c`.
    pub fn linear(weights: Vec<f64>, offset: f64) -> Self {
        let dim = weights.len();
        let layer = Layer {
            weight: Tensor::matrix(1, dim, weights).expect("shape"),
            bias: Tensor::new(vec![1], vec![offset]).expect("shape"),
        };
        EnergyNet {
            mlp: MlpParams::from_layers(vec![layer], Activation::Identity, Activation::Identity)
                .expect("single layer"),
            features: EnergyFeatures::Identity,
            bound: None,
        }
    }

    /// The constant-zero energy on `R^dim`.
    pub fn zero(dim: usize) -> Self {
        EnergyNet::linear(vec![0.0; dim], 0.0)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> MlpBinding {
        self.mlp.bind(tape, track)
    }

    /// `[batch × d] → [batch × 1]`.
    pub fn forward(&self, tape: &mut Tape, b: &MlpBinding, z: Var) -> Result<Var> {
        let input = match self.features {
            EnergyFeatures::Identity => z,
            EnergyFeatures::Square => tape.mul(z, z)?,
        };
        let h = self.mlp.forward(tape, b, input)?;
        match self.bound {
            Some(bound) => {
                let t = tape.scale(h, 1.0 / bound)?;
                let t = tape.tanh(t)?;
                tape.scale(t, bound)
            }
            None => Ok(h),
        }
    }

    pub fn gradients(&self, b: &MlpBinding, grads: &Gradients) -> Vec<Vec<f64>> {
        self.mlp.gradients(b, grads)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        self.mlp.param_names(prefix)
    }
}

/// `f_α(z)` per row, `[batch × 1]`.
pub fn energy_forward(net: &EnergyNet, z: &Tensor) -> Result<Tensor> {
    if z.cols() != net.input_dim() {
        return Err(Error::dims("energy_forward", z.shape(), &[net.input_dim()]));
    }
    let mut tape = Tape::new();
    let b = net.bind(&mut tape, false);
    let zv = tape.leaf(z, false);
    let f = net.forward(&mut tape, &b, zv)?;
    Ok(tape.to_tensor(f))
}
