mod common;

use common::*;
use ebmmoe::data::{generate, DatasetFamily, DatasetSpec};
use ebmmoe::eval::{all_agree_fraction, cross_coherence, joint_coherence, CrossOptions, Predictor};
use ebmmoe::langevin::{chain_rng, run_chains, run_from, LangevinConfig};
use ebmmoe::moe::{mixture_log_density, reparameterize, PosteriorBundle};
use ebmmoe::nets::{energy_forward, ArchSpec, EnergyNet, GeneratorNet};
use ebmmoe::prior::{estimate_log_partition, log_unnormalized_density};
use ebmmoe::rng::seeded;
use ebmmoe::tensor::{finite_difference_check, Activation, Tape, Tensor};
use ebmmoe::trainer::{grad_ebm, ModelBundle};
use ebmmoe::prior::ReferenceKind;
use ebmmoe::Result;
use proptest::prelude::*;

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// Shape `(r, c)` with entries for an `[r × c]` block.
fn block(max_r: usize, max_c: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| (Just(r), Just(c), values(r * c, -2.0, 2.0)))
}

fn away_from_zero(v: &[f64]) -> bool {
    v.iter().all(|x| x.abs() > 1e-2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unary_primitives_match_finite_differences((r, c, v) in block(4, 4), seed in 0u64..1000) {
        let x = Tensor::matrix(r, c, v.clone()).unwrap();
        type Op = fn(&mut Tape, ebmmoe::tensor::Var) -> Result<ebmmoe::tensor::Var>;
        let mut ops: Vec<(&str, Op)> = vec![
            ("exp", |t, x| t.exp(x)),
            ("tanh", |t, x| t.tanh(x)),
            ("softplus", |t, x| t.softplus(x)),
            ("scale", |t, x| t.scale(x, -1.7)),
            ("row_sum", |t, x| t.row_sum(x)),
            ("mean", |t, x| t.mean(x)),
            ("logsumexp_rows", |t, x| t.logsumexp_rows(x)),
            ("concat_cols", |t, x| t.concat_cols(&[x, x])),
            ("mul_self", |t, x| t.mul(x, x)),
        ];
        if away_from_zero(&v) {
            ops.push(("relu", |t, x| t.relu(x)));
            ops.push(("laplace_log_density", |t, x| t.laplace_log_density(x)));
        }
        for (name, op) in ops {
            let err = finite_difference_check(|t, x| {
                let y = op(t, x)?;
                weighted_sum(t, y, seed)
            }, &x, 1e-6).unwrap();
            prop_assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn binary_primitives_match_finite_differences(
        (r, k, a) in block(3, 4),
        c in 1usize..4,
        seed in 0u64..1000,
    ) {
        let x = Tensor::matrix(r, k, a).unwrap();
        let b = random_tensor(k, c, 1.0, seed);
        let bt = random_tensor(c, k, 1.0, seed + 1);
        let row = random_tensor(1, k, 1.0, seed + 2);
        let same = random_tensor(r, k, 1.0, seed + 3);
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape, ebmmoe::tensor::Var) -> Result<ebmmoe::tensor::Var>>)> = vec![
            ("matmul", Box::new(|t, x| { let bv = t.constant(k, c, b.values().to_vec())?; t.matmul(x, bv) })),
            ("matmul_rhs", Box::new(|t, x| { let av = t.constant(c, r, random_tensor(c, r, 1.0, seed + 4).into_values())?; t.matmul(av, x) })),
            ("matmul_t", Box::new(|t, x| { let bv = t.constant(c, k, bt.values().to_vec())?; t.matmul_t(x, bv) })),
            ("add_broadcast", Box::new(|t, x| { let rv = t.constant(1, k, row.values().to_vec())?; t.add(x, rv) })),
            ("sub", Box::new(|t, x| { let sv = t.constant(r, k, same.values().to_vec())?; t.sub(sv, x) })),
            ("mul_broadcast", Box::new(|t, x| { let rv = t.constant(1, k, row.values().to_vec())?; t.mul(x, rv) })),
        ];
        for (name, f) in checks {
            let err = finite_difference_check(|t, x| { let y = f(t, x)?; weighted_sum(t, y, seed) }, &x, 1e-6).unwrap();
            prop_assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn gaussian_density_gradients_in_every_argument((r, c, v) in block(4, 3), seed in 0u64..1000) {
        let x = Tensor::matrix(r, c, v).unwrap();
        let mean = random_tensor(r, c, 1.0, seed);
        let logvar = random_tensor(1, c, 0.5, seed + 1);
        let other = random_tensor(r, c, 1.0, seed + 2);
        let wrt_x = finite_difference_check(|t, x| {
            let m = t.constant(r, c, mean.values().to_vec())?;
            let lv = t.constant(1, c, logvar.values().to_vec())?;
            let var = t.exp(lv)?;
            let y = t.gaussian_log_density(x, m, var)?;
            weighted_sum(t, y, seed)
        }, &x, 1e-6).unwrap();
        let wrt_mean = finite_difference_check(|t, m| {
            let xv = t.constant(r, c, other.values().to_vec())?;
            let lv = t.constant(1, c, logvar.values().to_vec())?;
            let var = t.exp(lv)?;
            let y = t.gaussian_log_density(xv, m, var)?;
            weighted_sum(t, y, seed)
        }, &x, 1e-6).unwrap();
        let wrt_logvar = finite_difference_check(|t, lv| {
            let xv = t.constant(r, c, other.values().to_vec())?;
            let m = t.constant(r, c, mean.values().to_vec())?;
            let var = t.exp(lv)?;
            let y = t.gaussian_log_density(xv, m, var)?;
            weighted_sum(t, y, seed)
        }, &Tensor::matrix(r, c, x.values().iter().map(|v| 0.3 * v).collect()).unwrap(), 1e-6).unwrap();
        prop_assert!(wrt_x < 1e-4 && wrt_mean < 1e-4 && wrt_logvar < 1e-4, "{wrt_x} {wrt_mean} {wrt_logvar}");
    }

    #[test]
    fn backward_is_linear_in_the_loss((r, c, v) in block(3, 3), seed in 0u64..1000) {
        let x = Tensor::matrix(r, c, v).unwrap();
        let grad_of = |which: u8| -> Vec<f64> {
            let mut t = Tape::new();
            let xv = t.leaf(&x, true);
            let a = t.tanh(xv).unwrap();
            let la = weighted_sum(&mut t, a, seed).unwrap();
            let b = t.exp(xv).unwrap();
            let lb = weighted_sum(&mut t, b, seed + 1).unwrap();
            let out = match which {
                0 => la,
                1 => lb,
                _ => t.add(la, lb).unwrap(),
            };
            t.backward(out).unwrap().get_or_zeros(xv, x.len())
        };
        let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..x.len() {
            prop_assert!((ga[i] + gb[i] - gs[i]).abs() <= 1e-12 * (1.0 + gs[i].abs()));
        }
    }

    #[test]
    fn tape_replay_is_bitwise((r, c, v) in block(4, 4), seed in 0u64..1000) {
        let x = Tensor::matrix(r, c, v).unwrap();
        let mlp = random_mlp(&[c, 5, 2], Activation::Softplus, 0.7, seed);
        let run = || {
            let mut t = Tape::new();
            let b = mlp.bind(&mut t, true);
            let xv = t.leaf(&x, true);
            let y = mlp.forward(&mut t, &b, xv).unwrap();
            let s = weighted_sum(&mut t, y, seed).unwrap();
            let g = t.backward(s).unwrap();
            (t.value(y).to_vec(), g.get_or_zeros(xv, x.len()), mlp.gradients(&b, &g))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn zeroed_energy_output_is_exactly_zero(vals in values(10, -1e3, 1e3), seed in 0u64..100) {
        let arch = ArchSpec::default();
        let net = EnergyNet::init(&arch, &mut seeded(seed)).unwrap();
        let z = Tensor::matrix(5, 2, vals).unwrap();
        let f = energy_forward(&net, &z).unwrap();
        prop_assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_outputs_stay_finite_for_large_inputs(vals in values(12, -1e3, 1e3), seed in 0u64..100) {
        let arch = ArchSpec { energy_bound: 5.0, ..ArchSpec::default() };
        let mut rng = seeded(seed);
        let mut energy = EnergyNet::init(&arch, &mut rng).unwrap();
        let last = energy.mlp.layers.len() - 1;
        energy.mlp.layers[last] = random_mlp(&[arch.energy_units, 1], Activation::Identity, 1.0, seed).layers[0].clone();
        let z = Tensor::matrix(6, 2, vals).unwrap();
        prop_assert!(energy_forward(&energy, &z).unwrap().is_finite());
        let g = GeneratorNet::init(&arch, 2, 3, &mut rng).unwrap();
        prop_assert!(ebmmoe::nets::generator_forward(&g, &z, true, &mut rng).unwrap().is_finite());
        let enc = ebmmoe::nets::EncoderNet::init(&arch, 2, 2, &mut rng).unwrap();
        let (m, lv) = ebmmoe::nets::encoder_forward(&enc, &z).unwrap();
        prop_assert!(m.is_finite() && lv.is_finite());
    }

    #[test]
    fn zero_energy_density_is_the_reference(vals in values(8, -5.0, 5.0)) {
        for kind in [ReferenceKind::StandardGaussian, ReferenceKind::StandardLaplace] {
            let p = ebmmoe::prior::EbmPrior::new(EnergyNet::zero(2), ebmmoe::prior::ReferenceDistribution::new(kind, 2)).unwrap();
            let z = Tensor::matrix(4, 2, vals.clone()).unwrap();
            let got = log_unnormalized_density(&p, &z).unwrap();
            for r in 0..4 {
                prop_assert_eq!(got[r], p.reference().log_density(z.row(r)));
            }
        }
    }

    #[test]
    fn mixture_sandwich_and_permutation(
        m in 1usize..5,
        seed in 0u64..1000,
    ) {
        let experts: Vec<(Tensor, Tensor)> = (0..m)
            .map(|i| (random_tensor(3, 2, 1.5, seed + 2 * i as u64), random_tensor(3, 2, 0.5, seed + 2 * i as u64 + 1)))
            .collect();
        let bundle = PosteriorBundle::new(experts.clone()).unwrap();
        let z = random_tensor(3, 2, 2.0, seed + 99);
        let mix = mixture_log_density(&bundle, &z).unwrap();
        let singles: Vec<Vec<f64>> = experts
            .iter()
            .map(|e| mixture_log_density(&PosteriorBundle::new(vec![e.clone()]).unwrap(), &z).unwrap())
            .collect();
        for r in 0..3 {
            let best = singles.iter().map(|s| s[r]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mix[r] <= best + 1e-12);
            prop_assert!(mix[r] >= best - (m as f64).ln() - 1e-12);
        }
        let mut rev = experts.clone();
        rev.reverse();
        let permuted = mixture_log_density(&PosteriorBundle::new(rev).unwrap(), &z).unwrap();
        for r in 0..3 {
            prop_assert!((permuted[r] - mix[r]).abs() <= 1e-12 * mix[r].abs().max(1.0));
        }
    }

    #[test]
    fn reparameterized_mean_has_unit_slope(mu in -3.0f64..3.0, logvar in -2.0f64..1.0, seed in 0u64..1000) {
        let eps = ebmmoe::rng::normal_vec(&mut seeded(seed), 500);
        let mc_mean = |mu: f64| -> f64 {
            let mut t = Tape::new();
            let m = t.constant(500, 1, vec![mu; 500]).unwrap();
            let lv = t.constant(500, 1, vec![logvar; 500]).unwrap();
            let e = t.constant(500, 1, eps.clone()).unwrap();
            let z = reparameterize(&mut t, m, lv, e).unwrap();
            let s = t.mean(z).unwrap();
            t.scalar(s)
        };
        let h = 1e-5;
        let slope = (mc_mean(mu + h) - mc_mean(mu - h)) / (2.0 * h);
        prop_assert!((slope - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_offset_gets_no_energy_gradient(n in 1usize..20, seed in 0u64..1000) {
        // unbounded output, so the last bias is an additive offset on f
        let arch = ArchSpec { energy_units: 8, energy_layers: 3, energy_bound: 0.0, ..ArchSpec::default() };
        let mut energy = EnergyNet::init(&arch, &mut seeded(seed)).unwrap();
        let last = energy.mlp.layers.len() - 1;
        energy.mlp.layers[last] = random_mlp(&[8, 1], Activation::Identity, 1.0, seed).layers[0].clone();
        let prior = gaussian_prior(2, energy);
        let pos = random_tensor(n, 2, 1.0, seed + 1);
        let neg = random_tensor(n, 2, 1.0, seed + 2);
        let g = grad_ebm(&prior, &[pos], &neg).unwrap();
        let offset_grad = g.last().unwrap()[0];
        prop_assert!(offset_grad.abs() < 1e-12, "offset gradient {offset_grad}");
    }

    #[test]
    fn chains_do_not_interact(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let prior = gaussian_prior(2, EnergyNet::quadratic(2, 1.5));
        let cfg = LangevinConfig { steps: 7, step_size: 0.2, n_chains: 6, snapshot_steps: vec![], seed };
        let z0 = random_tensor(6, 2, 1.0, seed + 5);
        let mut rngs: Vec<_> = (0..6).map(|i| chain_rng(seed, i)).collect();
        let (out, _) = run_from(&prior, z0.clone(), &cfg, &mut rngs, 0).unwrap();
        let mut perm: Vec<usize> = (0..6).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut seeded(perm_seed));
        let mut prngs: Vec<_> = perm.iter().map(|&i| chain_rng(seed, i)).collect();
        let (pout, _) = run_from(&prior, z0.select_rows(&perm), &cfg, &mut prngs, 0).unwrap();
        prop_assert_eq!(pout, out.select_rows(&perm));
    }

    #[test]
    fn chains_are_deterministic(seed in 0u64..1000) {
        let prior = gaussian_prior(2, EnergyNet::quadratic(2, 0.5));
        let cfg = LangevinConfig { steps: 10, step_size: 0.1, n_chains: 300, snapshot_steps: vec![0, 10], seed };
        prop_assert_eq!(run_chains(&prior, &cfg).unwrap(), run_chains(&prior, &cfg).unwrap());
    }

    #[test]
    fn agreement_is_relabeling_equivariant(
        preds in prop::collection::vec(prop::collection::vec(0usize..4, 12), 1..4),
        perm_seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut seeded(perm_seed));
        let relabeled: Vec<Vec<usize>> = preds.iter().map(|p| p.iter().map(|&c| perm[c]).collect()).collect();
        let a = all_agree_fraction(&preds);
        prop_assert_eq!(a, all_agree_fraction(&relabeled));
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn datasets_pair_labels_and_replay(seed in 0u64..50, bitmap in any::<bool>()) {
        let spec = DatasetSpec {
            family: if bitmap { DatasetFamily::BitmapDigits } else { DatasetFamily::GmmPair },
            classes: 4,
            modalities: 3,
            n_train: 120,
            n_test: 40,
            seed,
            ..DatasetSpec::default()
        };
        let a = generate(&spec).unwrap();
        prop_assert_eq!(&a, &generate(&spec).unwrap());
        for ds in [&a.0, &a.1] {
            for i in 0..ds.len() {
                prop_assert_eq!(ds.example(i).views.len(), 3);
                prop_assert!(ds.labels[i] < 4);
            }
        }
    }
}

#[test]
fn partition_estimate_concentrates_as_samples_grow() {
    let mut prior = gaussian_prior(1, EnergyNet::quadratic(1, 3.0));
    let spread = |n: usize, prior: &mut ebmmoe::prior::EbmPrior| {
        let est: Vec<f64> = (0..8)
            .map(|s| estimate_log_partition(prior, n, &mut seeded(s)).unwrap())
            .collect();
        variance(&est)
    };
    let small = spread(1_000, &mut prior);
    let large = spread(64_000, &mut prior);
    assert!(large < small / 10.0, "variance {small} -> {large}");
}

#[test]
fn quadratic_tilts_normalize_on_a_grid() {
    for a in [0.0, 0.5, 1.0, 2.5, 5.0] {
        let mut prior = gaussian_prior(1, EnergyNet::quadratic(1, a));
        let log_z = estimate_log_partition(&mut prior, 200_000, &mut seeded(3)).unwrap();
        let n = 16_000;
        let grid: Vec<f64> = (0..=n).map(|i| -8.0 + i as f64 * 1e-3).collect();
        let z = Tensor::matrix(grid.len(), 1, grid).unwrap();
        let d: Vec<f64> = log_unnormalized_density(&prior, &z)
            .unwrap()
            .into_iter()
            .map(|v| (v - log_z).exp())
            .collect();
        let integral: f64 = d.windows(2).map(|w| 0.5 * (w[0] + w[1]) * 1e-3).sum();
        assert!((0.99..=1.01).contains(&integral), "a = {a}: {integral}");
    }
}

#[test]
fn langevin_bias_shrinks_with_step_size() {
    let a = 3.0;
    let prior = gaussian_prior(1, EnergyNet::quadratic(1, a));
    let truth = 1.0 / (1.0 + a);
    let mut last = f64::INFINITY;
    for s in [0.2, 0.1, 0.05] {
        let steps = (0.2f64 * 0.2 * 200.0 / (s * s)).round() as usize;
        let bias: f64 = (0..3)
            .map(|seed| {
                let cfg = LangevinConfig { steps, step_size: s, n_chains: 20_000, snapshot_steps: vec![], seed };
                let (z, _) = run_chains(&prior, &cfg).unwrap();
                (variance(z.values()) - truth).abs()
            })
            .sum::<f64>()
            / 3.0;
        assert!(bias < last + 2e-3, "s = {s}: bias {bias} after {last}");
        last = bias;
    }
}

#[test]
fn single_modality_scores_are_one() {
    struct Fixed;
    impl Predictor for Fixed {
        fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
            Ok((0..x.rows()).map(|r| usize::from(x.row(r)[0] > 0.0)).collect())
        }
        fn confidence(&self, x: &Tensor) -> Result<Vec<f64>> {
            Ok(vec![1.0; x.rows()])
        }
    }
    let spec = DatasetSpec { n_train: 30, n_test: 30, ..DatasetSpec::default() };
    let (_, pair) = generate(&spec).unwrap();
    let mut test = ebmmoe::data::MultimodalDataset::empty(pair.classes, vec![pair.dims[0]]);
    for i in 0..pair.len() {
        let mut ex = pair.example(i);
        ex.views.truncate(1);
        test.push(ex).unwrap();
    }
    let model = ModelBundle::init(&ArchSpec::default(), &test.dims, ReferenceKind::StandardGaussian, false, 0).unwrap();
    let before = model.clone();
    let langevin = LangevinConfig { n_chains: 50, steps: 3, ..LangevinConfig::default() };
    assert_eq!(joint_coherence(&model, &[Fixed], &langevin).unwrap().score, 1.0);
    assert_eq!(cross_coherence(&model, &[Fixed], &test, &CrossOptions::default()).unwrap().score, 1.0);
    assert_eq!(model, before);
}

#[test]
fn class_balance_is_near_uniform() {
    for family in [DatasetFamily::GmmPair, DatasetFamily::BitmapDigits] {
        let spec = DatasetSpec { family, classes: 5, n_train: 1000, n_test: 50, ..DatasetSpec::default() };
        let (train, _) = generate(&spec).unwrap();
        for k in 0..5 {
            let frac = train.labels.iter().filter(|&&l| l == k).count() as f64 / 1000.0;
            assert!((frac - 0.2).abs() <= 0.05 * 0.2, "class {k}: {frac}");
        }
    }
}
