//! Reverse-mode gradients of the training objective against central
//! finite differences, through the whole unrolled solve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdebnn_core::autodiff::{ActivationKind, Tape};
use sdebnn_core::data::{toy_dataset, ToyConfig};
use sdebnn_core::dynamics::{DynamicsConfig, Variant};
use sdebnn_core::model::{HeadKind, Model, ModelConfig};
use sdebnn_core::params::{ParamId, ParamSet};
use sdebnn_core::solver::SolverConfig;
use sdebnn_core::tensor::Tensor;
use sdebnn_core::train::elbo;
use sdebnn_core::weights::DriftArch;

fn model(variant: Variant) -> Model<f64> {
    let cfg = ModelConfig {
        input_shape: vec![1],
        augment: 2,
        arch: DriftArch::Dense { width: 3, hidden: vec![6] },
        drift_activation: ActivationKind::Swish,
        posterior: "1-5-1".parse().unwrap(),
        posterior_activation: ActivationKind::Swish,
        sigma: 0.2,
        head: HeadKind::Gaussian,
        init_seed: 21,
    };
    Model::new(cfg, DynamicsConfig::new(variant, ActivationKind::Swish)).unwrap()
}

fn loss_at(m: &Model<f64>, params: &ParamSet<f64>, data: &sdebnn_core::data::Dataset<f64>, solver: &SolverConfig) -> f64 {
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    elbo(m, &bound, data, solver, 0.05, &[17, 18]).unwrap().loss.value().item().unwrap()
}

fn perturbed(params: &ParamSet<f64>, id: ParamId, j: usize, delta: f64) -> ParamSet<f64> {
    let mut p = params.clone();
    let mut data = p.get(id).to_f64_vec();
    data[j] += delta;
    p.set(id, Tensor::from_f64(p.get(id).shape().to_vec(), &data).unwrap()).unwrap();
    p
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over `coords` random coordinates.
fn worst_relative_error(variant: Variant, coords: usize, seed: u64) -> f64 {
    let m = model(variant);
    let data = toy_dataset::<f64>(&ToyConfig { n: 6, seed: 3, ..ToyConfig::default() }).unwrap();
    let solver = SolverConfig { steps: 8, ..SolverConfig::default() };
    let tape = Tape::new();
    let bound = m.params.bind(&tape);
    let out = elbo(&m, &bound, &data, &solver, 0.05, &[17, 18]).unwrap();
    let grads = bound.gradients(&out.loss.backward().unwrap());
    let ids: Vec<ParamId> = m.params.iter().map(|(id, _, _)| id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let k = rng.random_range(0..ids.len());
        let j = rng.random_range(0..m.params.get(ids[k]).numel());
        let plus = loss_at(&m, &perturbed(&m.params, ids[k], j, h), &data, &solver);
        let minus = loss_at(&m, &perturbed(&m.params, ids[k], j, -h), &data, &solver);
        let fd = (plus - minus) / (2.0 * h);
        let ad = grads[k].data()[j];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_finite_differences_for_every_variant() {
    for variant in [Variant::Baseline, Variant::NesterovDirect, Variant::NesterovSkip] {
        let worst = worst_relative_error(variant, 24, 5);
        assert!(worst < 1e-3, "{variant}: worst relative error {worst}");
    }
}
