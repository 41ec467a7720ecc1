//! Shared fixtures for the benchmark targets.

use ducat_core::adversary::AttackSpec;
use ducat_core::datasets::{gen_gaussians, Dataset, GaussianSpec, Split};
use ducat_core::nn::{InitSpec, MlpModel};
use ducat_core::tensor::Tensor;
use ducat_core::Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let data = (0..rows * cols).map(|_| rng.range_f64(-1.0, 1.0)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

pub fn bench_model(doubled: bool) -> MlpModel {
    let base = MlpModel::new(2, &[64, 64], 4, &InitSpec::new(7)).unwrap();
    if doubled {
        base.double_last_layer(&InitSpec::new(8), None).unwrap()
    } else {
        base
    }
}

pub fn bench_batch(rows: usize) -> (Tensor, Vec<usize>) {
    let mut rng = Rng::new(11);
    let data = (0..rows * 2).map(|_| rng.range_f64(0.0, 1.0)).collect();
    let ys = (0..rows).map(|_| rng.below(4)).collect();
    (Tensor::new(&[rows, 2], data).unwrap(), ys)
}

pub fn bench_dataset() -> Dataset {
    gen_gaussians(
        &GaussianSpec {
            num_classes: 4,
            dim: 2,
            per_class_n: 64,
            separation: 0.2,
            noise_sigma: 0.05,
            seed: 3,
            rescale01: true,
        },
        Split::Train,
    )
    .unwrap()
}

pub fn pgd10(epsilon: f64) -> AttackSpec {
    AttackSpec::pgd_linf(epsilon, epsilon / 4.0, 10)
}
