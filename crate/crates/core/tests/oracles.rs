//! Library operations against independent oracles.

mod common;

use approx::assert_abs_diff_eq;
use rand::Rng as _;

use common::*;
use sparsehead::analysis::{concentration_curve, effective_rank, minmax_stats, symmetric_evd};
use sparsehead::autodiff::Tensor;
use sparsehead::datagen::{nontrivial_coverage, sample_world, Mixing, WorldConfig, MAX_CONDITION};
use sparsehead::evaluation::{knn_classify, Metric};
use sparsehead::exec::Exec;
use sparsehead::models::{init_model, EncoderSpec, HeadSpec};
use sparsehead::objectives::{column_support, infonce_value, l21_norm};
use sparsehead::optimizer::prox_l21;
use sparsehead::rng;

#[test]
fn infonce_matches_double_loop() {
    for n in [2usize, 4, 8] {
        for trial in 0..20 {
            let z = gaussian_tensor(2 * n, 6, 10 * n as u64 + trial);
            for tau in [0.1, 0.5, 2.0] {
                assert_abs_diff_eq!(infonce_value(&z, tau).unwrap(), infonce_oracle(&z, tau), epsilon = 1e-9);
            }
        }
    }
}

#[test]
fn infonce_rotation_and_row_scale_invariant() {
    let z = gaussian_tensor(8, 4, 1);
    let base = infonce_value(&z, 0.5).unwrap();
    // Orthogonal factor of a random matrix via the eigenvectors of AᵀA.
    let a = gaussian_tensor(4, 4, 2);
    let q = symmetric_evd(&a.transpose().unwrap().matmul(&a).unwrap()).unwrap().vectors;
    let rotated = z.matmul(&q).unwrap();
    assert_abs_diff_eq!(infonce_value(&rotated, 0.5).unwrap(), base, epsilon = 1e-9);
    let mut scaled = z.clone();
    scaled.data_mut()[4..8].iter_mut().for_each(|v| *v *= 3.0);
    assert_abs_diff_eq!(infonce_value(&scaled, 0.5).unwrap(), base, epsilon = 1e-9);
}

#[test]
fn infonce_upper_bound() {
    for seed in 0..10 {
        let z = gaussian_tensor(8, 3, 40 + seed);
        let rows = 8.0f64;
        assert!(infonce_value(&z, 0.5).unwrap() <= rows * (rows - 1.0).ln() + rows * (2.0 / 0.5));
    }
}

#[test]
fn l21_examples_and_homogeneity() {
    let w = Tensor::matrix(&[&[3.0, 0.0], &[4.0, 0.0]]).unwrap();
    assert_eq!(l21_norm(&w).unwrap(), 5.0);
    assert_eq!(column_support(&w, 1e-8).unwrap(), vec![0]);
    assert_eq!(l21_norm(&Tensor::identity(5)).unwrap(), 5.0);
    assert_eq!(column_support(&Tensor::identity(5), 1e-8).unwrap(), (0..5).collect::<Vec<_>>());
    assert!(column_support(&Tensor::zeros(vec![3, 3]), 0.0).unwrap().is_empty());
    let mut r = rng::seeded(5);
    for seed in 0..20 {
        let w = gaussian_tensor(4, 3, 60 + seed);
        let c: f64 = r.random_range(-3.0..3.0);
        let mut cw = w.clone();
        cw.data_mut().iter_mut().for_each(|v| *v *= c);
        assert_abs_diff_eq!(l21_norm(&cw).unwrap(), c.abs() * l21_norm(&w).unwrap(), epsilon = 1e-12);
    }
    let single = Tensor::matrix(&[&[0.0, 1.0], &[0.0, -2.0]]).unwrap();
    assert_abs_diff_eq!(l21_norm(&single).unwrap(), single.frobenius(), epsilon = 1e-15);
}

#[test]
fn prox_matches_shrink_or_kill() {
    for case in 0..100u64 {
        let w = gaussian_tensor(3, 3, 200 + case);
        let eta = rng::derived(case, 1).random_range(0.0..2.0);
        let v = prox_l21(&w, eta).unwrap();
        for j in 0..3 {
            let norm = (0..3).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt();
            for i in 0..3 {
                let want = if norm <= eta { 0.0 } else { (1.0 - eta / norm) * w.get(i, j) };
                assert_abs_diff_eq!(v.get(i, j), want, epsilon = 1e-15);
            }
        }
    }
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let enc = EncoderSpec { input_dim: 5, hidden: vec![6], output_dim: 4, activation: Default::default() };
        let mut model = init_model(enc, HeadSpec::linear(4, 3), seed).unwrap();
        let x = gaussian_tensor(8, 5, 300 + seed);
        let grads = penalty_grads(&model, &x, 0.3).unwrap();
        let w_idx = model.regularized_index().unwrap();
        for k in 0..grads[w_idx].len() {
            let orig = model.params()[w_idx].data()[k];
            model.params_mut()[w_idx].data_mut()[k] = orig + 1e-5;
            let up = penalty_loss(&model, &x, 0.3).unwrap();
            model.params_mut()[w_idx].data_mut()[k] = orig - 1e-5;
            let down = penalty_loss(&model, &x, 0.3).unwrap();
            model.params_mut()[w_idx].data_mut()[k] = orig;
            let numeric = (up - down) / 2e-5;
            let rel = (grads[w_idx][k] - numeric).abs() / numeric.abs().max(1e-5);
            assert!(rel < 1e-4, "coordinate {k}: {} vs {numeric}", grads[w_idx][k]);
        }
    }
}

#[test]
fn knn_matches_exhaustive_oracle() {
    for seed in 0..6u64 {
        let train = gaussian_tensor(150, 5, 400 + seed);
        let test = gaussian_tensor(40, 5, 500 + seed);
        let labels: Vec<u16> = (0..150).map(|i| ((i * 7 + seed as usize) % 3) as u16).collect();
        for metric in [Metric::Cosine, Metric::Euclidean] {
            for k in [1, 4, 9] {
                let got = knn_classify(&train, &labels, &test, k, metric, Exec::Sequential).unwrap();
                assert_eq!(got, knn_oracle(&train, &labels, &test, k, metric));
            }
        }
    }
}

#[test]
fn linear_worlds_are_well_conditioned() {
    let cfg = WorldConfig {
        n_subject: 4,
        n_nuisance: 4,
        obs_dim: 12,
        mixing: Mixing::Linear,
        n_classes: 0,
        shuffle_features: false,
    };
    for seed in 0..100 {
        let world = sample_world(&cfg, seed).unwrap();
        // Condition number from the eigenvalues of gᵀg, independent of the
        // sampler's own SVD.
        let g = &world.mixing;
        let ev = symmetric_evd(&g.transpose().unwrap().matmul(g).unwrap()).unwrap().values;
        let cond = (ev[0] / ev[ev.len() - 1]).sqrt();
        assert!(cond < MAX_CONDITION, "seed {seed}: condition {cond}");
        assert_abs_diff_eq!(cond, world.condition.unwrap(), epsilon = 1e-6 * cond);
    }
}

#[test]
fn coverage_example_from_four_cycle() {
    let supports = vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![0, 3]];
    assert!(nontrivial_coverage(4, &supports).iter().all(|&c| c));
    let single = vec![vec![0, 1]];
    assert_eq!(nontrivial_coverage(3, &single), vec![false, false, true]);
}

#[test]
fn concentration_decreases_with_dimension() {
    let curve = concentration_curve(&[16, 64, 256, 1024], 100, 20, 0, Exec::Sequential).unwrap();
    assert!(curve.windows(2).all(|w| w[1].mean < w[0].mean));
    assert!(curve[3].mean < curve[0].mean / 2.0);
}

#[test]
fn effective_rank_of_known_spectra() {
    let r = effective_rank(&[4.0, 4.0, 4.0, 4.0], 1e-6).unwrap();
    assert_eq!(r.count, 4);
    assert_abs_diff_eq!(r.entropy, 4.0, epsilon = 1e-12);
    let r = effective_rank(&[1.0, 1e-3, 1e-9, 0.0], 1e-6).unwrap();
    assert_eq!(r.count, 2);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let train_x = gaussian_tensor(120, 6, 700);
    let test_x = gaussian_tensor(30, 6, 701);
    let labels: Vec<u16> = (0..120).map(|i| (i % 4) as u16).collect();
    for metric in [Metric::Cosine, Metric::Euclidean] {
        assert_eq!(
            knn_classify(&train_x, &labels, &test_x, 5, metric, Exec::Sequential).unwrap(),
            knn_classify(&train_x, &labels, &test_x, 5, metric, Exec::Parallel).unwrap()
        );
    }
    let a = concentration_curve(&[8, 32], 40, 6, 3, Exec::Sequential).unwrap();
    let b = concentration_curve(&[8, 32], 40, 6, 3, Exec::Parallel).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.mean.to_bits(), q.mean.to_bits());
    }
    let z = gaussian_tensor(80, 5, 702);
    let s = minmax_stats(&z, 20, Exec::Sequential).unwrap();
    let p = minmax_stats(&z, 20, Exec::Parallel).unwrap();
    assert_eq!(s.mean.to_bits(), p.mean.to_bits());
}
