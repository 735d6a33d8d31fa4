//! Perturbation-kernel statistics and field-oracle accuracy.

mod common;

use common::{exact_field, ks_test, normal_cdf, rel_err};
use pocgm_core::pfgm::{
    field_direction_weighted, oracle_field_direction, sample_perturbation, DiracDataset, PfgmConfig, RadiusMode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(n: usize, d: u64) -> PfgmConfig {
    PfgmConfig::default().with_data_dim(n).with_aug_dim(d)
}

#[test]
fn radial_second_moment() {
    let (n, d, sigma) = (2usize, 8u64, 1.0f64);
    let c = cfg(n, d);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let draws: Vec<f64> = (0..100_000)
        .map(|_| {
            let u = sample_perturbation(&[0.0, 0.0], sigma, &c, RadiusMode::ExactRadial, &mut rng).unwrap();
            u[0] * u[0] + u[1] * u[1]
        })
        .collect();
    let m = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / m;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let r2 = sigma * sigma * d as f64;
    let want = r2 * n as f64 / (d as f64 - 2.0);
    assert!((mean - want).abs() <= 3.0 * (var / m).sqrt(), "E[R²] {mean} vs {want}");
}

#[test]
fn large_d_is_gaussian_per_coordinate() {
    let c = cfg(2, 1_000_000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut xs = Vec::with_capacity(20_000);
    for _ in 0..20_000 {
        let u = sample_perturbation(&[0.0, 0.0], 1.0, &c, RadiusMode::ExactRadial, &mut rng).unwrap();
        xs.push(u[0]);
    }
    let (_, p) = ks_test(&mut xs, normal_cdf(1.0));
    assert!(p > 0.01, "KS p = {p}");
}

#[test]
fn perturbation_is_centred_on_the_input() {
    let c = cfg(3, 64);
    let x = [1.5, -2.0, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mean = [0.0; 3];
    let m = 20_000;
    for _ in 0..m {
        let u = sample_perturbation(&x, 0.3, &c, RadiusMode::ExactRadial, &mut rng).unwrap();
        for i in 0..3 {
            mean[i] += u[i] / m as f64;
        }
    }
    for i in 0..3 {
        assert!((mean[i] - x[i]).abs() < 0.02);
    }
}

#[test]
fn directions_are_shared_across_d_under_one_seed() {
    let x = [0.0; 4];
    let a = sample_perturbation(&x, 1.0, &cfg(4, 16), RadiusMode::ExactRadial, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = sample_perturbation(&x, 1.0, &cfg(4, 4096), RadiusMode::ExactRadial, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (p, q) in a.iter().zip(&b) {
        assert!((p / na - q / nb).abs() < 1e-12);
    }
}

#[test]
fn symmetric_pair_cancels_on_the_bisector() {
    let data = DiracDataset::uniform(vec![vec![1.0f64, 0.0], vec![-1.0, 0.0]]).unwrap();
    for y in [-3.0, 0.0, 0.7, 12.0] {
        let f = oracle_field_direction(&[0.0, y], 0.8, &data, 16).unwrap();
        assert!(f[0].abs() <= 1e-12, "x-component {}", f[0]);
    }
}

#[test]
fn three_charges_match_exact_rational_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let points: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let weights = [0.2, 0.5, 0.3];
        let u = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let r = rng.random_range(0.2..3.0);
        let got = field_direction_weighted(&u, r, &points, &weights, 16).unwrap();
        let want = exact_field(&u, r, &points, &weights, 16);
        assert!(rel_err(&got, &want) <= 1e-9, "{got:?} vs {want:?}");
    }
}

#[test]
fn log_domain_matches_exact_up_to_two_thousand_dimensions() {
    // dyadic inputs keep the exact rationals short at exponents near 1000
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut dyadic = |lo: f64, hi: f64| (rng.random_range(lo..hi) * 64.0).round() / 64.0;
    for &(n, d) in &[(4usize, 1996u64), (10, 990), (2, 128), (3, 1)] {
        let points: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| dyadic(-1.0, 1.0)).collect()).collect();
        let weights = [0.125, 0.25, 0.25, 0.375];
        let u: Vec<f64> = (0..n).map(|_| dyadic(-1.5, 1.5)).collect();
        let r = dyadic(0.5, 4.0) * ((d as f64).sqrt() * 0.05 * 64.0).round() / 64.0 + 1.0 / 64.0;
        let got = field_direction_weighted(&u, r, &points, &weights, d).unwrap();
        let want = exact_field(&u, r, &points, &weights, d);
        assert!(rel_err(&got, &want) <= 1e-9, "N={n} D={d}: {}", rel_err(&got, &want));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_rescaling_cancels(seed in any::<u64>(), scale in 1e-6f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random_range(-1.0..1.0); 2]).collect();
        let w = [0.2, 0.3, 0.5];
        let w2 = w.map(|v| v * scale);
        let u = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let r = rng.random_range(0.1..2.0);
        let a = field_direction_weighted(&u, r, &points, &w, 32).unwrap();
        let b = field_direction_weighted(&u, r, &points, &w2, 32).unwrap();
        prop_assert!(rel_err(&b, &a) <= 1e-12);
    }

    #[test]
    fn single_charge_is_exact(seed in any::<u64>(), r in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let u = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let data = DiracDataset::uniform(vec![v.clone()]).unwrap();
        let d = 128u64;
        let f = oracle_field_direction(&u, r, &data, d).unwrap();
        for i in 0..3 {
            let want = (u[i] - v[i]) / r;
            prop_assert!((f[i] / (d as f64).sqrt() - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}
