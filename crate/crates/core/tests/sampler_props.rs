//! Sampler properties on analytic point-charge problems.

mod common;

use common::rel_err;
use pocgm_core::denoiser::{oracle_model, DenoiserModel};
use pocgm_core::image::ImageGrid;
use pocgm_core::pfgm::{oracle_field_direction, sample_prior, DiracDataset, PfgmConfig};
use pocgm_core::sampler::{build_sigma_schedule, integrate_ode, sample_ode, Integrator, SamplerConfig};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_charges() -> DiracDataset<f64> {
    DiracDataset::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.3, 0.7]).unwrap()
}

fn vec2(v: &[f64]) -> ImageGrid<f64> {
    ImageGrid::new(v.len(), 1, 1.0, v.to_vec()).unwrap()
}

#[test]
fn drift_matches_the_field_direction() {
    let data = DiracDataset::new(
        vec![vec![0.5, -1.0, 2.0], vec![-1.5, 0.0, 0.3], vec![0.0, 1.0, -1.0]],
        vec![0.2, 0.3, 0.5],
    )
    .unwrap();
    let d = 128;
    let model = oracle_model(data.clone(), d);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let sigma: f64 = rng.random_range(0.05..20.0);
        let den = model.denoise(&vec2(&x), sigma, &vec2(&[0.0; 3])).unwrap();
        let drift: Vec<f64> = x.iter().zip(den.values()).map(|(a, b)| (a - b) / sigma).collect();
        let field = oracle_field_direction(&x, sigma * (d as f64).sqrt(), &data, d).unwrap();
        assert!(rel_err(&drift, &field) <= 1e-9);
    }
}

/// Mean distance to a fine-step reference at `σ_min`, before the final jump to 0.
fn heun_error_at_sigma_min(k: usize, draws: &[Vec<f64>]) -> f64 {
    let model = oracle_model(two_charges(), 128);
    let pf = PfgmConfig::default().with_data_dim(2);
    let cond = vec2(&[0.0, 0.0]);
    let run = |steps: usize, x0: &[f64]| {
        let s = build_sigma_schedule(steps, &pf).unwrap();
        integrate_ode(&model, vec2(x0), &cond, &s.levels()[..steps], Integrator::Heun)
            .unwrap()
            .into_values()
    };
    draws
        .iter()
        .map(|x0| {
            let (a, b) = (run(k, x0), run(2048, x0));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / draws.len() as f64
}

#[test]
fn heun_is_second_order_on_two_charges() {
    let pf = PfgmConfig::default().with_data_dim(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws: Vec<Vec<f64>> = (0..32).map(|_| sample_prior(&pf, &mut rng).unwrap()).collect();
    let errs: Vec<f64> = [8, 16, 32].iter().map(|&k| heun_error_at_sigma_min(k, &draws)).collect();
    for w in errs.windows(2) {
        assert!(w[0] / w[1] >= 3.0, "errors {errs:?}");
    }
}

#[test]
fn gaussian_limit_agrees_with_d128() {
    let pf = PfgmConfig::default().with_data_dim(2);
    let cond = vec2(&[0.0, 0.0]);
    let run = |d: u64, seed: u64| {
        let cfg = SamplerConfig {
            steps: 16,
            integrator: Integrator::Heun,
            pfgm: pf.with_aug_dim(d),
        };
        let model = oracle_model(two_charges(), d);
        let out = sample_ode(&model, &cond, &cfg.schedule().unwrap(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        two_charges().nearest(out.values()).0
    };
    let n = 400;
    let agree = (0..n).filter(|&s| run(1_000_000, s) == run(128, s)).count();
    assert!(agree as f64 >= 0.95 * n as f64, "{agree}/{n} agree");
}

#[test]
fn later_rng_use_does_not_change_the_path() {
    let model = oracle_model(two_charges(), 128);
    let cfg = SamplerConfig {
        pfgm: PfgmConfig::default().with_data_dim(2),
        ..Default::default()
    };
    let sched = cfg.schedule().unwrap();
    let cond = vec2(&[0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = sample_ode(&model, &cond, &sched, &cfg, &mut rng).unwrap();
    let _ = rng.next_u64();
    let mut replay = ChaCha8Rng::seed_from_u64(17);
    let x0 = sample_prior::<f64, _>(&cfg.pfgm, &mut replay).unwrap();
    for _ in 0..5 {
        let _ = replay.next_u64();
    }
    let b = integrate_ode(&model, vec2(&x0), &cond, sched.levels(), cfg.integrator).unwrap();
    assert_eq!(a, b);
}

#[test]
fn euler_and_heun_both_reach_a_single_charge() {
    let v = [0.25, -0.5];
    let model = oracle_model(DiracDataset::uniform(vec![v.to_vec()]).unwrap(), 128);
    for integrator in [Integrator::Euler, Integrator::Heun] {
        let cfg = SamplerConfig {
            steps: 4,
            integrator,
            pfgm: PfgmConfig::default().with_data_dim(2),
        };
        let out = sample_ode(&model, &vec2(&[0.0, 0.0]), &cfg.schedule().unwrap(), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(rel_err(out.values(), &v) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn schedules_strictly_decrease(k in 1usize..200, lo in 1e-4f64..0.5, span in 1.5f64..1e3, rho in 1.0f64..10.0) {
        let cfg = PfgmConfig { sigma_min: lo, sigma_max: lo * span, rho, ..Default::default() };
        let s = build_sigma_schedule(k, &cfg).unwrap();
        let l = s.levels();
        prop_assert_eq!(l.len(), k + 1);
        prop_assert_eq!(l[0], cfg.sigma_max);
        prop_assert_eq!(l[k], 0.0);
        if k > 1 {
            prop_assert_eq!(l[k - 1], cfg.sigma_min);
        }
        prop_assert!(l.windows(2).all(|w| w[0] > w[1]));
    }
}
