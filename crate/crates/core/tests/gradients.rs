//! Finite-difference checks of the hand-written backward passes.

use pocgm_core::denoiser::{conditional_loss, LinearDenoiser, TinyNetConfig, TinyUNet, TrainConfig, Trainable};
use pocgm_core::image::ImageGrid;
use pocgm_core::pfgm::PfgmConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ImageGrid<f64> {
    ImageGrid::new(w, h, 1.0, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn batch(n: usize, size: usize, seed: u64) -> Vec<(ImageGrid<f64>, ImageGrid<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = random_grid(size, size, &mut rng);
            let c = x.map(|v| v + 0.05 * (v * 17.0).sin());
            (x, c)
        })
        .collect()
}

/// Loss with the perturbation draws frozen by reseeding.
fn loss_at<M: Trainable<f64>>(model: &M, data: &[(ImageGrid<f64>, ImageGrid<f64>)], seed: u64) -> (f64, Vec<f64>) {
    let cfg = TrainConfig::default();
    let pfgm = PfgmConfig::default();
    let eval = conditional_loss(model, data, &cfg, &pfgm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (eval.loss, eval.grad)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn linear_model_gradient_matches_central_differences() {
    let data = batch(3, 4, 1);
    let model = LinearDenoiser::new(0.4, 0.3);
    let (_, grad) = loss_at(&model, &data, 7);
    let h = 1e-6;
    for i in 0..2 {
        let mut plus = model.clone();
        plus.params_mut()[i] += h;
        let mut minus = model.clone();
        minus.params_mut()[i] -= h;
        let fd = (loss_at(&plus, &data, 7).0 - loss_at(&minus, &data, 7).0) / (2.0 * h);
        assert!(rel(grad[i], fd) <= 1e-4, "param {i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn unet_gradient_matches_central_differences_on_random_directions() {
    let cfg = TinyNetConfig {
        base_channels: 4,
        depth: 1,
        patch: 8,
        condition_injection: true,
    };
    let mut model = TinyUNet::<f64>::new(cfg, 0.5, 3).unwrap();
    // push the output layer off its small initial scale so every layer matters
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in model.params_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let data = batch(2, 8, 5);
    let (_, grad) = loss_at(&model, &data, 9);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dir: Vec<f64> = (0..grad.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let shifted = |s: f64| {
            let mut m = model.clone();
            for (p, d) in m.params_mut().iter_mut().zip(&dir) {
                *p += s * d;
            }
            loss_at(&m, &data, 9).0
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        worst = worst.max(rel(analytic, fd));
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}
