//! Conditional perturbation training.
//!
//! For each pair `(x, x_sparse)` a level `σ` is drawn, `x` is perturbed with
//! the augmented-space kernel, and the model is regressed onto `x`:
//! `L = mean_i λ(σᵢ)·mean‖D(x̂ᵢ, σᵢ, x_sparse,i) − xᵢ‖²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DenoiserModel, Trainable};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::pfgm::{sample_perturbation, PfgmConfig, RadiusMode};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SigmaSampling {
    /// `ln σ ~ N(p_mean, p_std²)`.
    LogNormal { p_mean: f64, p_std: f64 },
}

impl Default for SigmaSampling {
    fn default() -> Self {
        SigmaSampling::LogNormal {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl SigmaSampling {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SigmaSampling::LogNormal { p_mean, p_std } => {
                let z: f64 = StandardNormal.sample(rng);
                (p_mean + p_std * z).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaWeighting {
    /// `(σ² + σ_data²)/(σ·σ_data)²`
    #[default]
    Edm,
    Constant,
}

pub fn lambda_weight(sigma: f64, sigma_data: f64, rule: LambdaWeighting) -> f64 {
    match rule {
        LambdaWeighting::Edm => (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2),
        LambdaWeighting::Constant => 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Linear learning-rate ramp over the first iterations.
    pub warmup_iterations: usize,
    pub ema_decay: f64,
    pub sigma_sampling: SigmaSampling,
    pub lambda_weighting: LambdaWeighting,
    pub radius_mode: RadiusMode,
    /// Square training patch; `None` trains on whole images.
    pub patch: Option<usize>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch: 16,
            learning_rate: 2e-4,
            warmup_iterations: 0,
            ema_decay: 0.999,
            sigma_sampling: SigmaSampling::default(),
            lambda_weighting: LambdaWeighting::Edm,
            radius_mode: RadiusMode::ExactRadial,
            patch: Some(32),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |r: &str| Err(Error::invalid("train config", r.to_string()));
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("ema_decay must lie in [0, 1)");
        }
        if self.batch == 0 {
            return fail("batch must be positive");
        }
        if self.patch == Some(0) {
            return fail("patch must be positive");
        }
        Ok(())
    }
}

/// Per-item record of one loss evaluation.
#[derive(Debug, Clone)]
pub struct ItemRecord<T> {
    pub sigma: f64,
    pub weight: f64,
    pub perturbed: ImageGrid<T>,
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct LossEval<T> {
    pub loss: f64,
    /// `∂loss/∂θ`; empty when gradients were not requested.
    pub grad: Vec<T>,
    pub items: Vec<ItemRecord<T>>,
}

/// Draws `σᵢ` then `x̂ᵢ` for every item, in batch order.
fn perturb_batch<T: Real, R: Rng + ?Sized>(
    batch: &[(ImageGrid<T>, ImageGrid<T>)],
    cfg: &TrainConfig,
    pfgm: &PfgmConfig,
    rng: &mut R,
) -> Result<Vec<(f64, ImageGrid<T>)>> {
    if batch.is_empty() {
        return Err(Error::invalid("training batch", "batch is empty"));
    }
    batch
        .iter()
        .map(|(x, c)| {
            if !x.same_shape(c) {
                return Err(Error::Dimension {
                    context: "training pair",
                    expected: x.len(),
                    actual: c.len(),
                });
            }
            let sigma = cfg.sigma_sampling.sample(rng);
            let local = pfgm.with_data_dim(x.len());
            let xp = sample_perturbation(x.values(), T::lit(sigma), &local, cfg.radius_mode, rng)?;
            Ok((sigma, x.with_values(xp)))
        })
        .collect()
}

fn item_loss<T: Real>(out: &ImageGrid<T>, x: &ImageGrid<T>) -> f64 {
    out.values()
        .iter()
        .zip(x.values())
        .map(|(&d, &t)| (d - t).as_f64().powi(2))
        .sum::<f64>()
        / x.len() as f64
}

fn finish<T: Real>(total: f64, items: &[ItemRecord<T>]) -> Result<f64> {
    for (i, it) in items.iter().enumerate() {
        if !(it.mse * it.weight).is_finite() {
            return Err(Error::NonFinite {
                step: i,
                sigma: it.sigma,
                detail: format!("loss of batch item {i} is not finite"),
            });
        }
    }
    Ok(total / items.len() as f64)
}

/// Batch loss and its parameter gradient.
pub fn conditional_loss<T: Real, M: Trainable<T>, R: Rng + ?Sized>(
    model: &M,
    batch: &[(ImageGrid<T>, ImageGrid<T>)],
    cfg: &TrainConfig,
    pfgm: &PfgmConfig,
    rng: &mut R,
) -> Result<LossEval<T>> {
    let perturbed = perturb_batch(batch, cfg, pfgm, rng)?;
    let b = batch.len() as f64;
    let np = model.params().len();
    let per_item: Vec<Result<(ItemRecord<T>, Vec<T>)>> = batch
        .par_iter()
        .zip(perturbed.into_par_iter())
        .map(|((x, c), (sigma, xp))| {
            let (out, tape) = model.forward_taped(&xp, T::lit(sigma), c)?;
            let weight = lambda_weight(sigma, pfgm.sigma_data, cfg.lambda_weighting);
            let mse = item_loss(&out, x);
            let scale = T::lit(2.0 * weight / (x.len() as f64 * b));
            let g_out: Vec<T> = out
                .values()
                .iter()
                .zip(x.values())
                .map(|(&d, &t)| scale * (d - t))
                .collect();
            let mut grad = vec![T::zero(); np];
            model.backward(&tape, &g_out, &mut grad);
            Ok((
                ItemRecord {
                    sigma,
                    weight,
                    perturbed: xp,
                    mse,
                },
                grad,
            ))
        })
        .collect();
    let mut grad = vec![T::zero(); np];
    let mut items = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for r in per_item {
        let (item, g) = r?;
        total += item.weight * item.mse;
        for (a, &v) in grad.iter_mut().zip(&g) {
            *a += v;
        }
        items.push(item);
    }
    let loss = finish(total, &items)?;
    Ok(LossEval { loss, grad, items })
}

/// Batch loss without gradients; works for any model.
pub fn evaluate_loss<T: Real, M: DenoiserModel<T>, R: Rng + ?Sized>(
    model: &M,
    batch: &[(ImageGrid<T>, ImageGrid<T>)],
    cfg: &TrainConfig,
    pfgm: &PfgmConfig,
    rng: &mut R,
) -> Result<LossEval<T>> {
    let perturbed = perturb_batch(batch, cfg, pfgm, rng)?;
    let mut items = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for ((x, c), (sigma, xp)) in batch.iter().zip(perturbed) {
        let out = model.denoise(&xp, T::lit(sigma), c)?;
        let weight = lambda_weight(sigma, pfgm.sigma_data, cfg.lambda_weighting);
        let mse = item_loss(&out, x);
        total += weight * mse;
        items.push(ItemRecord {
            sigma,
            weight,
            perturbed: xp,
            mse,
        });
    }
    let loss = finish(total, &items)?;
    Ok(LossEval {
        loss,
        grad: Vec::new(),
        items,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// The EMA copy of the parameters.
    pub model: M,
    /// The raw optimizer iterate.
    pub last: M,
    pub trace: Vec<TracePoint>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step<T: Real>(&mut self, params: &mut [T], grad: &[T], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g.as_f64();
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
            *p = T::lit(p.as_f64() - update);
        }
    }
}

/// Cuts one random training batch (random items, random patch positions).
fn draw_batch<T: Real, R: Rng + ?Sized>(
    dataset: &[(ImageGrid<T>, ImageGrid<T>)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<(ImageGrid<T>, ImageGrid<T>)>> {
    (0..cfg.batch)
        .map(|_| {
            let (x, c) = &dataset[rng.random_range(0..dataset.len())];
            match cfg.patch {
                None => Ok((x.clone(), c.clone())),
                Some(p) => {
                    let col = rng.random_range(0..=x.width() - p);
                    let row = rng.random_range(0..=x.height() - p);
                    Ok((x.patch(col, row, p)?, c.patch(col, row, p)?))
                }
            }
        })
        .collect()
}

pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Adam on the conditional loss with an EMA shadow of the parameters.
pub fn train<T: Real, M: Trainable<T>>(
    model: M,
    dataset: &[(ImageGrid<T>, ImageGrid<T>)],
    cfg: &TrainConfig,
    pfgm: &PfgmConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training data", "dataset is empty"));
    }
    let (w0, h0) = (dataset[0].0.width(), dataset[0].0.height());
    for (x, c) in dataset {
        if !x.same_shape(c) || (cfg.patch.is_none() && (x.width() != w0 || x.height() != h0)) {
            return Err(Error::invalid("training data", "pairs must share one shape"));
        }
        if let Some(p) = cfg.patch {
            if p > x.width() || p > x.height() {
                return Err(Error::invalid("training data", format!("patch {p} exceeds image")));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model;
    let mut ema = current.clone();
    let mut adam = Adam::new(current.params().len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let batch = draw_batch(dataset, cfg, &mut rng)?;
        let eval = conditional_loss(&current, &batch, cfg, pfgm, &mut rng)?;
        trace.push(TracePoint {
            iteration,
            loss: eval.loss,
        });
        if !(eval.loss <= DIVERGENCE_LOSS) {
            return Err(Error::Diverged {
                iteration,
                loss: eval.loss,
            });
        }
        let ramp = if cfg.warmup_iterations > 0 {
            ((iteration + 1) as f64 / cfg.warmup_iterations as f64).min(1.0)
        } else {
            1.0
        };
        adam.step(current.params_mut(), &eval.grad, cfg.learning_rate * ramp, cfg);
        let d = T::lit(cfg.ema_decay);
        let keep = T::one() - d;
        for (e, &p) in ema.params_mut().iter_mut().zip(current.params()) {
            *e = d * *e + keep * p;
        }
    }
    Ok(TrainOutcome {
        model: ema,
        last: current,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ConditionEcho, LinearDenoiser};

    /// Returns its perturbed input.
    #[derive(Clone)]
    struct InputEcho;

    impl DenoiserModel<f64> for InputEcho {
        fn denoise(&self, x: &ImageGrid<f64>, _s: f64, _c: &ImageGrid<f64>) -> Result<ImageGrid<f64>> {
            Ok(x.clone())
        }
    }

    impl Trainable<f64> for InputEcho {
        type Tape = ();
        fn params(&self) -> &[f64] {
            &[]
        }
        fn params_mut(&mut self) -> &mut [f64] {
            &mut []
        }
        fn forward_taped(&self, x: &ImageGrid<f64>, s: f64, c: &ImageGrid<f64>) -> Result<(ImageGrid<f64>, ())> {
            Ok((self.denoise(x, s, c)?, ()))
        }
        fn backward(&self, _: &(), _: &[f64], _: &mut [f64]) {}
    }

    fn pairs(n: usize, len: usize, seed: u64) -> Vec<(ImageGrid<f64>, ImageGrid<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
                let c: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
                (
                    ImageGrid::new(len, 1, 1.0, x).unwrap(),
                    ImageGrid::new(len, 1, 1.0, c).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn lambda_rules() {
        assert!((lambda_weight(0.5, 0.5, LambdaWeighting::Edm) - 2.0 / 0.25).abs() < 1e-12);
        assert!((lambda_weight(1e8, 0.5, LambdaWeighting::Edm) - 4.0).abs() < 1e-9);
        assert_eq!(lambda_weight(0.01, 0.5, LambdaWeighting::Constant), 1.0);
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        // with the condition equal to the clean image, echoing it is exact
        let batch: Vec<_> = pairs(4, 8, 1).into_iter().map(|(x, _)| (x.clone(), x)).collect();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eval = conditional_loss(&ConditionEcho, &batch, &cfg, &PfgmConfig::default(), &mut rng).unwrap();
        assert_eq!(eval.loss, 0.0);
    }

    #[test]
    fn input_echo_loss_matches_logged_perturbations() {
        let batch = pairs(5, 8, 3);
        let cfg = TrainConfig::default();
        let pfgm = PfgmConfig::default();
        let eval = conditional_loss(&InputEcho, &batch, &cfg, &pfgm, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut direct = 0.0;
        for ((x, _), item) in batch.iter().zip(&eval.items) {
            let sq: f64 = item
                .perturbed
                .values()
                .iter()
                .zip(x.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            direct += lambda_weight(item.sigma, pfgm.sigma_data, cfg.lambda_weighting) * sq / 8.0;
        }
        direct /= 5.0;
        assert!((eval.loss - direct).abs() <= 1e-12 * direct);
        let replay = evaluate_loss(&InputEcho, &batch, &cfg, &pfgm, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(replay.loss, eval.loss);
    }

    #[test]
    fn loss_rejects_bad_batches() {
        let cfg = TrainConfig::default();
        let pfgm = PfgmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(conditional_loss::<f64, _, _>(&ConditionEcho, &[], &cfg, &pfgm, &mut rng).is_err());
        let x = ImageGrid::new(2, 1, 1.0, vec![0.0, 1.0]).unwrap();
        let c = ImageGrid::new(3, 1, 1.0, vec![0.0; 3]).unwrap();
        assert!(conditional_loss(&ConditionEcho, &[(x, c)], &cfg, &pfgm, &mut rng).is_err());
    }

    #[test]
    fn ema_zero_tracks_iterate() {
        let data = pairs(8, 8, 5);
        let cfg = TrainConfig {
            iterations: 5,
            batch: 4,
            ema_decay: 0.0,
            patch: None,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let out = train(LinearDenoiser::new(0.1, 0.1), &data, &cfg, &PfgmConfig::default()).unwrap();
        assert_eq!(out.model, out.last);
    }

    #[test]
    fn divergence_aborts() {
        let data = pairs(4, 8, 6);
        let cfg = TrainConfig {
            iterations: 3,
            batch: 2,
            patch: None,
            ..Default::default()
        };
        let huge = LinearDenoiser::new(1e9, 1e9);
        assert!(matches!(
            train(huge, &data, &cfg, &PfgmConfig::default()),
            Err(Error::Diverged { iteration: 0, .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { ema_decay: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
    }
}
