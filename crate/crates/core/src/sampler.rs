//! Deterministic reverse-flow sampling.
//!
//! The state is carried through the decreasing levels `σ₀ > … > σ_K = 0`
//! with slope `d(x, σ) = (x − D(x, σ, c))/σ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserModel, IntensityTransform};
use crate::error::{Error, Result};
use crate::fbp::{fbp_reconstruct, FilterSpec};
use crate::image::ImageGrid;
use crate::pfgm::{sample_prior, PfgmConfig};
use crate::projector::{siddon_forward, GridSpec, Sinogram};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    levels: Vec<f64>,
    rho: f64,
}

impl SigmaSchedule {
    /// Accepts any strictly decreasing positive list ending in an exact zero.
    pub fn from_levels(levels: Vec<f64>, rho: f64) -> Result<Self> {
        if levels.len() < 2 || *levels.last().unwrap() != 0.0 {
            return Err(Error::invalid("sigma schedule", "need at least one step ending at 0"));
        }
        if levels.windows(2).any(|w| !(w[0] > w[1])) || !levels[0].is_finite() {
            return Err(Error::invalid("sigma schedule", "levels must strictly decrease"));
        }
        Ok(Self { levels, rho })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }
}

/// `σᵢ = (σ_max^{1/ρ} + i/(K−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ` for `i < K`, then `σ_K = 0`.
pub fn build_sigma_schedule(steps: usize, cfg: &PfgmConfig) -> Result<SigmaSchedule> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::invalid("sigma schedule", "need at least one step"));
    }
    let inv = 1.0 / cfg.rho;
    let (hi, lo) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut levels: Vec<f64> = (0..steps)
        .map(|i| {
            if i == 0 {
                cfg.sigma_max
            } else if i == steps - 1 {
                cfg.sigma_min
            } else {
                (hi + i as f64 / (steps - 1) as f64 * (lo - hi)).powf(cfg.rho)
            }
        })
        .collect();
    levels.push(0.0);
    SigmaSchedule::from_levels(levels, cfg.rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Euler,
    #[default]
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub integrator: Integrator,
    pub pfgm: PfgmConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            integrator: Integrator::Heun,
            pfgm: PfgmConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("sampler config", "steps must be at least 1"));
        }
        self.pfgm.validate()
    }

    pub fn schedule(&self) -> Result<SigmaSchedule> {
        build_sigma_schedule(self.steps, &self.pfgm)
    }
}

fn slope<T: Real, M: DenoiserModel<T> + ?Sized>(
    model: &M,
    x: &ImageGrid<T>,
    sigma: f64,
    condition: &ImageGrid<T>,
    step: usize,
) -> Result<Vec<T>> {
    let denoised = model.denoise(x, T::lit(sigma), condition)?;
    if !denoised.same_shape(x) {
        return Err(Error::Dimension {
            context: "denoiser output",
            expected: x.len(),
            actual: denoised.len(),
        });
    }
    let s = T::lit(sigma);
    let d: Vec<T> = x
        .values()
        .iter()
        .zip(denoised.values())
        .map(|(&a, &b)| (a - b) / s)
        .collect();
    if let Some(i) = d.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            sigma,
            detail: format!("slope component {i} is not finite"),
        });
    }
    Ok(d)
}

fn axpy<T: Real>(x: &[T], h: T, d: &[T]) -> Vec<T> {
    x.iter().zip(d).map(|(&a, &b)| a + h * b).collect()
}

/// Integrates from `x0` at `levels[0]` down through `levels`.
///
/// A step ending at `σ = 0` always uses the Euler update.
pub fn integrate_ode<T: Real, M: DenoiserModel<T> + ?Sized>(
    model: &M,
    x0: ImageGrid<T>,
    condition: &ImageGrid<T>,
    levels: &[f64],
    integrator: Integrator,
) -> Result<ImageGrid<T>> {
    if levels.is_empty() {
        return Err(Error::invalid("ode integration", "no levels"));
    }
    let mut x = x0;
    for (i, w) in levels.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        let h = T::lit(s_next - s);
        let d = slope(model, &x, s, condition, i)?;
        let euler = axpy(x.values(), h, &d);
        let next = if integrator == Integrator::Heun && s_next > 0.0 {
            let mid = x.with_values(euler);
            let d2 = slope(model, &mid, s_next, condition, i)?;
            let half = T::lit(0.5) * h;
            x.values()
                .iter()
                .zip(d.iter().zip(&d2))
                .map(|(&a, (&p, &q))| a + half * (p + q))
                .collect()
        } else {
            euler
        };
        x = x.with_values(next);
    }
    Ok(x)
}

/// Draws `x₀` from the prior and integrates the full schedule.
pub fn sample_ode<T: Real, M: DenoiserModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    condition: &ImageGrid<T>,
    schedule: &SigmaSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ImageGrid<T>> {
    cfg.validate()?;
    let prior = sample_prior::<T, R>(&cfg.pfgm.with_data_dim(condition.len()), rng)?;
    let x0 = condition.with_values(prior);
    integrate_ode(model, x0, condition, schedule.levels(), cfg.integrator)
}

/// One trajectory per seed, run concurrently; output order follows `seeds`.
pub fn sample_many<T: Real, M: DenoiserModel<T> + ?Sized>(
    model: &M,
    condition: &ImageGrid<T>,
    schedule: &SigmaSchedule,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<ImageGrid<T>>> {
    seeds
        .par_iter()
        .map(|&s| sample_ode(model, condition, schedule, cfg, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub grid: GridSpec,
    pub filter: FilterSpec,
    /// Maps intensities to network units.
    pub transform: IntensityTransform,
    /// Post-hoc `x ← x + FBP(y − A x)` corrections; 0 disables the hook.
    pub consistency_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Reconstruction<T> {
    pub image: ImageGrid<T>,
    /// The sparse-view FBP image, in intensity units.
    pub condition: ImageGrid<T>,
}

/// Conditional reconstruction from a sparse sinogram. All outputs are in
/// intensity units.
pub fn reconstruct<T: Real, M: DenoiserModel<T> + ?Sized, R: Rng + ?Sized>(
    sparse: &Sinogram<T>,
    model: &M,
    cfg: &SamplerConfig,
    opts: &ReconstructOptions,
    rng: &mut R,
) -> Result<Reconstruction<T>> {
    sparse.geometry().validate()?;
    sparse.geometry().check_grid(&opts.grid)?;
    let condition = fbp_reconstruct(sparse, &opts.grid, &opts.filter)?;
    let schedule = cfg.schedule()?;
    let net_cond = opts.transform.forward(&condition);
    let sample = sample_ode(model, &net_cond, &schedule, cfg, rng)?;
    let mut image = opts.transform.inverse(&sample);
    for _ in 0..opts.consistency_iterations {
        let residual = siddon_forward(&image, sparse.geometry())?;
        let diff: Vec<T> = sparse
            .values()
            .iter()
            .zip(residual.values())
            .map(|(&y, &p)| y - p)
            .collect();
        let correction = fbp_reconstruct(&Sinogram::new(diff, sparse.geometry().clone())?, &opts.grid, &opts.filter)?;
        let updated: Vec<T> = image
            .values()
            .iter()
            .zip(correction.values())
            .map(|(&a, &b)| a + b)
            .collect();
        image = image.with_values(updated);
    }
    Ok(Reconstruction { image, condition })
}
