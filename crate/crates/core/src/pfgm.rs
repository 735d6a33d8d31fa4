//! Augmented-space bookkeeping for Poisson flow generation.
//!
//! Data of dimension `N` is lifted with `D` extra dimensions. Only the
//! augmentation radius `r = σ·√D` matters by symmetry. The sphere-area
//! normalisation of the field never appears: every use below is a ratio in
//! which it cancels.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::scalar::Real;

/// Squared distances are clamped to this floor before taking logs.
pub const DISTANCE_FLOOR: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfgmConfig {
    /// `N`, the flattened data length.
    pub data_dim: usize,
    /// `D`, the number of augmentation dimensions.
    pub aug_dim: u64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
}

impl Default for PfgmConfig {
    fn default() -> Self {
        Self {
            data_dim: 1,
            aug_dim: 128,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
        }
    }
}

impl PfgmConfig {
    pub fn with_data_dim(self, data_dim: usize) -> Self {
        Self { data_dim, ..self }
    }

    pub fn with_aug_dim(self, aug_dim: u64) -> Self {
        Self { aug_dim, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |r: String| Err(Error::invalid("pfgm config", r));
        if self.data_dim == 0 || self.aug_dim == 0 {
            return fail("N and D must be at least 1".into());
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return fail(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            ));
        }
        if !(self.rho >= 1.0) {
            return fail(format!("rho must be >= 1, got {}", self.rho));
        }
        if !(self.sigma_data > 0.0) {
            return fail("sigma_data must be positive".into());
        }
        Ok(())
    }

    pub fn sqrt_d(&self) -> f64 {
        (self.aug_dim as f64).sqrt()
    }
}

pub fn r_from_sigma<T: Real>(sigma: T, aug_dim: u64) -> T {
    sigma * T::lit((aug_dim as f64).sqrt())
}

/// A point `(x, r)` of the reduced augmented space.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample<T> {
    pub x: Vec<T>,
    r: T,
    sigma: T,
}

impl<T: Real> AugmentedSample<T> {
    pub fn from_sigma(x: Vec<T>, sigma: T, aug_dim: u64) -> Result<Self> {
        if !(sigma >= T::zero()) {
            return Err(Error::invalid("augmented sample", "sigma must be non-negative"));
        }
        Ok(Self {
            x,
            r: r_from_sigma(sigma, aug_dim),
            sigma,
        })
    }

    pub fn r(&self) -> T {
        self.r
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }
}

/// A weighted set of point charges.
#[derive(Debug, Clone, PartialEq)]
pub struct DiracDataset<T> {
    points: Vec<Vec<T>>,
    weights: Vec<f64>,
}

impl<T: Real> DiracDataset<T> {
    pub fn new(points: Vec<Vec<T>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("dirac dataset", "no points"));
        }
        ensure_len("dirac weights", points.len(), weights.len())?;
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("dirac dataset", "points must share a positive dimension"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("dirac dataset", "weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "dirac dataset",
                format!("weights sum to {total}, not 1"),
            ));
        }
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Vec<Vec<T>>) -> Result<Self> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Index of the point closest to `x`.
    pub fn nearest(&self, x: &[T]) -> (usize, T) {
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, squared_distance(p, x).sqrt()))
            .fold((0, T::infinity()), |best, c| if c.1 < best.1 { c } else { best })
    }
}

fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusMode {
    /// Radius drawn from the kernel's exact radial law.
    #[default]
    ExactRadial,
    /// Radius fixed at `σ·√D`.
    PaperFixedRadius,
}

/// Draws `u ~ p_r(u | x)` with `r = σ√D`, where
/// `p_r(u|x) ∝ (‖u − x‖² + r²)^{−(N+D)/2}`.
///
/// The kernel factors into a uniform direction and a radius
/// `R = r·√(β/(1−β))` with `β ~ Beta(N/2, D/2)`; `β/(1−β)` is drawn as a
/// ratio of two unit-scale gamma variates. The direction is always drawn
/// first so that two configurations differing only in `D` share directions
/// under one seed.
pub fn sample_perturbation<T: Real, R: Rng + ?Sized>(
    x: &[T],
    sigma: T,
    cfg: &PfgmConfig,
    mode: RadiusMode,
    rng: &mut R,
) -> Result<Vec<T>> {
    ensure_len("perturbation input", cfg.data_dim, x.len())?;
    if !(sigma >= T::zero()) {
        return Err(Error::invalid("perturbation", "sigma must be non-negative"));
    }
    if sigma == T::zero() {
        return Ok(x.to_vec());
    }
    let n = x.len();
    let mut dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut dir {
        *v /= norm;
    }
    let r = sigma.as_f64() * cfg.sqrt_d();
    let radius = match mode {
        RadiusMode::PaperFixedRadius => r,
        RadiusMode::ExactRadial => {
            let num = Gamma::new(0.5 * n as f64, 1.0)
                .expect("positive shape")
                .sample(rng);
            let den = Gamma::new(0.5 * cfg.aug_dim as f64, 1.0)
                .expect("positive shape")
                .sample(rng);
            r * (num / den).sqrt()
        }
    };
    Ok(x.iter()
        .zip(&dir)
        .map(|(&xi, &q)| xi + T::lit(radius * q))
        .collect())
}

/// Draws from the prior `p_{r_max}`: the kernel centred at the origin at `σ_max`.
pub fn sample_prior<T: Real, R: Rng + ?Sized>(cfg: &PfgmConfig, rng: &mut R) -> Result<Vec<T>> {
    let origin = vec![T::zero(); cfg.data_dim];
    sample_perturbation(&origin, T::lit(cfg.sigma_max), cfg, RadiusMode::ExactRadial, rng)
}

/// Field-weighted mean of the charges seen from `(u, r)`.
///
/// With `ℓₖ = log wₖ − ((N+D)/2)·log(‖u − vₖ‖² + r²)` the weights are the
/// softmax `πₖ ∝ exp(ℓₖ − max ℓ)`. Weights need not be normalized; a common
/// positive factor cancels.
pub fn field_centroid<T: Real>(
    u: &[T],
    r: T,
    points: &[Vec<T>],
    weights: &[f64],
    aug_dim: u64,
) -> Result<Vec<T>> {
    if !(r > T::zero()) {
        return Err(Error::invalid("field direction", "r must be positive"));
    }
    if points.is_empty() {
        return Err(Error::invalid("field direction", "empty dataset"));
    }
    ensure_len("field weights", points.len(), weights.len())?;
    for p in points {
        ensure_len("field direction point", u.len(), p.len())?;
    }
    if points.len() == 1 {
        return Ok(points[0].clone());
    }
    let exponent = T::lit(0.5 * (u.len() as f64 + aug_dim as f64));
    let r2 = r * r;
    let floor = T::lit(DISTANCE_FLOOR);
    let logits: Vec<T> = points
        .iter()
        .zip(weights)
        .map(|(p, &w)| {
            if w <= 0.0 {
                return T::neg_infinity();
            }
            let d2 = squared_distance(u, p).max(floor);
            T::lit(w.ln()) - exponent * (d2 + r2).ln()
        })
        .collect();
    let peak = logits.iter().copied().fold(T::neg_infinity(), T::max);
    if !peak.is_finite() {
        return Err(Error::invalid("field direction", "all weights are zero"));
    }
    let soft: Vec<T> = logits.iter().map(|&l| (l - peak).exp()).collect();
    let total: T = soft.iter().copied().sum();
    let mut centroid = vec![T::zero(); u.len()];
    for (p, &s) in points.iter().zip(&soft) {
        let s = s / total;
        for (c, &v) in centroid.iter_mut().zip(p) {
            *c += s * v;
        }
    }
    Ok(centroid)
}

/// `f*(u, r) = √D · E_u / E_r` for point charges with arbitrary positive
/// weights. Both field components share the factor `Σ πₖ`, so the ratio
/// collapses to `√D·(u − Σ πₖ vₖ)/r`.
pub fn field_direction_weighted<T: Real>(
    u: &[T],
    r: T,
    points: &[Vec<T>],
    weights: &[f64],
    aug_dim: u64,
) -> Result<Vec<T>> {
    let centroid = field_centroid(u, r, points, weights, aug_dim)?;
    let sqrt_d = T::lit((aug_dim as f64).sqrt());
    Ok(u.iter()
        .zip(&centroid)
        .map(|(&a, &c)| sqrt_d * (a - c) / r)
        .collect())
}

pub fn oracle_field_direction<T: Real>(
    u: &[T],
    r: T,
    data: &DiracDataset<T>,
    aug_dim: u64,
) -> Result<Vec<T>> {
    field_direction_weighted(u, r, data.points(), data.weights(), aug_dim)
}

/// Regression target `(u − x)/(r/√D) = (u − x)/σ`.
pub fn target_direction<T: Real>(u_perturbed: &[T], x_clean: &[T], sigma: T) -> Result<Vec<T>> {
    if !(sigma > T::zero()) {
        return Err(Error::invalid("target direction", "sigma must be positive"));
    }
    ensure_len("target direction", x_clean.len(), u_perturbed.len())?;
    Ok(u_perturbed
        .iter()
        .zip(x_clean)
        .map(|(&u, &x)| (u - x) / sigma)
        .collect())
}
