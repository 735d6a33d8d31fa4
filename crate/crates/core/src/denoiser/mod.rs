//! Conditional denoisers `D(x̂, σ, c)` and their training.
//!
//! Models predict the clean image. The direction predictor used by the flow
//! ODE follows as `f = (x̂ − D)/σ`.

pub mod model_file;
pub mod nn;
pub mod train;
pub mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::pfgm::{field_centroid, DiracDataset};
use crate::scalar::Real;

pub use train::{
    conditional_loss, evaluate_loss, lambda_weight, train, LambdaWeighting, LossEval, SigmaSampling,
    TracePoint, TrainConfig, TrainOutcome,
};
pub use unet::{TinyNetConfig, TinyUNet};

pub trait DenoiserModel<T: Real>: Sync {
    fn denoise(&self, x: &ImageGrid<T>, sigma: T, condition: &ImageGrid<T>) -> Result<ImageGrid<T>>;
}

/// A denoiser with a flat parameter vector and a reverse-mode gradient.
pub trait Trainable<T: Real>: DenoiserModel<T> + Clone + Send {
    type Tape: Send;

    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];

    fn forward_taped(
        &self,
        x: &ImageGrid<T>,
        sigma: T,
        condition: &ImageGrid<T>,
    ) -> Result<(ImageGrid<T>, Self::Tape)>;

    /// Adds `∂⟨grad_out, D⟩/∂θ` into `grads`.
    fn backward(&self, tape: &Self::Tape, grad_out: &[T], grads: &mut [T]);
}

fn check_pair<T: Real>(x: &ImageGrid<T>, condition: &ImageGrid<T>) -> Result<()> {
    if x.same_shape(condition) {
        Ok(())
    } else {
        Err(Error::Dimension {
            context: "denoiser condition",
            expected: x.len(),
            actual: condition.len(),
        })
    }
}

fn check_sigma<T: Real>(sigma: T) -> Result<()> {
    if sigma > T::zero() && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("denoiser", format!("sigma must be positive, got {sigma}")))
    }
}

/// Affine intensity map into network units, `(v − offset)·scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityTransform {
    pub offset: f64,
    pub scale: f64,
}

impl IntensityTransform {
    pub const IDENTITY: IntensityTransform = IntensityTransform {
        offset: 0.0,
        scale: 1.0,
    };

    /// Maps `[min, max]` onto `[0, 1]`.
    pub fn from_range(min: f64, max: f64) -> Result<Self> {
        if !(max > min) {
            return Err(Error::invalid(
                "intensity transform",
                format!("empty range [{min}, {max}]"),
            ));
        }
        Ok(Self {
            offset: min,
            scale: 1.0 / (max - min),
        })
    }

    pub fn forward<T: Real>(&self, image: &ImageGrid<T>) -> ImageGrid<T> {
        let (o, s) = (T::lit(self.offset), T::lit(self.scale));
        image.map(|v| (v - o) * s)
    }

    pub fn inverse<T: Real>(&self, image: &ImageGrid<T>) -> ImageGrid<T> {
        let (o, s) = (T::lit(self.offset), T::lit(self.scale));
        image.map(|v| v / s + o)
    }
}

impl Default for IntensityTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// The exact minimizer for a point-charge data distribution:
/// `D*(x, σ) = x − σ·f*(x, σ√D)`, which is the field-weighted charge centroid.
/// The condition is ignored.
#[derive(Debug, Clone)]
pub struct OracleDenoiser<T> {
    data: DiracDataset<T>,
    aug_dim: u64,
}

impl<T: Real> OracleDenoiser<T> {
    pub fn new(data: DiracDataset<T>, aug_dim: u64) -> Self {
        Self { data, aug_dim }
    }

    pub fn data(&self) -> &DiracDataset<T> {
        &self.data
    }

    pub fn aug_dim(&self) -> u64 {
        self.aug_dim
    }
}

pub fn oracle_model<T: Real>(data: DiracDataset<T>, aug_dim: u64) -> OracleDenoiser<T> {
    OracleDenoiser::new(data, aug_dim)
}

impl<T: Real> DenoiserModel<T> for OracleDenoiser<T> {
    fn denoise(&self, x: &ImageGrid<T>, sigma: T, _condition: &ImageGrid<T>) -> Result<ImageGrid<T>> {
        check_sigma(sigma)?;
        let r = sigma * T::lit((self.aug_dim as f64).sqrt());
        let c = field_centroid(x.values(), r, self.data.points(), self.data.weights(), self.aug_dim)?;
        Ok(x.with_values(c))
    }
}

/// Returns the condition unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConditionEcho;

impl<T: Real> DenoiserModel<T> for ConditionEcho {
    fn denoise(&self, x: &ImageGrid<T>, sigma: T, condition: &ImageGrid<T>) -> Result<ImageGrid<T>> {
        check_sigma(sigma)?;
        check_pair(x, condition)?;
        Ok(condition.clone())
    }
}

impl<T: Real> Trainable<T> for ConditionEcho {
    type Tape = ();

    fn params(&self) -> &[T] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut []
    }

    fn forward_taped(&self, x: &ImageGrid<T>, sigma: T, condition: &ImageGrid<T>) -> Result<(ImageGrid<T>, ())> {
        Ok((self.denoise(x, sigma, condition)?, ()))
    }

    fn backward(&self, _tape: &(), _grad_out: &[T], _grads: &mut [T]) {}
}

/// `D = a·x̂ + b·c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDenoiser<T> {
    params: [T; 2],
}

impl<T: Real> LinearDenoiser<T> {
    pub fn new(a: T, b: T) -> Self {
        Self { params: [a, b] }
    }
}

impl<T: Real> DenoiserModel<T> for LinearDenoiser<T> {
    fn denoise(&self, x: &ImageGrid<T>, sigma: T, condition: &ImageGrid<T>) -> Result<ImageGrid<T>> {
        check_sigma(sigma)?;
        check_pair(x, condition)?;
        let [a, b] = self.params;
        Ok(x.with_values(
            x.values()
                .iter()
                .zip(condition.values())
                .map(|(&u, &c)| a * u + b * c)
                .collect(),
        ))
    }
}

impl<T: Real> Trainable<T> for LinearDenoiser<T> {
    type Tape = (Vec<T>, Vec<T>);

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn forward_taped(
        &self,
        x: &ImageGrid<T>,
        sigma: T,
        condition: &ImageGrid<T>,
    ) -> Result<(ImageGrid<T>, Self::Tape)> {
        let out = self.denoise(x, sigma, condition)?;
        Ok((out, (x.values().to_vec(), condition.values().to_vec())))
    }

    fn backward(&self, tape: &Self::Tape, grad_out: &[T], grads: &mut [T]) {
        let (x, c) = tape;
        grads[0] += grad_out.iter().zip(x).map(|(&g, &v)| g * v).sum::<T>();
        grads[1] += grad_out.iter().zip(c).map(|(&g, &v)| g * v).sum::<T>();
    }
}
