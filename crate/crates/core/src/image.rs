//! Image grids and HU display windowing.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::scalar::{cast_slice, Real};

/// A 2D scalar field on a square-pixel grid centred on the isocenter.
///
/// Values are row-major with row 0 at the top (largest `y`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid<T> {
    width: usize,
    height: usize,
    pixel_size: T,
    values: Vec<T>,
}

impl<T: Real> ImageGrid<T> {
    pub fn new(width: usize, height: usize, pixel_size: T, values: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image grid", "width and height must be positive"));
        }
        if !(pixel_size > T::zero()) || !pixel_size.is_finite() {
            return Err(Error::invalid("image grid", "pixel size must be positive"));
        }
        ensure_len("image values", width * height, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "image grid",
                format!("non-finite value at index {i}"),
            ));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, pixel_size: T) -> Result<Self> {
        Self::new(width, height, pixel_size, vec![T::zero(); width * height])
    }

    pub fn filled(width: usize, height: usize, pixel_size: T, value: T) -> Result<Self> {
        Self::new(width, height, pixel_size, vec![value; width * height])
    }

    /// Same geometry as `self`, new values. Panics if the length differs.
    pub fn with_values(&self, values: Vec<T>) -> Self {
        assert_eq!(values.len(), self.len(), "value count must match grid");
        Self {
            width: self.width,
            height: self.height,
            pixel_size: self.pixel_size,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> T {
        self.pixel_size
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, col: usize, row: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Physical centre `(x, y)` in mm of pixel `(col, row)`.
    pub fn pixel_center(&self, col: usize, row: usize) -> (T, T) {
        let half = T::lit(0.5);
        let x = (T::from_usize_lossy(col) + half - T::from_usize_lossy(self.width) * half)
            * self.pixel_size;
        let y = (T::from_usize_lossy(self.height) * half - T::from_usize_lossy(row) - half)
            * self.pixel_size;
        (x, y)
    }

    /// Radius of the circle inscribed in the physical extent.
    pub fn inscribed_radius(&self) -> T {
        T::from_usize_lossy(self.width.min(self.height)) * self.pixel_size * T::lit(0.5)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> ImageGrid<U> {
        ImageGrid {
            width: self.width,
            height: self.height,
            pixel_size: U::lit(self.pixel_size.as_f64()),
            values: cast_slice(&self.values),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.values
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.len())
    }

    /// Extracts a `size`×`size` patch whose top-left pixel is `(col, row)`.
    pub fn patch(&self, col: usize, row: usize, size: usize) -> Result<Self> {
        if col + size > self.width || row + size > self.height {
            return Err(Error::invalid(
                "patch",
                format!(
                    "{size}x{size} patch at ({col}, {row}) exceeds {}x{} image",
                    self.width, self.height
                ),
            ));
        }
        let mut out = Vec::with_capacity(size * size);
        for r in row..row + size {
            out.extend_from_slice(&self.values[r * self.width + col..r * self.width + col + size]);
        }
        Self::new(size, size, self.pixel_size, out)
    }
}

/// An HU display window `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplayWindow {
    pub low: f64,
    pub high: f64,
}

impl DisplayWindow {
    /// The soft-tissue window used for reconstructed slices.
    pub const CLINICAL: DisplayWindow = DisplayWindow {
        low: -160.0,
        high: 240.0,
    };

    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::invalid(
                "display window",
                format!("need low < high, got [{low}, {high}]"),
            ));
        }
        Ok(Self { low, high })
    }

    /// Maps a value to `[0, 1]` with clamping.
    pub fn normalize<T: Real>(&self, v: T) -> T {
        let t = (v.as_f64() - self.low) / (self.high - self.low);
        T::lit(t.clamp(0.0, 1.0))
    }
}

impl Default for DisplayWindow {
    fn default() -> Self {
        Self::CLINICAL
    }
}

pub fn hu_window<T: Real>(image: &ImageGrid<T>, window: DisplayWindow) -> ImageGrid<T> {
    image.map(|v| window.normalize(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(ImageGrid::<f64>::new(0, 2, 1.0, vec![]).is_err());
        assert!(ImageGrid::<f64>::new(2, 2, 0.0, vec![0.0; 4]).is_err());
        assert!(ImageGrid::<f64>::new(2, 2, 1.0, vec![0.0; 3]).is_err());
        assert!(ImageGrid::<f64>::new(2, 1, 1.0, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn pixel_centers_are_symmetric() {
        let g = ImageGrid::<f64>::zeros(4, 4, 2.0).unwrap();
        assert_eq!(g.pixel_center(0, 0), (-3.0, 3.0));
        assert_eq!(g.pixel_center(3, 3), (3.0, -3.0));
    }

    #[test]
    fn clinical_window_bounds() {
        let w = DisplayWindow::CLINICAL;
        assert_eq!(w.normalize(-160.0_f64), 0.0);
        assert_eq!(w.normalize(240.0_f64), 1.0);
        assert_eq!(w.normalize(40.0_f64), 0.5);
        assert_eq!(w.normalize(-1000.0_f64), 0.0);
        assert_eq!(w.normalize(3000.0_f64), 1.0);
    }

    #[test]
    fn window_must_be_ordered() {
        assert!(DisplayWindow::new(1.0, 1.0).is_err());
        assert!(DisplayWindow::new(2.0, 1.0).is_err());
    }

    #[test]
    fn patch_extraction() {
        let g = ImageGrid::<f64>::new(3, 3, 1.0, (0..9).map(f64::from).collect()).unwrap();
        let p = g.patch(1, 1, 2).unwrap();
        assert_eq!(p.values(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(g.patch(2, 2, 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn window_is_monotone(a in -2000.0f64..2000.0, b in -2000.0f64..2000.0) {
                let w = DisplayWindow::CLINICAL;
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(w.normalize(lo) <= w.normalize(hi));
            }

            #[test]
            fn unit_window_is_idempotent(v in -3.0f64..3.0) {
                let unit = DisplayWindow::new(0.0, 1.0).unwrap();
                let once = DisplayWindow::CLINICAL.normalize(v * 400.0);
                prop_assert_eq!(unit.normalize(once), once);
            }
        }
    }
}
