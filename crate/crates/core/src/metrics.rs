//! PSNR and single-scale SSIM.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::scalar::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes<T: Real>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Dimension {
            context: "metric inputs",
            expected: a.len(),
            actual: b.len(),
        })
    }
}

pub fn mse<T: Real>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<f64> {
    check_shapes(a, b)?;
    let s: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(peak²/MSE)`; identical images give `+∞`.
pub fn psnr<T: Real>(a: &ImageGrid<T>, b: &ImageGrid<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr", "peak must be positive"));
    }
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let t = i as f64 - c;
        *v = (-t * t / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode correlation with the Gaussian window.
fn blur(img: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * img[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * tmp[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM over every fully contained 11×11 Gaussian window
/// (σ = 1.5), with `C₁ = (0.01·L)²` and `C₂ = (0.03·L)²`. Local
/// variances use the biased (window-weighted) estimator.
pub fn ssim<T: Real>(a: &ImageGrid<T>, b: &ImageGrid<T>, dynamic_range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if !(dynamic_range > 0.0) {
        return Err(Error::invalid("ssim", "dynamic range must be positive"));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let x: Vec<f64> = a.values().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = b.values().iter().map(|v| v.as_f64()).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let taps = gaussian_taps();
    let mx = blur(&x, w, h, &taps);
    let my = blur(&y, w, h, &taps);
    let mxx = blur(&prod(&x, &x), w, h, &taps);
    let myy = blur(&prod(&y, &y), w, h, &taps);
    let mxy = blur(&prod(&x, &y), w, h, &taps);
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Peak convention for PSNR and the SSIM dynamic range.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PeakRule {
    /// `max − min` of the ground-truth image.
    #[default]
    GroundTruthRange,
    Fixed { value: f64 },
}

impl PeakRule {
    pub fn peak<T: Real>(&self, truth: &ImageGrid<T>) -> Result<f64> {
        let p = match *self {
            PeakRule::GroundTruthRange => {
                let (lo, hi) = truth.min_max();
                (hi - lo).as_f64()
            }
            PeakRule::Fixed { value } => value,
        };
        if p > 0.0 {
            Ok(p)
        } else {
            Err(Error::invalid("metric peak", format!("peak {p} must be positive")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push<T: Real>(
        &mut self,
        image_id: impl Into<String>,
        pred: &ImageGrid<T>,
        truth: &ImageGrid<T>,
        rule: PeakRule,
    ) -> Result<&MetricRow> {
        let peak = rule.peak(truth)?;
        let m = mse(pred, truth)?;
        self.rows.push(MetricRow {
            image_id: image_id.into(),
            psnr_db: psnr_from_mse(m, peak),
            ssim: ssim(pred, truth, peak)?,
            mse: m,
        });
        Ok(self.rows.last().unwrap())
    }

    fn mean_of(&self, f: impl Fn(&MetricRow) -> f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean_of(|r| r.psnr_db)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean_of(|r| r.ssim)
    }

    pub fn mean_mse(&self) -> f64 {
        self.mean_of(|r| r.mse)
    }

    /// Per-image rows plus a final `mean` row. LPIPS is not computed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,psnr_db,ssim,mse,lpips\n");
        let fmt = |v: f64| {
            if v == f64::INFINITY {
                "inf".to_string()
            } else {
                format!("{v:.6}")
            }
        };
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{:.6e},n/a", r.image_id, fmt(r.psnr_db), r.ssim, r.mse);
        }
        let _ = writeln!(
            s,
            "mean,{},{:.6},{:.6e},n/a",
            fmt(self.mean_psnr()),
            self.mean_ssim(),
            self.mean_mse()
        );
        s
    }
}
