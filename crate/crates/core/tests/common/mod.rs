//! Independent oracles shared by the integration targets.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

fn pow(base: &BigRational, mut e: u64) -> BigRational {
    let mut acc = BigRational::one();
    let mut b = base.clone();
    while e > 0 {
        if e & 1 == 1 {
            acc *= &b;
        }
        b = &b * &b;
        e >>= 1;
    }
    acc
}

/// `√D·(u − Σπₖvₖ)/r` with the charge weights `πₖ ∝ wₖ(‖u−vₖ‖² + r²)^{−(N+D)/2}`
/// summed exactly in rationals. `N + D` must be even.
pub fn exact_field(u: &[f64], r: f64, points: &[Vec<f64>], weights: &[f64], aug_dim: u64) -> Vec<f64> {
    let n = u.len() as u64;
    assert!((n + aug_dim) % 2 == 0, "exponent must be an integer");
    let e = (n + aug_dim) / 2;
    let ur: Vec<BigRational> = u.iter().map(|&v| rat(v)).collect();
    let r2 = rat(r) * rat(r);
    // scale by the smallest s so the rationals stay near 1
    let s: Vec<BigRational> = points
        .iter()
        .map(|p| {
            let mut acc = r2.clone();
            for (a, &b) in ur.iter().zip(p) {
                let d = a - rat(b);
                acc += &d * &d;
            }
            acc
        })
        .collect();
    let s_min = s.iter().min().unwrap().clone();
    let mut num = vec![BigRational::zero(); u.len()];
    let mut den = BigRational::zero();
    for ((p, &w), sk) in points.iter().zip(weights).zip(&s) {
        let q = rat(w) * pow(&(&s_min / sk), e);
        for (acc, &v) in num.iter_mut().zip(p) {
            *acc += &q * rat(v);
        }
        den += q;
    }
    let scale = (aug_dim as f64).sqrt() / r;
    ur.iter()
        .zip(&num)
        .map(|(ui, ci)| {
            let diff = ui - ci / &den;
            scale * ratio_to_f64(&diff)
        })
        .collect()
}

fn ratio_to_f64(x: &BigRational) -> f64 {
    // shift to keep both parts inside f64 range before dividing
    let (n, d) = (x.numer(), x.denom());
    let nb = n.bits() as i64;
    let db = d.bits() as i64;
    let excess_n = (nb - 1000).max(0);
    let excess_d = (db - 1000).max(0);
    let n2: BigInt = n >> excess_n as usize;
    let d2: BigInt = d >> excess_d as usize;
    n2.to_f64().unwrap() / d2.to_f64().unwrap() * 2f64.powi((excess_n - excess_d) as i32)
}

/// Asymptotic Kolmogorov p-value of a one-sample KS test against `cdf`.
pub fn ks_test(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-14 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

pub fn normal_cdf(sigma: f64) -> impl Fn(f64) -> f64 {
    let n = Normal::new(0.0, sigma).unwrap();
    move |x| n.cdf(x)
}

/// Pearson chi-square p-value of observed counts against expected probabilities.
pub fn chi_square_p(counts: &[usize], probs: &[f64]) -> (f64, f64) {
    let total: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * total as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    (stat, 1.0 - dist.cdf(stat))
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
