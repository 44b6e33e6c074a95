use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation with a two-sided t-test on `n - 2` df.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::domain(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::domain(format!("correlation needs at least 3 observations, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::domain("series contain non-finite values"));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::domain("correlation of a constant series is undefined"));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Correlation { r, p_value, n })
}

/// Phi coefficient of two binary series with a chi-squared (1 df) test on `n·phi²`.
pub fn phi(x: &[u8], y: &[u8]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::domain(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|&v| v > 1) {
        return Err(Error::domain("phi needs 0/1 series"));
    }
    // a = (1,1), b = (1,0), c = (0,1), d = (0,0)
    let (mut a, mut b, mut c, mut d) = (0u64, 0u64, 0u64, 0u64);
    for (&u, &v) in x.iter().zip(y) {
        match (u, v) {
            (1, 1) => a += 1,
            (1, 0) => b += 1,
            (0, 1) => c += 1,
            _ => d += 1,
        }
    }
    let phi = phi_from_table(a, b, c, d)?;
    let n = x.len();
    let chi2 = n as f64 * phi * phi;
    let p_value = ChiSquared::new(1.0).expect("1 df").sf(chi2);
    Ok(Correlation { r: phi, p_value, n })
}

/// `(ad - bc) / sqrt((a+b)(c+d)(a+c)(b+d))`.
pub fn phi_from_table(a: u64, b: u64, c: u64, d: u64) -> Result<f64> {
    let margins = [a + b, c + d, a + c, b + d];
    if margins.contains(&0) {
        return Err(Error::domain("phi is undefined when a series takes a single value"));
    }
    let num = a as f64 * d as f64 - b as f64 * c as f64;
    let den = margins.iter().map(|&m| (m as f64).sqrt()).product::<f64>();
    Ok((num / den).clamp(-1.0, 1.0))
}
