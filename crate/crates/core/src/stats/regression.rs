use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub const ALPHA: f64 = 0.01;
pub const INTERCEPT: &str = "intercept";
const MAX_ITER: usize = 100;
const TOL: f64 = 1e-8;
const DIVERGED: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ols,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub coefficient: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionReport {
    pub outcome: String,
    pub model_kind: ModelKind,
    pub n: usize,
    /// Design columns in order; the intercept comes first.
    pub coefficients: Vec<Coefficient>,
    /// IRLS iterations (0 for OLS).
    pub iterations: usize,
}

impl RegressionReport {
    pub fn intercept(&self) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == INTERCEPT)
    }

    /// Coefficients other than the intercept.
    pub fn regressors(&self) -> impl Iterator<Item = &Coefficient> {
        self.coefficients.iter().filter(|c| c.name != INTERCEPT)
    }

    pub fn get(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// Named design matrix, one column per regressor.
#[derive(Clone, Debug)]
pub struct Design {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
}

impl Design {
    /// Intercept column followed by the given regressors.
    pub fn with_intercept(columns: &[(&str, &[f64])], n: usize) -> Result<Self> {
        let mut names = vec![INTERCEPT.to_string()];
        let mut x = DMatrix::from_element(n, columns.len() + 1, 1.0);
        for (j, (name, col)) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::domain(format!("column {name} has {} rows, expected {n}", col.len())));
            }
            names.push(name.to_string());
            for (i, &v) in col.iter().enumerate() {
                x[(i, j + 1)] = v;
            }
        }
        Self::new(names, x)
    }

    pub fn new(names: Vec<String>, x: DMatrix<f64>) -> Result<Self> {
        if names.len() != x.ncols() {
            return Err(Error::domain("design names and columns differ in number"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("design contains non-finite values"));
        }
        Ok(Design { names, x })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

fn check_shape(design: &Design, y_len: usize) -> Result<()> {
    if y_len != design.n() {
        return Err(Error::domain(format!("outcome has {y_len} rows, design has {}", design.n())));
    }
    if design.n() <= design.p() {
        return Err(Error::domain(format!(
            "need more observations ({}) than columns ({})",
            design.n(),
            design.p()
        )));
    }
    Ok(())
}

/// Upper-triangular `R` of a thin QR, after checking every column adds rank.
fn checked_qr(design: &Design, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let qr = x.clone().qr();
    let r = qr.r();
    for j in 0..x.ncols() {
        let norm = x.column(j).norm();
        if norm == 0.0 || r[(j, j)].abs() <= 1e-10 * norm {
            return Err(Error::RankDeficient { column: j, name: design.names[j].clone() });
        }
    }
    Ok((qr.q(), r))
}

fn upper_inverse(r: &DMatrix<f64>) -> DMatrix<f64> {
    let p = r.ncols();
    r.clone()
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .expect("checked nonsingular")
}

fn finish(
    design: &Design,
    outcome: &str,
    kind: ModelKind,
    beta: &DVector<f64>,
    se: &[f64],
    p_of: impl Fn(f64) -> f64,
    iterations: usize,
) -> RegressionReport {
    let coefficients = design
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let (b, s) = (beta[j], se[j]);
            let p_value = if s > 0.0 {
                p_of((b / s).abs())
            } else if b == 0.0 {
                1.0
            } else {
                0.0
            };
            Coefficient {
                name: name.clone(),
                coefficient: b,
                std_error: s,
                p_value,
                significant: p_value < ALPHA,
            }
        })
        .collect();
    RegressionReport { outcome: outcome.to_string(), model_kind: kind, n: design.n(), coefficients, iterations }
}

/// Ordinary least squares via QR with two-sided t-tests on `n - p` df.
pub fn ols_fit(design: &Design, y: &[f64], outcome: &str) -> Result<RegressionReport> {
    check_shape(design, y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("outcome contains non-finite values"));
    }
    let (q, r) = checked_qr(design, &design.x)?;
    let yv = DVector::from_column_slice(y);
    let qty = q.transpose() * &yv;
    let beta = r.clone().solve_upper_triangular(&qty).expect("checked nonsingular");
    let resid = &yv - &design.x * &beta;
    let df = (design.n() - design.p()) as f64;
    let s2 = resid.norm_squared() / df;
    let rinv = upper_inverse(&r);
    let se: Vec<f64> = (0..design.p()).map(|j| (s2 * rinv.row(j).norm_squared()).sqrt()).collect();
    let t = StudentsT::new(0.0, 1.0, df).expect("positive df");
    Ok(finish(design, outcome, ModelKind::Ols, &beta, &se, |a| (2.0 * t.sf(a)).min(1.0), 0))
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Maximum-likelihood logistic regression by IRLS with Wald z-tests.
pub fn logistic_fit(design: &Design, y: &[u8], outcome: &str) -> Result<RegressionReport> {
    check_shape(design, y.len())?;
    if y.iter().any(|&v| v > 1) {
        return Err(Error::domain("logistic outcome must be 0/1"));
    }
    let ones = y.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::domain("logistic outcome contains a single class"));
    }
    checked_qr(design, &design.x)?;
    let (n, p) = (design.n(), design.p());
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let mut beta = DVector::zeros(p);
    let mut trace = Vec::new();
    for iter in 1..=MAX_ITER {
        let eta = &design.x * &beta;
        let mut xw = design.x.clone();
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let mu = logistic(eta[i]);
            let w = (mu * (1.0 - mu)).max(1e-300);
            let sw = w.sqrt();
            z[i] = sw * (eta[i] + (yf[i] - mu) / w);
            xw.row_mut(i).scale_mut(sw);
        }
        let qr = xw.qr();
        let next = qr
            .r()
            .solve_upper_triangular(&(qr.q().transpose() * &z))
            .ok_or_else(|| Error::domain("singular weighted design during IRLS"))?;
        let change = (&next - &beta).amax();
        beta = next;
        trace.push(change);
        if let Some(j) = (0..p).find(|&j| beta[j].abs() > DIVERGED || !beta[j].is_finite()) {
            return Err(Error::Separation { name: design.names[j].clone(), value: beta[j] });
        }
        if change < TOL {
            let eta = &design.x * &beta;
            let mut xw = design.x.clone();
            for i in 0..n {
                let mu = logistic(eta[i]);
                xw.row_mut(i).scale_mut((mu * (1.0 - mu)).sqrt());
            }
            let (_, r) = checked_qr(design, &xw)
                .map_err(|_| Error::Separation { name: INTERCEPT.into(), value: f64::INFINITY })?;
            let rinv = upper_inverse(&r);
            let se: Vec<f64> = (0..p).map(|j| rinv.row(j).norm()).collect();
            let normal = Normal::standard();
            return Ok(finish(design, outcome, ModelKind::Logistic, &beta, &se, |a| (2.0 * normal.sf(a)).min(1.0), iter));
        }
    }
    Err(Error::NotConverged { iterations: MAX_ITER, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_plane_is_recovered() {
        let x1 = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let x2 = [1.0, 0.0, 2.0, 5.0, 3.0, 1.0];
        let y: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| 3.0 + 2.0 * a - b).collect();
        let d = Design::with_intercept(&[("x1", &x1), ("x2", &x2)], 6).unwrap();
        let r = ols_fit(&d, &y, "y").unwrap();
        let c: Vec<f64> = r.coefficients.iter().map(|c| c.coefficient).collect();
        for (a, b) in c.iter().zip([3.0, 2.0, -1.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_outcome_gives_zero_slopes() {
        let x1 = [0.0, 1.0, 2.0, 3.0, 7.0];
        let d = Design::with_intercept(&[("x1", &x1)], 5).unwrap();
        let r = ols_fit(&d, &[4.0; 5], "y").unwrap();
        assert!(r.get("x1").unwrap().coefficient.abs() < 1e-12);
        assert!((r.intercept().unwrap().coefficient - 4.0).abs() < 1e-12);
        assert!(!r.get("x1").unwrap().significant);
    }

    #[test]
    fn duplicated_column_reports_rank_error() {
        let x1 = [0.0, 1.0, 2.0, 3.0, 7.0];
        let d = Design::with_intercept(&[("x1", &x1), ("copy", &x1)], 5).unwrap();
        match ols_fit(&d, &[1.0, 2.0, 3.0, 4.0, 5.0], "y") {
            Err(Error::RankDeficient { column, name }) => {
                assert_eq!(column, 2);
                assert_eq!(name, "copy");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_class_and_separation_are_errors() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let d = Design::with_intercept(&[("x", &x)], 6).unwrap();
        assert!(matches!(logistic_fit(&d, &[1; 6], "y"), Err(Error::Domain(_))));
        assert!(matches!(logistic_fit(&d, &[0, 0, 0, 1, 1, 1], "y"), Err(Error::Separation { .. })));
    }

    #[test]
    fn symmetric_null_data_gives_zero_slope() {
        let x = [-2.0, -1.0, 1.0, 2.0, -2.0, -1.0, 1.0, 2.0];
        let y = [0, 0, 0, 0, 1, 1, 1, 1];
        let d = Design::with_intercept(&[("x", &x)], 8).unwrap();
        let r = logistic_fit(&d, &y, "y").unwrap();
        assert!(r.get("x").unwrap().coefficient.abs() < 1e-10);
        assert!(r.get("x").unwrap().p_value > 0.9);
    }

    #[test]
    fn large_sample_recovers_known_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<u8> = x.iter().map(|&v| u8::from(rng.random::<f64>() < logistic(-1.0 + 2.0 * v))).collect();
        let d = Design::with_intercept(&[("x", &x)], n).unwrap();
        let r = logistic_fit(&d, &y, "y").unwrap();
        // coarse grid search over the log-likelihood as an independent oracle
        let ll = |b0: f64, b1: f64| -> f64 {
            x.iter().zip(&y).map(|(&v, &t)| {
                let p = logistic(b0 + b1 * v);
                if t == 1 { p.ln() } else { (1.0 - p).ln() }
            }).sum()
        };
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=60 {
            for j in 0..=60 {
                let (b0, b1) = (-1.6 + 0.02 * i as f64, 1.4 + 0.02 * j as f64);
                let v = ll(b0, b1);
                if v > best.0 {
                    best = (v, b0, b1);
                }
            }
        }
        let (b0, b1) = (r.intercept().unwrap().coefficient, r.get("x").unwrap().coefficient);
        assert!((b0 + 1.0).abs() < 0.1 && (b1 - 2.0).abs() < 0.1, "{b0} {b1}");
        assert!((b0 - best.1).abs() <= 0.02 && (b1 - best.2).abs() <= 0.02);
    }

    #[test]
    fn score_equations_vanish_and_residuals_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 300;
        let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let d = Design::with_intercept(&[("x1", &x1), ("x2", &x2)], n).unwrap();
        let y: Vec<u8> = (0..n).map(|i| u8::from(rng.random::<f64>() < logistic(0.5 * x1[i] - 0.2 * x2[i]))).collect();
        let r = logistic_fit(&d, &y, "y").unwrap();
        let beta = DVector::from_iterator(3, r.coefficients.iter().map(|c| c.coefficient));
        let eta = &d.x * &beta;
        for j in 0..3 {
            let s: f64 = (0..n).map(|i| (f64::from(y[i]) - logistic(eta[i])) * d.x[(i, j)]).sum();
            assert!(s.abs() < 1e-6, "{j}: {s}");
        }
        let yc: Vec<f64> = (0..n).map(|i| 1.0 + x1[i] - 2.0 * x2[i] + rng.random_range(-1.0..1.0)).collect();
        let o = ols_fit(&d, &yc, "y").unwrap();
        let b = DVector::from_iterator(3, o.coefficients.iter().map(|c| c.coefficient));
        let res = DVector::from_vec(yc.clone()) - &d.x * b;
        for j in 0..3 {
            let dot = res.dot(&d.x.column(j));
            assert!(dot.abs() < 1e-8 * res.norm() * d.x.column(j).norm());
        }
    }
}
