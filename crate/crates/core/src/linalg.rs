//! Dense linear-algebra helpers shared by the samplers.
//!
//! Every covariance that comes out of a discount recursion is PD in exact
//! arithmetic, so factorisations go through [`robust_cholesky`], which
//! symmetrises and then walks a small jitter ladder before giving up.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{BpsError, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_STOP: f64 = 1e-6;

/// Replace `m` by `(m + mᵀ) / 2` in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Cholesky factor of a symmetric matrix under the jitter policy.
///
/// The matrix is symmetrised first. If the plain factorisation fails, a
/// diagonal jitter of `1e-10 * trace / dim` is added and escalated by a factor
/// of ten up to `1e-6 * trace / dim`.
pub fn robust_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(BpsError::Dimension(format!(
            "{what}: expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(BpsError::NotPositiveDefinite(format!("{what}: non-finite entries")));
    }
    let sym = symmetrized(m);
    if let Some(chol) = sym.clone().cholesky() {
        return Ok(chol);
    }
    let dim = sym.nrows().max(1) as f64;
    let base = sym.trace() / dim;
    if base > 0.0 {
        let mut level = JITTER_START;
        while level <= JITTER_STOP * (1.0 + 1e-9) {
            let mut jittered = sym.clone();
            for i in 0..jittered.nrows() {
                jittered[(i, i)] += level * base;
            }
            if let Some(chol) = jittered.cholesky() {
                log::debug!("{what}: cholesky needed jitter {level:e} x trace/dim");
                return Ok(chol);
            }
            level *= 10.0;
        }
    }
    Err(BpsError::NotPositiveDefinite(format!(
        "{what}: cholesky failed after jitter up to {JITTER_STOP:e} x trace/dim"
    )))
}

/// Inverse of a symmetric PD matrix via its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = robust_cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrized(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| *v == 0.0)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// One draw from `N(mean, cov)`. An all-zero covariance returns `mean` exactly.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
        return Err(BpsError::Dimension(format!(
            "normal draw: mean has length {}, covariance is {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    if is_zero(cov) {
        return Ok(mean.clone());
    }
    let chol = robust_cholesky(cov, "normal draw covariance")?;
    let z = standard_normal_vector(mean.len(), rng);
    Ok(mean + chol.l() * z)
}

/// Gaussian log density, `cov` given by its Cholesky factor.
pub fn mvn_logpdf_chol(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&diff)
        .expect("cholesky factor has a positive diagonal");
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (d * (2.0 * PI).ln() + log_det + z.norm_squared())
}

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() {
        return Err(BpsError::Dimension("normal log density: inconsistent shapes".into()));
    }
    let chol = robust_cholesky(cov, "normal log density covariance")?;
    Ok(mvn_logpdf_chol(x, mean, &chol))
}

/// Log density of the multivariate Student-T with `dof` degrees of freedom,
/// location `loc` and scale matrix `scale`.
pub fn mvt_logpdf(x: &DVector<f64>, dof: f64, loc: &DVector<f64>, scale: &DMatrix<f64>) -> Result<f64> {
    if x.len() != loc.len() || scale.nrows() != x.len() {
        return Err(BpsError::Dimension("student-t log density: inconsistent shapes".into()));
    }
    let chol = robust_cholesky(scale, "student-t scale")?;
    let d = x.len() as f64;
    let diff = x - loc;
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&diff)
        .expect("cholesky factor has a positive diagonal");
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    Ok(ln_gamma(0.5 * (dof + d)) - ln_gamma(0.5 * dof)
        - 0.5 * d * (dof * PI).ln()
        - 0.5 * log_det
        - 0.5 * (dof + d) * (1.0 + z.norm_squared() / dof).ln())
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Numerically stable `ln Σ exp(v_i)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Sample mean vector and (1/n) covariance of the columns-as-draws layout.
pub fn sample_moments(draws: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = draws.len();
    let d = draws.first().map_or(0, |v| v.len());
    let mut mean = DVector::zeros(d);
    for x in draws {
        mean += x;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in draws {
        let diff = x - &mean;
        cov += &diff * diff.transpose();
    }
    cov /= n as f64;
    (mean, cov)
}
