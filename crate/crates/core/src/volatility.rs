//! Discount inverse-Wishart stochastic volatility for the residual covariance.
//!
//! `V_t ~ IW(n_t, D_t)` on-line, equivalently `V_t^{-1} ~ W(h_t, D_t^{-1})` with
//! `h_t = n_t + q - 1`. The precision evolves by `V_t^{-1} = β V_{t+1}^{-1} + Υ_t`
//! when sampled backwards.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::dlm::check_discount;
use crate::error::{BpsError, Result};
use crate::linalg::{robust_cholesky, spd_inverse, symmetrize};

/// Forward-filter summary of the volatility at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct VolFilterStats {
    /// Wishart degrees of freedom of the precision.
    pub h: f64,
    /// Inverse-Wishart degrees of freedom, `h - q + 1`.
    pub n: f64,
    /// Sum-of-squares matrix.
    pub d: DMatrix<f64>,
}

impl VolFilterStats {
    /// Initial summary for `V_0 ~ IW(n_0, D_0)`.
    pub fn from_prior(n0: f64, d0: DMatrix<f64>) -> Result<Self> {
        if !d0.is_square() {
            return Err(BpsError::Dimension("D_0 must be square".into()));
        }
        if !(n0 > 0.0) {
            return Err(BpsError::InvalidInput(format!("prior dof n_0 = {n0} must be positive")));
        }
        robust_cholesky(&d0, "prior sum-of-squares D_0")?;
        let q = d0.nrows() as f64;
        Ok(Self { h: n0 + q - 1.0, n: n0, d: d0 })
    }

    pub fn dim(&self) -> usize {
        self.d.nrows()
    }

    /// Harmonic-mean point estimate `D / h` of the volatility.
    pub fn harmonic_mean(&self) -> DMatrix<f64> {
        &self.d / self.h
    }
}

/// One step of the discount volatility filter given the residual `e_t`.
pub fn volatility_filter_step(
    prev: &VolFilterStats,
    residual: &DVector<f64>,
    beta: f64,
) -> Result<VolFilterStats> {
    check_discount("beta", beta)?;
    let q = prev.dim();
    if residual.len() != q {
        return Err(BpsError::Dimension(format!(
            "residual has length {}, volatility is {q}x{q}",
            residual.len()
        )));
    }
    let h = beta * prev.h + 1.0;
    let n = h - q as f64 + 1.0;
    if !(n > 0.0) {
        return Err(BpsError::InvalidInput(format!(
            "volatility dof n = {n} is not positive; prior dof is mis-specified"
        )));
    }
    let mut d = &prev.d * beta + residual * residual.transpose();
    symmetrize(&mut d);
    Ok(VolFilterStats { h, n, d })
}

/// Filter over a residual sequence. The output starts with `prior` (t = 0).
pub fn volatility_filter(
    prior: &VolFilterStats,
    residuals: &[DVector<f64>],
    beta: f64,
) -> Result<Vec<VolFilterStats>> {
    let mut out = Vec::with_capacity(residuals.len() + 1);
    out.push(prior.clone());
    for e in residuals {
        let next = volatility_filter_step(out.last().expect("non-empty"), e, beta)?;
        out.push(next);
    }
    Ok(out)
}

/// Backward sampling of `V_{0:T}` given the filter output for `t = 0..T`.
pub fn backward_sample_volatility<R: Rng + ?Sized>(
    stats: &[VolFilterStats],
    beta: f64,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    check_discount("beta", beta)?;
    let last = stats
        .last()
        .ok_or_else(|| BpsError::InvalidInput("no volatility filter output".into()))?;
    let mut precisions = vec![DMatrix::zeros(0, 0); stats.len()];
    let d_inv = spd_inverse(&last.d, "volatility sum-of-squares D_T")?;
    precisions[stats.len() - 1] = sample_wishart(last.h, &d_inv, rng)?;
    for t in (0..stats.len() - 1).rev() {
        let s = &stats[t];
        let mut prec = &precisions[t + 1] * beta;
        let dof = (1.0 - beta) * s.h;
        if dof > 0.0 {
            let scale = spd_inverse(&s.d, "volatility sum-of-squares D_t")?;
            prec += sample_wishart_increment(dof, &scale, rng)?;
        }
        symmetrize(&mut prec);
        precisions[t] = prec;
    }
    precisions
        .iter()
        .map(|p| spd_inverse(p, "sampled volatility precision"))
        .collect()
}

/// Draw `V ~ IW(n, D)`, i.e. `V^{-1} ~ W(n + q - 1, D^{-1})`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    n: f64,
    d: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let q = d.nrows() as f64;
    let scale = spd_inverse(d, "inverse-Wishart sum-of-squares")?;
    let precision = sample_wishart(n + q - 1.0, &scale, rng)?;
    spd_inverse(&precision, "sampled inverse-Wishart precision")
}

/// One Wishart(dof, scale) draw by the Bartlett decomposition.
///
/// Diagonal squares are gamma distributed, so any real `dof > q - 1` works.
pub fn sample_wishart<R: Rng + ?Sized>(
    dof: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let q = scale.nrows();
    if !(dof > q as f64 - 1.0) {
        return Err(BpsError::InvalidInput(format!(
            "Wishart dof {dof} must exceed dimension - 1 = {}",
            q as f64 - 1.0
        )));
    }
    let l = robust_cholesky(scale, "Wishart scale")?.l();
    let mut a = DMatrix::zeros(q, q);
    for i in 0..q {
        let shape = 0.5 * (dof - i as f64);
        let gamma = Gamma::new(shape, 2.0)
            .map_err(|e| BpsError::InvalidInput(format!("Bartlett gamma: {e}")))?;
        a[(i, i)] = gamma.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let mut w = &la * la.transpose();
    symmetrize(&mut w);
    Ok(w)
}

/// Wishart-type increment for the backward volatility recursion.
///
/// `(1 - β) h_t` is usually below `q - 1` once `h_t` settles near
/// `1 / (1 - β)`, where no Wishart density exists. For `dof > q - 1` this is
/// [`sample_wishart`]. Otherwise the draw is the singular Wishart
/// `Σ_{i<k} z_i z_i'` with `k = floor(dof)` plus `(dof - k) z z'`, all
/// `z ~ N(0, scale)`: exact for integer `dof`, mean `dof * scale` always.
pub fn sample_wishart_increment<R: Rng + ?Sized>(
    dof: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let q = scale.nrows();
    if dof <= 0.0 {
        return Ok(DMatrix::zeros(q, q));
    }
    if dof > q as f64 - 1.0 {
        return sample_wishart(dof, scale, rng);
    }
    let l = robust_cholesky(scale, "Wishart scale")?.l();
    let whole = dof.floor() as usize;
    let frac = dof - whole as f64;
    let mut w = DMatrix::zeros(q, q);
    for i in 0..=whole {
        let weight = if i < whole { 1.0 } else { frac };
        if weight == 0.0 {
            continue;
        }
        let z = &l * crate::linalg::standard_normal_vector(q, rng);
        w += (&z * z.transpose()) * weight;
    }
    symmetrize(&mut w);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_filter_step_by_hand() {
        let prior = VolFilterStats::from_prior(2.0, DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(prior.h, 2.0);
        let next = volatility_filter_step(&prior, &DVector::from_element(1, 2.0), 0.5).unwrap();
        assert_eq!(next.h, 2.0);
        assert_eq!(next.n, 2.0);
        assert_eq!(next.d[(0, 0)], 4.5);
    }

    #[test]
    fn zero_residual_discounts_d() {
        let d0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let prior = VolFilterStats::from_prior(7.0, d0.clone()).unwrap();
        let next = volatility_filter_step(&prior, &DVector::zeros(2), 0.9).unwrap();
        assert_eq!(next.d, &d0 * 0.9);
    }

    #[test]
    fn unit_discount_accumulates_dof() {
        let prior = VolFilterStats::from_prior(3.0, DMatrix::identity(2, 2)).unwrap();
        let residuals = vec![DVector::from_vec(vec![0.1, -0.2]); 25];
        let stats = volatility_filter(&prior, &residuals, 1.0).unwrap();
        assert_eq!(stats.last().unwrap().h, prior.h + 25.0);
    }

    #[test]
    fn dof_recursion_converges_to_fixed_point() {
        let beta: f64 = 0.95;
        let mut prev = VolFilterStats::from_prior(7.0, DMatrix::identity(1, 1) * 0.07).unwrap();
        let limit = 1.0 / (1.0 - beta);
        let mut gap = (prev.h - limit).abs();
        for _ in 0..2000 {
            let next = volatility_filter_step(&prev, &DVector::from_element(1, 0.1), beta).unwrap();
            assert_eq!((next.h - (beta * prev.h + 1.0)).abs(), 0.0);
            let new_gap = (next.h - limit).abs();
            assert!(new_gap <= gap);
            gap = new_gap;
            prev = next;
        }
        assert!(gap < 1e-9);
    }

    #[test]
    fn non_positive_dof_is_rejected() {
        // q = 3 with a tiny prior dof and heavy discounting drives n below zero.
        let mut prev = VolFilterStats { h: 0.5, n: -1.5, d: DMatrix::identity(3, 3) };
        prev.n = prev.h - 2.0;
        assert!(volatility_filter_step(&prev, &DVector::zeros(3), 0.5).is_err());
    }

    #[test]
    fn unit_discount_path_is_constant() {
        let prior = VolFilterStats::from_prior(5.0, DMatrix::identity(2, 2)).unwrap();
        let residuals = vec![DVector::from_vec(vec![0.3, 0.1]); 6];
        let stats = volatility_filter(&prior, &residuals, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let path = backward_sample_volatility(&stats, 1.0, &mut rng).unwrap();
        assert_eq!(path.len(), 7);
        for v in &path {
            assert!((v - &path[6]).abs().max() < 1e-12);
        }
    }

    #[test]
    fn wishart_rejects_small_dof() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_wishart(0.5, &DMatrix::identity(2, 2), &mut rng).is_err());
    }

    #[test]
    fn singular_increment_has_the_right_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scale = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.3, 0.0, 0.3, 1.5]);
        let dof = 1.4;
        let n = 40_000;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..n {
            acc += sample_wishart_increment(dof, &scale, &mut rng).unwrap();
        }
        acc /= n as f64;
        let target = &scale * dof;
        assert!((acc - &target).abs().max() < 0.05 * target.abs().max());
    }

    #[test]
    fn concentration_for_large_dof() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dof = 1e6;
        let scale = DMatrix::identity(2, 2) / dof;
        for _ in 0..20 {
            let w = sample_wishart(dof, &scale, &mut rng).unwrap();
            assert!((w - DMatrix::identity(2, 2)).abs().max() < 0.01);
        }
    }
}
