//! Synthetic panels from a time-varying VAR.
//!
//! `y_t = c + Σ_l (A_l + D_{l,t}) y_{t-l} + ε_t`, `ε_t ~ N(0, Σ)`, where the
//! coefficient deviations follow `D_{l,t} = ρ D_{l,t-1} + s Z_t` with
//! independent standard normal `Z_t`. The base VAR must be stable.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::calendar::YearMonth;
use crate::error::{BpsError, Result};
use crate::linalg::{robust_cholesky, standard_normal_vector};
use crate::panel::{SeriesTransform, TimeSeriesPanel};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub names: Vec<String>,
    pub transforms: Vec<SeriesTransform>,
    pub start: YearMonth,
    pub len: usize,
    /// Discarded warm-up steps before `start`.
    pub burn_in: usize,
    pub intercept: DVector<f64>,
    /// `A_1, A_2, ...`, each `q x q`.
    pub lag_matrices: Vec<DMatrix<f64>>,
    pub noise_cov: DMatrix<f64>,
    /// Innovation sd `s` of the coefficient deviations; 0 gives a constant VAR.
    pub drift_sd: f64,
    /// Persistence `ρ` of the coefficient deviations.
    pub drift_persistence: f64,
}

impl SynthSpec {
    /// Univariate AR(1) with coefficient `phi` and innovation sd `sd`.
    pub fn ar1(phi: f64, sd: f64, len: usize) -> Self {
        Self {
            names: vec!["y".into()],
            transforms: vec![SeriesTransform::Level],
            start: YearMonth::new(2000, 1).expect("valid month"),
            len,
            burn_in: 200,
            intercept: DVector::zeros(1),
            lag_matrices: vec![DMatrix::from_element(1, 1, phi)],
            noise_cov: DMatrix::from_element(1, 1, sd * sd),
            drift_sd: 0.0,
            drift_persistence: 0.0,
        }
    }

    /// Six monthly macro-style series `p, w, u, c, i, r` from 1986-01 to 2015-12.
    pub fn macro_panel() -> Self {
        let q = 6;
        let mut a1 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.95, 0.9, 0.97, 0.85, 0.3, 0.98]));
        for r in 0..q {
            for c in 0..q {
                if r != c {
                    a1[(r, c)] = 0.01 * (((r * 7 + c * 3) % 5) as f64 - 2.0);
                }
            }
        }
        let mut a2 = DMatrix::zeros(q, q);
        a2[(4, 4)] = 0.2;
        a2[(0, 0)] = 0.02;
        let sd = DVector::from_vec(vec![0.15, 0.2, 0.1, 0.3, 0.8, 0.12]);
        let mut noise = DMatrix::from_fn(q, q, |r, c| 0.2 * sd[r] * sd[c]);
        noise.set_diagonal(&sd.component_mul(&sd));
        Self {
            names: ["p", "w", "u", "c", "i", "r"].map(String::from).to_vec(),
            transforms: vec![
                SeriesTransform::AnnualChange,
                SeriesTransform::AnnualChange,
                SeriesTransform::AnnualChange,
                SeriesTransform::AnnualChange,
                SeriesTransform::MonthlyChange,
                SeriesTransform::Level,
            ],
            start: YearMonth::new(1986, 1).expect("valid month"),
            len: 360,
            burn_in: 200,
            intercept: DVector::from_vec(vec![0.1, 0.25, 0.15, 0.35, 0.2, 0.05]),
            lag_matrices: vec![a1, a2],
            noise_cov: noise,
            drift_sd: 0.002,
            drift_persistence: 0.98,
        }
    }

    pub fn num_series(&self) -> usize {
        self.names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.num_series();
        if q == 0 || self.transforms.len() != q || self.intercept.len() != q {
            return Err(BpsError::Config("synthetic spec: names, transforms and intercept disagree".into()));
        }
        if self.lag_matrices.is_empty() || self.lag_matrices.iter().any(|a| a.shape() != (q, q)) {
            return Err(BpsError::Config(format!("synthetic spec: lag matrices must be {q}x{q}")));
        }
        if self.noise_cov.shape() != (q, q) {
            return Err(BpsError::Config("synthetic spec: noise covariance has the wrong shape".into()));
        }
        if self.len == 0 || self.drift_sd < 0.0 || !(0.0..1.0).contains(&self.drift_persistence) {
            return Err(BpsError::Config("synthetic spec: bad length or drift settings".into()));
        }
        let radius = spectral_radius(&self.lag_matrices);
        if !(radius < 1.0) {
            return Err(BpsError::Config(format!(
                "synthetic VAR is not stable: spectral radius of the companion matrix is {radius:.6}"
            )));
        }
        Ok(())
    }
}

/// Spectral radius of the VAR companion matrix.
pub fn spectral_radius(lags: &[DMatrix<f64>]) -> f64 {
    let q = lags[0].nrows();
    let p = lags.len();
    let mut comp = DMatrix::zeros(q * p, q * p);
    for (l, a) in lags.iter().enumerate() {
        comp.view_mut((0, l * q), (q, q)).copy_from(a);
    }
    for i in q..q * p {
        comp[(i, i - q)] = 1.0;
    }
    comp.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Simulate a panel. Paths that leave a generous bound are reported with the
/// largest spectral radius reached by the drifting coefficients.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<TimeSeriesPanel> {
    spec.validate()?;
    let q = spec.num_series();
    let p = spec.lag_matrices.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chol = if spec.noise_cov.iter().all(|v| *v == 0.0) {
        None
    } else {
        Some(robust_cholesky(&spec.noise_cov, "synthetic noise covariance")?.l())
    };
    let total = spec.burn_in + spec.len;
    let mut y = DMatrix::zeros(total + p, q);
    let mut drift = vec![DMatrix::zeros(q, q); p];
    let mut worst: f64 = 0.0;
    for t in p..total + p {
        let mut coefs = Vec::with_capacity(p);
        for (l, a) in spec.lag_matrices.iter().enumerate() {
            if spec.drift_sd > 0.0 {
                let z = DMatrix::from_fn(q, q, |_, _| rng.sample::<f64, _>(StandardNormal));
                drift[l] = &drift[l] * spec.drift_persistence + z * spec.drift_sd;
            }
            coefs.push(a + &drift[l]);
        }
        if spec.drift_sd > 0.0 {
            worst = worst.max(spectral_radius(&coefs));
        }
        let mut next = spec.intercept.clone();
        for (l, a) in coefs.iter().enumerate() {
            next += a * y.row(t - l - 1).transpose();
        }
        if let Some(l) = &chol {
            next += l * standard_normal_vector(q, &mut rng);
        }
        if next.iter().any(|v| !v.is_finite() || v.abs() > 1e8) {
            return Err(BpsError::Data(format!(
                "synthetic path exploded at step {t}; drifting companion spectral radius reached {worst:.6}"
            )));
        }
        y.set_row(t, &next.transpose());
    }
    let values = y.rows(p + spec.burn_in, spec.len).into_owned();
    let dates = (0..spec.len).map(|i| spec.start.add_months(i as i64)).collect();
    TimeSeriesPanel::new(dates, values, spec.names.clone(), spec.transforms.clone())
}
