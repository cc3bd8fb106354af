//! Agent forecast densities `h_tj(x)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{BpsError, Result};
use crate::linalg::{self, robust_cholesky};

/// Optional log density attached to a sample-based forecast.
pub type LogDensityFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// One agent's `q`-dimensional forecast density for a single origin and horizon.
#[derive(Clone)]
pub enum AgentForecastDensity {
    Normal {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
    /// Multivariate T: `(x - loc)` scaled by `scale^{-1/2}` is standard T with `dof` degrees of freedom.
    StudentT {
        dof: f64,
        loc: DVector<f64>,
        scale: DMatrix<f64>,
    },
    /// `I x q` matrix of simulated outcomes, one draw per row.
    Empirical {
        draws: DMatrix<f64>,
        logpdf: Option<LogDensityFn>,
    },
}

impl fmt::Debug for AgentForecastDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Normal { mean, cov } => {
                f.debug_struct("Normal").field("mean", mean).field("cov", cov).finish()
            }
            Self::StudentT { dof, loc, scale } => f
                .debug_struct("StudentT")
                .field("dof", dof)
                .field("loc", loc)
                .field("scale", scale)
                .finish(),
            Self::Empirical { draws, logpdf } => f
                .debug_struct("Empirical")
                .field("draws", &draws.shape())
                .field("logpdf", &logpdf.is_some())
                .finish(),
        }
    }
}

impl PartialEq for AgentForecastDensity {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::Normal { mean: a, cov: b }, Self::Normal { mean: c, cov: d }) => a == c && b == d,
            (
                Self::StudentT { dof: a, loc: b, scale: c },
                Self::StudentT { dof: d, loc: e, scale: f },
            ) => a == d && b == e && c == f,
            (Self::Empirical { draws: a, .. }, Self::Empirical { draws: b, .. }) => a == b,
            _ => false,
        }
    }
}

impl AgentForecastDensity {
    pub fn normal(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self::Normal { mean, cov }
    }

    pub fn student_t(dof: f64, loc: DVector<f64>, scale: DMatrix<f64>) -> Self {
        Self::StudentT { dof, loc, scale }
    }

    pub fn empirical(draws: DMatrix<f64>) -> Self {
        Self::Empirical { draws, logpdf: None }
    }

    /// Degenerate forecast putting all mass on `value`.
    pub fn point_mass(value: DVector<f64>) -> Self {
        Self::empirical(DMatrix::from_row_slice(1, value.len(), value.as_slice()))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Normal { .. } => "normal",
            Self::StudentT { .. } => "student_t",
            Self::Empirical { .. } => "empirical",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Normal { mean, .. } => mean.len(),
            Self::StudentT { loc, .. } => loc.len(),
            Self::Empirical { draws, .. } => draws.ncols(),
        }
    }

    pub fn is_empirical(&self) -> bool {
        matches!(self, Self::Empirical { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Normal { mean, cov } => {
                check_square(cov, mean.len(), "normal covariance")?;
                robust_cholesky(cov, "agent normal covariance")?;
            }
            Self::StudentT { dof, loc, scale } => {
                if !(*dof > 0.0) {
                    return Err(BpsError::InvalidInput(format!("student-t dof {dof} must be positive")));
                }
                check_square(scale, loc.len(), "student-t scale")?;
                robust_cholesky(scale, "agent student-t scale")?;
            }
            Self::Empirical { draws, .. } => {
                if draws.nrows() == 0 {
                    return Err(BpsError::InvalidInput("empirical forecast has no draws".into()));
                }
                if draws.iter().any(|v| !v.is_finite()) {
                    return Err(BpsError::InvalidInput("empirical forecast has non-finite draws".into()));
                }
            }
        }
        Ok(())
    }

    /// Draw a single `q`-vector from the density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        match self {
            Self::Normal { mean, cov } => linalg::sample_mvn(mean, cov, rng),
            Self::StudentT { dof, loc, scale } => {
                let phi = sample_gamma(0.5 * dof, 0.5 * dof, rng)?;
                linalg::sample_mvn(loc, &(scale / phi), rng)
            }
            Self::Empirical { draws, .. } => {
                if draws.nrows() == 0 {
                    return Err(BpsError::InvalidInput("empirical forecast has no draws".into()));
                }
                let i = rng.random_range(0..draws.nrows());
                Ok(draws.row(i).transpose())
            }
        }
    }

    /// Log density at `x`, or `None` for a sample-based forecast without one.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<Option<f64>> {
        match self {
            Self::Normal { mean, cov } => linalg::mvn_logpdf(x, mean, cov).map(Some),
            Self::StudentT { dof, loc, scale } => linalg::mvt_logpdf(x, *dof, loc, scale).map(Some),
            Self::Empirical { logpdf, .. } => Ok(logpdf.as_ref().map(|f| f(x))),
        }
    }

    /// Log density, falling back to a Gaussian moment fit for sample-based forecasts.
    pub fn log_density_or_gaussian(&self, x: &DVector<f64>) -> Result<f64> {
        if let Some(v) = self.log_density(x)? {
            return Ok(v);
        }
        let (mean, cov) = self.moments()?;
        linalg::mvn_logpdf(x, &mean, &cov)
    }

    /// Mean vector and covariance matrix.
    ///
    /// For a Student-T with `dof <= 2` the covariance does not exist and the
    /// scale matrix is returned in its place.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match self {
            Self::Normal { mean, cov } => Ok((mean.clone(), cov.clone())),
            Self::StudentT { dof, loc, scale } => {
                let factor = if *dof > 2.0 { dof / (dof - 2.0) } else { 1.0 };
                Ok((loc.clone(), scale * factor))
            }
            Self::Empirical { draws, .. } => {
                if draws.nrows() == 0 {
                    return Err(BpsError::InvalidInput("empirical forecast has no draws".into()));
                }
                let rows: Vec<DVector<f64>> =
                    draws.row_iter().map(|r| r.transpose()).collect();
                let (mean, mut cov) = linalg::sample_moments(&rows);
                if rows.len() > 1 {
                    cov *= rows.len() as f64 / (rows.len() as f64 - 1.0);
                }
                Ok((mean, cov))
            }
        }
    }

    /// Student-T with the given `dof` matching this density's first two moments.
    pub fn student_t_moment_fit(&self, dof: f64) -> Result<Self> {
        if !(dof > 2.0) {
            return Err(BpsError::InvalidInput(format!(
                "moment-matched student-t needs dof > 2, got {dof}"
            )));
        }
        let (mean, cov) = self.moments()?;
        Ok(Self::student_t(dof, mean, cov * ((dof - 2.0) / dof)))
    }

    /// Same density with its location shifted by `shift`.
    pub fn shifted(&self, shift: &DVector<f64>) -> Self {
        match self {
            Self::Normal { mean, cov } => Self::Normal { mean: mean + shift, cov: cov.clone() },
            Self::StudentT { dof, loc, scale } => Self::StudentT {
                dof: *dof,
                loc: loc + shift,
                scale: scale.clone(),
            },
            Self::Empirical { draws, logpdf } => {
                let mut moved = draws.clone();
                for mut row in moved.row_iter_mut() {
                    row += shift.transpose();
                }
                let logpdf = logpdf.as_ref().map(|f| {
                    let f = Arc::clone(f);
                    let shift = shift.clone();
                    Arc::new(move |x: &DVector<f64>| f(&(x - &shift))) as LogDensityFn
                });
                Self::Empirical { draws: moved, logpdf }
            }
        }
    }
}

fn check_square(m: &DMatrix<f64>, dim: usize, what: &str) -> Result<()> {
    if m.shape() != (dim, dim) {
        return Err(BpsError::Dimension(format!(
            "{what} is {}x{}, expected {dim}x{dim}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Gamma draw with the given shape and *rate*.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| BpsError::InvalidInput(format!("gamma(shape {shape}, rate {rate}): {e}")))?;
    Ok(g.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn validation_catches_bad_inputs() {
        let bad = AgentForecastDensity::student_t(0.0, DVector::zeros(1), DMatrix::identity(1, 1));
        assert!(bad.validate().is_err());
        let empty = AgentForecastDensity::empirical(DMatrix::zeros(0, 2));
        assert!(empty.validate().is_err());
        let shape = AgentForecastDensity::normal(DVector::zeros(2), DMatrix::identity(3, 3));
        assert!(matches!(shape.validate(), Err(BpsError::Dimension(_))));
    }

    #[test]
    fn student_t_draws_have_t_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = AgentForecastDensity::student_t(6.0, DVector::from_element(1, 1.0), DMatrix::identity(1, 1) * 2.0);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| d.sample(&mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02);
        // 2 * 6 / 4 = 3
        assert!((var - 3.0).abs() < 0.1);
    }

    #[test]
    fn point_mass_always_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = DVector::from_vec(vec![0.5, 1.5]);
        let d = AgentForecastDensity::point_mass(v.clone());
        for _ in 0..10 {
            assert_eq!(d.sample(&mut rng).unwrap(), v);
        }
    }

    #[test]
    fn moment_fit_round_trips_moments() {
        let d = AgentForecastDensity::normal(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
        );
        let t = d.student_t_moment_fit(8.0).unwrap();
        let (m, c) = t.moments().unwrap();
        assert!((m - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-14);
        assert!((c - DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5])).abs().max() < 1e-14);
    }

    #[test]
    fn shifted_empirical_moves_rows_and_logpdf() {
        let draws = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let base = AgentForecastDensity::Empirical {
            draws,
            logpdf: Some(Arc::new(|x: &DVector<f64>| -x.norm_squared())),
        };
        let s = DVector::from_vec(vec![0.5, 0.0]);
        let moved = base.shifted(&s);
        if let AgentForecastDensity::Empirical { draws, .. } = &moved {
            assert_eq!(draws[(1, 0)], 1.5);
        }
        let at = DVector::from_vec(vec![0.5, 0.0]);
        assert_eq!(moved.log_density(&at).unwrap(), Some(0.0));
    }
}
