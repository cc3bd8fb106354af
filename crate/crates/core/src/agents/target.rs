//! Horizon-specific forecast targets.
//!
//! Forecast draws and realized outcomes go through the same transform so the
//! synthesizer compares like with like.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{BpsError, Result};
use crate::panel::SeriesTransform;

/// How a series' `k`-step target is formed from its path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetRole {
    /// Value at the target date.
    #[default]
    Level,
    /// Value at the target date minus the value at the origin.
    ChangeFromOrigin,
    /// Sum of the `k` values after the origin.
    Cumulative,
}

impl From<SeriesTransform> for TargetRole {
    fn from(t: SeriesTransform) -> Self {
        match t {
            SeriesTransform::AnnualChange => Self::Level,
            SeriesTransform::MonthlyChange => Self::Cumulative,
            SeriesTransform::Level => Self::Level,
        }
    }
}

impl TargetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Level => "level",
            Self::ChangeFromOrigin => "change",
            Self::Cumulative => "cumulative",
        }
    }
}

impl fmt::Display for TargetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetRole {
    type Err = BpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "level" => Ok(Self::Level),
            "change" => Ok(Self::ChangeFromOrigin),
            "cumulative" => Ok(Self::Cumulative),
            other => Err(BpsError::Config(format!("unknown target role '{other}'"))),
        }
    }
}

/// Scalar target from the origin value and the `k` values after it.
/// At `k = 1` every role is the identity on the next value.
pub fn target_value(origin: f64, path: &[f64], k: usize, role: TargetRole) -> Result<f64> {
    if k == 0 || path.len() != k {
        return Err(BpsError::Dimension(format!(
            "target path has {} values for horizon {k}",
            path.len()
        )));
    }
    if k == 1 {
        return Ok(path[0]);
    }
    Ok(match role {
        TargetRole::Level => path[k - 1],
        TargetRole::ChangeFromOrigin => path[k - 1] - origin,
        TargetRole::Cumulative => path.iter().sum(),
    })
}

/// Target vector from an origin row and the `k x q` future path.
pub fn build_forecast_target(
    origin: &DVector<f64>,
    future: &DMatrix<f64>,
    k: usize,
    roles: &[TargetRole],
) -> Result<DVector<f64>> {
    let q = origin.len();
    if future.ncols() != q || roles.len() != q {
        return Err(BpsError::Dimension(format!(
            "origin has {q} series, future path {} columns, {} roles",
            future.ncols(),
            roles.len()
        )));
    }
    let mut out = DVector::zeros(q);
    for r in 0..q {
        let path: Vec<f64> = future.column(r).iter().copied().collect();
        out[r] = target_value(origin[r], &path, k, roles[r])?;
    }
    Ok(out)
}

/// Realized target for the origin at row `origin_row`, if the panel reaches it.
pub fn realized_target(
    values: &DMatrix<f64>,
    origin_row: usize,
    k: usize,
    roles: &[TargetRole],
) -> Result<Option<DVector<f64>>> {
    if origin_row + k >= values.nrows() {
        return Ok(None);
    }
    let origin = values.row(origin_row).transpose();
    let future = values.rows(origin_row + 1, k).into_owned();
    build_forecast_target(&origin, &future, k, roles).map(Some)
}
