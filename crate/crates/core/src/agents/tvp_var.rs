//! Time-varying parameter VAR agents.
//!
//! Each agent is an exchangeable time-series DLM: `y_t' = x_t' Θ_t + ν_t'`
//! with regressors `x_t = (1, y_{t-l} for l in lags)`, matrix-normal
//! coefficients `Θ_t | Σ_t ~ N(M_t, C_t, Σ_t)` evolving by a discount random
//! walk, and `Σ_t` following a discount inverse-Wishart (matrix-beta) walk.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::lags::LagSpec;
use super::target::{build_forecast_target, TargetRole};
use crate::density::AgentForecastDensity;
use crate::dlm::DiscountConfig;
use crate::error::{BpsError, Result};
use crate::linalg::{robust_cholesky, spd_inverse, standard_normal_vector, symmetrize};
use crate::volatility::{sample_wishart, sample_wishart_increment};

/// Initial prior for an agent: `M_0 = 0`, `C_0 = coef_variance * I`,
/// `Σ_0 ~ IW(n0, d0 * I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvpVarPrior {
    pub coef_variance: f64,
    pub n0: f64,
    pub d0: f64,
}

impl Default for TvpVarPrior {
    fn default() -> Self {
        Self { coef_variance: 1.0, n0: 7.0, d0: 0.07 }
    }
}

/// One agent model.
#[derive(Debug, Clone, PartialEq)]
pub struct TvpVarSpec {
    pub name: String,
    pub lags: LagSpec,
    pub discounts: DiscountConfig,
    pub prior: TvpVarPrior,
}

impl TvpVarSpec {
    pub fn new(name: impl Into<String>, lags: LagSpec) -> Self {
        Self {
            name: name.into(),
            lags,
            discounts: DiscountConfig::default(),
            prior: TvpVarPrior::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.discounts.validate()?;
        let p = &self.prior;
        if !(p.coef_variance > 0.0 && p.n0 > 0.0 && p.d0 > 0.0) {
            return Err(BpsError::Config(format!(
                "agent '{}': prior variances and dof must be positive",
                self.name
            )));
        }
        Ok(())
    }
}

/// Filtered state after observing row `t` of the panel.
#[derive(Debug, Clone, PartialEq)]
pub struct TvpVarState {
    pub t: usize,
    /// `p x q` coefficient mean, `p = 1 + q * |lags|`.
    pub m: DMatrix<f64>,
    /// `p x p` row covariance.
    pub c: DMatrix<f64>,
    /// Volatility dof in the `h = n + q - 1` parameterization.
    pub h: f64,
    pub d: DMatrix<f64>,
    pub lags: LagSpec,
    pub discounts: DiscountConfig,
}

impl TvpVarState {
    pub fn num_series(&self) -> usize {
        self.d.nrows()
    }

    pub fn n(&self) -> f64 {
        self.h - self.num_series() as f64 + 1.0
    }

    /// Point estimate `D / n` of the residual covariance.
    pub fn volatility_estimate(&self) -> DMatrix<f64> {
        &self.d / self.n()
    }

    /// Marginal posterior scale of each coefficient, `sqrt(C_ii S_rr)`.
    pub fn coefficient_scale(&self) -> DMatrix<f64> {
        let s = self.volatility_estimate();
        DMatrix::from_fn(self.m.nrows(), self.m.ncols(), |i, r| (self.c[(i, i)] * s[(r, r)]).sqrt())
    }

    /// Degrees of freedom of the one-step predictive.
    pub fn predictive_dof(&self) -> f64 {
        self.discounts.beta * self.h - self.num_series() as f64 + 1.0
    }
}

/// Regressor `(1, y_{t-l}...)` for predicting row `t` of `values`.
pub fn regressor(values: &DMatrix<f64>, t: usize, lags: &LagSpec) -> Result<DVector<f64>> {
    let q = values.ncols();
    if t < lags.max_lag() || t > values.nrows() {
        return Err(BpsError::InvalidInput(format!(
            "regressor for row {t} needs {} earlier rows",
            lags.max_lag()
        )));
    }
    let mut x = DVector::zeros(1 + q * lags.len());
    x[0] = 1.0;
    for (i, &l) in lags.lags().iter().enumerate() {
        for r in 0..q {
            x[1 + i * q + r] = values[(t - l, r)];
        }
    }
    Ok(x)
}

/// Forward filter over every row that has a full lag window.
///
/// Entry `i` of the result is the state after row `max_lag + i`, so the
/// output has `T - max_lag` entries. There is no backward pass.
pub fn fit_tvpvar_filter(values: &DMatrix<f64>, spec: &TvpVarSpec) -> Result<Vec<TvpVarState>> {
    spec.validate()?;
    let (big_t, q) = values.shape();
    let max_lag = spec.lags.max_lag();
    if big_t <= max_lag {
        return Err(BpsError::Data(format!(
            "agent '{}' needs more than {max_lag} observations, got {big_t}",
            spec.name
        )));
    }
    let p = 1 + q * spec.lags.len();
    let prior = &spec.prior;
    let mut state = TvpVarState {
        t: max_lag,
        m: DMatrix::zeros(p, q),
        c: DMatrix::identity(p, p) * prior.coef_variance,
        h: prior.n0 + q as f64 - 1.0,
        d: DMatrix::identity(q, q) * prior.d0,
        lags: spec.lags.clone(),
        discounts: spec.discounts,
    };
    let mut out = Vec::with_capacity(big_t - max_lag);
    for t in max_lag..big_t {
        let x = regressor(values, t, &spec.lags)?;
        let y = values.row(t).transpose();
        state = filter_step(&state, &x, &y, t)?;
        out.push(state.clone());
    }
    Ok(out)
}

fn filter_step(prev: &TvpVarState, x: &DVector<f64>, y: &DVector<f64>, t: usize) -> Result<TvpVarState> {
    let DiscountConfig { delta, beta } = prev.discounts;
    let r = &prev.c / delta;
    let rx = &r * x;
    let qs = x.dot(&rx) + 1.0;
    let e = y - prev.m.transpose() * x;
    let a = rx / qs;
    let m = &prev.m + &a * e.transpose();
    let mut c = r - &a * a.transpose() * qs;
    symmetrize(&mut c);
    let mut d = &prev.d * beta + &e * e.transpose() / qs;
    symmetrize(&mut d);
    let h = beta * prev.h + 1.0;
    if h - prev.num_series() as f64 + 1.0 <= 0.0 {
        return Err(BpsError::InvalidInput(format!("agent volatility dof fell to {h} at row {t}")));
    }
    Ok(TvpVarState { t, m, c, h, d, lags: prev.lags.clone(), discounts: prev.discounts })
}

/// How k-step agent forecasts reach the synthesizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DensityMode {
    /// Raw simulated draws.
    #[default]
    Empirical,
    /// Student-T matched to the draws' moments, with the one-step dof.
    StudentTFit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastOptions {
    pub n_draws: usize,
    pub mode: DensityMode,
    pub max_horizon: usize,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        Self { n_draws: 5000, mode: DensityMode::Empirical, max_horizon: 60 }
    }
}

/// Forecast density of the `k`-step target from `state`.
///
/// `values` must contain rows `0..=state.t`; later rows are never read.
/// `k = 1` gives the exact multivariate T predictive. Larger `k` simulates
/// coefficient, volatility and outcome paths and applies the target roles.
pub fn agent_forecast<R: Rng + ?Sized>(
    state: &TvpVarState,
    values: &DMatrix<f64>,
    k: usize,
    roles: &[TargetRole],
    opts: &ForecastOptions,
    rng: &mut R,
) -> Result<AgentForecastDensity> {
    let q = state.num_series();
    if k == 0 || k > opts.max_horizon {
        return Err(BpsError::InvalidInput(format!(
            "horizon {k} outside 1..={}",
            opts.max_horizon
        )));
    }
    if values.nrows() <= state.t || values.ncols() != q || roles.len() != q {
        return Err(BpsError::Dimension(format!(
            "forecast at row {} needs a {}-series history through that row",
            state.t, q
        )));
    }
    let dof = state.predictive_dof();
    if !(dof > 0.0) {
        return Err(BpsError::InvalidInput(format!("predictive dof {dof} is not positive")));
    }
    let history = values.rows(0, state.t + 1).into_owned();
    if k == 1 {
        let DiscountConfig { delta, beta } = state.discounts;
        let x = regressor(&history, state.t + 1, &state.lags)?;
        let qs = x.dot(&(&state.c * &x)) / delta + 1.0;
        let loc = state.m.transpose() * x;
        let mut scale = &state.d * (qs * beta / dof);
        symmetrize(&mut scale);
        return Ok(AgentForecastDensity::student_t(dof, loc, scale));
    }
    if opts.n_draws == 0 {
        return Err(BpsError::InvalidInput("n_draws must be positive".into()));
    }
    let sim = PathSimulator::new(state, &history)?;
    let origin = history.row(state.t).transpose();
    let mut draws = DMatrix::zeros(opts.n_draws, q);
    for i in 0..opts.n_draws {
        let path = sim.simulate(k, rng)?;
        let target = build_forecast_target(&origin, &path, k, roles)?;
        draws.set_row(i, &target.transpose());
    }
    let density = AgentForecastDensity::empirical(draws);
    match opts.mode {
        DensityMode::Empirical => Ok(density),
        DensityMode::StudentTFit => density.student_t_moment_fit(dof),
    }
}

struct PathSimulator<'a> {
    state: &'a TvpVarState,
    history: &'a DMatrix<f64>,
    chol_c: DMatrix<f64>,
    first_precision_scale: DMatrix<f64>,
}

impl<'a> PathSimulator<'a> {
    fn new(state: &'a TvpVarState, history: &'a DMatrix<f64>) -> Result<Self> {
        let chol_c = robust_cholesky(&state.c, "agent coefficient covariance")?.l();
        let first_precision_scale =
            spd_inverse(&(&state.d * state.discounts.beta), "agent volatility scale")?;
        Ok(Self { state, history, chol_c, first_precision_scale })
    }

    /// One `k x q` outcome path after the origin.
    fn simulate<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let s = self.state;
        let DiscountConfig { delta, beta } = s.discounts;
        let (p, q) = s.m.shape();
        let max_lag = s.lags.max_lag();
        let mut ext = DMatrix::zeros(max_lag + k, q);
        let start = s.t + 1 - max_lag;
        ext.rows_mut(0, max_lag).copy_from(&self.history.rows(start, max_lag));

        let mut h = beta * s.h;
        let mut precision = sample_wishart(h, &self.first_precision_scale, rng)?;
        let mut theta = s.m.clone();
        let mut coef_factor = (1.0 / delta).sqrt();
        for j in 0..k {
            if j > 0 {
                precision = evolve_precision(&precision, h, beta, rng)?;
                h *= beta;
                coef_factor = ((1.0 - delta) / delta.powi(j as i32 + 1)).sqrt();
            }
            let sigma = spd_inverse(&precision, "simulated agent volatility")?;
            let chol_sigma = robust_cholesky(&sigma, "simulated agent volatility")?.l();
            if coef_factor > 0.0 {
                let z = DMatrix::from_fn(p, q, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
                theta += (&self.chol_c * z * chol_sigma.transpose()) * coef_factor;
            }
            let x = regressor(&ext, max_lag + j, &s.lags)?;
            let y = theta.transpose() * x + &chol_sigma * standard_normal_vector(q, rng);
            ext.set_row(max_lag + j, &y.transpose());
        }
        Ok(ext.rows(max_lag, k).into_owned())
    }
}

/// Matrix-beta step `Φ' = L Γ L' / β` with `Γ ~ Beta(βh/2, (1-β)h/2)`.
fn evolve_precision<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    h: f64,
    beta: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if beta >= 1.0 {
        return Ok(precision.clone());
    }
    let q = precision.nrows();
    let eye = DMatrix::identity(q, q);
    let a = sample_wishart_increment(beta * h, &eye, rng)?;
    let b = sample_wishart_increment((1.0 - beta) * h, &eye, rng)?;
    let chol_sum = robust_cholesky(&(&a + b), "matrix-beta normalizer")?;
    let l_inv = chol_sum
        .l()
        .try_inverse()
        .ok_or_else(|| BpsError::NotPositiveDefinite("matrix-beta normalizer".into()))?;
    let gamma = &l_inv * a * l_inv.transpose();
    let l = robust_cholesky(precision, "agent precision")?.l();
    let mut next = &l * gamma * l.transpose() / beta;
    symmetrize(&mut next);
    Ok(next)
}
