//! Three-block Gibbs sampler for the dynamic synthesis model and
//! simulation of synthetic futures from its posterior.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dlm::{self, DesignMatrix, DiscountConfig, ThetaPosterior};
use crate::error::{BpsError, Result};
use crate::linalg::{self, robust_cholesky, spd_inverse};
use crate::par::{self, Execution};
use crate::states::{self, ForecastSet, LatentAgentStates, PreparedForecastSet, TScaleFactors};
use crate::volatility::{self, VolFilterStats};

/// Prior at `t = 0` plus the two discount factors.
#[derive(Debug, Clone, PartialEq)]
pub struct BpsPrior {
    pub m0: DVector<f64>,
    pub c0: DMatrix<f64>,
    pub n0: f64,
    pub d0: DMatrix<f64>,
    pub discounts: DiscountConfig,
}

impl BpsPrior {
    /// Default prior for `J` agents and `q` series.
    ///
    /// Each series' block is centred on a zero intercept and equal agent
    /// weights `1/J`; the covariance is diagonal with unit variances except
    /// `0.001` on the intercepts. `V_0 ~ IW(7, 7 * 0.01 I)` and both discounts are 0.99.
    pub fn default_for(num_agents: usize, q: usize) -> Self {
        let block = num_agents + 1;
        let n = block * q;
        let mut m0 = DVector::zeros(n);
        let mut c0 = DMatrix::identity(n, n);
        for r in 0..q {
            c0[(r * block, r * block)] = 0.001;
            for j in 0..num_agents {
                m0[r * block + 1 + j] = 1.0 / num_agents as f64;
            }
        }
        Self {
            m0,
            c0,
            n0: 7.0,
            d0: DMatrix::identity(q, q) * (7.0 * 0.01),
            discounts: DiscountConfig::default(),
        }
    }

    pub fn num_series(&self) -> usize {
        self.d0.nrows()
    }

    pub fn num_agents(&self) -> usize {
        self.m0.len() / self.num_series().max(1) - 1
    }

    /// Set the prior variance of every intercept.
    pub fn with_intercept_variance(mut self, var: f64) -> Self {
        let block = self.num_agents() + 1;
        for r in 0..self.num_series() {
            self.c0[(r * block, r * block)] = var;
        }
        self
    }

    /// Set the prior variance of one series' intercept.
    pub fn with_series_intercept_variance(mut self, series: usize, var: f64) -> Self {
        let i = series * (self.num_agents() + 1);
        self.c0[(i, i)] = var;
        self
    }

    /// Set the prior variance of the agent coefficients of one series.
    pub fn with_series_coefficient_variance(mut self, series: usize, var: f64) -> Self {
        let block = self.num_agents() + 1;
        for j in 0..self.num_agents() {
            let i = series * block + 1 + j;
            self.c0[(i, i)] = var;
        }
        self
    }

    pub fn theta_prior(&self) -> ThetaPosterior {
        ThetaPosterior { m: self.m0.clone(), c: self.c0.clone() }
    }

    pub fn validate(&self, num_agents: usize, q: usize) -> Result<()> {
        let n = (num_agents + 1) * q;
        if self.m0.len() != n || self.c0.shape() != (n, n) || self.d0.shape() != (q, q) {
            return Err(BpsError::Dimension(format!(
                "prior dimensions do not match {num_agents} agents and {q} series"
            )));
        }
        self.discounts.validate()?;
        robust_cholesky(&self.c0, "prior C_0")?;
        VolFilterStats::from_prior(self.n0, self.d0.clone())?;
        Ok(())
    }
}

/// Block order within a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepOrder {
    /// coefficients, volatilities, agent states
    #[default]
    CoefficientsFirst,
    /// agent states, coefficients, volatilities
    StatesFirst,
}

/// How the latent agent states are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    /// Independent draws from the agent forecasts.
    #[default]
    Prior,
    /// `x_tj = y_t` for every agent.
    Observed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub n_saved: usize,
    pub thin: usize,
    pub seed: u64,
    pub order: SweepOrder,
    pub init: InitMode,
    /// Keep full `(θ, V, X)_{1:T}` paths for every `k`-th saved draw; `None` keeps terminal values only.
    pub path_stride: Option<usize>,
    pub execution: Execution,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            burn_in: 3000,
            n_saved: 5000,
            thin: 1,
            seed: 0,
            order: SweepOrder::default(),
            init: InitMode::default(),
            path_stride: Some(1),
            execution: Execution::default(),
        }
    }
}

impl McmcConfig {
    pub fn new(burn_in: usize, n_saved: usize, seed: u64) -> Self {
        Self { burn_in, n_saved, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_saved == 0 || self.thin == 0 || self.path_stride == Some(0) {
            return Err(BpsError::InvalidInput(
                "n_saved, thin and path stride must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Outcomes `y_{1:T}` paired with the agent forecasts for the same times.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisData {
    pub y: Vec<DVector<f64>>,
    pub forecasts: Vec<ForecastSet>,
}

impl SynthesisData {
    pub fn new(y: Vec<DVector<f64>>, forecasts: Vec<ForecastSet>) -> Result<Self> {
        let data = Self { y, forecasts };
        data.validate()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_series(&self) -> usize {
        self.y.first().map_or(0, DVector::len)
    }

    pub fn num_agents(&self) -> usize {
        self.forecasts.first().map_or(0, ForecastSet::num_agents)
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.is_empty() {
            return Err(BpsError::InvalidInput("synthesis needs at least one time point".into()));
        }
        if self.y.len() != self.forecasts.len() {
            return Err(BpsError::Dimension(format!(
                "{} outcomes but {} forecast sets",
                self.y.len(),
                self.forecasts.len()
            )));
        }
        let q = self.num_series();
        let j = self.num_agents();
        for (t, (y, set)) in self.y.iter().zip(&self.forecasts).enumerate() {
            if y.len() != q || set.num_agents() != j || set.dim() != q {
                return Err(BpsError::Dimension(format!("time {} has inconsistent shapes", t + 1)));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(BpsError::InvalidInput(format!("outcome at time {} is not finite", t + 1)));
            }
        }
        Ok(())
    }
}

/// Current values of every block of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    /// `θ_t` for `t = 0..T`.
    pub theta: Vec<DVector<f64>>,
    /// `V_t` for `t = 0..T`.
    pub v: Vec<DMatrix<f64>>,
    /// `X_t` for `t = 1..T` (element `t - 1`).
    pub x: Vec<LatentAgentStates>,
    /// Student-T scale factors for `t = 1..T`.
    pub phi: Vec<TScaleFactors>,
    /// Final on-line coefficient posterior `(m_T, C_T)` from the last coefficient block.
    pub theta_final: ThetaPosterior,
    /// Final volatility filter summary `(h_T, D_T)` from the last volatility block.
    pub vol_final: VolFilterStats,
}

/// Initial latent states for every time point.
pub fn initialize_states<R: Rng + ?Sized>(
    data: &SynthesisData,
    mode: InitMode,
    rng: &mut R,
) -> Result<Vec<LatentAgentStates>> {
    data.forecasts
        .iter()
        .zip(&data.y)
        .map(|(set, y)| match mode {
            InitMode::Prior => set.sample_prior(rng),
            InitMode::Observed => {
                let mut x = DMatrix::zeros(set.num_agents(), y.len());
                for j in 0..set.num_agents() {
                    x.set_row(j, &y.transpose());
                }
                Ok(x)
            }
        })
        .collect()
}

impl GibbsState {
    /// Starting state: latent states from `init`, `θ` at the prior mean and
    /// every volatility at the prior harmonic mean `D_0 / h_0`.
    pub fn initial<R: Rng + ?Sized>(
        data: &SynthesisData,
        prior: &BpsPrior,
        init: InitMode,
        rng: &mut R,
    ) -> Result<Self> {
        let x = initialize_states(data, init, rng)?;
        let vol0 = VolFilterStats::from_prior(prior.n0, prior.d0.clone())?;
        let t_len = data.len();
        Ok(Self {
            theta: vec![prior.m0.clone(); t_len + 1],
            v: vec![vol0.harmonic_mean(); t_len + 1],
            phi: vec![vec![1.0; data.num_agents()]; t_len],
            x,
            theta_final: prior.theta_prior(),
            vol_final: vol0,
        })
    }

    fn designs(&self) -> Vec<DesignMatrix> {
        self.x.iter().map(DesignMatrix::from_states).collect()
    }

    /// `Σ_t log N(y_t | F_t θ_t, V_t)`.
    pub fn log_likelihood(&self, data: &SynthesisData) -> Result<f64> {
        let mut total = 0.0;
        for (t, y) in data.y.iter().enumerate() {
            let design = DesignMatrix::from_states(&self.x[t]);
            total += linalg::mvn_logpdf(y, &design.mean(&self.theta[t + 1]), &self.v[t + 1])?;
        }
        Ok(total)
    }
}

fn coefficient_block<R: Rng + ?Sized>(
    state: &mut GibbsState,
    data: &SynthesisData,
    prior: &BpsPrior,
    rng: &mut R,
) -> Result<()> {
    let delta = prior.discounts.delta;
    let theta_prior = prior.theta_prior();
    let stats = dlm::forward_filter(&theta_prior, &state.designs(), &data.y, &state.v[1..], delta)?;
    state.theta = dlm::backward_sample_theta(&stats, &theta_prior, delta, rng)?;
    if let Some(last) = stats.last() {
        state.theta_final = last.posterior();
    }
    Ok(())
}

fn volatility_block<R: Rng + ?Sized>(
    state: &mut GibbsState,
    data: &SynthesisData,
    prior: &BpsPrior,
    rng: &mut R,
) -> Result<()> {
    let beta = prior.discounts.beta;
    let residuals: Vec<DVector<f64>> = data
        .y
        .iter()
        .enumerate()
        .map(|(t, y)| y - DesignMatrix::from_states(&state.x[t]).mean(&state.theta[t + 1]))
        .collect();
    let vol0 = VolFilterStats::from_prior(prior.n0, prior.d0.clone())?;
    let stats = volatility::volatility_filter(&vol0, &residuals, beta)?;
    state.v = volatility::backward_sample_volatility(&stats, beta, rng)?;
    state.vol_final = stats.last().expect("filter output includes the prior").clone();
    Ok(())
}

fn state_block<R: Rng + ?Sized>(
    state: &mut GibbsState,
    data: &SynthesisData,
    prepared: &[PreparedForecastSet],
    exec: Execution,
    rng: &mut R,
) -> Result<()> {
    // one stream per time point so the result does not depend on scheduling
    let base: u64 = rng.random();
    let theta = &state.theta;
    let v = &state.v;
    let mut slots: Vec<(&mut LatentAgentStates, &mut TScaleFactors)> =
        state.x.iter_mut().zip(state.phi.iter_mut()).collect();
    par::try_for_each_mut(exec, &mut slots, |t, (x, phi)| {
        let mut local = ChaCha8Rng::seed_from_u64(base);
        local.set_stream(t as u64);
        states::sample_states_prepared(&theta[t + 1], &v[t + 1], &data.y[t], &prepared[t], x, phi, &mut local)
    })
}

pub(crate) fn prepare_forecasts(data: &SynthesisData) -> Result<Vec<PreparedForecastSet>> {
    data.forecasts.iter().map(ForecastSet::prepare).collect()
}

/// One full sweep in the configured block order.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &mut GibbsState,
    data: &SynthesisData,
    prior: &BpsPrior,
    order: SweepOrder,
    exec: Execution,
    rng: &mut R,
) -> Result<()> {
    let prepared = prepare_forecasts(data)?;
    sweep_prepared(state, data, &prepared, prior, order, exec, rng)
}

fn sweep_prepared<R: Rng + ?Sized>(
    state: &mut GibbsState,
    data: &SynthesisData,
    prepared: &[PreparedForecastSet],
    prior: &BpsPrior,
    order: SweepOrder,
    exec: Execution,
    rng: &mut R,
) -> Result<()> {
    match order {
        SweepOrder::CoefficientsFirst => {
            coefficient_block(state, data, prior, rng)?;
            volatility_block(state, data, prior, rng)?;
            state_block(state, data, prepared, exec, rng)
        }
        SweepOrder::StatesFirst => {
            state_block(state, data, prepared, exec, rng)?;
            coefficient_block(state, data, prior, rng)?;
            volatility_block(state, data, prior, rng)
        }
    }
}

/// Values at the final time `T` that forecasting needs from one saved draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalDraw {
    pub theta: DVector<f64>,
    pub v: DMatrix<f64>,
    pub x: LatentAgentStates,
    /// `C_T` of the coefficient filter run in the same sweep.
    pub c: DMatrix<f64>,
    /// `h_T` of the volatility filter run in the same sweep.
    pub h: f64,
    /// `D_T` of the volatility filter run in the same sweep.
    pub d: DMatrix<f64>,
}

/// A saved draw of the full paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDraw {
    /// `θ_t`, `t = 0..T`
    pub theta: Vec<DVector<f64>>,
    /// `V_t`, `t = 0..T`
    pub v: Vec<DMatrix<f64>>,
    /// `X_t`, `t = 1..T`
    pub x: Vec<LatentAgentStates>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub terminal: Vec<TerminalDraw>,
    pub paths: Vec<PathDraw>,
    pub log_likelihood: Vec<f64>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.terminal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminal.is_empty()
    }

    /// Posterior mean of `θ_T`.
    pub fn terminal_theta_mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.terminal[0].theta.len());
        for d in &self.terminal {
            acc += &d.theta;
        }
        acc / self.terminal.len() as f64
    }

    /// Posterior correlation matrix of `vec(X_T)` (agent-major ordering).
    pub fn terminal_state_correlation(&self) -> DMatrix<f64> {
        let draws: Vec<DVector<f64>> = self
            .terminal
            .iter()
            .map(|d| DVector::from_iterator(d.x.len(), d.x.transpose().iter().copied()))
            .collect();
        correlation(&draws)
    }
}

/// Correlation matrix of a set of draws; zero-variance coordinates get a unit diagonal and zero off-diagonals.
pub fn correlation(draws: &[DVector<f64>]) -> DMatrix<f64> {
    let (_, cov) = linalg::sample_moments(draws);
    let n = cov.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let denom = (cov[(i, i)] * cov[(j, j)]).sqrt();
        if i == j {
            1.0
        } else if denom > 0.0 {
            (cov[(i, j)] / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    })
}

/// MCMC with the generator seeded from `cfg.seed`.
pub fn run_mcmc(data: &SynthesisData, prior: &BpsPrior, cfg: &McmcConfig) -> Result<PosteriorDraws> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_mcmc_with_rng(data, prior, cfg, &mut rng)
}

/// MCMC driven by a caller-supplied generator (`cfg.seed` is ignored).
pub fn run_mcmc_with_rng<R: Rng + ?Sized>(
    data: &SynthesisData,
    prior: &BpsPrior,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<PosteriorDraws> {
    cfg.validate()?;
    data.validate()?;
    prior.validate(data.num_agents(), data.num_series())?;
    let prepared = prepare_forecasts(data)?;
    let mut state = GibbsState::initial(data, prior, cfg.init, rng)?;
    for _ in 0..cfg.burn_in {
        sweep_prepared(&mut state, data, &prepared, prior, cfg.order, cfg.execution, rng)?;
    }
    let mut out = PosteriorDraws {
        terminal: Vec::with_capacity(cfg.n_saved),
        paths: Vec::new(),
        log_likelihood: Vec::with_capacity(cfg.n_saved),
    };
    let t_len = data.len();
    for saved in 0..cfg.n_saved {
        for _ in 0..cfg.thin {
            sweep_prepared(&mut state, data, &prepared, prior, cfg.order, cfg.execution, rng)?;
        }
        out.terminal.push(TerminalDraw {
            theta: state.theta[t_len].clone(),
            v: state.v[t_len].clone(),
            x: state.x[t_len - 1].clone(),
            c: state.theta_final.c.clone(),
            h: state.vol_final.h,
            d: state.vol_final.d.clone(),
        });
        if cfg.path_stride.is_some_and(|s| saved % s == 0) {
            out.paths.push(PathDraw {
                theta: state.theta.clone(),
                v: state.v.clone(),
                x: state.x.clone(),
            });
        }
        out.log_likelihood.push(state.log_likelihood(data)?);
    }
    Ok(out)
}

/// Monte Carlo sample from the one-step-ahead synthesis forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    /// `n x q` synthetic outcomes.
    pub samples: DMatrix<f64>,
    /// `F_{t+1} θ_{t+1}` per sample.
    pub means: Vec<DVector<f64>>,
    /// `V_{t+1}` per sample.
    pub v: Vec<DMatrix<f64>>,
    /// `θ_{t+1}` per sample.
    pub theta: Vec<DVector<f64>>,
}

impl ForecastDistribution {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn sample_mean(&self) -> DVector<f64> {
        self.samples.row_mean().transpose()
    }
}

/// Synthetic futures: per saved draw evolve `V` and `θ` one step, draw
/// `X_{t+1}` from the agents' forecasts and then an outcome from the
/// synthesis model.
pub fn forecast_one_step<R: Rng + ?Sized>(
    draws: &PosteriorDraws,
    next: &ForecastSet,
    prior: &BpsPrior,
    rng: &mut R,
) -> Result<ForecastDistribution> {
    if draws.is_empty() {
        return Err(BpsError::InvalidInput("no posterior draws to forecast from".into()));
    }
    next.validate()?;
    let DiscountConfig { delta, beta } = prior.discounts;
    let q = next.dim();
    let n = draws.len();
    let mut samples = DMatrix::zeros(n, q);
    let mut means = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let mut thetas = Vec::with_capacity(n);
    for (s, d) in draws.terminal.iter().enumerate() {
        let mut precision = spd_inverse(&d.v, "terminal volatility")? * beta;
        let dof = (1.0 - beta) * d.h;
        if dof > 0.0 {
            let scale = spd_inverse(&d.d, "terminal sum-of-squares")?;
            precision += volatility::sample_wishart_increment(dof, &scale, rng)?;
        }
        let v_next = spd_inverse(&precision, "evolved volatility precision")?;
        let omega_cov = &d.c * ((1.0 - delta) / delta);
        let theta_next = linalg::sample_mvn(&d.theta, &omega_cov, rng)?;
        let x_next = next.sample_prior(rng)?;
        let mean = DesignMatrix::from_states(&x_next).mean(&theta_next);
        let y = linalg::sample_mvn(&mean, &v_next, rng)?;
        samples.set_row(s, &y.transpose());
        means.push(mean);
        vs.push(v_next);
        thetas.push(theta_next);
    }
    Ok(ForecastDistribution { samples, means, v: vs, theta: thetas })
}
