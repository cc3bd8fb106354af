//! Sampling the latent agent states `X_t` given the synthesis parameters.
//!
//! At each time the full conditional is
//! `N(y_t | F_t θ_t, V_t) ∏_j h_tj(x_tj)`. Writing `z = vec(X_t)` agent by
//! agent, the likelihood is linear in `z`: `y = c(θ) + B(θ) z + ν`, where
//! `c_r` is the intercept of series `r` and row `r` of `B` holds the agent
//! weights `θ_rj` at the positions of `x_rj`.
//!
//! Normal and Student-T agents (the latter through their gamma scale
//! mixture) are drawn jointly from the Gaussian conditional. Sample-based
//! agents are resampled by importance weights; when they share a joint
//! draw index one index selects all of them at once, otherwise each is
//! resampled in turn holding the others at their current values.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::density::{sample_gamma, AgentForecastDensity};
use crate::error::{BpsError, Result};
use crate::linalg::{robust_cholesky, spd_inverse, standard_normal_vector};

/// `J x q` matrix of latent agent states; row `j` is agent `j`'s vector.
pub type LatentAgentStates = DMatrix<f64>;

/// Student-T mixing scales `φ_tj`, one per agent (1 for non-T agents).
pub type TScaleFactors = Vec<f64>;

/// The `J` agent densities available for one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub densities: Vec<AgentForecastDensity>,
    /// Row `i` of every agent's draw matrix belongs to the same joint draw.
    pub joint_draws: bool,
}

impl ForecastSet {
    pub fn new(densities: Vec<AgentForecastDensity>) -> Self {
        Self { densities, joint_draws: false }
    }

    pub fn joint(densities: Vec<AgentForecastDensity>) -> Self {
        Self { densities, joint_draws: true }
    }

    pub fn num_agents(&self) -> usize {
        self.densities.len()
    }

    pub fn dim(&self) -> usize {
        self.densities.first().map_or(0, AgentForecastDensity::dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.densities.is_empty() {
            return Err(BpsError::InvalidInput("forecast set has no agents".into()));
        }
        let q = self.dim();
        for (j, d) in self.densities.iter().enumerate() {
            d.validate()?;
            if d.dim() != q {
                return Err(BpsError::Dimension(format!(
                    "agent {} forecasts {} series, agent 1 forecasts {q}",
                    j + 1,
                    d.dim()
                )));
            }
        }
        if self.joint_draws {
            let counts: Vec<usize> = self
                .densities
                .iter()
                .map(|d| match d {
                    AgentForecastDensity::Empirical { draws, .. } => Some(draws.nrows()),
                    _ => None,
                })
                .collect::<Option<_>>()
                .ok_or_else(|| {
                    BpsError::InvalidInput("joint draws require every agent to be sample-based".into())
                })?;
            if counts.windows(2).any(|w| w[0] != w[1]) {
                return Err(BpsError::InvalidInput(
                    "joint draws require the same number of draws for every agent".into(),
                ));
            }
        }
        Ok(())
    }

    /// Independent draw of every agent's state from its own forecast.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LatentAgentStates> {
        let q = self.dim();
        let mut x = DMatrix::zeros(self.num_agents(), q);
        if self.joint_draws {
            if let AgentForecastDensity::Empirical { draws, .. } = &self.densities[0] {
                let i = rng.random_range(0..draws.nrows());
                for (j, d) in self.densities.iter().enumerate() {
                    if let AgentForecastDensity::Empirical { draws, .. } = d {
                        x.set_row(j, &draws.row(i));
                    }
                }
                return Ok(x);
            }
        }
        for (j, d) in self.densities.iter().enumerate() {
            x.set_row(j, &d.sample(rng)?.transpose());
        }
        Ok(x)
    }

    pub(crate) fn prepare(&self) -> Result<PreparedForecastSet> {
        self.validate()?;
        let agents = self
            .densities
            .iter()
            .map(|d| match d {
                AgentForecastDensity::Normal { mean, cov } => {
                    let precision = spd_inverse(cov, "agent forecast covariance")?;
                    Ok(PreparedAgent::Gaussian {
                        precision_mean: &precision * mean,
                        precision,
                        mean: mean.clone(),
                        dof: None,
                    })
                }
                AgentForecastDensity::StudentT { dof, loc, scale } => {
                    let precision = spd_inverse(scale, "agent forecast scale")?;
                    Ok(PreparedAgent::Gaussian {
                        precision_mean: &precision * loc,
                        precision,
                        mean: loc.clone(),
                        dof: Some(*dof),
                    })
                }
                AgentForecastDensity::Empirical { draws, .. } => {
                    Ok(PreparedAgent::Draws(draws.clone()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedForecastSet { agents, joint_draws: self.joint_draws })
    }
}

#[derive(Debug, Clone)]
pub(crate) enum PreparedAgent {
    /// Normal (dof = None) or Student-T conditional on its scale factor.
    Gaussian {
        mean: DVector<f64>,
        precision: DMatrix<f64>,
        precision_mean: DVector<f64>,
        dof: Option<f64>,
    },
    Draws(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub(crate) struct PreparedForecastSet {
    pub agents: Vec<PreparedAgent>,
    pub joint_draws: bool,
}

impl PreparedForecastSet {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn has_student_t(&self) -> bool {
        self.agents
            .iter()
            .any(|a| matches!(a, PreparedAgent::Gaussian { dof: Some(_), .. }))
    }
}

fn weight_index(j: usize, r: usize, num_agents: usize) -> usize {
    r * (num_agents + 1) + 1 + j
}

fn check_shapes(theta: &DVector<f64>, v: &DMatrix<f64>, y: &DVector<f64>, j: usize) -> Result<()> {
    let q = y.len();
    if theta.len() != (j + 1) * q || v.shape() != (q, q) {
        return Err(BpsError::Dimension(format!(
            "coefficients of length {} and volatility {}x{} do not match {j} agents and {q} series",
            theta.len(),
            v.nrows(),
            v.ncols()
        )));
    }
    Ok(())
}

/// Gaussian conditional for the agents in `subset`, others held at `current`.
fn sample_gaussian_subset<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    v_chol: &Cholesky<f64, Dyn>,
    y: &DVector<f64>,
    agents: &[PreparedAgent],
    phi: &[f64],
    subset: &[usize],
    current: &mut LatentAgentStates,
    rng: &mut R,
) -> Result<()> {
    if subset.is_empty() {
        return Ok(());
    }
    let j_total = agents.len();
    let q = y.len();
    let dim = subset.len() * q;

    // offset c(θ) including the fixed agents
    let mut resid = y.clone();
    for r in 0..q {
        let mut c = theta[r * (j_total + 1)];
        for j in 0..j_total {
            if !subset.contains(&j) {
                c += theta[weight_index(j, r, j_total)] * current[(j, r)];
            }
        }
        resid[r] -= c;
    }

    let mut b = DMatrix::zeros(q, dim);
    for (a, &j) in subset.iter().enumerate() {
        for r in 0..q {
            b[(r, a * q + r)] = theta[weight_index(j, r, j_total)];
        }
    }
    // B' V^{-1}
    let vinv_b = v_chol.solve(&b);
    let mut precision = b.transpose() * &vinv_b;
    let mut linear = vinv_b.transpose() * &resid;
    for (a, &j) in subset.iter().enumerate() {
        let (prec, prec_mean, scale) = match &agents[j] {
            PreparedAgent::Gaussian { precision, precision_mean, dof, .. } => {
                let s = if dof.is_some() { phi[j] } else { 1.0 };
                (precision, precision_mean, s)
            }
            PreparedAgent::Draws(_) => unreachable!("sample-based agent in gaussian block"),
        };
        let mut block = precision.view_mut((a * q, a * q), (q, q));
        block += prec * scale;
        let mut seg = linear.rows_mut(a * q, q);
        seg += prec_mean * scale;
    }
    let chol = robust_cholesky(&precision, "latent state posterior precision")?;
    let mean = chol.solve(&linear);
    let eps = standard_normal_vector(dim, rng);
    let noise = chol
        .l_dirty()
        .transpose()
        .solve_upper_triangular(&eps)
        .ok_or_else(|| BpsError::NotPositiveDefinite("latent state posterior precision".into()))?;
    let z = mean + noise;
    for (a, &j) in subset.iter().enumerate() {
        for r in 0..q {
            current[(j, r)] = z[a * q + r];
        }
    }
    Ok(())
}

/// Normalised importance weights `w_i ∝ N(y | F(X^{(i)}) θ, V)` from log-likelihoods.
///
/// If every weight underflows the weights fall back to uniform.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        log::warn!("all importance weights underflowed; resampling uniformly");
        return vec![1.0 / log_w.len() as f64; log_w.len()];
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn gaussian_loglik(v_chol: &Cholesky<f64, Dyn>, resid: &DVector<f64>) -> f64 {
    let z = v_chol
        .l_dirty()
        .solve_lower_triangular(resid)
        .expect("cholesky factor has a positive diagonal");
    -0.5 * z.norm_squared()
}

fn synthesis_residual(theta: &DVector<f64>, y: &DVector<f64>, x: &LatentAgentStates) -> DVector<f64> {
    let j_total = x.nrows();
    let q = y.len();
    DVector::from_fn(q, |r, _| {
        let base = r * (j_total + 1);
        let mut mean = theta[base];
        for j in 0..j_total {
            mean += theta[base + 1 + j] * x[(j, r)];
        }
        y[r] - mean
    })
}

/// Log importance weights of the joint candidates `X^{(i)}` (row `i` of every agent's draws).
pub fn joint_candidate_log_weights(
    theta: &DVector<f64>,
    v: &DMatrix<f64>,
    y: &DVector<f64>,
    draws: &[&DMatrix<f64>],
) -> Result<Vec<f64>> {
    let v_chol = robust_cholesky(v, "synthesis volatility")?;
    Ok(joint_log_weights_chol(theta, &v_chol, y, draws))
}

fn joint_log_weights_chol(
    theta: &DVector<f64>,
    v_chol: &Cholesky<f64, Dyn>,
    y: &DVector<f64>,
    draws: &[&DMatrix<f64>],
) -> Vec<f64> {
    let j_total = draws.len();
    let q = y.len();
    let count = draws[0].nrows();
    let mut x = DMatrix::zeros(j_total, q);
    (0..count)
        .map(|i| {
            for (j, d) in draws.iter().enumerate() {
                x.set_row(j, &d.row(i));
            }
            gaussian_loglik(v_chol, &synthesis_residual(theta, y, &x))
        })
        .collect()
}

fn resample_agent<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    v_precision: &DMatrix<f64>,
    y: &DVector<f64>,
    j: usize,
    draws: &DMatrix<f64>,
    current: &mut LatentAgentStates,
    rng: &mut R,
) {
    if draws.nrows() == 1 {
        current.set_row(j, &draws.row(0));
        return;
    }
    // The residual is affine in agent j's state: r_i = base - c .* x_i.
    let q = y.len();
    let stride = current.nrows() + 1;
    current.row_mut(j).fill(0.0);
    let base = synthesis_residual(theta, y, current);
    let c: Vec<f64> = (0..q).map(|r| theta[r * stride + 1 + j]).collect();
    let mut resid = vec![0.0; q];
    let log_w: Vec<f64> = (0..draws.nrows())
        .map(|i| {
            for r in 0..q {
                resid[r] = base[r] - c[r] * draws[(i, r)];
            }
            let mut quad = 0.0;
            for a in 0..q {
                let mut row = 0.0;
                for b in 0..q {
                    row += v_precision[(a, b)] * resid[b];
                }
                quad += resid[a] * row;
            }
            -0.5 * quad
        })
        .collect();
    let w = normalize_log_weights(&log_w);
    let pick = categorical(&w, rng);
    current.set_row(j, &draws.row(pick));
}

/// Full conditional draw of `X_t` (and the T scales) for a mixed agent set.
pub(crate) fn sample_states_prepared<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    v: &DMatrix<f64>,
    y: &DVector<f64>,
    set: &PreparedForecastSet,
    current: &mut LatentAgentStates,
    phi: &mut TScaleFactors,
    rng: &mut R,
) -> Result<()> {
    let j_total = set.num_agents();
    check_shapes(theta, v, y, j_total)?;
    let v_chol = robust_cholesky(v, "synthesis volatility")?;

    let gaussian: Vec<usize> = (0..j_total)
        .filter(|&j| matches!(set.agents[j], PreparedAgent::Gaussian { .. }))
        .collect();
    sample_gaussian_subset(theta, &v_chol, y, &set.agents, phi, &gaussian, current, rng)?;

    if set.joint_draws && gaussian.is_empty() {
        let draws: Vec<&DMatrix<f64>> = set
            .agents
            .iter()
            .map(|a| match a {
                PreparedAgent::Draws(d) => d,
                PreparedAgent::Gaussian { .. } => unreachable!(),
            })
            .collect();
        let w = normalize_log_weights(&joint_log_weights_chol(theta, &v_chol, y, &draws));
        let pick = categorical(&w, rng);
        for (j, d) in draws.iter().enumerate() {
            current.set_row(j, &d.row(pick));
        }
    } else if gaussian.len() < j_total {
        let v_precision = v_chol.inverse();
        for j in 0..j_total {
            if let PreparedAgent::Draws(draws) = &set.agents[j] {
                resample_agent(theta, &v_precision, y, j, draws, current, rng);
            }
        }
    }

    if set.has_student_t() {
        for j in 0..j_total {
            if let PreparedAgent::Gaussian { mean, precision, dof: Some(dof), .. } = &set.agents[j] {
                let diff = current.row(j).transpose() - mean;
                let quad = (diff.transpose() * precision * &diff)[(0, 0)];
                phi[j] = phi_conditional_draw(*dof, y.len(), quad, rng)?;
            }
        }
    }
    Ok(())
}

/// `φ | x ~ Gamma((n + q)/2, rate (n + d)/2)` with `d = (x-h)' H^{-1} (x-h)`.
fn phi_conditional_draw<R: Rng + ?Sized>(dof: f64, q: usize, quad: f64, rng: &mut R) -> Result<f64> {
    let (shape, rate) = phi_conditional_params(dof, q, quad);
    sample_gamma(shape, rate, rng)
}

/// Shape and rate of the scale-factor full conditional.
pub fn phi_conditional_params(dof: f64, q: usize, quad: f64) -> (f64, f64) {
    (0.5 * (dof + q as f64), 0.5 * (dof + quad))
}

/// Exact draw of `X_t` when every agent forecast is normal.
pub fn sample_states_normal<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    v: &DMatrix<f64>,
    y: &DVector<f64>,
    priors: &[AgentForecastDensity],
    rng: &mut R,
) -> Result<LatentAgentStates> {
    if let Some(j) = priors.iter().position(|d| !matches!(d, AgentForecastDensity::Normal { .. })) {
        return Err(BpsError::InvalidInput(format!("agent {} is not normal", j + 1)));
    }
    let set = ForecastSet::new(priors.to_vec()).prepare()?;
    let mut x = DMatrix::zeros(priors.len(), y.len());
    let mut phi = vec![1.0; priors.len()];
    sample_states_prepared(theta, v, y, &set, &mut x, &mut phi, rng)?;
    Ok(x)
}

/// Draw of `X_t` for Student-T agents conditional on their scale factors:
/// agent `j` enters as `N(h_tj, H_tj / φ_tj)`.
pub fn sample_states_t<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    v: &DMatrix<f64>,
    y: &DVector<f64>,
    priors: &[AgentForecastDensity],
    phi: &[f64],
    rng: &mut R,
) -> Result<LatentAgentStates> {
    if phi.len() != priors.len() {
        return Err(BpsError::Dimension(format!(
            "{} scale factors for {} agents",
            phi.len(),
            priors.len()
        )));
    }
    let mut gaussian = Vec::with_capacity(priors.len());
    for (j, d) in priors.iter().enumerate() {
        match d {
            AgentForecastDensity::StudentT { loc, scale, .. } => {
                if !(phi[j] > 0.0) {
                    return Err(BpsError::InvalidInput(format!(
                        "scale factor for agent {} must be positive",
                        j + 1
                    )));
                }
                gaussian.push(AgentForecastDensity::normal(loc.clone(), scale / phi[j]));
            }
            _ => return Err(BpsError::InvalidInput(format!("agent {} is not student-t", j + 1))),
        }
    }
    sample_states_normal(theta, v, y, &gaussian, rng)
}

/// Scale factors from their gamma full conditionals given the states.
pub fn sample_phi<R: Rng + ?Sized>(
    x: &LatentAgentStates,
    priors: &[AgentForecastDensity],
    rng: &mut R,
) -> Result<TScaleFactors> {
    if x.nrows() != priors.len() {
        return Err(BpsError::Dimension(format!(
            "{} agent rows for {} agents",
            x.nrows(),
            priors.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(BpsError::InvalidInput("latent states must be finite".into()));
    }
    priors
        .iter()
        .enumerate()
        .map(|(j, d)| match d {
            AgentForecastDensity::StudentT { dof, loc, scale } => {
                let diff = x.row(j).transpose() - loc;
                let chol = robust_cholesky(scale, "agent forecast scale")?;
                let quad = diff.dot(&chol.solve(&diff));
                phi_conditional_draw(*dof, loc.len(), quad, rng)
            }
            _ => Ok(1.0),
        })
        .collect()
}

/// Importance-resampling draw of `X_t` for sample-based agents.
///
/// With `joint` set, row `i` across all agents forms one candidate and a
/// single index is resampled; otherwise agents are resampled one at a time,
/// conditioning on `current` for the others.
pub fn sample_states_empirical<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    v: &DMatrix<f64>,
    y: &DVector<f64>,
    priors: &[AgentForecastDensity],
    joint: bool,
    current: &LatentAgentStates,
    rng: &mut R,
) -> Result<LatentAgentStates> {
    if let Some(j) = priors.iter().position(|d| !d.is_empirical()) {
        return Err(BpsError::InvalidInput(format!("agent {} is not sample-based", j + 1)));
    }
    let set = ForecastSet { densities: priors.to_vec(), joint_draws: joint }.prepare()?;
    let mut x = current.clone();
    let mut phi = vec![1.0; priors.len()];
    sample_states_prepared(theta, v, y, &set, &mut x, &mut phi, rng)?;
    Ok(x)
}
