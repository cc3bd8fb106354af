//! Forward filtering and backward sampling of the synthesis coefficients.
//!
//! Conditional on the latent agent states and the residual volatilities the
//! synthesis model is a multivariate DLM with a random-walk coefficient
//! vector whose evolution variance is set by a single discount factor:
//! `R_t = C_{t-1} / delta`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{BpsError, Result};
use crate::linalg::{self, robust_cholesky, symmetrize};

/// Discount factors for the coefficient (`delta`) and volatility (`beta`) evolutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscountConfig {
    pub delta: f64,
    pub beta: f64,
}

impl DiscountConfig {
    pub fn new(delta: f64, beta: f64) -> Result<Self> {
        let cfg = Self { delta, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_discount("delta", self.delta)?;
        check_discount("beta", self.beta)
    }
}

impl Default for DiscountConfig {
    fn default() -> Self {
        Self { delta: 0.99, beta: 0.99 }
    }
}

pub(crate) fn check_discount(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(BpsError::InvalidInput(format!("discount {name} = {value} must lie in (0, 1]")))
    }
}

/// The `q x (J+1)q` regression matrix of the synthesis function.
///
/// Row `r` carries a leading one (the intercept) followed by the `J` latent
/// agent values for series `r`, all inside the `r`-th block of `J+1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    num_agents: usize,
    entries: DMatrix<f64>,
}

impl DesignMatrix {
    /// Build from a `J x q` matrix of latent agent states (row `j` is agent `j`).
    pub fn from_states(states: &DMatrix<f64>) -> Self {
        let (num_agents, q) = states.shape();
        let block = num_agents + 1;
        let mut entries = DMatrix::zeros(q, block * q);
        for r in 0..q {
            entries[(r, r * block)] = 1.0;
            for j in 0..num_agents {
                entries[(r, r * block + 1 + j)] = states[(j, r)];
            }
        }
        Self { num_agents, entries }
    }

    pub fn num_series(&self) -> usize {
        self.entries.nrows()
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn state_dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// `F θ`, exploiting the block structure.
    pub fn mean(&self, theta: &DVector<f64>) -> DVector<f64> {
        let block = self.num_agents + 1;
        DVector::from_fn(self.num_series(), |r, _| {
            let start = r * block;
            (0..block).map(|i| self.entries[(r, start + i)] * theta[start + i]).sum()
        })
    }
}

/// Gaussian posterior `N(m, C)` for the coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaPosterior {
    pub m: DVector<f64>,
    pub c: DMatrix<f64>,
}

/// Per-time output of the coefficient forward filter.
#[derive(Debug, Clone)]
pub struct ThetaFilterStats {
    /// On-line posterior mean `m_t`.
    pub m: DVector<f64>,
    /// On-line posterior covariance `C_t`.
    pub c: DMatrix<f64>,
    /// Prior covariance `R_t = C_{t-1} / delta`.
    pub r: DMatrix<f64>,
    /// One-step predictive mean `f_t = F_t m_{t-1}`.
    pub f: DVector<f64>,
    /// One-step predictive covariance `Q_t = F_t R_t F_t' + V_t`.
    pub q: DMatrix<f64>,
    /// Forecast error `e_t = y_t - f_t`.
    pub e: DVector<f64>,
    /// Adaptive gain `A_t = R_t F_t' Q_t^{-1}`.
    pub gain: DMatrix<f64>,
}

impl ThetaFilterStats {
    pub fn posterior(&self) -> ThetaPosterior {
        ThetaPosterior { m: self.m.clone(), c: self.c.clone() }
    }
}

/// One discount-DLM filtering step from the time `t-1` posterior.
pub fn forward_filter_step(
    prev: &ThetaPosterior,
    design: &DesignMatrix,
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    delta: f64,
) -> Result<ThetaFilterStats> {
    check_discount("delta", delta)?;
    let n = design.state_dim();
    let q = design.num_series();
    if prev.m.len() != n || prev.c.shape() != (n, n) {
        return Err(BpsError::Dimension(format!(
            "coefficient state has length {}, design expects {n}",
            prev.m.len()
        )));
    }
    if y.len() != q || v.shape() != (q, q) {
        return Err(BpsError::Dimension(format!(
            "observation has length {}, volatility is {}x{}, design has {q} rows",
            y.len(),
            v.nrows(),
            v.ncols()
        )));
    }

    let fm = design.matrix();
    let r = &prev.c / delta;
    let f = design.mean(&prev.m);
    // F R, q x n
    let fr = fm * &r;
    let mut qmat = &fr * fm.transpose() + v;
    symmetrize(&mut qmat);
    let q_chol = robust_cholesky(&qmat, "one-step predictive covariance").map_err(|err| {
        BpsError::SingularPredictive(format!("{err}; latent agent states are likely degenerate"))
    })?;
    let e = y - &f;
    // A' = Q^{-1} F R  (R symmetric)
    let gain_t = q_chol.solve(&fr);
    let gain = gain_t.transpose();
    let m = &prev.m + &gain * &e;
    // C = R - A Q A' = R - A (F R)
    let mut c = &r - &gain * &fr;
    symmetrize(&mut c);
    Ok(ThetaFilterStats { m, c, r, f, q: qmat, e, gain })
}

/// Run [`forward_filter_step`] over `t = 1..T`.
pub fn forward_filter(
    prior: &ThetaPosterior,
    designs: &[DesignMatrix],
    ys: &[DVector<f64>],
    vs: &[DMatrix<f64>],
    delta: f64,
) -> Result<Vec<ThetaFilterStats>> {
    if designs.len() != ys.len() || ys.len() != vs.len() {
        return Err(BpsError::Dimension(format!(
            "filter inputs disagree on length: {} designs, {} observations, {} volatilities",
            designs.len(),
            ys.len(),
            vs.len()
        )));
    }
    let mut out = Vec::with_capacity(ys.len());
    let mut current = prior.clone();
    for ((design, y), v) in designs.iter().zip(ys).zip(vs) {
        let stats = forward_filter_step(&current, design, y, v, delta)?;
        current = stats.posterior();
        out.push(stats);
    }
    Ok(out)
}

/// Backward sampling of `θ_{0:T}` from the saved filter output.
///
/// `θ_T ~ N(m_T, C_T)` and, going back, `θ_t ~ N(m_t + δ(θ_{t+1} - m_t), C_t(1-δ))`.
/// Element `t` of the returned vector is `θ_t`; element 0 is the initial state.
pub fn backward_sample_theta<R: Rng + ?Sized>(
    stats: &[ThetaFilterStats],
    prior: &ThetaPosterior,
    delta: f64,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    check_discount("delta", delta)?;
    let t_len = stats.len();
    let mut path = vec![DVector::zeros(prior.m.len()); t_len + 1];
    let (m_last, c_last) = match stats.last() {
        Some(last) => (&last.m, &last.c),
        None => (&prior.m, &prior.c),
    };
    path[t_len] = linalg::sample_mvn(m_last, c_last, rng)?;
    for t in (0..t_len).rev() {
        let (m_t, c_t) = if t == 0 {
            (&prior.m, &prior.c)
        } else {
            (&stats[t - 1].m, &stats[t - 1].c)
        };
        let mean = m_t + (&path[t + 1] - m_t) * delta;
        let cov = c_t * (1.0 - delta);
        path[t] = linalg::sample_mvn(&mean, &cov, rng)?;
    }
    Ok(path)
}

/// One-step predictive with the volatility integrated out: a multivariate T
/// with `dof` degrees of freedom, location `f_t` and scale `F R F' + S`.
///
/// `s_estimate` is the point estimate of the volatility (`D / n`) that
/// replaces the conditional `V_t` inside `Q_t`.
pub fn integrated_predictive(
    prev: &ThetaPosterior,
    design: &DesignMatrix,
    s_estimate: &DMatrix<f64>,
    delta: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_discount("delta", delta)?;
    let fm = design.matrix();
    let r = &prev.c / delta;
    let mut scale = fm * r * fm.transpose() + s_estimate;
    symmetrize(&mut scale);
    Ok((design.mean(&prev.m), scale))
}
