//! Forecast scoring: MSFE, log predictive density ratios, KL divergence of
//! agent states and the BMA baseline.

use nalgebra::{DMatrix, DVector};

use crate::error::{BpsError, Result};
use crate::gibbs::ForecastDistribution;
use crate::linalg::{log_sum_exp, mvn_logpdf_chol, robust_cholesky, sample_moments};

/// Per-series mean squared error.
pub fn msfe(errors: &[DVector<f64>]) -> Result<DVector<f64>> {
    cumulative_msfe(errors)?
        .pop()
        .ok_or_else(|| BpsError::InvalidInput("MSFE of no forecast errors".into()))
}

/// `MSFE_{1:t}` for every `t`.
pub fn cumulative_msfe(errors: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let first = errors
        .first()
        .ok_or_else(|| BpsError::InvalidInput("MSFE of no forecast errors".into()))?;
    let mut acc = DVector::zeros(first.len());
    let mut out = Vec::with_capacity(errors.len());
    for (t, e) in errors.iter().enumerate() {
        if e.len() != acc.len() {
            return Err(BpsError::Dimension("forecast errors of different lengths".into()));
        }
        acc += e.component_mul(e);
        out.push(&acc / (t + 1) as f64);
    }
    Ok(out)
}

/// Running sum of `log p_model - log p_baseline`.
pub fn lpdr(model: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    if model.len() != baseline.len() {
        return Err(BpsError::Dimension(format!(
            "{} model log densities against {} baseline values",
            model.len(),
            baseline.len()
        )));
    }
    let mut acc = 0.0;
    Ok(model
        .iter()
        .zip(baseline)
        .map(|(m, b)| {
            acc += m - b;
            acc
        })
        .collect())
}

/// Log of the average over samples of `N(y | F θ, V)`.
pub fn predictive_logpdf(forecast: &ForecastDistribution, y: &DVector<f64>) -> Result<f64> {
    if forecast.means.is_empty() || forecast.means.len() != forecast.v.len() {
        return Err(BpsError::InvalidInput("predictive density needs at least one (mean, V) sample".into()));
    }
    let terms = forecast
        .means
        .iter()
        .zip(&forecast.v)
        .map(|(m, v)| Ok(mvn_logpdf_chol(y, m, &robust_cholesky(v, "forecast volatility")?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_sum_exp(&terms) - (terms.len() as f64).ln())
}

/// `KL(p || h)` for Gaussians.
pub fn kl_gaussian(
    mean_p: &DVector<f64>,
    cov_p: &DMatrix<f64>,
    mean_h: &DVector<f64>,
    cov_h: &DMatrix<f64>,
) -> Result<f64> {
    let d = mean_p.len();
    if mean_h.len() != d || cov_p.shape() != (d, d) || cov_h.shape() != (d, d) {
        return Err(BpsError::Dimension("KL arguments disagree in dimension".into()));
    }
    let chol_p = cov_p
        .clone()
        .cholesky()
        .ok_or_else(|| BpsError::NotPositiveDefinite("KL covariance p".into()))?;
    let chol_h = cov_h
        .clone()
        .cholesky()
        .ok_or_else(|| BpsError::NotPositiveDefinite("KL covariance h".into()))?;
    let trace = chol_h.solve(cov_p).trace();
    let diff = mean_h - mean_p;
    let maha = diff.dot(&chol_h.solve(&diff));
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let kl = 0.5 * (trace + maha - d as f64 + logdet(&chol_h.l()) - logdet(&chol_p.l()));
    Ok(kl.max(0.0))
}

/// `(1/n) Σ [log p(x_i) - log h(x_i)]` with both log densities supplied.
pub fn kl_mc_with<P, H>(samples: &[DVector<f64>], log_p: P, log_h: H) -> Result<f64>
where
    P: Fn(&DVector<f64>) -> Result<f64>,
    H: Fn(&DVector<f64>) -> Result<f64>,
{
    if samples.is_empty() {
        return Err(BpsError::InvalidInput("KL estimate needs at least one sample".into()));
    }
    let mut acc = 0.0;
    for x in samples {
        let (lp, lh) = (log_p(x)?, log_h(x)?);
        if !lp.is_finite() || !lh.is_finite() {
            return Err(BpsError::InvalidInput("KL estimate hit a non-finite log density".into()));
        }
        acc += lp - lh;
    }
    Ok(acc / samples.len() as f64)
}

/// Monte Carlo KL where the posterior density is a Gaussian fitted to the samples.
pub fn kl_mc<H>(samples: &[DVector<f64>], log_h: H) -> Result<f64>
where
    H: Fn(&DVector<f64>) -> Result<f64>,
{
    if samples.len() <= samples.first().map_or(0, |s| s.len()) {
        return Err(BpsError::InvalidInput(format!(
            "Gaussian fit to {} samples in dimension {} is singular",
            samples.len(),
            samples.first().map_or(0, |s| s.len())
        )));
    }
    let (mean, cov) = sample_moments(samples);
    let chol = robust_cholesky(&cov, "Gaussian fit to posterior draws")?;
    kl_mc_with(samples, |x| Ok(mvn_logpdf_chol(x, &mean, &chol)), log_h)
}

/// Plug-in KL for a discrete posterior: `Σ p̂(x) [log p̂(x) - log h(x)]` over
/// the distinct sample values, where `p̂` is the sample frequency and
/// `log_h` returns the log prior mass of a support point.
pub fn kl_discrete<H>(samples: &[DVector<f64>], log_h: H) -> Result<f64>
where
    H: Fn(&DVector<f64>) -> Result<f64>,
{
    if samples.is_empty() {
        return Err(BpsError::InvalidInput("KL estimate needs at least one sample".into()));
    }
    let mut counts: std::collections::BTreeMap<Vec<u64>, (usize, usize)> = std::collections::BTreeMap::new();
    for (i, x) in samples.iter().enumerate() {
        counts.entry(x.iter().map(|v| v.to_bits()).collect()).or_insert((0, i)).0 += 1;
    }
    let n = samples.len() as f64;
    let mut acc = 0.0;
    for (count, first) in counts.values() {
        let p = *count as f64 / n;
        let lh = log_h(&samples[*first])?;
        if !lh.is_finite() {
            return Err(BpsError::InvalidInput("posterior draw outside the prior support".into()));
        }
        acc += p * (p.ln() - lh);
    }
    Ok(acc.max(0.0))
}

/// Bayesian model averaging from per-origin agent log predictive densities.
#[derive(Debug, Clone, PartialEq)]
pub struct BmaResult {
    /// Weights used to forecast each origin (posterior after the previous ones).
    pub prior_weights: Vec<Vec<f64>>,
    /// Posterior weights after scoring each origin.
    pub weights: Vec<Vec<f64>>,
    /// Log density of the weighted mixture at each origin.
    pub logpdf: Vec<f64>,
}

/// Equal prior weights updated by cumulative predictive likelihood, no forgetting.
pub fn bma_baseline(agent_logpdfs: &[Vec<f64>]) -> Result<BmaResult> {
    bma_with_delay(agent_logpdfs, 1)
}

/// BMA where the weights for row `t` use only rows `..=t - delay`.
///
/// For `k`-step forecasts made at consecutive origins the outcome of row `s`
/// is known at the origin of row `t` only when `s <= t - k`.
pub fn bma_with_delay(agent_logpdfs: &[Vec<f64>], delay: usize) -> Result<BmaResult> {
    let j = agent_logpdfs.first().map_or(0, |r| r.len());
    if j == 0 || delay == 0 {
        return Err(BpsError::InvalidInput("BMA needs at least one origin, one agent and a positive delay".into()));
    }
    let mut cumulative = vec![0.0; j];
    let mut prefix = vec![vec![0.0; j]];
    for (t, row) in agent_logpdfs.iter().enumerate() {
        if row.len() != j {
            return Err(BpsError::Dimension(format!("origin {t} has {} agents, expected {j}", row.len())));
        }
        if row.iter().all(|l| *l == f64::NEG_INFINITY) {
            return Err(BpsError::InvalidInput(format!("every agent has zero likelihood at origin {t}")));
        }
        if row.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(BpsError::InvalidInput(format!("invalid agent log density at origin {t}")));
        }
        for (c, l) in cumulative.iter_mut().zip(row) {
            *c += l;
        }
        prefix.push(cumulative.clone());
    }
    let mut out = BmaResult { prior_weights: Vec::new(), weights: Vec::new(), logpdf: Vec::new() };
    for (t, row) in agent_logpdfs.iter().enumerate() {
        let known = (t + 1).saturating_sub(delay);
        let prior = softmax(&prefix[known])?;
        let mix: Vec<f64> = prior.iter().zip(row).map(|(w, l)| w.ln() + l).collect();
        out.logpdf.push(log_sum_exp(&mix));
        out.prior_weights.push(prior);
        out.weights.push(softmax(&prefix[t + 1])?);
    }
    Ok(out)
}

fn softmax(log_w: &[f64]) -> Result<Vec<f64>> {
    let norm = log_sum_exp(log_w);
    if !norm.is_finite() {
        return Err(BpsError::InvalidInput("all model likelihoods are zero".into()));
    }
    let mut w: Vec<f64> = log_w.iter().map(|l| (l - norm).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Weighted combination of agent point forecasts.
pub fn bma_point_forecast(weights: &[f64], means: &[DVector<f64>]) -> Result<DVector<f64>> {
    if weights.len() != means.len() || means.is_empty() {
        return Err(BpsError::Dimension("BMA weights and agent means disagree".into()));
    }
    let mut acc = DVector::zeros(means[0].len());
    for (w, m) in weights.iter().zip(means) {
        acc += m * *w;
    }
    Ok(acc)
}
