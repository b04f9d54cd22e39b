//! Gaussian mixture priors and their exact diffused marginals.
//!
//! Under the forward process component `k` diffuses to
//! `N(sqrt(ab) mu_k, ab Sigma_k + (1 - ab) I)`, so the marginal at every level
//! is again a mixture with the prior's weights. Score, noise prediction and
//! posterior mean all follow in closed form.

use nalgebra::{DMatrix, DVector};

use super::gaussian::{check_symmetric, log_sum_exp, Gaussian};
use super::ScoreModel;
use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct GaussianMixturePrior {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    components: Vec<Gaussian>,
}

impl GaussianMixturePrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::InvalidParameter(format!(
                "{k} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("mixture weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mixture dimension must be positive".into()));
        }

        let mut mean_vecs = Vec::with_capacity(k);
        let mut cov_mats = Vec::with_capacity(k);
        let mut components = Vec::with_capacity(k);
        for (mean, cov) in means.into_iter().zip(covariances) {
            check_dim(dim, mean.len())?;
            check_dim(dim * dim, cov.len())?;
            if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("mixture parameters must be finite".into()));
            }
            let mean = DVector::from_vec(mean);
            let cov = DMatrix::from_row_slice(dim, dim, &cov);
            check_symmetric(&cov, "covariance")?;
            components.push(Gaussian::new(mean.clone(), cov.clone())?);
            mean_vecs.push(mean);
            cov_mats.push(cov);
        }

        Ok(Self {
            weights,
            means: mean_vecs,
            covariances: cov_mats,
            components,
        })
    }

    /// Builds a prior from flat lists: `means` is `k * d` values, `covariances`
    /// is `k * d * d` values with each matrix row-major.
    pub fn from_flat(weights: Vec<f64>, dim: usize, means: &[f64], covariances: &[f64]) -> Result<Self> {
        let k = weights.len();
        if dim == 0 || means.len() != k * dim || covariances.len() != k * dim * dim {
            return Err(Error::InvalidParameter(format!(
                "flat mixture lists do not match {k} components of dimension {dim}"
            )));
        }
        let means = means.chunks(dim).map(<[f64]>::to_vec).collect();
        let covs = covariances.chunks(dim * dim).map(<[f64]>::to_vec).collect();
        Self::new(weights, means, covs)
    }

    /// Standard normal in `dim` dimensions as a one-component mixture.
    pub fn standard_normal(dim: usize) -> Result<Self> {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
        }
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![cov])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means[k].as_slice()
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.covariances[k]
    }

    pub(crate) fn component(&self, k: usize) -> &Gaussian {
        &self.components[k]
    }

    /// Per-component `ln w_k + ln N(x; mu_k, Sigma_k)` and `Sigma_k^{-1} (x - mu_k)`.
    pub(crate) fn component_terms(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
        check_dim(self.dim(), x.len())?;
        let xv = DVector::from_column_slice(x);
        let mut logs = Vec::with_capacity(self.num_components());
        let mut solves = Vec::with_capacity(self.num_components());
        for (w, g) in self.weights.iter().zip(&self.components) {
            let (lp, sol) = g.log_pdf_and_solve(&xv);
            logs.push(w.ln() + lp);
            solves.push(sol);
        }
        Ok((logs, solves))
    }

    /// Exact log-density of the clean prior.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let (logs, _) = self.component_terms(x)?;
        Ok(log_sum_exp(&logs))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (logs, _) = self.component_terms(x)?;
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    /// Index of the component with the largest responsibility at `x`.
    pub fn most_likely_component(&self, x: &[f64]) -> Result<usize> {
        let (logs, _) = self.component_terms(x)?;
        Ok(logs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
            .0)
    }

    /// The marginal of this prior after diffusing to level `t`.
    pub fn diffused(&self, schedule: &NoiseSchedule, t: usize) -> Result<DiffusedMixture> {
        DiffusedMixture::new(self, schedule.alpha_bar(t)?)
    }
}

#[derive(Debug, Clone)]
struct DiffusedComponent {
    marginal: Gaussian,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
}

/// Mixture marginal at a fixed noise level `alpha_bar`.
#[derive(Debug, Clone)]
pub struct DiffusedMixture {
    alpha_bar: f64,
    log_weights: Vec<f64>,
    components: Vec<DiffusedComponent>,
}

struct Evaluation {
    log_density: f64,
    responsibilities: Vec<f64>,
    solves: Vec<DVector<f64>>,
}

impl DiffusedMixture {
    pub fn new(prior: &GaussianMixturePrior, alpha_bar: f64) -> Result<Self> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::InvalidParameter(format!("alpha_bar {alpha_bar} outside (0, 1]")));
        }
        let d = prior.dim();
        let scale = alpha_bar.sqrt();
        let identity = DMatrix::<f64>::identity(d, d);
        let components = prior
            .means
            .iter()
            .zip(&prior.covariances)
            .map(|(mu, sigma)| {
                let cov = sigma * alpha_bar + &identity * (1.0 - alpha_bar);
                Ok(DiffusedComponent {
                    marginal: Gaussian::new(mu * scale, cov)?,
                    prior_mean: mu.clone(),
                    prior_cov: sigma.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alpha_bar,
            log_weights: prior.weights.iter().map(|w| w.ln()).collect(),
            components,
        })
    }

    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }

    pub fn dim(&self) -> usize {
        self.components[0].prior_mean.len()
    }

    /// Mean of component `k` at this level.
    pub fn component_mean(&self, k: usize) -> &[f64] {
        self.components[k].marginal.mean().as_slice()
    }

    /// Covariance of component `k` at this level, `ab Sigma_k + (1 - ab) I`.
    pub fn component_covariance(&self, k: usize) -> DMatrix<f64> {
        let c = &self.components[k];
        let d = self.dim();
        &c.prior_cov * self.alpha_bar + DMatrix::<f64>::identity(d, d) * (1.0 - self.alpha_bar)
    }

    fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        check_dim(self.dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture evaluated at a non-finite point".into()));
        }
        let xv = DVector::from_column_slice(x);
        let mut logs = Vec::with_capacity(self.components.len());
        let mut solves = Vec::with_capacity(self.components.len());
        for (lw, c) in self.log_weights.iter().zip(&self.components) {
            let (lp, sol) = c.marginal.log_pdf_and_solve(&xv);
            logs.push(lw + lp);
            solves.push(sol);
        }
        let log_density = log_sum_exp(&logs);
        let responsibilities = logs.iter().map(|l| (l - log_density).exp()).collect();
        Ok(Evaluation {
            log_density,
            responsibilities,
            solves,
        })
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x)?.log_density)
    }

    /// `grad_x log p(x)` of the marginal.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ev = self.evaluate(x)?;
        let mut out = DVector::zeros(self.dim());
        for (r, sol) in ev.responsibilities.iter().zip(&ev.solves) {
            out.axpy(-r, sol, 1.0);
        }
        Ok(out.data.into())
    }

    /// Exact noise prediction `-sqrt(1 - ab) * score`.
    pub fn epsilon(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = (1.0 - self.alpha_bar).sqrt();
        Ok(self.score(x)?.into_iter().map(|v| -s * v).collect())
    }

    /// `E[x_0 | x_t = x]` by per-component Gaussian conditioning:
    /// `mu_k + sqrt(ab) Sigma_k C_k^{-1} (x - sqrt(ab) mu_k)`, mixed by responsibility.
    pub fn posterior_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ev = self.evaluate(x)?;
        let scale = self.alpha_bar.sqrt();
        let mut out = DVector::zeros(self.dim());
        for ((r, sol), c) in ev.responsibilities.iter().zip(&ev.solves).zip(&self.components) {
            let cond = &c.prior_mean + (&c.prior_cov * sol) * scale;
            out.axpy(*r, &cond, 1.0);
        }
        Ok(out.data.into())
    }
}

pub fn mixture_marginal_logdensity(
    prior: &GaussianMixturePrior,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
) -> Result<f64> {
    prior.diffused(schedule, t)?.log_density(x_t)
}

pub fn mixture_epsilon(
    prior: &GaussianMixturePrior,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    prior.diffused(schedule, t)?.epsilon(x_t)
}

pub fn mixture_posterior_mean(
    prior: &GaussianMixturePrior,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    prior.diffused(schedule, t)?.posterior_mean(x_t)
}

/// Exact noise predictor for a mixture prior, with the marginal factors of
/// every level computed once up front.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    prior: GaussianMixturePrior,
    levels: Vec<DiffusedMixture>,
}

impl AnalyticScore {
    pub fn new(prior: GaussianMixturePrior, schedule: &NoiseSchedule) -> Result<Self> {
        let levels = (0..schedule.num_steps())
            .map(|t| prior.diffused(schedule, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { prior, levels })
    }

    pub fn prior(&self) -> &GaussianMixturePrior {
        &self.prior
    }

    pub fn level(&self, t: usize) -> Result<&DiffusedMixture> {
        self.levels.get(t).ok_or(Error::TimestepOutOfRange {
            t,
            steps: self.levels.len(),
        })
    }
}

impl ScoreModel for AnalyticScore {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn predict_epsilon(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self.level(t)?.epsilon(x_t)
    }
}
