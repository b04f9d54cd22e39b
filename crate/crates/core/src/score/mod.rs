//! Noise predictors `eps(x_t, t)`.

mod clamped;
mod denoiser;
mod gaussian;
mod mixture;

pub use clamped::ClampedPrediction;
pub use denoiser::{Activation, TinyDenoiser, TrainConfig, TrainReport, MAX_PARAMETERS};
pub use mixture::{
    mixture_epsilon, mixture_marginal_logdensity, mixture_posterior_mean, AnalyticScore,
    DiffusedMixture, GaussianMixturePrior,
};

pub(crate) use gaussian::{log_sum_exp, Gaussian};

use crate::error::Result;

/// Anything that predicts the noise in a latent at a given level.
///
/// Implementations must be deterministic: the same `(x_t, t)` always yields
/// the same output.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn predict_epsilon(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_epsilon(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        (**self).predict_epsilon(x_t, t)
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_epsilon(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        (**self).predict_epsilon(x_t, t)
    }
}
