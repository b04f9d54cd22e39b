use super::ScoreModel;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Wraps a noise predictor so the clean estimate it implies stays inside
/// `[-bound, bound]`.
///
/// When the implied estimate leaves the box, the returned noise is the one
/// that reproduces the clamped estimate from the same `x_t`. Useful for image
/// models, whose small noise errors at high levels are magnified by
/// `1 / sqrt(alpha_bar)`.
#[derive(Debug, Clone)]
pub struct ClampedPrediction<M> {
    inner: M,
    alpha_bars: Vec<f64>,
    bound: f64,
}

impl<M: ScoreModel> ClampedPrediction<M> {
    pub fn new(inner: M, schedule: &NoiseSchedule, bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidParameter(format!("clamp bound must be positive, got {bound}")));
        }
        Ok(Self {
            inner,
            alpha_bars: schedule.alpha_bars().to_vec(),
            bound,
        })
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: ScoreModel> ScoreModel for ClampedPrediction<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_epsilon(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut eps = self.inner.predict_epsilon(x_t, t)?;
        let ab = *self.alpha_bars.get(t).ok_or(Error::TimestepOutOfRange {
            t,
            steps: self.alpha_bars.len(),
        })?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (e, &x) in eps.iter_mut().zip(x_t) {
            let x0 = (x - sn * *e) / sa;
            if x0.abs() > self.bound {
                *e = (x - sa * x0.clamp(-self.bound, self.bound)) / sn;
            }
        }
        Ok(eps)
    }
}
