//! Diffusion coefficient tables.
//!
//! Levels are indexed `0..T`, with level 0 closest to the data. The clean
//! end sits one step below level 0 and is represented by `alpha_bar = 1`,
//! so a reverse step from level 0 lands exactly on its clean estimate.

use crate::error::{Error, Result};

/// Training-schedule length the DDPM endpoints were chosen for.
const REFERENCE_STEPS: f64 = 1000.0;

/// Cap on scaled betas for very short chains.
pub const MAX_SCALED_BETA: f64 = 0.5;

pub const DDPM_BETA_START: f64 = 1e-4;
pub const DDPM_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    eta: f64,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::InvalidParameter("beta endpoints must be finite".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidParameter(format!("eta must lie in [0, 1], got {eta}")));
        }

        let span = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if i == steps - 1 {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * (i as f64 / span)
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }

        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            eta,
        })
    }

    /// The DDPM endpoints (1e-4, 0.02) rescaled by `1000 / steps`, so that a
    /// short native schedule still ends close to pure noise.
    pub fn ddpm_scaled(steps: usize, eta: f64) -> Result<Self> {
        let scale = REFERENCE_STEPS / steps.max(1) as f64;
        let end = (DDPM_BETA_END * scale).min(MAX_SCALED_BETA);
        Self::linear(steps, (DDPM_BETA_START * scale).min(end), end, eta)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.num_steps(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `alpha_bar` of the level a reverse step from `t` lands on; 1 below level 0.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    /// Per-step retention `alpha_bar(t) / alpha_bar_prev(t)`.
    pub fn step_alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t])
    }

    /// Reverse-step noise scale
    /// `eta * sqrt((1 - ab_prev) / (1 - ab)) * sqrt(1 - ab / ab_prev)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar_prev(t)?;
        Ok(sigma_between(self.eta, ab, ab_prev))
    }

    /// Coefficient on the direction term of the reverse step,
    /// `sqrt(1 - ab_prev - sigma^2)`, clamped at zero against rounding.
    pub fn direction_coefficient(&self, t: usize) -> Result<f64> {
        let ab_prev = self.alpha_bar_prev(t)?;
        let s = self.sigma(t)?;
        Ok((1.0 - ab_prev - s * s).max(0.0).sqrt())
    }
}

pub(crate) fn sigma_between(eta: f64, ab: f64, ab_prev: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let ratio = ((1.0 - ab_prev) / (1.0 - ab)).max(0.0);
    let shrink = (1.0 - ab / ab_prev).max(0.0);
    eta * ratio.sqrt() * shrink.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ddpm_endpoints_are_kept() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02, 1.0).unwrap();
        assert_eq!(s.betas()[0], 1e-4);
        assert_eq!(s.betas()[99], 0.02);
        assert_eq!(s.num_steps(), 100);
    }

    #[test]
    fn constant_beta_products() {
        let beta = 0.3;
        let s = NoiseSchedule::linear(2, beta, beta, 1.0).unwrap();
        assert_abs_diff_eq!(s.alpha_bars()[0], 1.0 - beta, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bars()[1], (1.0 - beta) * (1.0 - beta), epsilon = 1e-15);

        let s = NoiseSchedule::linear(10, 0.1, 0.1, 1.0).unwrap();
        assert_abs_diff_eq!(s.alpha_bars()[9], 0.9f64.powi(10), epsilon = 1e-14);
        assert_abs_diff_eq!(s.alpha_bars()[9], 0.34868, epsilon = 1e-5);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, f64::NAN, 0.02, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, f64::INFINITY, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 0.02, 1.5).is_err());
    }

    #[test]
    fn sigma_matches_direct_formula() {
        // ab_prev = 0.9, ab = 0.81: constant beta 0.1.
        let s = NoiseSchedule::linear(5, 0.1, 0.1, 1.0).unwrap();
        let expected = (0.1f64 / 0.19).sqrt() * 0.1f64.sqrt();
        assert_abs_diff_eq!(s.sigma(1).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma(1).unwrap(), 0.22942, epsilon = 1e-5);

        let half = NoiseSchedule::linear(5, 0.1, 0.1, 0.5).unwrap();
        for t in 0..5 {
            assert_abs_diff_eq!(half.sigma(t).unwrap(), 0.5 * s.sigma(t).unwrap(), epsilon = 1e-15);
        }
    }

    #[test]
    fn sigma_vanishes_for_eta_zero_and_at_the_clean_end() {
        let s = NoiseSchedule::ddpm_scaled(50, 0.0).unwrap();
        for t in 0..50 {
            assert_eq!(s.sigma(t).unwrap(), 0.0);
        }
        let s = NoiseSchedule::ddpm_scaled(50, 1.0).unwrap();
        assert_eq!(s.sigma(0).unwrap(), 0.0);
        assert_eq!(s.alpha_bar_prev(0).unwrap(), 1.0);
        assert!(s.sigma(50).is_err());
    }

    #[test]
    fn scaled_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::ddpm_scaled(100, 1.0).unwrap();
        assert_abs_diff_eq!(s.betas()[0], 1e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(s.betas()[99], 0.2, epsilon = 1e-15);
        assert!(s.alpha_bars()[99] < 1e-4);
    }

    #[test]
    fn rebuilding_is_bit_identical() {
        let a = NoiseSchedule::linear(37, 2e-4, 0.05, 0.7).unwrap();
        let b = NoiseSchedule::linear(37, 2e-4, 0.05, 0.7).unwrap();
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn table_invariants(
            steps in 2usize..300,
            start in 1e-5f64..0.05,
            extra in 0.0f64..0.3,
            eta in 0.0f64..=1.0,
        ) {
            let s = NoiseSchedule::linear(steps, start, start + extra, eta).unwrap();
            for t in 0..steps {
                let a = s.alphas()[t];
                proptest::prop_assert!(a > 0.0 && a < 1.0);
                if t > 0 {
                    let ab = s.alpha_bars()[t];
                    let prev = s.alpha_bars()[t - 1];
                    proptest::prop_assert!(ab < prev);
                    proptest::prop_assert!(((ab - prev * a) / ab).abs() <= 1e-12);
                }
                let sig = s.sigma(t).unwrap();
                let ab_prev = s.alpha_bar_prev(t).unwrap();
                proptest::prop_assert!(sig >= 0.0);
                proptest::prop_assert!(sig <= (1.0 - ab_prev).sqrt() + 1e-15);
                proptest::prop_assert!(1.0 - ab_prev - sig * sig >= -1e-15);
            }
        }
    }
}
