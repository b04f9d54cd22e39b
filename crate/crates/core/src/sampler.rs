//! Forward noising, implicit clean-sample prediction, and the reverse step
//! written in terms of that prediction.
//!
//! The reverse step takes the clean estimate as a separate argument so that
//! steering can hand it a modified estimate instead of the model's own.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::io::fmt_f64;
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;

/// `alpha_bar` values at or below this make the implicit prediction undefined.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

/// A base seed plus a stream index. Each trajectory draws from its own
/// stream, so a batch is reproducible however it is split up, and two arms
/// of a paired comparison can replay exactly the same noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSeed {
    pub seed: u64,
    pub stream: u64,
}

impl StreamSeed {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

impl From<u64> for StreamSeed {
    fn from(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }
}

pub fn standard_normal(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(x0.len(), noise.len())?;
    let ab = schedule.alpha_bar(t)?;
    Ok(noise_to_level(ab, x0, noise))
}

/// Noises a clean vector to the level with the given `alpha_bar`; `ab = 1`
/// returns `x0` unchanged.
pub(crate) fn noise_to_level(ab: f64, x0: &[f64], noise: &[f64]) -> Vec<f64> {
    if ab == 1.0 {
        return x0.to_vec();
    }
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(noise).map(|(x, n)| sa * x + sn * n).collect()
}

/// `(x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`: the clean sample implied by a
/// noise prediction.
pub fn implicit_prediction(schedule: &NoiseSchedule, x_t: &[f64], t: usize, eps_pred: &[f64]) -> Result<Vec<f64>> {
    check_dim(x_t.len(), eps_pred.len())?;
    let ab = schedule.alpha_bar(t)?;
    if ab <= ALPHA_BAR_FLOOR {
        return Err(Error::DegenerateAlphaBar { t, alpha_bar: ab });
    }
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_pred).map(|(x, e)| (x - sn * e) / sa).collect())
}

/// One reverse step from level `t` to `t - 1` (the clean end when `t = 0`):
///
/// `sqrt(ab_prev) x0 + sqrt(1 - ab_prev - sigma^2) (x_t - sqrt(ab_t) x0) / sqrt(1 - ab_t) + sigma noise`
pub fn reverse_step(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    x0_est: &[f64],
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_dim(x_t.len(), x0_est.len())?;
    check_dim(x_t.len(), noise.len())?;
    if x_t.iter().chain(x0_est).chain(noise).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("reverse step input at t={t}")));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar_prev(t)?;
    let sigma = schedule.sigma(t)?;
    let dir = schedule.direction_coefficient(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let sa_prev = ab_prev.sqrt();
    Ok(x_t
        .iter()
        .zip(x0_est)
        .zip(noise)
        .map(|((x, x0), n)| sa_prev * x0 + dir * (x - sa * x0) / sn + sigma * n)
        .collect())
}

/// Forward transition from the level below `t` back up to `t`:
/// `sqrt(alpha_t) x_prev + sqrt(1 - alpha_t) noise`.
pub fn forward_step(schedule: &NoiseSchedule, x_prev: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(x_prev.len(), noise.len())?;
    let a = schedule.step_alpha(t)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x_prev.iter().zip(noise).map(|(x, n)| sa * x + sn * n).collect())
}

/// Largest difference between the reverse step computed from the implicit
/// prediction and the same step written directly in terms of `eps`:
/// `sqrt(ab_prev) x0 + sqrt(1 - ab_prev - sigma^2) eps + sigma noise`.
/// Differences are scaled by `max(1, |value|)`.
pub fn step_identity_deviation(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    eps_pred: &[f64],
    noise: &[f64],
) -> Result<f64> {
    let x0 = implicit_prediction(schedule, x_t, t, eps_pred)?;
    let via_x0 = reverse_step(schedule, x_t, t, &x0, noise)?;
    let sa_prev = schedule.alpha_bar_prev(t)?.sqrt();
    let dir = schedule.direction_coefficient(t)?;
    let sigma = schedule.sigma(t)?;
    Ok(via_x0
        .iter()
        .zip(&x0)
        .zip(eps_pred.iter().zip(noise))
        .map(|((v, x0), (e, n))| {
            let direct = sa_prev * x0 + dir * e + sigma * n;
            (v - direct).abs() / direct.abs().max(1.0)
        })
        .fold(0.0, f64::max))
}

/// A latent in flight: current vector, its level, and its private generator.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub x: Vec<f64>,
    pub t: usize,
    pub rng: ChaCha8Rng,
}

impl LatentState {
    /// Draws `x_T ~ N(0, I)` at the top level of `schedule`.
    pub fn initial(schedule: &NoiseSchedule, dim: usize, seed: StreamSeed) -> Self {
        let mut rng = seed.rng();
        let x = standard_normal(&mut rng, dim);
        Self {
            x,
            t: schedule.num_steps() - 1,
            rng,
        }
    }

    pub fn draw_noise(&mut self) -> Vec<f64> {
        standard_normal(&mut self.rng, self.x.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub x_t: Vec<f64>,
    pub x0_pred: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// The starting latent `x_T`.
    pub initial: Vec<f64>,
    /// One record per level, `t` strictly decreasing to 0; empty unless recording.
    pub records: Vec<TrajectoryRecord>,
    /// The model's own (unsteered) implicit prediction at the last step.
    pub last_prediction: Vec<f64>,
    /// The clean output.
    pub sample: Vec<f64>,
    /// Worst step-identity deviation seen while recording.
    pub identity_deviation: Option<f64>,
}

impl Trajectory {
    /// CSV with columns `t, x_0.., x0_0..`, one row per recorded step.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let d = self.sample.len();
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|i| format!("x_{i}")));
        header.extend((0..d).map(|i| format!("x0_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.records {
            let mut row = vec![r.t.to_string()];
            row.extend(r.x_t.iter().chain(&r.x0_pred).map(|&v| fmt_f64(v)));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn check_latent(x: &[f64], t: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLatent { t });
    }
    Ok(())
}

/// Plain reverse chain from `x_T ~ N(0, I)` down to the clean end.
pub fn sample_unconditional(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    seed: StreamSeed,
    record: bool,
) -> Result<Trajectory> {
    let mut state = LatentState::initial(schedule, model.dim(), seed);
    let initial = state.x.clone();
    let mut records = Vec::new();
    let mut deviation: Option<f64> = None;
    let mut last_prediction = Vec::new();

    for t in (0..schedule.num_steps()).rev() {
        state.t = t;
        let eps = model.predict_epsilon(&state.x, t)?;
        let x0 = implicit_prediction(schedule, &state.x, t, &eps)?;
        let noise = state.draw_noise();
        let next = reverse_step(schedule, &state.x, t, &x0, &noise)?;
        if record {
            let dev = step_identity_deviation(schedule, &state.x, t, &eps, &noise)?;
            deviation = Some(deviation.map_or(dev, |d| d.max(dev)));
            records.push(TrajectoryRecord {
                t,
                x_t: std::mem::take(&mut state.x),
                x0_pred: x0.clone(),
            });
        }
        check_latent(&next, t)?;
        state.x = next;
        last_prediction = x0;
    }

    Ok(Trajectory {
        initial,
        records,
        last_prediction,
        sample: state.x,
        identity_deviation: deviation,
    })
}

/// `n` independent unconditional samples, trajectory `i` on stream `i`.
pub fn sample_unconditional_batch(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    seed: u64,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .map(|i| sample_unconditional(model, schedule, StreamSeed::new(seed, i as u64), false).map(|tr| tr.sample))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{AnalyticScore, GaussianMixturePrior};
    use approx::assert_abs_diff_eq;

    #[test]
    fn q_sample_arithmetic() {
        // One step with beta = 0.75 gives alpha_bar_0 = 0.25.
        let s = NoiseSchedule::linear(2, 0.75, 0.75, 1.0).unwrap();
        let x = q_sample(&s, &[2.0], 0, &[1.0]).unwrap();
        assert_abs_diff_eq!(x[0], 1.86603, epsilon = 1e-5);
        let zero = q_sample(&s, &[2.0], 0, &[0.0]).unwrap();
        assert_abs_diff_eq!(zero[0], 1.0, epsilon = 1e-15);

        let back = implicit_prediction(&s, &[1.86603], 0, &[1.0]).unwrap();
        assert_abs_diff_eq!(back[0], 2.0, epsilon = 1e-5);
    }

    #[test]
    fn degenerate_alpha_bar_is_rejected() {
        let s = NoiseSchedule::linear(400, 0.5, 0.5, 1.0).unwrap();
        assert!(s.alpha_bars()[399] < ALPHA_BAR_FLOOR);
        assert!(matches!(
            implicit_prediction(&s, &[0.0], 399, &[0.0]),
            Err(Error::DegenerateAlphaBar { t: 399, .. })
        ));
    }

    #[test]
    fn last_step_lands_on_the_estimate() {
        for eta in [0.0, 1.0] {
            let s = NoiseSchedule::ddpm_scaled(20, eta).unwrap();
            let out = reverse_step(&s, &[0.3, -0.2], 0, &[1.5, 2.5], &[9.0, -9.0]).unwrap();
            assert_eq!(out, vec![1.5, 2.5]);
        }
    }

    #[test]
    fn reverse_step_rejects_bad_input() {
        let s = NoiseSchedule::ddpm_scaled(20, 1.0).unwrap();
        assert!(reverse_step(&s, &[0.0, 1.0], 3, &[0.0], &[0.0, 0.0]).is_err());
        assert!(reverse_step(&s, &[f64::NAN], 3, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn deterministic_substitution_identity() {
        let s = NoiseSchedule::ddpm_scaled(50, 0.0).unwrap();
        let x_t = [0.4, -1.3, 2.2];
        let eps = [0.1, 0.7, -0.5];
        for t in 0..50 {
            let x0 = implicit_prediction(&s, &x_t, t, &eps).unwrap();
            let out = reverse_step(&s, &x_t, t, &x0, &[0.0; 3]).unwrap();
            let ab_prev = s.alpha_bar_prev(t).unwrap();
            for i in 0..3 {
                let direct = ab_prev.sqrt() * x0[i] + (1.0 - ab_prev).sqrt() * eps[i];
                assert!((out[i] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let s = NoiseSchedule::ddpm_scaled(30, 1.0).unwrap();
        let model = AnalyticScore::new(GaussianMixturePrior::standard_normal(2).unwrap(), &s).unwrap();
        let a = sample_unconditional(&model, &s, StreamSeed::new(5, 2), true).unwrap();
        let b = sample_unconditional(&model, &s, StreamSeed::new(5, 2), true).unwrap();
        assert_eq!(a, b);
        let c = sample_unconditional(&model, &s, StreamSeed::new(5, 3), true).unwrap();
        assert_ne!(a.sample, c.sample);

        let ts: Vec<usize> = a.records.iter().map(|r| r.t).collect();
        assert_eq!(ts, (0..30).rev().collect::<Vec<_>>());
        assert!(a.identity_deviation.unwrap() <= 1e-12);
    }

    #[test]
    fn trajectory_csv_layout() {
        let s = NoiseSchedule::ddpm_scaled(4, 1.0).unwrap();
        let model = AnalyticScore::new(GaussianMixturePrior::standard_normal(2).unwrap(), &s).unwrap();
        let tr = sample_unconditional(&model, &s, 1.into(), true).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x_0,x_1,x0_0,x0_1");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("0,"));
    }

    proptest::proptest! {
        #[test]
        fn implicit_prediction_inverts_q_sample(
            t in 0usize..100,
            x0 in proptest::collection::vec(-5.0f64..5.0, 3),
            noise in proptest::collection::vec(-4.0f64..4.0, 3),
        ) {
            let s = NoiseSchedule::ddpm_scaled(100, 1.0).unwrap();
            let x_t = q_sample(&s, &x0, t, &noise).unwrap();
            let back = implicit_prediction(&s, &x_t, t, &noise).unwrap();
            for i in 0..3 {
                proptest::prop_assert!((back[i] - x0[i]).abs() <= 1e-10);
            }
        }
    }
}
