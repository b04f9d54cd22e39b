//! Steering the reverse chain through the clean-sample estimate.
//!
//! At every level the model's implicit prediction is modified (a gradient
//! step on an energy, or replacement of its component along a degradation)
//! and the reverse step is taken from the modified estimate. With more than
//! one inner iteration the result is pushed back up to the current level and
//! the cycle repeats before advancing.

mod energy;
mod plan;

use std::io::Write;

pub use energy::{Condition, EnergyFunction};
pub use plan::{k_value, KSchedule, SteeringMode, SteeringPlan};

use crate::error::{check_dim, Error, Result};
use crate::io::fmt_f64;
use crate::operators::LinearDegradation;
use crate::sampler::{
    forward_step, implicit_prediction, noise_to_level, reverse_step, step_identity_deviation, standard_normal,
    LatentState, StreamSeed, Trajectory, TrajectoryRecord,
};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;

/// Latents with any entry above this magnitude count as diverged.
pub const BLOW_UP_LIMIT: f64 = 1e6;

/// `x0_est - k grad V(x0_est)`.
pub fn isc_gradient_step(x0_est: &[f64], c: &Condition, energy: &EnergyFunction, k: f64) -> Result<Vec<f64>> {
    if k == 0.0 {
        return Ok(x0_est.to_vec());
    }
    let grad = energy.gradient(x0_est, c)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("energy gradient".into()));
    }
    Ok(x0_est.iter().zip(&grad).map(|(x, g)| x - k * g).collect())
}

/// `x0_est + k (lift(c) - P x0_est)`, written so that `k = 1` copies the
/// condition into selected coordinates bit-exactly.
pub fn isc_linear_step(x0_est: &[f64], c: &[f64], op: &LinearDegradation, k: f64) -> Result<Vec<f64>> {
    check_dim(op.input_len(), x0_est.len())?;
    check_dim(op.output_len(), c.len())?;
    if k == 0.0 {
        return Ok(x0_est.to_vec());
    }
    let proj = op.projector(x0_est)?;
    let lift = op.right_inverse(c)?;
    Ok(x0_est
        .iter()
        .zip(&proj)
        .zip(&lift)
        .map(|((x, p), l)| (x - k * p) + k * l)
        .collect())
}

/// One row of the per-pass steering trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    /// Inner pass, counting down to 1.
    pub n: usize,
    /// Energy of the unsteered estimate.
    pub energy: f64,
    /// Condition residual after steering.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeredTrajectory {
    pub trajectory: Trajectory,
    pub trace: Vec<TraceRow>,
}

impl SteeredTrajectory {
    pub fn sample(&self) -> &[f64] {
        &self.trajectory.sample
    }

    /// Residual after the last steering pass.
    pub fn final_residual(&self) -> Option<f64> {
        self.trace.last().map(|r| r.residual)
    }

    pub fn write_trace_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "t,n,energy,residual")?;
        for r in &self.trace {
            writeln!(out, "{},{},{},{}", r.t, r.n, fmt_f64(r.energy), fmt_f64(r.residual))?;
        }
        Ok(())
    }
}

fn check_blow_up(x: &[f64], t: usize, n: usize, what: &str) -> Result<()> {
    if let Some(v) = x.iter().find(|v| !v.is_finite() || v.abs() > BLOW_UP_LIMIT) {
        return Err(Error::SteeringBlowUp {
            t,
            n,
            reason: format!("{what} reached {v}"),
        });
    }
    Ok(())
}

fn blow_up_from(e: Error, t: usize, n: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::SteeringBlowUp {
            t,
            n,
            reason: format!("non-finite {what}"),
        },
        other => other,
    }
}

/// Steered sampling. `XtSpace` plans are delegated to
/// [`xt_space_steered_sample`]; the other modes steer the clean estimate.
pub fn steered_sample(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    plan: &SteeringPlan,
    seed: StreamSeed,
    record: bool,
) -> Result<SteeredTrajectory> {
    plan.validate()?;
    if plan.mode == SteeringMode::XtSpace {
        return xt_space_steered_sample(model, schedule, plan, seed, record);
    }
    if let Some(d) = plan.energy.input_len() {
        check_dim(model.dim(), d)?;
    }

    let mut state = LatentState::initial(schedule, model.dim(), seed);
    let initial = state.x.clone();
    let passes = plan.effective_iterations();
    let mut records = Vec::new();
    let mut trace = Vec::with_capacity(schedule.num_steps() * passes);
    let mut deviation: Option<f64> = None;
    let mut last_prediction = Vec::new();

    for t in (0..schedule.num_steps()).rev() {
        state.t = t;
        let k = k_value(plan, schedule, t)?;
        for n in (1..=passes).rev() {
            let eps = model.predict_epsilon(&state.x, t)?;
            let x0 = implicit_prediction(schedule, &state.x, t, &eps)?;
            let energy = plan.energy.value(&x0, &plan.condition)?;
            let feas = match plan.mode {
                SteeringMode::Implicit => isc_gradient_step(&x0, &plan.condition, &plan.energy, k),
                _ => {
                    let (op, c) = plan.linear_parts()?;
                    isc_linear_step(&x0, c, op, k)
                }
            }
            .map_err(|e| blow_up_from(e, t, n))?;
            check_blow_up(&feas, t, n, "steered estimate")?;
            trace.push(TraceRow {
                t,
                n,
                energy,
                residual: plan.energy.residual(&feas, &plan.condition)?,
            });

            let noise = state.draw_noise();
            let prev = reverse_step(schedule, &state.x, t, &feas, &noise)?;
            check_blow_up(&prev, t, n, "latent")?;
            if n > 1 {
                let renoise = state.draw_noise();
                state.x = forward_step(schedule, &prev, t, &renoise)?;
                check_blow_up(&state.x, t, n, "re-noised latent")?;
                continue;
            }
            if record {
                let dev = step_identity_deviation(schedule, &state.x, t, &eps, &noise)?;
                deviation = Some(deviation.map_or(dev, |d| d.max(dev)));
                records.push(TrajectoryRecord {
                    t,
                    x_t: std::mem::take(&mut state.x),
                    x0_pred: x0.clone(),
                });
            }
            state.x = prev;
            last_prediction = x0;
        }
    }

    Ok(SteeredTrajectory {
        trajectory: Trajectory {
            initial,
            records,
            last_prediction,
            sample: state.x,
            identity_deviation: deviation,
        },
        trace,
    })
}

/// Baseline that enforces the condition on the noisy latent: after each
/// unsteered reverse step, the component of `x_{t-1}` along the degradation
/// is replaced by that of `lift(c)` noised to level `t - 1` with fresh noise.
pub fn xt_space_steered_sample(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    plan: &SteeringPlan,
    seed: StreamSeed,
    record: bool,
) -> Result<SteeredTrajectory> {
    plan.validate()?;
    let (op, c) = plan.linear_parts()?;
    check_dim(model.dim(), op.input_len())?;
    let lifted = op.right_inverse(c)?;

    let mut state = LatentState::initial(schedule, model.dim(), seed);
    let initial = state.x.clone();
    let passes = plan.effective_iterations();
    let steering = !plan.is_disabled();
    let mut records = Vec::new();
    let mut trace = Vec::with_capacity(schedule.num_steps() * passes);
    let mut deviation: Option<f64> = None;
    let mut last_prediction = Vec::new();

    for t in (0..schedule.num_steps()).rev() {
        state.t = t;
        let k = k_value(plan, schedule, t)?;
        let ab_prev = schedule.alpha_bar_prev(t)?;
        for n in (1..=passes).rev() {
            let eps = model.predict_epsilon(&state.x, t)?;
            let x0 = implicit_prediction(schedule, &state.x, t, &eps)?;
            let energy = plan.energy.value(&x0, &plan.condition)?;
            let noise = state.draw_noise();
            let mut prev = reverse_step(schedule, &state.x, t, &x0, &noise)?;
            let mut residual = plan.energy.residual(&prev, &plan.condition)?;
            if steering {
                let cond_noise = standard_normal(&mut state.rng, lifted.len());
                let noised = op.apply(&noise_to_level(ab_prev, &lifted, &cond_noise))?;
                prev = isc_linear_step(&prev, &noised, op, k)?;
                let dx = op.apply(&prev)?;
                residual = dx.iter().zip(&noised).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / noised.len().max(1) as f64;
            }
            check_blow_up(&prev, t, n, "latent")?;
            trace.push(TraceRow { t, n, energy, residual });

            if n > 1 {
                let renoise = state.draw_noise();
                state.x = forward_step(schedule, &prev, t, &renoise)?;
                check_blow_up(&state.x, t, n, "re-noised latent")?;
                continue;
            }
            if record {
                let dev = step_identity_deviation(schedule, &state.x, t, &eps, &noise)?;
                deviation = Some(deviation.map_or(dev, |d| d.max(dev)));
                records.push(TrajectoryRecord {
                    t,
                    x_t: std::mem::take(&mut state.x),
                    x0_pred: x0.clone(),
                });
            }
            state.x = prev;
            last_prediction = x0;
        }
    }

    Ok(SteeredTrajectory {
        trajectory: Trajectory {
            initial,
            records,
            last_prediction,
            sample: state.x,
            identity_deviation: deviation,
        },
        trace,
    })
}

/// `n` steered trajectories, trajectory `i` on stream `i` of `seed`.
pub fn steered_sample_batch(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    plan: &SteeringPlan,
    seed: u64,
    n: usize,
) -> Result<Vec<SteeredTrajectory>> {
    (0..n)
        .map(|i| steered_sample(model, schedule, plan, StreamSeed::new(seed, i as u64), false))
        .collect()
}
