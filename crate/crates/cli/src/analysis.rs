//! Experiment kernels shared by the commands and their tests.

use sha2::{Digest, Sha256};
use steered_diffusion::operators::LinearDegradation;
use steered_diffusion::oracle::{prior_logdensity, quantile};
use steered_diffusion::sampler::StreamSeed;
use steered_diffusion::schedule::NoiseSchedule;
use steered_diffusion::score::{AnalyticScore, ScoreModel};
use steered_diffusion::steering::{steered_sample, KSchedule, SteeredTrajectory, SteeringPlan};
use steered_diffusion::{Error, Result};

use crate::setup::guided_plan;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> Result<f64> {
    quantile(v, 0.5)
}

/// `||a - b||^2 / len`.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Peak signal-to-noise ratio for values in `[-1, 1]`.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    10.0 * (4.0 / mse(a, b)).log10()
}

/// Short hex digest of a vector's little-endian bytes.
pub fn vector_hash(v: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-sample numbers from one linear run.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOutcome {
    pub trajectory: SteeredTrajectory,
    /// `||D(x_0) - c||^2 / m` for the final sample.
    pub final_residual: f64,
    /// `||D(x_{0|0}) - c||^2 / m` for the model's own last prediction.
    pub prediction_residual: f64,
}

pub fn linear_outcome(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    plan: &SteeringPlan,
    op: &LinearDegradation,
    c: &[f64],
    seed: StreamSeed,
) -> Result<LinearOutcome> {
    let trajectory = steered_sample(model, schedule, plan, seed, false)?;
    let final_residual = mse(&op.apply(trajectory.sample())?, c);
    let prediction_residual = mse(&op.apply(&trajectory.trajectory.last_prediction)?, c);
    Ok(LinearOutcome { trajectory, final_residual, prediction_residual })
}

/// Summary of label-steered samples on an analytic mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedStats {
    pub samples: Vec<Vec<f64>>,
    /// Fraction whose most responsible component is the target.
    pub target_fraction: f64,
    /// Mean label energy of the final samples.
    pub residual: f64,
    pub logdensities: Vec<f64>,
    pub mean_logdensity: f64,
}

pub fn guided_stats(
    model: &AnalyticScore,
    schedule: &NoiseSchedule,
    target: usize,
    k: KSchedule,
    iterations: usize,
    seed: u64,
    n: usize,
) -> Result<GuidedStats> {
    let prior = model.prior();
    let plan = guided_plan(prior, target, k, iterations).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut samples = Vec::with_capacity(n);
    let (mut hits, mut energy) = (0usize, 0.0);
    let mut logdensities = Vec::with_capacity(n);
    for i in 0..n {
        let tr = steered_sample(model, schedule, &plan, StreamSeed::new(seed, i as u64), false)?;
        let x = tr.trajectory.sample;
        hits += usize::from(prior.most_likely_component(&x)? == target);
        energy += plan.energy.residual(&x, &plan.condition)?;
        logdensities.push(prior_logdensity(prior, &x)?);
        samples.push(x);
    }
    Ok(GuidedStats {
        samples,
        target_fraction: hits as f64 / n as f64,
        residual: energy / n as f64,
        mean_logdensity: mean(&logdensities),
        logdensities,
    })
}

/// The constant-schedule strength whose mean final residual matches
/// `target_residual`, found by bisection on `log K`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedConstant {
    pub k: f64,
    pub stats: GuidedStats,
}

pub const MATCH_BRACKET: (f64, f64) = (1e-3, 10.0);
pub const MATCH_ITERATIONS: usize = 30;

pub fn match_constant_k(
    model: &AnalyticScore,
    schedule: &NoiseSchedule,
    target: usize,
    iterations: usize,
    target_residual: f64,
    seed: u64,
    n: usize,
) -> Result<MatchedConstant> {
    let run = |k: f64| guided_stats(model, schedule, target, KSchedule::Constant(k), iterations, seed, n);
    let (mut lo, mut hi) = (MATCH_BRACKET.0.ln(), MATCH_BRACKET.1.ln());
    let at_lo = run(lo.exp())?;
    let at_hi = run(hi.exp())?;
    // residual falls as K grows
    if !(at_hi.residual <= target_residual && target_residual <= at_lo.residual) {
        return Err(Error::InvalidParameter(format!(
            "residual {target_residual} is outside [{}, {}] spanned by constant K in [{}, {}]",
            at_hi.residual, at_lo.residual, MATCH_BRACKET.0, MATCH_BRACKET.1
        )));
    }
    let mut best = (hi.exp(), at_hi);
    for _ in 0..MATCH_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let stats = run(mid.exp())?;
        if (stats.residual - target_residual).abs() < (best.1.residual - target_residual).abs() {
            best = (mid.exp(), stats.clone());
        }
        if stats.residual > target_residual {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MatchedConstant { k: best.0, stats: best.1 })
}
