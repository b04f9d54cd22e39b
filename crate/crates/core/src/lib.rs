//! Conditional sampling from an unconditional diffusion model by steering
//! its implicit clean-sample prediction at every reverse step.
//!
//! ```
//! use steered_diffusion::{
//!     sampler::StreamSeed,
//!     schedule::NoiseSchedule,
//!     score::{AnalyticScore, GaussianMixturePrior},
//!     steering::{steered_sample, KSchedule, SteeringMode, SteeringPlan},
//!     operators::LinearDegradation,
//! };
//!
//! let schedule = NoiseSchedule::ddpm_scaled(50, 1.0)?;
//! let prior = GaussianMixturePrior::standard_normal(2)?;
//! let model = AnalyticScore::new(prior, &schedule)?;
//! let observe_first = LinearDegradation::coordinate_select(2, vec![0])?;
//! let plan = SteeringPlan::linear(
//!     observe_first,
//!     vec![0.5],
//!     KSchedule::Constant(1.0),
//!     1,
//!     SteeringMode::LinearReplacement,
//! )?;
//! let out = steered_sample(&model, &schedule, &plan, StreamSeed::new(7, 0), false)?;
//! assert_eq!(out.sample()[0], 0.5);
//! # Ok::<(), steered_diffusion::Error>(())
//! ```

pub mod error;
pub mod io;
pub mod operators;
pub mod oracle;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod steering;
pub mod toy;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/score-models.md")]
    mod score_models {}
    #[doc = include_str!("../../../book/src/operators.md")]
    mod operators {}
    #[doc = include_str!("../../../book/src/steering.md")]
    mod steering {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
}
