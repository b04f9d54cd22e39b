use super::energy::{Condition, EnergyFunction};
use crate::error::{Error, Result};
use crate::operators::LinearDegradation;
use crate::schedule::NoiseSchedule;

/// Steering strength as a function of the level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KSchedule {
    Constant(f64),
    /// `K sqrt(1 - ab_t)`: strong early, fading towards the clean end.
    SqrtOneMinusAlphaBar(f64),
}

impl KSchedule {
    pub fn scale(&self) -> f64 {
        match *self {
            Self::Constant(k) | Self::SqrtOneMinusAlphaBar(k) => k,
        }
    }

    pub fn with_scale(&self, k: f64) -> Self {
        match self {
            Self::Constant(_) => Self::Constant(k),
            Self::SqrtOneMinusAlphaBar(_) => Self::SqrtOneMinusAlphaBar(k),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Constant(_) => "constant",
            Self::SqrtOneMinusAlphaBar(_) => "sqrt",
        }
    }

    pub fn from_name(name: &str, k: f64) -> Result<Self> {
        match name {
            "constant" => Ok(Self::Constant(k)),
            "sqrt" => Ok(Self::SqrtOneMinusAlphaBar(k)),
            other => Err(Error::InvalidParameter(format!("unknown k schedule '{other}'"))),
        }
    }

    pub fn value(&self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        Ok(match *self {
            Self::Constant(k) => {
                schedule.check_t(t)?;
                k
            }
            Self::SqrtOneMinusAlphaBar(k) => k * (1.0 - schedule.alpha_bar(t)?).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteeringMode {
    /// Gradient step on the clean estimate.
    Implicit,
    /// Component replacement on the noisy latent against a noised condition.
    XtSpace,
    /// Component replacement on the clean estimate.
    LinearReplacement,
}

impl SteeringMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Implicit => "implicit",
            Self::XtSpace => "xt-space",
            Self::LinearReplacement => "linear-replacement",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "implicit" => Ok(Self::Implicit),
            "xt-space" => Ok(Self::XtSpace),
            "linear-replacement" => Ok(Self::LinearReplacement),
            other => Err(Error::InvalidParameter(format!("unknown steering mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SteeringPlan {
    pub energy: EnergyFunction,
    pub condition: Condition,
    pub k_schedule: KSchedule,
    pub inner_iterations: usize,
    pub mode: SteeringMode,
}

impl SteeringPlan {
    pub fn new(
        energy: EnergyFunction,
        condition: Condition,
        k_schedule: KSchedule,
        inner_iterations: usize,
        mode: SteeringMode,
    ) -> Result<Self> {
        let plan = Self {
            energy,
            condition,
            k_schedule,
            inner_iterations,
            mode,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Replacement plan for a linear task: quadratic energy on `op`.
    pub fn linear(op: LinearDegradation, c: Vec<f64>, k: KSchedule, inner_iterations: usize, mode: SteeringMode) -> Result<Self> {
        Self::new(EnergyFunction::Quadratic(op), Condition::Vector(c), k, inner_iterations, mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_iterations == 0 {
            return Err(Error::InvalidParameter("inner iterations must be at least 1".into()));
        }
        let k = self.k_schedule.scale();
        if !k.is_finite() || k < 0.0 {
            return Err(Error::InvalidParameter(format!("steering scale must be finite and >= 0, got {k}")));
        }
        self.energy.validate(&self.condition)?;
        if self.mode != SteeringMode::Implicit {
            self.linear_parts()?;
        }
        Ok(())
    }

    /// Steering switched off entirely.
    pub fn is_disabled(&self) -> bool {
        self.k_schedule.scale() == 0.0
    }

    /// Number of passes per level actually run: a disabled plan never resamples.
    pub fn effective_iterations(&self) -> usize {
        if self.is_disabled() {
            1
        } else {
            self.inner_iterations
        }
    }

    pub(crate) fn linear_parts(&self) -> Result<(&LinearDegradation, &[f64])> {
        match (&self.energy, &self.condition) {
            (EnergyFunction::Quadratic(op), Condition::Vector(c)) => Ok((op, c)),
            _ => Err(Error::InvalidParameter(format!(
                "{} mode needs a quadratic energy with a vector condition",
                self.mode.name()
            ))),
        }
    }
}

pub fn k_value(plan: &SteeringPlan, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    plan.k_schedule.value(schedule, t)
}
