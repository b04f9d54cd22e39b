//! Energies over the clean-sample estimate and their exact gradients.

use crate::error::{check_dim, Error, Result};
use crate::operators::LinearDegradation;
use crate::score::{log_sum_exp, GaussianMixturePrior};

/// What an energy is evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// A vector in a degradation's output space.
    Vector(Vec<f64>),
    /// A target distribution over mixture components.
    Label(Vec<f64>),
    /// One condition per term of a weighted sum.
    Many(Vec<Condition>),
}

impl Condition {
    /// Puts all mass on component `k` of `n`.
    pub fn one_hot(k: usize, n: usize) -> Result<Self> {
        if k >= n {
            return Err(Error::InvalidParameter(format!("label {k} out of range for {n} components")));
        }
        let mut y = vec![0.0; n];
        y[k] = 1.0;
        Ok(Self::Label(y))
    }

    fn schema(&self) -> &'static str {
        match self {
            Self::Vector(_) => "vector",
            Self::Label(_) => "label",
            Self::Many(_) => "list",
        }
    }
}

#[derive(Debug, Clone)]
pub enum EnergyFunction {
    /// `||D x - c||^2`.
    Quadratic(LinearDegradation),
    /// `-sum_k y_k ln r_k(x)`, where `r_k` are the prior's component
    /// responsibilities and `y` the target label distribution.
    MixtureLabel(GaussianMixturePrior),
    /// `sum_i w_i V_i(x, c_i)`.
    WeightedSum(Vec<(f64, EnergyFunction)>),
}

fn schema_error(expected: &str, got: &Condition) -> Error {
    Error::InvalidParameter(format!(
        "condition schema mismatch: energy expects a {expected} condition, got a {}",
        got.schema()
    ))
}

impl EnergyFunction {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Quadratic(_) => "quadratic-degradation",
            Self::MixtureLabel(_) => "mixture-label-crossentropy",
            Self::WeightedSum(_) => "weighted-sum",
        }
    }

    pub fn input_len(&self) -> Option<usize> {
        match self {
            Self::Quadratic(op) => Some(op.input_len()),
            Self::MixtureLabel(prior) => Some(prior.dim()),
            Self::WeightedSum(terms) => terms.first().and_then(|(_, e)| e.input_len()),
        }
    }

    /// The degradation behind a quadratic energy.
    pub fn operator(&self) -> Option<&LinearDegradation> {
        match self {
            Self::Quadratic(op) => Some(op),
            _ => None,
        }
    }

    /// Checks that `c` has the shape this energy expects.
    pub fn validate(&self, c: &Condition) -> Result<()> {
        match (self, c) {
            (Self::Quadratic(op), Condition::Vector(v)) => check_dim(op.output_len(), v.len()),
            (Self::Quadratic(_), other) => Err(schema_error("vector", other)),
            (Self::MixtureLabel(prior), Condition::Label(y)) => {
                check_dim(prior.num_components(), y.len())?;
                if y.iter().any(|v| !v.is_finite() || *v < 0.0) || (y.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter("label distribution must be nonnegative and sum to 1".into()));
                }
                Ok(())
            }
            (Self::MixtureLabel(_), other) => Err(schema_error("label", other)),
            (Self::WeightedSum(terms), Condition::Many(cs)) => {
                check_dim(terms.len(), cs.len())?;
                let dim = self.input_len();
                for ((w, e), c) in terms.iter().zip(cs) {
                    if !w.is_finite() || *w < 0.0 {
                        return Err(Error::InvalidParameter(format!("energy weight {w} must be finite and >= 0")));
                    }
                    if e.input_len() != dim {
                        return Err(Error::InvalidParameter("weighted-sum terms disagree on input length".into()));
                    }
                    e.validate(c)?;
                }
                Ok(())
            }
            (Self::WeightedSum(_), other) => Err(schema_error("list", other)),
        }
    }

    pub fn value(&self, x: &[f64], c: &Condition) -> Result<f64> {
        self.validate(c)?;
        self.value_unchecked(x, c)
    }

    fn value_unchecked(&self, x: &[f64], c: &Condition) -> Result<f64> {
        match (self, c) {
            (Self::Quadratic(op), Condition::Vector(c)) => {
                let dx = op.apply(x)?;
                Ok(dx.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
            }
            (Self::MixtureLabel(prior), Condition::Label(y)) => {
                let (logs, _) = prior.component_terms(x)?;
                // -ln r_k = (m - l_k) + ln(1 + sum over non-top terms), exact near r_k = 1
                let top = (0..logs.len()).fold(0, |best, j| if logs[j] > logs[best] { j } else { best });
                let m = logs[top];
                let rest: f64 = logs.iter().enumerate().filter(|(j, _)| *j != top).map(|(_, l)| (l - m).exp()).sum();
                let tail = rest.ln_1p();
                Ok(y.iter()
                    .zip(&logs)
                    .filter(|(yk, _)| **yk > 0.0)
                    .map(|(yk, l)| yk * ((m - l) + tail))
                    .sum())
            }
            (Self::WeightedSum(terms), Condition::Many(cs)) => {
                let mut total = 0.0;
                for ((w, e), c) in terms.iter().zip(cs) {
                    total += w * e.value_unchecked(x, c)?;
                }
                Ok(total)
            }
            _ => unreachable!("validated"),
        }
    }

    /// Exact gradient of [`value`](Self::value) with respect to `x`.
    pub fn gradient(&self, x: &[f64], c: &Condition) -> Result<Vec<f64>> {
        self.validate(c)?;
        self.gradient_unchecked(x, c)
    }

    fn gradient_unchecked(&self, x: &[f64], c: &Condition) -> Result<Vec<f64>> {
        match (self, c) {
            (Self::Quadratic(op), Condition::Vector(c)) => {
                let r: Vec<f64> = op.apply(x)?.iter().zip(c).map(|(a, b)| 2.0 * (a - b)).collect();
                op.adjoint(&r)
            }
            (Self::MixtureLabel(prior), Condition::Label(y)) => {
                // grad ln r_k = s_k - sum_j r_j s_j with s_k = -Sigma_k^{-1} (x - mu_k)
                let (logs, solves) = prior.component_terms(x)?;
                let lse = log_sum_exp(&logs);
                let mass: f64 = y.iter().sum();
                let mut grad = vec![0.0; x.len()];
                for ((l, sol), yk) in logs.iter().zip(&solves).zip(y) {
                    let coef = yk - mass * (l - lse).exp();
                    if coef != 0.0 {
                        for (g, s) in grad.iter_mut().zip(sol.iter()) {
                            *g += coef * s;
                        }
                    }
                }
                Ok(grad)
            }
            (Self::WeightedSum(terms), Condition::Many(cs)) => {
                let mut grad = vec![0.0; x.len()];
                for ((w, e), c) in terms.iter().zip(cs) {
                    for (g, v) in grad.iter_mut().zip(e.gradient_unchecked(x, c)?) {
                        *g += w * v;
                    }
                }
                Ok(grad)
            }
            _ => unreachable!("validated"),
        }
    }

    /// Condition mismatch on a comparable scale across tasks: the mean squared
    /// residual per condition entry for quadratics, the energy itself for labels.
    pub fn residual(&self, x: &[f64], c: &Condition) -> Result<f64> {
        self.validate(c)?;
        match (self, c) {
            (Self::Quadratic(op), _) => Ok(self.value_unchecked(x, c)? / op.output_len().max(1) as f64),
            (Self::MixtureLabel(_), _) => self.value_unchecked(x, c),
            (Self::WeightedSum(terms), Condition::Many(cs)) => {
                let mut total = 0.0;
                for ((w, e), c) in terms.iter().zip(cs) {
                    total += w * e.residual(x, c)?;
                }
                Ok(total)
            }
            _ => unreachable!("validated"),
        }
    }
}
