//! Exact references for Gaussian mixtures: samplers, conditionals under a
//! coordinate-select observation, and a two-sample distance.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::operators::LinearDegradation;
use crate::sampler::{standard_normal, StreamSeed};
use crate::score::{log_sum_exp, Gaussian, GaussianMixturePrior};

/// Smallest admissible Cholesky pivot of an observed block.
pub const SINGULAR_PIVOT: f64 = 1e-10;

/// Pairs of exact-sampler runs used to calibrate a distance threshold.
pub const CALIBRATION_PAIRS: usize = 50;

/// Quantile of the calibration statistics used as the threshold.
pub const CALIBRATION_QUANTILE: f64 = 0.99;

/// A distribution that can be sampled exactly.
pub trait ExactSample {
    fn dim(&self) -> usize;

    fn draw(&self, rng: &mut impl Rng) -> Vec<f64>;
}

fn choose(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // rounding left the cumulative sum just below 1
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

impl ExactSample for GaussianMixturePrior {
    fn dim(&self) -> usize {
        GaussianMixturePrior::dim(self)
    }

    fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let k = choose(self.weights(), rng);
        let z = DVector::from_vec(standard_normal(rng, GaussianMixturePrior::dim(self)));
        self.component(k).transform(&z).as_slice().to_vec()
    }
}

/// Mixture over the unobserved coordinates given the observed ones.
#[derive(Debug, Clone)]
pub struct ConditionalMixture {
    dim: usize,
    observed: Vec<usize>,
    unobserved: Vec<usize>,
    condition: Vec<f64>,
    weights: Vec<f64>,
    components: Vec<Gaussian>,
    covariances: Vec<DMatrix<f64>>,
}

impl ConditionalMixture {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn unobserved(&self) -> &[usize] {
        &self.unobserved
    }

    pub fn condition(&self) -> &[f64] {
        &self.condition
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.components[k].mean().as_slice()
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.covariances[k]
    }

    /// Full-space vector with the observed coordinates set to the condition.
    pub fn embed(&self, unobserved: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.unobserved.len(), unobserved.len())?;
        let mut x = vec![0.0; self.dim];
        for (&i, &v) in self.observed.iter().zip(&self.condition) {
            x[i] = v;
        }
        for (&i, &v) in self.unobserved.iter().zip(unobserved) {
            x[i] = v;
        }
        Ok(x)
    }

    /// Restriction of a full-space vector to the unobserved coordinates.
    pub fn restrict(&self, x: &[f64]) -> Vec<f64> {
        self.unobserved.iter().map(|&i| x[i]).collect()
    }
}

impl ExactSample for ConditionalMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let k = choose(&self.weights, rng);
        let z = DVector::from_vec(standard_normal(rng, self.unobserved.len()));
        let u = self.components[k].transform(&z);
        self.embed(u.as_slice()).expect("sized by construction")
    }
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Exact conditional of `prior` given `x[indices] = c` for a coordinate-select
/// observation.
pub fn condition_mixture(
    prior: &GaussianMixturePrior,
    constraint: &LinearDegradation,
    c: &[f64],
) -> Result<ConditionalMixture> {
    let LinearDegradation::CoordinateSelect { dim, indices } = constraint else {
        return Err(Error::InvalidParameter(format!(
            "conditioning needs a coordinate-select constraint, got {}",
            constraint.kind()
        )));
    };
    check_dim(prior.dim(), *dim)?;
    check_dim(indices.len(), c.len())?;
    if indices.is_empty() || indices.len() >= *dim {
        return Err(Error::InvalidParameter(
            "constraint must observe a strict, nonempty subset of coordinates".into(),
        ));
    }
    let observed = indices.clone();
    let unobserved: Vec<usize> = (0..*dim).filter(|i| !observed.contains(i)).collect();
    let cv = DVector::from_column_slice(c);

    let mut log_weights = Vec::with_capacity(prior.num_components());
    let mut components = Vec::with_capacity(prior.num_components());
    let mut covariances = Vec::with_capacity(prior.num_components());
    for k in 0..prior.num_components() {
        let cov = prior.covariance(k);
        let mean = DVector::from_column_slice(prior.mean(k));
        let s_oo = submatrix(cov, &observed, &observed);
        let s_uo = submatrix(cov, &unobserved, &observed);
        let s_uu = submatrix(cov, &unobserved, &unobserved);
        let mu_o = DVector::from_fn(observed.len(), |i, _| mean[observed[i]]);
        let mu_u = DVector::from_fn(unobserved.len(), |i, _| mean[unobserved[i]]);

        let chol = Cholesky::new(s_oo.clone()).ok_or(Error::SingularObservedBlock { component: k })?;
        let min_pivot = chol.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
        if min_pivot <= SINGULAR_PIVOT {
            return Err(Error::SingularObservedBlock { component: k });
        }

        let gain = chol.solve(&s_uo.transpose()).transpose();
        let cond_mean = &mu_u + &gain * (&cv - &mu_o);
        let mut cond_cov = &s_uu - &gain * s_uo.transpose();
        cond_cov = (&cond_cov + cond_cov.transpose()) * 0.5;

        log_weights.push(prior.weights()[k].ln() + Gaussian::new(mu_o, s_oo)?.log_pdf(&cv));
        components.push(Gaussian::new(cond_mean, cond_cov.clone())?);
        covariances.push(cond_cov);
    }
    let lse = log_sum_exp(&log_weights);
    if !lse.is_finite() {
        return Err(Error::NonFinite("condition has zero density under every component".into()));
    }
    let weights = log_weights.iter().map(|l| (l - lse).exp()).collect();

    Ok(ConditionalMixture {
        dim: *dim,
        observed,
        unobserved,
        condition: c.to_vec(),
        weights,
        components,
        covariances,
    })
}

/// `n` exact draws from one generator stream.
pub fn sample_exact<D: ExactSample + ?Sized>(dist: &D, n: usize, seed: impl Into<StreamSeed>) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    let mut rng = seed.into().rng();
    Ok((0..n).map(|_| dist.draw(&mut rng)).collect())
}

/// Column-major copy so the pair loops read contiguous memory.
fn columns(samples: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    (0..dim).map(|j| samples.iter().map(|s| s[j]).collect()).collect()
}

const LANES: usize = 4;

/// Sum over all `(i, j)` of `|a_i - b_j|`. When `same` is set the sum runs over
/// `i < j` only. The lane split keeps the order fixed, so results are
/// reproducible bit for bit.
fn pair_distance_sum(a: &[Vec<f64>], b: &[Vec<f64>], same: bool) -> f64 {
    let (na, nb) = (a[0].len(), b[0].len());
    let mut total = 0.0;
    let mut row = vec![0.0; nb];
    for i in 0..na {
        let start = if same { i + 1 } else { 0 };
        let len = nb - start;
        let row = &mut row[..len];
        row.fill(0.0);
        for (ca, cb) in a.iter().zip(b) {
            let ai = ca[i];
            for (r, bj) in row.iter_mut().zip(&cb[start..]) {
                let d = ai - bj;
                *r += d * d;
            }
        }
        let mut lanes = [0.0; LANES];
        let chunks = row.chunks_exact(LANES);
        let rest = chunks.remainder();
        for chunk in chunks {
            for (l, v) in lanes.iter_mut().zip(chunk) {
                *l += v.sqrt();
            }
        }
        let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        for v in rest {
            acc += v.sqrt();
        }
        total += acc;
    }
    total
}

/// `2 E|A - B| - E|A - A'| - E|B - B'|` with expectations over the empirical
/// distributions (all ordered pairs, diagonal included).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("energy distance needs nonempty sample sets".into()));
    }
    let dim = a[0].len();
    for s in a.iter().chain(b) {
        check_dim(dim, s.len())?;
    }
    // the cross and self sums run in different orders, so catch this case
    // before rounding can make it differ from zero
    if dim == 0 || a == b {
        return Ok(0.0);
    }
    let (ca, cb) = (columns(a, dim), columns(b, dim));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ab = pair_distance_sum(&ca, &cb, false) / (na * nb);
    let aa = 2.0 * pair_distance_sum(&ca, &ca, true) / (na * na);
    let bb = 2.0 * pair_distance_sum(&cb, &cb, true) / (nb * nb);
    Ok(2.0 * ab - aa - bb)
}

/// Linear-interpolated quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParameter("quantile of an empty set or q outside [0, 1]".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub threshold: f64,
    pub statistics: Vec<f64>,
}

/// Threshold from the null distribution of the statistic: `pairs` pairs of
/// sample sets, `draw(stream)` producing the set for one stream.
pub fn calibrate_threshold(
    pairs: usize,
    q: f64,
    mut draw: impl FnMut(u64) -> Result<Vec<Vec<f64>>>,
) -> Result<Calibration> {
    let mut statistics = Vec::with_capacity(pairs);
    for p in 0..pairs as u64 {
        let a = draw(2 * p)?;
        let b = draw(2 * p + 1)?;
        statistics.push(energy_distance(&a, &b)?);
    }
    Ok(Calibration {
        threshold: quantile(&statistics, q)?,
        statistics,
    })
}

/// 99th percentile of the energy distance over 50 pairs of independent exact
/// runs of `n` samples each.
pub fn self_calibrated_threshold<D: ExactSample + ?Sized>(dist: &D, n: usize, seed: u64) -> Result<Calibration> {
    calibrate_threshold(CALIBRATION_PAIRS, CALIBRATION_QUANTILE, |stream| {
        sample_exact(dist, n, StreamSeed::new(seed, stream))
    })
}

/// Exact log-density of the clean prior.
pub fn prior_logdensity(prior: &GaussianMixturePrior, x0: &[f64]) -> Result<f64> {
    prior.log_density(x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn correlated(rho: f64) -> GaussianMixturePrior {
        GaussianMixturePrior::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, rho, rho, 1.0]]).unwrap()
    }

    #[test]
    fn textbook_conditioning() {
        let op = LinearDegradation::coordinate_select(2, vec![0]).unwrap();
        let cm = condition_mixture(&correlated(0.6), &op, &[1.5]).unwrap();
        assert_abs_diff_eq!(cm.mean(0)[0], 0.9, epsilon = 1e-14);
        assert_abs_diff_eq!(cm.covariance(0)[(0, 0)], 0.64, epsilon = 1e-14);
        assert_eq!(cm.weights(), &[1.0]);
        assert_eq!(cm.embed(&[2.0]).unwrap(), vec![1.5, 2.0]);
    }

    #[test]
    fn diagonal_component_is_unchanged() {
        let prior = GaussianMixturePrior::new(
            vec![1.0],
            vec![vec![1.0, -2.0, 0.5]],
            vec![vec![2.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 3.0]],
        )
        .unwrap();
        let op = LinearDegradation::coordinate_select(3, vec![1]).unwrap();
        let cm = condition_mixture(&prior, &op, &[7.0]).unwrap();
        assert_eq!(cm.unobserved(), &[0, 2]);
        assert_eq!(cm.mean(0), &[1.0, 0.5]);
        assert_eq!(cm.covariance(0)[(0, 0)], 2.0);
        assert_eq!(cm.covariance(0)[(1, 1)], 3.0);
        for s in sample_exact(&cm, 20, 4).unwrap() {
            assert_eq!(s[1], 7.0);
        }
    }

    #[test]
    fn conditioning_errors() {
        let prior = correlated(0.2);
        let all = LinearDegradation::coordinate_select(2, vec![0, 1]).unwrap();
        assert!(condition_mixture(&prior, &all, &[0.0, 0.0]).is_err());
        let none = LinearDegradation::coordinate_select(2, vec![]).unwrap();
        assert!(condition_mixture(&prior, &none, &[]).is_err());
        let mask = LinearDegradation::mask(crate::operators::ImageShape::vector(2), vec![true, false]).unwrap();
        assert!(condition_mixture(&prior, &mask, &[0.0]).is_err());

        let tiny = GaussianMixturePrior::new(
            vec![1.0],
            vec![vec![0.0, 0.0]],
            vec![vec![1e-11, 0.0, 0.0, 1.0]],
        )
        .unwrap();
        let op = LinearDegradation::coordinate_select(2, vec![0]).unwrap();
        assert!(matches!(
            condition_mixture(&tiny, &op, &[0.0]),
            Err(Error::SingularObservedBlock { component: 0 })
        ));
    }

    #[test]
    fn energy_distance_basics() {
        let a = vec![vec![0.0], vec![1.0], vec![3.0]];
        let b = vec![vec![0.5], vec![2.0]];
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        // 2*(0.5+2+0.5+1+2.5+1)/6 - (2*(1+3+2))/9 - (2*1.5)/4
        let expect = 2.0 * 7.5 / 6.0 - 12.0 / 9.0 - 3.0 / 4.0;
        assert_abs_diff_eq!(energy_distance(&a, &b).unwrap(), expect, epsilon = 1e-14);
        assert_abs_diff_eq!(energy_distance(&b, &a).unwrap(), expect, epsilon = 1e-14);
        assert!(energy_distance(&a, &[vec![0.0, 1.0]]).is_err());
        assert!(energy_distance(&[], &a).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 4.0);
        assert_abs_diff_eq!(quantile(&v, 0.5).unwrap(), 2.5, epsilon = 1e-15);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn log_density_examples() {
        let prior = GaussianMixturePrior::standard_normal(2).unwrap();
        assert_abs_diff_eq!(prior_logdensity(&prior, &[0.0, 0.0]).unwrap(), -1.837877, epsilon = 1e-6);
        assert!(prior_logdensity(&prior, &[0.0, 0.0]).unwrap() > prior_logdensity(&prior, &[10.0, 0.0]).unwrap());
        assert!(prior_logdensity(&prior, &[0.0]).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let prior = correlated(0.3);
        assert_eq!(sample_exact(&prior, 5, 1).unwrap(), sample_exact(&prior, 5, 1).unwrap());
        assert_ne!(sample_exact(&prior, 5, 1).unwrap(), sample_exact(&prior, 5, 2).unwrap());
        assert!(sample_exact(&prior, 0, 1).is_err());
    }
}
