use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use steered_diffusion::operators::LinearDegradation;
use steered_diffusion::oracle::{
    condition_mixture, energy_distance, prior_logdensity, sample_exact, self_calibrated_threshold,
};
use steered_diffusion::schedule::NoiseSchedule;
use steered_diffusion::score::{mixture_marginal_logdensity, GaussianMixturePrior};

fn benchmark() -> GaussianMixturePrior {
    GaussianMixturePrior::new(
        vec![0.3, 0.7],
        vec![vec![-2.0, -1.0], vec![1.5, 1.0]],
        vec![vec![0.5, 0.3, 0.3, 0.6], vec![0.4, -0.2, -0.2, 0.3]],
    )
    .unwrap()
}

#[test]
fn posterior_weights_match_rejection_sampling() {
    // Keep prior draws whose first coordinate lands within h of c and count
    // which component produced them.
    let prior = benchmark();
    let (c, h) = (0.0, 0.01);
    let op = LinearDegradation::coordinate_select(2, vec![0]).unwrap();
    let cm = condition_mixture(&prior, &op, &[c]).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sds = [0.5f64.sqrt(), 0.4f64.sqrt()];
    let means = [-2.0, 1.5];
    let (mut accepted, mut first) = (0u64, 0u64);
    for _ in 0..10_000_000 {
        let k = usize::from(rng.random::<f64>() >= 0.3);
        let z: f64 = rng.sample(StandardNormal);
        if (means[k] + sds[k] * z - c).abs() < h {
            accepted += 1;
            if k == 0 {
                first += 1;
            }
        }
    }
    let p = first as f64 / accepted as f64;
    let se = (p * (1.0 - p) / accepted as f64).sqrt();
    assert!(accepted > 1000);
    assert!((cm.weights()[0] - p).abs() < 3.0 * se, "{} vs {p} (se {se})", cm.weights()[0]);
}

#[test]
fn conditional_samples_pin_observed_coordinates() {
    let prior = benchmark();
    let op = LinearDegradation::coordinate_select(2, vec![1]).unwrap();
    let cm = condition_mixture(&prior, &op, &[0.4]).unwrap();
    assert!((cm.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for s in sample_exact(&cm, 1000, 3).unwrap() {
        assert_eq!(op.apply(&s).unwrap(), vec![0.4]);
    }
}

#[test]
fn conditioning_commutes_with_permutation() {
    // Relabel coordinates, condition, relabel back: same conditional.
    let prior = GaussianMixturePrior::new(
        vec![0.4, 0.6],
        vec![vec![0.0, 1.0, -1.0], vec![1.0, -0.5, 0.5]],
        vec![
            vec![1.0, 0.3, 0.1, 0.3, 0.8, -0.2, 0.1, -0.2, 0.6],
            vec![0.7, 0.0, 0.2, 0.0, 0.5, 0.1, 0.2, 0.1, 0.9],
        ],
    )
    .unwrap();
    let perm = [2usize, 0, 1]; // new coordinate i is old coordinate perm[i]
    let permute = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
    let means: Vec<Vec<f64>> = (0..2).map(|k| permute(prior.mean(k))).collect();
    let covs: Vec<Vec<f64>> = (0..2)
        .map(|k| {
            let m = prior.covariance(k);
            (0..9).map(|ij| m[(perm[ij / 3], perm[ij % 3])]).collect()
        })
        .collect();
    let relabeled = GaussianMixturePrior::new(prior.weights().to_vec(), means, covs).unwrap();

    // observe old coordinate 0, which is new coordinate 1
    let direct = condition_mixture(&prior, &LinearDegradation::coordinate_select(3, vec![0]).unwrap(), &[0.3]).unwrap();
    let via = condition_mixture(&relabeled, &LinearDegradation::coordinate_select(3, vec![1]).unwrap(), &[0.3]).unwrap();
    // unobserved old (1, 2) are new (2, 0)
    for k in 0..2 {
        assert!((direct.weights()[k] - via.weights()[k]).abs() < 1e-12);
        let (dm, vm) = (direct.mean(k), via.mean(k));
        assert!((dm[0] - vm[1]).abs() < 1e-12 && (dm[1] - vm[0]).abs() < 1e-12);
        let (dc, vc) = (direct.covariance(k), via.covariance(k));
        assert!((dc[(0, 0)] - vc[(1, 1)]).abs() < 1e-12);
        assert!((dc[(1, 1)] - vc[(0, 0)]).abs() < 1e-12);
        assert!((dc[(0, 1)] - vc[(1, 0)]).abs() < 1e-12);
    }
}

#[test]
fn exact_sampler_moments_and_frequencies() {
    let n = 100_000;
    let normal = GaussianMixturePrior::standard_normal(3).unwrap();
    let xs = sample_exact(&normal, n, 4).unwrap();
    for i in 0..3 {
        let m = xs.iter().map(|x| x[i]).sum::<f64>() / n as f64;
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
    }

    // Component frequencies: well-separated means make the label recoverable.
    let far = GaussianMixturePrior::new(
        vec![0.2, 0.5, 0.3],
        vec![vec![-100.0], vec![0.0], vec![100.0]],
        vec![vec![1.0], vec![1.0], vec![1.0]],
    )
    .unwrap();
    let ys = sample_exact(&far, n, 5).unwrap();
    for (k, (&w, centre)) in far.weights().iter().zip([-100.0, 0.0, 100.0]).enumerate() {
        let count = ys.iter().filter(|y| (y[0] - centre).abs() < 50.0).count() as f64;
        let se = (w * (1.0 - w) / n as f64).sqrt();
        assert!((count / n as f64 - w).abs() < 4.0 * se, "component {k}");
    }
}

/// `E|Z|` for `Z ~ N(mu, s^2)` by trapezoidal quadrature.
fn mean_abs_normal(mu: f64, s: f64) -> f64 {
    let (lo, hi, steps) = (mu - 12.0 * s, mu + 12.0 * s, 200_000);
    let h = (hi - lo) / steps as f64;
    let f = |z: f64| z.abs() * (-(z - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    let inner: f64 = (1..steps).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

#[test]
fn energy_distance_of_shifted_normals() {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal)]).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|_| vec![10.0 + rng.sample::<f64, _>(StandardNormal)]).collect();
    let population = 2.0 * mean_abs_normal(10.0, 2f64.sqrt()) - 2.0 * mean_abs_normal(0.0, 2f64.sqrt());
    let got = energy_distance(&a, &b).unwrap();
    assert!((got - population).abs() < 0.01 * population, "{got} vs {population}");
}

#[test]
fn energy_distance_is_symmetric_and_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let (na, nb) = (rng.random_range(1..60), rng.random_range(1..60));
        let dim = 1 + trial % 3;
        let mut draw = |n: usize, shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()).collect()
        };
        let a = draw(na, 0.0);
        let b = draw(nb, 0.3 * trial as f64);
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn two_normal_sets_pass_calibration() {
    let n = 10_000;
    let normal = GaussianMixturePrior::standard_normal(1).unwrap();
    let cal = self_calibrated_threshold(&normal, n, 100).unwrap();
    assert_eq!(cal.statistics.len(), 50);
    let a = sample_exact(&normal, n, 8).unwrap();
    let b = sample_exact(&normal, n, 9).unwrap();
    assert!(energy_distance(&a, &b).unwrap() < cal.threshold);
}

#[test]
fn prior_logdensity_agrees_with_the_clean_marginal() {
    let prior = benchmark();
    let s = NoiseSchedule::ddpm_scaled(100, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let at_zero = mixture_marginal_logdensity(&prior, &s, &x, 0).unwrap();
        let clean = prior_logdensity(&prior, &x).unwrap();
        // level 0 carries a 1e-3 noise variance
        assert!((at_zero - clean).abs() < 0.05 * clean.abs().max(1.0));
    }
    assert!(prior_logdensity(&prior, &[1.5, 1.0]).unwrap() > prior_logdensity(&prior, &[1.5 + 10.0 * 0.4f64.sqrt(), 1.0]).unwrap());
}
