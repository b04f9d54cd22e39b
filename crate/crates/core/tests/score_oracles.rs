//! Analytic score model against independent numerical references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use steered_diffusion::sampler::{implicit_prediction, q_sample, sample_unconditional, sample_unconditional_batch};
use steered_diffusion::schedule::NoiseSchedule;
use steered_diffusion::score::{
    mixture_epsilon, mixture_marginal_logdensity, mixture_posterior_mean, AnalyticScore, GaussianMixturePrior,
    ScoreModel,
};

fn benchmark() -> GaussianMixturePrior {
    GaussianMixturePrior::new(
        vec![0.3, 0.7],
        vec![vec![-2.0, -1.0], vec![1.5, 1.0]],
        vec![vec![0.5, 0.3, 0.3, 0.6], vec![0.4, -0.2, -0.2, 0.3]],
    )
    .unwrap()
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::ddpm_scaled(100, 1.0).unwrap()
}

/// Two-component density written out by hand for 2x2 covariances.
fn direct_density(x: [f64; 2], ab: f64) -> f64 {
    let comps = [
        (0.3, [-2.0, -1.0], [[0.5, 0.3], [0.3, 0.6]]),
        (0.7, [1.5, 1.0], [[0.4, -0.2], [-0.2, 0.3]]),
    ];
    let mut total = 0.0;
    for (w, m, s) in comps {
        let a = ab * s[0][0] + 1.0 - ab;
        let b = ab * s[0][1];
        let d = ab * s[1][1] + 1.0 - ab;
        let det = a * d - b * b;
        let (u, v) = (x[0] - ab.sqrt() * m[0], x[1] - ab.sqrt() * m[1]);
        let quad = (d * u * u - 2.0 * b * u * v + a * v * v) / det;
        total += w * (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
    }
    total
}

#[test]
fn log_density_matches_direct_formula() {
    let s = schedule();
    let prior = benchmark();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let t = rng.random_range(0..100);
        let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let got = mixture_marginal_logdensity(&prior, &s, &x, t).unwrap();
        let want = direct_density(x, s.alpha_bars()[t]).ln();
        assert!((got - want).abs() < 1e-10, "t={t} {got} vs {want}");
    }
}

#[test]
fn epsilon_is_scaled_negative_score() {
    // eps = -sqrt(1 - ab) grad log p, checked against central differences
    let s = schedule();
    let prior = benchmark();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for _ in 0..200 {
        let t = rng.random_range(0..100);
        let x = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let eps = mixture_epsilon(&prior, &s, &x, t).unwrap();
        let scale = (1.0 - s.alpha_bars()[t]).sqrt();
        let fd: Vec<f64> = (0..2)
            .map(|i| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[i] += h;
                m[i] -= h;
                let lp = mixture_marginal_logdensity(&prior, &s, &p, t).unwrap();
                let lm = mixture_marginal_logdensity(&prior, &s, &m, t).unwrap();
                -scale * (lp - lm) / (2.0 * h)
            })
            .collect();
        let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        let err = eps.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err / norm < 1e-5, "t={t} rel err {}", err / norm);
    }
}

#[test]
fn tweedie_consistency() {
    let s = schedule();
    let model = AnalyticScore::new(benchmark(), &s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let t = rng.random_range(0..100);
        let x = vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let eps = model.predict_epsilon(&x, t).unwrap();
        let implied = implicit_prediction(&s, &x, t, &eps).unwrap();
        let direct = mixture_posterior_mean(model.prior(), &s, &x, t).unwrap();
        for i in 0..2 {
            assert!((implied[i] - direct[i]).abs() < 1e-8);
        }
    }
}

#[test]
fn posterior_mean_matches_importance_sampling() {
    // E[x0 | x_t] = E_prior[x0 w(x0)] / E_prior[w(x0)], w the forward likelihood.
    let s = schedule();
    let prior = benchmark();
    let draws = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let comps = [
        (0.3, [-2.0, -1.0], [0.5f64.sqrt(), 0.3 / 0.5f64.sqrt(), (0.6 - 0.09 / 0.5f64).sqrt()]),
        (0.7, [1.5, 1.0], [0.4f64.sqrt(), -0.2 / 0.4f64.sqrt(), (0.3 - 0.04 / 0.4f64).sqrt()]),
    ];
    for (t, x_t) in [(30usize, [0.5, 0.2]), (60, [-1.0, 0.4]), (90, [0.3, -0.8])] {
        let ab = s.alpha_bars()[t];
        let (sa, var) = (ab.sqrt(), 1.0 - ab);
        let (mut sw, mut sw2) = (0.0, 0.0);
        let mut swx = [0.0; 2];
        let mut sw2x = [0.0; 2];
        let mut sw2x2 = [0.0; 2];
        for _ in 0..draws {
            let (_, m, l) = if rng.random::<f64>() < comps[0].0 { comps[0] } else { comps[1] };
            let (z0, z1): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            let x0 = [m[0] + l[0] * z0, m[1] + l[1] * z0 + l[2] * z1];
            let d2 = (x_t[0] - sa * x0[0]).powi(2) + (x_t[1] - sa * x0[1]).powi(2);
            let w = (-0.5 * d2 / var).exp();
            sw += w;
            sw2 += w * w;
            for i in 0..2 {
                swx[i] += w * x0[i];
                sw2x[i] += w * w * x0[i];
                sw2x2[i] += w * w * x0[i] * x0[i];
            }
        }
        let got = mixture_posterior_mean(&prior, &s, &x_t, t).unwrap();
        for i in 0..2 {
            let est = swx[i] / sw;
            // delta-method standard error of the self-normalized estimator
            let var_num = sw2x2[i] - 2.0 * est * sw2x[i] + est * est * sw2;
            let se = var_num.sqrt() / sw;
            assert!((got[i] - est).abs() < 3.0 * se, "t={t} coord {i}: {} vs {est} (se {se})", got[i]);
        }
    }
}

#[test]
fn forward_moments_follow_variance_preservation() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let x0 = [0.8, -1.2];
    for t in [0usize, 40, 99] {
        let ab = s.alpha_bars()[t];
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let x = q_sample(&s, &x0, t, &noise).unwrap();
            for i in 0..2 {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let sd = (1.0 - ab).sqrt();
            assert!((mean - ab.sqrt() * x0[i]).abs() < 4.0 * sd / (n as f64).sqrt());
            // sd of the sample variance is about var * sqrt(2 / n)
            assert!((var - sd * sd).abs() < 4.0 * sd * sd * (2.0 / n as f64).sqrt());
        }
    }
}

#[test]
fn deterministic_chain_composes_affine_maps_for_a_gaussian() {
    // With eta = 0 and a single Gaussian prior every step is affine in x_t; the
    // composition is computed here step by step from first principles.
    let (m, v) = (0.7, 0.3);
    let s = NoiseSchedule::ddpm_scaled(100, 0.0).unwrap();
    let prior = GaussianMixturePrior::new(vec![1.0], vec![vec![m]], vec![vec![v]]).unwrap();
    let model = AnalyticScore::new(prior, &s).unwrap();

    let (mut gain, mut offset) = (1.0, 0.0);
    for t in (0..100).rev() {
        let ab = s.alpha_bars()[t];
        let ab_prev = if t == 0 { 1.0 } else { s.alpha_bars()[t - 1] };
        let k = ab.sqrt() * v / (ab * v + 1.0 - ab);
        // x0(x) = m + k (x - sqrt(ab) m) = p x + q
        let (p, q) = (k, m - k * ab.sqrt() * m);
        let c = (1.0 - ab_prev).sqrt() / (1.0 - ab).sqrt();
        // next = sqrt(ab_prev) x0 + c (x - sqrt(ab) x0)
        let a = ab_prev.sqrt() * p + c * (1.0 - ab.sqrt() * p);
        let b = ab_prev.sqrt() * q - c * ab.sqrt() * q;
        gain *= a;
        offset = a * offset + b;
    }
    for stream in 0..5 {
        let tr = sample_unconditional(&model, &s, steered_diffusion::sampler::StreamSeed::new(6, stream), false).unwrap();
        let expect = gain * tr.initial[0] + offset;
        assert!((tr.sample[0] - expect).abs() < 1e-6, "{} vs {expect}", tr.sample[0]);
    }
}

#[test]
fn standard_normal_prior_is_reproduced() {
    // Plugging the posterior mean into the ancestral step loses variance at
    // coarse steps (about 8% at 100 levels); 1000 levels bring it under 1%.
    let s = NoiseSchedule::ddpm_scaled(1000, 1.0).unwrap();
    let model = AnalyticScore::new(GaussianMixturePrior::standard_normal(2).unwrap(), &s).unwrap();
    let n = 10_000;
    let xs = sample_unconditional_batch(&model, &s, 7, n).unwrap();
    let mean: Vec<f64> = (0..2).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n as f64).collect();
    for &m in &mean {
        assert!(m.abs() < 4.0 / (n as f64).sqrt(), "mean {m}");
    }
    for i in 0..2 {
        for j in 0..2 {
            let c = xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1) as f64;
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((c - want).abs() < 0.05, "cov[{i}][{j}] = {c}");
        }
    }
}
