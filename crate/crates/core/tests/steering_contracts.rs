use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steered_diffusion::operators::{generate_mask, ImageShape, LinearDegradation, MaskStyle};
use steered_diffusion::sampler::StreamSeed;
use steered_diffusion::schedule::NoiseSchedule;
use steered_diffusion::score::{Activation, GaussianMixturePrior, TinyDenoiser};
use steered_diffusion::steering::{
    isc_linear_step, steered_sample, Condition, EnergyFunction, KSchedule, SteeringMode, SteeringPlan,
};
use steered_diffusion::toy::toy_image;

fn mixture3() -> GaussianMixturePrior {
    GaussianMixturePrior::new(
        vec![0.2, 0.5, 0.3],
        vec![vec![-2.0, 0.0, 1.0], vec![1.0, 1.5, -1.0], vec![0.0, -2.0, 0.0]],
        vec![
            vec![0.6, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.7],
            vec![0.4, -0.1, 0.0, -0.1, 0.3, 0.0, 0.0, 0.0, 0.5],
            vec![1.0, 0.0, 0.3, 0.0, 0.8, 0.0, 0.3, 0.0, 0.6],
        ],
    )
    .unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_label(rng: &mut ChaCha8Rng, n: usize) -> Condition {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Condition::Label(raw.iter().map(|v| v / total).collect())
}

/// Relative error between the analytic gradient and central differences.
fn gradient_error(e: &EnergyFunction, x: &[f64], c: &Condition) -> f64 {
    let h = 1e-5;
    let g = e.gradient(x, c).unwrap();
    let fd: Vec<f64> = (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            (e.value(&p, c).unwrap() - e.value(&m, c).unwrap()) / (2.0 * h)
        })
        .collect();
    let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-3)
}

fn operator_matrix(rng: &mut ChaCha8Rng) -> Vec<LinearDegradation> {
    let mask = generate_mask(MaskStyle::Medium, 4, 4, 0.5, rng).unwrap();
    vec![
        LinearDegradation::mask(ImageShape::square(4, 1), mask).unwrap(),
        LinearDegradation::downscale(ImageShape::square(4, 1), 2).unwrap(),
        LinearDegradation::grayscale(ImageShape::square(3, 3)).unwrap(),
        LinearDegradation::coordinate_select(5, vec![4, 1]).unwrap(),
    ]
}

#[test]
fn every_energy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for op in operator_matrix(&mut rng) {
        let e = EnergyFunction::Quadratic(op.clone());
        for _ in 0..100 {
            let x = random_vec(&mut rng, op.input_len(), 2.0);
            let c = Condition::Vector(random_vec(&mut rng, op.output_len(), 2.0));
            let err = gradient_error(&e, &x, &c);
            assert!(err < 1e-5, "{}: {err}", op.kind());
        }
    }

    let label = EnergyFunction::MixtureLabel(mixture3());
    for i in 0..100 {
        let x = random_vec(&mut rng, 3, 3.0);
        let c = if i % 2 == 0 { Condition::one_hot(i % 3, 3).unwrap() } else { random_label(&mut rng, 3) };
        let err = gradient_error(&label, &x, &c);
        assert!(err < 1e-5, "label: {err}");
    }

    let sum = EnergyFunction::WeightedSum(vec![
        (0.7, EnergyFunction::Quadratic(LinearDegradation::coordinate_select(3, vec![0, 2]).unwrap())),
        (2.0, EnergyFunction::MixtureLabel(mixture3())),
    ]);
    for _ in 0..100 {
        let x = random_vec(&mut rng, 3, 3.0);
        let c = Condition::Many(vec![Condition::Vector(random_vec(&mut rng, 2, 1.0)), random_label(&mut rng, 3)]);
        let err = gradient_error(&sum, &x, &c);
        assert!(err < 1e-5, "weighted sum: {err}");
    }
}

#[test]
fn full_replacement_satisfies_the_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for op in operator_matrix(&mut rng) {
        for _ in 0..100 {
            let x = random_vec(&mut rng, op.input_len(), 3.0);
            let c = random_vec(&mut rng, op.output_len(), 1.0);
            let feas = isc_linear_step(&x, &c, &op, 1.0).unwrap();
            let back = op.apply(&feas).unwrap();
            assert!(back.iter().zip(&c).all(|(a, b)| (a - b).abs() <= 1e-10), "{}", op.kind());
            assert_eq!(isc_linear_step(&x, &c, &op, 0.0).unwrap(), x);
        }
    }
}

#[test]
fn steered_images_match_their_condition_at_every_step() {
    let s = NoiseSchedule::ddpm_scaled(50, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let side = 8;
    for (ch, op, passes) in [
        (
            1,
            LinearDegradation::mask(
                ImageShape::square(side, 1),
                generate_mask(MaskStyle::Medium, side, side, 0.6, &mut rng).unwrap(),
            )
            .unwrap(),
            3,
        ),
        (3, LinearDegradation::grayscale(ImageShape::square(side, 3)).unwrap(), 3),
        (1, LinearDegradation::downscale(ImageShape::square(side, 1), 2).unwrap(), 1),
    ] {
        let shape = ImageShape::square(side, ch);
        let model = TinyDenoiser::new(shape.len(), [16, 16, 16], 50, Activation::Silu, 1).unwrap();
        let truth = toy_image(shape, &mut rng);
        let c = op.apply(&truth).unwrap();
        let plan = SteeringPlan::linear(op.clone(), c.clone(), KSchedule::Constant(1.0), passes, SteeringMode::LinearReplacement).unwrap();
        let out = steered_sample(&model, &s, &plan, StreamSeed::new(3, 0), false).unwrap();
        assert_eq!(out.trace.len(), 50 * passes);
        assert!(out.trace.iter().all(|r| r.residual <= 1e-10), "{}", op.kind());
        let dx = op.apply(out.sample()).unwrap();
        let mse = dx.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / c.len() as f64;
        assert!(mse < 1e-3);
    }
}

#[test]
fn trace_csv_has_one_row_per_pass() {
    let s = NoiseSchedule::ddpm_scaled(10, 1.0).unwrap();
    let model = TinyDenoiser::new(4, [4, 4, 4], 10, Activation::Tanh, 1).unwrap();
    let plan = SteeringPlan::new(
        EnergyFunction::Quadratic(LinearDegradation::coordinate_select(4, vec![0]).unwrap()),
        Condition::Vector(vec![0.2]),
        KSchedule::SqrtOneMinusAlphaBar(0.3),
        2,
        SteeringMode::Implicit,
    )
    .unwrap();
    let out = steered_sample(&model, &s, &plan, StreamSeed::new(1, 1), false).unwrap();
    let mut buf = Vec::new();
    out.write_trace_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,n,energy,residual");
    assert_eq!(lines.len(), 1 + 20);
    assert!(lines[1].starts_with("9,2,"));
    assert!(lines[20].starts_with("0,1,"));
}
