use std::path::PathBuf;

use steered_diffusion::io::fmt_f64;
use steered_diffusion::operators::ImageShape;
use steered_diffusion::oracle::{
    calibrate_threshold, condition_mixture, energy_distance, prior_logdensity, sample_exact, CALIBRATION_PAIRS,
    CALIBRATION_QUANTILE,
};
use steered_diffusion::sampler::{sample_unconditional, StreamSeed};
use steered_diffusion::schedule::NoiseSchedule;
use steered_diffusion::score::{ScoreModel, TinyDenoiser, TrainConfig};
use steered_diffusion::steering::{KSchedule, SteeringMode};
use steered_diffusion::toy::{toy_dataset, TOY_SIDE};
use steered_diffusion::Error;

use crate::analysis::{guided_stats, linear_outcome, match_constant_k, mean, median, psnr, vector_hash, GuidedStats};
use crate::config::Config;
use crate::error::{CliError, CliResult, Phase};
use crate::output::{image_ext, OutputDir, Report};
use crate::setup::{
    activation, guided_target, image_shape, k_schedule, linear_options, linear_plan, linear_setup, model, schedule,
    LinearSetup, Model, DATA_STREAM, ORACLE_STREAM, TUNED_GUIDANCE_K,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Uncond,
    Linear,
    Guided,
    SweepK,
    AblateSpace,
    Train,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Uncond => "uncond",
            Command::Linear => "linear",
            Command::Guided => "guided",
            Command::SweepK => "sweep-k",
            Command::AblateSpace => "ablate-space",
            Command::Train => "train",
        }
    }

    fn default_samples(self) -> usize {
        match self {
            Command::Uncond | Command::Guided => 1000,
            Command::Linear => 16,
            Command::SweepK => 200,
            Command::AblateSpace => 100,
            Command::Train => 1,
        }
    }
}

/// What a finished command left behind.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub report: Report,
    /// Emitted file names, manifest last.
    pub files: Vec<String>,
}

struct Common {
    seed: u64,
    samples: usize,
    out: OutputDir,
}

fn common(cfg: &Config, command: Command) -> CliResult<Common> {
    let seed = cfg.get_or("run.seed", 0u64)?;
    let samples = cfg.usize_in("run.samples", command.default_samples(), 1, 10_000_000)?;
    let out = PathBuf::from(cfg.raw("run.out").map(str::to_string).unwrap_or_else(|| format!("out/{}", command.name())));
    Ok(Common { seed, samples, out: OutputDir::create(&out)? })
}

/// Validates `cfg`, runs `command` and writes its artifacts and manifest.
pub fn run(command: Command, cfg: &Config) -> CliResult<RunSummary> {
    let mut c = common(cfg, command)?;
    let mut report = Report::default();
    report.text("command", command.name());
    report.text("seed", c.seed);
    match command {
        Command::Uncond => uncond(cfg, &mut c, &mut report)?,
        Command::Linear => linear(cfg, &mut c, &mut report)?,
        Command::Guided => guided(cfg, &mut c, &mut report)?,
        Command::SweepK => sweep_k(cfg, &mut c, &mut report)?,
        Command::AblateSpace => ablate_space(cfg, &mut c, &mut report)?,
        Command::Train => train(cfg, &mut c, &mut report)?,
    }
    c.out.report(&report)?;
    let out = c.out.root().to_path_buf();
    let files = c.out.finish(command.name(), &cfg.sha256())?;
    Ok(RunSummary { out, report, files })
}

fn coordinate_header(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("x_{i}")).collect()
}

fn schedule_report(report: &mut Report, s: &NoiseSchedule) {
    report.text("steps", s.num_steps());
    report.num("eta", s.eta());
}

/// Energy distance plus a self-calibrated threshold on the oracle streams.
fn oracle_check(
    report: &mut Report,
    cfg: &Config,
    seed: u64,
    got: &[Vec<f64>],
    draw: impl Fn(StreamSeed) -> steered_diffusion::Result<Vec<Vec<f64>>>,
) -> CliResult<()> {
    let exact = draw(StreamSeed::new(seed, ORACLE_STREAM)).runtime()?;
    let stat = energy_distance(got, &exact).runtime()?;
    report.num("energy_distance_to_oracle", stat);
    if cfg.bool_or("oracle.calibrate", true)? {
        let cal = calibrate_threshold(CALIBRATION_PAIRS, CALIBRATION_QUANTILE, |stream| {
            draw(StreamSeed::new(seed, ORACLE_STREAM + 1 + stream))
        })
        .runtime()?;
        report.num("oracle_threshold", cal.threshold);
        report.text("oracle_pass", stat < cal.threshold);
    }
    Ok(())
}

fn uncond(cfg: &Config, c: &mut Common, report: &mut Report) -> CliResult<()> {
    let s = schedule(cfg)?;
    let m = model(cfg, &s)?;
    let record = cfg.bool_or("run.record", false)?;
    let shape = match &m {
        Model::Analytic(_) => None,
        _ => Some(image_shape(cfg, m.score().dim())?),
    };
    let d = m.score().dim();
    schedule_report(report, &s);
    report.text("samples", c.samples);

    let mut samples = Vec::with_capacity(c.samples);
    for i in 0..c.samples {
        let tr = sample_unconditional(m.score(), &s, StreamSeed::new(c.seed, i as u64), record && i == 0).runtime()?;
        if record && i == 0 {
            let mut buf = Vec::new();
            tr.write_csv(&mut buf).runtime()?;
            c.out.bytes("trajectory_000.csv", &buf)?;
        }
        if let Some(shape) = shape {
            c.out.image(&format!("sample_{i:03}.{}", image_ext(shape)), shape, &tr.sample)?;
        }
        samples.push(tr.sample);
    }
    c.out.csv("samples.csv", &coordinate_header(d), &samples)?;

    let n = samples.len() as f64;
    let means: Vec<f64> = (0..d).map(|j| samples.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    match &m {
        Model::Analytic(a) => {
            for (j, v) in means.iter().enumerate() {
                report.num(&format!("mean_{j}"), *v);
            }
            for i in 0..d {
                for j in i..d {
                    let cov = samples.iter().map(|x| (x[i] - means[i]) * (x[j] - means[j])).sum::<f64>() / (n - 1.0).max(1.0);
                    report.num(&format!("cov_{i}_{j}"), cov);
                }
            }
            let prior = a.prior();
            oracle_check(report, cfg, c.seed, &samples, |seed| sample_exact(prior, samples.len(), seed))?;
        }
        _ => {
            let all: Vec<f64> = samples.iter().flatten().copied().collect();
            let mu = mean(&all);
            report.num("pixel_mean", mu);
            report.num("pixel_std", (all.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / all.len() as f64).sqrt());
        }
    }
    Ok(())
}

/// Image of a condition in its own shape (masks are lifted back to full size).
fn condition_image(setup: &LinearSetup, cond: &[f64]) -> CliResult<(ImageShape, Vec<f64>)> {
    match setup.op.output_shape() {
        Some(shape) => Ok((shape, cond.to_vec())),
        None => Ok((setup.shape.expect("image task"), setup.op.right_inverse(cond).runtime()?)),
    }
}

fn linear(cfg: &Config, c: &mut Common, report: &mut Report) -> CliResult<()> {
    let s = schedule(cfg)?;
    let m = model(cfg, &s)?;
    let setup = linear_setup(cfg, &m, c.seed)?;
    let opts = linear_options(cfg, setup.task)?;
    schedule_report(report, &s);
    report.text("task", setup.task.name());
    report.text("samples", c.samples);
    report.num("k", opts.k.scale());
    report.text("k_schedule", opts.k.name());
    report.text("iterations", opts.iterations);
    report.text("mode", opts.mode.name());
    if let (Some(mask), Some(shape)) = (&setup.mask, setup.shape) {
        c.out.mask("mask.pgm", shape.width, mask)?;
    }

    let mut samples = Vec::with_capacity(c.samples);
    let mut trace = Vec::new();
    let (mut finals, mut preds, mut psnrs, mut trace_last) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..c.samples {
        let (truth, cond) = setup.instance(i)?;
        let plan = linear_plan(&setup.op, cond.clone(), opts)?;
        let o = linear_outcome(m.score(), &s, &plan, &setup.op, &cond, StreamSeed::new(c.seed, i as u64)).runtime()?;
        for r in &o.trajectory.trace {
            trace.push(vec![i.to_string(), r.t.to_string(), r.n.to_string(), fmt_f64(r.energy), fmt_f64(r.residual)]);
        }
        trace_last.push(o.trajectory.final_residual().unwrap_or(f64::NAN));
        finals.push(o.final_residual);
        preds.push(o.prediction_residual);
        if let Some(shape) = setup.shape {
            let ext = image_ext(shape);
            c.out.image(&format!("sample_{i:03}.{ext}"), shape, o.trajectory.sample())?;
            let (cshape, cimg) = condition_image(&setup, &cond)?;
            c.out.image(&format!("condition_{i:03}.{}", image_ext(cshape)), cshape, &cimg)?;
            if let Some(t) = &truth {
                c.out.image(&format!("truth_{i:03}.{ext}"), shape, t)?;
            }
        }
        if let Some(t) = &truth {
            psnrs.push(psnr(o.trajectory.sample(), t));
        }
        samples.push(o.trajectory.trajectory.sample);
    }
    c.out.table("trace.csv", &["sample", "t", "n", "energy", "residual"], &trace)?;
    c.out.csv("samples.csv", &coordinate_header(setup.op.input_len()), &samples)?;

    report.num("observed_mse", mean(&finals));
    report.num("observed_mse_max", finals.iter().copied().fold(0.0, f64::max));
    report.num("trace_final_residual", mean(&trace_last));
    report.num("prediction_residual_median", median(&preds).runtime()?);
    if !psnrs.is_empty() {
        report.num("psnr_mean", mean(&psnrs));
    }

    if let (Model::Analytic(a), Some(cond)) = (&m, &setup.fixed) {
        let cm = condition_mixture(a.prior(), &setup.op, cond).runtime()?;
        let dev = samples
            .iter()
            .flat_map(|x| setup.op.apply(x).expect("sized").into_iter().zip(cond).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max);
        report.num("observed_max_deviation", dev);
        let hidden: Vec<Vec<f64>> = samples.iter().map(|x| cm.restrict(x)).collect();
        let n = hidden.len();
        oracle_check(report, cfg, c.seed, &hidden, |seed| {
            Ok(sample_exact(&cm, n, seed)?.iter().map(|x| cm.restrict(x)).collect())
        })?;
    }
    Ok(())
}

fn guided_report(report: &mut Report, prefix: &str, g: &GuidedStats) {
    report.num(&format!("{prefix}target_fraction"), g.target_fraction);
    report.num(&format!("{prefix}residual"), g.residual);
    report.num(&format!("{prefix}mean_prior_logdensity"), g.mean_logdensity);
}

fn guided(cfg: &Config, c: &mut Common, report: &mut Report) -> CliResult<()> {
    let s = schedule(cfg)?;
    let m = model(cfg, &s)?;
    let a = m.analytic()?;
    let target = guided_target(cfg, a.prior())?;
    let k = k_schedule(cfg, TUNED_GUIDANCE_K, "sqrt")?;
    let iterations = cfg.usize_in("steering.iterations", 1, 1, 1000)?;
    schedule_report(report, &s);
    report.text("samples", c.samples);
    report.text("target", target);
    report.num("target_prior_weight", a.prior().weights()[target]);
    report.num("k", k.scale());
    report.text("k_schedule", k.name());
    report.text("iterations", iterations);

    let steered = guided_stats(a, &s, target, k, iterations, c.seed, c.samples).runtime()?;
    let plain = guided_stats(a, &s, target, k.with_scale(0.0), 1, c.seed, c.samples).runtime()?;
    guided_report(report, "", &steered);
    guided_report(report, "unconditional_", &plain);
    report.num("unconditional_logdensity_p01", steered_diffusion::oracle::quantile(&plain.logdensities, 0.01).runtime()?);
    c.out.csv("samples.csv", &coordinate_header(a.dim()), &steered.samples)?;
    Ok(())
}

#[derive(Debug)]
struct SweepRow {
    k: f64,
    form: &'static str,
    residual: f64,
    logdensity: f64,
    target_fraction: f64,
    blow_up: bool,
}

fn blow_up_or<T>(r: steered_diffusion::Result<T>) -> CliResult<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::SteeringBlowUp { .. }) => Ok(None),
        Err(e) => Err(CliError::Runtime(e.to_string())),
    }
}

fn sweep_k(cfg: &Config, c: &mut Common, report: &mut Report) -> CliResult<()> {
    let s = schedule(cfg)?;
    let m = model(cfg, &s)?;
    let ks = cfg.list::<f64>("sweep.k_values")?.unwrap_or_else(|| vec![0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0]);
    if ks.is_empty() || ks.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
        return Err(CliError::Validation("sweep.k_values must be nonnegative numbers".into()));
    }
    let forms = cfg.list::<String>("sweep.forms")?.unwrap_or_else(|| vec!["sqrt".into(), "constant".into()]);
    let forms: Vec<KSchedule> = forms.iter().map(|f| KSchedule::from_name(f, 1.0).setup()).collect::<CliResult<_>>()?;
    let task = cfg.raw("task.kind").unwrap_or("guided");
    schedule_report(report, &s);
    report.text("task", task);
    report.text("samples", c.samples);

    let mut rows = Vec::new();
    if task == "guided" {
        let a = m.analytic()?;
        let target = guided_target(cfg, a.prior())?;
        let iterations = cfg.usize_in("steering.iterations", 1, 1, 1000)?;
        for form in &forms {
            for &k in &ks {
                let g = blow_up_or(guided_stats(a, &s, target, form.with_scale(k), iterations, c.seed, c.samples))?;
                rows.push(match g {
                    Some(g) => SweepRow {
                        k,
                        form: form.name(),
                        residual: g.residual,
                        logdensity: g.mean_logdensity,
                        target_fraction: g.target_fraction,
                        blow_up: false,
                    },
                    None => SweepRow { k, form: form.name(), residual: f64::NAN, logdensity: f64::NAN, target_fraction: f64::NAN, blow_up: true },
                });
            }
        }
        if cfg.bool_or("sweep.match_residual", false)? {
            let tuned = cfg.f64_in("steering.k", TUNED_GUIDANCE_K, 0.0, f64::MAX)?;
            let sqrt = guided_stats(a, &s, target, KSchedule::SqrtOneMinusAlphaBar(tuned), iterations, c.seed, c.samples).runtime()?;
            let matched = match_constant_k(a, &s, target, iterations, sqrt.residual, c.seed, c.samples).runtime()?;
            report.num("matched_sqrt_k", tuned);
            report.num("matched_sqrt_residual", sqrt.residual);
            report.num("matched_sqrt_target_fraction", sqrt.target_fraction);
            report.num("matched_constant_k", matched.k);
            report.num("matched_constant_residual", matched.stats.residual);
            report.num("matched_constant_target_fraction", matched.stats.target_fraction);
            report.text("sqrt_at_least_constant", sqrt.target_fraction >= matched.stats.target_fraction);
        }
    } else {
        let setup = linear_setup(cfg, &m, c.seed)?;
        let base = linear_options(cfg, setup.task)?;
        for form in &forms {
            for (j, &k) in ks.iter().enumerate() {
                let opts = crate::setup::LinearOptions { k: form.with_scale(k), ..base };
                let (mut res, mut logd) = (Vec::new(), Vec::new());
                let mut blown = false;
                for i in 0..c.samples {
                    let (_, cond) = setup.instance(i)?;
                    let plan = linear_plan(&setup.op, cond.clone(), opts)?;
                    let Some(o) = blow_up_or(linear_outcome(m.score(), &s, &plan, &setup.op, &cond, StreamSeed::new(c.seed, i as u64)))? else {
                        blown = true;
                        break;
                    };
                    res.push(o.final_residual);
                    if let Some(p) = m.prior() {
                        logd.push(prior_logdensity(p, o.trajectory.sample()).runtime()?);
                    }
                    if let (0, Some(shape)) = (i, setup.shape) {
                        c.out.image(&format!("sample_k{j:02}_{}.{}", form.name(), image_ext(shape)), shape, o.trajectory.sample())?;
                    }
                }
                let nan_if = |v: &[f64]| if blown || v.is_empty() { f64::NAN } else { mean(v) };
                rows.push(SweepRow {
                    k,
                    form: form.name(),
                    residual: nan_if(&res),
                    logdensity: nan_if(&logd),
                    target_fraction: f64::NAN,
                    blow_up: blown,
                });
            }
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.k),
                r.form.to_string(),
                fmt_f64(r.residual),
                fmt_f64(r.logdensity),
                fmt_f64(r.target_fraction),
                u8::from(r.blow_up).to_string(),
            ]
        })
        .collect();
    c.out.table("sweep.csv", &["k", "schedule", "residual", "prior_logdensity", "target_fraction", "blow_up"], &table)?;
    report.text("blow_ups", rows.iter().filter(|r| r.blow_up).count());
    Ok(())
}

fn ablate_space(cfg: &Config, c: &mut Common, report: &mut Report) -> CliResult<()> {
    let s = schedule(cfg)?;
    let m = model(cfg, &s)?;
    let setup = linear_setup(cfg, &m, c.seed)?;
    let implicit = linear_options(cfg, setup.task)?;
    if implicit.mode == SteeringMode::XtSpace {
        return Err(CliError::Validation("steering.mode sets the implicit arm and cannot be xt-space".into()));
    }
    let xt = crate::setup::LinearOptions { mode: SteeringMode::XtSpace, ..implicit };
    schedule_report(report, &s);
    report.text("task", setup.task.name());
    report.text("seeds", c.samples);
    report.num("k", implicit.k.scale());
    report.text("k_schedule", implicit.k.name());
    report.text("iterations", implicit.iterations);
    report.text("implicit_mode", implicit.mode.name());

    let (mut a, mut b, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..c.samples {
        let (_, cond) = setup.instance(i)?;
        let seed = StreamSeed::new(c.seed, i as u64);
        let oi = linear_outcome(m.score(), &s, &linear_plan(&setup.op, cond.clone(), implicit)?, &setup.op, &cond, seed).runtime()?;
        let ox = linear_outcome(m.score(), &s, &linear_plan(&setup.op, cond.clone(), xt)?, &setup.op, &cond, seed).runtime()?;
        let (hi, hx) = (vector_hash(&oi.trajectory.trajectory.initial), vector_hash(&ox.trajectory.trajectory.initial));
        if hi != hx {
            return Err(CliError::Runtime(format!("arms started from different latents for stream {i}: {hi} vs {hx}")));
        }
        rows.push(vec![i.to_string(), hi, fmt_f64(oi.prediction_residual), fmt_f64(ox.prediction_residual)]);
        a.push(oi.prediction_residual);
        b.push(ox.prediction_residual);
    }
    c.out.table("paired.csv", &["stream", "x_t_hash", "implicit_residual", "xt_space_residual"], &rows)?;
    let (ma, mb) = (median(&a).runtime()?, median(&b).runtime()?);
    report.num("implicit_median_residual", ma);
    report.num("xt_space_median_residual", mb);
    report.text("implicit_le_xt_space", ma <= mb);
    Ok(())
}

fn train(cfg: &Config, c: &mut Common, report: &mut Report) -> CliResult<()> {
    let s = schedule(cfg)?;
    let side = cfg.usize_in("train.side", TOY_SIDE, 2, 256)?;
    let channels = cfg.usize_in("train.channels", 1, 1, 3)?;
    if channels == 2 {
        return Err(CliError::Validation("train.channels must be 1 or 3".into()));
    }
    let default_width = if channels == 1 { 128 } else { 64 };
    let hidden = cfg.list::<usize>("train.hidden")?.unwrap_or_else(|| vec![default_width; 3]);
    let hidden: [usize; 3] = hidden
        .try_into()
        .map_err(|_| CliError::Validation("train.hidden needs exactly three widths".into()))?;
    let act = activation(cfg.raw("train.activation").unwrap_or("silu"))?;
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        steps: cfg.usize_in("train.steps", 3000, 0, 10_000_000)?,
        learning_rate: cfg.f64_in("train.learning_rate", defaults.learning_rate, 0.0, 1e6)?,
        batch_size: cfg.usize_in("train.batch_size", defaults.batch_size, 1, 1_000_000)?,
        seed: c.seed,
    };
    let n_data = cfg.usize_in("train.dataset_size", 2000, 1, 10_000_000)?;
    let shape = ImageShape::square(side, channels);

    let init = TinyDenoiser::new(shape.len(), hidden, s.num_steps(), act, c.seed).setup()?;
    let data = toy_dataset(shape, n_data, &mut StreamSeed::new(c.seed, DATA_STREAM).rng());
    schedule_report(report, &s);
    report.text("image", format!("{side}x{side}x{channels}"));
    report.text("parameters", init.num_parameters());
    report.text("train_steps", tc.steps);
    report.num("learning_rate", tc.learning_rate);
    report.text("batch_size", tc.batch_size);

    let result = init.train(&data, &s, &tc).runtime()?;
    let losses: Vec<Vec<f64>> = result.losses.iter().enumerate().map(|(i, l)| vec![i as f64, *l]).collect();
    c.out.csv("loss.csv", &["step".into(), "loss".into()], &losses)?;
    c.out.bytes("weights.bin", &result.model.to_bytes())?;
    let tail = &result.losses[result.losses.len().saturating_sub(100)..];
    if !tail.is_empty() {
        report.num("final_loss_moving_average", mean(tail));
    }
    Ok(())
}
