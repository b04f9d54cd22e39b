//! Turns a [`Config`] into schedules, models, operators and plans.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use steered_diffusion::io::{read_csv_rows, read_mask, read_pnm};
use steered_diffusion::operators::{generate_mask, ImageShape, LinearDegradation, MaskStyle};
use steered_diffusion::sampler::StreamSeed;
use steered_diffusion::schedule::NoiseSchedule;
use steered_diffusion::score::{
    Activation, AnalyticScore, ClampedPrediction, GaussianMixturePrior, ScoreModel, TinyDenoiser,
};
use steered_diffusion::steering::{Condition, EnergyFunction, KSchedule, SteeringMode, SteeringPlan};
use steered_diffusion::toy::{toy_image, TOY_SIDE};

use crate::config::Config;
use crate::error::{CliError, CliResult, Phase};

/// Stream offsets so auxiliary draws never share a stream with a trajectory.
pub const TRUTH_STREAM: u64 = 1 << 40;
pub const MASK_STREAM: u64 = 1 << 41;
pub const ORACLE_STREAM: u64 = 1 << 42;
pub const DATA_STREAM: u64 = 1 << 43;

/// Label-steering strength chosen once on the frozen benchmark, with the
/// `sqrt` form.
pub const TUNED_GUIDANCE_K: f64 = 1.0;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// The frozen two-component 2D benchmark mixture.
pub fn benchmark_prior() -> GaussianMixturePrior {
    GaussianMixturePrior::new(
        vec![0.3, 0.7],
        vec![vec![-2.0, -1.0], vec![1.5, 1.0]],
        vec![vec![0.5, 0.3, 0.3, 0.6], vec![0.4, -0.2, -0.2, 0.3]],
    )
    .expect("benchmark mixture is valid")
}

pub fn schedule(cfg: &Config) -> CliResult<NoiseSchedule> {
    let steps = cfg.usize_in("schedule.steps", 100, 2, 100_000)?;
    let eta = cfg.f64_in("schedule.eta", 1.0, 0.0, 1.0)?;
    match (cfg.get::<f64>("schedule.beta_start")?, cfg.get::<f64>("schedule.beta_end")?) {
        (None, None) => NoiseSchedule::ddpm_scaled(steps, eta).setup(),
        (Some(a), Some(b)) => NoiseSchedule::linear(steps, a, b, eta).setup(),
        _ => Err(invalid("schedule.beta_start and schedule.beta_end must be given together")),
    }
}

pub enum Model {
    Analytic(AnalyticScore),
    Denoiser(TinyDenoiser),
    ClampedDenoiser(ClampedPrediction<TinyDenoiser>),
}

impl Model {
    pub fn score(&self) -> &dyn ScoreModel {
        match self {
            Model::Analytic(m) => m,
            Model::Denoiser(m) => m,
            Model::ClampedDenoiser(m) => m,
        }
    }

    pub fn prior(&self) -> Option<&GaussianMixturePrior> {
        match self {
            Model::Analytic(m) => Some(m.prior()),
            _ => None,
        }
    }

    pub fn analytic(&self) -> CliResult<&AnalyticScore> {
        match self {
            Model::Analytic(m) => Ok(m),
            _ => Err(invalid("this command needs an analytic mixture model")),
        }
    }
}

pub fn prior(cfg: &Config) -> CliResult<GaussianMixturePrior> {
    let Some(weights) = cfg.list::<f64>("model.weights")? else {
        return Ok(benchmark_prior());
    };
    let dim: usize = cfg.get("model.dim")?.ok_or_else(|| invalid("model.dim is required with model.weights"))?;
    let means = cfg.list::<f64>("model.means")?.ok_or_else(|| invalid("model.means is required with model.weights"))?;
    let covs = cfg
        .list::<f64>("model.covariances")?
        .ok_or_else(|| invalid("model.covariances is required with model.weights"))?;
    GaussianMixturePrior::from_flat(weights, dim, &means, &covs).setup()
}

pub fn model(cfg: &Config, schedule: &NoiseSchedule) -> CliResult<Model> {
    let default_kind = if cfg.contains("model.path") { "denoiser" } else { "analytic" };
    match cfg.raw("model.kind").unwrap_or(default_kind) {
        "analytic" => Ok(Model::Analytic(AnalyticScore::new(prior(cfg)?, schedule).setup()?)),
        "denoiser" => {
            let path = cfg.existing_path("model.path")?.ok_or_else(|| invalid("model.path is required for a denoiser"))?;
            let m = TinyDenoiser::load(&path).setup()?;
            if m.num_steps() != schedule.num_steps() {
                return Err(invalid(format!(
                    "denoiser was trained for {} levels but schedule.steps = {}",
                    m.num_steps(),
                    schedule.num_steps()
                )));
            }
            // clamp the implied clean image to the pixel range unless disabled
            match cfg.raw("model.clamp").unwrap_or("1") {
                "off" => Ok(Model::Denoiser(m)),
                v => {
                    let bound: f64 = v.parse().map_err(|_| invalid(format!("model.clamp must be `off` or a bound, got `{v}`")))?;
                    Ok(Model::ClampedDenoiser(ClampedPrediction::new(m, schedule, bound).setup()?))
                }
            }
        }
        other => Err(invalid(format!("model.kind must be analytic or denoiser, got `{other}`"))),
    }
}

/// Square image layout of a model's vectors.
pub fn image_shape(cfg: &Config, dim: usize) -> CliResult<ImageShape> {
    let side = cfg.usize_in("task.side", TOY_SIDE, 1, 4096)?;
    let px = side * side;
    match dim.checked_div(px) {
        Some(ch @ (1 | 3)) if ch * px == dim => Ok(ImageShape::square(side, ch)),
        _ => Err(invalid(format!("model dimension {dim} is not a {side}x{side} image with 1 or 3 channels"))),
    }
}

pub fn activation(name: &str) -> CliResult<Activation> {
    match name {
        "silu" => Ok(Activation::Silu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(invalid(format!("activation must be silu or tanh, got `{other}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearTask {
    Inpaint,
    Colorize,
    Superres,
    Coords,
}

impl LinearTask {
    pub fn from_name(name: &str) -> CliResult<Self> {
        match name {
            "inpaint" => Ok(Self::Inpaint),
            "colorize" => Ok(Self::Colorize),
            "superres" => Ok(Self::Superres),
            "coords" => Ok(Self::Coords),
            other => Err(invalid(format!("task.kind must be inpaint, colorize, superres or coords, got `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Inpaint => "inpaint",
            Self::Colorize => "colorize",
            Self::Superres => "superres",
            Self::Coords => "coords",
        }
    }

    /// Inner iterations per level: 3 where hidden content must be invented,
    /// 1 for super-resolution.
    pub fn default_iterations(self) -> usize {
        match self {
            Self::Superres => 1,
            _ => 3,
        }
    }
}

/// A linear inverse problem: the operator and where its conditions come from.
pub struct LinearSetup {
    pub task: LinearTask,
    pub op: LinearDegradation,
    /// Image layout, `None` for coordinate tasks.
    pub shape: Option<ImageShape>,
    pub mask: Option<Vec<bool>>,
    /// Condition shared by every sample; otherwise each sample gets its own
    /// ground-truth toy image.
    pub fixed: Option<Vec<f64>>,
    seed: u64,
}

impl LinearSetup {
    /// Ground truth (if generated) and condition for sample `i`.
    pub fn instance(&self, i: usize) -> CliResult<(Option<Vec<f64>>, Vec<f64>)> {
        if let Some(c) = &self.fixed {
            return Ok((None, c.clone()));
        }
        let shape = self.shape.expect("image tasks always have a shape");
        let truth = toy_image(shape, &mut StreamSeed::new(self.seed, TRUTH_STREAM + i as u64).rng());
        let c = self.op.apply(&truth).runtime()?;
        Ok((Some(truth), c))
    }
}

fn read_condition(path: &Path, op: &LinearDegradation) -> CliResult<Vec<f64>> {
    let file = File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let c = if ext == "pgm" || ext == "ppm" {
        let (shape, px) = read_pnm(&mut BufReader::new(file)).setup()?;
        if Some(shape) != op.output_shape() {
            return Err(invalid(format!("condition image {} has the wrong shape", path.display())));
        }
        px
    } else {
        let rows = read_csv_rows(BufReader::new(file)).setup()?;
        rows.into_iter().next().ok_or_else(|| invalid(format!("{} has no rows", path.display())))?
    };
    if c.len() != op.output_len() {
        return Err(invalid(format!("condition has {} values, the operator produces {}", c.len(), op.output_len())));
    }
    Ok(c)
}

pub fn linear_setup(cfg: &Config, model: &Model, seed: u64) -> CliResult<LinearSetup> {
    let task = LinearTask::from_name(cfg.raw("task.kind").unwrap_or("inpaint"))?;
    let dim = model.score().dim();
    let mut mask = None;
    let (op, shape) = match task {
        LinearTask::Coords => {
            model.analytic()?;
            let indices = cfg.list::<usize>("task.indices")?.unwrap_or_else(|| vec![0]);
            (LinearDegradation::coordinate_select(dim, indices).setup()?, None)
        }
        _ => {
            if model.prior().is_some() {
                return Err(invalid(format!("task {} needs a denoiser model", task.name())));
            }
            let shape = image_shape(cfg, dim)?;
            let op = match task {
                LinearTask::Inpaint => {
                    let observed = match cfg.existing_path("task.mask_file")? {
                        Some(p) => {
                            let file = File::open(&p)?;
                            let (h, w, m) = read_mask(&mut BufReader::new(file)).setup()?;
                            if (h, w) != (shape.height, shape.width) {
                                return Err(invalid(format!("mask is {h}x{w}, images are {}x{}", shape.height, shape.width)));
                            }
                            m
                        }
                        None => {
                            let style: MaskStyle = cfg.raw("task.mask_style").unwrap_or("medium").parse().setup()?;
                            let frac = cfg.f64_in("task.observed_fraction", 0.6, 0.0, 1.0)?;
                            let mut rng = StreamSeed::new(seed, MASK_STREAM).rng();
                            generate_mask(style, shape.height, shape.width, frac, &mut rng).setup()?
                        }
                    };
                    mask = Some(observed.clone());
                    LinearDegradation::mask(shape, observed).setup()?
                }
                LinearTask::Colorize => {
                    if shape.channels != 3 {
                        return Err(invalid("colorize needs a 3-channel denoiser"));
                    }
                    LinearDegradation::grayscale(shape).setup()?
                }
                _ => LinearDegradation::downscale(shape, cfg.usize_in("task.scale", 2, 1, 4096)?).setup()?,
            };
            (op, Some(shape))
        }
    };

    let fixed = match cfg.existing_path("task.condition_file")? {
        Some(p) => Some(read_condition(&p, &op)?),
        None if task == LinearTask::Coords => {
            let values = cfg.list::<f64>("task.values")?.unwrap_or_else(|| vec![0.0; op.output_len()]);
            if values.len() != op.output_len() {
                return Err(invalid("task.values must have one value per index"));
            }
            Some(values)
        }
        None => None,
    };
    Ok(LinearSetup { task, op, shape, mask, fixed, seed })
}

/// Steering options shared by every linear run of a command.
#[derive(Debug, Clone, Copy)]
pub struct LinearOptions {
    pub k: KSchedule,
    pub iterations: usize,
    pub mode: SteeringMode,
}

pub fn k_schedule(cfg: &Config, default_k: f64, default_form: &str) -> CliResult<KSchedule> {
    let k = cfg.f64_in("steering.k", default_k, 0.0, f64::MAX)?;
    KSchedule::from_name(cfg.raw("steering.k_schedule").unwrap_or(default_form), k).setup()
}

pub fn linear_options(cfg: &Config, task: LinearTask) -> CliResult<LinearOptions> {
    Ok(LinearOptions {
        k: k_schedule(cfg, 1.0, "constant")?,
        iterations: cfg.usize_in("steering.iterations", task.default_iterations(), 1, 1000)?,
        mode: SteeringMode::from_name(cfg.raw("steering.mode").unwrap_or("linear-replacement")).setup()?,
    })
}

pub fn linear_plan(op: &LinearDegradation, c: Vec<f64>, opts: LinearOptions) -> CliResult<SteeringPlan> {
    SteeringPlan::linear(op.clone(), c, opts.k, opts.iterations, opts.mode).setup()
}

/// Label steering toward one mixture component.
pub fn guided_plan(prior: &GaussianMixturePrior, target: usize, k: KSchedule, iterations: usize) -> CliResult<SteeringPlan> {
    let label = Condition::one_hot(target, prior.num_components()).setup()?;
    SteeringPlan::new(EnergyFunction::MixtureLabel(prior.clone()), label, k, iterations, SteeringMode::Implicit).setup()
}

pub fn guided_target(cfg: &Config, prior: &GaussianMixturePrior) -> CliResult<usize> {
    cfg.usize_in("task.target", 0, 0, prior.num_components() - 1)
}
