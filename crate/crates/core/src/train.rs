//! Adam fitting of the velocity model and prediction at arbitrary times.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SequenceDataset;
use crate::grid::{fold_percentage, warp_image, Field, GridError, ScalarGrid, VectorGrid};
use crate::model::{Arch, Mode, ModelError, VelocityModel};
use crate::objective::{
    cotangents_from_states, regression_loss, trajectory, LossBreakdown, LossWeights, ObjectiveError,
};
use crate::odeint::{
    adjoint_gradients, direct_gradients, integrate_trajectory, Dynamics, DynamicsError, Gradients,
    OdeError, SolverConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("non-finite gradient at parameter index {0}")]
    NonFiniteGradientAt(usize),
    #[error("diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("prediction time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("prediction times must be ascending (index {0})")]
    TimesNotAscending(usize),
    #[error("baseline dims {actual:?} differ from the model's {expected:?}")]
    BaselineDims {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub mode: Mode,
    pub solver: SolverConfig,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Requested window; clamped to the largest odd value not exceeding the
    /// smallest axis.
    pub smoothing_window: usize,
    pub latent_factor: usize,
    pub seed: u64,
    pub conv_channels: Vec<usize>,
    pub embed_width: usize,
    pub hidden_width: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let arch = Arch::new(Mode::Direct, Vec::new());
        Self {
            mode: Mode::Direct,
            solver: SolverConfig::default(),
            weights: LossWeights::default(),
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 300,
            smoothing_window: arch.smoothing_window,
            latent_factor: arch.latent_factor,
            seed: 0,
            conv_channels: arch.conv_channels,
            embed_width: arch.embed_width,
            hidden_width: arch.hidden_width,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.smoothing_window % 2 == 0 {
            return bad(format!(
                "smoothing_window must be odd, got {}",
                self.smoothing_window
            ));
        }
        if self.latent_factor == 0 {
            return bad("latent_factor must be positive".into());
        }
        self.weights.validate()?;
        self.solver.validate()?;
        Ok(())
    }

    /// The architecture this configuration trains on grids of `dims`.
    pub fn arch(&self, dims: &[usize]) -> Arch {
        Arch {
            mode: self.mode,
            dims: dims.to_vec(),
            conv_channels: self.conv_channels.clone(),
            embed_width: self.embed_width,
            hidden_width: self.hidden_width,
            latent_factor: self.latent_factor,
            smoothing_window: clamp_window(self.smoothing_window, dims),
            solver: self.solver.clone(),
        }
    }
}

/// Largest odd window not exceeding `window` or the smallest axis.
pub fn clamp_window(window: usize, dims: &[usize]) -> usize {
    let smallest = dims.iter().copied().min().unwrap_or(1).max(1);
    let cap = if smallest % 2 == 1 {
        smallest
    } else {
        smallest - 1
    };
    window.min(cap).max(1)
}

/// Adam first and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    moments: &Moments,
    step: u64,
    cfg: &FitConfig,
) -> Result<(Vec<f64>, Moments)> {
    if grads.len() != params.len()
        || moments.m.len() != params.len()
        || moments.v.len() != params.len()
    {
        return Err(TrainError::Shape(format!(
            "{} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    if step == 0 {
        return Err(TrainError::Config("Adam step index starts at 1".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradientAt(i));
    }
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    let mut next = Moments::zeros(params.len());
    let mut out = params.to_vec();
    for i in 0..params.len() {
        let g = grads[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        next.m[i] = m;
        next.v[i] = v;
        out[i] -= cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
    }
    Ok((out, next))
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Loss at the start of every epoch, before its update.
    pub loss_history: Vec<LossBreakdown>,
    pub final_model: VelocityModel,
    /// Seconds spent in the epoch loop.
    pub wall_time: f64,
    /// `(epoch, fraction of folded voxels at the last observed time)`, every
    /// 10 epochs and after the final update.
    pub fold_history: Vec<(usize, f64)>,
}

fn diverged(epoch: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Ode(OdeError::NonFinite { step }) => TrainError::Diverged {
            epoch,
            reason: format!("non-finite state at solver step {step}"),
        },
        TrainError::Objective(ObjectiveError::Ode(OdeError::NonFinite { step })) => {
            TrainError::Diverged {
                epoch,
                reason: format!("non-finite state at solver step {step}"),
            }
        }
        other => other,
    }
}

fn final_fold(model: &VelocityModel, state: &[f64]) -> Result<f64> {
    let u = model.displacement(&model.state_grid(state.to_vec())?)?;
    Ok(fold_percentage(&u)?)
}

/// Adjoint gradient through the trajectory plus the direct decoder gradient.
fn parameter_gradient(
    model: &VelocityModel,
    y0: &[f64],
    times: &[f64],
    cotangents: &[Vec<f64>],
    decoder: &[f64],
) -> Result<Vec<f64>> {
    let adj = adjoint_gradients(
        model,
        model.params(),
        y0,
        times,
        cotangents,
        &model.arch().solver,
    )?;
    Ok(adj.params.iter().zip(decoder).map(|(a, b)| a + b).collect())
}

/// Total regression loss and its gradient with respect to every model
/// parameter.
pub fn loss_and_gradient(
    model: &VelocityModel,
    dataset: &SequenceDataset,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let states = trajectory(model, dataset)?;
    let lg = cotangents_from_states(model, dataset, &states, weights)?;
    let y0 = model.initial_state()?.into_data();
    let grads = parameter_gradient(
        model,
        &y0,
        dataset.normalized_times(),
        &lg.state_cotangents,
        &lg.decoder_params,
    )?;
    Ok((lg.breakdown, grads))
}

/// Fits a freshly initialized model to `dataset`, full batch, one Adam step
/// per epoch.
pub fn fit(dataset: &SequenceDataset, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let arch = cfg.arch(dataset.dims());
    let mut model = VelocityModel::init(arch, cfg.seed)?;
    let y0 = model.initial_state()?.into_data();
    let times = dataset.normalized_times();
    let mut moments = Moments::zeros(model.params().len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut folds = Vec::new();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let states = trajectory(&model, dataset)
            .map_err(TrainError::from)
            .map_err(diverged(epoch))?;
        let lg = cotangents_from_states(&model, dataset, &states, &cfg.weights)?;
        if !lg.breakdown.total.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                reason: format!("loss is {}", lg.breakdown.total),
            });
        }
        if epoch % 10 == 0 {
            folds.push((
                epoch,
                final_fold(&model, states.last().expect("≥ 2 states"))?,
            ));
        }
        let grads =
            parameter_gradient(&model, &y0, times, &lg.state_cotangents, &lg.decoder_params)
                .map_err(diverged(epoch))?;
        history.push(lg.breakdown);
        let (params, next) = adam_step(model.params(), &grads, &moments, epoch as u64 + 1, cfg)
            .map_err(|e| match e {
                TrainError::NonFiniteGradientAt(i) => TrainError::Diverged {
                    epoch,
                    reason: format!("non-finite gradient in {}", model.layout().locate(i)),
                },
                other => other,
            })?;
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                reason: format!("{} became non-finite", model.layout().locate(i)),
            });
        }
        model = model.with_params(params)?;
        moments = next;
    }
    let wall_time = start.elapsed().as_secs_f64();
    let states = trajectory(&model, dataset)
        .map_err(TrainError::from)
        .map_err(diverged(cfg.epochs))?;
    folds.push((
        cfg.epochs,
        final_fold(&model, states.last().expect("≥ 2 states"))?,
    ));
    Ok(FitReport {
        loss_history: history,
        final_model: model,
        wall_time,
        fold_history: folds,
    })
}

/// Warped baseline and full-resolution displacement at each of `times`,
/// all taken from one trajectory.
pub fn predict(
    model: &VelocityModel,
    baseline: &ScalarGrid,
    times: &[f64],
) -> Result<Vec<(ScalarGrid, VectorGrid)>> {
    if baseline.dims() != model.arch().dims.as_slice() {
        return Err(TrainError::BaselineDims {
            expected: model.arch().dims.clone(),
            actual: baseline.dims().to_vec(),
        });
    }
    if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(TrainError::TimeOutOfRange(t));
    }
    if let Some(i) = times.windows(2).position(|w| w[1] < w[0]) {
        return Err(TrainError::TimesNotAscending(i + 1));
    }
    let mut grid = vec![0.0];
    for &t in times {
        if t > *grid.last().expect("non-empty") {
            grid.push(t);
        }
    }
    let y0 = model.initial_state()?.into_data();
    let states = integrate_trajectory(model, model.params(), &y0, &grid, &model.arch().solver)?;
    times
        .iter()
        .map(|t| {
            let k = grid
                .iter()
                .position(|g| g == t)
                .expect("every time is on the grid");
            let u = model.displacement(&model.state_grid(states[k].clone())?)?;
            Ok((warp_image(baseline, &u)?, u))
        })
        .collect()
}

/// Acceptance threshold for [`gradient_check`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Entries smaller than this fraction of the largest are compared in
/// absolute rather than relative terms.
pub const GRADCHECK_FLOOR: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Side length of the square test grid.
    pub size: usize,
    /// Perturbs the parameter half of the velocity VJP; a negative control.
    pub corrupt_vjp: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 8,
            corrupt_vjp: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discrepancy {
    pub max_rel_error: f64,
    /// Entry with the largest error.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Adjoint gradient of a linear trajectory functional against central
    /// differences.
    pub adjoint_vs_fd: Discrepancy,
    /// Adjoint against tape-based backpropagation.
    pub adjoint_vs_direct: Discrepancy,
    /// Full regression-loss gradient of a latent-mode model against central
    /// differences.
    pub loss_vs_fd: Discrepancy,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        [
            &self.adjoint_vs_fd,
            &self.adjoint_vs_direct,
            &self.loss_vs_fd,
        ]
        .iter()
        .all(|d| d.max_rel_error < GRADCHECK_TOLERANCE)
    }

    pub fn worst(&self) -> (&'static str, &Discrepancy) {
        [
            ("adjoint vs finite differences", &self.adjoint_vs_fd),
            ("adjoint vs direct", &self.adjoint_vs_direct),
            ("loss gradient vs finite differences", &self.loss_vs_fd),
        ]
        .into_iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("three checks")
    }
}

/// `max_i |a_i − b_i| / max(|b_i|, GRADCHECK_FLOOR·‖b‖∞)`, with `b` the
/// reference.
pub fn relative_error(a: &[f64], b: &[f64]) -> (f64, usize) {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())) * GRADCHECK_FLOOR;
    let mut worst = (0.0, 0);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let denom = y.abs().max(scale);
        let e = if denom > 0.0 {
            (x - y).abs() / denom
        } else {
            (x - y).abs()
        };
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    worst
}

struct CorruptVjp<'a>(&'a VelocityModel);

impl Dynamics for CorruptVjp<'_> {
    fn eval(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
    ) -> std::result::Result<Vec<f64>, DynamicsError> {
        self.0.eval(state, t, params)
    }

    fn vjp(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
        cotangent: &[f64],
    ) -> std::result::Result<(Vec<f64>, Vec<f64>), DynamicsError> {
        let (gs, gp) = self.0.vjp(state, t, params, cotangent)?;
        Ok((gs, gp.into_iter().map(|g| g * 1.01).collect()))
    }
}

fn randomized(model: &VelocityModel, rng: &mut ChaCha8Rng) -> Result<VelocityModel> {
    let mut params = model.params().to_vec();
    for spec in model.layout().specs() {
        let b = model
            .init_bound(&spec.name)
            .filter(|&b| b > 0.0)
            .unwrap_or(0.3);
        for p in &mut params[spec.range()] {
            *p = rng.random_range(-b..b);
        }
    }
    Ok(model.with_params(params)?)
}

fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe)?;
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe)?;
            probe[i] = x[i];
            Ok((up - down) / (2.0 * FD_STEP))
        })
        .collect()
}

/// Checks adjoint gradients against finite differences and tape-based
/// backpropagation on a tiny randomized model.
pub fn gradient_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.size < 4 || opts.size % 2 != 0 {
        return Err(TrainError::Config(format!(
            "gradcheck size must be even and at least 4, got {}",
            opts.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dims = vec![opts.size, opts.size];
    let solver = SolverConfig {
        steps_per_unit_time: 4,
        ..SolverConfig::default()
    };
    let cfg = FitConfig {
        solver,
        conv_channels: vec![3],
        embed_width: 4,
        hidden_width: 8,
        latent_factor: 2,
        smoothing_window: 3,
        ..FitConfig::default()
    };

    // ODE route: J(θ, y0) = Σ_k ⟨c_k, y(t_k)⟩
    let model = randomized(&VelocityModel::init(cfg.arch(&dims), opts.seed)?, &mut rng)?;
    let n = model.arch().state_len();
    let y0: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let times = [0.0, 0.3, 0.7, 1.0];
    let cot: Vec<Vec<f64>> = times
        .iter()
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let functional = |params: &[f64], y0: &[f64]| -> Result<f64> {
        let states = integrate_trajectory(&model, params, y0, &times, &model.arch().solver)?;
        Ok(states
            .iter()
            .zip(&cot)
            .map(|(y, c)| y.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };
    let corrupt = CorruptVjp(&model);
    let dynamics: &dyn Dynamics = if opts.corrupt_vjp { &corrupt } else { &model };
    let adj = adjoint_gradients(
        dynamics,
        model.params(),
        &y0,
        &times,
        &cot,
        &model.arch().solver,
    )?;
    let direct = direct_gradients(
        dynamics,
        model.params(),
        &y0,
        &times,
        &cot,
        &model.arch().solver,
    )?;
    let mut fd = central_difference(|p| functional(p, &y0), model.params())?;
    fd.extend(central_difference(|y| functional(model.params(), y), &y0)?);
    let joined = |g: &Gradients| -> Vec<f64> { g.params.iter().chain(&g.y0).copied().collect() };
    let name = |i: usize| {
        if i < model.params().len() {
            model.layout().locate(i)
        } else {
            format!("y0[{}]", i - model.params().len())
        }
    };
    let (e_fd, i_fd) = relative_error(&joined(&adj), &fd);
    let (e_direct, i_direct) = relative_error(&joined(&adj), &joined(&direct));

    // loss route: latent model, images, decoder
    let latent = randomized(
        &VelocityModel::init(
            FitConfig {
                mode: Mode::Latent,
                ..cfg.clone()
            }
            .arch(&dims),
            opts.seed,
        )?,
        &mut rng,
    )?;
    let dataset = blob_sequence(opts.size, 3)?;
    let weights = LossWeights {
        lambda1: 0.05,
        lambda2: 0.01,
    };
    let (_, grads) = if opts.corrupt_vjp {
        let states = trajectory(&latent, &dataset)?;
        let lg = cotangents_from_states(&latent, &dataset, &states, &weights)?;
        let y0 = latent.initial_state()?.into_data();
        let adj = adjoint_gradients(
            &CorruptVjp(&latent),
            latent.params(),
            &y0,
            dataset.normalized_times(),
            &lg.state_cotangents,
            &latent.arch().solver,
        )?;
        (
            lg.breakdown,
            adj.params
                .iter()
                .zip(&lg.decoder_params)
                .map(|(a, b)| a + b)
                .collect(),
        )
    } else {
        loss_and_gradient(&latent, &dataset, &weights)?
    };
    let fd_loss = central_difference(
        |p| Ok(regression_loss(&latent.with_params(p.to_vec())?, &dataset, &weights)?.total),
        latent.params(),
    )?;
    let (e_loss, i_loss) = relative_error(&grads, &fd_loss);

    Ok(GradCheckReport {
        adjoint_vs_fd: Discrepancy {
            max_rel_error: e_fd,
            worst: name(i_fd),
        },
        adjoint_vs_direct: Discrepancy {
            max_rel_error: e_direct,
            worst: name(i_direct),
        },
        loss_vs_fd: Discrepancy {
            max_rel_error: e_loss,
            worst: latent.layout().locate(i_loss),
        },
    })
}

/// A Gaussian blob drifting along axis 0 by half a voxel per frame.
fn blob_sequence(n: usize, frames: usize) -> Result<SequenceDataset> {
    let c = (n as f64 - 1.0) / 2.0;
    let imgs = (0..frames)
        .map(|k| {
            ScalarGrid::from_fn(vec![n, n], |i| {
                let dx = i[0] as f64 - c + 0.5 - 0.5 * k as f64;
                let dy = i[1] as f64 - c;
                (-(dx * dx + dy * dy) / (0.1 * (n * n) as f64)).exp()
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    SequenceDataset::new(imgs, (0..frames).map(|k| k as f64).collect())
        .map_err(|e| TrainError::Config(e.to_string()))
}
