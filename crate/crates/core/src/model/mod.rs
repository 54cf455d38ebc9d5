//! The parameterized velocity network, the latent encoder/decoder pair, and
//! checkpoint serialization.
//!
//! One network shape serves both modes. In direct mode the ODE state is the
//! full-resolution displacement field; in latent mode it is an average-pooled
//! copy of it, decoded back by multilinear upsampling, a learned residual
//! convolution and a box filter.

mod checkpoint;
mod latent;
mod net;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{voxel_count, Field, GridError, VectorGrid};
use crate::odeint::{Dynamics, DynamicsError, SolverConfig};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION,
};
pub use latent::encode;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("{stage}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        stage: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("dims {dims:?} are not divisible by latent factor {factor}")]
    NotDivisible { dims: Vec<usize>, factor: usize },
    #[error("expected {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("parameter {0} is not finite")]
    NonFiniteParam(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint parameter list disagrees with its architecture: {0}")]
    LayoutMismatch(String),
    #[error("checkpoint truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("checkpoint has trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Direct,
    Latent,
}

/// Architecture plus the evaluation settings needed to reproduce a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub mode: Mode,
    /// Full-resolution spatial dims.
    pub dims: Vec<usize>,
    /// Output channels of each stride-2 convolution stage.
    pub conv_channels: Vec<usize>,
    /// Hidden width of the time-embedding perceptron.
    pub embed_width: usize,
    pub hidden_width: usize,
    /// Pooling factor between full resolution and the latent state (latent mode only).
    pub latent_factor: usize,
    /// Box-filter window applied after decoding (latent mode only).
    pub smoothing_window: usize,
    pub solver: SolverConfig,
}

impl Arch {
    /// Desk-scale defaults: two conv stages (8, 16), hidden width 128.
    pub fn new(mode: Mode, dims: Vec<usize>) -> Self {
        Self {
            mode,
            dims,
            conv_channels: vec![8, 16],
            embed_width: 32,
            hidden_width: 128,
            latent_factor: 4,
            smoothing_window: 15,
            solver: SolverConfig::default(),
        }
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Spatial dims of the ODE state.
    pub fn state_dims(&self) -> Vec<usize> {
        match self.mode {
            Mode::Direct => self.dims.clone(),
            Mode::Latent => self.dims.iter().map(|d| d / self.latent_factor).collect(),
        }
    }

    pub fn state_len(&self) -> usize {
        voxel_count(&self.state_dims()) * self.ndim()
    }

    /// Spatial dims after each conv stage.
    pub(crate) fn stage_dims(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.conv_channels.len() + 1);
        out.push(self.state_dims());
        for _ in &self.conv_channels {
            let prev = out.last().expect("non-empty");
            out.push(prev.iter().map(|&n| net::conv_out_len(n, 2)).collect());
        }
        out
    }

    /// Width of the flattened conv features.
    pub fn feature_width(&self) -> usize {
        let dims = self.stage_dims();
        voxel_count(dims.last().expect("non-empty"))
            * self.conv_channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Arch(m));
        if self.ndim() != 2 && self.ndim() != 3 {
            return bad(format!("need 2 or 3 spatial dims, got {}", self.ndim()));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return bad(format!("zero-length axis in {:?}", self.dims));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be non-empty and positive".into());
        }
        if self.embed_width == 0 || self.hidden_width == 0 {
            return bad("embed_width and hidden_width must be positive".into());
        }
        if self.smoothing_window == 0 || self.smoothing_window % 2 == 0 {
            return bad(format!(
                "smoothing_window must be odd, got {}",
                self.smoothing_window
            ));
        }
        self.solver
            .validate()
            .map_err(|e| ModelError::Arch(e.to_string()))?;
        if self.mode == Mode::Latent {
            if self.latent_factor == 0 || self.dims.iter().any(|d| d % self.latent_factor != 0) {
                return Err(ModelError::NotDivisible {
                    dims: self.dims.clone(),
                    factor: self.latent_factor,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
    /// fan-in used by initialization; 0 marks zero-initialized arrays
    #[serde(skip)]
    fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered named arrays packed into one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn for_arch(arch: &Arch) -> Self {
        let nd = arch.ndim();
        let k = 3usize.pow(nd as u32);
        let kshape = vec![3; nd];
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize| {
            specs.push(ParamSpec {
                name,
                shape,
                offset: 0,
                fan_in,
            });
        };
        let mut c_in = nd;
        for (s, &c_out) in arch.conv_channels.iter().enumerate() {
            let mut shape = vec![c_out, c_in];
            shape.extend(&kshape);
            push(format!("conv{s}.weight"), shape, c_in * k);
            push(format!("conv{s}.bias"), vec![c_out], c_in * k);
            c_in = c_out;
        }
        let f = arch.feature_width();
        let e = arch.embed_width;
        let h = arch.hidden_width;
        let s = arch.state_len();
        push("embed0.weight".into(), vec![e, 1], 1);
        push("embed0.bias".into(), vec![e], 1);
        push("embed1.weight".into(), vec![f, e], e);
        push("embed1.bias".into(), vec![f], e);
        push("fc1.weight".into(), vec![h, f], f);
        push("fc1.bias".into(), vec![h], f);
        push("fc2.weight".into(), vec![s, h], 0);
        push("fc2.bias".into(), vec![s], 0);
        if arch.mode == Mode::Latent {
            let mut shape = vec![nd, nd];
            shape.extend(&kshape);
            push("decoder.residual".into(), shape, 0);
        }
        let mut total = 0;
        for spec in &mut specs {
            spec.offset = total;
            total += spec.len();
        }
        Self { specs, total }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Human-readable location of flat index `i`, e.g. `fc1.weight[17]`.
    pub fn locate(&self, i: usize) -> String {
        match self.specs.iter().find(|s| s.range().contains(&i)) {
            Some(s) => format!("{}[{}]", s.name, i - s.offset),
            None => format!("<out of range {i}>"),
        }
    }

    pub(crate) fn slice<'a>(&self, params: &'a [f64], name: &str) -> &'a [f64] {
        let spec = self.get(name).expect("layout entry");
        &params[spec.range()]
    }
}

/// The dynamics network `v_θ` (direct) or `u_θ` (latent) with its parameters.
///
/// Immutable after construction; updates go through [`VelocityModel::with_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    arch: Arch,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl VelocityModel {
    /// Fresh parameters: uniform `±sqrt(1/fan_in)` for hidden layers, zeros
    /// for the output layer and the decoder residual. Deterministic in `seed`.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::for_arch(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total()];
        for spec in layout.specs() {
            if spec.fan_in == 0 {
                continue;
            }
            let bound = (1.0 / spec.fan_in as f64).sqrt();
            for p in &mut params[spec.range()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            arch,
            layout,
            params,
        })
    }

    pub fn from_parts(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::for_arch(&arch);
        if params.len() != layout.total() {
            return Err(ModelError::ParamCount {
                expected: layout.total(),
                actual: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(ModelError::NonFiniteParam(layout.locate(i)));
        }
        Ok(Self {
            arch,
            layout,
            params,
        })
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.arch.clone(), params)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Fan-in bound of a hidden parameter array, `None` for zero-initialized ones.
    pub fn init_bound(&self, name: &str) -> Option<f64> {
        let spec = self.layout.get(name)?;
        (spec.fan_in > 0).then(|| (1.0 / spec.fan_in as f64).sqrt())
    }

    fn check_state(&self, stage: &'static str, g: &VectorGrid) -> Result<()> {
        let expected = self.arch.state_dims();
        if g.dims() != expected.as_slice() {
            return Err(ModelError::Shape {
                stage,
                expected,
                actual: g.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// Velocity at `state` and time `t`; same shape as the state.
    pub fn velocity_forward(&self, state: &VectorGrid, t: f64) -> Result<VectorGrid> {
        self.check_state("velocity input", state)?;
        let out = net::forward(&self.arch, &self.layout, &self.params, state.data(), t);
        Ok(state.with_data(out)?)
    }

    /// Exact reverse-mode derivative of [`Self::velocity_forward`]:
    /// `(cᵀ ∂v/∂θ, cᵀ ∂v/∂state)`. The decoder entries of the parameter
    /// gradient are zero.
    pub fn velocity_vjp(
        &self,
        state: &VectorGrid,
        t: f64,
        cotangent: &VectorGrid,
    ) -> Result<(Vec<f64>, VectorGrid)> {
        self.check_state("velocity input", state)?;
        self.check_state("velocity cotangent", cotangent)?;
        let (gp, gs) = net::vjp(
            &self.arch,
            &self.layout,
            &self.params,
            state.data(),
            t,
            cotangent.data(),
        );
        Ok((gp, state.with_data(gs)?))
    }

    /// Full-resolution displacement from latent `latent`: multilinear
    /// upsampling, the learned residual convolution, then a `window` box filter.
    pub fn decode(&self, latent: &VectorGrid, window: usize) -> Result<VectorGrid> {
        self.check_latent(latent)?;
        latent::decode(&self.arch, &self.layout, &self.params, latent, window)
    }

    fn check_latent(&self, latent: &VectorGrid) -> Result<()> {
        if self.arch.mode != Mode::Latent {
            return Err(ModelError::Arch("decode needs a latent-mode model".into()));
        }
        self.check_state("decoder input", latent)
    }

    /// Displacement `ψ − Id` represented by an ODE state.
    pub fn displacement(&self, state: &VectorGrid) -> Result<VectorGrid> {
        match self.arch.mode {
            Mode::Direct => {
                self.check_state("displacement", state)?;
                Ok(state.clone())
            }
            Mode::Latent => self.decode(state, self.arch.smoothing_window),
        }
    }

    /// Pulls a displacement cotangent back to the state. Returns
    /// `(parameter gradient, state cotangent)`; only decoder entries of the
    /// parameter gradient can be non-zero.
    pub(crate) fn displacement_vjp(
        &self,
        state: &VectorGrid,
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.arch.mode {
            Mode::Direct => Ok((vec![0.0; self.layout.total()], cotangent.to_vec())),
            Mode::Latent => {
                self.check_latent(state)?;
                let (g_res, g_state) = latent::decode_vjp(
                    &self.arch,
                    &self.layout,
                    &self.params,
                    state,
                    cotangent,
                    self.arch.smoothing_window,
                )?;
                let mut gp = vec![0.0; self.layout.total()];
                let spec = self.layout.get("decoder.residual").expect("latent layout");
                gp[spec.range()].copy_from_slice(&g_res);
                Ok((gp, g_state))
            }
        }
    }

    /// Initial ODE state: the encoded identity deformation.
    pub fn initial_state(&self) -> Result<VectorGrid> {
        let zero = VectorGrid::zeros(self.arch.dims.clone())?;
        match self.arch.mode {
            Mode::Direct => Ok(zero),
            Mode::Latent => encode(&zero, self.arch.latent_factor),
        }
    }

    pub fn state_grid(&self, data: Vec<f64>) -> Result<VectorGrid> {
        Ok(VectorGrid::new(self.arch.state_dims(), data)?)
    }
}

impl Dynamics for VelocityModel {
    fn eval(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
    ) -> std::result::Result<Vec<f64>, DynamicsError> {
        self.check_flat(state, params)?;
        Ok(net::forward(&self.arch, &self.layout, params, state, t))
    }

    fn vjp(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
        cotangent: &[f64],
    ) -> std::result::Result<(Vec<f64>, Vec<f64>), DynamicsError> {
        self.check_flat(state, params)?;
        if cotangent.len() != state.len() {
            return Err(Box::new(ModelError::Shape {
                stage: "velocity cotangent",
                expected: vec![state.len()],
                actual: vec![cotangent.len()],
            }));
        }
        let (gp, gs) = net::vjp(&self.arch, &self.layout, params, state, t, cotangent);
        Ok((gs, gp))
    }
}

impl VelocityModel {
    fn check_flat(&self, state: &[f64], params: &[f64]) -> std::result::Result<(), DynamicsError> {
        if state.len() != self.arch.state_len() {
            return Err(Box::new(ModelError::Shape {
                stage: "velocity input",
                expected: vec![self.arch.state_len()],
                actual: vec![state.len()],
            }));
        }
        if params.len() != self.layout.total() {
            return Err(Box::new(ModelError::ParamCount {
                expected: self.layout.total(),
                actual: params.len(),
            }));
        }
        Ok(())
    }
}
