//! Regression loss, its state cotangents, and image-quality metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SequenceDataset;
use crate::grid::{
    diff_axis, diff_axis_transpose, strides, unravel, warp_with_grad, Field, GridError, ScalarGrid,
    VectorGrid,
};
use crate::model::{ModelError, VelocityModel};
use crate::odeint::{integrate_trajectory, OdeError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("correlation undefined: {0} input has zero variance")]
    ZeroVariance(&'static str),
    #[error("dims differ: {left:?} vs {right:?}")]
    DimsMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("reference image is constant, its range is zero")]
    ConstantReference,
    #[error("axis {axis} has length {len}, shorter than the SSIM window {window}")]
    WindowTooLarge {
        axis: usize,
        len: usize,
        window: usize,
    },
    #[error("loss weights must be finite and non-negative, got λ1={0}, λ2={1}")]
    BadWeights(f64, f64),
    #[error("expected {expected} states, got {actual}")]
    StateCount { expected: usize, actual: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Smoothness weight.
    pub lambda1: f64,
    /// Boundary weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if ok(self.lambda1) && ok(self.lambda2) {
            Ok(())
        } else {
            Err(ObjectiveError::BadWeights(self.lambda1, self.lambda2))
        }
    }
}

/// Loss terms summed over observations `k ≥ 1`. `smoothness` and `boundary`
/// are unweighted; `per_time[k-1]` is the similarity term of observation k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub similarity: f64,
    pub smoothness: f64,
    pub boundary: f64,
    pub per_time: Vec<f64>,
}

fn check_dims(a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(ObjectiveError::DimsMismatch {
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

struct Correlation {
    value: f64,
    mean_a: f64,
    mean_b: f64,
    saa: f64,
    sbb: f64,
}

fn correlate(a: &[f64], b: &[f64]) -> Result<Correlation> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    match (saa > 0.0, sbb > 0.0) {
        (false, false) => Err(ObjectiveError::ZeroVariance("each")),
        (false, true) => Err(ObjectiveError::ZeroVariance("the first")),
        (true, false) => Err(ObjectiveError::ZeroVariance("the second")),
        (true, true) => Ok(Correlation {
            value: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
            mean_a: ma,
            mean_b: mb,
            saa,
            sbb,
        }),
    }
}

/// Global normalized cross-correlation.
pub fn ncc(a: &ScalarGrid, b: &ScalarGrid) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    Ok(correlate(a.data(), b.data())?.value)
}

pub fn similarity_loss(warped: &ScalarGrid, target: &ScalarGrid) -> Result<f64> {
    Ok(1.0 - ncc(warped, target)?)
}

/// Gradient of `1 − ncc(a, b)` with respect to `a`.
fn similarity_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let c = correlate(a, b)?;
    let norm = (c.saa * c.sbb).sqrt();
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| -((y - c.mean_b) / norm - c.value * (x - c.mean_a) / c.saa))
        .collect();
    Ok((1.0 - c.value, grad))
}

/// Mean over voxels of the squared Frobenius norm of the displacement
/// gradient.
pub fn smoothness_loss(displacement: &VectorGrid) -> Result<f64> {
    Ok(smoothness_parts(displacement, false)?.0)
}

fn smoothness_parts(u: &VectorGrid, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let dims = u.dims();
    if let Some(axis) = dims.iter().position(|&n| n < 2) {
        return Err(GridError::AxisTooShort {
            axis,
            len: dims[axis],
        }
        .into());
    }
    let n = u.voxels() as f64;
    let mut loss = 0.0;
    let mut grad = if want_grad {
        vec![0.0; u.data().len()]
    } else {
        Vec::new()
    };
    for a in 0..u.ndim() {
        let d = diff_axis(u.data(), dims, u.channels(), a);
        loss += d.iter().map(|x| x * x).sum::<f64>();
        if want_grad {
            let scaled: Vec<f64> = d.iter().map(|x| 2.0 * x / n).collect();
            for (g, t) in grad
                .iter_mut()
                .zip(diff_axis_transpose(&scaled, dims, u.channels(), a))
            {
                *g += t;
            }
        }
    }
    Ok((loss / n, grad))
}

/// Number of boundary planes (out of 2·d) a voxel lies on.
fn plane_count(idx: &[usize], dims: &[usize]) -> usize {
    idx.iter()
        .zip(dims)
        .map(|(&i, &n)| usize::from(i == 0) + usize::from(i + 1 == n))
        .sum()
}

/// Mean squared displacement over the 2·d boundary planes; voxels on several
/// planes count once per plane.
pub fn boundary_loss(displacement: &VectorGrid) -> f64 {
    boundary_parts(displacement, false).0
}

fn boundary_parts(u: &VectorGrid, want_grad: bool) -> (f64, Vec<f64>) {
    let dims = u.dims();
    let nd = u.ndim();
    let mut idx = [0usize; 3];
    let mut sum = 0.0;
    let mut members = 0usize;
    let mut grad = if want_grad {
        vec![0.0; u.data().len()]
    } else {
        Vec::new()
    };
    for (v, px) in u.data().chunks_exact(nd).enumerate() {
        unravel(v, dims, &mut idx[..nd]);
        let m = plane_count(&idx[..nd], dims);
        if m == 0 {
            continue;
        }
        members += m;
        sum += m as f64 * px.iter().map(|x| x * x).sum::<f64>();
        if want_grad {
            for c in 0..nd {
                grad[v * nd + c] = 2.0 * m as f64 * px[c];
            }
        }
    }
    let norm = members as f64;
    grad.iter_mut().for_each(|g| *g /= norm);
    (sum / norm, grad)
}

/// Loss gradients at the observed ODE states.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub breakdown: LossBreakdown,
    /// `∂loss/∂y(t_k)` for every observation, the first always zero.
    pub state_cotangents: Vec<Vec<f64>>,
    /// Gradient through the decoder only, laid out like the model parameters.
    pub decoder_params: Vec<f64>,
}

/// Integrates the model through the dataset's normalized times.
pub fn trajectory(model: &VelocityModel, dataset: &SequenceDataset) -> Result<Vec<Vec<f64>>> {
    check_dims(&model.arch().dims, dataset.dims())?;
    let y0 = model.initial_state()?;
    Ok(integrate_trajectory(
        model,
        model.params(),
        y0.data(),
        dataset.normalized_times(),
        &model.arch().solver,
    )?)
}

pub fn regression_loss(
    model: &VelocityModel,
    dataset: &SequenceDataset,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let states = trajectory(model, dataset)?;
    loss_from_states(model, dataset, &states, weights)
}

pub fn loss_cotangents(
    model: &VelocityModel,
    dataset: &SequenceDataset,
    weights: &LossWeights,
) -> Result<LossGradients> {
    let states = trajectory(model, dataset)?;
    cotangents_from_states(model, dataset, &states, weights)
}

/// The loss given precomputed states `y(t_k)`, one per observation.
pub fn loss_from_states(
    model: &VelocityModel,
    dataset: &SequenceDataset,
    states: &[Vec<f64>],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(evaluate(model, dataset, states, weights, false)?.breakdown)
}

/// The loss and its gradients given precomputed states.
pub fn cotangents_from_states(
    model: &VelocityModel,
    dataset: &SequenceDataset,
    states: &[Vec<f64>],
    weights: &LossWeights,
) -> Result<LossGradients> {
    evaluate(model, dataset, states, weights, true)
}

fn evaluate(
    model: &VelocityModel,
    dataset: &SequenceDataset,
    states: &[Vec<f64>],
    weights: &LossWeights,
    want_grad: bool,
) -> Result<LossGradients> {
    weights.validate()?;
    check_dims(&model.arch().dims, dataset.dims())?;
    if states.len() != dataset.len() {
        return Err(ObjectiveError::StateCount {
            expected: dataset.len(),
            actual: states.len(),
        });
    }
    let baseline = dataset.baseline();
    let mut out = LossGradients {
        breakdown: LossBreakdown {
            total: 0.0,
            similarity: 0.0,
            smoothness: 0.0,
            boundary: 0.0,
            per_time: Vec::new(),
        },
        state_cotangents: vec![vec![0.0; model.arch().state_len()]],
        decoder_params: vec![0.0; model.layout().total()],
    };
    for (state, target) in states.iter().zip(dataset.frames()).skip(1) {
        let state = model.state_grid(state.clone())?;
        let u = model.displacement(&state)?;
        let (warped, dwarp) = warp_with_grad(baseline, &u, want_grad)?;
        let (sim, dsim) = if want_grad {
            similarity_grad(warped.data(), target.data())?
        } else {
            (
                1.0 - correlate(warped.data(), target.data())?.value,
                Vec::new(),
            )
        };
        let (smt, dsmt) = smoothness_parts(&u, want_grad)?;
        let (bdr, dbdr) = boundary_parts(&u, want_grad);
        let b = &mut out.breakdown;
        b.similarity += sim;
        b.smoothness += smt;
        b.boundary += bdr;
        b.per_time.push(sim);
        if want_grad {
            let nd = u.ndim();
            let du: Vec<f64> = (0..u.data().len())
                .map(|i| {
                    dsim[i / nd] * dwarp[i] + weights.lambda1 * dsmt[i] + weights.lambda2 * dbdr[i]
                })
                .collect();
            let (gp, gy) = model.displacement_vjp(&state, &du)?;
            for (acc, g) in out.decoder_params.iter_mut().zip(gp) {
                *acc += g;
            }
            out.state_cotangents.push(gy);
        } else {
            out.state_cotangents.push(Vec::new());
        }
    }
    let b = &mut out.breakdown;
    b.total = b.similarity + weights.lambda1 * b.smoothness + weights.lambda2 * b.boundary;
    if !want_grad {
        out.state_cotangents.clear();
    }
    Ok(out)
}

/// Root-mean-square error divided by the intensity range of `reference`.
pub fn nrmse(pred: &ScalarGrid, reference: &ScalarGrid) -> Result<f64> {
    check_dims(pred.dims(), reference.dims())?;
    let (lo, hi) = reference.min_max();
    if hi <= lo {
        return Err(ObjectiveError::ConstantReference);
    }
    Ok(mse(pred.data(), reference.data()).sqrt() / (hi - lo))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Peak signal-to-noise ratio in dB; infinite for identical images.
pub fn psnr(pred: &ScalarGrid, reference: &ScalarGrid, peak: f64) -> Result<f64> {
    check_dims(pred.dims(), reference.dims())?;
    let e = mse(pred.data(), reference.data());
    Ok(if e == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / e).log10()
    })
}

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Window means over every valid placement of a `SSIM_WINDOW`-wide cube.
fn window_means(data: &[f64], dims: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut cur = data.to_vec();
    let mut cur_dims = dims.to_vec();
    for a in 0..dims.len() {
        let mut next_dims = cur_dims.clone();
        next_dims[a] = cur_dims[a] - SSIM_WINDOW + 1;
        let st_in = strides(&cur_dims);
        let n_out: usize = next_dims.iter().product();
        let mut idx = [0usize; 3];
        let mut next = vec![0.0; n_out];
        for (o, slot) in next.iter_mut().enumerate() {
            unravel(o, &next_dims, &mut idx[..dims.len()]);
            let base: usize = idx[..dims.len()]
                .iter()
                .zip(&st_in)
                .map(|(i, s)| i * s)
                .sum();
            *slot = (0..SSIM_WINDOW)
                .map(|k| cur[base + k * st_in[a]])
                .sum::<f64>()
                / SSIM_WINDOW as f64;
        }
        cur = next;
        cur_dims = next_dims;
    }
    (cur_dims, cur)
}

/// Mean local SSIM with a uniform 7-wide window over valid placements,
/// population statistics, `L = 1`.
pub fn ssim(pred: &ScalarGrid, reference: &ScalarGrid) -> Result<f64> {
    check_dims(pred.dims(), reference.dims())?;
    if let Some(axis) = pred.dims().iter().position(|&n| n < SSIM_WINDOW) {
        return Err(ObjectiveError::WindowTooLarge {
            axis,
            len: pred.dims()[axis],
            window: SSIM_WINDOW,
        });
    }
    let (x, y) = (pred.data(), reference.data());
    let dims = pred.dims();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect()
    };
    let mx = window_means(x, dims).1;
    let my = window_means(y, dims).1;
    let mxx = window_means(&prod(&|a, _| a * a), dims).1;
    let myy = window_means(&prod(&|_, b| b * b), dims).1;
    let mxy = window_means(&prod(&|a, b| a * b), dims).1;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            (2.0 * ux * uy + C1) * (2.0 * cxy + C2) / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Mode};

    fn line(v: &[f64]) -> ScalarGrid {
        ScalarGrid::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    fn image(dims: Vec<usize>, seed: u64) -> ScalarGrid {
        let mut s = seed;
        ScalarGrid::from_fn(dims, |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .unwrap()
    }

    #[test]
    fn ncc_examples() {
        let v = ncc(&line(&[0.0, 1.0, 2.0]), &line(&[0.0, 1.0, 1.0])).unwrap();
        assert!((v - 3f64.sqrt() / 2.0).abs() < 1e-15);
        let a = image(vec![6, 5], 1);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let b = ScalarGrid::new(
            a.dims().to_vec(),
            a.data().iter().map(|x| 2.0 * x + 3.0).collect(),
        )
        .unwrap();
        assert!((ncc(&a, &b).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(
            similarity_loss(&line(&[0.0, 1.0]), &line(&[1.0, 0.0])).unwrap(),
            2.0
        );
    }

    #[test]
    fn ncc_rejects_constant_inputs() {
        let c = line(&[1.0, 1.0, 1.0]);
        let v = line(&[0.0, 1.0, 2.0]);
        assert!(matches!(ncc(&c, &c), Err(ObjectiveError::ZeroVariance(_))));
        assert!(matches!(ncc(&c, &v), Err(ObjectiveError::ZeroVariance(_))));
        assert!(matches!(ncc(&v, &c), Err(ObjectiveError::ZeroVariance(_))));
    }

    #[test]
    fn smoothness_examples() {
        let z = VectorGrid::zeros(vec![5, 5, 5]).unwrap();
        assert_eq!(smoothness_loss(&z).unwrap(), 0.0);
        let t = VectorGrid::from_fn(vec![5, 5, 5], |_, o| o.copy_from_slice(&[0.3, -1.0, 2.0]))
            .unwrap();
        assert_eq!(smoothness_loss(&t).unwrap(), 0.0);
        let ramp = VectorGrid::from_fn(vec![5, 5, 5], |i, o| {
            o.fill(0.0);
            o[0] = i[0] as f64;
        })
        .unwrap();
        assert!((smoothness_loss(&ramp).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn boundary_examples() {
        let c = [0.5, -2.0, 1.5];
        let u = VectorGrid::from_fn(vec![4, 4, 4], |_, o| o.copy_from_slice(&c)).unwrap();
        // brute force over the six planes
        let (mut sum, mut count) = (0.0, 0usize);
        for axis in 0..3 {
            for side in [0usize, 3] {
                for v in 0..64usize {
                    let idx = [v / 16, (v / 4) % 4, v % 4];
                    if idx[axis] == side {
                        sum += u.get(&idx).iter().map(|x| x * x).sum::<f64>();
                        count += 1;
                    }
                }
            }
        }
        let expected: f64 = c.iter().map(|x| x * x).sum();
        assert!((sum / count as f64 - expected).abs() < 1e-14);
        assert!((boundary_loss(&u) - expected).abs() < 1e-14);

        let centre = VectorGrid::from_fn(vec![5, 5, 5], |i, o| {
            o.fill(if i == [2, 2, 2] { 1.0 } else { 0.0 });
        })
        .unwrap();
        assert_eq!(boundary_loss(&centre), 0.0);
        assert_eq!(
            boundary_loss(&VectorGrid::zeros(vec![5, 5, 5]).unwrap()),
            0.0
        );
    }

    #[test]
    fn boundary_weights_corners_by_membership() {
        // 3×3 field, one at the corner only: corner sits on 2 planes, 4·3 memberships in total
        let u = VectorGrid::from_fn(vec![3, 3], |i, o| {
            o.fill(if i == [0, 0] { 1.0 } else { 0.0 })
        })
        .unwrap();
        assert!((boundary_loss(&u) - 2.0 * 2.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn metric_examples() {
        let r = line(&[0.0, 1.0]);
        assert_eq!(nrmse(&r, &r).unwrap(), 0.0);
        assert_eq!(nrmse(&line(&[1.0, 0.0]), &r).unwrap(), 1.0);
        assert!(matches!(
            nrmse(&r, &line(&[2.0, 2.0])),
            Err(ObjectiveError::ConstantReference)
        ));
        assert_eq!(psnr(&r, &r, 1.0).unwrap(), f64::INFINITY);
        let p = ScalarGrid::new(vec![2, 2], vec![0.1, 0.1, 0.1, 0.1]).unwrap();
        let z = ScalarGrid::zeros(vec![2, 2]).unwrap();
        assert!((psnr(&p, &z, 1.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_examples() {
        let a = image(vec![12, 10], 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // constant patches: only the luminance term departs from 1
        let x = ScalarGrid::from_fn(vec![7, 7], |_| 0.2).unwrap();
        let y = ScalarGrid::from_fn(vec![7, 7], |_| 0.7).unwrap();
        let lum = (2.0 * 0.2 * 0.7 + C1) / (0.04 + 0.49 + C1);
        let s = ssim(&x, &y).unwrap();
        assert!((s - lum).abs() < 1e-12, "{s} vs {lum}");
        assert!(s < 1.0);
        assert!(matches!(
            ssim(&image(vec![6, 9], 1), &image(vec![6, 9], 2)),
            Err(ObjectiveError::WindowTooLarge {
                axis: 0,
                len: 6,
                window: 7
            })
        ));
    }

    fn tiny_model(mode: Mode) -> VelocityModel {
        let mut arch = Arch::new(mode, vec![8, 8]);
        arch.conv_channels = vec![2];
        arch.hidden_width = 6;
        arch.embed_width = 3;
        arch.latent_factor = 2;
        arch.smoothing_window = 3;
        VelocityModel::init(arch, 9).unwrap()
    }

    fn blob_sequence(n: usize, frames: usize) -> SequenceDataset {
        let imgs = (0..frames)
            .map(|k| {
                ScalarGrid::from_fn(vec![n, n], |i| {
                    let dx = i[0] as f64 - 3.5 - 0.4 * k as f64;
                    let dy = i[1] as f64 - 3.5;
                    (-(dx * dx + dy * dy) / 6.0).exp()
                })
                .unwrap()
            })
            .collect();
        SequenceDataset::new(imgs, (0..frames).map(|k| k as f64).collect()).unwrap()
    }

    #[test]
    fn fresh_model_loss_is_identity_loss() {
        let m = tiny_model(Mode::Direct);
        let d = blob_sequence(8, 3);
        let b = regression_loss(&m, &d, &LossWeights::default()).unwrap();
        let expected: f64 = d.frames()[1..]
            .iter()
            .map(|f| 1.0 - ncc(d.baseline(), f).unwrap())
            .sum();
        assert_eq!(b.similarity, expected);
        assert_eq!(b.smoothness, 0.0);
        assert_eq!(b.boundary, 0.0);
        assert_eq!(b.total, expected);
        assert_eq!(b.per_time.len(), 2);
    }

    #[test]
    fn constant_sequence_has_zero_loss_and_cotangents() {
        let m = tiny_model(Mode::Latent);
        let f = blob_sequence(8, 1 + 1).frames()[0].clone();
        let d = SequenceDataset::new(vec![f.clone(), f.clone(), f], vec![0.0, 1.0, 2.0]).unwrap();
        let g = loss_cotangents(&m, &d, &LossWeights::default()).unwrap();
        assert_eq!(g.breakdown.total, 0.0);
        assert!(g
            .state_cotangents
            .iter()
            .flatten()
            .all(|&x| x.abs() < 1e-15));
        assert!(g.decoder_params.iter().all(|&x| x.abs() < 1e-15));
    }

    fn perturbed_states(m: &VelocityModel, d: &SequenceDataset, seed: u64) -> Vec<Vec<f64>> {
        let mut s = seed;
        let len = m.arch().state_len();
        (0..d.len())
            .map(|k| {
                (0..len)
                    .map(|_| {
                        s = s
                            .wrapping_mul(6364136223846793005)
                            .wrapping_add(1442695040888963407);
                        if k == 0 {
                            0.0
                        } else {
                            ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.8
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn check_fd(mode: Mode) {
        let m = tiny_model(mode);
        let d = blob_sequence(8, 3);
        let w = LossWeights {
            lambda1: 0.3,
            lambda2: 0.2,
        };
        let states = perturbed_states(&m, &d, 17);
        let g = cotangents_from_states(&m, &d, &states, &w).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        let scale = g
            .state_cotangents
            .iter()
            .flatten()
            .fold(0.0f64, |a, &x| a.max(x.abs()));
        for k in 1..d.len() {
            for i in 0..states[k].len() {
                let mut p = states.clone();
                p[k][i] += h;
                let lp = loss_from_states(&m, &d, &p, &w).unwrap().total;
                p[k][i] -= 2.0 * h;
                let lm = loss_from_states(&m, &d, &p, &w).unwrap().total;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g.state_cotangents[k][i]).abs() / scale;
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "{mode:?}: {worst}");
    }

    #[test]
    fn direct_cotangents_match_finite_differences() {
        check_fd(Mode::Direct);
    }

    #[test]
    fn latent_cotangents_match_finite_differences() {
        check_fd(Mode::Latent);
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let m = tiny_model(Mode::Latent);
        let d = blob_sequence(8, 2);
        let w = LossWeights::default();
        let states = perturbed_states(&m, &d, 5);
        // move the residual off zero so every path is exercised
        let spec = m.layout().get("decoder.residual").unwrap().clone();
        let mut params = m.params().to_vec();
        for (j, p) in params[spec.range()].iter_mut().enumerate() {
            *p = 0.02 * ((j * 7 % 11) as f64 - 5.0);
        }
        let m = m.with_params(params.clone()).unwrap();
        let g = cotangents_from_states(&m, &d, &states, &w).unwrap();
        let scale = g.decoder_params.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(scale > 0.0);
        let h = 1e-6;
        for i in spec.range() {
            let mut p = params.clone();
            p[i] += h;
            let lp = loss_from_states(&m.with_params(p.clone()).unwrap(), &d, &states, &w)
                .unwrap()
                .total;
            p[i] -= 2.0 * h;
            let lm = loss_from_states(&m.with_params(p).unwrap(), &d, &states, &w)
                .unwrap()
                .total;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g.decoder_params[i]).abs() / scale < 1e-4,
                "{}",
                m.layout().locate(i)
            );
        }
    }

    #[test]
    fn regularizer_cotangent_is_linear_in_lambda1() {
        let m = tiny_model(Mode::Direct);
        let d = blob_sequence(8, 2);
        let states = perturbed_states(&m, &d, 3);
        let at = |l1| {
            cotangents_from_states(
                &m,
                &d,
                &states,
                &LossWeights {
                    lambda1: l1,
                    lambda2: 0.0,
                },
            )
            .unwrap()
        };
        let (g0, g1, g2) = (at(0.0), at(1.0), at(2.0));
        for i in 0..g0.state_cotangents[1].len() {
            let r1 = g1.state_cotangents[1][i] - g0.state_cotangents[1][i];
            let r2 = g2.state_cotangents[1][i] - g0.state_cotangents[1][i];
            assert!((r2 - 2.0 * r1).abs() <= 1e-12 * (1.0 + r1.abs()));
        }
    }

    #[test]
    fn total_combines_weighted_terms() {
        let m = tiny_model(Mode::Direct);
        let d = blob_sequence(8, 3);
        let states = perturbed_states(&m, &d, 8);
        let w = LossWeights {
            lambda1: 0.7,
            lambda2: 0.01,
        };
        let b = loss_from_states(&m, &d, &states, &w).unwrap();
        assert!((b.total - (b.similarity + 0.7 * b.smoothness + 0.01 * b.boundary)).abs() < 1e-14);
        assert!((b.similarity - b.per_time.iter().sum::<f64>()).abs() < 1e-14);
        assert!(b.smoothness > 0.0 && b.boundary > 0.0);
    }
}
