//! Regular-lattice field containers and the spatial kernels the rest of the
//! crate builds on.
//!
//! Grids are row-major with the last axis fastest. Vector grids interleave
//! their components per voxel (channel-fastest), with channel `c` holding the
//! component along spatial axis `c`. All coordinates are in voxel units.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grids must have 2 or 3 spatial axes, got {0}")]
    BadRank(usize),
    #[error("every axis length must be positive, got {0:?}")]
    EmptyAxis(Vec<usize>),
    #[error("data length {actual} does not match the expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("dims mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite coordinate at voxel {0}")]
    NonFiniteCoordinate(usize),
    #[error("axis {axis} has length {len}; finite differences need at least 2")]
    AxisTooShort { axis: usize, len: usize },
    #[error("smoothing window must be odd and positive, got {0}")]
    BadWindow(usize),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// Row-major strides (in voxels) for `dims`.
pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

pub(crate) fn voxel_count(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// Writes the multi-index of flat voxel `v` into `idx`.
pub(crate) fn unravel(mut v: usize, dims: &[usize], idx: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        idx[a] = v % dims[a];
        v /= dims[a];
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() != 2 && dims.len() != 3 {
        return Err(GridError::BadRank(dims.len()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(GridError::EmptyAxis(dims.to_vec()));
    }
    Ok(())
}

fn check_data(data: &[f64], expected: usize) -> Result<()> {
    if data.len() != expected {
        return Err(GridError::LengthMismatch {
            expected,
            actual: data.len(),
        });
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(GridError::NonFinite(i));
    }
    Ok(())
}

/// Common view over scalar and vector grids.
pub trait Field: Sized {
    fn dims(&self) -> &[usize];
    fn channels(&self) -> usize;
    fn data(&self) -> &[f64];
    /// A field with the same dims and channel count holding `data`.
    fn with_data(&self, data: Vec<f64>) -> Result<Self>;

    fn voxels(&self) -> usize {
        voxel_count(self.dims())
    }
    fn ndim(&self) -> usize {
        self.dims().len()
    }
}

/// One real intensity per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        check_data(&data, voxel_count(&dims))?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        let n = voxel_count(&dims);
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    /// Builds a grid by evaluating `f` at every multi-index.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        check_dims(&dims)?;
        let n = voxel_count(&dims);
        let mut idx = vec![0; dims.len()];
        let data = (0..n)
            .map(|v| {
                unravel(v, &dims, &mut idx);
                f(&idx)
            })
            .collect();
        Self::new(dims, data)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let s = strides(&self.dims);
        self.data[idx.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl Field for ScalarGrid {
    fn dims(&self) -> &[usize] {
        &self.dims
    }
    fn channels(&self) -> usize {
        1
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
    fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims.clone(), data)
    }
}

/// One displacement or velocity vector per voxel, in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrid {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl VectorGrid {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        check_data(&data, voxel_count(&dims) * dims.len())?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        let n = voxel_count(&dims) * dims.len();
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    /// Builds a field by letting `f` fill the vector at every multi-index.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize], &mut [f64])) -> Result<Self> {
        check_dims(&dims)?;
        let c = dims.len();
        let n = voxel_count(&dims);
        let mut data = vec![0.0; n * c];
        let mut idx = vec![0; c];
        for (v, out) in data.chunks_exact_mut(c).enumerate() {
            unravel(v, &dims, &mut idx);
            f(&idx, out);
        }
        Self::new(dims, data)
    }

    pub fn get(&self, idx: &[usize]) -> &[f64] {
        let s = strides(&self.dims);
        let v: usize = idx.iter().zip(&s).map(|(i, s)| i * s).sum();
        let c = self.dims.len();
        &self.data[v * c..(v + 1) * c]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

impl Field for VectorGrid {
    fn dims(&self) -> &[usize] {
        &self.dims
    }
    fn channels(&self) -> usize {
        self.dims.len()
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
    fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims.clone(), data)
    }
}

/// Absolute voxel positions `q = {x_i}`, one coordinate vector per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCloud {
    dims: Vec<usize>,
    positions: Vec<f64>,
}

impl VoxelCloud {
    pub fn new(dims: Vec<usize>, positions: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        let expected = voxel_count(&dims) * dims.len();
        if positions.len() != expected {
            return Err(GridError::LengthMismatch {
                expected,
                actual: positions.len(),
            });
        }
        Ok(Self { dims, positions })
    }

    /// The undeformed lattice `q_0`.
    pub fn identity(dims: Vec<usize>) -> Result<Self> {
        Self::from_displacement(&VectorGrid::zeros(dims)?)
    }

    pub fn from_displacement(u: &VectorGrid) -> Result<Self> {
        let c = u.channels();
        let mut idx = vec![0; c];
        let mut positions = u.data().to_vec();
        for (v, p) in positions.chunks_exact_mut(c).enumerate() {
            unravel(v, u.dims(), &mut idx);
            for (p, &i) in p.iter_mut().zip(&idx) {
                *p += i as f64;
            }
        }
        Self::new(u.dims().to_vec(), positions)
    }

    pub fn to_displacement(&self) -> Result<VectorGrid> {
        let c = self.dims.len();
        let mut idx = vec![0; c];
        let mut data = self.positions.clone();
        for (v, p) in data.chunks_exact_mut(c).enumerate() {
            unravel(v, &self.dims, &mut idx);
            for (p, &i) in p.iter_mut().zip(&idx) {
                *p -= i as f64;
            }
        }
        VectorGrid::new(self.dims.clone(), data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        voxel_count(&self.dims)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-axis interpolation stencil for one query coordinate.
#[derive(Clone, Copy)]
struct AxisStencil {
    lo: usize,
    hi: usize,
    frac: f64,
    /// false when the coordinate was clamped, so its derivative is zero
    live: bool,
}

impl AxisStencil {
    fn new(s: f64, n: usize) -> Self {
        if n == 1 {
            return Self {
                lo: 0,
                hi: 0,
                frac: 0.0,
                live: false,
            };
        }
        let max = (n - 1) as f64;
        let live = (0.0..=max).contains(&s);
        let s = s.clamp(0.0, max);
        let lo = (s.floor() as usize).min(n - 2);
        Self {
            lo,
            hi: lo + 1,
            frac: s - lo as f64,
            live,
        }
    }
}

/// Multilinear interpolation of every channel at `point`, written to `out`.
/// If `grad` is given, it receives d(value)/d(point) laid out
/// `[channel * ndim + axis]`.
fn interpolate(
    dims: &[usize],
    strides: &[usize],
    channels: usize,
    data: &[f64],
    point: &[f64],
    out: &mut [f64],
    mut grad: Option<&mut [f64]>,
) {
    let nd = dims.len();
    let mut st = [AxisStencil {
        lo: 0,
        hi: 0,
        frac: 0.0,
        live: false,
    }; 3];
    for a in 0..nd {
        st[a] = AxisStencil::new(point[a], dims[a]);
    }
    out.fill(0.0);
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    for corner in 0..(1usize << nd) {
        let mut w = 1.0;
        let mut flat = 0;
        let mut pw = [1.0f64; 3];
        let mut dw = [0.0f64; 3];
        for a in 0..nd {
            let upper = corner >> (nd - 1 - a) & 1 == 1;
            let (i, wa, da) = if upper {
                (st[a].hi, st[a].frac, 1.0)
            } else {
                (st[a].lo, 1.0 - st[a].frac, -1.0)
            };
            flat += i * strides[a];
            pw[a] = wa;
            dw[a] = if st[a].live { da } else { 0.0 };
            w *= wa;
        }
        let vals = &data[flat * channels..(flat + 1) * channels];
        if w != 0.0 {
            for (o, &v) in out.iter_mut().zip(vals) {
                *o += w * v;
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            for a in 0..nd {
                if dw[a] == 0.0 {
                    continue;
                }
                let mut wa = dw[a];
                for b in 0..nd {
                    if b != a {
                        wa *= pw[b];
                    }
                }
                for (c, &v) in vals.iter().enumerate() {
                    g[c * nd + a] += wa * v;
                }
            }
        }
    }
}

/// Multilinear interpolation of `field` at every position of `coords`.
///
/// Coordinates outside the lattice are clamped to the boundary first. The
/// result holds `field.channels()` values per query point.
pub fn sample_linear<F: Field>(field: &F, coords: &VoxelCloud) -> Result<Vec<f64>> {
    let nd = field.ndim();
    if coords.dims().len() != nd {
        return Err(GridError::DimsMismatch {
            left: field.dims().to_vec(),
            right: coords.dims().to_vec(),
        });
    }
    let c = field.channels();
    let s = strides(field.dims());
    let mut out = vec![0.0; coords.len() * c];
    for (v, (p, o)) in coords
        .positions()
        .chunks_exact(nd)
        .zip(out.chunks_exact_mut(c))
        .enumerate()
    {
        if p.iter().any(|x| !x.is_finite()) {
            return Err(GridError::NonFiniteCoordinate(v));
        }
        interpolate(field.dims(), &s, c, field.data(), p, o, None);
    }
    Ok(out)
}

fn check_same_dims(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(GridError::DimsMismatch {
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

/// Backward warp: output voxel `x` reads `image` at `x + displacement(x)`.
pub fn warp_image(image: &ScalarGrid, displacement: &VectorGrid) -> Result<ScalarGrid> {
    Ok(warp_with_grad(image, displacement, false)?.0)
}

/// Backward warp that also returns d(warped(x))/d(displacement(x)) per voxel,
/// laid out like `displacement`.
pub(crate) fn warp_with_grad(
    image: &ScalarGrid,
    displacement: &VectorGrid,
    want_grad: bool,
) -> Result<(ScalarGrid, Vec<f64>)> {
    check_same_dims(image.dims(), displacement.dims())?;
    let dims = image.dims();
    let nd = dims.len();
    let s = strides(dims);
    let mut out = vec![0.0; image.voxels()];
    let mut grad = if want_grad {
        vec![0.0; image.voxels() * nd]
    } else {
        Vec::new()
    };
    let mut idx = [0usize; 3];
    let mut p = [0.0f64; 3];
    for (v, u) in displacement.data().chunks_exact(nd).enumerate() {
        unravel(v, dims, &mut idx[..nd]);
        for a in 0..nd {
            p[a] = idx[a] as f64 + u[a];
        }
        let g = if want_grad {
            Some(&mut grad[v * nd..(v + 1) * nd])
        } else {
            None
        };
        interpolate(dims, &s, 1, image.data(), &p[..nd], &mut out[v..v + 1], g);
    }
    Ok((ScalarGrid::new(dims.to_vec(), out)?, grad))
}

fn check_diff_axes(dims: &[usize]) -> Result<()> {
    match dims.iter().position(|&n| n < 2) {
        Some(axis) => Err(GridError::AxisTooShort {
            axis,
            len: dims[axis],
        }),
        None => Ok(()),
    }
}

/// Derivative along `axis`: central differences inside, one-sided at the ends.
pub(crate) fn diff_axis(data: &[f64], dims: &[usize], channels: usize, axis: usize) -> Vec<f64> {
    let n = dims[axis];
    let st = strides(dims)[axis];
    let mut out = vec![0.0; data.len()];
    for v in 0..voxel_count(dims) {
        let i = (v / st) % n;
        for c in 0..channels {
            let at = |w: usize| data[w * channels + c];
            out[v * channels + c] = if i == 0 {
                at(v + st) - at(v)
            } else if i == n - 1 {
                at(v) - at(v - st)
            } else {
                0.5 * (at(v + st) - at(v - st))
            };
        }
    }
    out
}

/// Transpose of [`diff_axis`].
pub(crate) fn diff_axis_transpose(
    grad_out: &[f64],
    dims: &[usize],
    channels: usize,
    axis: usize,
) -> Vec<f64> {
    let n = dims[axis];
    let st = strides(dims)[axis];
    let mut out = vec![0.0; grad_out.len()];
    for v in 0..voxel_count(dims) {
        let i = (v / st) % n;
        for c in 0..channels {
            let g = grad_out[v * channels + c];
            let (plus, minus, w) = if i == 0 {
                (v + st, v, 1.0)
            } else if i == n - 1 {
                (v, v - st, 1.0)
            } else {
                (v + st, v - st, 0.5)
            };
            out[plus * channels + c] += w * g;
            out[minus * channels + c] -= w * g;
        }
    }
    out
}

/// Per-axis derivative fields of `field` (voxel spacing).
pub fn spatial_gradient<F: Field>(field: &F) -> Result<Vec<F>> {
    check_diff_axes(field.dims())?;
    (0..field.ndim())
        .map(|a| field.with_data(diff_axis(field.data(), field.dims(), field.channels(), a)))
        .collect()
}

/// Determinant of `I + ∇u` at every voxel.
pub fn jacobian_determinants(displacement: &VectorGrid) -> Result<ScalarGrid> {
    let grads = spatial_gradient(displacement)?;
    let nd = displacement.ndim();
    let det = (0..displacement.voxels())
        .map(|v| {
            // j[c][a] = d(psi_c)/d(x_a)
            let mut j = [[0.0f64; 3]; 3];
            for (a, g) in grads.iter().enumerate() {
                for (c, row) in j.iter_mut().enumerate().take(nd) {
                    row[a] = g.data()[v * nd + c] + if a == c { 1.0 } else { 0.0 };
                }
            }
            if nd == 2 {
                j[0][0] * j[1][1] - j[0][1] * j[1][0]
            } else {
                j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
            }
        })
        .collect();
    ScalarGrid::new(displacement.dims().to_vec(), det)
}

/// Fraction (in `[0, 1]`, not percent) of voxels whose Jacobian determinant
/// is negative.
pub fn fold_percentage(displacement: &VectorGrid) -> Result<f64> {
    let det = jacobian_determinants(displacement)?;
    let folded = det.data().iter().filter(|&&d| d < 0.0).count();
    Ok(folded as f64 / det.voxels() as f64)
}

/// Mirror index without edge repetition (`-1 -> 1`, `n -> n-2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(GridError::BadWindow(window));
    }
    Ok(())
}

fn smooth_axis(
    data: &[f64],
    dims: &[usize],
    channels: usize,
    axis: usize,
    window: usize,
    transpose: bool,
) -> Vec<f64> {
    let n = dims[axis];
    let st = strides(dims)[axis];
    let r = (window / 2) as isize;
    let scale = 1.0 / window as f64;
    let mut out = vec![0.0; data.len()];
    for v in 0..voxel_count(dims) {
        let i = (v / st) % n;
        let base = v - i * st;
        for k in -r..=r {
            let w = base + reflect(i as isize + k, n) * st;
            for c in 0..channels {
                if transpose {
                    out[w * channels + c] += scale * data[v * channels + c];
                } else {
                    out[v * channels + c] += scale * data[w * channels + c];
                }
            }
        }
    }
    out
}

/// Moving average over a `window^d` neighbourhood, stride 1, reflect-padded.
pub fn box_smooth(field: &VectorGrid, window: usize) -> Result<VectorGrid> {
    check_window(window)?;
    if window == 1 {
        return Ok(field.clone());
    }
    let mut data = field.data().to_vec();
    for a in 0..field.ndim() {
        data = smooth_axis(&data, field.dims(), field.channels(), a, window, false);
    }
    field.with_data(data)
}

/// Transpose of [`box_smooth`] applied to a cotangent laid out like the field.
pub(crate) fn box_smooth_transpose(
    cotangent: &[f64],
    dims: &[usize],
    window: usize,
) -> Result<Vec<f64>> {
    check_window(window)?;
    let mut data = cotangent.to_vec();
    if window == 1 {
        return Ok(data);
    }
    for a in (0..dims.len()).rev() {
        data = smooth_axis(&data, dims, dims.len(), a, window, true);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp2(n: usize, m: usize) -> ScalarGrid {
        ScalarGrid::from_fn(vec![n, m], |i| (i[0] * 10 + i[1]) as f64 * 0.1).unwrap()
    }

    #[test]
    fn sample_at_node_returns_stored_value() {
        let g = ramp2(5, 6);
        let mut cloud = VoxelCloud::identity(vec![5, 6]).unwrap();
        let vals = sample_linear(&g, &cloud).unwrap();
        assert_eq!(vals, g.data());
        cloud.positions[0] = 2.0;
        cloud.positions[1] = 3.0;
        let vals = sample_linear(&g, &cloud).unwrap();
        assert_eq!(vals[0], g.get(&[2, 3]));
    }

    #[test]
    fn midpoint_and_clamp() {
        let g = ScalarGrid::from_fn(vec![4, 4], |i| i[1] as f64).unwrap();
        let mut cloud = VoxelCloud::identity(vec![4, 4]).unwrap();
        cloud.positions[0] = 0.0;
        cloud.positions[1] = 0.5;
        cloud.positions[2] = -5.0;
        cloud.positions[3] = -5.0;
        let vals = sample_linear(&g, &cloud).unwrap();
        assert_eq!(vals[0], 0.5);
        assert_eq!(vals[1], g.get(&[0, 0]));
    }

    #[test]
    fn non_finite_coordinate_names_voxel() {
        let g = ramp2(3, 3);
        let mut cloud = VoxelCloud::identity(vec![3, 3]).unwrap();
        cloud.positions[8] = f64::NAN;
        assert_eq!(
            sample_linear(&g, &cloud),
            Err(GridError::NonFiniteCoordinate(4))
        );
    }

    #[test]
    fn vector_field_sampling_is_per_channel() {
        let u = VectorGrid::from_fn(vec![3, 3], |i, o| {
            o[0] = i[0] as f64;
            o[1] = -(i[1] as f64);
        })
        .unwrap();
        let mut cloud = VoxelCloud::identity(vec![3, 3]).unwrap();
        cloud.positions[0] = 1.5;
        cloud.positions[1] = 0.25;
        let vals = sample_linear(&u, &cloud).unwrap();
        assert_eq!(&vals[..2], &[1.5, -0.25]);
    }

    #[test]
    fn warp_identity_and_constant() {
        let g = ramp2(6, 5);
        let zero = VectorGrid::zeros(vec![6, 5]).unwrap();
        assert_eq!(warp_image(&g, &zero).unwrap(), g);

        let c = ScalarGrid::from_fn(vec![6, 5], |_| 0.3).unwrap();
        let u = VectorGrid::from_fn(vec![6, 5], |i, o| {
            o[0] = (i[1] as f64).sin() * 3.7;
            o[1] = -2.2;
        })
        .unwrap();
        assert!(warp_image(&c, &u)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn warp_unit_shift_matches_index_shift() {
        let g = ramp2(6, 5);
        let u = VectorGrid::from_fn(vec![6, 5], |_, o| {
            o[0] = 1.0;
            o[1] = 0.0;
        })
        .unwrap();
        let w = warp_image(&g, &u).unwrap();
        // oracle: out[i][j] = in[min(i+1, n-1)][j]
        for i in 0..6 {
            for j in 0..5 {
                assert_eq!(w.get(&[i, j]), g.get(&[(i + 1).min(5), j]));
            }
        }
    }

    #[test]
    fn warp_dims_mismatch() {
        let g = ramp2(6, 5);
        let u = VectorGrid::zeros(vec![5, 6]).unwrap();
        assert!(matches!(
            warp_image(&g, &u),
            Err(GridError::DimsMismatch { .. })
        ));
    }

    #[test]
    fn warp_coordinate_gradient_matches_finite_differences() {
        let g = ScalarGrid::from_fn(vec![7, 6], |i| {
            ((i[0] as f64) * 0.7).sin() + (i[1] as f64 * 0.3).cos()
        })
        .unwrap();
        let u = VectorGrid::from_fn(vec![7, 6], |i, o| {
            o[0] = 0.31 + 0.1 * i[1] as f64;
            o[1] = -0.43 + 0.05 * i[0] as f64;
        })
        .unwrap();
        let (_, grad) = warp_with_grad(&g, &u, true).unwrap();
        let h = 1e-6;
        for k in [0, 5, 17, 30, 41] {
            for c in 0..2 {
                let mut up = u.data().to_vec();
                up[k * 2 + c] += h;
                let mut dn = u.data().to_vec();
                dn[k * 2 + c] -= h;
                let wp = warp_image(&g, &u.with_data(up).unwrap()).unwrap();
                let wd = warp_image(&g, &u.with_data(dn).unwrap()).unwrap();
                let fd = (wp.data()[k] - wd.data()[k]) / (2.0 * h);
                assert!(
                    (fd - grad[k * 2 + c]).abs() < 1e-7,
                    "{fd} vs {}",
                    grad[k * 2 + c]
                );
            }
        }
    }

    #[test]
    fn gradient_of_constant_and_linear_fields() {
        let c = ScalarGrid::from_fn(vec![4, 5], |_| 1.25).unwrap();
        for g in spatial_gradient(&c).unwrap() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
        let lin = ScalarGrid::from_fn(vec![5, 4], |i| 2.0 * i[0] as f64).unwrap();
        let g = spatial_gradient(&lin).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 2.0));
        assert!(g[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_square_at_interior() {
        let sq = ScalarGrid::from_fn(vec![5, 3], |i| (i[0] * i[0]) as f64).unwrap();
        let g = spatial_gradient(&sq).unwrap();
        assert_eq!(g[0].get(&[2, 1]), 4.0);
    }

    #[test]
    fn gradient_rejects_singleton_axis() {
        let g = ScalarGrid::zeros(vec![4, 1]).unwrap();
        assert_eq!(
            spatial_gradient(&g).unwrap_err(),
            GridError::AxisTooShort { axis: 1, len: 1 }
        );
    }

    #[test]
    fn diff_transpose_is_adjoint() {
        let dims = [4usize, 3, 5];
        let n = 60 * 3;
        let x: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.7).collect();
        for a in 0..3 {
            let dx = diff_axis(&x, &dims, 3, a);
            let dty = diff_axis_transpose(&y, &dims, 3, a);
            let l: f64 = dx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let r: f64 = x.iter().zip(&dty).map(|(a, b)| a * b).sum();
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_examples() {
        let zero = VectorGrid::zeros(vec![4, 4, 4]).unwrap();
        let det = jacobian_determinants(&zero).unwrap();
        assert!(det.data().iter().all(|&d| d == 1.0));
        assert_eq!(fold_percentage(&zero).unwrap(), 0.0);

        let scale = VectorGrid::from_fn(vec![5, 5, 5], |i, o| {
            for a in 0..3 {
                o[a] = 0.5 * i[a] as f64;
            }
        })
        .unwrap();
        let det = jacobian_determinants(&scale).unwrap();
        assert!((det.get(&[2, 2, 2]) - 3.375).abs() < 1e-12);

        let refl = VectorGrid::from_fn(vec![5, 5, 5], |i, o| {
            o[0] = -2.0 * i[0] as f64;
            o[1] = 0.0;
            o[2] = 0.0;
        })
        .unwrap();
        let det = jacobian_determinants(&refl).unwrap();
        assert!((det.get(&[2, 2, 2]) + 1.0).abs() < 1e-12);
        assert_eq!(fold_percentage(&refl).unwrap(), 1.0);
    }

    #[test]
    fn smoothing_examples() {
        let c = VectorGrid::from_fn(vec![6, 7], |_, o| {
            o[0] = 0.4;
            o[1] = -1.5;
        })
        .unwrap();
        let s = box_smooth(&c, 5).unwrap();
        assert!(s
            .data()
            .iter()
            .zip(c.data())
            .all(|(a, b)| (a - b).abs() < 1e-14));
        assert_eq!(box_smooth(&c, 1).unwrap(), c);

        let imp = VectorGrid::from_fn(vec![7, 7, 7], |i, o| {
            if i == [3, 3, 3] {
                o.fill(1.0);
            }
        })
        .unwrap();
        let s = box_smooth(&imp, 3).unwrap();
        for x in 0..7usize {
            for y in 0..7usize {
                for z in 0..7usize {
                    let inside = [x, y, z].iter().all(|&k| (2..=4).contains(&k));
                    let want = if inside { 1.0 / 27.0 } else { 0.0 };
                    assert!((s.get(&[x, y, z])[0] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn smoothing_rejects_even_window() {
        let c = VectorGrid::zeros(vec![4, 4]).unwrap();
        assert_eq!(box_smooth(&c, 4), Err(GridError::BadWindow(4)));
        assert_eq!(box_smooth(&c, 0), Err(GridError::BadWindow(0)));
    }

    #[test]
    fn smoothing_transpose_is_adjoint() {
        let dims = vec![6, 5];
        let x = VectorGrid::from_fn(dims.clone(), |i, o| {
            o[0] = (i[0] as f64 * 1.3).sin();
            o[1] = (i[1] as f64 * 0.7 + i[0] as f64).cos();
        })
        .unwrap();
        let y: Vec<f64> = (0..60).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let sx = box_smooth(&x, 5).unwrap();
        let sty = box_smooth_transpose(&y, &dims, 5).unwrap();
        let l: f64 = sx.data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let r: f64 = x.data().iter().zip(&sty).map(|(a, b)| a * b).sum();
        assert!((l - r).abs() < 1e-12);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn voxel_cloud_round_trip() {
        let u = VectorGrid::from_fn(vec![3, 4, 2], |i, o| {
            o[0] = i[2] as f64 * 0.5;
            o[1] = -0.25;
            o[2] = i[0] as f64;
        })
        .unwrap();
        let q = VoxelCloud::from_displacement(&u).unwrap();
        assert_eq!(q.to_displacement().unwrap(), u);
    }
}
