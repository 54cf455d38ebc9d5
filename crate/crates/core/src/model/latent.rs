//! Average-pool encoder and upsampling decoder of the latent pathway.

use super::net::{conv_forward, conv_vjp, to_channel_fastest, to_channel_major};
use super::{Arch, ModelError, ParamLayout, Result};
use crate::grid::{box_smooth, box_smooth_transpose, voxel_count, Field, VectorGrid};

/// Per-channel average pooling with window = stride = `factor`.
pub fn encode(displacement: &VectorGrid, factor: usize) -> Result<VectorGrid> {
    let dims = displacement.dims();
    if factor == 0 || dims.iter().any(|d| d % factor != 0) {
        return Err(ModelError::NotDivisible {
            dims: dims.to_vec(),
            factor,
        });
    }
    if factor == 1 {
        return Ok(displacement.clone());
    }
    let c = displacement.channels();
    let mut data = displacement.data().to_vec();
    let mut cur = dims.to_vec();
    for a in 0..dims.len() {
        let inner: usize = cur[a + 1..].iter().product::<usize>() * c;
        let n = cur[a];
        let m = n / factor;
        let outer: usize = cur[..a].iter().product();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for j in 0..m {
                let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
                for k in 0..factor {
                    let src = &data
                        [(o * n + j * factor + k) * inner..(o * n + j * factor + k + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                dst.iter_mut().for_each(|v| *v /= factor as f64);
            }
        }
        data = out;
        cur[a] = m;
    }
    Ok(VectorGrid::new(cur, data)?)
}

/// Interpolation taps `(lo, hi, w_lo, w_hi)` for each fine index of an axis
/// upsampled from `coarse` cells by `factor`. Cell centres are aligned
/// (fine index `i` sits at coarse coordinate `(i + ½)/factor − ½`), and the
/// outermost half cells extrapolate linearly so affine fields are reproduced.
fn axis_taps(coarse: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..coarse * factor)
        .map(|i| {
            if coarse == 1 {
                return (0, 0, 1.0, 0.0);
            }
            let s = (i as f64 + 0.5) / factor as f64 - 0.5;
            let lo = (s.floor().max(0.0) as usize).min(coarse - 2);
            let frac = s - lo as f64;
            (lo, lo + 1, 1.0 - frac, frac)
        })
        .collect()
}

fn resample_axis(
    data: &[f64],
    dims: &[usize],
    channels: usize,
    axis: usize,
    factor: usize,
    transpose: bool,
) -> Vec<f64> {
    // `dims` are the coarse dims along `axis`, fine elsewhere
    let inner: usize = dims[axis + 1..].iter().product::<usize>() * channels;
    let outer: usize = dims[..axis].iter().product();
    let coarse = dims[axis];
    let fine = coarse * factor;
    let taps = axis_taps(coarse, factor);
    let mut out = vec![
        0.0;
        if transpose {
            outer * coarse * inner
        } else {
            outer * fine * inner
        }
    ];
    for o in 0..outer {
        for (i, &(lo, hi, wl, wh)) in taps.iter().enumerate() {
            let f0 = (o * fine + i) * inner;
            let l0 = (o * coarse + lo) * inner;
            let h0 = (o * coarse + hi) * inner;
            for r in 0..inner {
                if transpose {
                    let g = data[f0 + r];
                    out[l0 + r] += wl * g;
                    out[h0 + r] += wh * g;
                } else {
                    out[f0 + r] = wl * data[l0 + r] + wh * data[h0 + r];
                }
            }
        }
    }
    out
}

/// Multilinear upsampling of a channel-fastest field by `factor`.
pub(crate) fn upsample(data: &[f64], dims: &[usize], factor: usize) -> (Vec<usize>, Vec<f64>) {
    let c = dims.len();
    let mut cur = dims.to_vec();
    let mut out = data.to_vec();
    for a in 0..dims.len() {
        out = resample_axis(&out, &cur, c, a, factor, false);
        cur[a] *= factor;
    }
    (cur, out)
}

fn upsample_transpose(grad: &[f64], coarse_dims: &[usize], factor: usize) -> Vec<f64> {
    let c = coarse_dims.len();
    let mut cur: Vec<usize> = coarse_dims.iter().map(|d| d * factor).collect();
    let mut out = grad.to_vec();
    for a in (0..c).rev() {
        cur[a] = coarse_dims[a];
        out = resample_axis(&out, &cur, c, a, factor, true);
    }
    out
}

fn residual<'a>(layout: &ParamLayout, params: &'a [f64]) -> &'a [f64] {
    layout.slice(params, "decoder.residual")
}

struct Upsampled {
    dims: Vec<usize>,
    channel_major: Vec<f64>,
}

fn pre_smooth(
    arch: &Arch,
    layout: &ParamLayout,
    params: &[f64],
    latent: &VectorGrid,
) -> (Upsampled, Vec<f64>) {
    let nd = arch.ndim();
    let (dims, up) = upsample(latent.data(), latent.dims(), arch.latent_factor);
    let up_cm = to_channel_major(&up, nd);
    let (_, res) = conv_forward(&up_cm, residual(layout, params), None, nd, nd, &dims, 1);
    let z: Vec<f64> = up_cm.iter().zip(&res).map(|(a, b)| a + b).collect();
    (
        Upsampled {
            dims,
            channel_major: up_cm,
        },
        to_channel_fastest(&z, nd),
    )
}

pub(crate) fn decode(
    arch: &Arch,
    layout: &ParamLayout,
    params: &[f64],
    latent: &VectorGrid,
    window: usize,
) -> Result<VectorGrid> {
    let (up, z) = pre_smooth(arch, layout, params, latent);
    Ok(box_smooth(&VectorGrid::new(up.dims, z)?, window)?)
}

/// `(grad residual kernel, grad latent)` for a displacement cotangent.
pub(crate) fn decode_vjp(
    arch: &Arch,
    layout: &ParamLayout,
    params: &[f64],
    latent: &VectorGrid,
    cotangent: &[f64],
    window: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nd = arch.ndim();
    let (up, _) = pre_smooth(arch, layout, params, latent);
    debug_assert_eq!(cotangent.len(), voxel_count(&up.dims) * nd);
    let z_bar = to_channel_major(&box_smooth_transpose(cotangent, &up.dims, window)?, nd);
    let (g_res, _, g_in) = conv_vjp(
        &up.channel_major,
        residual(layout, params),
        nd,
        nd,
        &up.dims,
        1,
        &z_bar,
    );
    let g_up: Vec<f64> = z_bar.iter().zip(&g_in).map(|(a, b)| a + b).collect();
    let g_latent = upsample_transpose(
        &to_channel_fastest(&g_up, nd),
        latent.dims(),
        arch.latent_factor,
    );
    Ok((g_res, g_latent))
}
