//! Forward pass and exact reverse pass of the velocity network.
//!
//! Pipeline: stride-2 3-tap convolutions with tanh, flatten, add a learned
//! time embedding (affine, tanh, affine), two dense layers with tanh between,
//! reshape to the state layout. Feature maps are channel-major internally.

use super::{Arch, ParamLayout};
use crate::grid::{strides, unravel, voxel_count};

const NONE: u32 = u32::MAX;

pub(crate) fn conv_out_len(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

fn taps(ndim: usize) -> usize {
    3usize.pow(ndim as u32)
}

/// For each output voxel and kernel tap, the input voxel it reads (or NONE
/// for zero padding).
fn gather_table(in_dims: &[usize], stride: usize) -> (Vec<usize>, Vec<u32>) {
    let nd = in_dims.len();
    let out_dims: Vec<usize> = in_dims.iter().map(|&n| conv_out_len(n, stride)).collect();
    let k = taps(nd);
    let in_strides = strides(in_dims);
    let n_out = voxel_count(&out_dims);
    let mut table = vec![NONE; n_out * k];
    let mut o_idx = vec![0; nd];
    let mut k_idx = vec![0; nd];
    let kdims = vec![3; nd];
    for o in 0..n_out {
        unravel(o, &out_dims, &mut o_idx);
        for tap in 0..k {
            unravel(tap, &kdims, &mut k_idx);
            let mut flat = 0usize;
            let mut inside = true;
            for a in 0..nd {
                let p = (o_idx[a] * stride + k_idx[a]) as isize - 1;
                if p < 0 || p >= in_dims[a] as isize {
                    inside = false;
                    break;
                }
                flat += p as usize * in_strides[a];
            }
            if inside {
                table[o * k + tap] = flat as u32;
            }
        }
    }
    (out_dims, table)
}

/// Zero-padded 3-tap convolution over channel-major `x`.
pub(crate) fn conv_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    c_in: usize,
    c_out: usize,
    in_dims: &[usize],
    stride: usize,
) -> (Vec<usize>, Vec<f64>) {
    let k = taps(in_dims.len());
    let n_in = voxel_count(in_dims);
    let (out_dims, table) = gather_table(in_dims, stride);
    let n_out = voxel_count(&out_dims);
    let mut out = vec![0.0; c_out * n_out];
    for co in 0..c_out {
        let b = bias.map_or(0.0, |b| b[co]);
        let dst = &mut out[co * n_out..(co + 1) * n_out];
        dst.fill(b);
        for ci in 0..c_in {
            let w = &weight[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let src = &x[ci * n_in..(ci + 1) * n_in];
            for (o, acc) in dst.iter_mut().enumerate() {
                let row = &table[o * k..(o + 1) * k];
                let mut s = 0.0;
                for (&idx, &wk) in row.iter().zip(w) {
                    if idx != NONE {
                        s += wk * src[idx as usize];
                    }
                }
                *acc += s;
            }
        }
    }
    (out_dims, out)
}

/// Reverse pass of [`conv_forward`]: `(grad_weight, grad_bias, grad_x)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_vjp(
    x: &[f64],
    weight: &[f64],
    c_in: usize,
    c_out: usize,
    in_dims: &[usize],
    stride: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = taps(in_dims.len());
    let n_in = voxel_count(in_dims);
    let (out_dims, table) = gather_table(in_dims, stride);
    let n_out = voxel_count(&out_dims);
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; c_out];
    let mut gx = vec![0.0; x.len()];
    for co in 0..c_out {
        let g_row = &grad_out[co * n_out..(co + 1) * n_out];
        gb[co] = g_row.iter().sum();
        for ci in 0..c_in {
            let base = (co * c_in + ci) * k;
            let w = &weight[base..base + k];
            let src = &x[ci * n_in..(ci + 1) * n_in];
            let gw_row = &mut gw[base..base + k];
            let gx_row = &mut gx[ci * n_in..(ci + 1) * n_in];
            for (o, &g) in g_row.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (tap, &idx) in table[o * k..(o + 1) * k].iter().enumerate() {
                    if idx != NONE {
                        gw_row[tap] += g * src[idx as usize];
                        gx_row[idx as usize] += g * w[tap];
                    }
                }
            }
        }
    }
    (gw, gb, gx)
}

pub(crate) fn to_channel_major(data: &[f64], channels: usize) -> Vec<f64> {
    let n = data.len() / channels;
    let mut out = vec![0.0; data.len()];
    for (v, px) in data.chunks_exact(channels).enumerate() {
        for (c, &x) in px.iter().enumerate() {
            out[c * n + v] = x;
        }
    }
    out
}

pub(crate) fn to_channel_fastest(data: &[f64], channels: usize) -> Vec<f64> {
    let n = data.len() / channels;
    let mut out = vec![0.0; data.len()];
    for (v, px) in out.chunks_exact_mut(channels).enumerate() {
        for (c, x) in px.iter_mut().enumerate() {
            *x = data[c * n + v];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

/// `W x + b` with `W` row-major `[out, in]`.
fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len())
        .zip(b)
        .map(|(row, b)| b + dot(row, x))
        .collect()
}

/// Accumulates `gW += g xᵀ`, returns `Wᵀ g`.
fn dense_vjp(w: &[f64], x: &[f64], g: &[f64], gw: &mut [f64]) -> Vec<f64> {
    let mut gx = vec![0.0; x.len()];
    for ((row, grow), &gi) in w
        .chunks_exact(x.len())
        .zip(gw.chunks_exact_mut(x.len()))
        .zip(g)
    {
        if gi == 0.0 {
            continue;
        }
        axpy(gi, x, grow);
        axpy(gi, row, &mut gx);
    }
    gx
}

struct Trace {
    /// channel-major input followed by every stage's tanh output
    acts: Vec<Vec<f64>>,
    e1: Vec<f64>,
    z: Vec<f64>,
    h: Vec<f64>,
}

fn run(
    arch: &Arch,
    layout: &ParamLayout,
    params: &[f64],
    state: &[f64],
    t: f64,
) -> (Vec<f64>, Trace) {
    let p = |name: &str| layout.slice(params, name);
    let nd = arch.ndim();
    let stage_dims = arch.stage_dims();

    let mut acts = Vec::with_capacity(arch.conv_channels.len() + 1);
    acts.push(to_channel_major(state, nd));
    let mut c_in = nd;
    for (s, &c_out) in arch.conv_channels.iter().enumerate() {
        let (_, mut y) = conv_forward(
            acts.last().expect("non-empty"),
            p(&format!("conv{s}.weight")),
            Some(p(&format!("conv{s}.bias"))),
            c_in,
            c_out,
            &stage_dims[s],
            2,
        );
        y.iter_mut().for_each(|v| *v = v.tanh());
        acts.push(y);
        c_in = c_out;
    }

    let e1: Vec<f64> = p("embed0.weight")
        .iter()
        .zip(p("embed0.bias"))
        .map(|(w, b)| (w * t + b).tanh())
        .collect();
    let emb = dense(p("embed1.weight"), p("embed1.bias"), &e1);
    let z: Vec<f64> = acts
        .last()
        .expect("non-empty")
        .iter()
        .zip(&emb)
        .map(|(f, e)| f + e)
        .collect();
    let mut h = dense(p("fc1.weight"), p("fc1.bias"), &z);
    h.iter_mut().for_each(|v| *v = v.tanh());
    let out = dense(p("fc2.weight"), p("fc2.bias"), &h);
    (out, Trace { acts, e1, z, h })
}

pub(crate) fn forward(
    arch: &Arch,
    layout: &ParamLayout,
    params: &[f64],
    state: &[f64],
    t: f64,
) -> Vec<f64> {
    run(arch, layout, params, state, t).0
}

/// `(grad_params, grad_state)` for output cotangent `cot`.
pub(crate) fn vjp(
    arch: &Arch,
    layout: &ParamLayout,
    params: &[f64],
    state: &[f64],
    t: f64,
    cot: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (_, tr) = run(arch, layout, params, state, t);
    let p = |name: &str| layout.slice(params, name);
    let mut grad = vec![0.0; params.len()];
    let range = |name: &str| layout.get(name).expect("layout entry").range();

    // fc2
    let gh = dense_vjp(p("fc2.weight"), &tr.h, cot, &mut grad[range("fc2.weight")]);
    grad[range("fc2.bias")].copy_from_slice(cot);
    // tanh, fc1
    let g_pre1: Vec<f64> = gh
        .iter()
        .zip(&tr.h)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    let gz = dense_vjp(
        p("fc1.weight"),
        &tr.z,
        &g_pre1,
        &mut grad[range("fc1.weight")],
    );
    grad[range("fc1.bias")].copy_from_slice(&g_pre1);
    // time embedding
    let ge1 = dense_vjp(
        p("embed1.weight"),
        &tr.e1,
        &gz,
        &mut grad[range("embed1.weight")],
    );
    grad[range("embed1.bias")].copy_from_slice(&gz);
    let g_pre_e: Vec<f64> = ge1
        .iter()
        .zip(&tr.e1)
        .map(|(g, e)| g * (1.0 - e * e))
        .collect();
    for (w, g) in grad[range("embed0.weight")].iter_mut().zip(&g_pre_e) {
        *w = g * t;
    }
    grad[range("embed0.bias")].copy_from_slice(&g_pre_e);

    // conv stages, last to first
    let stage_dims = arch.stage_dims();
    let nd = arch.ndim();
    let mut g_act = gz;
    for s in (0..arch.conv_channels.len()).rev() {
        let c_out = arch.conv_channels[s];
        let c_in = if s == 0 {
            nd
        } else {
            arch.conv_channels[s - 1]
        };
        let g_pre: Vec<f64> = g_act
            .iter()
            .zip(&tr.acts[s + 1])
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let wname = format!("conv{s}.weight");
        let (gw, gb, gx) = conv_vjp(
            &tr.acts[s],
            p(&wname),
            c_in,
            c_out,
            &stage_dims[s],
            2,
            &g_pre,
        );
        grad[range(&wname)].copy_from_slice(&gw);
        grad[range(&format!("conv{s}.bias"))].copy_from_slice(&gb);
        g_act = gx;
    }
    (grad, to_channel_fastest(&g_act, nd))
}
