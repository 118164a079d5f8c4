//! Per-example forward, reverse and tangent passes through the MLP.
//!
//! Parameter layout (shared by every module): for each layer `l` with fan-in
//! `n_in` and fan-out `n_out`, the `n_out x n_in` weight matrix in row-major
//! order, followed by the `n_out` biases.

use super::real::Real;
use super::MlpArchitecture;

/// Activations of one example: `acts[0]` is the input, `acts[l + 1]` the
/// output of layer `l` (after `tanh` for hidden layers, raw for the last).
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub(crate) acts: Vec<Vec<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new(arch: &MlpArchitecture) -> Self {
        Self {
            acts: arch.widths().iter().map(|&w| vec![T::zero(); w]).collect(),
        }
    }

    pub fn output(&self) -> &[T] {
        self.acts
            .last()
            .expect("architecture has at least two layers")
    }
}

/// Two reusable delta buffers sized for the widest layer.
#[derive(Debug, Clone)]
pub struct Scratch<T> {
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Real> Scratch<T> {
    pub fn new(arch: &MlpArchitecture) -> Self {
        let w = arch.widths().iter().copied().max().unwrap_or(1);
        Self {
            a: vec![T::zero(); w],
            b: vec![T::zero(); w],
        }
    }
}

pub fn forward<T: Real>(arch: &MlpArchitecture, theta: &[T], x: &[f64], tape: &mut Tape<T>) {
    let widths = arch.widths();
    let n_layers = widths.len() - 1;
    for (dst, &xi) in tape.acts[0].iter_mut().zip(x) {
        *dst = T::cst(xi);
    }
    let mut off = 0;
    for l in 0..n_layers {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let bias = off + n_out * n_in;
        let (head, tail) = tape.acts.split_at_mut(l + 1);
        let input = &head[l];
        let output = &mut tail[0];
        let hidden = l + 1 < n_layers;
        for o in 0..n_out {
            let row = &theta[off + o * n_in..off + (o + 1) * n_in];
            let mut z = theta[bias + o];
            for (w, a) in row.iter().zip(input.iter()) {
                z += *w * *a;
            }
            output[o] = if hidden { z.tanh() } else { z };
        }
        off = bias + n_out;
    }
}

/// Accumulates `weight * J^T d_out` into `grad`, where `J` is the parameter
/// Jacobian of the network output for the example stored in `tape`.
pub fn backward<T: Real>(
    arch: &MlpArchitecture,
    theta: &[T],
    tape: &Tape<T>,
    d_out: &[T],
    weight: f64,
    grad: &mut [T],
    scratch: &mut Scratch<T>,
) {
    let widths = arch.widths();
    let n_layers = widths.len() - 1;
    let offsets = arch.layer_offsets();
    let Scratch { a: delta, b: next } = scratch;
    for (d, &g) in delta.iter_mut().zip(d_out) {
        *d = g.scale(weight);
    }
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let off = offsets[l];
        let bias = off + n_out * n_in;
        let a_prev = &tape.acts[l];
        for o in 0..n_out {
            let d = delta[o];
            let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
            for (g, a) in row.iter_mut().zip(a_prev.iter()) {
                *g += d * *a;
            }
            grad[bias + o] += d;
        }
        if l > 0 {
            for i in 0..n_in {
                next[i] = T::zero();
            }
            for o in 0..n_out {
                let d = delta[o];
                let row = &theta[off + o * n_in..off + (o + 1) * n_in];
                for (nx, w) in next[..n_in].iter_mut().zip(row.iter()) {
                    *nx += *w * d;
                }
            }
            for i in 0..n_in {
                let a = a_prev[i];
                next[i] = next[i] * (T::cst(1.0) - a * a);
            }
            std::mem::swap(delta, next);
        }
    }
}

/// Jacobian-vector product `J dir` using the activations cached in `tape`
/// (which must have been produced by [`forward`] at `theta`).
pub fn jvp(
    arch: &MlpArchitecture,
    theta: &[f64],
    tape: &Tape<f64>,
    dir: &[f64],
    out: &mut [f64],
    scratch: &mut Scratch<f64>,
) {
    let widths = arch.widths();
    let n_layers = widths.len() - 1;
    let offsets = arch.layer_offsets();
    let Scratch {
        a: tangent,
        b: next,
    } = scratch;
    for t in tangent[..widths[0]].iter_mut() {
        *t = 0.0;
    }
    for l in 0..n_layers {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let off = offsets[l];
        let bias = off + n_out * n_in;
        let a_prev = &tape.acts[l];
        let a_next = &tape.acts[l + 1];
        let hidden = l + 1 < n_layers;
        for o in 0..n_out {
            let w_row = &theta[off + o * n_in..off + (o + 1) * n_in];
            let d_row = &dir[off + o * n_in..off + (o + 1) * n_in];
            let mut dz = dir[bias + o];
            for i in 0..n_in {
                dz += d_row[i] * a_prev[i] + w_row[i] * tangent[i];
            }
            next[o] = if hidden {
                (1.0 - a_next[o] * a_next[o]) * dz
            } else {
                dz
            };
        }
        std::mem::swap(tangent, next);
    }
    out.copy_from_slice(&tangent[..widths[n_layers]]);
}
