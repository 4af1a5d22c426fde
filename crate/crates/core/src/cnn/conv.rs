//! Valid, stride-1 3D cross-correlation via im2col and GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Multi-channel volume, layout `[channel][x][y][z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Volume {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims[0] * dims[1] * dims[2]);
        Volume { channels, dims, data }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }
}

pub fn output_dims(input: [usize; 3], kernel: usize) -> [usize; 3] {
    input.map(|d| d + 1 - kernel)
}

/// Unfold `input` into a `(channels * k^3) x out_voxels` matrix.
pub fn im2col(input: &Volume, kernel: usize) -> Vec<f64> {
    let [_, y, z] = input.dims;
    let [ox, oy, oz] = output_dims(input.dims, kernel);
    let rows = input.channels * kernel * kernel * kernel;
    let cols = ox * oy * oz;
    let mut out = vec![0.0; rows * cols];
    let mut row = 0;
    for c in 0..input.channels {
        let src = input.channel(c);
        for kx in 0..kernel {
            for ky in 0..kernel {
                for kz in 0..kernel {
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for i in 0..ox {
                        for j in 0..oy {
                            let s = ((i + kx) * y + (j + ky)) * z + kz;
                            let d = (i * oy + j) * oz;
                            dst[d..d + oz].copy_from_slice(&src[s..s + oz]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add the column matrix into a volume.
pub fn col2im(cols: &[f64], channels: usize, dims: [usize; 3], kernel: usize) -> Volume {
    let [_, y, z] = dims;
    let [ox, oy, oz] = output_dims(dims, kernel);
    let ncol = ox * oy * oz;
    let mut out = Volume::zeros(channels, dims);
    let mut row = 0;
    for c in 0..channels {
        let dst = out.channel_mut(c);
        for kx in 0..kernel {
            for ky in 0..kernel {
                for kz in 0..kernel {
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for i in 0..ox {
                        for j in 0..oy {
                            let d = ((i + kx) * y + (j + ky)) * z + kz;
                            let s = (i * oy + j) * oz;
                            for (a, b) in dst[d..d + oz].iter_mut().zip(&src[s..s + oz]) {
                                *a += b;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    out
}

/// `out (m x n) = a (m x k) * b (k x n) + beta * out`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, out: &mut [f64]) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("gemm out shape");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// `out (m x n) = a (m x k) * b^T` with `b` stored as `n x k`.
pub(crate) fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, out: &mut [f64]) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((n, k), b).expect("gemm rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("gemm out shape");
    general_mat_mul(1.0, &a, &b.t(), beta, &mut c);
}

/// `out (m x n) = a^T * b` with `a` stored as `k x m`.
pub(crate) fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let a = ArrayView2::from_shape((k, m), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("gemm out shape");
    general_mat_mul(1.0, &a.t(), &b, 0.0, &mut c);
}

/// Forward convolution. `weights` is `out_channels x (in_channels * k^3)`.
pub fn conv_forward(input: &Volume, weights: &[f64], bias: &[f64], kernel: usize) -> Volume {
    let out_ch = bias.len();
    let k = input.channels * kernel * kernel * kernel;
    let dims = output_dims(input.dims, kernel);
    let n = dims[0] * dims[1] * dims[2];
    let cols = im2col(input, kernel);
    let mut out = Volume::zeros(out_ch, dims);
    for (o, b) in bias.iter().enumerate() {
        out.channel_mut(o).fill(*b);
    }
    gemm(out_ch, k, n, weights, &cols, 1.0, &mut out.data);
    out
}

/// Parameter gradients (accumulated) and optionally the input gradient of
/// one sample's convolution.
pub fn conv_backward(
    input: &Volume,
    weights: &[f64],
    grad_out: &Volume,
    kernel: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input: bool,
) -> Option<Volume> {
    let out_ch = grad_out.channels;
    let k = input.channels * kernel * kernel * kernel;
    let n = grad_out.voxels();
    let cols = im2col(input, kernel);
    gemm_bt(out_ch, n, k, &grad_out.data, &cols, 1.0, grad_w);
    for (o, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out.channel(o).iter().sum::<f64>();
    }
    if !want_input {
        return None;
    }
    let mut dcols = cols;
    gemm_at(k, out_ch, n, weights, &grad_out.data, &mut dcols);
    Some(col2im(&dcols, input.channels, input.dims, kernel))
}
