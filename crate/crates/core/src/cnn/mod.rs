//! From-scratch 3D convolutional regressor mapping a level-set tensor to
//! one aerodynamic coefficient.
//!
//! Each block is a valid stride-1 convolution, batch standardization (no
//! affine parameters) and a leaky ReLU; the last block is flattened into a
//! single fully connected output. Targets are z-scored during training and
//! de-normalized at prediction.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod norm;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::geometry::{loft_design, DesignVector};
use crate::levelset::{distance_field, GridSpec};
use crate::{Error, Result};

pub use adam::AdamState;
pub use conv::Volume;
pub use norm::{batch_norm, leaky_relu, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM, DEFAULT_LEAK};
pub use train::{train, HistoryRow, SampleSet, TrainConfig, TrainReport, VecSamples};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "CL")]
    Cl,
    #[serde(rename = "CDi")]
    Cdi,
}

impl Target {
    pub fn label(self) -> &'static str {
        match self {
            Target::Cl => "CL",
            Target::Cdi => "CDi",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cl" => Ok(Target::Cl),
            "cdi" => Ok(Target::Cdi),
            _ => Err(Error::Usage(format!("unknown target {s:?} (expected CL or CDi)"))),
        }
    }
}

/// Kernel sizes and output channel counts of the convolutional blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub kernels: Vec<usize>,
    pub channels: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            kernels: vec![4, 3, 3, 3],
            channels: vec![5, 10, 15, 20],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.kernels.len() != self.channels.len() {
            return Err(Error::validation(format!(
                "architecture needs matching non-empty kernel and channel lists, got {} and {}",
                self.kernels.len(),
                self.channels.len()
            )));
        }
        if self.kernels.iter().chain(&self.channels).any(|&v| v == 0) {
            return Err(Error::validation("kernel sizes and channel counts must be at least 1"));
        }
        Ok(())
    }

    /// Spatial dims after each block.
    pub fn block_dims(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        self.validate()?;
        let mut dims = input;
        let mut out = Vec::with_capacity(self.kernels.len());
        for (l, &k) in self.kernels.iter().enumerate() {
            if dims.iter().any(|&d| d < k) {
                return Err(Error::dimension(format!(
                    "layer {}: input {:?} smaller than kernel {k}",
                    l + 1,
                    dims
                )));
            }
            dims = conv::output_dims(dims, k);
            out.push(dims);
        }
        Ok(out)
    }
}

/// Affine map between model outputs and physical coefficient values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }
}

impl Normalization {
    /// z-score constants of `targets`; a constant set gets unit scale.
    pub fn fit(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return Self::default();
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Normalization { mean, std }
    }

    pub fn encode(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn decode(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out_channels x in_channels x k x k x k`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvLayer {
            kernel,
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * kernel.pow(3)],
            bias: vec![0.0; out_channels],
            running_mean: vec![0.0; out_channels],
            running_var: vec![1.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Convolution of one multi-channel volume (no normalization).
    pub fn convolve(&self, input: &Volume) -> Result<Volume> {
        if input.channels != self.in_channels {
            return Err(Error::dimension(format!(
                "expected {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        if input.dims.iter().any(|&d| d < self.kernel) {
            return Err(Error::dimension(format!(
                "input {:?} smaller than kernel {}",
                input.dims, self.kernel
            )));
        }
        Ok(conv::conv_forward(input, &self.weights, &self.bias, self.kernel))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    pub layers: Vec<ConvLayer>,
    pub fc_weights: Vec<f64>,
    pub fc_bias: f64,
    pub input_dims: [usize; 3],
    pub target: Target,
    pub normalization: Normalization,
    pub bn_eps: f64,
    pub leak: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

/// Gradients in [`CnnModel::params`] order: per layer weights then bias,
/// then FC weights and FC bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

/// Activations and batch statistics of one training-mode forward pass.
pub struct ForwardPass {
    /// `activations[l][i]`: output of block `l` for sample `i`.
    activations: Vec<Vec<Volume>>,
    stats: Vec<(Vec<f64>, Vec<f64>)>,
    /// Normalized-space outputs.
    pub outputs: Vec<f64>,
}

impl ForwardPass {
    pub fn batch_stats(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.stats
    }
}

/// `1/2 * mean (pred - target)^2`.
pub fn loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return 0.0;
    }
    0.5 * pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

impl CnnModel {
    /// All-zero parameters; running statistics at their identity values.
    pub fn zeros(arch: &Architecture, input_dims: [usize; 3], target: Target) -> Result<Self> {
        let dims = arch.block_dims(input_dims)?;
        let mut layers = Vec::with_capacity(arch.kernels.len());
        let mut c_in = 1;
        for (&k, &c) in arch.kernels.iter().zip(&arch.channels) {
            layers.push(ConvLayer::zeros(k, c_in, c));
            c_in = c;
        }
        let last = dims[dims.len() - 1];
        let flat = c_in * last[0] * last[1] * last[2];
        Ok(CnnModel {
            layers,
            fc_weights: vec![0.0; flat],
            fc_bias: 0.0,
            input_dims,
            target,
            normalization: Normalization::default(),
            bn_eps: DEFAULT_BN_EPS,
            leak: DEFAULT_LEAK,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            seed: 0,
        })
    }

    /// Seeded Glorot-uniform weights, zero biases.
    pub fn new(arch: &Architecture, input_dims: [usize; 3], target: Target, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch, input_dims, target)?;
        model.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let k3 = layer.kernel.pow(3);
            let limit = (6.0 / ((layer.in_channels + layer.out_channels) * k3) as f64).sqrt();
            layer.weights.iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
        }
        let limit = (6.0 / (model.fc_weights.len() + 1) as f64).sqrt();
        model.fc_weights.iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
        Ok(model)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            kernels: self.layers.iter().map(|l| l.kernel).collect(),
            channels: self.layers.iter().map(|l| l.out_channels).collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn flatten_len(&self) -> usize {
        self.fc_weights.len()
    }

    /// Trainable parameters; batch normalization contributes none.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum::<usize>() + self.fc_weights.len() + 1
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        out.push(self.fc_weights.len());
        out.push(1);
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out.push(&self.fc_weights);
        out.push(std::slice::from_ref(&self.fc_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.fc_weights);
        out.push(std::slice::from_mut(&mut self.fc_bias));
        out
    }

    fn input_volume(&self, field: &[f64]) -> Result<Volume> {
        if field.len() != self.input_len() {
            return Err(Error::dimension(format!(
                "layer 1: expected {} input values ({:?}), got {}",
                self.input_len(),
                self.input_dims,
                field.len()
            )));
        }
        Ok(Volume::from_vec(1, self.input_dims, field.to_vec()))
    }

    fn activate(&self, g: &mut Volume) {
        let leak = self.leak;
        g.data.iter_mut().for_each(|x| *x = leaky_relu(*x, leak));
    }

    /// Inference-mode block outputs up to and including block `upto`.
    fn infer_blocks(&self, field: &[f64], upto: usize) -> Result<Volume> {
        let mut a = self.input_volume(field)?;
        for (l, layer) in self.layers.iter().enumerate().take(upto + 1) {
            let mut g = layer
                .convolve(&a)
                .map_err(|e| Error::dimension(format!("layer {}: {e}", l + 1)))?;
            norm::normalize(&mut g, &layer.running_mean, &layer.running_var, self.bn_eps);
            self.activate(&mut g);
            a = g;
        }
        Ok(a)
    }

    fn head(&self, features: &[f64]) -> f64 {
        self.fc_bias + features.iter().zip(&self.fc_weights).map(|(a, w)| a * w).sum::<f64>()
    }

    /// Normalized-space output of one sample with running statistics.
    pub fn infer_normalized(&self, field: &[f64]) -> Result<f64> {
        let a = self.infer_blocks(field, self.layers.len() - 1)?;
        Ok(self.head(&a.data))
    }

    /// Coefficient estimate for one level-set tensor.
    pub fn predict_field(&self, field: &[f64]) -> Result<f64> {
        Ok(self.normalization.decode(self.infer_normalized(field)?))
    }

    pub fn predict_fields(&self, fields: &[&[f64]], exec: Exec) -> Result<Vec<f64>> {
        exec.map_slice(fields, |f| self.predict_field(f)).into_iter().collect()
    }

    /// Post-activation map of `kernel` in `layer` (both 1-based).
    pub fn feature_map(&self, field: &[f64], layer: usize, kernel: usize) -> Result<Volume> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::validation(format!(
                "layer {layer} out of range 1..={}",
                self.layers.len()
            )));
        }
        let n_k = self.layers[layer - 1].out_channels;
        if kernel == 0 || kernel > n_k {
            return Err(Error::validation(format!(
                "kernel {kernel} out of range 1..={n_k} for layer {layer}"
            )));
        }
        let a = self.infer_blocks(field, layer - 1)?;
        Ok(Volume::from_vec(1, a.dims, a.channel(kernel - 1).to_vec()))
    }

    /// Training-mode forward pass with batch statistics.
    pub fn forward_train(&self, batch: &[&[f64]], exec: Exec) -> Result<ForwardPass> {
        if batch.len() < 2 {
            return Err(Error::validation("training-mode batch norm needs at least 2 samples"));
        }
        let mut current: Vec<Volume> = batch.iter().map(|f| self.input_volume(f)).collect::<Result<_>>()?;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut g: Vec<Volume> = exec
                .map_slice(&current, |a| layer.convolve(a))
                .into_iter()
                .collect::<Result<_>>()
                .map_err(|e| Error::dimension(format!("layer {}: {e}", l + 1)))?;
            let (mean, var) = norm::channel_stats(&g);
            exec.for_each_chunk(&mut g, 1, |_, v| {
                norm::normalize(&mut v[0], &mean, &var, self.bn_eps);
                self.activate(&mut v[0]);
            });
            stats.push((mean, var));
            if l > 0 {
                activations.push(std::mem::take(&mut current));
            }
            current = g;
        }
        let outputs = current.iter().map(|a| self.head(&a.data)).collect();
        activations.push(current);
        Ok(ForwardPass {
            activations,
            stats,
            outputs,
        })
    }

    /// Exact gradients of `loss(outputs, targets)` (normalized space)
    /// through the cached training-mode pass.
    pub fn backward(&self, batch: &[&[f64]], pass: &ForwardPass, targets: &[f64], exec: Exec) -> Result<Gradients> {
        let n = batch.len();
        if pass.outputs.len() != n || targets.len() != n || pass.activations.len() != self.layers.len() {
            return Err(Error::Usage(
                "backward needs the forward pass of this exact batch".into(),
            ));
        }
        let inv_n = 1.0 / n as f64;
        let dout: Vec<f64> = pass.outputs.iter().zip(targets).map(|(p, t)| (p - t) * inv_n).collect();

        let last = &pass.activations[self.layers.len() - 1];
        let mut fc_w = vec![0.0; self.fc_weights.len()];
        for (a, d) in last.iter().zip(&dout) {
            fc_w.iter_mut().zip(&a.data).for_each(|(g, x)| *g += d * x);
        }
        let fc_b: f64 = dout.iter().sum();

        let mut grad_act: Vec<Volume> = last
            .iter()
            .zip(&dout)
            .map(|(a, d)| Volume::from_vec(a.channels, a.dims, self.fc_weights.iter().map(|w| w * d).collect()))
            .collect();

        let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let acts = &pass.activations[l];
            let (_, var) = &pass.stats[l];
            let leak = self.leak;
            let eps = self.bn_eps;

            // through the activation, then recover the standardized values
            let pre: Vec<(Volume, Volume)> = exec.map(n, |i| {
                let a = &acts[i];
                let da = &grad_act[i];
                let mut dy = da.clone();
                let mut xhat = a.clone();
                for ((d, x), &av) in dy.data.iter_mut().zip(xhat.data.iter_mut()).zip(&a.data) {
                    if av > 0.0 {
                        // slope 1, xhat = a
                    } else {
                        *d *= leak;
                        *x = av / leak;
                    }
                }
                (dy, xhat)
            });

            // batch-coupled standardization gradient
            let channels = layer.out_channels;
            let count = (n * acts[0].voxels()) as f64;
            let mut sum_dy = vec![0.0; channels];
            let mut sum_dy_x = vec![0.0; channels];
            for (dy, xh) in &pre {
                for c in 0..channels {
                    sum_dy[c] += dy.channel(c).iter().sum::<f64>();
                    sum_dy_x[c] += dy.channel(c).iter().zip(xh.channel(c)).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let coef: Vec<(f64, f64, f64)> = (0..channels)
                .map(|c| {
                    let s = var[c].sqrt();
                    let d = s + eps;
                    let ratio = if s > 0.0 { d / s } else { 0.0 };
                    (1.0 / d, sum_dy[c] / count, ratio * sum_dy_x[c] / count)
                })
                .collect();

            let want_input = l > 0;
            let per_sample: Vec<(Vec<f64>, Vec<f64>, Option<Volume>)> = exec.map(n, |i| {
                let (dy, xh) = &pre[i];
                let mut dg = dy.clone();
                for (c, &(inv_d, m_dy, m_dyx)) in coef.iter().enumerate() {
                    let x = xh.channel(c);
                    dg.channel_mut(c)
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, xv)| *g = inv_d * (*g - m_dy - xv * m_dyx));
                }
                let input = if l == 0 {
                    Volume::from_vec(1, self.input_dims, batch[i].to_vec())
                } else {
                    pass.activations[l - 1][i].clone()
                };
                let mut gw = vec![0.0; layer.weights.len()];
                let mut gb = vec![0.0; layer.bias.len()];
                let gin = conv::conv_backward(&input, &layer.weights, &dg, layer.kernel, &mut gw, &mut gb, want_input);
                (gw, gb, gin)
            });

            let mut gw = vec![0.0; layer.weights.len()];
            let mut gb = vec![0.0; layer.bias.len()];
            let mut next = Vec::with_capacity(n);
            for (w, b, gin) in per_sample {
                gw.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
                gb.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
                if let Some(g) = gin {
                    next.push(g);
                }
            }
            layer_grads[l] = (gw, gb);
            grad_act = next;
        }

        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for (w, b) in layer_grads {
            out.push(w);
            out.push(b);
        }
        out.push(fc_w);
        out.push(vec![fc_b]);
        Ok(Gradients(out))
    }

    /// Blend batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) {
        let m = self.bn_momentum;
        for (layer, (mean, var)) in self.layers.iter_mut().zip(stats) {
            for c in 0..layer.out_channels {
                layer.running_mean[c] = (1.0 - m) * layer.running_mean[c] + m * mean[c];
                layer.running_var[c] = (1.0 - m) * layer.running_var[c] + m * var[c];
            }
        }
    }
}

/// Surrogate evaluation of a design: loft, distance field on `grid`, forward.
pub fn predict(model: &CnnModel, u: &DesignVector, grid: &GridSpec) -> Result<f64> {
    if grid.dims != model.input_dims {
        return Err(Error::dimension(format!(
            "grid {:?} does not match model input {:?}",
            grid.dims, model.input_dims
        )));
    }
    let wing = loft_design(u)?;
    let field = distance_field(&wing, grid)?;
    model.predict_field(&field.phi)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn tiny_arch() -> Architecture {
        Architecture {
            kernels: vec![3, 2],
            channels: vec![3, 2],
        }
    }

    pub fn random_fields(seed: u64, n: usize, len: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..len).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
    }
}
