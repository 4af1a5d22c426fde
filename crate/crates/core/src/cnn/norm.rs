//! Batch standardization without affine parameters and the leaky ReLU.

use super::conv::Volume;

pub const DEFAULT_LEAK: f64 = 0.01;
pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

pub fn leaky_relu(x: f64, leak: f64) -> f64 {
    x.max(leak * x)
}

pub fn leaky_relu_slope(x: f64, leak: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        leak
    }
}

/// Per-channel mean and (biased) variance over every sample and voxel.
///
/// Per-sample partial sums are reduced in sample order so the result does
/// not depend on how the samples were produced.
pub fn channel_stats(batch: &[Volume]) -> (Vec<f64>, Vec<f64>) {
    let channels = batch[0].channels;
    let count = (batch.len() * batch[0].voxels()) as f64;
    let mut mean = vec![0.0; channels];
    for v in batch {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += v.channel(c).iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; channels];
    for v in batch {
        for (c, s) in var.iter_mut().enumerate() {
            let mu = mean[c];
            *s += v.channel(c).iter().map(|g| (g - mu) * (g - mu)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|s| *s /= count);
    (mean, var)
}

/// Standardize `g` in place with the given statistics: `(g - mean) / (sqrt(var) + eps)`.
pub fn normalize(g: &mut Volume, mean: &[f64], var: &[f64], eps: f64) {
    for c in 0..g.channels {
        let mu = mean[c];
        let d = var[c].sqrt() + eps;
        g.channel_mut(c).iter_mut().for_each(|x| *x = (*x - mu) / d);
    }
}

/// Training-mode batch norm: standardize every map with the batch
/// statistics and return them.
pub fn batch_norm(batch: &mut [Volume], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (mean, var) = channel_stats(batch);
    for g in batch.iter_mut() {
        normalize(g, &mean, &var, eps);
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(seed: u64, n: usize) -> Vec<Volume> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..2 * 60).map(|_| rng.random_range(-3.0..5.0)).collect();
                Volume::from_vec(2, [3, 4, 5], data)
            })
            .collect()
    }

    #[test]
    fn leaky_values() {
        assert_eq!(leaky_relu(1.0, 0.01), 1.0);
        assert!((leaky_relu(-2.0, 0.01) + 0.02).abs() < 1e-15);
        assert_eq!(leaky_relu_slope(3.0, 0.01), 1.0);
        assert_eq!(leaky_relu_slope(-3.0, 0.01), 0.01);
    }

    #[test]
    fn standardized_moments() {
        let mut b = random_batch(1, 4);
        batch_norm(&mut b, 1e-12);
        let (m, v) = channel_stats(&b);
        for c in 0..2 {
            assert!(m[c].abs() < 1e-10);
            assert!((v[c] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut b: Vec<Volume> = (0..3).map(|_| Volume::from_vec(1, [2, 2, 2], vec![4.2; 8])).collect();
        batch_norm(&mut b, DEFAULT_BN_EPS);
        assert!(b.iter().all(|v| v.data.iter().all(|x| x.abs() < 1e-9)));
    }

    #[test]
    fn scale_invariance() {
        let mut a = random_batch(2, 3);
        let mut b: Vec<Volume> = a
            .iter()
            .map(|v| Volume::from_vec(v.channels, v.dims, v.data.iter().map(|x| 10.0 * x).collect()))
            .collect();
        let eps = DEFAULT_BN_EPS;
        batch_norm(&mut a, eps);
        batch_norm(&mut b, eps);
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.data.iter().zip(&y.data) {
                // difference is the eps term: |x| * eps * (1 - 1/10) / sigma
                assert!((p - q).abs() < 10.0 * eps * p.abs().max(1.0));
            }
        }
    }
}
