use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
        }
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdamState::new(&[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        s.update(&mut [&mut p[..]], &[vec![0.0; 3]], 0.1);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert!(s.second[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        // with constant g the corrected moments are m = g and v = g^2 at
        // every step, so each update is lr * g / (|g| + eps)
        let lr = 1e-3;
        for g in [2.5, -0.01, 40.0] {
            let mut s = AdamState::new(&[1]);
            let mut p = vec![0.0];
            let mut last = 0.0;
            for _ in 0..500 {
                let before = p[0];
                s.update(&mut [&mut p[..]], &[vec![g]], lr);
                last = p[0] - before;
            }
            let expect = -lr * g / (g.abs() + AdamState::EPS);
            assert!((last - expect).abs() < 1e-12, "{last} vs {expect}");
            assert!((last.abs() - lr).abs() < lr * 1e-5);
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut s = AdamState::new(&[2]);
        let mut p = vec![0.5, 0.5];
        s.update(&mut [&mut p[..]], &[vec![0.2, -4.0]], 0.01);
        // m = 0.1 g, v = 0.001 g^2; corrected: g and g^2
        assert!((p[0] - (0.5 - 0.01 * 0.2 / (0.2 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (0.5 + 0.01 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }
}
