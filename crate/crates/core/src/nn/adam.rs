use serde::{Deserialize, Serialize};

use super::GradVector;

/// Bias-corrected adaptive-moment optimizer. [`Adam::step`] descends along
/// the gradient it is given; callers ascending an objective pass its
/// negated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], g: &GradVector) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(g.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(&g.0).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescale `g` to norm `max_norm` if it is longer. Returns the clipped
/// gradient and the norm before clipping.
pub fn clip_by_global_norm(mut g: GradVector, max_norm: f64) -> (GradVector, f64) {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = g.norm();
    if norm > max_norm {
        let k = max_norm / norm;
        g.0.iter_mut().for_each(|x| *x *= k);
    }
    (g, norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &GradVector(vec![4.0, -0.01, 1e3]));
        let deltas = [1.0 - p[0], -2.0 - p[1], 0.5 - p[2]];
        assert!((deltas[0] - 1e-3).abs() < 1e-9);
        assert!((deltas[1] + 1e-3).abs() < 1e-6);
        assert!((deltas[2] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Adam::new(2, 0.1);
        let mut p = vec![0.3, 0.4];
        for _ in 0..10 {
            opt.step(&mut p, &GradVector::zeros(2));
        }
        assert_eq!(p, vec![0.3, 0.4]);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut opt = Adam::new(2, 0.05);
            let mut p = vec![1.0, 1.0];
            for k in 0..50 {
                let g = GradVector(vec![p[0] * k as f64, (p[1] - 0.3).sin()]);
                opt.step(&mut p, &g);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping() {
        let (g, n) = clip_by_global_norm(GradVector(vec![120.0, 160.0]), 100.0);
        assert_eq!(n, 200.0);
        assert!((g.norm() - 100.0).abs() < 1e-12);
        assert!((g.0[0] / g.0[1] - 0.75).abs() < 1e-15);
        let small = GradVector(vec![30.0, 40.0]);
        assert_eq!(clip_by_global_norm(small.clone(), 100.0).0, small);
        assert_eq!(clip_by_global_norm(GradVector::zeros(3), 100.0).0, GradVector::zeros(3));
    }

    proptest::proptest! {
        #[test]
        fn clipped_norm_bounded(v in proptest::collection::vec(-1e6f64..1e6, 1..50), max in 1e-3f64..1e3) {
            let (g, _) = clip_by_global_norm(GradVector(v), max);
            proptest::prop_assert!(g.norm() <= max + 1e-12 * max.max(1.0));
        }
    }
}
