//! Adaptive-moment gradient descent.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment state for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Updates skipped because the gradient was not finite.
    pub skipped: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            skipped: 0,
        }
    }

    /// One bias-corrected step. A gradient with any non-finite entry leaves
    /// the parameters and moments untouched; returns whether it applied.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> bool {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + EPS);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut a = Adam::new(3);
        for _ in 0..5 {
            a.update(&mut p, &[0.0; 3], 0.1);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = vec![0.0, 0.0];
        let mut a = Adam::new(2);
        let mut prev = p.clone();
        for _ in 0..2000 {
            prev.copy_from_slice(&p);
            a.update(&mut p, &[3.0, -0.01], 0.01);
        }
        assert!((prev[0] - p[0] - 0.01).abs() < 1e-6);
        assert!((p[1] - prev[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn quadratic_trace_matches_script() {
        // f(x) = 0.5 * a * (x - c)^2, written out step by step.
        let (a_coef, c, lr) = ([2.0, 0.5], [1.0, -3.0], 0.05);
        let mut p = vec![0.0, 0.0];
        let mut opt = Adam::new(2);
        let (mut m, mut v, mut x) = ([0.0f64; 2], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=10 {
            let g: Vec<f64> = (0..2).map(|i| a_coef[i] * (p[i] - c[i])).collect();
            opt.update(&mut p, &g, lr);
            for i in 0..2 {
                let gi = a_coef[i] * (x[i] - c[i]);
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                x[i] -= lr * mh / (vh.sqrt() + 1e-8);
                assert!((x[i] - p[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![1.0, 2.0];
        let mut a = Adam::new(2);
        assert!(!a.update(&mut p, &[f64::NAN, 1.0], 0.1));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!((a.skipped, a.step), (1, 0));
    }
}
