use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps since the last reset, used for bias correction.
    pub t: u64,
    pub restarts: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            restarts: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Clears the moments and the bias-correction step count.
    pub fn reset(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.t = 0;
        self.restarts += 1;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "Adam state for {} values, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("gradient {i} is {}", grads[i])));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params() {
        let mut s = AdamState::new(2, 0.9, 0.999, 1e-8);
        s.m = vec![0.5, -0.5];
        let mut p = vec![1.0, 2.0];
        s.step(&mut p, &[0.0, 0.0], 1e-3).unwrap();
        assert!((s.m[0] - 0.45).abs() < 1e-15);
        // bias-corrected first moment still moves the parameter
        assert!(p[0] < 1.0);
        let mut fresh = AdamState::new(2, 0.9, 0.999, 1e-8);
        let mut q = vec![1.0, 2.0];
        fresh.step(&mut q, &[0.0, 0.0], 1e-3).unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
    }

    #[test]
    fn matches_scalar_reference() {
        // independent scalar loop with the textbook update
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 0.01, 0.3);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for k in 1..=20 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(k));
            let vh = v / (1.0 - b2.powi(k));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = AdamState::new(1, b1, b2, eps);
        let mut p = vec![1.0];
        for _ in 0..20 {
            s.step(&mut p, &[g], lr).unwrap();
        }
        assert!((p[0] - x).abs() < 1e-14);
    }

    #[test]
    fn reset_clears_moments_only() {
        let mut s = AdamState::new(1, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0];
        s.step(&mut p, &[1.0], 0.1).unwrap();
        let kept = p[0];
        s.reset();
        assert_eq!((s.m[0], s.v[0], s.t, s.restarts), (0.0, 0.0, 0, 1));
        assert_eq!(p[0], kept);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = AdamState::new(1, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0];
        assert!(matches!(
            s.step(&mut p, &[f64::NAN], 0.1),
            Err(Error::NonFiniteGradient(_))
        ));
        assert_eq!(p[0], 1.0);
    }
}
