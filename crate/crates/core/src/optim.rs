//! Adaptive moment estimation over flat parameter vectors.

use crate::math::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamOptions {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

/// First/second moment state; create fresh at every broadcast.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            t: 0,
        }
    }

    /// One update step. A coordinate with zero gradient on every step so far
    /// is left bitwise unchanged.
    pub fn step(&mut self, opts: &AdamOptions, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = F::of(opts.beta1);
        let b2 = F::of(opts.beta2);
        let one = F::one();
        let lr = F::of(opts.lr);
        let eps = F::of(opts.eps);
        let corr1 = F::of(1.0 - opts.beta1.powi(self.t as i32));
        let corr2 = F::of(1.0 - opts.beta2.powi(self.t as i32));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut x = vec![0.0f64];
        let mut adam = AdamState::new(1);
        let opts = AdamOptions::with_lr(0.1);
        for _ in 0..500 {
            let g = vec![2.0 * (x[0] - 3.0)];
            adam.step(&opts, &mut x, &g);
        }
        assert!((x[0] - 3.0).abs() < 1e-2, "x = {}", x[0]);
    }

    #[test]
    fn zero_gradient_leaves_parameter_bitwise_unchanged() {
        let mut x = vec![0.123456789f32, -0.0, 7.25];
        let before: Vec<u32> = x.iter().map(|v| v.to_bits()).collect();
        let mut adam = AdamState::new(3);
        let opts = AdamOptions::default();
        for _ in 0..10 {
            adam.step(&opts, &mut x, &[0.0, 0.0, 0.0]);
        }
        let after: Vec<u32> = x.iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn mixed_zero_and_live_coordinates() {
        let mut x = vec![1.0f64, 5.0];
        let mut adam = AdamState::new(2);
        let opts = AdamOptions::with_lr(0.05);
        for _ in 0..200 {
            let g = [2.0 * x[0], 0.0];
            adam.step(&opts, &mut x, &g);
        }
        assert!(x[0].abs() < 0.05);
        assert_eq!(x[1], 5.0);
    }
}
