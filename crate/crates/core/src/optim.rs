//! Adaptive-moment (Adam) state and update rule.
//!
//! Every optimized entity (one Gaussian, one keyframe pose) owns an
//! [`AdamSlot`]. Slots keep their own step counter so that entries inserted
//! mid-run get proper bias correction on their first updates.

/// First/second moment accumulators for `N` scalar parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSlot<const N: usize> {
    pub m: [f64; N],
    pub v: [f64; N],
    pub steps: u32,
}

impl<const N: usize> Default for AdamSlot<N> {
    fn default() -> Self {
        Self {
            m: [0.0; N],
            v: [0.0; N],
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<const N: usize> AdamSlot<N> {
    /// Advances the moments with `grad` and returns the parameter step
    /// (to be *subtracted*), already scaled by the per-parameter `lr`.
    pub fn step(&mut self, grad: &[f64; N], lr: &[f64; N], hyper: &AdamHyper) -> [f64; N] {
        self.steps += 1;
        let bc1 = 1.0 - hyper.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - hyper.beta2.powi(self.steps as i32);
        let mut delta = [0.0; N];
        for i in 0..N {
            self.m[i] = hyper.beta1 * self.m[i] + (1.0 - hyper.beta1) * grad[i];
            self.v[i] = hyper.beta2 * self.v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            delta[i] = lr[i] * m_hat / (v_hat.sqrt() + hyper.eps);
        }
        delta
    }
}
