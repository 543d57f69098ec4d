//! Adam optimizer over a flat parameter buffer.

/// Hyperparameters. Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Standard bias-corrected Adam update, in place. Deterministic given
    /// identical inputs and state.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], hp: &AdamParams) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![1.5, -0.25, 0.0];
        let before = params.clone();
        let mut state = AdamState::new(3);
        state.step(&mut params, &[0.0, 0.0, 0.0], &AdamParams::default());
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_closed_form() {
        // At t=1 the bias corrections cancel: delta = -lr * g / (|g| + eps).
        let hp = AdamParams::default();
        let g = [0.3, -2.0, 1e-12];
        let mut params = vec![0.0; 3];
        let mut state = AdamState::new(3);
        state.step(&mut params, &g, &hp);
        for i in 0..3 {
            let expect = -hp.lr * g[i] / (g[i].abs() + hp.eps);
            assert!(
                (params[i] - expect).abs() <= 1e-15 * expect.abs().max(1e-12),
                "i={i}: {} vs {expect}",
                params[i]
            );
        }
    }

    #[test]
    fn constant_gradient_updates_do_not_grow() {
        let hp = AdamParams::default();
        let g = [0.7];
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        state.step(&mut params, &g, &hp);
        let d1 = params[0].abs();
        let before = params[0];
        state.step(&mut params, &g, &hp);
        let d2 = (params[0] - before).abs();
        assert!(d2 <= d1 + 1e-18, "d1={d1} d2={d2}");
    }

    #[test]
    fn matches_hand_recursion() {
        let hp = AdamParams {
            lr: 0.01,
            beta1: 0.8,
            beta2: 0.9,
            eps: 1e-8,
        };
        let grads = [[0.5, -1.0], [0.2, 0.4], [-0.3, 0.0]];
        let mut params = vec![1.0, -1.0];
        let mut state = AdamState::new(2);

        // Independent oracle: the textbook recursion written out directly.
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let mut expect = [1.0f64, -1.0];
        for (t, g) in grads.iter().enumerate() {
            for i in 0..2 {
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
                let mh = m[i] / (1.0 - hp.beta1.powi(t as i32 + 1));
                let vh = v[i] / (1.0 - hp.beta2.powi(t as i32 + 1));
                expect[i] -= hp.lr * mh / (vh.sqrt() + hp.eps);
            }
            state.step(&mut params, g, &hp);
        }
        for i in 0..2 {
            assert!((params[i] - expect[i]).abs() < 1e-15);
        }
    }
}
