use super::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.shape(), g.shape());
            for ((pi, &gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_magnitude_is_at_most_lr() {
        // Step 1 with gradient g: update = lr * g / (|g| + eps') <= lr.
        let mut params = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::new(&[3], vec![0.4, -3.0, 1e-3]).unwrap()];
        let mut adam = AdamState::new(&params, 1e-2);
        adam.step(&mut params, &grads);
        for i in 0..3 {
            let delta = params[0].data()[i] - before.data()[i];
            assert!(delta.abs() <= 1e-2 * (1.0 + 1e-6), "delta {delta}");
            // Sign opposes the gradient.
            assert!(delta * grads[0].data()[i] < 0.0);
            // Hand-evaluated update for step 1.
            let g = grads[0].data()[i];
            let m_hat = (1.0 - 0.9) * g / (1.0 - 0.9);
            let v_hat = (1.0 - 0.999) * g * g / (1.0 - 0.999);
            let want = -1e-2 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((delta - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_means_zero_update() {
        let mut params = vec![Tensor::new(&[2], vec![0.3, -0.7]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(&[2])];
        let mut adam = AdamState::new(&params, 1e-2);
        adam.step(&mut params, &grads);
        assert_eq!(params[0], before);
    }

    #[test]
    fn identical_calls_give_identical_parameters() {
        let run = || {
            let mut params = vec![Tensor::new(&[2], vec![0.1, 0.2]).unwrap()];
            let grads = vec![Tensor::new(&[2], vec![-0.5, 0.25]).unwrap()];
            let mut adam = AdamState::new(&params, 3e-3);
            for _ in 0..10 {
                adam.step(&mut params, &grads);
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
