//! AdamW with decoupled weight decay, plus the warmup + cosine learning-rate
//! schedule used by the trainer.

use super::dtype::Scalar;

#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW {
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.weight_decay);
        let corr1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mhat = self.m[i] / corr1;
            let vhat = self.v[i] / corr2;
            params[i] = params[i] - decay * params[i] - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero over the remaining
/// steps.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps.min(step)) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut opt = AdamW::<f64>::new(4, 0.0);
        let mut params = vec![1.0, -2.0, 0.5, 3.0];
        let before = params.clone();
        opt.step(&mut params, &[0.1, 0.2, -0.3, 0.4], 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut opt = AdamW::<f64>::new(1, 0.0);
        let mut params = vec![1.0];
        opt.step(&mut params, &[0.5], 0.01);
        // First step: mhat = g, vhat = g^2, update = lr * g/(|g| + eps).
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((params[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let base = 2e-4;
        assert!(lr_at(0, 1000, base, 200) < base * 0.01);
        assert!((lr_at(199, 1000, base, 200) - base).abs() < base * 0.01);
        assert!(lr_at(600, 1000, base, 200) < base);
        assert!(lr_at(999, 1000, base, 200) < lr_at(600, 1000, base, 200));
    }
}
