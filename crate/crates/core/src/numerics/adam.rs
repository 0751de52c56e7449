use crate::error::{Error, Result};

use super::Tensor;

/// Bias-corrected Adam with per-parameter moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, param)` pair using `grads` in the
    /// same order. A non-finite gradient aborts before anything is modified.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &[Vec<f32>],
    ) -> Result<()> {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{} parameters vs {} gradients", params.len(), grads.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("parameter `{name}` has {} values, gradient {}", p.numel(), g.len()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len()
            || self.first.iter().zip(grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::dim("adam_step", "accumulator shapes changed"));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        for (((_, p), g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv as f64 / c1;
                let v_hat = *vv as f64 / c2;
                *pv -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(state: &mut AdamState, p: &mut Tensor, g: f32) {
        state.step([("p", &mut *p)], &[vec![g]]).unwrap();
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² on the first step, so the update is lr·g/(|g| + eps).
        let mut s = AdamState::with_betas(0.1, 0.9, 0.999, 1e-8);
        let mut p = Tensor::scalar(0.0);
        run(&mut s, &mut p, 1.0);
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.item() as f64 - expected).abs() < 1e-7);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(0.01);
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        s.step([("p", &mut p)], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut s = AdamState::new(0.01);
        let mut p = Tensor::scalar(0.0);
        let mut last = 0.0;
        for _ in 0..200 {
            run(&mut s, &mut p, -0.3);
            assert!(p.item() > last);
            last = p.item();
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = AdamState::new(0.01);
        let mut a = Tensor::scalar(0.0);
        let mut b = Tensor::scalar(0.0);
        let err = s
            .step([("a", &mut a), ("fg_head.bias", &mut b)], &[vec![0.0], vec![f32::NAN]])
            .unwrap_err();
        assert!(err.to_string().contains("fg_head.bias"));
        assert_eq!(s.step_count(), 0);
        assert_eq!(b.item(), 0.0);
    }
}
