//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Standard constants; the learning rate default across the crate is 5e-4.
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(lr, &shapes)
    }

    /// One Adam step, in place. `grads` is the gradient of the loss being
    /// minimized; pass negated gradients to ascend.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam_step: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "adam_step: param shape {:?} vs grad shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::numeric("adam_step", "non-finite gradient"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let grads = vec![Tensor::vector(vec![0.0; 3])];
        let mut adam = AdamState::for_params(0.1, &params);
        let before = params[0].clone();
        for _ in 0..20 {
            adam.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params[0].data(), before.data());
        assert_eq!(adam.step, 20);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // Bias-corrected moments cancel at t=1: |update| = lr * g / (|g| + eps').
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(3.7)];
        let lr = 5e-4;
        let mut adam = AdamState::for_params(lr, &params);
        adam.step(&mut params, &grads).unwrap();
        assert!(
            (params[0].data()[0].abs() - lr).abs() < 1e-9,
            "step {}",
            params[0].data()[0]
        );
        assert!(params[0].data()[0] < 0.0);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(x) = x^2 from x0 = 1 with lr 0.1: |x| < 1e-3 within 200 steps.
        let mut params = vec![Tensor::scalar(1.0)];
        let mut adam = AdamState::for_params(0.1, &params);
        for _ in 0..200 {
            let g = vec![Tensor::scalar(2.0 * params[0].data()[0])];
            adam.step(&mut params, &g).unwrap();
        }
        assert!(params[0].data()[0].abs() < 1e-3, "x = {}", params[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_is_numeric_failure() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut g = Tensor::scalar(0.0);
        g.data_mut()[0] = f64::NAN;
        let mut adam = AdamState::for_params(0.1, &params);
        assert!(matches!(
            adam.step(&mut params, &[g]),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let mut params = vec![Tensor::vector(vec![0.0, 1.0])];
        let grads = vec![Tensor::vector(vec![0.0; 3])];
        let mut adam = AdamState::for_params(0.1, &params);
        assert!(matches!(
            adam.step(&mut params, &grads),
            Err(Error::Contract(_))
        ));
    }
}
