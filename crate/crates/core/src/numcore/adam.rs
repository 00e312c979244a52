use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state: bias-corrected first and second moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `params`, then zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.as_mut().expect("checked above");
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            g.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Tape, Tensor};

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.3, -2.0, 1e3] {
            let mut ps = ParamSet::new();
            let id = ps.add("w", Tensor::scalar(1.0));
            ps.zero_grads();
            ps.get_mut(id).grad.as_mut().unwrap()[0] = g;
            let mut adam = AdamState::new(AdamConfig::default(), &ps);
            adam.step(&mut ps).unwrap();
            let delta = ps.value(id).data()[0] - 1.0;
            // first bias-corrected step: |delta| = lr * |g| / (|g| + eps)
            let expect = 1e-4 * g.abs() / (g.abs() + 1e-8);
            assert!((delta.abs() - expect).abs() < 1e-15, "{delta} vs {expect}");
            assert_eq!(delta.signum(), -g.signum());
            assert_eq!(ps.get(id).grad.as_deref(), Some(&[0.0][..]));
        }
    }

    #[test]
    fn zero_grad_leaves_param_but_counts_step() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::scalar(2.5));
        ps.zero_grads();
        let mut adam = AdamState::new(AdamConfig::default(), &ps);
        adam.step(&mut ps).unwrap();
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.value(id).data()[0], 2.5);
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn missing_grad_names_param() {
        let mut ps = ParamSet::new();
        ps.add("encoder.w", Tensor::scalar(0.0));
        let mut adam = AdamState::new(AdamConfig::default(), &ps);
        match adam.step(&mut ps) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "encoder.w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::scalar(0.0));
        ps.zero_grads();
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &ps,
        );
        for _ in 0..200 {
            // f(w) = (w - 3)^2 through the tape
            let mut tape = Tape::new();
            let w = tape.param(&ps, id).unwrap();
            let three = tape.constant(Tensor::scalar(-3.0)).unwrap();
            let d = tape.add(w, three).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&mut ps).unwrap();
            adam.step(&mut ps).unwrap();
        }
        let w = ps.value(id).data()[0];
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
    }
}
