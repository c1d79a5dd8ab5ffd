use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN/Inf; nothing was changed.
    SkippedNonFinite,
}

/// First/second moment accumulators for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = |t: &Tensor| Array2::zeros((t.rows(), t.cols()));
        AdamState {
            config,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam step.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<StepOutcome, AutodiffError> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(AutodiffError::ParamMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ParamMismatch(format!(
                    "`{name}`: parameter {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if let Some((name, _)) = params.iter().zip(grads).find(|(_, g)| !g.is_finite()) {
            log::warn!("skipping Adam step {}: non-finite gradient for `{}`", self.step + 1, name.0);
            return Ok(StepOutcome::SkippedNonFinite);
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            Zip::from(&mut p.0)
                .and(&g.0)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("theta", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut p = single(1.5);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.update(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.tensors()[0].item(), 1.5);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps) = 0.01 * 1 / (1 + 1e-8)
        let mut p = single(0.0);
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &p);
        st.update(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((p.tensors()[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn repeated_steps_move_against_gradient_sign() {
        let mut p = single(0.0);
        let mut st = AdamState::new(AdamConfig { lr: 0.01, ..AdamConfig::default() }, &p);
        let mut prev = 0.0;
        for _ in 0..2 {
            st.update(&mut p, &[Tensor::scalar(-3.0)]).unwrap();
            let now = p.tensors()[0].item();
            assert!(now > prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut p = single(2.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let out = st.update(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p.tensors()[0].item(), 2.0);
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = single(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(st.update(&mut p, &[Tensor::zeros(1, 2)]).is_err());
    }
}
