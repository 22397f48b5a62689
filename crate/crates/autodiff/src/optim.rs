use crate::error::{Result, TensorError};
use crate::params::ParamStore;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam with decoupled weight decay.
///
/// Each step applies `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`
/// where the decay term uses the parameter value from before the step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: OptimizerState,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: OptimizerState::default(),
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn set_state(&mut self, state: OptimizerState) {
        self.state = state;
    }

    /// Updates every parameter, then clears the gradients. All parameters must
    /// carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.state.m.len() != params.len() {
            self.state.m = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            self.state.v = self.state.m.clone();
            self.state.step = 0;
        }
        for (_, name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(TensorError::MissingGrad { name: name.to_string() });
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let tensor = params.tensor_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let decay = self.lr * self.weight_decay * *p;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps) + decay;
            }
        }
        params.zero_grads();
        Ok(())
    }
}
