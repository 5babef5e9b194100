use super::{check_finite, Real, Shape, Tensor, TensorError};

/// Adam hyper-parameters. Defaults: lr 1e-4, β1 0.9, β2 0.999, ε 1e-8.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// `lr = 0` is accepted: it freezes parameters.
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: &str| Err(TensorError::InvalidAdam(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// A learnable tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
            step_count: 0,
        }
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Drops optimizer state, keeping the value.
    pub fn reset_optimizer(&mut self) {
        self.adam_m.fill(T::zero());
        self.adam_v.fill(T::zero());
        self.step_count = 0;
    }

    /// One bias-corrected Adam update from the stored gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), TensorError> {
        if !check_finite(&self.grad) {
            return Err(TensorError::NonFiniteGradient { name: self.name.clone() });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
        let corr1 = T::lit(1.0 - cfg.beta1.powi(t));
        let corr2 = T::lit(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        let value = self.value.data_mut();
        let m = self.adam_m.data_mut();
        let v = self.adam_v.data_mut();
        for (((x, &g), mi), vi) in value.iter_mut().zip(self.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
