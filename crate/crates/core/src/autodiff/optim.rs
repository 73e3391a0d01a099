use super::Parameter;
use crate::scalar::Real;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f64),
    #[error("invalid Adam hyperparameter: {0}")]
    Adam(String),
}

pub trait Optimizer<T: Real> {
    /// Applies one update to every trainable parameter from its gradient.
    fn step(&mut self, params: &mut [Parameter<T>]);
}

fn check_lr(lr: f64) -> Result<(), OptimizerError> {
    if lr.is_finite() && lr >= 0.0 {
        Ok(())
    } else {
        Err(OptimizerError::LearningRate(lr))
    }
}

/// `value ← value − lr · grad` on every trainable parameter.
pub fn sgd_step<T: Real>(params: &mut [Parameter<T>], lr: f64) -> Result<(), OptimizerError> {
    Sgd::new(lr)?.step(params);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self, OptimizerError> {
        check_lr(lr)?;
        Ok(Self { lr })
    }
}

impl<T: Real> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut [Parameter<T>]) {
        let lr = T::of(self.lr);
        for p in params.iter_mut().filter(|p| p.trainable) {
            for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= lr * g;
            }
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self, OptimizerError> {
        check_lr(lr)?;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(OptimizerError::Adam(format!("betas must lie in [0, 1), got ({beta1}, {beta2})")));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(OptimizerError::Adam(format!("epsilon must be positive, got {eps}")));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn with_lr(lr: f64) -> Result<Self, OptimizerError> {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [Parameter<T>]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
            self.t = 0;
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::ParamKind;
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(v: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new("w", Tensor::vector(vec![v]), ParamKind::Kernel);
        p.grad = Tensor::vector(vec![g]);
        p
    }

    #[test]
    fn zero_lr_leaves_values() {
        let mut ps = [scalar(1.5, 3.0)];
        sgd_step(&mut ps, 0.0).unwrap();
        assert_eq!(ps[0].value.data(), &[1.5]);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut ps = [scalar(1.0, 2.0)];
        sgd_step(&mut ps, 0.1).unwrap();
        assert!((ps[0].value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn negative_lr_is_rejected() {
        assert!(Sgd::new(-0.1).is_err());
        assert!(Adam::<f32>::with_lr(f64::NAN).is_err());
    }

    #[test]
    fn non_trainable_params_are_skipped() {
        let mut p = scalar(1.0, 2.0);
        p.trainable = false;
        let mut ps = [p];
        sgd_step(&mut ps, 0.1).unwrap();
        assert_eq!(ps[0].value.data(), &[1.0]);
    }

    #[test]
    fn adam_minimizes_square() {
        // Independent scalar recurrence for f(w) = w², w0 = 1, lr = 0.01.
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        let mut opt = Adam::with_lr(0.01).unwrap();
        let mut ps = [scalar(1.0, 0.0)];
        for _ in 0..100 {
            ps[0].grad = Tensor::vector(vec![2.0 * ps[0].value.data()[0]]);
            opt.step(&mut ps);
        }
        let got = ps[0].value.data()[0];
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
        assert!(got.abs() < 0.5);
    }
}
