//! Stochastic gradient descent with classical momentum.

use serde::{Deserialize, Serialize};

use super::tape::Tape;
use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.01, momentum: 0.9 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Updates each parameter as `v <- momentum * v + g; p <- p - lr * v`.
/// Velocity buffers are allocated on the first step and keyed by parameter
/// order, so the tape's parameter set must not change between steps.
pub struct Sgd<T: Scalar> {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
            Ok(Sgd { learning_rate: config.learning_rate, momentum: config.momentum, velocity: Vec::new() })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Replaces the learning rate (used by epoch schedules). The velocity
    /// state is kept.
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
        }
        self.learning_rate = lr;
        Ok(())
    }

    /// Applies one update using the gradients of the tape's last backward
    /// pass. Fails without touching any parameter if a gradient is missing
    /// or non-finite.
    pub fn step(&mut self, tape: &mut Tape<T>) -> Result<()> {
        let params: Vec<_> = tape.params().collect();
        if self.velocity.is_empty() {
            self.velocity =
                params.iter().map(|&v| vec![T::zero(); tape.value(v).numel()]).collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer state has {} parameters, tape has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for &var in &params {
            match tape.grad(var) {
                None => {
                    return Err(Error::Usage(format!(
                        "no gradient for parameter '{}': run backward first",
                        tape.param_name(var)
                    )))
                }
                Some(g) if !g.iter().all(|v| v.is_finite()) => {
                    return Err(Error::numeric(
                        tape.param_name(var).to_string(),
                        "non-finite gradient",
                    ))
                }
                Some(_) => {}
            }
        }

        let lr = T::from_f64(self.learning_rate);
        let m = T::from_f64(self.momentum);
        for (i, &var) in params.iter().enumerate() {
            let (grad, values) = tape.grad_and_value_mut(var);
            let grad = grad.expect("checked above");
            let vel = &mut self.velocity[i];
            for ((v, &g), p) in vel.iter_mut().zip(grad).zip(values.iter_mut()) {
                *v = m * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{OpKind, Tensor};

    fn scalar_param_tape(value: f64) -> (Tape<f64>, super::super::tape::Var) {
        let mut tape = Tape::new();
        let p = tape.param("p", Tensor::vector(vec![value]));
        (tape, p)
    }

    fn run_step(tape: &mut Tape<f64>, p: super::super::tape::Var, opt: &mut Sgd<f64>) {
        tape.reset();
        let s = tape.apply(OpKind::Sum, &[p]).unwrap();
        tape.backward(s).unwrap();
        opt.step(tape).unwrap();
    }

    #[test]
    fn plain_sgd_step_moves_against_the_gradient() {
        // loss = p, so g = 1; lr 0.1 with no momentum gives p = 0.9.
        let (mut tape, p) = scalar_param_tape(1.0);
        let mut opt = Sgd::new(SgdConfig { learning_rate: 0.1, momentum: 0.0 }).unwrap();
        run_step(&mut tape, p, &mut opt);
        assert!((tape.value(p).data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn momentum_compounds_over_steps() {
        // g = 1 both steps: v1 = 1, v2 = 1.9, so p = 1 - 0.1 - 0.19 = 0.71.
        let (mut tape, p) = scalar_param_tape(1.0);
        let mut opt = Sgd::new(SgdConfig { learning_rate: 0.1, momentum: 0.9 }).unwrap();
        run_step(&mut tape, p, &mut opt);
        run_step(&mut tape, p, &mut opt);
        assert!((tape.value(p).data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_with_zero_velocity_is_a_fixed_point() {
        let mut tape = Tape::new();
        let p = tape.param("p", Tensor::vector(vec![2.5]));
        let unused = tape.param("unused", Tensor::vector(vec![1.5]));
        let mut opt = Sgd::new(SgdConfig { learning_rate: 0.1, momentum: 0.9 }).unwrap();
        let s = tape.apply(OpKind::Sum, &[p]).unwrap();
        tape.backward(s).unwrap();
        opt.step(&mut tape).unwrap();
        assert_eq!(tape.value(unused).data(), &[1.5]);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        // x^-2 at x = 1e-120 is still finite (1e240) but its derivative
        // -2 * x^-3 overflows, so backward stores an infinite gradient.
        let mut tape = Tape::new();
        let p = tape.param("conv1.weight", Tensor::vector(vec![1e-120f64]));
        let y = tape.apply(OpKind::Pow { exponent: -2 }, &[p]).unwrap();
        let s = tape.apply(OpKind::Sum, &[y]).unwrap();
        tape.backward(s).unwrap();
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        let err = opt.step(&mut tape).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv1.weight") && msg.contains("non-finite"), "{msg}");
        // The failed step must not have moved the parameter.
        assert_eq!(tape.value(p).data(), &[1e-120f64]);
    }

    #[test]
    fn step_before_backward_is_an_error() {
        let mut tape = Tape::new();
        let _ = tape.param("p", Tensor::<f64>::vector(vec![1.0]));
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        let err = opt.step(&mut tape).unwrap_err();
        assert!(err.to_string().contains("p"), "{err}");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(Sgd::<f32>::new(SgdConfig { learning_rate: 0.0, momentum: 0.9 }).is_err());
        assert!(Sgd::<f32>::new(SgdConfig { learning_rate: 0.1, momentum: 1.0 }).is_err());
    }
}
