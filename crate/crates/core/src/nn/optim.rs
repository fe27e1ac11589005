use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerSpec::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec::Sgd { learning_rate }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { learning_rate } | OptimizerSpec::Adam { learning_rate, .. } => {
                learning_rate
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(
                "training.optimizer.learning_rate",
                format!("must be positive, got {lr}"),
            ));
        }
        if let OptimizerSpec::Adam {
            beta1,
            beta2,
            epsilon,
            ..
        } = *self
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                return Err(Error::config(
                    "training.optimizer",
                    "adam needs beta1, beta2 in [0, 1) and epsilon > 0",
                ));
            }
        }
        Ok(())
    }
}

/// Optimizer with moment buffers sized to the parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    spec: OptimizerSpec,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, len: usize) -> Self {
        let (m, v) = match spec {
            OptimizerSpec::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerSpec::Adam { .. } => (vec![0.0; len], vec![0.0; len]),
        };
        OptimizerState { spec, m, v, t: 0 }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        params.check_same_layout(grad)?;
        self.t += 1;
        match self.spec {
            OptimizerSpec::Sgd { learning_rate } => {
                for (p, g) in params.values_mut().iter_mut().zip(grad.values()) {
                    *p -= learning_rate * g;
                }
            }
            OptimizerSpec::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                if self.m.len() != params.len() {
                    return Err(Error::Layout {
                        expected: self.m.len(),
                        actual: params.len(),
                    });
                }
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, (p, &g)) in params.values_mut().iter_mut().zip(grad.values()).enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &ParamVector,
    grad: &ParamVector,
) -> Result<ParamVector> {
    let mut out = params.clone();
    state.step(&mut out, grad)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for spec in [OptimizerSpec::sgd(0.1), OptimizerSpec::adam(1e-3)] {
            let p = ParamVector::flat(vec![1.0, -2.0, 3.0]);
            let mut st = OptimizerState::new(spec, 3);
            let out = optimizer_step(&mut st, &p, &p.zeros_like()).unwrap();
            assert_eq!(out, p);
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let p = ParamVector::flat(vec![1.0, 2.0]);
        let g = ParamVector::flat(vec![10.0, -10.0]);
        let mut st = OptimizerState::new(OptimizerSpec::sgd(0.1), 2);
        let out = optimizer_step(&mut st, &p, &g).unwrap();
        assert_eq!(out.values(), &[0.0, 3.0]);
    }

    #[test]
    fn adam_first_step_opposes_gradient() {
        let p = ParamVector::flat(vec![0.0; 4]);
        let g = ParamVector::flat(vec![0.3, -2.0, 1e-4, -7.0]);
        let mut st = OptimizerState::new(OptimizerSpec::adam(1e-3), 4);
        let out = optimizer_step(&mut st, &p, &g).unwrap();
        for (d, gv) in out.values().iter().zip(g.values()) {
            assert_eq!(d.signum(), -gv.signum());
        }
    }

    #[test]
    fn layout_mismatch_fails() {
        let p = ParamVector::flat(vec![0.0; 2]);
        let g = ParamVector::flat(vec![0.0; 3]);
        let mut st = OptimizerState::new(OptimizerSpec::sgd(0.1), 2);
        assert!(optimizer_step(&mut st, &p, &g).is_err());
    }
}
