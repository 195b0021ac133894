//! First-order optimizers over flat parameter vectors.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// `θ ← θ − η g`.
    Sgd,
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, num_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => num_params,
        };
        Self { kind, learning_rate, first: vec![0.0; moments], second: vec![0.0; moments], steps: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.steps = self.steps.saturating_add(1);
                let c1 = 1.0 - libm::pow(beta1, self.steps as f64);
                let c2 = 1.0 - libm::pow(beta2, self.steps as f64);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    params[i] -= self.learning_rate * m / (libm::sqrt(v) + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_minimize_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::ADAM] {
            let mut opt = Optimizer::new(kind, 0.05, 2);
            let mut x = [3.0, -2.0];
            for _ in 0..2000 {
                let g = [2.0 * x[0], 4.0 * x[1]];
                opt.step(&mut x, &g);
            }
            assert!(x[0].abs() < 1e-3 && x[1].abs() < 1e-3, "{kind:?} {x:?}");
        }
    }

    #[test]
    fn first_adam_step_has_learning_rate_magnitude() {
        let mut opt = Optimizer::new(OptimizerKind::ADAM, 0.1, 1);
        let mut x = [1.0];
        opt.step(&mut x, &[123.0]);
        assert!((x[0] - 0.9).abs() < 1e-6);
    }
}
