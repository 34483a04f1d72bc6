use crate::error::{Error, Result};
use crate::model::ModelParams;

/// SGD with classic momentum: `v <- momentum v + g`, `p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, param_count: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: vec![0.0; param_count],
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// Applies one update. A non-finite gradient leaves `params` untouched and
    /// reports divergence (epoch 0; the trainer fills in the real epoch).
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if grads.param_count() != self.velocity.len() || params.param_count() != self.velocity.len() {
            return Err(Error::invalid("gradient layout does not match the optimizer state"));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                reason: "non-finite gradient".into(),
            });
        }
        for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        if !params.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                reason: "non-finite parameter after update".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    fn constant(head: HeadKind, v: f64) -> ModelParams {
        let mut p = ModelParams::zeros(head, 3).unwrap();
        for x in p.iter_mut() {
            *x = v;
        }
        p
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut p = constant(HeadKind::Implicit, 1.0);
        let g = constant(HeadKind::Implicit, 0.5);
        let mut opt = Sgd::new(0.1, 0.0, p.param_count()).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!(p.iter().all(|x| (x - 0.95).abs() < 1e-15));
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = constant(HeadKind::Explicit, 0.3);
        let before = p.clone();
        let mut opt = Sgd::new(0.1, 0.9, p.param_count()).unwrap();
        let z = p.zeros_like();
        opt.step(&mut p, &z).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_unrolls() {
        let mut p = constant(HeadKind::Explicit, 0.0);
        let g = constant(HeadKind::Explicit, 2.0);
        let mut opt = Sgd::new(0.05, 0.9, p.param_count()).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        let expected = -0.05 * 2.0 * (1.0 + 1.9);
        assert!(p.iter().all(|x| (x - expected).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_settings_and_gradients() {
        assert!(Sgd::new(0.0, 0.9, 1).is_err());
        assert!(Sgd::new(0.1, 1.0, 1).is_err());
        let mut p = constant(HeadKind::Explicit, 0.0);
        let mut g = p.zeros_like();
        g.conv2.bias[3] = f64::NAN;
        let mut opt = Sgd::new(0.1, 0.9, p.param_count()).unwrap();
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Divergence { .. })));
        assert!(p.iter().all(|x| *x == 0.0));
    }
}
