//! Finite-difference check of the full backward pass.
//!
//! Central differences across a ReLU kink measure a blend of two slopes, so
//! every parameter is also classified by whether any hidden unit changes sign
//! inside its `±h` window. Only kink-free parameters are expected to agree to
//! tight tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::model::loss::cross_entropy_loss;
use crate::model::{composite_field, forward, loss_and_grad, ModelParams};
use crate::tensor::{LabelField, TensorField};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub head: HeadKind,
    pub step: f64,
    pub tolerance: f64,
    pub params: usize,
    /// Parameters whose analytic and numeric derivatives agree.
    pub within: usize,
    /// Parameters with no ReLU sign change inside the `±h` window.
    pub smooth: usize,
    pub smooth_within: usize,
    pub max_smooth_error: f64,
}

impl GradientCheck {
    pub fn fraction_within(&self) -> f64 {
        self.within as f64 / self.params as f64
    }

    pub fn fraction_smooth_within(&self) -> f64 {
        if self.smooth == 0 {
            return 1.0;
        }
        self.smooth_within as f64 / self.smooth as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn loss_and_pattern(params: &ModelParams, image: &TensorField, labels: &LabelField) -> Result<(f64, Vec<bool>)> {
    let (raw, acts) = forward(params, image)?;
    let comp = composite_field(params.head, &raw)?;
    let (loss, _) = cross_entropy_loss(&comp, labels, crate::IGNORE_LABEL)?;
    Ok((loss, acts.active_pattern()))
}

/// Random `size x size` instance with `num_classes` labels drawn from `seed`.
pub fn gradient_check(
    head: HeadKind,
    num_classes: usize,
    size: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradientCheck> {
    if !(step > 0.0) || !(tolerance > 0.0) {
        return Err(Error::invalid("step and tolerance must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(head, num_classes, seed)?;
    let n = size * size;
    let image = TensorField::from_vec(3, size, size, (0..3 * n).map(|_| rng.random()).collect())?;
    let labels = LabelField::from_vec(size, size, (0..n).map(|_| rng.random_range(0..num_classes as u8)).collect())?;
    let (_, _, _, grads) = loss_and_grad(&params, &image, &labels)?;
    let analytic = grads.to_flat();
    let (_, base) = loss_and_pattern(&params, &image, &labels)?;
    let flat = params.to_flat();

    let outcomes = crate::par::map_range(flat.len(), |i| -> Result<(bool, bool, f64)> {
        let mut p = params.clone();
        let mut x = flat.clone();
        x[i] = flat[i] + step;
        p.set_flat(&x)?;
        let (up, up_pattern) = loss_and_pattern(&p, &image, &labels)?;
        x[i] = flat[i] - step;
        p.set_flat(&x)?;
        let (down, down_pattern) = loss_and_pattern(&p, &image, &labels)?;
        let err = relative_error(analytic[i], (up - down) / (2.0 * step));
        let smooth = up_pattern == base && down_pattern == base;
        Ok((err <= tolerance, smooth, err))
    });

    let mut check = GradientCheck {
        head,
        step,
        tolerance,
        params: flat.len(),
        within: 0,
        smooth: 0,
        smooth_within: 0,
        max_smooth_error: 0.0,
    };
    for outcome in outcomes {
        let (ok, smooth, err) = outcome?;
        check.within += ok as usize;
        if smooth {
            check.smooth += 1;
            check.smooth_within += ok as usize;
            check.max_smooth_error = check.max_smooth_error.max(err);
        }
    }
    Ok(check)
}
