use crate::error::{Error, Result};
use crate::numerics::{argmax_unchecked, logsumexp_unchecked, softmax_into_unchecked};
use crate::tensor::{LabelField, TensorField};

/// Mean per-pixel cross-entropy over scored pixels and its gradient.
///
/// The gradient at a scored pixel is `(softmax(v) - onehot(label)) / n_scored`
/// and zero at ignored pixels.
pub fn cross_entropy_loss(
    composite: &TensorField,
    labels: &LabelField,
    ignore_label: u8,
) -> Result<(f64, TensorField)> {
    let (k, h, w) = composite.shape();
    if labels.height() != h || labels.width() != w {
        return Err(Error::invalid("labels do not match the logit field"));
    }
    let scored = labels.data().iter().filter(|l| **l != ignore_label).count();
    if scored == 0 {
        return Err(Error::invalid("cross-entropy needs at least one scored pixel"));
    }
    if let Some(bad) = labels
        .data()
        .iter()
        .find(|l| **l != ignore_label && usize::from(**l) >= k)
    {
        return Err(Error::invalid(format!("label {bad} outside 0..{k}")));
    }
    let plane = h * w;
    let inv = 1.0 / scored as f64;
    let mut grad = TensorField::zeros(k, h, w);
    let mut v = vec![0.0; k];
    let mut probs = vec![0.0; k];
    let mut total = 0.0;
    for (p, &label) in labels.data().iter().enumerate() {
        if label == ignore_label {
            continue;
        }
        let label = usize::from(label);
        composite.pixel_into(p, &mut v);
        total += logsumexp_unchecked(&v) - v[label];
        softmax_into_unchecked(&v, &mut probs);
        probs[label] -= 1.0;
        for (c, g) in probs.iter().enumerate() {
            grad.data_mut()[c * plane + p] = g * inv;
        }
    }
    Ok((total * inv, grad))
}

/// `(correct, scored)` pixel counts of the k-way argmax.
pub(crate) fn pixel_accuracy_counts(composite: &TensorField, labels: &LabelField, ignore_label: u8) -> (usize, usize) {
    let k = composite.channels();
    let mut v = vec![0.0; k];
    let mut correct = 0;
    let mut scored = 0;
    for (p, &label) in labels.data().iter().enumerate() {
        if label == ignore_label {
            continue;
        }
        composite.pixel_into(p, &mut v);
        scored += 1;
        correct += usize::from(argmax_unchecked(&v) == usize::from(label));
    }
    (correct, scored)
}
