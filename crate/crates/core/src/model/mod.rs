//! A tiny fully-convolutional segmentation network.
//!
//! `3 -> 16 -> 32 -> out`: two 3x3 ReLU convolutions and a linear 1x1 head,
//! all same-padded, in double precision. `out` is `k` for the explicit head
//! and `k - 1` for the implicit head; [`composite_field`] turns the raw output
//! into background-first composite logits.

mod checkpoint;
mod conv;
mod eval;
mod gradcheck;
mod loss;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, LayerShape, CHECKPOINT_VERSION};
pub use conv::Conv2d;
pub use gradcheck::{gradient_check, relative_error, GradientCheck};
pub use eval::{evaluate, evaluate_dataset, predict, EvalOptions, Prediction};
pub use loss::cross_entropy_loss;
pub use optim::Sgd;
pub use train::{train, train_with, EpochRecord, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{apply_head_into, implicit_backward_into, HeadKind};
use crate::tensor::TensorField;

use conv::Columns;

pub const HIDDEN1: usize = 16;
pub const HIDDEN2: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub head: HeadKind,
    pub num_classes: usize,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

impl ModelParams {
    pub fn zeros(head: HeadKind, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(Self {
            head,
            num_classes,
            conv1: Conv2d::zeros(3, HIDDEN1, 3),
            conv2: Conv2d::zeros(HIDDEN1, HIDDEN2, 3),
            conv3: Conv2d::zeros(HIDDEN2, head.raw_channels(num_classes), 1),
        })
    }

    /// Seeded fan-in-scaled uniform initialization, zero biases.
    ///
    /// The draw order is conv1, conv2, then the head filters of classes
    /// `1..k` and finally (explicit only) the background filter, so both head
    /// kinds share every in-distribution filter for the same seed.
    pub fn init(head: HeadKind, num_classes: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(head, num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x1417);
        for layer in [&mut p.conv1, &mut p.conv2] {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            for o in 0..layer.out_channels {
                layer.fill_filter(o, bound, &mut rng);
            }
        }
        let bound = (3.0 / p.conv3.fan_in() as f64).sqrt();
        let offset = usize::from(head == HeadKind::Explicit);
        for class in 1..num_classes {
            p.conv3.fill_filter(class - 1 + offset, bound, &mut rng);
        }
        if head == HeadKind::Explicit {
            p.conv3.fill_filter(0, bound, &mut rng);
        }
        Ok(p)
    }

    /// Zeroed parameters with the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.head, self.num_classes).expect("layout already validated")
    }

    pub fn raw_channels(&self) -> usize {
        self.conv3.out_channels
    }

    pub fn layers(&self) -> [&Conv2d; 3] {
        [&self.conv1, &self.conv2, &self.conv3]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// Parameters in canonical order: per layer, weights then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.conv1.params().chain(self.conv2.params()).chain(self.conv3.params())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.conv1
            .params_mut()
            .chain(self.conv2.params_mut())
            .chain(self.conv3.params_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        for (p, v) in self.iter_mut().zip(values) {
            *p = *v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub(crate) fn scale(&mut self, s: f64) {
        for a in self.iter_mut() {
            *a *= s;
        }
    }
}

/// Intermediate values kept for the backward pass.
pub struct Activations {
    input: Columns,
    hidden1: Columns,
    hidden2: Columns,
    relu1: TensorField,
    relu2: TensorField,
}

impl Activations {
    /// Sign pattern of every hidden unit before its ReLU.
    pub(crate) fn active_pattern(&self) -> Vec<bool> {
        self.relu1.data().iter().chain(self.relu2.data()).map(|v| *v > 0.0).collect()
    }
}

fn relu_in_place(t: &mut TensorField) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// Raw head logits `(out, H, W)` plus cached activations.
pub fn forward(params: &ModelParams, image: &TensorField) -> Result<(TensorField, Activations)> {
    let (c, h, w) = image.shape();
    if c != params.conv1.in_channels {
        return Err(Error::invalid(format!("expected a 3-channel image, got {c} channels")));
    }
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!("image must be at least 3x3, got {h}x{w}")));
    }
    let input = Columns::new(image, params.conv1.kernel);
    let mut relu1 = params.conv1.forward_columns(&input, h, w);
    relu_in_place(&mut relu1);
    let hidden1 = Columns::new(&relu1, params.conv2.kernel);
    let mut relu2 = params.conv2.forward_columns(&hidden1, h, w);
    relu_in_place(&mut relu2);
    let hidden2 = Columns::new(&relu2, params.conv3.kernel);
    let raw = params.conv3.forward_columns(&hidden2, h, w);
    Ok((
        raw,
        Activations {
            input,
            hidden1,
            hidden2,
            relu1,
            relu2,
        },
    ))
}

/// Parameter gradients given the gradient of the raw head output.
pub fn backward(params: &ModelParams, acts: &Activations, grad_raw: &TensorField) -> ModelParams {
    let mut grads = params.zeros_like();
    let mut g2 = params
        .conv3
        .backward_columns(&acts.hidden2, grad_raw, &mut grads.conv3, true)
        .expect("input gradient requested");
    for (g, a) in g2.data_mut().iter_mut().zip(acts.relu2.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    let mut g1 = params
        .conv2
        .backward_columns(&acts.hidden1, &g2, &mut grads.conv2, true)
        .expect("input gradient requested");
    for (g, a) in g1.data_mut().iter_mut().zip(acts.relu1.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    params.conv1.backward_columns(&acts.input, &g1, &mut grads.conv1, false);
    grads
}

/// Applies the head at every pixel: `(raw, H, W)` to `(k, H, W)`.
pub fn composite_field(kind: HeadKind, raw: &TensorField) -> Result<TensorField> {
    let (c, h, w) = raw.shape();
    let k = match kind {
        HeadKind::Explicit => c,
        HeadKind::Implicit => c + 1,
    };
    if c == 0 || k < 2 {
        return Err(Error::invalid(format!("{c} raw channels is too few for the {kind} head")));
    }
    let mut out = TensorField::zeros(k, h, w);
    let plane = h * w;
    let mut v = vec![0.0; c];
    let mut comp = vec![0.0; k];
    for p in 0..plane {
        raw.pixel_into(p, &mut v);
        apply_head_into(kind, &v, &mut comp);
        for (ch, val) in comp.iter().enumerate() {
            out.data_mut()[ch * plane + p] = *val;
        }
    }
    Ok(out)
}

/// Pulls a composite-logit gradient back to the raw head output.
pub fn composite_backward(kind: HeadKind, raw: &TensorField, grad_comp: &TensorField) -> TensorField {
    match kind {
        HeadKind::Explicit => grad_comp.clone(),
        HeadKind::Implicit => {
            let (c, h, w) = raw.shape();
            let plane = h * w;
            let mut out = TensorField::zeros(c, h, w);
            let mut v = vec![0.0; c];
            let mut g = vec![0.0; c + 1];
            let mut res = vec![0.0; c];
            for p in 0..plane {
                raw.pixel_into(p, &mut v);
                grad_comp.pixel_into(p, &mut g);
                implicit_backward_into(&v, &g, &mut res);
                for (ch, val) in res.iter().enumerate() {
                    out.data_mut()[ch * plane + p] = *val;
                }
            }
            out
        }
    }
}

/// Loss, correct-pixel count, scored-pixel count and parameter gradients for one image.
pub fn loss_and_grad(
    params: &ModelParams,
    image: &TensorField,
    labels: &crate::tensor::LabelField,
) -> Result<(f64, usize, usize, ModelParams)> {
    let (raw, acts) = forward(params, image)?;
    let comp = composite_field(params.head, &raw)?;
    let (loss, grad_comp) = cross_entropy_loss(&comp, labels, crate::IGNORE_LABEL)?;
    let (correct, scored) = loss::pixel_accuracy_counts(&comp, labels, crate::IGNORE_LABEL);
    let grad_raw = composite_backward(params.head, &raw, &grad_comp);
    Ok((loss, correct, scored, backward(params, &acts, &grad_raw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> TensorField {
        TensorField::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ModelParams::zeros(HeadKind::Explicit, 5).unwrap();
        let (raw, _) = forward(&p, &TensorField::zeros(3, 6, 7)).unwrap();
        assert_eq!(raw.shape(), (5, 6, 7));
        assert!(raw.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_shape_and_errors() {
        let p = ModelParams::init(HeadKind::Implicit, 5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (raw, _) = forward(&p, &random_image(&mut rng, 9, 4)).unwrap();
        assert_eq!(raw.shape(), (4, 9, 4));
        assert!(forward(&p, &TensorField::zeros(1, 9, 9)).is_err());
        assert!(forward(&p, &TensorField::zeros(3, 2, 9)).is_err());
        assert!(ModelParams::zeros(HeadKind::Implicit, 1).is_err());
    }

    #[test]
    fn translation_changes_only_border_outputs() {
        let p = ModelParams::init(HeadKind::Explicit, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, w) = (12, 12);
        let img = random_image(&mut rng, h, w);
        let mut shifted = TensorField::zeros(3, h, w);
        for c in 0..3 {
            for y in 1..h {
                for x in 1..w {
                    shifted.set(c, y, x, img.get(c, y - 1, x - 1));
                }
            }
        }
        let (a, _) = forward(&p, &img).unwrap();
        let (b, _) = forward(&p, &shifted).unwrap();
        // 5x5 receptive field: outputs at distance >= 2 from any border or
        // from the vacated first row/column agree exactly after the shift
        for c in 0..4 {
            for y in 3..h - 2 {
                for x in 3..w - 2 {
                    assert!((b.get(c, y, x) - a.get(c, y - 1, x - 1)).abs() < 1e-12);
                }
            }
        }
        assert!((b.get(0, 1, 1) - a.get(0, 0, 0)).abs() > 0.0);
    }

    #[test]
    fn parameter_counts_differ_by_one_head_channel() {
        let e = ModelParams::zeros(HeadKind::Explicit, 5).unwrap();
        let i = ModelParams::zeros(HeadKind::Implicit, 5).unwrap();
        assert_eq!(e.param_count() - i.param_count(), HIDDEN2 + 1);
        assert_eq!(i.param_count(), 448 + 4640 + 4 * 33);
    }

    #[test]
    fn heads_share_in_distribution_filters() {
        let e = ModelParams::init(HeadKind::Explicit, 5, 9).unwrap();
        let i = ModelParams::init(HeadKind::Implicit, 5, 9).unwrap();
        assert_eq!(e.conv1, i.conv1);
        assert_eq!(e.conv2, i.conv2);
        let n = e.conv3.filter_len();
        assert_eq!(&e.conv3.weight[n..], &i.conv3.weight[..]);
        assert_ne!(ModelParams::init(HeadKind::Explicit, 5, 10).unwrap(), e);
    }

    #[test]
    fn flat_round_trip() {
        let p = ModelParams::init(HeadKind::Implicit, 3, 2).unwrap();
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[0.0; 3]).is_err());
    }
}
