use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::model::{loss_and_grad, ModelParams, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub head: HeadKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
            seed: 1,
            head: HeadKind::Implicit,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-image cross-entropy seen during the epoch.
    pub loss: f64,
    pub pixel_accuracy: f64,
    pub steps: usize,
}

pub fn train(config: &TrainConfig, dataset: &Dataset, num_classes: usize) -> Result<(ModelParams, Vec<EpochRecord>)> {
    train_with(config, dataset, num_classes, |_| {})
}

/// Single-threaded, seeded training; `on_epoch` sees each record as it completes.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    num_classes: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut params = ModelParams::init(config.head, num_classes, config.seed)?;
    let mut opt = Sgd::new(config.lr, config.momentum, params.param_count())?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0x7472_0000 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut scored = 0usize;
        let mut steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            for &i in batch {
                let item = &dataset.items[i];
                let (loss, c, s, g) = loss_and_grad(&params, &item.image, &item.labels())?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        reason: format!("non-finite loss on item {i}"),
                    });
                }
                loss_sum += loss;
                correct += c;
                scored += s;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut params, &grads).map_err(|e| match e {
                Error::Divergence { reason, .. } => Error::Divergence { epoch, reason },
                other => other,
            })?;
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            pixel_accuracy: correct as f64 / scored.max(1) as f64,
            steps,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok((params, log))
}
