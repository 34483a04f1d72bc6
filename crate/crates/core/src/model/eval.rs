use crate::data::{noise_model_description, Dataset};
use crate::distinct::{membership_unchecked, pooled_mean_percent, IdSoftmaxMode, MembershipMaps};
use crate::error::{Error, Result};
use crate::metrics::{
    iou_per_class, miou_from_ious, reliability_table, ConfusionMatrix, DatasetMetrics, MetricsReport,
    ReliabilityBins,
};
use crate::model::{composite_field, forward, ModelParams};
use crate::numerics::argmax_unchecked;
use crate::par;
use crate::tensor::{LabelField, TensorField};
use crate::{IGNORE_LABEL, TOOL_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ece_bins: usize,
    pub id_softmax: IdSoftmaxMode,
    pub config_hash: String,
    /// Resolved configuration echoed into the report.
    pub config: serde_json::Value,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ece_bins: 15,
            id_softmax: IdSoftmaxMode::SubVector,
            config_hash: String::new(),
            config: serde_json::Value::Null,
            seed: 0,
        }
    }
}

/// Everything the model says about one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Background-first composite logits `(k, H, W)`.
    pub composite: TensorField,
    /// k-way argmax per pixel.
    pub labels: LabelField,
    /// Max of the full k-way softmax per pixel.
    pub confidence: Vec<f64>,
    pub maps: MembershipMaps,
}

pub fn predict(params: &ModelParams, image: &TensorField, mode: IdSoftmaxMode) -> Result<Prediction> {
    let (raw, _) = forward(params, image)?;
    let composite = composite_field(params.head, &raw)?;
    let (k, h, w) = composite.shape();
    let plane = h * w;
    let mut labels = LabelField::filled(h, w, 0);
    let mut confidence = vec![0.0; plane];
    let mut mu_id = TensorField::zeros(1, h, w);
    let mut mu_bg = TensorField::zeros(1, h, w);
    let mut mu_nd = TensorField::zeros(1, h, w);
    let mut v = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    for p in 0..plane {
        composite.pixel_into(p, &mut v);
        let m = membership_unchecked(&v, mode, &mut scratch);
        // scratch now holds softmax(v)
        let cls = argmax_unchecked(&v);
        labels.data_mut()[p] = cls as u8;
        confidence[p] = scratch[cls];
        mu_id.data_mut()[p] = m.mu_id;
        mu_bg.data_mut()[p] = m.mu_bg;
        mu_nd.data_mut()[p] = m.mu_nd;
    }
    Ok(Prediction {
        composite,
        labels,
        confidence,
        maps: MembershipMaps { mu_id, mu_bg, mu_nd },
    })
}

struct ImageStats {
    cm: ConfusionMatrix,
    bins: ReliabilityBins,
    nd_sum: f64,
    pixels: usize,
}

fn image_stats(params: &ModelParams, image: &TensorField, gt: &LabelField, opts: &EvalOptions) -> Result<ImageStats> {
    let pred = predict(params, image, opts.id_softmax)?;
    let mut cm = ConfusionMatrix::new(params.num_classes)?;
    cm.add(&pred.labels, gt, IGNORE_LABEL)?;
    let mut bins = ReliabilityBins::new(opts.ece_bins)?;
    for ((c, p), g) in pred.confidence.iter().zip(pred.labels.data()).zip(gt.data()) {
        if *g != IGNORE_LABEL {
            bins.push(*c, p == g);
        }
    }
    Ok(ImageStats {
        cm,
        bins,
        nd_sum: pred.maps.nd_sum(),
        pixels: pred.maps.pixels(),
    })
}

/// Metrics for one dataset. Images are scored in parallel and merged in order.
pub fn evaluate_dataset(params: &ModelParams, dataset: &Dataset, opts: &EvalOptions) -> Result<DatasetMetrics> {
    if dataset.is_empty() {
        return Err(Error::invalid(format!("dataset {} is empty", dataset.id)));
    }
    let stats: Vec<Result<ImageStats>> =
        par::map(&dataset.items, |item| image_stats(params, &item.image, &item.labels(), opts));
    let mut cm = ConfusionMatrix::new(params.num_classes)?;
    let mut bins = ReliabilityBins::new(opts.ece_bins)?;
    let mut nd_sums = Vec::with_capacity(stats.len());
    let mut nd_counts = Vec::with_capacity(stats.len());
    for s in stats {
        let s = s?;
        cm.merge(&s.cm)?;
        bins.merge(&s.bins)?;
        nd_sums.push(s.nd_sum);
        nd_counts.push(s.pixels);
    }
    let ious = iou_per_class(&cm);
    let ood = dataset.kind.is_ood();
    let (miou, bg_iou) = if ood {
        (None, Some(ious[0].map_or(0.0, |x| 100.0 * x)))
    } else {
        (Some(miou_from_ious(&ious)?), None)
    };
    Ok(DatasetMetrics {
        dataset: dataset.id.clone(),
        kind: dataset.kind,
        images: dataset.len(),
        scored_pixels: cm.total(),
        scoring: if ood {
            "all pixels (implicit all-background ground truth)".into()
        } else {
            "non-void pixels".into()
        },
        per_class_iou: ious,
        miou,
        bg_iou,
        ece: bins.ece(),
        expected_nd: pooled_mean_percent(&nd_sums, &nd_counts)?,
        reliability: reliability_table(&bins),
    })
}

/// Evaluates every dataset (validation first, then OOD sets) into one report.
pub fn evaluate(params: &ModelParams, datasets: &[&Dataset], opts: &EvalOptions) -> Result<MetricsReport> {
    if datasets.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let report = MetricsReport {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: opts.config_hash.clone(),
        head_kind: params.head,
        seed: opts.seed,
        num_classes: params.num_classes,
        id_softmax: opts.id_softmax,
        ece_bins: opts.ece_bins,
        noise_model: noise_model_description(),
        config: opts.config.clone(),
        datasets: datasets
            .iter()
            .map(|d| evaluate_dataset(params, d, opts))
            .collect::<Result<_>>()?,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GeneratorSpec, SceneSpec};
    use crate::heads::HeadKind;
    use crate::metrics::miou;

    fn val_set() -> Dataset {
        GeneratorSpec::Scenes {
            spec: SceneSpec { height: 16, width: 16, ..SceneSpec::default() },
            first_index: 100,
            count: 12,
        }
        .generate("val")
        .unwrap()
    }

    fn constant_prediction_miou(ds: &Dataset, k: usize, class: u8) -> f64 {
        let mut cm = ConfusionMatrix::new(k).unwrap();
        for item in &ds.items {
            let gt = item.labels();
            let pred = LabelField::filled(gt.height(), gt.width(), class);
            cm.add(&pred, &gt, IGNORE_LABEL).unwrap();
        }
        miou(&cm).unwrap()
    }

    #[test]
    fn zero_params_predict_a_constant_class() {
        let ds = val_set();
        // explicit: all-zero logits, the tie goes to background
        let p = ModelParams::zeros(HeadKind::Explicit, 5).unwrap();
        let m = evaluate_dataset(&p, &ds, &EvalOptions::default()).unwrap();
        assert!((m.miou.unwrap() - constant_prediction_miou(&ds, 5, 0)).abs() < 1e-12);
        // implicit: background logit is -ln 4 < 0, so class 1 wins the tie
        let p = ModelParams::zeros(HeadKind::Implicit, 5).unwrap();
        let m = evaluate_dataset(&p, &ds, &EvalOptions::default()).unwrap();
        assert!((m.miou.unwrap() - constant_prediction_miou(&ds, 5, 1)).abs() < 1e-12);
        // composite [-ln 4, 0, 0, 0, 0]: mu_bg = 1/(1 + 16) and mu_id = 1/4
        assert!((m.expected_nd - 100.0 / 68.0).abs() < 1e-12);
    }

    #[test]
    fn report_is_in_range_and_deterministic() {
        let ds = val_set();
        let noise = GeneratorSpec::Noise { seed: 1, height: 16, width: 16, count: 3 }
            .generate("noise")
            .unwrap();
        let p = ModelParams::init(HeadKind::Implicit, 5, 4).unwrap();
        let opts = EvalOptions { config_hash: "h".into(), seed: 4, ..EvalOptions::default() };
        let a = evaluate(&p, &[&ds, &noise], &opts).unwrap();
        a.validate().unwrap();
        assert!(a.dataset("val").unwrap().miou.is_some());
        assert!(a.dataset("noise").unwrap().bg_iou.is_some());
        let b = evaluate(&p, &[&ds, &noise], &opts).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let one = crate::par::with_threads(1, || evaluate(&p, &[&ds, &noise], &opts).unwrap());
        assert_eq!(a.to_json().unwrap(), one.to_json().unwrap());
    }

    #[test]
    fn prediction_maps_are_consistent() {
        let ds = val_set();
        let p = ModelParams::init(HeadKind::Explicit, 5, 2).unwrap();
        let pred = predict(&p, &ds.items[0].image, IdSoftmaxMode::SubVector).unwrap();
        for i in 0..pred.confidence.len() {
            assert!(pred.confidence[i] > 0.0 && pred.confidence[i] <= 1.0);
            let nd = pred.maps.mu_nd.data()[i];
            assert_eq!(nd, pred.maps.mu_bg.data()[i] * pred.maps.mu_id.data()[i]);
        }
        let empty = Dataset { items: vec![], ..ds };
        assert!(evaluate_dataset(&p, &empty, &EvalOptions::default()).is_err());
    }
}
