//! Segmentation and calibration metrics.
//!
//! Accumulators are mergeable values: workers build private
//! [`ConfusionMatrix`] / [`ReliabilityBins`] instances and fold them together
//! in a fixed order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distinct::IdSoftmaxMode;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::tensor::LabelField;

/// `counts[g * k + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if !(2..=255).contains(&k) {
            return Err(Error::invalid(format!("class count must be in 2..=255, got {k}")));
        }
        Ok(Self {
            k,
            counts: vec![0; k * k],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    /// Adds every pixel whose ground truth is not `ignore_label`.
    pub fn add(&mut self, pred: &LabelField, gt: &LabelField, ignore_label: u8) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::invalid(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let k = self.k;
        if let Some(bad) = pred.data().iter().find(|p| usize::from(**p) >= k) {
            return Err(Error::invalid(format!("predicted label {bad} outside 0..{k}")));
        }
        if let Some(bad) = gt
            .data()
            .iter()
            .find(|g| **g != ignore_label && usize::from(**g) >= k)
        {
            return Err(Error::invalid(format!("ground-truth label {bad} outside 0..{k}")));
        }
        for (p, g) in pred.data().iter().zip(gt.data()) {
            if *g != ignore_label {
                self.counts[usize::from(*g) * k + usize::from(*p)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::invalid("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn accumulate_confusion(
    k: usize,
    pred: &LabelField,
    gt: &LabelField,
    ignore_label: u8,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k)?;
    cm.add(pred, gt, ignore_label)?;
    Ok(cm)
}

/// `TP / (TP + FP + FN)` per class; `None` when the class never occurs.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let k = cm.k;
    (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.get(g, c)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean IoU over classes with a defined IoU, as a percentage.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    miou_from_ious(&iou_per_class(cm))
}

/// Mean over the defined entries of a per-class IoU vector, as a percentage.
pub fn miou_from_ious(ious: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("mIOU undefined: no class has support"));
    }
    Ok(100.0 * defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Background IoU on an image whose ground truth is entirely background.
///
/// With an all-background ground truth there are no background false
/// positives, so the IoU reduces to the fraction of pixels predicted as
/// background.
pub fn ood_bg_iou(pred: &LabelField) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::invalid("background IoU of an empty prediction"));
    }
    let bg = pred.data().iter().filter(|p| **p == 0).count();
    Ok(100.0 * (bg as f64 / pred.len() as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub count: u64,
    pub confidence_sum: f64,
    pub correct: u64,
}

/// Equal-width bins `(m/M, (m+1)/M]`; confidence 0 lands in bin 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBins {
    bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn new(m: usize) -> Result<Self> {
        if m < 1 {
            return Err(Error::invalid("ECE needs at least one bin"));
        }
        Ok(Self {
            bins: vec![Bin::default(); m],
        })
    }

    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Bin index with right-closed edges computed as `m as f64 / M as f64`.
    #[inline]
    pub fn bin_index(&self, confidence: f64) -> usize {
        let m = self.bins.len();
        let mf = m as f64;
        let mut idx = ((confidence * mf).ceil() as isize - 1).clamp(0, m as isize - 1) as usize;
        while idx > 0 && confidence <= idx as f64 / mf {
            idx -= 1;
        }
        while idx + 1 < m && confidence > (idx + 1) as f64 / mf {
            idx += 1;
        }
        idx
    }

    #[inline]
    pub fn push(&mut self, confidence: f64, correct: bool) {
        let idx = self.bin_index(confidence);
        let b = &mut self.bins[idx];
        b.count += 1;
        b.confidence_sum += confidence;
        b.correct += u64::from(correct);
    }

    pub fn merge(&mut self, other: &ReliabilityBins) -> Result<()> {
        if other.bins.len() != self.bins.len() {
            return Err(Error::invalid("cannot merge reliability bins of different sizes"));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.count += b.count;
            a.confidence_sum += b.confidence_sum;
            a.correct += b.correct;
        }
        Ok(())
    }

    /// `100 Σ (|B|/n) |acc(B) - conf(B)|`; 0 for empty bins.
    pub fn ece(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        let n = n as f64;
        100.0
            * self
                .bins
                .iter()
                .filter(|b| b.count > 0)
                .map(|b| {
                    let c = b.count as f64;
                    (c / n) * (b.correct as f64 / c - b.confidence_sum / c).abs()
                })
                .sum::<f64>()
    }
}

pub fn ece(confidences: &[f64], correct: &[bool], m: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::invalid(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::invalid("ECE of an empty set"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut bins = ReliabilityBins::new(m)?;
    for (c, ok) in confidences.iter().zip(correct) {
        bins.push(*c, *ok);
    }
    Ok(bins.ece())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// One row per non-empty bin.
pub fn reliability_table(bins: &ReliabilityBins) -> Vec<ReliabilityRow> {
    let m = bins.len() as f64;
    bins.bins
        .iter()
        .enumerate()
        .filter(|(_, b)| b.count > 0)
        .map(|(i, b)| ReliabilityRow {
            bin_lo: i as f64 / m,
            bin_hi: (i + 1) as f64 / m,
            count: b.count,
            mean_confidence: b.confidence_sum / b.count as f64,
            accuracy: b.correct as f64 / b.count as f64,
        })
        .collect()
}

/// ECE recomputed from table rows.
pub fn ece_from_table(rows: &[ReliabilityRow]) -> f64 {
    let n: u64 = rows.iter().map(|r| r.count).sum();
    if n == 0 {
        return 0.0;
    }
    100.0
        * rows
            .iter()
            .map(|r| (r.count as f64 / n as f64) * (r.accuracy - r.mean_confidence).abs())
            .sum::<f64>()
}

/// Metrics for one evaluated dataset. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub kind: crate::data::DatasetKind,
    pub images: usize,
    pub scored_pixels: u64,
    /// Which pixels entered ECE and IoU.
    pub scoring: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub bg_iou: Option<f64>,
    pub ece: f64,
    pub expected_nd: f64,
    pub reliability: Vec<ReliabilityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub tool_version: String,
    pub config_hash: String,
    pub head_kind: HeadKind,
    pub seed: u64,
    pub num_classes: usize,
    pub id_softmax: IdSoftmaxMode,
    pub ece_bins: usize,
    pub noise_model: String,
    pub config: serde_json::Value,
    pub datasets: Vec<DatasetMetrics>,
}

impl MetricsReport {
    pub fn dataset(&self, name: &str) -> Option<&DatasetMetrics> {
        self.datasets.iter().find(|d| d.dataset == name)
    }

    /// Checks every percentage lies in `[0, 100]`.
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=100.0).contains(&v);
        for d in &self.datasets {
            let pcts = [Some(d.ece), Some(d.expected_nd), d.miou, d.bg_iou];
            if pcts.into_iter().flatten().any(|v| !ok(v)) {
                return Err(Error::Format(format!(
                    "dataset {} has a percentage outside [0, 100]",
                    d.dataset
                )));
            }
            if d.per_class_iou.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format(format!("dataset {} has IoU outside [0, 1]", d.dataset)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// `section,key,value` rows: metadata first, then one row per metric.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(["section", "key", "value"]).map_err(csv_err)?;
        let seed = self.seed.to_string();
        let k = self.num_classes.to_string();
        let bins = self.ece_bins.to_string();
        let meta = [
            ("tool_version", self.tool_version.as_str()),
            ("config_hash", self.config_hash.as_str()),
            ("head_kind", self.head_kind.as_str()),
            ("seed", seed.as_str()),
            ("num_classes", k.as_str()),
            ("id_softmax", self.id_softmax.as_str()),
            ("ece_bins", bins.as_str()),
            ("noise_model", self.noise_model.as_str()),
        ];
        for (key, value) in meta {
            w.write_record(["meta", key, value]).map_err(csv_err)?;
        }
        for d in &self.datasets {
            let mut rows: Vec<(String, String)> = Vec::new();
            if let Some(v) = d.miou {
                rows.push(("miou".into(), v.to_string()));
            }
            if let Some(v) = d.bg_iou {
                rows.push(("bg_iou".into(), v.to_string()));
            }
            rows.push(("ece".into(), d.ece.to_string()));
            rows.push(("expected_nd".into(), d.expected_nd.to_string()));
            for (c, v) in d.per_class_iou.iter().enumerate() {
                let value = v.map(|x| x.to_string()).unwrap_or_default();
                rows.push((format!("iou_class_{c}"), value));
            }
            for (key, value) in rows {
                w.write_record([d.dataset.as_str(), key.as_str(), value.as_str()])
                    .map_err(csv_err)?;
            }
        }
        w.into_inner()
            .map_err(|e| Error::Format(format!("csv: {e}")))
    }

    pub fn reliability_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record([
            "tool_version",
            "config_hash",
            "dataset",
            "bin_lo",
            "bin_hi",
            "count",
            "mean_confidence",
            "accuracy",
        ])
        .map_err(csv_err)?;
        for d in &self.datasets {
            for r in &d.reliability {
                w.write_record([
                    self.tool_version.clone(),
                    self.config_hash.clone(),
                    d.dataset.clone(),
                    r.bin_lo.to_string(),
                    r.bin_hi.to_string(),
                    r.count.to_string(),
                    r.mean_confidence.to_string(),
                    r.accuracy.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.into_inner()
            .map_err(|e| Error::Format(format!("csv: {e}")))
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>_reliability.csv`.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<()> {
        self.validate()?;
        write_bytes(&dir.join(format!("{stem}.json")), &self.to_json()?)?;
        write_bytes(&dir.join(format!("{stem}.csv")), &self.to_csv()?)?;
        write_bytes(
            &dir.join(format!("{stem}_reliability.csv")),
            &self.reliability_csv()?,
        )
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(h: usize, w: usize, v: &[u8]) -> LabelField {
        LabelField::from_vec(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let gt = field(2, 3, &[0, 1, 2, 2, 1, 0]);
        let cm = accumulate_confusion(3, &gt, &gt, 255).unwrap();
        assert_eq!(cm.trace(), 6);
        assert_eq!(cm.total(), 6);

        let ign = field(2, 3, &[255; 6]);
        let cm = accumulate_confusion(3, &gt, &ign, 255).unwrap();
        assert_eq!(cm.total(), 0);

        let gt = field(2, 2, &[0, 0, 1, 1]);
        let pred = field(2, 2, &[0, 1, 1, 1]);
        let cm = accumulate_confusion(2, &pred, &gt, 255).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 2));

        assert!(accumulate_confusion(2, &field(1, 2, &[0, 0]), &gt, 255).is_err());
        assert!(accumulate_confusion(2, &field(2, 2, &[0, 5, 0, 0]), &gt, 255).is_err());
        assert!(ConfusionMatrix::new(1).is_err());
    }

    #[test]
    fn iou_examples() {
        let gt = field(1, 4, &[0, 1, 1, 0]);
        let cm = accumulate_confusion(3, &gt, &gt, 255).unwrap();
        assert_eq!(iou_per_class(&cm), vec![Some(1.0), Some(1.0), None]);
        assert_eq!(miou(&cm).unwrap(), 100.0);

        let gt = field(2, 2, &[0, 0, 1, 1]);
        let pred = field(2, 2, &[0, 1, 1, 1]);
        let cm = accumulate_confusion(2, &pred, &gt, 255).unwrap();
        assert_eq!(iou_per_class(&cm), vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((miou(&cm).unwrap() - 175.0 / 3.0).abs() < 1e-12);
        assert!((miou(&cm).unwrap() - 58.3333).abs() < 1e-4);

        // 4 of 5 class-0 pixels right, class 1 absent everywhere
        let gt = field(1, 5, &[0; 5]);
        let pred = field(1, 5, &[0, 0, 0, 0, 2]);
        let cm = accumulate_confusion(3, &pred, &gt, 255).unwrap();
        let ious = iou_per_class(&cm);
        assert_eq!(ious[1], None);
        assert_eq!(ious[2], Some(0.0));
        let only = accumulate_confusion(2, &field(1, 5, &[0, 0, 0, 0, 1]), &field(1, 5, &[0, 0, 0, 0, 255]), 255)
            .unwrap();
        assert_eq!(iou_per_class(&only), vec![Some(1.0), None]);
        assert!((miou_from_ious(&[Some(0.8), None, None]).unwrap() - 80.0).abs() < 1e-12);
        assert!(miou_from_ious(&[None, None]).is_err());
        assert!(miou(&ConfusionMatrix::new(3).unwrap()).is_err());
    }

    #[test]
    fn ood_examples() {
        assert_eq!(ood_bg_iou(&field(2, 2, &[0; 4])).unwrap(), 100.0);
        assert_eq!(ood_bg_iou(&field(2, 2, &[3; 4])).unwrap(), 0.0);
        let pred = field(2, 2, &[0, 0, 2, 0]);
        assert_eq!(ood_bg_iou(&pred).unwrap(), 75.0);
        let cm = accumulate_confusion(4, &pred, &field(2, 2, &[0; 4]), 255).unwrap();
        assert_eq!(100.0 * iou_per_class(&cm)[0].unwrap(), 75.0);
        assert!(ood_bg_iou(&field(0, 0, &[])).is_err());
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[1.0; 4], &[true; 4], 15).unwrap(), 0.0);
        assert!((ece(&[0.9; 5], &[false; 5], 15).unwrap() - 90.0).abs() < 1e-12);
        let e = ece(&[0.6, 0.6, 0.95], &[true, false, true], 10).unwrap();
        assert!((e - 25.0 / 3.0).abs() < 1e-12, "{e}");
        assert!(ece(&[0.5], &[true, false], 10).is_err());
        assert!(ece(&[0.5], &[true], 0).is_err());
        assert!(ece(&[], &[], 10).is_err());
    }

    #[test]
    fn bin_edges_are_right_closed() {
        let b = ReliabilityBins::new(10).unwrap();
        assert_eq!(b.bin_index(0.0), 0);
        assert_eq!(b.bin_index(0.1), 0);
        assert_eq!(b.bin_index(0.1000001), 1);
        assert_eq!(b.bin_index(0.6), 5);
        assert_eq!(b.bin_index(0.95), 9);
        assert_eq!(b.bin_index(1.0), 9);
        for m in 1..40 {
            let b = ReliabilityBins::new(m).unwrap();
            for j in 1..=m {
                let edge = j as f64 / m as f64;
                assert_eq!(b.bin_index(edge), j - 1);
            }
        }
    }

    #[test]
    fn reliability_examples() {
        let b = ReliabilityBins::new(10).unwrap();
        assert!(reliability_table(&b).is_empty());

        let mut b = ReliabilityBins::new(10).unwrap();
        b.push(1.0, true);
        let rows = reliability_table(&b);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].accuracy, rows[0].mean_confidence), (1.0, 1.0));

        let mut b = ReliabilityBins::new(10).unwrap();
        for (c, ok) in [(0.6, true), (0.6, false), (0.95, true)] {
            b.push(c, ok);
        }
        let rows = reliability_table(&b);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].count, 2);
        assert!((rows[0].accuracy - 0.5).abs() < 1e-15 && (rows[0].mean_confidence - 0.6).abs() < 1e-15);
        assert_eq!(rows[1].count, 1);
        assert!((rows[1].bin_lo - 0.9).abs() < 1e-15 && rows[1].bin_hi == 1.0);
        assert!((ece_from_table(&rows) - b.ece()).abs() < 1e-12);
    }

    fn brute_force_ece(conf: &[f64], correct: &[bool], m: usize) -> f64 {
        let n = conf.len() as f64;
        let mut total = 0.0;
        for bin in 0..m {
            let lo = bin as f64 / m as f64;
            let hi = (bin + 1) as f64 / m as f64;
            let members: Vec<usize> = (0..conf.len())
                .filter(|&i| (conf[i] > lo && conf[i] <= hi) || (bin == 0 && conf[i] == 0.0))
                .collect();
            if members.is_empty() {
                continue;
            }
            let cnt = members.len() as f64;
            let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / cnt;
            let mc = members.iter().map(|&i| conf[i]).sum::<f64>() / cnt;
            total += cnt / n * (acc - mc).abs();
        }
        100.0 * total
    }

    #[test]
    fn streaming_ece_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1usize, 10, 1000, 20_000] {
            let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
            let ok: Vec<bool> = conf.iter().map(|c| rng.random_bool(*c)).collect();
            for m in [1, 7, 15] {
                let a = ece(&conf, &ok, m).unwrap();
                let b = brute_force_ece(&conf, &ok, m);
                assert!((a - b).abs() <= 1e-12, "n={n} m={m}: {a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn confusion_is_additive(
            a in prop::collection::vec((0u8..4, 0u8..4), 1..64),
            b in prop::collection::vec((0u8..4, 0u8..4), 1..64),
        ) {
            let split = |v: &[(u8, u8)]| {
                let p: Vec<u8> = v.iter().map(|x| x.0).collect();
                let g: Vec<u8> = v.iter().map(|x| x.1).collect();
                (field(1, v.len(), &p), field(1, v.len(), &g))
            };
            let (pa, ga) = split(&a);
            let (pb, gb) = split(&b);
            let all: Vec<(u8, u8)> = b.iter().chain(&a).copied().collect();
            let (pall, gall) = split(&all);
            let mut merged = accumulate_confusion(4, &pa, &ga, 255).unwrap();
            merged.merge(&accumulate_confusion(4, &pb, &gb, 255).unwrap()).unwrap();
            prop_assert_eq!(merged, accumulate_confusion(4, &pall, &gall, 255).unwrap());
        }

        #[test]
        fn bg_iou_paths_agree(pred in prop::collection::vec(0u8..5, 1..200)) {
            let p = field(1, pred.len(), &pred);
            let gt = field(1, pred.len(), &vec![0; pred.len()]);
            let cm = accumulate_confusion(5, &p, &gt, 255).unwrap();
            let via_cm = iou_per_class(&cm)[0].map(|x| 100.0 * x).unwrap_or(0.0);
            prop_assert_eq!(ood_bg_iou(&p).unwrap(), via_cm);
            let relabeled: Vec<u8> = pred.iter().map(|x| if *x == 0 { 0 } else { 5 - x }).collect();
            prop_assert_eq!(ood_bg_iou(&p).unwrap(), ood_bg_iou(&field(1, pred.len(), &relabeled)).unwrap());
        }

        #[test]
        fn ece_in_range(pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..300), m in 1usize..30) {
            let conf: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ok: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let e = ece(&conf, &ok, m).unwrap();
            prop_assert!((0.0..=100.0).contains(&e));
        }
    }
}
