//! End-to-end experiment pipeline behind the command-line tool.
//!
//! One TOML file drives every step. Layout on disk:
//!
//! ```text
//! <data_root>/{train,val,noise,texture}/{images,masks}/NNNNN.png + manifest.json
//! <out_dir>/<head>_seed<n>/model.ckpt, train_log.jsonl, report.{json,csv}, report_reliability.csv
//! <out_dir>/compare.{json,csv}
//! <out_dir>/maps/<head>_seed<n>/<stem>_mu_{id,bg,nd}.png, <stem>_seg.png
//! ```
//!
//! The config hash covers everything that can change an artifact's content
//! (data, optimizer and metric settings). Paths and the run selectors (head
//! kind, seed) are excluded; the selectors are recorded in each artifact.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, load_dataset, save_dataset, Dataset, DatasetManifest, GeneratorSpec, SceneSpec};
use crate::distinct::{render_membership_png, IdSoftmaxMode};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::imageio::{load_rgb_tensor, write_indexed};
use crate::metrics::{write_bytes, MetricsReport};
use crate::model::{self, EpochRecord, EvalOptions, ModelParams, TrainConfig};

pub const SPLITS: [&str; 4] = ["train", "val", "noise", "texture"];
/// Evaluation sets in report order.
pub const EVAL_SPLITS: [&str; 3] = ["val", "texture", "noise"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train_count: usize,
    pub val_count: usize,
    pub noise_count: usize,
    pub texture_count: usize,
    pub noise_seed: u64,
    pub texture_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_count: 512,
            val_count: 128,
            noise_count: 64,
            texture_count: 64,
            noise_seed: 11,
            texture_seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub ece_bins: usize,
    pub id_softmax: IdSoftmaxMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ece_bins: 15,
            id_softmax: IdSoftmaxMode::SubVector,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub train: OptimizerConfig,
    pub metrics: MetricConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seeds: vec![1, 2, 3],
            data: DataConfig::default(),
            train: OptimizerConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

/// The hashed part of the configuration.
#[derive(Serialize)]
struct Hashed<'a> {
    data: &'a DataConfig,
    train: &'a OptimizerConfig,
    metrics: &'a MetricConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::InvalidArgument(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        if self.data.train_count == 0 || self.data.val_count == 0 {
            return Err(Error::invalid("train_count and val_count must be positive"));
        }
        if self.data.noise_count == 0 || self.data.texture_count == 0 {
            return Err(Error::invalid("noise_count and texture_count must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list is empty"));
        }
        if self.metrics.ece_bins < 1 {
            return Err(Error::invalid("ece_bins must be at least 1"));
        }
        self.train_config(HeadKind::Implicit, 0).validate()
    }

    /// The resolved settings that determine artifact content, as sorted JSON.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(Hashed {
            data: &self.data,
            train: &self.train,
            metrics: &self.metrics,
        })
        .expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.echo()).expect("config serializes");
        data::sha256_hex(&bytes)[..16].to_string()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self, head: HeadKind, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            momentum: self.train.momentum,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed,
            head,
        }
    }

    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            ece_bins: self.metrics.ece_bins,
            id_softmax: self.metrics.id_softmax,
            config_hash: self.hash(),
            config: self.echo(),
            seed,
        }
    }

    pub fn generators(&self) -> [(&'static str, GeneratorSpec); 4] {
        let d = &self.data;
        let (h, w) = (d.scene.height, d.scene.width);
        [
            (
                "train",
                GeneratorSpec::Scenes {
                    spec: d.scene.clone(),
                    first_index: 0,
                    count: d.train_count,
                },
            ),
            (
                "val",
                GeneratorSpec::Scenes {
                    spec: d.scene.clone(),
                    first_index: d.train_count as u64,
                    count: d.val_count,
                },
            ),
            (
                "noise",
                GeneratorSpec::Noise {
                    seed: d.noise_seed,
                    height: h,
                    width: w,
                    count: d.noise_count,
                },
            ),
            (
                "texture",
                GeneratorSpec::Texture {
                    seed: d.texture_seed,
                    height: h,
                    width: w,
                    count: d.texture_count,
                },
            ),
        ]
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.data_root.join(split)
    }

    pub fn run_dir(&self, head: HeadKind, seed: u64) -> PathBuf {
        self.out_dir.join(run_name(head, seed))
    }

    pub fn checkpoint_path(&self, head: HeadKind, seed: u64) -> PathBuf {
        self.run_dir(head, seed).join("model.ckpt")
    }
}

pub fn run_name(head: HeadKind, seed: u64) -> String {
    format!("{head}_seed{seed}")
}

fn is_non_empty_dir(path: &Path) -> bool {
    std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::invalid(format!(
            "{} already exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the four splits under `data_root`.
pub fn generate(cfg: &ExperimentConfig, force: bool) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    if !force && is_non_empty_dir(&cfg.data_root) {
        return Err(Error::invalid(format!(
            "{} is not empty; pass --force to overwrite",
            cfg.data_root.display()
        )));
    }
    let hash = cfg.hash();
    let mut manifests = Vec::new();
    for (split, gen) in cfg.generators() {
        let dir = cfg.split_dir(split);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        create_dir(&dir)?;
        let ds = gen.generate(split)?;
        manifests.push(save_dataset(&ds, &gen, &dir, Some(&hash))?);
    }
    Ok(manifests)
}

/// Loads one split, checking that it was generated for this configuration's data.
pub fn load_split(cfg: &ExperimentConfig, split: &str) -> Result<(DatasetManifest, Dataset)> {
    let dir = cfg.split_dir(split);
    let (manifest, ds) = load_dataset(&dir)?;
    let expected = cfg
        .generators()
        .into_iter()
        .find(|(s, _)| *s == split)
        .map(|(_, g)| g.hash());
    if Some(&manifest.spec_hash) != expected.as_ref() {
        return Err(Error::Format(format!(
            "{}: dataset was generated from a different configuration (spec hash {})",
            dir.join(data::MANIFEST_FILE).display(),
            manifest.spec_hash
        )));
    }
    Ok((manifest, ds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub tool_version: String,
    pub config_hash: String,
    pub manifest_hash: String,
    pub head_kind: HeadKind,
    pub seed: u64,
    #[serde(flatten)]
    pub epoch: EpochRecord,
}

/// Trains one `(head, seed)` run on the generated training split.
///
/// The JSON-lines log is flushed after every epoch so progress survives a crash.
pub fn train_run(cfg: &ExperimentConfig, head: HeadKind, seed: u64, force: bool) -> Result<(ModelParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    let dir = cfg.run_dir(head, seed);
    let ckpt = cfg.checkpoint_path(head, seed);
    let log_path = dir.join("train_log.jsonl");
    refuse_existing(&[ckpt.clone(), log_path.clone()], force)?;
    let (manifest, ds) = load_split(cfg, "train")?;
    let k = cfg.data.scene.num_classes;
    create_dir(&dir)?;
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let base = LogRecord {
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: cfg.hash(),
        manifest_hash: manifest.content_hash(),
        head_kind: head,
        seed,
        epoch: EpochRecord {
            epoch: 0,
            loss: 0.0,
            pixel_accuracy: 0.0,
            steps: 0,
        },
    };
    let mut io_error = None;
    let result = model::train_with(&cfg.train_config(head, seed), &ds, k, |record| {
        if io_error.is_some() {
            return;
        }
        let line = LogRecord {
            epoch: record.clone(),
            ..base.clone()
        };
        let mut bytes = serde_json::to_vec(&line).expect("log record serializes");
        bytes.push(b'\n');
        if let Err(e) = log.write_all(&bytes).and_then(|_| log.flush()) {
            io_error = Some(e);
        }
    });
    if let Some(e) = io_error {
        return Err(Error::io(&log_path, e));
    }
    let (params, records) = result?;
    model::save_checkpoint(&ckpt, &params, seed, &cfg.hash())?;
    Ok((params, records))
}

pub fn load_run(cfg: &ExperimentConfig, head: HeadKind, seed: u64) -> Result<ModelParams> {
    let path = cfg.checkpoint_path(head, seed);
    if !path.exists() {
        return Err(Error::Format(format!(
            "missing checkpoint for head {head}, seed {seed}: {}",
            path.display()
        )));
    }
    let (header, params) = model::load_checkpoint(&path)?;
    if header.head_kind != head || header.num_classes != cfg.data.scene.num_classes {
        return Err(Error::Format(format!(
            "{}: checkpoint is for head {} with {} classes",
            path.display(),
            header.head_kind,
            header.num_classes
        )));
    }
    Ok(params)
}

/// Validation, texture and noise splits in report order.
pub fn load_eval_sets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    EVAL_SPLITS
        .iter()
        .map(|s| load_split(cfg, s).map(|(_, d)| d))
        .collect()
}

pub fn evaluate_params(cfg: &ExperimentConfig, params: &ModelParams, seed: u64, sets: &[Dataset]) -> Result<MetricsReport> {
    let refs: Vec<&Dataset> = sets.iter().collect();
    model::evaluate(params, &refs, &cfg.eval_options(seed))
}

/// Evaluates a trained run and writes `report.{json,csv}` next to its checkpoint.
pub fn eval_run(cfg: &ExperimentConfig, head: HeadKind, seed: u64, sets: &[Dataset]) -> Result<MetricsReport> {
    let params = load_run(cfg, head, seed)?;
    let report = evaluate_params(cfg, &params, seed, sets)?;
    report.write_files(&cfg.run_dir(head, seed), "report")?;
    Ok(report)
}

/// Membership maps and the predicted segmentation for each image.
pub fn render_maps(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    images: &[PathBuf],
    out: &Path,
    force: bool,
) -> Result<Vec<PathBuf>> {
    let provenance = data::provenance_text(Some(&cfg.hash()));
    let palette = data::label_palette();
    let mut written = Vec::new();
    for image_path in images {
        let stem = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("{}: no file name", image_path.display())))?;
        let seg_path = out.join(format!("{stem}_seg.png"));
        let mut targets = crate::distinct::membership_png_paths(out, stem).to_vec();
        targets.push(seg_path.clone());
        refuse_existing(&targets, force)?;
        let image = load_rgb_tensor(image_path)?;
        let pred = model::predict(params, &image, cfg.metrics.id_softmax)?;
        create_dir(out)?;
        written.extend(render_membership_png(&pred.maps, out, stem, Some(&provenance))?);
        let (h, w) = (pred.labels.height() as u32, pred.labels.width() as u32);
        write_indexed(&seg_path, w, h, pred.labels.data(), &palette, Some(&provenance))?;
        written.push(seg_path);
    }
    Ok(written)
}

/// The nine table columns, in order.
pub const COMPARE_COLUMNS: [&str; 9] = [
    "miou_val",
    "bg_iou_texture",
    "bg_iou_noise",
    "ece_val",
    "ece_texture",
    "ece_noise",
    "end_val",
    "end_texture",
    "end_noise",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    /// Seed, or `None` for the mean over seeds.
    pub seed: Option<u64>,
    pub head_kind: HeadKind,
    /// Values in [`COMPARE_COLUMNS`] order, all percentages.
    pub values: [f64; 9],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub name: String,
    pub rule: String,
    /// Seeds (or datasets) satisfying the rule, when it is counted.
    pub satisfied: Option<usize>,
    pub required: Option<usize>,
    pub soft: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub tool_version: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
    pub rows: Vec<CompareRow>,
    pub checks: Vec<DirectionalCheck>,
}

fn dataset_value(report: &MetricsReport, dataset: &str, f: impl Fn(&crate::metrics::DatasetMetrics) -> Option<f64>) -> Result<f64> {
    report
        .dataset(dataset)
        .and_then(f)
        .ok_or_else(|| Error::Format(format!("report lacks a value for dataset {dataset}")))
}

pub fn table_row(report: &MetricsReport) -> Result<[f64; 9]> {
    Ok([
        dataset_value(report, "val", |d| d.miou)?,
        dataset_value(report, "texture", |d| d.bg_iou)?,
        dataset_value(report, "noise", |d| d.bg_iou)?,
        dataset_value(report, "val", |d| Some(d.ece))?,
        dataset_value(report, "texture", |d| Some(d.ece))?,
        dataset_value(report, "noise", |d| Some(d.ece))?,
        dataset_value(report, "val", |d| Some(d.expected_nd))?,
        dataset_value(report, "texture", |d| Some(d.expected_nd))?,
        dataset_value(report, "noise", |d| Some(d.expected_nd))?,
    ])
}

/// Same-seed explicit/implicit pairs: `(seed, explicit row, implicit row)`.
pub type SeedPair = (u64, [f64; 9], [f64; 9]);

/// Largest mIOU gap, in points, tolerated between the two heads.
pub const MIOU_GAP: f64 = 2.0;

/// Directional expectations: the heads segment alike, while the implicit head
/// is less non-distinctive, at least as good at flagging OOD inputs as
/// background, and no worse calibrated.
///
/// Hard rules must hold for every seed; soft rules need a strict majority.
pub fn directional_checks(pairs: &[SeedPair]) -> Vec<DirectionalCheck> {
    let n = pairs.len();
    let majority = n / 2 + 1;
    let mean = |col: usize, implicit: bool| {
        pairs.iter().map(|p| if implicit { p.2[col] } else { p.1[col] }).sum::<f64>() / n as f64
    };
    let gap = (mean(0, true) - mean(0, false)).abs();
    let count = |f: &dyn Fn(&[f64; 9], &[f64; 9]) -> bool| pairs.iter().filter(|p| f(&p.1, &p.2)).count();
    let nd = count(&|e, i| (6..9).all(|c| i[c] < e[c]));
    let bg = count(&|e, i| i[1] >= e[1] && i[2] >= e[2]);
    let ece = count(&|e, i| (3..6).filter(|&c| i[c] <= e[c]).count() >= 2);
    vec![
        DirectionalCheck {
            name: "miou_parity".into(),
            rule: format!("|mean mIOU(implicit) - mean mIOU(explicit)| <= {MIOU_GAP} on val (gap {gap:.3})"),
            satisfied: None,
            required: None,
            soft: false,
            pass: gap <= MIOU_GAP,
        },
        DirectionalCheck {
            name: "end_lower".into(),
            rule: "END(implicit) < END(explicit) on val, texture and noise".into(),
            satisfied: Some(nd),
            required: Some(n),
            soft: false,
            pass: nd == n,
        },
        DirectionalCheck {
            name: "bg_iou_not_lower".into(),
            rule: "bg-IoU(implicit) >= bg-IoU(explicit) on texture and noise".into(),
            satisfied: Some(bg),
            required: Some(majority),
            soft: true,
            pass: bg >= majority,
        },
        DirectionalCheck {
            name: "ece_not_higher".into(),
            rule: "ECE(implicit) <= ECE(explicit) on at least 2 of 3 datasets".into(),
            satisfied: Some(ece),
            required: Some(majority),
            soft: true,
            pass: ece >= majority,
        },
    ]
}

pub fn build_compare(cfg: &ExperimentConfig, pairs: &[SeedPair]) -> CompareReport {
    let mut rows = Vec::new();
    for (seed, e, i) in pairs {
        rows.push(CompareRow { seed: Some(*seed), head_kind: HeadKind::Explicit, values: *e });
        rows.push(CompareRow { seed: Some(*seed), head_kind: HeadKind::Implicit, values: *i });
    }
    let n = pairs.len().max(1) as f64;
    for (head, pick) in [(HeadKind::Explicit, 0), (HeadKind::Implicit, 1)] {
        let mut values = [0.0; 9];
        for (c, v) in values.iter_mut().enumerate() {
            *v = pairs.iter().map(|p| if pick == 0 { p.1[c] } else { p.2[c] }).sum::<f64>() / n;
        }
        rows.push(CompareRow { seed: None, head_kind: head, values });
    }
    CompareReport {
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: cfg.hash(),
        config: cfg.echo(),
        seeds: pairs.iter().map(|p| p.0).collect(),
        columns: COMPARE_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
        checks: directional_checks(pairs),
    }
}

impl CompareReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        bytes
    }

    /// One table row per `(seed, head)` plus the two mean rows.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["tool_version", "config_hash", "seed", "head"];
        header.extend(COMPARE_COLUMNS);
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                self.tool_version.clone(),
                self.config_hash.clone(),
                r.seed.map_or("mean".to_string(), |s| s.to_string()),
                r.head_kind.to_string(),
            ];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Human-readable summary table.
    pub fn render_text(&self) -> String {
        let mut s = format!("{:<6} {:<9}", "seed", "head");
        for c in COMPARE_COLUMNS {
            s += &format!(" {c:>14}");
        }
        s.push('\n');
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_string(), |v| v.to_string());
            s += &format!("{seed:<6} {:<9}", r.head_kind.as_str());
            for v in r.values {
                s += &format!(" {v:>14.3}");
            }
            s.push('\n');
        }
        for c in &self.checks {
            let verdict = if c.pass { "PASS" } else { "FAIL" };
            let count = match (c.satisfied, c.required) {
                (Some(a), Some(b)) => format!(" [{a} satisfied, {b} required]"),
                _ => String::new(),
            };
            s += &format!("{verdict} {}: {}{count}\n", c.name, c.rule);
        }
        s
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_bytes(&dir.join("compare.json"), &self.to_json())?;
        write_bytes(&dir.join("compare.csv"), &self.to_csv()?)
    }
}

/// Evaluates both heads for every seed from their checkpoints and writes the comparison.
pub fn compare(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<CompareReport> {
    for &seed in seeds {
        for head in [HeadKind::Explicit, HeadKind::Implicit] {
            let path = cfg.checkpoint_path(head, seed);
            if !path.exists() {
                return Err(Error::Format(format!(
                    "missing checkpoint for head {head}, seed {seed}: {}",
                    path.display()
                )));
            }
        }
    }
    let sets = load_eval_sets(cfg)?;
    let mut pairs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let e = evaluate_params(cfg, &load_run(cfg, HeadKind::Explicit, seed)?, seed, &sets)?;
        let i = evaluate_params(cfg, &load_run(cfg, HeadKind::Implicit, seed)?, seed, &sets)?;
        pairs.push((seed, table_row(&e)?, table_row(&i)?));
    }
    let report = build_compare(cfg, &pairs);
    report.write_files(&cfg.out_dir)?;
    Ok(report)
}
