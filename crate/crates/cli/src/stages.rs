//! One function per pipeline stage. Each reads its prerequisites from the
//! work directory, writes its artifacts there and returns its config hash.

use std::collections::BTreeMap;
use std::path::Path;

use fat_core::engine::{compile as compile_model, export, import, run_int8_batched};
use fat_core::io::{
    load_model, load_model_with_meta, save_model_with_meta, select_calibration, select_fraction, Dataset,
};
use fat_core::kernels::LayerKind;
use fat_core::quant::{
    build_params, calibrate as calibrate_graph, CalibStats, Granularity, QuantConfig, QuantPlan, QuantScheme,
};
use fat_core::train::{accuracy, top1, train_classifier, FloatTrainConfig};
use fat_core::transforms::{dws_rescale_default, fold_batch_norm, DwsRescaleReport};
use fat_core::tune::{
    finetune as finetune_student, student_logits, teacher_logits, PointwiseScales, StepLog, Student, TrainConfig,
};
use fat_core::zoo::mnist_cnn;
use fat_core::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::artifacts::{config_hash, read_json, write_bytes, write_json, Work, ARTIFACT_VERSION};
use crate::error::{CliError, Result};

const BATCH: usize = 100;
const HASH_KEY: &str = "config_hash";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainFloatSettings {
    pub arch: String,
    pub train: FloatTrainConfig,
    /// Use only the first `limit` training images.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformSettings {
    pub fold_bn: bool,
    pub dws_rescale: bool,
    pub calib_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateSettings {
    pub scheme: QuantScheme,
    pub calib_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub train: TrainConfig,
    /// Share of the image set used for fine-tuning.
    pub fraction: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainFloatArtifact {
    format_version: u32,
    config_hash: String,
    settings: TrainFloatSettings,
    epoch_losses: Vec<f64>,
    train_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct TransformArtifact {
    format_version: u32,
    config_hash: String,
    upstream_hash: String,
    settings: TransformSettings,
    folded_batch_norms: Vec<String>,
    dws_rescale: Option<DwsRescaleReport>,
}

#[derive(Serialize, Deserialize)]
struct CalibrationArtifact {
    format_version: u32,
    config_hash: String,
    upstream_hash: String,
    settings: CalibrateSettings,
    stats: CalibStats,
    config: QuantConfig,
}

#[derive(Serialize, Deserialize)]
struct FinetuneArtifact {
    format_version: u32,
    config_hash: String,
    upstream_hash: String,
    settings: FinetuneSettings,
    epoch_losses: Vec<f64>,
    config: QuantConfig,
    scales: Option<PointwiseScales>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    step: &'a StepLog,
    config_hash: &'a str,
}

/// Top-1 accuracy (when labels exist) and distillation RMSE against the
/// float model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathReport {
    pub accuracy: Option<f64>,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config_hash: String,
    pub upstream_hash: String,
    pub samples: usize,
    pub float: PathReport,
    pub fake_quant: Option<PathReport>,
    pub int8: Option<PathReport>,
}

fn meta(hash: &str) -> BTreeMap<String, String> {
    BTreeMap::from([(HASH_KEY.to_string(), hash.to_string())])
}

fn load_images(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    Ok(Dataset::load_idx(images, labels)?)
}

/// Trains the bundled MNIST CNN and saves it under `out`.
pub fn train_float(images: &Path, labels: &Path, out: &Path, settings: &TrainFloatSettings) -> Result<String> {
    if settings.arch != "mnist_cnn" {
        return Err(CliError::FlagConflict(format!(
            "unknown architecture {}",
            settings.arch
        )));
    }
    let mut ds = load_images(images, Some(labels))?;
    if let Some(n) = settings.limit {
        let idx: Vec<usize> = (0..n.min(ds.len())).collect();
        ds = ds.subset(&idx)?;
    }
    let hash = config_hash("train-float", "", settings);
    let mut g = mnist_cnn(settings.train.seed);
    let epoch_losses = train_classifier(&mut g, &ds, &settings.train)?;
    let train_accuracy = accuracy(&g, &ds, BATCH)?;
    save_model_with_meta(&g, out.join("model.json"), &meta(&hash))?;
    write_json(
        &out.join("train_float.json"),
        &TrainFloatArtifact {
            format_version: ARTIFACT_VERSION,
            config_hash: hash.clone(),
            settings: settings.clone(),
            epoch_losses,
            train_accuracy,
        },
    )?;
    println!("train-float: train accuracy {train_accuracy:.4}");
    Ok(hash)
}

/// Copies `model` into the work directory, folding batch norm and
/// rescaling depthwise layers as requested.
pub fn transform(work: &Work, model: &Path, images: Option<&Path>, settings: &TransformSettings) -> Result<String> {
    let (mut g, input_meta) = load_model_with_meta(model)?;
    let upstream = input_meta.get(HASH_KEY).cloned().unwrap_or_default();
    let hash = config_hash("transform", &upstream, settings);

    let mut folded = Vec::new();
    if settings.fold_bn {
        folded = g
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
            .map(|l| l.id.clone())
            .collect();
        g = fold_batch_norm(&g)?;
    }
    let mut report = None;
    if settings.dws_rescale {
        let images = images.ok_or_else(|| CliError::FlagConflict("--dws-rescale needs --images".into()))?;
        let calib = select_calibration(&load_images(images, None)?, settings.calib_size, settings.seed)?;
        let (r, rep) = dws_rescale_default(&g, calib.images())?;
        g = r;
        report = Some(rep);
    }
    work.clear(&[
        work.calibration(),
        work.finetune(),
        work.train_log(),
        work.compiled(),
        work.eval(),
    ])?;
    save_model_with_meta(&g, work.model(), &meta(&hash))?;
    write_json(
        &work.transform(),
        &TransformArtifact {
            format_version: ARTIFACT_VERSION,
            config_hash: hash.clone(),
            upstream_hash: upstream,
            settings: settings.clone(),
            folded_batch_norms: folded,
            dws_rescale: report,
        },
    )?;
    println!("transform: wrote {}", work.model().display());
    Ok(hash)
}

fn work_model(work: &Work) -> Result<(Graph, String)> {
    let path = work.require(work.model(), "transform")?;
    let (g, m) = load_model_with_meta(path)?;
    Ok((g, m.get(HASH_KEY).cloned().unwrap_or_default()))
}

fn has_multi_channel_layer(g: &Graph) -> bool {
    g.layers()
        .iter()
        .any(|l| l.kind.is_linear() && l.out_channels().unwrap_or(1) > 1)
}

/// Records activation ranges on a calibration subset and derives the
/// initial quantization parameters.
pub fn calibrate(work: &Work, images: &Path, settings: &CalibrateSettings) -> Result<String> {
    let (g, upstream) = work_model(work)?;
    let hash = config_hash("calibrate", &upstream, settings);
    let per_channel = [settings.scheme.weights, settings.scheme.depthwise]
        .iter()
        .any(|gr| matches!(gr, Granularity::PerChannel { .. }));
    if per_channel && !has_multi_channel_layer(&g) {
        log::warn!("per-channel weights requested but no layer has more than one output channel");
    }
    let calib = select_calibration(&load_images(images, None)?, settings.calib_size, settings.seed)?;
    let plan = QuantPlan::new(&g)?;
    let stats = calibrate_graph(&g, &plan, calib.images(), BATCH)?;
    let config = build_params(&g, &plan, &stats, settings.scheme)?;
    work.clear(&[work.finetune(), work.train_log(), work.compiled(), work.eval()])?;
    write_json(
        &work.calibration(),
        &CalibrationArtifact {
            format_version: ARTIFACT_VERSION,
            config_hash: hash.clone(),
            upstream_hash: upstream,
            settings: settings.clone(),
            stats,
            config,
        },
    )?;
    println!("calibrate: {} sites from {} images", plan.sites.len(), calib.len());
    Ok(hash)
}

/// Label-free fine-tuning of the calibrated parameters.
pub fn finetune(work: &Work, images: &Path, settings: &FinetuneSettings) -> Result<String> {
    let (g, _) = work_model(work)?;
    let cal: CalibrationArtifact = read_json(&work.require(work.calibration(), "calibrate")?)?;
    let hash = config_hash("finetune", &cal.config_hash, settings);
    let data = select_fraction(&load_images(images, None)?, settings.fraction, settings.train.seed)?;
    let out = finetune_student(&g, &cal.config, None, data.images(), &settings.train)?;

    work.clear(&[work.compiled(), work.eval()])?;
    let mut log = String::new();
    for step in &out.log {
        let line = LogLine {
            step,
            config_hash: &hash,
        };
        log.push_str(&serde_json::to_string(&line).expect("log line serializes"));
        log.push('\n');
    }
    write_bytes(&work.train_log(), log.as_bytes())?;
    println!(
        "finetune: {} steps on {} images, epoch rmse {:?}",
        out.log.len(),
        data.len(),
        out.epoch_losses
    );
    write_json(
        &work.finetune(),
        &FinetuneArtifact {
            format_version: ARTIFACT_VERSION,
            config_hash: hash.clone(),
            upstream_hash: cal.config_hash,
            settings: settings.clone(),
            epoch_losses: out.epoch_losses,
            config: out.config,
            scales: out.scales,
        },
    )?;
    Ok(hash)
}

/// The most refined parameters available: fine-tuned if that stage ran,
/// calibrated otherwise.
fn current_config(work: &Work) -> Result<(QuantConfig, Option<PointwiseScales>, String)> {
    if work.finetune().exists() {
        let f: FinetuneArtifact = read_json(&work.finetune())?;
        return Ok((f.config, f.scales, f.config_hash));
    }
    let c: CalibrationArtifact = read_json(&work.require(work.calibration(), "calibrate")?)?;
    Ok((c.config, None, c.config_hash))
}

/// Compiles the current parameters into an integer model.
pub fn compile(work: &Work) -> Result<String> {
    let (g, _) = work_model(work)?;
    let (cfg, scales, upstream) = current_config(work)?;
    let hash = config_hash("compile", &upstream, &());
    let mut m = compile_model(&g, &cfg, scales.as_ref())?;
    m.meta = meta(&hash);
    m.meta.insert("upstream_hash".into(), upstream);
    work.clear(&[work.eval()])?;
    let bytes = export(&m);
    write_bytes(&work.compiled(), &bytes)?;
    println!("compile: wrote {} ({} bytes)", work.compiled().display(), bytes.len());
    Ok(hash)
}

fn rmse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.shape()[0] as f64;
    (a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Float, fake-quant and integer paths side by side on one image set.
/// Paths whose stage has not run are left out.
pub fn eval(work: &Work, images: &Path, labels: Option<&Path>) -> Result<EvalReport> {
    let (g, model_hash) = work_model(work)?;
    let ds = load_images(images, labels)?;
    let report_for = |z: &Tensor, z_t: &Tensor| PathReport {
        accuracy: ds.labels().map(|l| top1(z, l)),
        rmse: rmse(z, z_t),
    };
    let z_t = teacher_logits(&g, ds.images(), BATCH)?;
    let float = report_for(&z_t, &z_t);

    let mut upstream = model_hash;
    let mut fake_quant = None;
    if work.calibration().exists() {
        let (cfg, scales, h) = current_config(work)?;
        let student = Student::new(&g)?;
        let z = student_logits(&student, &cfg, scales.as_ref(), ds.images(), BATCH)?;
        fake_quant = Some(report_for(&z, &z_t));
        upstream = h;
    }
    let mut int8 = None;
    if work.compiled().exists() {
        let bytes = std::fs::read(work.compiled()).map_err(|e| crate::artifacts::io(&work.compiled(), e))?;
        let m = import(&bytes)?;
        let z = run_int8_batched(&m, ds.images(), BATCH)?;
        int8 = Some(report_for(&z, &z_t));
        upstream = m.meta.get(HASH_KEY).cloned().unwrap_or_default();
    }
    let report = EvalReport {
        format_version: ARTIFACT_VERSION,
        config_hash: config_hash("eval", &upstream, &ds.len()),
        upstream_hash: upstream,
        samples: ds.len(),
        float,
        fake_quant,
        int8,
    };
    write_json(&work.eval(), &report)?;
    Ok(report)
}

/// Loads the float model of the work directory; used by tests.
pub fn work_graph(work: &Work) -> Result<Graph> {
    Ok(load_model(work.require(work.model(), "transform")?)?)
}
