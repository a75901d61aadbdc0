//! Four-stage pipeline orchestration.
//!
//! Stage S1 trains the dual model on paired original/augmented data with
//! Nadam and per-output best checkpoints. The final model is then assembled
//! from those two checkpoints via head surgery. Stage S2 first trains only
//! the two new head layers (Nadam), then unfreezes everything for SGD
//! fine-tuning. Stage S3 runs six-fold cross-validation over the recombined
//! training pool, fine-tuning one model instance sequentially across folds.
//! Everything after S1 consumes original, unaugmented, single-input data.
//!
//! Each stage persists its artifacts under the run directory and reads its
//! predecessor's checkpoint, so runs are resumable at stage granularity.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::dataio::{self, Dataset, DatasetName};
use crate::error::{Error, Result};
use crate::lossmetrics::{
    argmax, classification_report, ClassificationReport, ConfusionMatrix,
};
use crate::netgraph::{
    build_dual_model, build_final_model, FreezeMask, ModelGraph, FINAL_HEAD_DENSE_NODES,
};
use crate::optim::{NadamConfig, Optimizer, OptimizerSpec, SgdConfig};
use crate::trainer::{
    fit, CheckpointSpec, DualMonitor, DualTrainData, DualValData, EarlyStopConfig, FitOptions,
    IndexedSingleData, SingleData, TrainHistory,
};

/// Epoch caps per stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageCaps {
    pub s1: usize,
    pub s2_head: usize,
    pub s2_full: usize,
    pub s3_per_fold: usize,
}

impl Default for StageCaps {
    fn default() -> Self {
        Self {
            s1: 20,
            s2_head: 20,
            s2_full: 50,
            s3_per_fold: 10,
        }
    }
}

impl StageCaps {
    pub fn halved(&self) -> Self {
        Self {
            s1: self.s1.div_ceil(2),
            s2_head: self.s2_head.div_ceil(2),
            s2_full: self.s2_full.div_ceil(2),
            s3_per_fold: self.s3_per_fold.div_ceil(2),
        }
    }
}

/// Optional subset limits, used by the smoke configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataLimits {
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
}

/// Full pipeline configuration; the JSON config file deserializes into this.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: String,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub batch_size: usize,
    /// 0 = use all available cores; 1 = strictly sequential.
    pub threads: usize,
    pub augment: AugmentConfig,
    pub early_stop: EarlyStopConfig,
    pub dual_monitor: DualMonitor,
    pub nadam: NadamConfig,
    pub sgd: SgdConfig,
    pub stage_caps: StageCaps,
    pub folds: usize,
    pub limits: DataLimits,
    /// Overrides the canonical 10,000-sample validation split (tiny fixtures).
    pub val_split: Option<usize>,
    pub verbose: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            seed: 42,
            data_dir: None,
            out_dir: None,
            batch_size: 32,
            threads: 0,
            augment: AugmentConfig::default(),
            early_stop: EarlyStopConfig::default(),
            dual_monitor: DualMonitor::MeanAccuracy,
            nadam: NadamConfig::default(),
            sgd: SgdConfig::default(),
            stage_caps: StageCaps::default(),
            folds: 6,
            limits: DataLimits::default(),
            val_split: None,
            verbose: false,
        }
    }
}

impl PipelineConfig {
    /// Smoke preset: 10,000 train / 2,000 validation samples, stage caps
    /// halved, 2,000-sample test subset.
    pub fn smoke(dataset: &str, seed: u64) -> Self {
        Self {
            dataset: dataset.into(),
            seed,
            stage_caps: StageCaps::default().halved(),
            limits: DataLimits {
                train: Some(10_000),
                val: Some(2_000),
                test: Some(2_000),
            },
            ..Default::default()
        }
    }

    pub fn dataset_name(&self) -> Result<DatasetName> {
        DatasetName::parse(&self.dataset)
    }

    fn hyperparameters(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelect {
    S1,
    S2,
    S3,
    All,
}

impl StageSelect {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Self::S1),
            "s2" => Ok(Self::S2),
            "s3" => Ok(Self::S3),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!(
                "unknown stage {other}; expected s1, s2, s3, or all"
            ))),
        }
    }
}

/// Final evaluation artifacts for the held-out test set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestReport {
    pub dataset: String,
    pub samples: usize,
    pub accuracy: f64,
    pub param_count: usize,
    pub trainable_param_count: usize,
    pub size_summary: String,
    pub confusion: ConfusionMatrix,
    pub report: ClassificationReport,
}

#[derive(Debug, Default)]
pub struct PipelineSummary {
    pub stage_histories: Vec<(String, TrainHistory)>,
    pub final_checkpoint: Option<PathBuf>,
    pub test_report: Option<TestReport>,
}

/// Splits plus held-out test data, with smoke limits applied.
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(cfg: &PipelineConfig) -> Result<PreparedData> {
    let name = cfg.dataset_name()?;
    let data_dir = cfg
        .data_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("data"));
    let pair = dataio::load_dataset(name, &data_dir)?;
    let val_size = cfg.val_split.unwrap_or_else(|| name.val_size());
    let (mut train, mut val) = dataio::split_tail(&pair.train, val_size)?;
    let mut test = pair.test;
    if let Some(n) = cfg.limits.train {
        train = train.head(n);
    }
    if let Some(n) = cfg.limits.val {
        val = val.head(n);
    }
    if let Some(n) = cfg.limits.test {
        test = test.head(n);
    }
    Ok(PreparedData { train, val, test })
}

fn stage_dir(run_dir: &Path, stage: &str) -> Result<PathBuf> {
    let dir = run_dir.join(stage);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_history(dir: &Path, name: &str, history: &TrainHistory) -> Result<()> {
    std::fs::write(dir.join(name), history.to_csv())?;
    Ok(())
}

fn stage_error(stage: &str, e: Error) -> Error {
    Error::Training(format!("stage {stage} failed: {e}"))
}

/// Stage S1: dual model on paired data, Nadam, per-output best checkpoints,
/// early stopping on the combined monitor.
pub fn run_stage_s1(
    cfg: &PipelineConfig,
    data: &PreparedData,
    run_dir: &Path,
) -> Result<TrainHistory> {
    let dir = stage_dir(run_dir, "stage_s1")?;
    let shape = cfg.dataset_name()?.input_shape();
    let mut dual = build_dual_model(&shape, cfg.seed)?;

    let train = DualTrainData {
        data: &data.train,
        augment: cfg.augment,
        scope: "s1".into(),
        seed: cfg.seed,
    };
    let val = DualValData { data: &data.val };
    let mut optimizer = Optimizer::new(OptimizerSpec::Nadam(cfg.nadam));
    let opts = FitOptions {
        stage: "s1".into(),
        epoch_cap: cfg.stage_caps.s1,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        threads: cfg.threads,
        early_stop: Some(cfg.early_stop),
        dual_monitor: cfg.dual_monitor,
        checkpoints: vec![
            CheckpointSpec {
                monitor_output: 0,
                monitor_name: "val_model1_accuracy".into(),
                base_path: dir.join("model1"),
                hyperparameters: Some(cfg.hyperparameters()),
            },
            CheckpointSpec {
                monitor_output: 1,
                monitor_name: "val_model2_accuracy".into(),
                base_path: dir.join("model2"),
                hyperparameters: Some(cfg.hyperparameters()),
            },
        ],
        verbose: cfg.verbose,
    };
    let history = fit(&mut dual, &train, &val, &mut optimizer, &opts)
        .map_err(|e| stage_error("s1", e))?;
    write_history(&dir, "metrics.csv", &history)?;
    Ok(history)
}

/// Builds the final model from the two best per-output checkpoints of S1.
pub fn build_final_from_run(cfg: &PipelineConfig, run_dir: &Path) -> Result<ModelGraph> {
    let dir = run_dir.join("stage_s1");
    let (dual1, _) = load_checkpoint(&dir.join("model1"))
        .map_err(|e| Error::Training(format!("stage s2 needs stage_s1/model1: {e}")))?;
    let (dual2, _) = load_checkpoint(&dir.join("model2"))
        .map_err(|e| Error::Training(format!("stage s2 needs stage_s1/model2: {e}")))?;
    build_final_model(&dual1, &dual2, cfg.seed)
}

/// Stage S2, first phase: freeze everything except the two new head layers
/// and train them with Nadam on original single-input data.
pub fn run_stage_s2_head(
    cfg: &PipelineConfig,
    data: &PreparedData,
    run_dir: &Path,
    model: &mut ModelGraph,
) -> Result<TrainHistory> {
    let dir = stage_dir(run_dir, "stage_s2_head")?;
    let mask = FreezeMask::trainable_only(model, &FINAL_HEAD_DENSE_NODES)?;
    model.set_freeze(&mask)?;

    let train = SingleData { data: &data.train };
    let val = SingleData { data: &data.val };
    let mut optimizer = Optimizer::new(OptimizerSpec::Nadam(cfg.nadam));
    let opts = FitOptions {
        stage: "s2h".into(),
        epoch_cap: cfg.stage_caps.s2_head,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        threads: cfg.threads,
        early_stop: Some(cfg.early_stop),
        dual_monitor: DualMonitor::MeanAccuracy,
        checkpoints: Vec::new(),
        verbose: cfg.verbose,
    };
    let history =
        fit(model, &train, &val, &mut optimizer, &opts).map_err(|e| stage_error("s2-head", e))?;
    write_history(&dir, "metrics.csv", &history)?;
    save_checkpoint(
        model,
        &dir.join("ckpt"),
        &CheckpointMeta {
            selected_metric: Some("val_accuracy".into()),
            metric_value: history.best_metric,
            epoch: history.best_epoch,
            hyperparameters: Some(cfg.hyperparameters()),
        },
    )?;
    Ok(history)
}

/// Stage S2, second phase: unfreeze everything and fine-tune with SGD.
pub fn run_stage_s2_full(
    cfg: &PipelineConfig,
    data: &PreparedData,
    run_dir: &Path,
    model: &mut ModelGraph,
) -> Result<TrainHistory> {
    let dir = stage_dir(run_dir, "stage_s2_full")?;
    model.set_freeze(&FreezeMask::all_trainable(model))?;

    let train = SingleData { data: &data.train };
    let val = SingleData { data: &data.val };
    let mut optimizer = Optimizer::new(OptimizerSpec::Sgd(cfg.sgd));
    let opts = FitOptions {
        stage: "s2f".into(),
        epoch_cap: cfg.stage_caps.s2_full,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        threads: cfg.threads,
        early_stop: Some(cfg.early_stop),
        dual_monitor: DualMonitor::MeanAccuracy,
        checkpoints: Vec::new(),
        verbose: cfg.verbose,
    };
    let history =
        fit(model, &train, &val, &mut optimizer, &opts).map_err(|e| stage_error("s2-full", e))?;
    write_history(&dir, "metrics.csv", &history)?;
    save_checkpoint(
        model,
        &dir.join("ckpt"),
        &CheckpointMeta {
            selected_metric: Some("val_accuracy".into()),
            metric_value: history.best_metric,
            epoch: history.best_epoch,
            hyperparameters: Some(cfg.hyperparameters()),
        },
    )?;
    Ok(history)
}

/// Stage S3: six-fold cross-validation over the recombined training pool,
/// SGD with the same parameters, the one model instance fine-tuned
/// sequentially across folds with a best checkpoint per fold.
pub fn run_stage_s3(
    cfg: &PipelineConfig,
    data: &PreparedData,
    run_dir: &Path,
    model: &mut ModelGraph,
) -> Result<Vec<TrainHistory>> {
    let dir = stage_dir(run_dir, "stage_s3")?;
    let pool = data.train.concat(&data.val)?;
    let folds = dataio::kfold_split(pool.len(), cfg.folds, cfg.seed)?;

    let mut histories = Vec::with_capacity(folds.len());
    for fold in &folds {
        let train = IndexedSingleData {
            data: &pool,
            indices: &fold.train,
        };
        let val = IndexedSingleData {
            data: &pool,
            indices: &fold.val,
        };
        let mut optimizer = Optimizer::new(OptimizerSpec::Sgd(cfg.sgd));
        let opts = FitOptions {
            stage: format!("s3f{}", fold.fold),
            epoch_cap: cfg.stage_caps.s3_per_fold,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            threads: cfg.threads,
            early_stop: Some(cfg.early_stop),
            dual_monitor: DualMonitor::MeanAccuracy,
            checkpoints: vec![CheckpointSpec {
                monitor_output: 0,
                monitor_name: "val_accuracy".into(),
                base_path: dir.join(format!("fold{}", fold.fold)),
                hyperparameters: Some(cfg.hyperparameters()),
            }],
            verbose: cfg.verbose,
        };
        let history = fit(model, &train, &val, &mut optimizer, &opts)
            .map_err(|e| stage_error(&format!("s3 fold {}", fold.fold), e))?;
        write_history(&dir, &format!("metrics_fold{}.csv", fold.fold), &history)?;
        histories.push(history);
    }
    save_checkpoint(
        model,
        &dir.join("ckpt"),
        &CheckpointMeta {
            selected_metric: Some("val_accuracy".into()),
            metric_value: histories.last().and_then(|h| h.best_metric),
            epoch: histories.last().and_then(|h| h.best_epoch),
            hyperparameters: Some(cfg.hyperparameters()),
        },
    )?;
    Ok(histories)
}

/// Evaluates a single-output model on a test set: accuracy, confusion
/// matrix, classification report.
pub fn evaluate_model(
    model: &ModelGraph,
    test: &Dataset,
    dataset: &str,
    threads: usize,
) -> Result<TestReport> {
    use rayon::prelude::*;
    if model.outputs().len() != 1 {
        return Err(Error::Config(format!(
            "test evaluation expects a single-output model, got {}",
            model.outputs().len()
        )));
    }
    let predict = |i: usize| -> Result<usize> {
        let out = model.forward(&[test.image(i)])?;
        Ok(argmax(&out[0]))
    };
    let predictions: Vec<usize> = if threads == 1 {
        (0..test.len()).map(predict).collect::<Result<_>>()?
    } else {
        (0..test.len())
            .into_par_iter()
            .map(predict)
            .collect::<Result<_>>()?
    };
    let labels: Vec<usize> = test.labels().iter().map(|&l| l as usize).collect();
    let confusion = ConfusionMatrix::from_pairs(10, &predictions, &labels)?;
    let report = classification_report(&confusion);
    Ok(TestReport {
        dataset: dataset.to_string(),
        samples: test.len(),
        accuracy: report.accuracy,
        param_count: model.param_count(false),
        trainable_param_count: model.param_count(true),
        size_summary: model.size_summary(true),
        confusion,
        report,
    })
}

/// Writes the final evaluation bundle under `run_dir/final/`.
pub fn write_final_report(run_dir: &Path, report: &TestReport) -> Result<()> {
    let dir = stage_dir(run_dir, "final")?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Manifest(format!("report serialize: {e}")))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    let mut text = String::new();
    text.push_str(&format!(
        "dataset: {}\ntest accuracy: {:.4} ({} samples)\ntrainable parameters: {}\n\n",
        report.dataset, report.accuracy, report.samples, report.size_summary
    ));
    text.push_str(&report.report.to_text());
    std::fs::write(dir.join("report.txt"), text)?;
    std::fs::write(dir.join("confusion.csv"), report.confusion.to_csv())?;
    Ok(())
}

/// Runs the selected stages, reading predecessors from the run directory as
/// needed, then evaluates on the held-out test set (except for a pure S1
/// run). Artifacts written before a failure are retained.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    stage: StageSelect,
    run_dir: &Path,
) -> Result<PipelineSummary> {
    std::fs::create_dir_all(run_dir)?;
    let data = prepare_data(cfg)?;
    let mut summary = PipelineSummary::default();

    if matches!(stage, StageSelect::S1 | StageSelect::All) {
        let h = run_stage_s1(cfg, &data, run_dir)?;
        summary.stage_histories.push(("s1".into(), h));
    }

    let mut model: Option<ModelGraph> = None;
    if matches!(stage, StageSelect::S2 | StageSelect::All) {
        let mut m = build_final_from_run(cfg, run_dir)?;
        let h = run_stage_s2_head(cfg, &data, run_dir, &mut m)?;
        summary.stage_histories.push(("s2-head".into(), h));
        let h = run_stage_s2_full(cfg, &data, run_dir, &mut m)?;
        summary.stage_histories.push(("s2-full".into(), h));
        model = Some(m);
    }

    if matches!(stage, StageSelect::S3 | StageSelect::All) {
        let mut m = match model.take() {
            Some(m) => m,
            None => {
                let (m, _) = load_checkpoint(&run_dir.join("stage_s2_full/ckpt"))
                    .map_err(|e| Error::Training(format!("stage s3 needs stage_s2_full: {e}")))?;
                m
            }
        };
        let hs = run_stage_s3(cfg, &data, run_dir, &mut m)?;
        for (i, h) in hs.into_iter().enumerate() {
            summary.stage_histories.push((format!("s3-fold{i}"), h));
        }
        model = Some(m);
    }

    if let Some(m) = &model {
        let final_dir = stage_dir(run_dir, "final")?;
        let base = final_dir.join("final");
        save_checkpoint(
            m,
            &base,
            &CheckpointMeta {
                selected_metric: None,
                metric_value: None,
                epoch: None,
                hyperparameters: Some(cfg.hyperparameters()),
            },
        )?;
        let report = evaluate_model(m, &data.test, &cfg.dataset, cfg.threads)?;
        write_final_report(run_dir, &report)?;
        summary.final_checkpoint = Some(base);
        summary.test_report = Some(report);
    }
    Ok(summary)
}
