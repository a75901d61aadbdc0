//! The training loop and its two callbacks: early stopping with best-weight
//! restoration, and best-only model checkpointing.
//!
//! `fit` is generic over the data source so the same loop drives the dual
//! model on paired data and the unified model on single-input data. Batch
//! gradients are means over the batch; per-sample work can fan out to a
//! thread pool, with a fixed-order reduction so results are bit-identical at
//! any thread count.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::augment::{self, AugmentConfig};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::dataio::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::lossmetrics::{argmax, softmax_ce_logit_grad, sparse_ce_loss};
use crate::netgraph::{ExecMode, GraphGrads, ModelGraph, OutputSeed};
use crate::optim::{Optimizer, ParamKey};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Early-stopping policy: monitor validation accuracy, mode max,
/// `restore_best_weights` always on.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            min_delta: 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStopDecision {
    Improved,
    NoImprovement { wait: usize },
    Stop,
}

/// Tracks the monitored metric across epochs. An epoch counts as an
/// improvement only when it beats the best seen so far by at least
/// `min_delta`; after `patience` consecutive non-improving epochs the
/// decision flips to `Stop`.
#[derive(Clone, Debug)]
pub struct EarlyStopTracker {
    cfg: EarlyStopConfig,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
    stopped_epoch: Option<usize>,
}

impl EarlyStopTracker {
    pub fn new(cfg: EarlyStopConfig) -> Self {
        Self {
            cfg,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            wait: 0,
            stopped_epoch: None,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> EarlyStopDecision {
        if metric > self.best + self.cfg.min_delta {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            EarlyStopDecision::Improved
        } else {
            self.wait += 1;
            if self.wait >= self.cfg.patience {
                self.stopped_epoch = Some(epoch);
                EarlyStopDecision::Stop
            } else {
                EarlyStopDecision::NoImprovement { wait: self.wait }
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_value(&self) -> f64 {
        self.best
    }

    pub fn stopped_epoch(&self) -> Option<usize> {
        self.stopped_epoch
    }
}

/// Best-only checkpoint decision: save when the monitored value strictly
/// exceeds the previous best.
#[derive(Clone, Debug, Default)]
pub struct StrictBest {
    best: Option<f64>,
    best_epoch: Option<usize>,
}

impl StrictBest {
    pub fn consider(&mut self, epoch: usize, value: f64) -> bool {
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// Monitored metric for a two-output model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualMonitor {
    /// Mean of the per-output validation accuracies (default).
    MeanAccuracy,
    /// Each output runs its own tracker; training stops when both have
    /// stopped.
    PerOutputAnd,
}

impl Default for DualMonitor {
    fn default() -> Self {
        Self::MeanAccuracy
    }
}

/// Per-epoch metrics, one entry per graph output.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub output_names: Vec<String>,
    pub epochs: Vec<EpochMetrics>,
    pub stopped_early: Option<usize>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

impl TrainHistory {
    /// Epoch-level CSV with one loss/accuracy column pair per output.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["epoch".to_string()];
        for name in &self.output_names {
            header.push(format!("loss_{name}"));
            header.push(format!("accuracy_{name}"));
        }
        for name in &self.output_names {
            header.push(format!("val_loss_{name}"));
            header.push(format!("val_accuracy_{name}"));
        }
        let mut out = header.join(",");
        out.push('\n');
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string()];
            for i in 0..self.output_names.len() {
                row.push(format!("{}", e.train_loss[i]));
                row.push(format!("{}", e.train_accuracy[i]));
            }
            for i in 0..self.output_names.len() {
                row.push(format!("{}", e.val_loss[i]));
                row.push(format!("{}", e.val_accuracy[i]));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses the CSV written by [`TrainHistory::to_csv`]; values round-trip
    /// exactly. Stop/best markers are not stored in the CSV and stay unset.
    pub fn from_csv(csv: &str) -> Result<Self> {
        let mut lines = csv.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty metrics csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 5 || (cols.len() - 1) % 4 != 0 {
            return Err(Error::Config(format!("bad metrics header: {header}")));
        }
        let n_out = (cols.len() - 1) / 4;
        let output_names: Vec<String> = cols[1..1 + 2 * n_out]
            .iter()
            .step_by(2)
            .map(|c| c.trim_start_matches("loss_").to_string())
            .collect();
        let mut history = TrainHistory {
            output_names,
            ..Default::default()
        };
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != cols.len() {
                return Err(Error::Config(format!("bad metrics row: {line}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|e| Error::Config(format!("bad metric value {s}: {e}")))
            };
            let mut e = EpochMetrics {
                epoch: vals[0]
                    .parse()
                    .map_err(|err| Error::Config(format!("bad epoch {}: {err}", vals[0])))?,
                train_loss: Vec::new(),
                train_accuracy: Vec::new(),
                val_loss: Vec::new(),
                val_accuracy: Vec::new(),
            };
            for o in 0..n_out {
                e.train_loss.push(parse(vals[1 + 2 * o])?);
                e.train_accuracy.push(parse(vals[2 + 2 * o])?);
                e.val_loss.push(parse(vals[1 + 2 * n_out + 2 * o])?);
                e.val_accuracy.push(parse(vals[2 + 2 * n_out + 2 * o])?);
            }
            history.epochs.push(e);
        }
        Ok(history)
    }
}

/// A training or evaluation data source: per-sample model inputs plus one
/// label per model output.
pub trait BatchProvider: Sync {
    fn len(&self) -> usize;
    fn num_inputs(&self) -> usize;
    fn num_outputs(&self) -> usize;
    /// `epoch` lets training sources re-draw augmentation every epoch.
    fn sample(&self, index: usize, epoch: usize) -> Result<(Vec<Tensor>, Vec<u8>)>;
}

/// Dual-model training source: `(x, augment(x))` with the label duplicated.
pub struct DualTrainData<'a> {
    pub data: &'a Dataset,
    pub augment: AugmentConfig,
    pub scope: String,
    pub seed: u64,
}

impl BatchProvider for DualTrainData<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }
    fn num_inputs(&self) -> usize {
        2
    }
    fn num_outputs(&self) -> usize {
        2
    }
    fn sample(&self, index: usize, epoch: usize) -> Result<(Vec<Tensor>, Vec<u8>)> {
        let x = self.data.image(index);
        let mut rng = RngStream::new(
            self.seed,
            &augment::sample_label(&self.scope, epoch, index),
        );
        let aug = augment::augment(&x, &self.augment, &mut rng)?;
        let y = self.data.label(index);
        Ok((vec![x, aug], vec![y, y]))
    }
}

/// Dual-model validation source: `(x, x)`, never augmented.
pub struct DualValData<'a> {
    pub data: &'a Dataset,
}

impl BatchProvider for DualValData<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }
    fn num_inputs(&self) -> usize {
        2
    }
    fn num_outputs(&self) -> usize {
        2
    }
    fn sample(&self, index: usize, _epoch: usize) -> Result<(Vec<Tensor>, Vec<u8>)> {
        let x = self.data.image(index);
        let y = self.data.label(index);
        Ok((vec![x.clone(), x], vec![y, y]))
    }
}

/// Single-input source for the unified model (original data only).
pub struct SingleData<'a> {
    pub data: &'a Dataset,
}

impl BatchProvider for SingleData<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }
    fn num_inputs(&self) -> usize {
        1
    }
    fn num_outputs(&self) -> usize {
        1
    }
    fn sample(&self, index: usize, _epoch: usize) -> Result<(Vec<Tensor>, Vec<u8>)> {
        Ok((vec![self.data.image(index)], vec![self.data.label(index)]))
    }
}

/// Single-input view over a subset of a dataset, without copying pixels.
/// Used by the k-fold stage.
pub struct IndexedSingleData<'a> {
    pub data: &'a Dataset,
    pub indices: &'a [usize],
}

impl BatchProvider for IndexedSingleData<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }
    fn num_inputs(&self) -> usize {
        1
    }
    fn num_outputs(&self) -> usize {
        1
    }
    fn sample(&self, index: usize, _epoch: usize) -> Result<(Vec<Tensor>, Vec<u8>)> {
        let i = self.indices[index];
        Ok((vec![self.data.image(i)], vec![self.data.label(i)]))
    }
}

/// Best-only checkpoint writer keyed to one output's validation accuracy.
pub struct CheckpointSpec {
    pub monitor_output: usize,
    pub monitor_name: String,
    pub base_path: PathBuf,
    pub hyperparameters: Option<serde_json::Value>,
}

pub struct FitOptions {
    /// Stage tag used in RNG stream labels and diagnostics.
    pub stage: String,
    pub epoch_cap: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// 1 forces a sequential loop; 0 uses the global pool as-is.
    pub threads: usize,
    pub early_stop: Option<EarlyStopConfig>,
    pub dual_monitor: DualMonitor,
    pub checkpoints: Vec<CheckpointSpec>,
    pub verbose: bool,
}

impl FitOptions {
    pub fn quiet(stage: &str, epoch_cap: usize, seed: u64) -> Self {
        Self {
            stage: stage.to_string(),
            epoch_cap,
            batch_size: 32,
            seed,
            threads: 1,
            early_stop: None,
            dual_monitor: DualMonitor::MeanAccuracy,
            checkpoints: Vec::new(),
            verbose: false,
        }
    }
}

struct SampleResult {
    grads: GraphGrads,
    loss: Vec<f64>,
    hits: Vec<u32>,
}

fn forward_backward_sample(
    graph: &ModelGraph,
    provider: &dyn BatchProvider,
    index: usize,
    epoch: usize,
    stage: &str,
    seed: u64,
    plan: &crate::netgraph::GradPlan,
) -> Result<SampleResult> {
    let (inputs, labels) = provider.sample(index, epoch)?;
    let mode = ExecMode::Train {
        dropout_seed: seed,
        dropout_scope: format!("dropout/{stage}/epoch{epoch}/sample{index}"),
    };
    let trace = graph.forward_traced(&inputs, &mode, Some(plan))?;

    let n_out = graph.outputs().len();
    let mut seeds = Vec::with_capacity(n_out);
    let mut loss = Vec::with_capacity(n_out);
    let mut hits = Vec::with_capacity(n_out);
    for (o, &label) in labels.iter().enumerate().take(n_out) {
        let probs = trace.output(graph, o);
        let l = sparse_ce_loss(probs, label as usize)?;
        loss.push(l);
        hits.push(u32::from(argmax(probs) == label as usize));
        seeds.push(OutputSeed::WrtLogits(softmax_ce_logit_grad(
            probs,
            label as usize,
        )?));
    }
    let grads = graph.backward(&trace, seeds, plan)?;
    Ok(SampleResult { grads, loss, hits })
}

/// Finds the first node whose output goes non-finite on the given sample,
/// for the abort diagnostic.
fn locate_nonfinite(graph: &ModelGraph, inputs: &[Tensor]) -> Option<String> {
    let trace = graph
        .forward_traced(inputs, &ExecMode::Infer, None)
        .ok()?;
    for (idx, node) in graph.nodes().iter().enumerate() {
        if trace.node_output(idx).validate_finite(&node.name).is_err() {
            return Some(node.name.clone());
        }
    }
    None
}

/// Evaluates loss and accuracy per output over a full provider.
pub fn evaluate(graph: &ModelGraph, data: &dyn BatchProvider, threads: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_out = graph.outputs().len();
    let eval_one = |i: usize| -> Result<(Vec<f64>, Vec<u32>)> {
        let (inputs, labels) = data.sample(i, 0)?;
        let outputs = graph.forward(&inputs)?;
        let mut loss = Vec::with_capacity(n_out);
        let mut hits = Vec::with_capacity(n_out);
        for (o, &label) in labels.iter().enumerate().take(n_out) {
            loss.push(sparse_ce_loss(&outputs[o], label as usize)?);
            hits.push(u32::from(argmax(&outputs[o]) == label as usize));
        }
        Ok((loss, hits))
    };

    let results: Vec<Result<(Vec<f64>, Vec<u32>)>> = if threads == 1 {
        (0..data.len()).map(eval_one).collect()
    } else {
        (0..data.len()).into_par_iter().map(eval_one).collect()
    };

    let mut loss_sum = vec![0.0; n_out];
    let mut hit_sum = vec![0u64; n_out];
    for r in results {
        let (loss, hits) = r?;
        for o in 0..n_out {
            loss_sum[o] += loss[o];
            hit_sum[o] += hits[o] as u64;
        }
    }
    let n = data.len() as f64;
    Ok((
        loss_sum.iter().map(|l| l / n).collect(),
        hit_sum.iter().map(|&h| h as f64 / n).collect(),
    ))
}

/// Runs the epoch loop: shuffled batches, forward/loss/backward, optimizer
/// step with frozen parameters bypassed, validation, callbacks. Returns the
/// full metric history; on early stop (or at the cap) the best-epoch weights
/// are restored when early stopping is configured.
pub fn fit(
    graph: &mut ModelGraph,
    train: &dyn BatchProvider,
    val: &dyn BatchProvider,
    optimizer: &mut Optimizer,
    opts: &FitOptions,
) -> Result<TrainHistory> {
    let n_out = graph.outputs().len();
    if train.num_outputs() != n_out || val.num_outputs() != n_out {
        return Err(Error::Config(format!(
            "data provides {} outputs, graph has {n_out}",
            train.num_outputs()
        )));
    }
    let mut history = TrainHistory {
        output_names: graph.output_names().to_vec(),
        ..Default::default()
    };

    let mut stopper = opts.early_stop.map(EarlyStopTracker::new);
    let mut per_output_stoppers: Vec<EarlyStopTracker> = match (opts.dual_monitor, opts.early_stop)
    {
        (DualMonitor::PerOutputAnd, Some(cfg)) => {
            (0..n_out).map(|_| EarlyStopTracker::new(cfg)).collect()
        }
        _ => Vec::new(),
    };
    let mut best_weights: Option<Vec<Tensor>> = None;
    let mut checkpoint_trackers: Vec<StrictBest> =
        opts.checkpoints.iter().map(|_| StrictBest::default()).collect();

    let plan = graph.grad_plan();
    let has_trainable = plan.wants_params.iter().any(|&w| w);

    for epoch in 1..=opts.epoch_cap {
        // Deterministic per-(stage, epoch) shuffle.
        let mut shuffle_rng = RngStream::new(
            opts.seed,
            &format!("shuffle/{stage}/epoch{epoch}", stage = opts.stage),
        );
        let batches = batch_indices(train.len(), opts.batch_size, Some(&mut shuffle_rng))?;

        let mut train_loss_sum = vec![0.0; n_out];
        let mut train_hits = vec![0u64; n_out];

        for (batch_no, batch) in batches.iter().enumerate() {
            let run = |&i: &usize| {
                forward_backward_sample(graph, train, i, epoch, &opts.stage, opts.seed, &plan)
            };
            let results: Vec<Result<SampleResult>> = if opts.threads == 1 {
                batch.iter().map(run).collect()
            } else {
                batch.par_iter().map(run).collect()
            };

            let mut batch_grads = GraphGrads::zeros_like(graph);
            let mut batch_loss = 0.0;
            for (pos, r) in results.into_iter().enumerate() {
                let r = r?;
                batch_grads.accumulate(&r.grads);
                for o in 0..n_out {
                    train_loss_sum[o] += r.loss[o];
                    train_hits[o] += r.hits[o] as u64;
                    batch_loss += r.loss[o];
                }
                if !batch_loss.is_finite() {
                    let sample_index = batch[pos];
                    let (inputs, _) = train.sample(sample_index, epoch)?;
                    let layer = locate_nonfinite(graph, &inputs)
                        .unwrap_or_else(|| "<loss>".to_string());
                    return Err(Error::Training(format!(
                        "non-finite loss at stage {}, epoch {epoch}, batch {batch_no}, \
                         first non-finite layer: {layer}",
                        opts.stage
                    )));
                }
            }
            if has_trainable {
                batch_grads.scale(1.0 / batch.len() as f32);
                optimizer.begin_step();
                let mut step_err: Option<Error> = None;
                graph.visit_params_mut(|node, half, tensor, frozen| {
                    if frozen || step_err.is_some() {
                        return;
                    }
                    if let Some(g) = &batch_grads.by_node[node] {
                        let grad = match half {
                            crate::optim::ParamHalf::Weights => &g.weights,
                            crate::optim::ParamHalf::Bias => &g.bias,
                        };
                        if let Err(e) = optimizer.update_slot(ParamKey { node, half }, tensor, grad)
                        {
                            step_err = Some(e);
                        }
                    }
                });
                if let Some(e) = step_err {
                    return Err(e);
                }
            }
        }

        let n_train = train.len() as f64;
        let (val_loss, val_acc) = evaluate(graph, val, opts.threads)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: train_loss_sum.iter().map(|l| l / n_train).collect(),
            train_accuracy: train_hits.iter().map(|&h| h as f64 / n_train).collect(),
            val_loss,
            val_accuracy: val_acc,
        };
        if opts.verbose {
            eprintln!(
                "[{}] epoch {epoch}: train_acc {:?} val_acc {:?}",
                opts.stage,
                metrics
                    .train_accuracy
                    .iter()
                    .map(|a| format!("{a:.4}"))
                    .collect::<Vec<_>>(),
                metrics
                    .val_accuracy
                    .iter()
                    .map(|a| format!("{a:.4}"))
                    .collect::<Vec<_>>(),
            );
        }

        // Best-only checkpoints, one per monitored output.
        for (spec, tracker) in opts.checkpoints.iter().zip(&mut checkpoint_trackers) {
            let value = metrics.val_accuracy[spec.monitor_output];
            if tracker.consider(epoch, value) {
                save_checkpoint(
                    graph,
                    &spec.base_path,
                    &CheckpointMeta {
                        selected_metric: Some(spec.monitor_name.clone()),
                        metric_value: Some(value),
                        epoch: Some(epoch),
                        hyperparameters: spec.hyperparameters.clone(),
                    },
                )?;
            }
        }

        let monitored = match opts.dual_monitor {
            DualMonitor::MeanAccuracy | DualMonitor::PerOutputAnd => {
                metrics.val_accuracy.iter().sum::<f64>() / n_out as f64
            }
        };
        history.epochs.push(metrics.clone());

        if let Some(st) = stopper.as_mut() {
            let decision = st.observe(epoch, monitored);
            if decision == EarlyStopDecision::Improved {
                best_weights = Some(graph.snapshot_params());
            }
            let stop = match opts.dual_monitor {
                DualMonitor::MeanAccuracy => decision == EarlyStopDecision::Stop,
                DualMonitor::PerOutputAnd => {
                    let mut all_stopped = true;
                    for (o, tracker) in per_output_stoppers.iter_mut().enumerate() {
                        tracker.observe(epoch, metrics.val_accuracy[o]);
                        all_stopped &= tracker.stopped_epoch().is_some();
                    }
                    all_stopped
                }
            };
            if stop {
                history.stopped_early = Some(epoch);
                break;
            }
        }
    }

    if let Some(st) = &stopper {
        history.best_epoch = st.best_epoch();
        history.best_metric = st.best_epoch().map(|_| st.best_value());
        if let Some(snapshot) = &best_weights {
            graph.restore_params(snapshot);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::DatasetName;
    use crate::netgraph::{build_dual_model, FreezeMask};
    use crate::optim::{NadamConfig, OptimizerSpec, SgdConfig};

    #[test]
    fn early_stop_trace_from_hand_derivation() {
        // accuracies [0.90, 0.9005, 0.9008, 0.9009, 0.9009, 0.9009]:
        // no improvement >= 0.001 after epoch 1; stop after epoch 6;
        // restore epoch-1 weights.
        let mut t = EarlyStopTracker::new(EarlyStopConfig::default());
        let values = [0.90, 0.9005, 0.9008, 0.9009, 0.9009, 0.9009];
        let mut stopped_at = None;
        for (i, &v) in values.iter().enumerate() {
            match t.observe(i + 1, v) {
                EarlyStopDecision::Stop => {
                    stopped_at = Some(i + 1);
                    break;
                }
                _ => {}
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(t.best_epoch(), Some(1));
    }

    #[test]
    fn early_stop_never_fires_on_steady_improvement() {
        let mut t = EarlyStopTracker::new(EarlyStopConfig::default());
        for epoch in 1..=50 {
            let v = 0.5 + epoch as f64 * 0.002;
            assert_eq!(t.observe(epoch, v), EarlyStopDecision::Improved);
        }
        assert_eq!(t.stopped_epoch(), None);
    }

    #[test]
    fn early_stop_fires_before_a_pending_improvement() {
        // Five flat epochs exhaust the patience; the improvement that would
        // arrive next is never trained.
        let mut t = EarlyStopTracker::new(EarlyStopConfig::default());
        assert_eq!(t.observe(1, 0.9), EarlyStopDecision::Improved);
        for epoch in 2..=5 {
            assert!(matches!(
                t.observe(epoch, 0.9),
                EarlyStopDecision::NoImprovement { .. }
            ));
        }
        assert_eq!(t.observe(6, 0.9), EarlyStopDecision::Stop);
        assert_eq!(t.stopped_epoch(), Some(6));
        assert_eq!(t.best_epoch(), Some(1));
    }

    #[test]
    fn history_csv_roundtrips_exactly() {
        let history = TrainHistory {
            output_names: vec!["model1".into(), "model2".into()],
            epochs: vec![EpochMetrics {
                epoch: 1,
                train_loss: vec![2.302585092994046, 2.1],
                train_accuracy: vec![0.1234567890123, 0.2],
                val_loss: vec![2.0, 1.9],
                val_accuracy: vec![0.3, 1.0 / 3.0],
            }],
            stopped_early: None,
            best_epoch: None,
            best_metric: None,
        };
        let back = TrainHistory::from_csv(&history.to_csv()).unwrap();
        assert_eq!(back.output_names, history.output_names);
        assert_eq!(back.epochs[0].epoch, 1);
        assert_eq!(back.epochs[0].train_loss, history.epochs[0].train_loss);
        assert_eq!(back.epochs[0].val_accuracy, history.epochs[0].val_accuracy);
    }

    #[test]
    fn strict_best_saves_only_on_strict_improvement() {
        let mut b = StrictBest::default();
        assert!(b.consider(1, 0.5));
        assert!(!b.consider(2, 0.5));
        assert!(b.consider(3, 0.7));
        assert!(!b.consider(4, 0.6));
        assert_eq!(b.best_epoch(), Some(3));
    }

    fn tiny_dataset(n: usize) -> Dataset {
        // Two distinguishable classes: bright top half vs bright bottom half.
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = (i % 2) as u8;
            labels.push(class);
            for y in 0..12 {
                for x in 0..12 {
                    let _ = x;
                    let bright = if class == 0 { y < 6 } else { y >= 6 };
                    pixels.push(if bright { 0.9 } else { 0.1 });
                }
            }
        }
        Dataset::from_parts(DatasetName::Mnist, pixels, vec![12, 12, 1], labels).unwrap()
    }

    #[test]
    fn zero_epoch_plan_changes_nothing() {
        let mut g = build_dual_model(&[12, 12, 1], 4).unwrap();
        let before = g.snapshot_params();
        let data = tiny_dataset(8);
        let train = DualTrainData {
            data: &data,
            augment: AugmentConfig::identity(),
            scope: "s0".into(),
            seed: 4,
        };
        let val = DualValData { data: &data };
        let mut opt = Optimizer::new(OptimizerSpec::Nadam(NadamConfig::default()));
        let history = fit(
            &mut g,
            &train,
            &val,
            &mut opt,
            &FitOptions::quiet("s0", 0, 4),
        )
        .unwrap();
        assert!(history.epochs.is_empty());
        let after = g.snapshot_params();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn dual_model_overfits_a_tiny_batch() {
        // Overfit sanity oracle: a handful of separable samples must reach
        // train accuracy 1.0 on both outputs.
        let data = tiny_dataset(8);
        let mut g = build_dual_model(&[12, 12, 1], 9).unwrap();
        let train = DualTrainData {
            data: &data,
            augment: AugmentConfig::identity(),
            scope: "s1".into(),
            seed: 9,
        };
        let val = DualValData { data: &data };
        let mut opt = Optimizer::new(OptimizerSpec::Nadam(NadamConfig::default()));
        let mut opts = FitOptions::quiet("s1", 60, 9);
        opts.batch_size = 8;
        let history = fit(&mut g, &train, &val, &mut opt, &opts).unwrap();
        let last = history.epochs.last().unwrap();
        assert_eq!(last.train_accuracy, vec![1.0, 1.0], "history: {last:?}");
    }

    #[test]
    fn frozen_parameters_survive_training_bit_for_bit() {
        let data = tiny_dataset(12);
        let mut g = build_dual_model(&[12, 12, 1], 5).unwrap();
        // Freeze branch 1 entirely; train branch 2.
        let mut mask = FreezeMask::all_trainable(&g);
        for (i, node) in g.nodes().iter().enumerate() {
            if node.name.starts_with("model1/") {
                mask.trainable[i] = false;
            }
        }
        g.set_freeze(&mask).unwrap();
        let frozen_before: Vec<Tensor> = g
            .nodes()
            .iter()
            .filter(|n| n.name.starts_with("model1/"))
            .filter_map(|n| match &n.op {
                crate::netgraph::NodeOp::Conv2d { params, .. } => Some(params.kernels.clone()),
                crate::netgraph::NodeOp::Dense { params } => Some(params.weights.clone()),
                _ => None,
            })
            .collect();

        let train = DualTrainData {
            data: &data,
            augment: AugmentConfig::identity(),
            scope: "s1".into(),
            seed: 5,
        };
        let val = DualValData { data: &data };
        let mut opt = Optimizer::new(OptimizerSpec::Sgd(SgdConfig::default()));
        let mut opts = FitOptions::quiet("s1", 10, 5);
        opts.batch_size = 4;
        fit(&mut g, &train, &val, &mut opt, &opts).unwrap();

        let frozen_after: Vec<Tensor> = g
            .nodes()
            .iter()
            .filter(|n| n.name.starts_with("model1/"))
            .filter_map(|n| match &n.op {
                crate::netgraph::NodeOp::Conv2d { params, .. } => Some(params.kernels.clone()),
                crate::netgraph::NodeOp::Dense { params } => Some(params.weights.clone()),
                _ => None,
            })
            .collect();
        for (a, b) in frozen_before.iter().zip(&frozen_after) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn restored_model_matches_best_epoch_metric() {
        let data = tiny_dataset(16);
        let mut g = build_dual_model(&[12, 12, 1], 2).unwrap();
        let train = DualTrainData {
            data: &data,
            augment: AugmentConfig::identity(),
            scope: "s1".into(),
            seed: 2,
        };
        let val = DualValData { data: &data };
        let mut opt = Optimizer::new(OptimizerSpec::Nadam(NadamConfig::default()));
        let mut opts = FitOptions::quiet("s1", 12, 2);
        opts.batch_size = 8;
        opts.early_stop = Some(EarlyStopConfig::default());
        let history = fit(&mut g, &train, &val, &mut opt, &opts).unwrap();

        if let Some(best_epoch) = history.best_epoch {
            let recorded: f64 = history.epochs[best_epoch - 1]
                .val_accuracy
                .iter()
                .sum::<f64>()
                / 2.0;
            let (_, acc) = evaluate(&g, &val, 1).unwrap();
            let now = acc.iter().sum::<f64>() / 2.0;
            assert_eq!(now, recorded);
        }
    }

    #[test]
    fn parallel_and_sequential_training_produce_identical_weights() {
        let data = tiny_dataset(16);
        let run = |threads: usize| -> Vec<Tensor> {
            let mut g = build_dual_model(&[12, 12, 1], 30).unwrap();
            let train = DualTrainData {
                data: &data,
                augment: AugmentConfig::default(),
                scope: "s1".into(),
                seed: 30,
            };
            let val = DualValData { data: &data };
            let mut opt = Optimizer::new(OptimizerSpec::Nadam(NadamConfig::default()));
            let mut opts = FitOptions::quiet("s1", 3, 30);
            opts.batch_size = 4;
            opts.threads = threads;
            fit(&mut g, &train, &val, &mut opt, &opts).unwrap();
            g.snapshot_params()
        };
        let seq = run(1);
        let par = run(0);
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.data(), b.data());
        }
    }
}
