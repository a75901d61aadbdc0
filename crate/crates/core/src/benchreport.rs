//! Inference benchmarking: single-sample latency over repeated runs,
//! throughput across power-of-two batch sizes with graceful termination on
//! allocation failure, and size reporting, plus CSV/JSON/SVG emission.
//!
//! Timing goes through a [`Clock`] trait so tests can drive the harness with
//! a deterministic fake clock; production code uses a monotonic clock. The
//! model itself is never constructed inside a timed span.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::ModelGraph;
use crate::tensor::Tensor;
use crate::trainer::TrainHistory;

/// Monotonic time source in nanoseconds.
pub trait Clock {
    fn now_nanos(&mut self) -> u64;
}

pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_nanos(&mut self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

/// A benchmark failure that terminates a sweep without aborting the process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchFailure {
    pub message: String,
}

/// Something that can run single-sample and batched forward passes.
pub trait InferenceRunner {
    fn run_single(&mut self) -> Result<()>;
    fn run_batch(&mut self, batch_size: usize) -> std::result::Result<(), BenchFailure>;
}

/// Runs a single-input model over a pool of sample inputs, cycling through
/// them. Batch assembly goes through `try_reserve`, so resource exhaustion
/// surfaces as a [`BenchFailure`] instead of an abort.
pub struct GraphRunner<'a> {
    graph: &'a ModelGraph,
    samples: Vec<Tensor>,
    cursor: usize,
}

impl<'a> GraphRunner<'a> {
    pub fn new(graph: &'a ModelGraph, samples: Vec<Tensor>) -> Result<Self> {
        if graph.input_shapes().len() != 1 {
            return Err(Error::Bench(format!(
                "benchmark runner expects a single-input model, got {} inputs",
                graph.input_shapes().len()
            )));
        }
        if samples.is_empty() {
            return Err(Error::Bench("no benchmark samples provided".into()));
        }
        for s in &samples {
            if s.shape() != graph.input_shapes()[0].as_slice() {
                return Err(Error::Shape(format!(
                    "sample shape {:?} does not match model input {:?}",
                    s.shape(),
                    graph.input_shapes()[0]
                )));
            }
        }
        Ok(Self {
            graph,
            samples,
            cursor: 0,
        })
    }
}

impl InferenceRunner for GraphRunner<'_> {
    fn run_single(&mut self) -> Result<()> {
        let s = self.samples[self.cursor % self.samples.len()].clone();
        self.cursor += 1;
        self.graph.forward(&[s])?;
        Ok(())
    }

    fn run_batch(&mut self, batch_size: usize) -> std::result::Result<(), BenchFailure> {
        let per: usize = self.samples[0].len();
        let mut buf: Vec<f32> = Vec::new();
        buf.try_reserve_exact(batch_size.saturating_mul(per))
            .map_err(|e| BenchFailure {
                message: format!("batch allocation of {batch_size}x{per} floats failed: {e}"),
            })?;
        for i in 0..batch_size {
            buf.extend_from_slice(self.samples[(self.cursor + i) % self.samples.len()].data());
        }
        self.cursor = (self.cursor + batch_size) % self.samples.len().max(1);
        let shape = self.graph.input_shapes()[0].clone();
        for i in 0..batch_size {
            let t = Tensor::from_vec(&shape, buf[i * per..(i + 1) * per].to_vec())
                .map_err(|e| BenchFailure {
                    message: format!("batch sample view: {e}"),
                })?;
            self.graph.forward(&[t]).map_err(|e| BenchFailure {
                message: format!("forward pass failed: {e}"),
            })?;
        }
        Ok(())
    }
}

/// Single-instance latency summary: mean and population standard deviation
/// over `repetitions` timed forward passes after `warmup` untimed ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    pub repetitions: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

fn mean_and_population_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn measure_latency(
    runner: &mut dyn InferenceRunner,
    clock: &mut dyn Clock,
    label: &str,
    repetitions: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if repetitions < 2 {
        return Err(Error::Bench(format!(
            "latency needs at least 2 repetitions, got {repetitions}"
        )));
    }
    for _ in 0..warmup {
        runner.run_single()?;
    }
    let mut samples_ms = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = clock.now_nanos();
        runner.run_single()?;
        let t1 = clock.now_nanos();
        samples_ms.push((t1 - t0) as f64 / 1e6);
    }
    let (mean_ms, std_ms) = mean_and_population_std(&samples_ms);
    Ok(LatencyReport {
        model: label.to_string(),
        repetitions,
        warmup,
        mean_ms,
        std_ms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub batch_size: usize,
    pub mean_samples_per_sec: f64,
    pub std_samples_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum TerminationReason {
    MaxExponentReached,
    AllocationFailure { batch_size: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub model: String,
    pub repetitions: usize,
    pub rows: Vec<ThroughputRow>,
    pub termination: TerminationReason,
}

/// Sweeps batch sizes `2^0 .. 2^max_exponent`, timing `repetitions` batch
/// passes at each size. A batch failure is captured as the termination
/// reason and ends the sweep; rows measured so far are kept.
pub fn measure_throughput(
    runner: &mut dyn InferenceRunner,
    clock: &mut dyn Clock,
    label: &str,
    max_exponent: u32,
    repetitions: usize,
) -> Result<ThroughputReport> {
    if repetitions < 2 {
        return Err(Error::Bench(format!(
            "throughput needs at least 2 repetitions, got {repetitions}"
        )));
    }
    let mut rows = Vec::new();
    let mut termination = TerminationReason::MaxExponentReached;

    'sweep: for exp in 0..=max_exponent {
        let batch = 1usize << exp;
        let mut sps = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t0 = clock.now_nanos();
            if let Err(failure) = runner.run_batch(batch) {
                termination = TerminationReason::AllocationFailure {
                    batch_size: batch,
                    message: failure.message,
                };
                break 'sweep;
            }
            let t1 = clock.now_nanos();
            let secs = (t1 - t0) as f64 / 1e9;
            if secs <= 0.0 {
                return Err(Error::Bench("non-positive batch duration".into()));
            }
            sps.push(batch as f64 / secs);
        }
        let (mean, std) = mean_and_population_std(&sps);
        rows.push(ThroughputRow {
            batch_size: batch,
            mean_samples_per_sec: mean,
            std_samples_per_sec: std,
        });
    }

    Ok(ThroughputReport {
        model: label.to_string(),
        repetitions,
        rows,
        termination,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub param_count: usize,
    pub trainable_param_count: usize,
    pub bytes: usize,
    pub summary: String,
}

pub fn size_report(graph: &ModelGraph) -> SizeReport {
    SizeReport {
        param_count: graph.param_count(false),
        trainable_param_count: graph.param_count(true),
        bytes: graph.param_bytes(true),
        summary: graph.size_summary(true),
    }
}

pub fn write_throughput_csv(report: &ThroughputReport) -> String {
    let mut out = String::from("batch_size,mean_samples_per_sec,std_samples_per_sec\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.batch_size, row.mean_samples_per_sec, row.std_samples_per_sec
        ));
    }
    out
}

pub fn parse_throughput_csv(csv: &str) -> Result<Vec<ThroughputRow>> {
    let mut rows = Vec::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Bench(format!("bad csv line {i}: {line}")));
        }
        rows.push(ThroughputRow {
            batch_size: cols[0]
                .parse()
                .map_err(|e| Error::Bench(format!("line {i}: {e}")))?,
            mean_samples_per_sec: cols[1]
                .parse()
                .map_err(|e| Error::Bench(format!("line {i}: {e}")))?,
            std_samples_per_sec: cols[2]
                .parse()
                .map_err(|e| Error::Bench(format!("line {i}: {e}")))?,
        });
    }
    Ok(rows)
}

/// One plotted series: points plus optional symmetric error bars.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub error: Option<Vec<f64>>,
}

/// Minimal SVG line chart: one polyline per series, axis labels, optional
/// error bars, log2 x-axis for batch sweeps.
pub fn line_chart_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log2_x: bool,
) -> String {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const M: f64 = 60.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let xform = |x: f64| if log2_x { x.log2() } else { x };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            xs.push(xform(x));
            let e = s.error.as_ref().map_or(0.0, |e| e[i]);
            ys.push(y - e);
            ys.push(y + e);
        }
    }
    let (x_min, x_max) = xs
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (y_min, y_max) = ys
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let x_span = (x_max - x_min).max(1e-9);
    let y_span = (y_max - y_min).max(1e-9);
    let px = |x: f64| M + (xform(x) - x_min) / x_span * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y_min) / y_span * (H - 2.0 * M);

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<rect width="{W}" height="{H}" fill="white"/>"#
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{title}</text>"#,
        W / 2.0
    ));
    svg.push('\n');
    // Axes.
    svg.push_str(&format!(
        r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - M,
        W - M,
        H - M
    ));
    svg.push_str(&format!(
        r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#,
        H - M
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{x_label}</text>"#,
        W / 2.0,
        H - 16.0
    ));
    svg.push_str(&format!(
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    ));
    svg.push('\n');
    // Axis range labels.
    svg.push_str(&format!(
        r#"<text x="{M}" y="{}" font-size="10">{:.4}</text>"#,
        H - M + 14.0,
        if log2_x { x_min.exp2() } else { x_min }
    ));
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{:.4}</text>"#,
        W - M,
        H - M + 14.0,
        if log2_x { x_max.exp2() } else { x_max }
    ));
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" font-size="10">{y_min:.4}</text>"#,
        M - 52.0,
        H - M
    ));
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" font-size="10">{y_max:.4}</text>"#,
        M - 52.0,
        M + 4.0
    ));
    svg.push('\n');

    for (si, s) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        if let Some(err) = &s.error {
            for (i, &(x, y)) in s.points.iter().enumerate() {
                if err[i] > 0.0 {
                    let (x0, y0, y1) = (px(x), py(y - err[i]), py(y + err[i]));
                    svg.push_str(&format!(
                        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="{color}" stroke-width="1"/>"#
                    ));
                }
            }
            svg.push('\n');
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", px(x), py(y)))
            .collect();
        svg.push_str(&format!(
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        ));
        svg.push('\n');
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - M + 4.0,
            M + 14.0 * si as f64,
            s.name
        ));
        svg.push('\n');
    }
    svg.push_str("</svg>\n");
    svg
}

/// Everything the JSON summary can carry.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReportBundle {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<SizeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<ThroughputReport>,
    #[serde(skip)]
    pub training_curves: Vec<(String, TrainHistory)>,
}

/// Writes `summary.json` plus per-metric CSV/JSON/SVG files; returns the
/// paths written.
pub fn emit_reports(bundle: &ReportBundle, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let write = |name: &str, contents: String| -> Result<PathBuf> {
        let path = out_dir.join(name);
        std::fs::write(&path, contents)?;
        Ok(path)
    };

    let summary = serde_json::to_string_pretty(bundle)
        .map_err(|e| Error::Bench(format!("summary serialize: {e}")))?;
    written.push(write("summary.json", summary + "\n")?);

    if let Some(lat) = &bundle.latency {
        let json = serde_json::to_string_pretty(lat)
            .map_err(|e| Error::Bench(format!("latency serialize: {e}")))?;
        written.push(write("latency.json", json + "\n")?);
    }
    if let Some(size) = &bundle.size {
        let json = serde_json::to_string_pretty(size)
            .map_err(|e| Error::Bench(format!("size serialize: {e}")))?;
        written.push(write("size.json", json + "\n")?);
    }
    if let Some(tp) = &bundle.throughput {
        written.push(write("throughput.csv", write_throughput_csv(tp))?);
        let series = Series {
            name: tp.model.clone(),
            points: tp
                .rows
                .iter()
                .map(|r| (r.batch_size as f64, r.mean_samples_per_sec))
                .collect(),
            error: Some(tp.rows.iter().map(|r| r.std_samples_per_sec).collect()),
        };
        if !tp.rows.is_empty() {
            written.push(write(
                "throughput.svg",
                line_chart_svg(
                    &format!("throughput vs batch size ({})", tp.model),
                    "batch size",
                    "samples/sec",
                    &[series],
                    true,
                ),
            )?);
        }
    }
    for (label, history) in &bundle.training_curves {
        written.push(write(&format!("curves_{label}.csv"), history.to_csv())?);
        if history.epochs.is_empty() {
            continue;
        }
        let mut series = Vec::new();
        for (o, name) in history.output_names.iter().enumerate() {
            series.push(Series {
                name: format!("val_acc_{name}"),
                points: history
                    .epochs
                    .iter()
                    .map(|e| (e.epoch as f64, e.val_accuracy[o]))
                    .collect(),
                error: None,
            });
            series.push(Series {
                name: format!("train_acc_{name}"),
                points: history
                    .epochs
                    .iter()
                    .map(|e| (e.epoch as f64, e.train_accuracy[o]))
                    .collect(),
                error: None,
            });
        }
        written.push(write(
            &format!("curves_{label}.svg"),
            line_chart_svg(
                &format!("training curves ({label})"),
                "epoch",
                "accuracy",
                &series,
                false,
            ),
        )?);
    }
    Ok(written)
}
