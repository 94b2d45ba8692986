//! Command-line driver: single runs, matrix dumps and benchmark sweeps.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Parser, ValueEnum};
use thiserror::Error;

use crate::detector::{AnomalyParams, ProbMode};
use crate::events::{self, EventError, GeneratorConfig, SensorEvent, SensorId};
use crate::pipeline::{
    self, Order, PipelineConfig, PipelineError, PipelineRun, RunMetrics, TubeCount,
};
use crate::window::WindowMode;

pub const METRICS_HEADER: &str = "threads,sensors,window,clusters,events,seconds,events_per_second";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] clap::Error),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WindowModeArg {
    Count,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProbModeArg {
    Incremental,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OrderArg {
    TrainFirst,
    InferFirst,
}

/// Incremental sliding-window anomaly detection over sensor event streams.
#[derive(Debug, Parser)]
#[command(name = "tubeline", version)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "generate"])))]
struct Args {
    /// CSV input: timestamp,machine_id,sensor_id,value
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Synthetic input, e.g. sensors=16,events=50000,seed=7[,anomalies=3:120+5:800][,noise=0.5][,levels=10:20:30][,dwell=4]
    #[arg(long, value_name = "SPEC", value_parser = parse_generate)]
    generate: Option<GenerateSpec>,
    /// Window capacity W
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    window: u64,
    /// Clusters K
    #[arg(long, default_value_t = 5, value_parser = positive_usize)]
    clusters: usize,
    /// Lloyd iteration cap M
    #[arg(long, default_value_t = 10, value_parser = positive_usize)]
    max_iters: usize,
    /// Transitions per scored sequence N
    #[arg(long, default_value_t = 5, value_parser = positive_usize)]
    seq_len: usize,
    /// Anomaly threshold
    #[arg(long, default_value_t = 0.005, value_parser = parse_theta)]
    theta: f64,
    #[arg(long, default_value_t = 1, value_parser = positive_usize)]
    threads: usize,
    /// Tube-op count; one per sensor when omitted
    #[arg(long, value_parser = positive_usize)]
    tubes: Option<usize>,
    /// Channel bound, in batches
    #[arg(long, default_value_t = pipeline::DEFAULT_QUEUE_CAPACITY, value_parser = positive_usize)]
    queue_capacity: usize,
    #[arg(long, default_value_t = pipeline::DEFAULT_BATCH_SIZE, value_parser = positive_usize)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = WindowModeArg::Count)]
    window_mode: WindowModeArg,
    #[arg(long, value_enum, default_value_t = ProbModeArg::Incremental)]
    prob_mode: ProbModeArg,
    #[arg(long, value_enum, default_value_t = OrderArg::TrainFirst)]
    order: OrderArg,
    /// Detections CSV (stdout when omitted)
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Metrics CSV
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
    /// Final transition matrices, one row per sensor and source state
    #[arg(long, value_name = "PATH")]
    dump_matrix: Option<PathBuf>,
    /// Benchmark sweep, e.g. windows=10,100,1000; repeat to sweep several axes
    #[arg(long, value_name = "AXIS=LIST", value_parser = parse_sweep)]
    sweep: Vec<SweepAxis>,
    /// Runs per measurement; the median throughput is reported
    #[arg(long, default_value_t = 1, value_parser = positive_usize)]
    repeat: usize,
    /// Normalized sweep throughput CSV (stdout when omitted)
    #[arg(long, value_name = "PATH")]
    normalized: Option<PathBuf>,
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_theta(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .parse()
        .map_err(|e: std::num::ParseFloatError| e.to_string())?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err("must lie in (0, 1]".into())
    }
}

/// One swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepAxis {
    Windows(Vec<u64>),
    Clusters(Vec<usize>),
    Threads(Vec<usize>),
}

pub fn parse_sweep(s: &str) -> Result<SweepAxis, String> {
    let (axis, list) = s
        .split_once('=')
        .ok_or_else(|| format!("expected AXIS=V1,V2,... in {s:?}"))?;
    let values: Vec<usize> = list
        .split(',')
        .map(positive_usize)
        .collect::<Result<_, _>>()?;
    match axis.trim() {
        "windows" | "window" => Ok(SweepAxis::Windows(
            values.into_iter().map(|v| v as u64).collect(),
        )),
        "clusters" => Ok(SweepAxis::Clusters(values)),
        "threads" => Ok(SweepAxis::Threads(values)),
        other => Err(format!("unknown sweep axis {other:?}")),
    }
}

/// A generator configuration plus the number of events to keep.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSpec {
    pub config: GeneratorConfig,
    /// Total over all sensors; the round-robin stream is cut after this many.
    pub total_events: u64,
}

impl GenerateSpec {
    pub fn generate(&self) -> Result<Vec<SensorEvent>, EventError> {
        let mut out = events::generate_stream(&self.config)?;
        out.truncate(self.total_events as usize);
        Ok(out)
    }
}

/// Parses the `--generate` spec. `events` is the total over all sensors.
pub fn parse_generate(s: &str) -> Result<GenerateSpec, String> {
    let mut cfg = GeneratorConfig::default();
    let (mut sensors, mut total, mut seed) = (None, None, None);
    for pair in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
        let value = value.trim();
        let int = |v: &str| v.parse::<u64>().map_err(|e| format!("{key}: {e}"));
        let real = |v: &str| v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
        match key.trim() {
            "sensors" => sensors = Some(int(value)?),
            "events" => total = Some(int(value)?),
            "seed" => seed = Some(int(value)?),
            "noise" => cfg.noise_amplitude = real(value)?,
            "dwell" => cfg.dwell = int(value)?,
            "levels" => {
                cfg.regime_values = value.split(':').map(real).collect::<Result<_, _>>()?;
            }
            "anomalies" => {
                cfg.anomaly_positions = value
                    .split('+')
                    .filter(|p| !p.is_empty())
                    .map(|p| {
                        let (sensor, at) = p
                            .split_once(':')
                            .ok_or_else(|| format!("anomaly {p:?} is not SENSOR:ORDINAL"))?;
                        Ok((int(sensor)? as SensorId, int(at)?))
                    })
                    .collect::<Result<_, String>>()?;
            }
            other => return Err(format!("unknown generator key {other:?}")),
        }
    }
    let sensors = sensors.ok_or("missing sensors=")?;
    let total = total.ok_or("missing events=")?;
    cfg.seed = seed.ok_or("missing seed=")?;
    if sensors == 0 || sensors > u64::from(u32::MAX) {
        return Err("sensors must be positive".into());
    }
    if total == 0 {
        return Err("events must be positive".into());
    }
    cfg.sensor_count = sensors as u32;
    cfg.events_per_sensor = total.div_ceil(sensors);
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(GenerateSpec {
        config: cfg,
        total_events: total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    File(PathBuf),
    Generate(GenerateSpec),
}

/// Everything one invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: Source,
    pub pipeline: PipelineConfig,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub dump_matrix: Option<PathBuf>,
    pub sweep: Vec<SweepAxis>,
    pub repeat: usize,
    pub normalized: Option<PathBuf>,
}

/// Parses `argv` (program name first).
pub fn parse_args<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let a = Args::try_parse_from(argv)?;
    let source = match (a.input, a.generate) {
        (Some(path), None) => Source::File(path),
        (None, Some(g)) => Source::Generate(g),
        _ => unreachable!("clap enforces exactly one source"),
    };
    let pipeline = PipelineConfig {
        threads: a.threads,
        queue_capacity: a.queue_capacity,
        batch_size: a.batch_size,
        tubes: a.tubes.map_or(TubeCount::PerSensor, TubeCount::Fixed),
        order: match a.order {
            OrderArg::TrainFirst => Order::TrainFirst,
            OrderArg::InferFirst => Order::InferFirst,
        },
        detector: AnomalyParams {
            clusters: a.clusters,
            window: a.window,
            window_mode: match a.window_mode {
                WindowModeArg::Count => WindowMode::Count,
                WindowModeArg::Time => WindowMode::Time,
            },
            max_iters: a.max_iters,
            seq_len: a.seq_len,
            theta: a.theta,
            prob_mode: match a.prob_mode {
                ProbModeArg::Incremental => ProbMode::Incremental,
                ProbModeArg::Exact => ProbMode::Exact,
            },
            ..AnomalyParams::default()
        },
    };
    pipeline
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(RunConfig {
        source,
        pipeline,
        out: a.out,
        metrics: a.metrics,
        dump_matrix: a.dump_matrix,
        sweep: a.sweep,
        repeat: a.repeat,
        normalized: a.normalized,
    })
}

pub fn load_source(source: &Source) -> Result<Vec<SensorEvent>, CliError> {
    match source {
        Source::File(path) => {
            let f = File::open(path).map_err(io_err(path))?;
            Ok(events::read_events(BufReader::new(f))?)
        }
        Source::Generate(g) => Ok(g.generate()?),
    }
}

pub fn sensor_count(input: &[SensorEvent]) -> usize {
    input
        .iter()
        .map(|e| e.sensor_id)
        .collect::<HashSet<_>>()
        .len()
}

/// One metrics CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub threads: usize,
    pub sensors: usize,
    pub window: u64,
    pub clusters: usize,
    pub metrics: RunMetrics,
}

impl MetricsRow {
    pub fn new(cfg: &PipelineConfig, sensors: usize, metrics: RunMetrics) -> Self {
        Self {
            threads: cfg.threads,
            sensors,
            window: cfg.detector.window,
            clusters: cfg.detector.clusters,
            metrics,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.threads,
            self.sensors,
            self.window,
            self.clusters,
            self.metrics.events_processed,
            self.metrics.wall_seconds,
            self.metrics.throughput
        )
    }
}

pub fn write_metrics(mut w: impl Write, rows: &[MetricsRow]) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()
}

/// Final matrices as `sensor,from,p_0,...,p_{K-1}` rows.
pub fn write_matrices(mut w: impl Write, run: &PipelineRun, clusters: usize) -> io::Result<()> {
    let header: Vec<String> = (0..clusters).map(|j| format!("p_{j}")).collect();
    writeln!(w, "sensor,from,{}", header.join(","))?;
    for model in &run.models {
        for (from, row) in model.matrix().to_csv().lines().enumerate() {
            writeln!(w, "{},{from},{row}", model.sensor_id())?;
        }
    }
    w.flush()
}

/// Runs `repeat` times and keeps the median-throughput measurement. The
/// returned run is the first one; detections are identical across repeats.
pub fn run_repeated(
    cfg: &PipelineConfig,
    input: &[SensorEvent],
    repeat: usize,
) -> Result<(PipelineRun, RunMetrics), PipelineError> {
    let first = pipeline::run_pipeline(cfg, input)?;
    let mut samples = vec![first.metrics];
    for _ in 1..repeat.max(1) {
        samples.push(pipeline::run_pipeline(cfg, input)?.metrics);
    }
    samples.sort_by(|a, b| a.throughput.total_cmp(&b.throughput));
    let median = samples[(samples.len() - 1) / 2];
    Ok((first, median))
}

/// Every configuration in the cartesian product of `sweep` over `base`.
pub fn sweep_points(base: &PipelineConfig, sweep: &[SweepAxis]) -> Vec<PipelineConfig> {
    let mut points = vec![*base];
    for axis in sweep {
        points = points
            .into_iter()
            .flat_map(|p| -> Vec<PipelineConfig> {
                match axis {
                    SweepAxis::Windows(ws) => ws
                        .iter()
                        .map(|&w| PipelineConfig {
                            detector: AnomalyParams {
                                window: w,
                                ..p.detector
                            },
                            ..p
                        })
                        .collect(),
                    SweepAxis::Clusters(ks) => ks
                        .iter()
                        .map(|&k| PipelineConfig {
                            detector: AnomalyParams {
                                clusters: k,
                                ..p.detector
                            },
                            ..p
                        })
                        .collect(),
                    SweepAxis::Threads(ts) => ts
                        .iter()
                        .map(|&t| PipelineConfig { threads: t, ..p })
                        .collect(),
                }
            })
            .collect();
    }
    points
}

#[derive(Debug, Error)]
#[error("sweep point {point} failed: {source}")]
pub struct SweepError {
    pub point: usize,
    /// Rows measured before the failure.
    pub rows: Vec<MetricsRow>,
    pub source: PipelineError,
}

/// One metrics row per sweep point, all on the same input.
pub fn bench_sweep(
    base: &PipelineConfig,
    sweep: &[SweepAxis],
    input: &[SensorEvent],
    repeat: usize,
) -> Result<Vec<MetricsRow>, SweepError> {
    let sensors = sensor_count(input);
    let mut rows = Vec::new();
    for (point, cfg) in sweep_points(base, sweep).into_iter().enumerate() {
        match run_repeated(&cfg, input, repeat) {
            Ok((_, m)) => rows.push(MetricsRow::new(&cfg, sensors, m)),
            Err(source) => {
                return Err(SweepError {
                    point,
                    rows,
                    source,
                })
            }
        }
    }
    Ok(rows)
}

/// Throughput scaled to [0, 100] against the best row with the same
/// thread count.
pub fn normalized_throughput(rows: &[MetricsRow]) -> Vec<f64> {
    rows.iter()
        .map(|r| {
            let best = rows
                .iter()
                .filter(|o| o.threads == r.threads)
                .map(|o| o.metrics.throughput)
                .fold(0.0, f64::max);
            if best > 0.0 {
                r.metrics.throughput / best * 100.0
            } else {
                0.0
            }
        })
        .collect()
}

/// What an invocation produced, for the caller to summarize.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<MetricsRow>,
    pub normalized: Vec<f64>,
    pub detections: usize,
    pub anomalies: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_metrics_to(path: Option<&Path>, rows: &[MetricsRow]) -> Result<(), CliError> {
    if let Some(path) = path {
        write_metrics(create(path)?, rows).map_err(io_err(path))?;
    }
    Ok(())
}

/// Carries out a parsed invocation.
pub fn execute(cfg: &RunConfig) -> Result<Report, CliError> {
    let input = load_source(&cfg.source)?;
    let sensors = sensor_count(&input);

    if !cfg.sweep.is_empty() {
        for point in sweep_points(&cfg.pipeline, &cfg.sweep) {
            point
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        let rows = match bench_sweep(&cfg.pipeline, &cfg.sweep, &input, cfg.repeat) {
            Ok(rows) => rows,
            Err(e) => {
                write_metrics_to(cfg.metrics.as_deref(), &e.rows)?;
                return Err(e.source.into());
            }
        };
        write_metrics_to(cfg.metrics.as_deref(), &rows)?;
        let normalized = normalized_throughput(&rows);
        let table: String = rows
            .iter()
            .zip(&normalized)
            .map(|(r, n)| format!("{},{},{},{n}\n", r.threads, r.window, r.clusters))
            .collect();
        let table = format!("threads,window,clusters,normalized_throughput\n{table}");
        match &cfg.normalized {
            Some(path) => std::fs::write(path, table).map_err(io_err(path))?,
            None => print!("{table}"),
        }
        return Ok(Report {
            rows,
            normalized,
            detections: 0,
            anomalies: 0,
        });
    }

    let (run, metrics) = run_repeated(&cfg.pipeline, &input, cfg.repeat)?;
    match &cfg.out {
        Some(path) => {
            events::write_detections(create(path)?, &run.detections).map_err(io_err(path))?
        }
        None => events::write_detections(io::stdout().lock(), &run.detections)
            .map_err(io_err(Path::new("<stdout>")))?,
    }
    if let Some(path) = &cfg.dump_matrix {
        write_matrices(create(path)?, &run, cfg.pipeline.detector.clusters)
            .map_err(io_err(path))?;
    }
    let rows = vec![MetricsRow::new(&cfg.pipeline, sensors, metrics)];
    write_metrics_to(cfg.metrics.as_deref(), &rows)?;
    Ok(Report {
        normalized: normalized_throughput(&rows),
        rows,
        detections: run.detections.len(),
        anomalies: run.detections.iter().filter(|d| d.anomaly).count(),
    })
}
