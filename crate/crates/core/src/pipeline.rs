//! Split → tube-op → merge execution.
//!
//! A splitter routes each event to one tube-op. Tube-ops are single-threaded
//! state machines (shaper, trainer, predictor) and are multiplexed
//! round-robin onto a fixed pool of worker threads: tube `t` always runs on
//! worker `t % threads`. Workers report their outputs to a merger that
//! restores global timestamp order and breaks timestamp ties by a per-output
//! key (the sensor id for detections), so the output does not depend on the
//! number of threads.
//!
//! Events travel in batches over bounded channels. Every batch carries a
//! watermark, the timestamp of the last event the splitter routed, which
//! promises that the worker will see nothing older. The merger releases an
//! output once every open worker stream has moved strictly past its
//! timestamp, or has closed.

use std::collections::{HashMap, VecDeque};
use std::fmt::Debug;
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::thread;
use std::time::Instant;

use thiserror::Error;

use crate::detector::{AnomalyModel, AnomalyParams, AnomalyPredictor, SensorModels};
use crate::events::{DetectionEvent, MachineId, SensorEvent, SensorId, Timestamp};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("input event {index} has timestamp {got}, earlier than the preceding {previous}")]
    OutOfOrderInput {
        index: usize,
        previous: Timestamp,
        got: Timestamp,
    },
    #[error("tube {tube} failed on event {event}: {source}")]
    Tube {
        tube: usize,
        event: String,
        source: BoxError,
    },
    #[error("tube stream {stream} emitted timestamp {got} after reaching {frontier}")]
    OrderingViolation {
        stream: usize,
        frontier: Timestamp,
        got: Timestamp,
    },
    #[error("worker {0} stopped without closing its stream")]
    WorkerLost(usize),
}

/// Which comes first inside a tube-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Order {
    /// Train on the event, then score it with the updated model.
    #[default]
    TrainFirst,
    /// Score the event with the model as it was, then train on it.
    InferFirst,
}

/// Whether the model handed to a predictor has already absorbed the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AfterTraining,
    BeforeTraining,
}

/// A stateless event transform.
pub type Shaper<E> = fn(&E) -> E;

pub fn identity<E: Clone>(e: &E) -> E {
    e.clone()
}

pub trait Trainer<E>: Send {
    type Model;

    /// The model that `event` would train, left unchanged.
    fn model_for(&mut self, event: &E) -> Result<&Self::Model, BoxError>;

    /// Updates the model with `event` and returns it.
    fn train(&mut self, event: &E) -> Result<&Self::Model, BoxError>;
}

pub trait Predictor<M, E>: Send {
    type Output;

    fn predict(&mut self, model: &M, event: &E, phase: Phase) -> Result<Self::Output, BoxError>;
}

pub trait Timestamped {
    fn timestamp(&self) -> Timestamp;
}

/// Outputs the merger can order: by timestamp, then by `tie_key`.
pub trait Ordered: Timestamped {
    fn tie_key(&self) -> u64;
}

impl Timestamped for SensorEvent {
    fn timestamp(&self) -> Timestamp {
        self.timestamp
    }
}

impl Timestamped for DetectionEvent {
    fn timestamp(&self) -> Timestamp {
        self.timestamp
    }
}

impl Ordered for DetectionEvent {
    fn tie_key(&self) -> u64 {
        u64::from(self.sensor_id)
    }
}

/// Shapers, trainer and predictor of one tube-op.
pub struct TubeOp<E, T, P> {
    /// Applied before training.
    pub shape_train: Shaper<E>,
    /// Applied before prediction.
    pub shape_predict: Shaper<E>,
    pub trainer: T,
    pub predictor: P,
    pub order: Order,
}

impl<E, T, P> TubeOp<E, T, P>
where
    E: Clone,
    T: Trainer<E>,
    P: Predictor<T::Model, E>,
{
    /// A tube-op with identity shapers.
    pub fn new(trainer: T, predictor: P, order: Order) -> Self {
        Self {
            shape_train: identity::<E>,
            shape_predict: identity::<E>,
            trainer,
            predictor,
            order,
        }
    }

    pub fn with_shapers(mut self, train: Shaper<E>, predict: Shaper<E>) -> Self {
        self.shape_train = train;
        self.shape_predict = predict;
        self
    }

    pub fn process(&mut self, e: &E) -> Result<P::Output, BoxError> {
        let for_training = (self.shape_train)(e);
        let for_prediction = (self.shape_predict)(e);
        match self.order {
            Order::TrainFirst => {
                let model = self.trainer.train(&for_training)?;
                self.predictor
                    .predict(model, &for_prediction, Phase::AfterTraining)
            }
            Order::InferFirst => {
                let model = self.trainer.model_for(&for_prediction)?;
                let out = self
                    .predictor
                    .predict(model, &for_prediction, Phase::BeforeTraining)?;
                self.trainer.train(&for_training)?;
                Ok(out)
            }
        }
    }
}

/// Runs `op` over a queue until the sender side closes, forwarding one
/// output per event.
pub fn run_tube_op<E, T, P>(
    tube: usize,
    op: &mut TubeOp<E, T, P>,
    in_queue: Receiver<E>,
    out_queue: SyncSender<P::Output>,
) -> Result<(), PipelineError>
where
    E: Clone + Debug,
    T: Trainer<E>,
    P: Predictor<T::Model, E>,
{
    for e in in_queue {
        let out = op.process(&e).map_err(|source| PipelineError::Tube {
            tube,
            event: format!("{e:?}"),
            source,
        })?;
        if out_queue.send(out).is_err() {
            break;
        }
    }
    Ok(())
}

/// Where the splitter sent an event.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<E> {
    pub machine_id: MachineId,
    pub tube_id: usize,
    pub event: E,
}

pub trait Splitter<E> {
    fn split(&mut self, event: E) -> RoutingDecision<E>;
}

/// How many tube-ops the sensors are spread over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TubeCount {
    /// A new tube-op for every sensor.
    #[default]
    PerSensor,
    /// A fixed pool; each new sensor joins the tube-op serving the fewest
    /// sensors, ties to the lowest id.
    Fixed(usize),
}

/// Routes by sensor id. A sensor keeps its tube-op for the whole run.
#[derive(Debug, Clone, Default)]
pub struct SensorSplitter {
    tubes: TubeCount,
    routes: HashMap<SensorId, usize>,
    loads: Vec<usize>,
}

impl SensorSplitter {
    pub fn new(tubes: TubeCount) -> Self {
        let loads = match tubes {
            TubeCount::PerSensor => Vec::new(),
            TubeCount::Fixed(n) => vec![0; n],
        };
        Self {
            tubes,
            routes: HashMap::new(),
            loads,
        }
    }

    pub fn fixed(tube_count: usize) -> Self {
        Self::new(TubeCount::Fixed(tube_count))
    }

    /// Tube-op serving `sensor`, creating the route on first sight.
    pub fn route(&mut self, sensor: SensorId) -> usize {
        if let Some(&t) = self.routes.get(&sensor) {
            return t;
        }
        let t = match self.tubes {
            TubeCount::PerSensor => {
                self.loads.push(0);
                self.loads.len() - 1
            }
            TubeCount::Fixed(_) => self
                .loads
                .iter()
                .enumerate()
                .min_by_key(|&(i, &load)| (load, i))
                .map(|(i, _)| i)
                .expect("at least one tube-op"),
        };
        self.loads[t] += 1;
        self.routes.insert(sensor, t);
        t
    }

    /// Number of sensors routed to each tube-op.
    pub fn loads(&self) -> &[usize] {
        &self.loads
    }
}

impl Splitter<SensorEvent> for SensorSplitter {
    fn split(&mut self, event: SensorEvent) -> RoutingDecision<SensorEvent> {
        RoutingDecision {
            machine_id: 0,
            tube_id: self.route(event.sensor_id),
            event,
        }
    }
}

#[derive(Debug)]
struct MergeStream<O> {
    buffer: VecDeque<O>,
    /// Nothing older than this will arrive on the stream.
    frontier: Timestamp,
    closed: bool,
}

/// Incremental k-way merge of per-stream ordered outputs.
#[derive(Debug)]
pub struct Merger<O> {
    streams: Vec<MergeStream<O>>,
}

impl<O: Ordered> Merger<O> {
    pub fn new(streams: usize) -> Self {
        Self {
            streams: (0..streams)
                .map(|_| MergeStream {
                    buffer: VecDeque::new(),
                    frontier: 0,
                    closed: false,
                })
                .collect(),
        }
    }

    pub fn offer(&mut self, stream: usize, item: O) -> Result<(), PipelineError> {
        let s = &mut self.streams[stream];
        let t = item.timestamp();
        if t < s.frontier {
            return Err(PipelineError::OrderingViolation {
                stream,
                frontier: s.frontier,
                got: t,
            });
        }
        s.frontier = t;
        s.buffer.push_back(item);
        Ok(())
    }

    /// Promises that `stream` will offer nothing older than `watermark`.
    pub fn advance(&mut self, stream: usize, watermark: Timestamp) {
        let s = &mut self.streams[stream];
        s.frontier = s.frontier.max(watermark);
    }

    pub fn close(&mut self, stream: usize) {
        self.streams[stream].closed = true;
    }

    pub fn is_empty(&self) -> bool {
        self.streams.iter().all(|s| s.buffer.is_empty())
    }

    /// Moves every output that can no longer be preceded into `out`.
    pub fn drain_ready(&mut self, out: &mut Vec<O>) {
        let bound = self
            .streams
            .iter()
            .filter(|s| !s.closed)
            .map(|s| s.frontier)
            .min();
        let mut group = Vec::new();
        while let Some(t) = self
            .streams
            .iter()
            .filter_map(|s| s.buffer.front().map(Timestamped::timestamp))
            .min()
        {
            if bound.is_some_and(|b| t >= b) {
                break;
            }
            for s in &mut self.streams {
                while s.buffer.front().is_some_and(|o| o.timestamp() == t) {
                    group.push(s.buffer.pop_front().expect("nonempty buffer"));
                }
            }
            group.sort_by_key(Ordered::tie_key);
            out.append(&mut group);
        }
    }
}

/// Merges complete streams, each nondecreasing in timestamp.
pub fn merge<O: Ordered>(streams: Vec<Vec<O>>) -> Result<Vec<O>, PipelineError> {
    let mut m = Merger::new(streams.len());
    let total = streams.iter().map(Vec::len).sum();
    for (i, stream) in streams.into_iter().enumerate() {
        for item in stream {
            m.offer(i, item)?;
        }
        m.close(i);
    }
    let mut out = Vec::with_capacity(total);
    m.drain_ready(&mut out);
    Ok(out)
}

/// Worker pool and queue sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub threads: usize,
    /// Bound of each channel, in batches.
    pub queue_capacity: usize,
    /// Events routed between watermark flushes.
    pub batch_size: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            threads: 1,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("threads", self.threads),
            ("queue_capacity", self.queue_capacity),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Outputs and final tube-op states of an engine run.
pub struct EngineRun<O, Tube> {
    pub outputs: Vec<O>,
    /// Every tube-op that received an event, by id.
    pub tubes: Vec<(usize, Tube)>,
    pub wall_seconds: f64,
}

struct Batch<E> {
    events: Vec<(usize, E)>,
    watermark: Timestamp,
}

enum Report<O> {
    Outputs {
        worker: usize,
        items: Vec<O>,
        watermark: Timestamp,
    },
    Done {
        worker: usize,
    },
    Failed {
        error: PipelineError,
    },
}

type WorkerTubes<E, T, P> = Vec<Option<TubeOp<E, T, P>>>;

type EngineResult<E, T, P> =
    EngineRun<<P as Predictor<<T as Trainer<E>>::Model, E>>::Output, TubeOp<E, T, P>>;

/// Drives `input` through `splitter`, tube-ops built on demand by
/// `make_tube`, and the merger.
pub fn run_engine<E, S, T, P, F>(
    cfg: &EngineConfig,
    input: &[E],
    mut splitter: S,
    make_tube: F,
) -> Result<EngineResult<E, T, P>, PipelineError>
where
    E: Timestamped + Clone + Debug + Send + Sync,
    S: Splitter<E> + Send,
    T: Trainer<E>,
    P: Predictor<T::Model, E>,
    P::Output: Ordered + Send,
    F: Fn(usize) -> TubeOp<E, T, P> + Sync,
{
    cfg.validate()?;
    let threads = cfg.threads;
    let batch_size = cfg.batch_size;
    let make_tube = &make_tube;
    let started = Instant::now();

    let (outputs, split_result, worker_tubes, failure) = thread::scope(|s| {
        let (report_tx, report_rx) = mpsc::sync_channel::<Report<P::Output>>(cfg.queue_capacity);
        let mut senders = Vec::with_capacity(threads);
        let mut workers = Vec::with_capacity(threads);
        for worker in 0..threads {
            let (tx, rx) = mpsc::sync_channel::<Batch<E>>(cfg.queue_capacity);
            senders.push(tx);
            let report = report_tx.clone();
            workers.push(s.spawn(move || {
                let mut tubes: WorkerTubes<E, T, P> = Vec::new();
                for batch in rx {
                    let mut items = Vec::with_capacity(batch.events.len());
                    for (tube, e) in batch.events {
                        let slot = tube / threads;
                        if slot >= tubes.len() {
                            tubes.resize_with(slot + 1, || None);
                        }
                        let op = tubes[slot].get_or_insert_with(|| make_tube(tube));
                        match op.process(&e) {
                            Ok(o) => items.push(o),
                            Err(source) => {
                                let error = PipelineError::Tube {
                                    tube,
                                    event: format!("{e:?}"),
                                    source,
                                };
                                let _ = report.send(Report::Failed { error });
                                return tubes;
                            }
                        }
                    }
                    let msg = Report::Outputs {
                        worker,
                        items,
                        watermark: batch.watermark,
                    };
                    if report.send(msg).is_err() {
                        return tubes;
                    }
                }
                let _ = report.send(Report::Done { worker });
                tubes
            }));
        }
        drop(report_tx);

        let split = s.spawn(move || -> Result<(), PipelineError> {
            let mut pending: Vec<Vec<(usize, E)>> = (0..threads).map(|_| Vec::new()).collect();
            let flush = |pending: &mut Vec<Vec<(usize, E)>>, watermark: Timestamp| {
                senders.iter().zip(pending.iter_mut()).all(|(tx, buf)| {
                    let events = std::mem::take(buf);
                    tx.send(Batch { events, watermark }).is_ok()
                })
            };
            let mut previous: Option<Timestamp> = None;
            for (index, e) in input.iter().enumerate() {
                let t = e.timestamp();
                if let Some(p) = previous.filter(|&p| t < p) {
                    return Err(PipelineError::OutOfOrderInput {
                        index,
                        previous: p,
                        got: t,
                    });
                }
                previous = Some(t);
                let d = splitter.split(e.clone());
                pending[d.tube_id % threads].push((d.tube_id, d.event));
                if (index + 1) % batch_size == 0 && !flush(&mut pending, t) {
                    // a worker is gone; its report carries the error
                    return Ok(());
                }
            }
            if let Some(t) = previous {
                flush(&mut pending, t);
            }
            Ok(())
        });

        let mut merger = Merger::new(threads);
        let mut outputs = Vec::with_capacity(input.len());
        let mut failure = None;
        let mut open = threads;
        for report in report_rx.iter() {
            match report {
                Report::Outputs {
                    worker,
                    items,
                    watermark,
                } => {
                    let offered = items
                        .into_iter()
                        .try_for_each(|item| merger.offer(worker, item));
                    if let Err(e) = offered {
                        failure = Some(e);
                        break;
                    }
                    merger.advance(worker, watermark);
                }
                Report::Done { worker } => {
                    merger.close(worker);
                    open -= 1;
                }
                Report::Failed { error } => {
                    failure = Some(error);
                    break;
                }
            }
            merger.drain_ready(&mut outputs);
        }
        // unblocks any worker still sending
        drop(report_rx);
        if failure.is_none() && open > 0 {
            failure = Some(PipelineError::WorkerLost(threads - open));
        }

        let split_result = split
            .join()
            .unwrap_or_else(|p| std::panic::resume_unwind(p));
        let worker_tubes: Vec<WorkerTubes<E, T, P>> = workers
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect();
        (outputs, split_result, worker_tubes, failure)
    });
    let wall_seconds = started.elapsed().as_secs_f64();

    if let Some(e) = failure {
        return Err(e);
    }
    split_result?;
    let mut tubes: Vec<(usize, TubeOp<E, T, P>)> = worker_tubes
        .into_iter()
        .enumerate()
        .flat_map(|(worker, slots)| {
            slots
                .into_iter()
                .enumerate()
                .filter_map(move |(slot, op)| op.map(|op| (slot * threads + worker, op)))
        })
        .collect();
    tubes.sort_by_key(|(id, _)| *id);
    Ok(EngineRun {
        outputs,
        tubes,
        wall_seconds,
    })
}

/// Events processed and wall time of one pipeline run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub events_processed: u64,
    pub wall_seconds: f64,
    /// Events per second.
    pub throughput: f64,
}

impl RunMetrics {
    pub fn new(events_processed: u64, wall_seconds: f64) -> Self {
        let wall_seconds = wall_seconds.max(1e-9);
        Self {
            events_processed,
            wall_seconds,
            throughput: events_processed as f64 / wall_seconds,
        }
    }
}

/// Configuration of the anomaly-detection pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub threads: usize,
    pub queue_capacity: usize,
    pub batch_size: usize,
    pub tubes: TubeCount,
    pub order: Order,
    pub detector: AnomalyParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            threads: engine.threads,
            queue_capacity: engine.queue_capacity,
            batch_size: engine.batch_size,
            tubes: TubeCount::default(),
            order: Order::default(),
            detector: AnomalyParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            threads: self.threads,
            queue_capacity: self.queue_capacity,
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.engine().validate()?;
        if self.tubes == TubeCount::Fixed(0) {
            return Err(PipelineError::Config(
                "tube count must be at least 1".into(),
            ));
        }
        self.detector
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

pub type AnomalyTube = TubeOp<SensorEvent, SensorModels, AnomalyPredictor>;

/// Ordered detections, metrics and final per-sensor models of a run.
#[derive(Debug)]
pub struct PipelineRun {
    pub detections: Vec<DetectionEvent>,
    pub metrics: RunMetrics,
    /// Sorted by sensor id.
    pub models: Vec<AnomalyModel>,
}

pub fn run_pipeline(
    cfg: &PipelineConfig,
    input: &[SensorEvent],
) -> Result<PipelineRun, PipelineError> {
    cfg.validate()?;
    let models =
        SensorModels::new(cfg.detector).map_err(|e| PipelineError::Config(e.to_string()))?;
    let order = cfg.order;
    let run = run_engine(&cfg.engine(), input, SensorSplitter::new(cfg.tubes), |_| {
        TubeOp::new(models.clone(), AnomalyPredictor, order)
    })?;
    let mut models: Vec<AnomalyModel> = run
        .tubes
        .into_iter()
        .flat_map(|(_, op)| op.trainer.into_models())
        .collect();
    models.sort_by_key(AnomalyModel::sensor_id);
    Ok(PipelineRun {
        metrics: RunMetrics::new(run.outputs.len() as u64, run.wall_seconds),
        detections: run.outputs,
        models,
    })
}
