//! The case-study trainer and predictor: per-sensor window, clustering and
//! transition matrix, scored by the probability of the newest length-N
//! transition sequence.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::events::{DetectionEvent, SensorEvent, SensorId};
use crate::kmeans::{self, ClusterError, Clustering, WindowDelta};
use crate::markov::{EdgeDelta, MarkovError, TransitionMatrix};
use crate::pipeline::{BoxError, Phase, Predictor, Trainer};
use crate::window::{EventWindow, WindowError, WindowMode};

pub const DEFAULT_REBUILD_EVERY: u64 = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error("transition probability {0} is not in [0, 1]")]
    InvalidFactor(f64),
    #[error("event for sensor {got} routed to the model of sensor {expected}")]
    WrongSensor { expected: SensorId, got: SensorId },
    #[error("invalid detector parameters: {0}")]
    Config(String),
}

/// How the sequence probability is maintained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbMode {
    /// Divide out the oldest factor, multiply in the newest. Each factor is
    /// frozen at the matrix value in effect when its transition arrived.
    #[default]
    Incremental,
    /// Recompute all N factors under the current matrix on every query.
    Exact,
}

/// Model parameters shared by every sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyParams {
    /// K: clusters, and so Markov states.
    pub clusters: usize,
    /// W: window capacity (events, or time units in time mode).
    pub window: u64,
    pub window_mode: WindowMode,
    /// M: Lloyd iteration cap per update.
    pub max_iters: usize,
    /// N: transitions per scored sequence.
    pub seq_len: usize,
    /// Θ: anomaly when the sequence probability is strictly below this.
    pub theta: f64,
    pub prob_mode: ProbMode,
    /// Pushes between exact rebuilds of the running product.
    pub rebuild_every: u64,
}

impl Default for AnomalyParams {
    fn default() -> Self {
        Self {
            clusters: 5,
            window: 100,
            window_mode: WindowMode::Count,
            max_iters: 10,
            seq_len: 5,
            theta: 0.005,
            prob_mode: ProbMode::Incremental,
            rebuild_every: DEFAULT_REBUILD_EVERY,
        }
    }
}

impl AnomalyParams {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::Config(m.to_string()));
        if self.clusters == 0 {
            return bad("clusters must be at least 1");
        }
        if self.window == 0 {
            return bad("window must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if self.seq_len == 0 {
            return bad("seq_len must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad("theta must lie in [0, 1]");
        }
        if self.rebuild_every == 0 {
            return bad("rebuild_every must be positive");
        }
        if self.window_mode == WindowMode::Count && self.seq_len as u64 >= self.window {
            return bad("seq_len must be at most window - 1");
        }
        Ok(())
    }
}

/// Running product of the last N transition probabilities.
///
/// Zero factors are counted rather than multiplied in, so the product of the
/// nonzero factors can always be divided back out.
#[derive(Debug, Clone)]
pub struct SequenceProbState {
    seq_len: usize,
    factors: VecDeque<f64>,
    zero_count: usize,
    nonzero_product: f64,
    updates_since_rebuild: u64,
    rebuild_every: u64,
    ops: u64,
}

impl SequenceProbState {
    pub fn new(seq_len: usize, rebuild_every: u64) -> Self {
        assert!(seq_len >= 1 && rebuild_every >= 1);
        Self {
            seq_len,
            factors: VecDeque::with_capacity(seq_len + 1),
            zero_count: 0,
            nonzero_product: 1.0,
            updates_since_rebuild: 0,
            rebuild_every,
            ops: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn factors(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.factors.iter().copied()
    }

    pub fn zero_count(&self) -> usize {
        self.zero_count
    }

    pub fn nonzero_product(&self) -> f64 {
        self.nonzero_product
    }

    /// Multiplications and divisions spent on pushes, rebuilds excluded.
    pub fn ops(&self) -> u64 {
        self.ops
    }

    pub fn push(&mut self, factor: f64) -> Result<(), DetectorError> {
        if !(factor.is_finite() && (0.0..=1.0).contains(&factor)) {
            return Err(DetectorError::InvalidFactor(factor));
        }
        if self.factors.len() == self.seq_len {
            let old = self.factors.pop_front().expect("full queue");
            if old == 0.0 {
                self.zero_count -= 1;
            } else {
                self.nonzero_product /= old;
                self.ops += 1;
            }
        }
        if factor == 0.0 {
            self.zero_count += 1;
        } else {
            self.nonzero_product *= factor;
            self.ops += 1;
        }
        self.factors.push_back(factor);
        self.updates_since_rebuild += 1;
        if self.updates_since_rebuild >= self.rebuild_every {
            self.rebuild();
        }
        Ok(())
    }

    /// Recomputes the nonzero product exactly from the queue.
    pub fn rebuild(&mut self) {
        self.nonzero_product = self.factors.iter().filter(|&&f| f != 0.0).product();
        self.updates_since_rebuild = 0;
    }

    /// Replaces the queue with `factors` (oldest first, last N kept).
    pub fn refill(&mut self, factors: impl IntoIterator<Item = f64>) -> Result<(), DetectorError> {
        self.factors.clear();
        for f in factors {
            if !(f.is_finite() && (0.0..=1.0).contains(&f)) {
                return Err(DetectorError::InvalidFactor(f));
            }
            if self.factors.len() == self.seq_len {
                self.factors.pop_front();
            }
            self.factors.push_back(f);
        }
        self.zero_count = self.factors.iter().filter(|&&f| f == 0.0).count();
        self.rebuild();
        Ok(())
    }

    /// Π over the last N factors, `None` until N have been pushed.
    pub fn probability(&self) -> Option<f64> {
        if self.factors.len() < self.seq_len {
            None
        } else if self.zero_count > 0 {
            Some(0.0)
        } else {
            Some(self.nonzero_product.clamp(0.0, 1.0))
        }
    }

    /// Π as it would be after pushing `factor`, without pushing it.
    pub fn peek_push(&self, factor: f64) -> Option<f64> {
        let full = self.factors.len() == self.seq_len;
        if self.factors.len() + 1 < self.seq_len {
            return None;
        }
        let mut zeros = self.zero_count + usize::from(factor == 0.0);
        let mut product = self.nonzero_product;
        if full {
            let old = self.factors[0];
            if old == 0.0 {
                zeros -= 1;
            } else {
                product /= old;
            }
        }
        if zeros > 0 {
            return Some(0.0);
        }
        Some((product * factor).clamp(0.0, 1.0))
    }
}

/// Product of N fresh factors per sequence, for operation-count comparison.
#[derive(Debug, Clone)]
pub struct NaiveSequenceProb {
    seq_len: usize,
    factors: VecDeque<f64>,
    ops: u64,
}

impl NaiveSequenceProb {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            factors: VecDeque::with_capacity(seq_len + 1),
            ops: 0,
        }
    }

    pub fn ops(&self) -> u64 {
        self.ops
    }

    /// Pushes `factor` and, once N factors are held, returns their product.
    pub fn push(&mut self, factor: f64) -> Option<f64> {
        if self.factors.len() == self.seq_len {
            self.factors.pop_front();
        }
        self.factors.push_back(factor);
        if self.factors.len() < self.seq_len {
            return None;
        }
        let mut p = 1.0;
        for &f in &self.factors {
            p *= f;
            self.ops += 1;
        }
        Some(p)
    }
}

/// Π of the transitions along `states` under `matrix`.
pub fn seq_prob_exact(matrix: &TransitionMatrix, states: &[usize]) -> f64 {
    states
        .windows(2)
        .map(|p| matrix.probability(p[0], p[1]))
        .product()
}

/// Counters describing how much work training did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainStats {
    pub events: u64,
    pub reinits: u64,
    pub lloyd_iterations: u64,
    pub touched: u64,
    /// Updates that needed a row/column recount of the matrix.
    pub rescans: u64,
}

/// Window, clustering, transition matrix and sequence probability of one
/// sensor.
#[derive(Debug, Clone)]
pub struct AnomalyModel {
    sensor_id: SensorId,
    params: AnomalyParams,
    window: EventWindow,
    clustering: Option<Clustering>,
    /// State of every window event, oldest first.
    states: VecDeque<usize>,
    matrix: TransitionMatrix,
    prob: SequenceProbState,
    stats: TrainStats,
}

impl AnomalyModel {
    pub fn new(sensor_id: SensorId, params: AnomalyParams) -> Result<Self, DetectorError> {
        params.validate()?;
        Ok(Self {
            sensor_id,
            params,
            window: EventWindow::new(params.window, params.window_mode)?,
            clustering: None,
            states: VecDeque::new(),
            matrix: TransitionMatrix::new(params.clusters)?,
            prob: SequenceProbState::new(params.seq_len, params.rebuild_every),
            stats: TrainStats::default(),
        })
    }

    pub fn sensor_id(&self) -> SensorId {
        self.sensor_id
    }

    pub fn params(&self) -> &AnomalyParams {
        &self.params
    }

    pub fn window(&self) -> &EventWindow {
        &self.window
    }

    pub fn clustering(&self) -> Option<&Clustering> {
        self.clustering.as_ref()
    }

    pub fn states(&self) -> impl ExactSizeIterator<Item = usize> + '_ {
        self.states.iter().copied()
    }

    pub fn matrix(&self) -> &TransitionMatrix {
        &self.matrix
    }

    pub fn prob_state(&self) -> &SequenceProbState {
        &self.prob
    }

    pub fn stats(&self) -> TrainStats {
        self.stats
    }

    /// Absorbs `e`: window push, incremental clustering, matrix refresh and
    /// a push of the newest transition's probability.
    pub fn train(&mut self, e: &SensorEvent) -> Result<(), DetectorError> {
        if e.sensor_id != self.sensor_id {
            return Err(DetectorError::WrongSensor {
                expected: self.sensor_id,
                got: e.sensor_id,
            });
        }
        let evicted = self.window.push(e)?;
        self.stats.events += 1;

        let mut edges = EdgeDelta::default();
        for j in 0..evicted.len() {
            if j + 1 < self.states.len() {
                edges.evicted.push((self.states[j], self.states[j + 1]));
            }
        }
        self.states.drain(..evicted.len().min(self.states.len()));

        let needs_init = match &self.clustering {
            None => true,
            Some(c) => {
                c.k_effective() < self.params.clusters
                    && self.window.distinct_values() > c.k_effective()
            }
        };
        if needs_init {
            return self.reinitialize();
        }

        let prev = self.clustering.take().expect("initialized clustering");
        let value = e.value + 0.0;
        let delta = WindowDelta::slide(value, evicted.iter().map(|&(_, v)| v));
        let outcome =
            kmeans::lloyd_incremental(&self.window, &prev, &delta, self.params.max_iters)?;
        self.stats.lloyd_iterations += outcome.iterations as u64;
        self.stats.touched += outcome.touched as u64;
        let clustering = outcome.clustering;

        if outcome.reassigned.is_empty() {
            self.states.push_back(clustering.state_of(value));
        } else {
            self.stats.rescans += 1;
            self.states.clear();
            self.states.extend(
                self.window
                    .iter_time_order()
                    .map(|(_, v)| clustering.state_of(v)),
            );
        }
        self.clustering = Some(clustering);

        let n = self.states.len();
        if n >= 2 {
            edges.appended = Some((self.states[n - 2], self.states[n - 1]));
        }
        self.matrix
            .refresh(self.states.iter().copied(), &outcome.reassigned, &edges)?;
        if let Some((a, b)) = edges.appended {
            self.prob.push(self.matrix.probability(a, b))?;
        }
        Ok(())
    }

    /// Clusters the window from scratch and rebuilds everything derived from
    /// the states. Runs while fewer than K distinct values have been seen.
    fn reinitialize(&mut self) -> Result<(), DetectorError> {
        self.stats.reinits += 1;
        let start = kmeans::init_clusters(&self.window, self.params.clusters)?;
        let outcome = kmeans::lloyd_full(&self.window, &start, self.params.max_iters)?;
        self.stats.lloyd_iterations += outcome.iterations as u64;
        let clustering = outcome.clustering;
        self.states.clear();
        self.states.extend(
            self.window
                .iter_time_order()
                .map(|(_, v)| clustering.state_of(v)),
        );
        self.clustering = Some(clustering);
        self.matrix =
            TransitionMatrix::rebuild_counts(self.states.iter().copied(), self.params.clusters)?;
        let n = self.states.len();
        let skip = n.saturating_sub(self.params.seq_len + 1);
        let tail: Vec<usize> = self.states.iter().copied().skip(skip).collect();
        let factors: Vec<f64> = tail
            .windows(2)
            .map(|p| self.matrix.probability(p[0], p[1]))
            .collect();
        self.prob.refill(factors)
    }

    /// Π of the newest length-N sequence, `None` while undefined.
    pub fn sequence_probability(&self) -> Option<f64> {
        match self.params.prob_mode {
            ProbMode::Incremental => self.prob.probability(),
            ProbMode::Exact => {
                let n = self.params.seq_len;
                if self.states.len() < n + 1 {
                    return None;
                }
                let tail: Vec<usize> = self
                    .states
                    .iter()
                    .copied()
                    .skip(self.states.len() - n - 1)
                    .collect();
                Some(seq_prob_exact(&self.matrix, &tail))
            }
        }
    }

    /// Π with `e` appended as one more transition, scored under the current
    /// (not yet updated) model.
    pub fn sequence_probability_with(&self, e: &SensorEvent) -> Option<f64> {
        let clustering = self.clustering.as_ref()?;
        let &last = self.states.back()?;
        let next = clustering.state_of(e.value + 0.0);
        match self.params.prob_mode {
            ProbMode::Incremental => self.prob.peek_push(self.matrix.probability(last, next)),
            ProbMode::Exact => {
                let n = self.params.seq_len;
                if self.states.len() < n {
                    return None;
                }
                let mut tail: Vec<usize> = self
                    .states
                    .iter()
                    .copied()
                    .skip(self.states.len() - n)
                    .collect();
                tail.push(next);
                Some(seq_prob_exact(&self.matrix, &tail))
            }
        }
    }

    /// Scores `e`, which must already have been trained.
    pub fn predict(&self, e: &SensorEvent) -> DetectionEvent {
        self.detection(e, self.sequence_probability())
    }

    /// Scores `e` against the model before it has been trained on `e`.
    pub fn predict_untrained(&self, e: &SensorEvent) -> DetectionEvent {
        self.detection(e, self.sequence_probability_with(e))
    }

    fn detection(&self, e: &SensorEvent, probability: Option<f64>) -> DetectionEvent {
        DetectionEvent {
            sensor_id: e.sensor_id,
            timestamp: e.timestamp,
            probability,
            anomaly: is_anomaly(probability, self.params.theta),
        }
    }
}

/// Strict threshold: undefined probabilities are never anomalous.
pub fn is_anomaly(probability: Option<f64>, theta: f64) -> bool {
    probability.is_some_and(|p| p < theta)
}

/// Trainer holding one [`AnomalyModel`] per sensor.
#[derive(Debug, Clone)]
pub struct SensorModels {
    params: AnomalyParams,
    models: HashMap<SensorId, AnomalyModel>,
}

impl SensorModels {
    pub fn new(params: AnomalyParams) -> Result<Self, DetectorError> {
        params.validate()?;
        Ok(Self {
            params,
            models: HashMap::new(),
        })
    }

    pub fn get(&self, sensor: SensorId) -> Option<&AnomalyModel> {
        self.models.get(&sensor)
    }

    pub fn models(&self) -> impl Iterator<Item = &AnomalyModel> {
        self.models.values()
    }

    pub fn into_models(self) -> impl Iterator<Item = AnomalyModel> {
        self.models.into_values()
    }

    fn entry(&mut self, sensor: SensorId) -> Result<&mut AnomalyModel, DetectorError> {
        if !self.models.contains_key(&sensor) {
            self.models
                .insert(sensor, AnomalyModel::new(sensor, self.params)?);
        }
        Ok(self.models.get_mut(&sensor).expect("inserted above"))
    }
}

impl Trainer<SensorEvent> for SensorModels {
    type Model = AnomalyModel;

    fn model_for(&mut self, event: &SensorEvent) -> Result<&AnomalyModel, BoxError> {
        Ok(self.entry(event.sensor_id)?)
    }

    fn train(&mut self, event: &SensorEvent) -> Result<&AnomalyModel, BoxError> {
        let model = self.entry(event.sensor_id)?;
        model.train(event)?;
        Ok(model)
    }
}

/// Predictor emitting one [`DetectionEvent`] per event.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnomalyPredictor;

impl Predictor<AnomalyModel, SensorEvent> for AnomalyPredictor {
    type Output = DetectionEvent;

    fn predict(
        &mut self,
        model: &AnomalyModel,
        event: &SensorEvent,
        phase: Phase,
    ) -> Result<DetectionEvent, BoxError> {
        Ok(match phase {
            Phase::AfterTraining => model.predict(event),
            Phase::BeforeTraining => model.predict_untrained(event),
        })
    }
}
