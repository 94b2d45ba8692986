//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line (or
//! `[UNMET-PRECONDITION]` when the host cannot run the measurement as
//! specified) straight to stderr, so the lines show up without
//! `--nocapture`.

use std::io::Write as _;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tubeline::cli::{self, GenerateSpec};
use tubeline::detector::{
    seq_prob_exact, AnomalyModel, AnomalyParams, NaiveSequenceProb, ProbMode, SequenceProbState,
};
use tubeline::events::{self, GeneratorConfig, SensorEvent};
use tubeline::kmeans::{self, Clustering, WindowDelta};
use tubeline::markov::TransitionMatrix;
use tubeline::pipeline::{run_pipeline, PipelineConfig};
use tubeline::window::{EventWindow, WindowMode};

/// Keeps timing-sensitive criteria from sharing the CPU with each other.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

fn report(criterion: u32, outcome: &str, detail: &str) {
    let line = format!("[{outcome}] criterion {criterion}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn verdict(criterion: u32, pass: bool, detail: &str) {
    report(criterion, if pass { "PASS" } else { "FAIL" }, detail);
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Uniform, multimodal, or multimodal snapped to a coarse grid (duplicates).
struct ValueSource {
    kind: u8,
    modes: Vec<f64>,
}

impl ValueSource {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(2..=6);
        Self {
            kind: rng.random_range(0..3),
            modes: (0..n).map(|_| rng.random_range(-100.0..100.0)).collect(),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.kind {
            0 => rng.random_range(-50.0..50.0),
            1 => self.modes[rng.random_range(0..self.modes.len())] + rng.random_range(-3.0..3.0),
            _ => (self.modes[rng.random_range(0..self.modes.len())] + rng.random_range(-3.0..3.0))
                .round(),
        }
    }
}

fn stream(spec: &str) -> Vec<SensorEvent> {
    cli::parse_generate(spec).unwrap().generate().unwrap()
}

#[test]
fn criterion_1_incremental_clustering_matches_full() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let (mut updates, mut worst, mut moved) = (0usize, 0.0f64, 0usize);
    let mut mismatch = None;
    while updates < 10_000 && mismatch.is_none() {
        let k = rng.random_range(1..=8);
        let w = rng.random_range(10..=200u64);
        let src = ValueSource::random(&mut rng);
        let mut win = EventWindow::count_based(w).unwrap();
        let mut t = 0;
        for _ in 0..w {
            win.push_value(t, src.draw(&mut rng)).unwrap();
            t += 1;
        }
        let start = kmeans::init_clusters(&win, k).unwrap();
        let mut prev = kmeans::lloyd_full(&win, &start, 10).unwrap().clustering;
        for _ in 0..rng.random_range(50..=300) {
            let m = rng.random_range(1..=10);
            let v = src.draw(&mut rng);
            let ev = win.push_value(t, v).unwrap();
            t += 1;
            let delta = WindowDelta::slide(v, ev.iter().map(|e| e.1));
            let inc = kmeans::lloyd_incremental(&win, &prev, &delta, m).unwrap();
            let seed = Clustering::from_centers(&win, prev.centers().to_vec()).unwrap();
            let full = kmeans::lloyd_full(&win, &seed, m).unwrap();
            if inc.clustering.boundaries() != full.clustering.boundaries()
                || inc.clustering.k_effective() != full.clustering.k_effective()
            {
                mismatch = Some(format!("boundaries differ at update {updates}"));
                break;
            }
            for (a, b) in inc
                .clustering
                .centers()
                .iter()
                .zip(full.clustering.centers())
            {
                worst = worst.max(rel_diff(*a, *b));
            }
            moved += usize::from(!inc.reassigned.is_empty());
            prev = inc.clustering;
            updates += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = mismatch.is_none() && worst <= 1e-9 && secs < 60.0;
    verdict(
        1,
        pass,
        &format!(
            "{updates} updates, boundaries {}, max center rel diff {worst:.2e} (tol 1e-9), {moved} with reassignment, {secs:.1}s (limit 60s)",
            mismatch.as_deref().unwrap_or("identical")
        ),
    );
}

/// Cheapest contiguous partition of sorted `v` into at most `k` segments,
/// by enumerating every cut set.
fn exhaustive_wcss(v: &[f64], k: usize) -> f64 {
    let n = v.len();
    let cost = |seg: &[f64]| {
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        seg.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
    };
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << (n - 1)) {
        if mask.count_ones() as usize + 1 > k {
            continue;
        }
        let mut total = 0.0;
        let mut lo = 0;
        for i in 1..=n {
            if i == n || mask & (1 << (i - 1)) != 0 {
                total += cost(&v[lo..i]);
                lo = i;
            }
        }
        best = best.min(total);
    }
    best
}

#[test]
fn criterion_2_lloyd_never_beats_the_optimum() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=200usize);
        let k = rng.random_range(1..=8);
        let src = ValueSource::random(&mut rng);
        let mut win = EventWindow::count_based(n as u64).unwrap();
        for t in 0..n {
            win.push_value(t as u64, src.draw(&mut rng)).unwrap();
        }
        let lloyd = kmeans::lloyd_full(&win, &kmeans::init_clusters(&win, k).unwrap(), 100)
            .unwrap()
            .clustering;
        let opt = kmeans::optimal_1d(&win.sorted_values(), k).unwrap();
        if lloyd.wcss() < opt.wcss() - 1e-9 {
            violations += 1;
        }
    }
    let mut inexact = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=12usize);
        let k = rng.random_range(1..=6);
        let mut v: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..80) as f64 * 0.25)
            .collect();
        v.sort_by(f64::total_cmp);
        if kmeans::optimal_1d(&v, k).unwrap().wcss() != exhaustive_wcss(&v, k) {
            inexact += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        2,
        violations == 0 && inexact == 0 && secs < 30.0,
        &format!(
            "1000 instances n<=200: {violations} with wcss(Lloyd) < wcss(opt) - 1e-9; 1000 instances n<=12: {inexact} differ from exhaustive enumeration; {secs:.1}s (limit 30s)"
        ),
    );
}

#[test]
fn criterion_3_maintained_matrix_matches_rebuild() {
    let _g = serial();
    // C2 -> C3 -> C2 -> C2 -> C1, with C_i at index i-1
    let example = TransitionMatrix::rebuild_counts([1, 2, 1, 1, 0], 3).unwrap();
    let example_ok = example.probability(1, 0) == 1.0 / 3.0;

    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let (mut steps, mut rescans, mut bad) = (0u64, 0u64, None);
    while steps < 10_000 && bad.is_none() {
        let k = rng.random_range(1..=6);
        let time_mode = rng.random_bool(0.2);
        let w = rng.random_range(5..=60u64);
        let params = AnomalyParams {
            clusters: k,
            window: w,
            window_mode: if time_mode {
                WindowMode::Time
            } else {
                WindowMode::Count
            },
            max_iters: rng.random_range(1..=10),
            seq_len: rng.random_range(1..=4.min(w as usize - 1)),
            theta: 0.1,
            ..Default::default()
        };
        let src = ValueSource::random(&mut rng);
        let mut model = AnomalyModel::new(0, params).unwrap();
        let mut t = 0u64;
        for _ in 0..rng.random_range(50..=400) {
            t += if time_mode {
                rng.random_range(0..=3)
            } else {
                1
            };
            let e = SensorEvent::new(t, 0, 0, src.draw(&mut rng)).unwrap();
            model.train(&e).unwrap();
            steps += 1;
            let c = model.clustering().unwrap();
            let fresh: Vec<usize> = model
                .window()
                .iter_time_order()
                .map(|(_, v)| c.state_of(v))
                .collect();
            let states: Vec<usize> = model.states().collect();
            if states != fresh {
                bad = Some(format!("state sequence diverged at step {steps}"));
                break;
            }
            if *model.matrix() != TransitionMatrix::rebuild_counts(fresh, k).unwrap() {
                bad = Some(format!("matrix diverged at step {steps}"));
                break;
            }
        }
        rescans += model.stats().rescans;
    }
    verdict(
        3,
        bad.is_none() && example_ok,
        &format!(
            "{steps} trainer updates ({rescans} with row/column recount): {}; worked example P(C1|C2) = {} (expected 1/3)",
            bad.as_deref().unwrap_or("matrix == rebuild_counts after every step"),
            example.probability(1, 0)
        ),
    );
}

/// Random K-state matrix with a few zero cells.
fn frozen_matrix(rng: &mut ChaCha8Rng, k: usize) -> TransitionMatrix {
    let states: Vec<usize> = (0..5000)
        .scan(0usize, |s, _| {
            let mut next = rng.random_range(0..k);
            // forbid `0 -> 1` so one cell stays zero
            if *s == 0 && next == 1 {
                next = *s;
            }
            *s = next;
            Some(next)
        })
        .collect();
    TransitionMatrix::rebuild_counts(states, k).unwrap()
}

fn probability_equivalence(rng: &mut ChaCha8Rng, n: usize, pushes: usize) -> (usize, usize, f64) {
    let k = 6;
    let m = frozen_matrix(rng, k);
    let mut st = SequenceProbState::new(n, tubeline::detector::DEFAULT_REBUILD_EVERY);
    let mut seq = vec![rng.random_range(0..k)];
    let (mut zeros, mut mismatches, mut worst) = (0, 0, 0.0f64);
    for _ in 0..pushes {
        let s = rng.random_range(0..k);
        let f = m.probability(*seq.last().unwrap(), s);
        seq.push(s);
        let peek = st.peek_push(f);
        st.push(f).unwrap();
        if peek != st.probability()
            && rel_diff(peek.unwrap_or(-1.0), st.probability().unwrap_or(-1.0)) > 1e-12
        {
            mismatches += 1;
        }
        if seq.len() > n {
            let exact = seq_prob_exact(&m, &seq[seq.len() - n - 1..]);
            let inc = st.probability().unwrap();
            if exact == 0.0 {
                zeros += 1;
                if inc != 0.0 {
                    mismatches += 1;
                }
            } else {
                let d = rel_diff(inc, exact);
                worst = worst.max(d);
                if d > 1e-9 {
                    mismatches += 1;
                }
            }
        }
        if seq.len() > 4 * n + 2 {
            seq.drain(..seq.len() - n - 1);
        }
    }
    (zeros, mismatches, worst)
}

#[test]
fn criterion_4_sequence_probability() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let mut total = 0;
    let (mut zeros, mut mismatches, mut worst) = (0, 0, 0.0f64);
    for (n, pushes) in [(5, 1_000_000), (1, 100_000), (10, 100_000), (30, 100_000)] {
        let (z, mm, w) = probability_equivalence(&mut rng, n, pushes);
        zeros += z;
        mismatches += mm;
        worst = worst.max(w);
        total += pushes;
    }

    // Factors 1/3, 2/3, 3/4, then 3/4 enters and 1/3 leaves: the product
    // goes 1/6 -> 3/8, one divide-multiply step of ratio (3/4)/(1/3) = 9/4.
    let mut worked = SequenceProbState::new(3, 1024);
    for f in [1.0 / 3.0, 2.0 / 3.0, 3.0 / 4.0] {
        worked.push(f).unwrap();
    }
    let first = worked.probability().unwrap();
    worked.push(3.0 / 4.0).unwrap();
    let second = worked.probability().unwrap();
    let worked_ok = rel_diff(first, 1.0 / 6.0) <= 1e-15
        && rel_diff(second, 3.0 / 8.0) <= 1e-15
        && rel_diff(second / first, 9.0 / 4.0) <= 1e-15;

    let mut ops = Vec::new();
    let mut ops_ok = true;
    for (w, n) in [(8u64, 3usize), (100, 5), (1000, 10)] {
        let mut inc = SequenceProbState::new(n, 1024);
        let mut naive = NaiveSequenceProb::new(n);
        for i in 0..w {
            let f = 0.5 + 0.4 * ((i * 7919) % 13) as f64 / 13.0;
            inc.push(f).unwrap();
            naive.push(f);
        }
        let bound = n as u64 + 2 * (w - n as u64);
        let naive_ref = n as u64 * (w - n as u64);
        ops_ok &= inc.ops() <= bound && naive.ops() >= naive_ref;
        ops.push(format!(
            "(W={w},N={n}) incremental {} <= {bound}, naive {} (N(W-N) = {naive_ref})",
            inc.ops(),
            naive.ops()
        ));
    }
    verdict(
        4,
        mismatches == 0 && worked_ok && ops_ok && total >= 1_000_000 && zeros > 0,
        &format!(
            "{total} pushes ({zeros} zero-probability sequences), {mismatches} outside tol, max rel diff {worst:.2e} (tol 1e-9); worked example {first:.4} -> {second:.4} (ratio 9/4); ops {}",
            ops.join("; ")
        ),
    );
}

#[test]
fn criterion_5_thread_count_determinism() {
    let _g = serial();
    let started = Instant::now();
    let input = stream("sensors=16,events=50000,seed=2017,anomalies=3:500+9:1700+12:2900");
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for threads in [1, 2, 4, 8] {
        let cfg = PipelineConfig {
            threads,
            detector: AnomalyParams {
                window: 100,
                clusters: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let run = run_pipeline(&cfg, &input).unwrap();
        assert_eq!(run.detections.len(), input.len());
        let path = dir.path().join(format!("detections_{threads}.csv"));
        events::write_detections(std::fs::File::create(&path).unwrap(), &run.detections).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    let secs = started.elapsed().as_secs_f64();
    let identical = files.windows(2).all(|p| p[0] == p[1]);
    verdict(
        5,
        identical && secs < 120.0,
        &format!(
            "50000 events, W=100, K=5, 16 sensors, threads 1/2/4/8: files {} ({} bytes), {secs:.1}s (limit 120s)",
            if identical { "byte-identical" } else { "DIFFER" },
            files[0].len()
        ),
    );
}

fn throughput(cfg: &PipelineConfig, input: &[SensorEvent]) -> f64 {
    cli::run_repeated(cfg, input, 3).unwrap().1.throughput
}

fn bench_cfg(threads: usize, window: u64, clusters: usize) -> PipelineConfig {
    PipelineConfig {
        threads,
        detector: AnomalyParams {
            window,
            clusters,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn criterion_6_scalability() {
    let _g = serial();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let input = stream("sensors=16,events=32000,seed=6");
    let large = [1, 4].map(|t| throughput(&bench_cfg(t, 1000, 5), &input));
    let small = [1, 4].map(|t| throughput(&bench_cfg(t, 10, 5), &input));
    let (r_large, r_small) = (large[1] / large[0], small[1] / small[0]);
    let detail = format!(
        "W=1000: {:.0} -> {:.0} ev/s, ratio {r_large:.2} (need >= 1.5); W=10: {:.0} -> {:.0} ev/s, ratio {r_small:.2} (need >= 0.7); medians of 3; {cores} core(s) available",
        large[0], large[1], small[0], small[1]
    );
    if cores < 4 {
        report(
            6,
            "UNMET-PRECONDITION",
            &format!("requires >= 4 cores, not asserted. {detail}"),
        );
        return;
    }
    verdict(6, r_large >= 1.5 && r_small >= 0.7, &detail);
}

#[test]
fn criterion_7_throughput_floor() {
    let _g = serial();
    let input = stream("sensors=16,events=50000,seed=7");
    let tp = throughput(&bench_cfg(1, 100, 5), &input);
    let soft = if tp >= 500.0 { "met" } else { "NOT met" };
    verdict(
        7,
        tp >= 100.0,
        &format!("single thread W=100 K=5: {tp:.0} ev/s (hard floor 100, soft target 500 {soft})"),
    );
}

#[test]
fn criterion_8_end_to_end_detection() {
    let _g = serial();
    let n = 5;
    let base = GeneratorConfig {
        sensor_count: 4,
        events_per_sensor: 2000,
        seed: 8,
        regime_values: vec![10.0, 20.0, 30.0],
        dwell: 1,
        noise_amplitude: 0.5,
        anomaly_positions: Vec::new(),
    };
    // ten jumps, each where the regular level is not the top one, so the
    // jump (which clusters with the top level) forms an unseen transition
    let mut jumps = Vec::new();
    for i in 0..10u64 {
        let sensor = (i % 4) as u32;
        let mut ordinal = 250 + 170 * i;
        while (ordinal + u64::from(sensor)) % 3 == 2 {
            ordinal += 1;
        }
        jumps.push((sensor, ordinal));
    }
    let control = GenerateSpec {
        total_events: base.len(),
        config: base.clone(),
    }
    .generate()
    .unwrap();
    let injected = events::generate_stream(&GeneratorConfig {
        anomaly_positions: jumps.clone(),
        ..base.clone()
    })
    .unwrap();

    let mut cfg = PipelineConfig {
        threads: 2,
        detector: AnomalyParams {
            clusters: 3,
            window: 100,
            seq_len: n,
            theta: 0.5,
            prob_mode: ProbMode::Exact,
            ..Default::default()
        },
        ..Default::default()
    };
    let calibration = run_pipeline(&cfg, &control).unwrap();
    let min_legit = calibration
        .detections
        .iter()
        .filter_map(|d| d.probability)
        .fold(f64::INFINITY, f64::min);
    let theta = 0.5 * min_legit;

    cfg.detector.theta = theta;
    cfg.detector.prob_mode = ProbMode::Incremental;
    let control_flags = run_pipeline(&cfg, &control)
        .unwrap()
        .detections
        .iter()
        .filter(|d| d.anomaly)
        .count();
    let detections = run_pipeline(&cfg, &injected).unwrap().detections;
    let sensors = u64::from(base.sensor_count);
    let mut missed = Vec::new();
    let mut min_anomalous = f64::INFINITY;
    for &(sensor, ordinal) in &jumps {
        let start = ordinal * sensors + u64::from(sensor);
        let end = (ordinal + n as u64) * sensors + u64::from(sensor);
        let hit = detections
            .iter()
            .filter(|d| d.sensor_id == sensor && (start..=end).contains(&d.timestamp))
            .inspect(|d| min_anomalous = min_anomalous.min(d.probability.unwrap_or(1.0)))
            .any(|d| d.anomaly);
        if !hit {
            missed.push((sensor, ordinal));
        }
    }
    let stray = detections
        .iter()
        .filter(|d| d.anomaly)
        .filter(|d| {
            !jumps.iter().any(|&(s, o)| {
                d.sensor_id == s
                    && d.timestamp >= o * sensors + u64::from(s)
                    && d.timestamp <= (o + n as u64) * sensors + u64::from(s)
            })
        })
        .count();
    verdict(
        8,
        missed.is_empty() && control_flags == 0 && min_legit.is_finite(),
        &format!(
            "theta = 0.5 x min control probability {min_legit:.4} = {theta:.4}; {}/10 jumps flagged within N={n} events (lowest probability {min_anomalous:.2e}); {control_flags} flags on control; {stray} flags outside jump neighbourhoods",
            10 - missed.len()
        ),
    );
}

#[test]
fn criterion_9_throughput_versus_clusters() {
    let _g = serial();
    let input = stream("sensors=16,events=24000,seed=9");
    let tps: Vec<f64> = [2, 8, 32]
        .iter()
        .map(|&k| throughput(&bench_cfg(1, 100, k), &input))
        .collect();
    let ok = tps.windows(2).all(|p| p[1] <= 1.1 * p[0]);
    verdict(
        9,
        ok,
        &format!(
            "W=100, K=2/8/32: {:.0} / {:.0} / {:.0} ev/s (each <= 1.1 x previous), medians of 3",
            tps[0], tps[1], tps[2]
        ),
    );
}
