//! One-dimensional K-means over an [`EventWindow`].
//!
//! In one dimension with strictly ascending centers, nearest-center
//! assignment partitions the value order into contiguous segments, so a
//! clustering is fully described by its centers plus `k - 1` cut points
//! (cumulative segment sizes in value-rank order). [`lloyd_full`] reassigns
//! every value each iteration. [`lloyd_incremental`] produces the same result
//! but only revisits a cut point when one of its two neighbouring centers
//! moved, and then walks outward from the old cut until it meets a value
//! whose assignment did not change.
//!
//! Both routes compute centroids from the same value-index range statistics,
//! so on the same window they agree bit for bit.

use smallvec::SmallVec;
use thiserror::Error;

use crate::window::EventWindow;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("cannot cluster an empty window")]
    EmptyWindow,
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("iteration cap must be at least 1")]
    ZeroIterations,
    #[error("clustering does not match window: {0}")]
    Mismatch(String),
    #[error("window delta inconsistent with window: {0}")]
    InconsistentDelta(String),
}

/// Sorted centers plus the value-rank cut points of their segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    centers: Vec<f64>,
    boundaries: Vec<usize>,
    len: usize,
    wcss: f64,
}

/// The change a single window push applied to the value multiset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowDelta {
    pub inserted: Option<f64>,
    pub evicted: SmallVec<[f64; 1]>,
}

impl WindowDelta {
    pub fn insert(value: f64) -> Self {
        Self {
            inserted: Some(value),
            evicted: SmallVec::new(),
        }
    }

    pub fn slide(inserted: f64, evicted: impl IntoIterator<Item = f64>) -> Self {
        Self {
            inserted: Some(inserted),
            evicted: evicted.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.inserted.is_none() && self.evicted.is_empty()
    }
}

/// Result of a Lloyd run.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydOutcome {
    pub clustering: Clustering,
    pub iterations: usize,
    pub converged: bool,
    /// Number of value reads spent on assignment.
    pub touched: usize,
    /// Clusters whose membership differs from the starting assignment,
    /// ascending.
    pub reassigned: Vec<usize>,
}

/// Index of the nearest center, ties to the lower index. `centers` must be
/// strictly ascending.
///
/// Only the two centers bracketing `value` are compared. That keeps the
/// result monotone in `value` even where rounding would make two distant
/// centers look equally close.
pub fn nearest_center(centers: &[f64], value: f64) -> usize {
    let p = centers.partition_point(|&c| c < value);
    if p == 0 {
        0
    } else if p == centers.len() || value - centers[p - 1] <= centers[p] - value {
        p - 1
    } else {
        p
    }
}

/// Whether `value` goes to a center at or below `i` rather than above it.
fn belongs_left(centers: &[f64], i: usize, value: f64) -> bool {
    let (lo, hi) = (centers[i], centers[i + 1]);
    if value <= lo {
        true
    } else if value >= hi {
        false
    } else {
        value - lo <= hi - value
    }
}

impl Clustering {
    /// Assigns every window value to its nearest center. `centers` must be
    /// nonempty and strictly ascending.
    pub fn from_centers(w: &EventWindow, centers: Vec<f64>) -> Result<Self, ClusterError> {
        if centers.is_empty() {
            return Err(ClusterError::ZeroClusters);
        }
        if centers.windows(2).any(|p| p[0] >= p[1]) || centers.iter().any(|c| !c.is_finite()) {
            return Err(ClusterError::Mismatch(
                "centers must be finite and strictly ascending".into(),
            ));
        }
        let (boundaries, _) = assign_scan(w, &centers);
        let mut c = Self {
            centers,
            boundaries,
            len: w.len(),
            wcss: 0.0,
        };
        c.wcss = wcss(w, &c);
        Ok(c)
    }

    pub fn k_effective(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Cumulative segment sizes: segment `i` covers ranks
    /// `boundaries[i-1]..boundaries[i]`.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Number of values the clustering was computed over.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn wcss(&self) -> f64 {
        self.wcss
    }

    /// State (cluster index) of a value.
    pub fn state_of(&self, value: f64) -> usize {
        nearest_center(&self.centers, value)
    }

    /// Rank range `[lo, hi)` of segment `i`.
    pub fn segment(&self, i: usize) -> (usize, usize) {
        segment_of(&self.boundaries, self.len, i)
    }

    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.k_effective()).map(|i| self.segment(i))
    }

    fn check(&self, w: &EventWindow) -> Result<(), ClusterError> {
        if self.len != w.len() {
            return Err(ClusterError::Mismatch(format!(
                "clustering covers {} values, window holds {}",
                self.len,
                w.len()
            )));
        }
        if self.boundaries.len() + 1 != self.centers.len() {
            return Err(ClusterError::Mismatch("boundary count".into()));
        }
        Ok(())
    }
}

fn segment_of(boundaries: &[usize], len: usize, i: usize) -> (usize, usize) {
    let lo = if i == 0 { 0 } else { boundaries[i - 1] };
    let hi = boundaries.get(i).copied().unwrap_or(len);
    (lo, hi)
}

/// Full assignment pass: every value is read once.
fn assign_scan(w: &EventWindow, centers: &[f64]) -> (Vec<usize>, usize) {
    let k = centers.len();
    let mut sizes = vec![0usize; k];
    for (_, v) in w.iter_time_order() {
        sizes[nearest_center(centers, v)] += 1;
    }
    let mut boundaries = Vec::with_capacity(k.saturating_sub(1));
    let mut acc = 0;
    for &s in &sizes[..k - 1] {
        acc += s;
        boundaries.push(acc);
    }
    (boundaries, w.len())
}

/// Segment means, clamped into each segment's value range. Empty segments
/// keep their previous center.
fn update_centers(w: &EventWindow, boundaries: &[usize], previous: &[f64]) -> Vec<f64> {
    (0..previous.len())
        .map(|i| {
            let (lo, hi) = segment_of(boundaries, w.len(), i);
            if lo == hi {
                return previous[i];
            }
            let s = w
                .segment_stats(lo, hi)
                .expect("segment inside window bounds");
            s.mean.clamp(s.min, s.max)
        })
        .collect()
}

/// Initial clustering: the first `min(k, distinct)` distinct values in time
/// order, sorted, with nearest-center assignment.
pub fn init_clusters(w: &EventWindow, k: usize) -> Result<Clustering, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if w.is_empty() {
        return Err(ClusterError::EmptyWindow);
    }
    let mut centers: Vec<f64> = Vec::with_capacity(k);
    for (_, v) in w.iter_time_order() {
        if !centers.contains(&v) {
            centers.push(v);
            if centers.len() == k {
                break;
            }
        }
    }
    centers.sort_by(f64::total_cmp);
    Clustering::from_centers(w, centers)
}

/// Lloyd iteration from `start` until assignments repeat or `max_iters`
/// iterations have run.
///
/// Each iteration recomputes the centers as the means of the current
/// assignment, then reassigns every value. `start.boundaries()` must be the
/// nearest-center assignment of the window under `start.centers()`.
pub fn lloyd_full(
    w: &EventWindow,
    start: &Clustering,
    max_iters: usize,
) -> Result<LloydOutcome, ClusterError> {
    if max_iters == 0 {
        return Err(ClusterError::ZeroIterations);
    }
    if w.is_empty() {
        return Err(ClusterError::EmptyWindow);
    }
    start.check(w)?;
    let mut centers = start.centers.clone();
    let mut assignment = start.boundaries.clone();
    let mut touched = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        centers = update_centers(w, &assignment, &centers);
        let (next, reads) = assign_scan(w, &centers);
        touched += reads;
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    let reassigned = reassigned(&start.boundaries, &assignment);
    Ok(finish(
        w, centers, assignment, iterations, converged, touched, reassigned,
    ))
}

/// Clusters on either side of every cut that moved.
fn reassigned(start: &[usize], end: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (i, (a, b)) in start.iter().zip(end).enumerate() {
        if a != b {
            if out.last() != Some(&i) {
                out.push(i);
            }
            out.push(i + 1);
        }
    }
    out
}

fn finish(
    w: &EventWindow,
    centers: Vec<f64>,
    boundaries: Vec<usize>,
    iterations: usize,
    converged: bool,
    touched: usize,
    reassigned: Vec<usize>,
) -> LloydOutcome {
    debug_assert!(centers.windows(2).all(|p| p[0] < p[1]));
    let mut clustering = Clustering {
        centers,
        boundaries,
        len: w.len(),
        wcss: 0.0,
    };
    clustering.wcss = wcss(w, &clustering);
    LloydOutcome {
        clustering,
        iterations,
        converged,
        touched,
        reassigned,
    }
}

/// `prev` with the delta applied to its cut points: each inserted or evicted
/// value counts against its nearest previous center.
fn shift_boundaries(prev: &Clustering, delta: &WindowDelta) -> Result<Vec<usize>, ClusterError> {
    let mut b = prev.boundaries.clone();
    let mut sizes: Vec<usize> = prev.segments().map(|(lo, hi)| hi - lo).collect();
    for &v in &delta.evicted {
        let j = prev.state_of(v);
        if sizes[j] == 0 {
            return Err(ClusterError::InconsistentDelta(format!(
                "evicted value {v} maps to an empty cluster"
            )));
        }
        sizes[j] -= 1;
        for cut in &mut b[j..] {
            *cut -= 1;
        }
    }
    if let Some(v) = delta.inserted {
        let j = prev.state_of(v);
        sizes[j] += 1;
        for cut in &mut b[j..] {
            *cut += 1;
        }
    }
    Ok(b)
}

/// First rank whose value does not belong left of cut `i`, found by
/// galloping outward from the previous cut.
fn walk_cut(w: &EventWindow, centers: &[f64], i: usize, old: usize, touched: &mut usize) -> usize {
    let n = w.len();
    let mut left_of = |r: usize| {
        *touched += 1;
        belongs_left(centers, i, w.select(r).expect("rank inside window"))
    };
    if old < n && left_of(old) {
        // cut moves right: find the first rank past `old` that stays right
        let mut known_left = old;
        let mut step = 1;
        let mut hi = n;
        while known_left + step < n {
            let probe = known_left + step;
            if left_of(probe) {
                known_left = probe;
                step *= 2;
            } else {
                hi = probe;
                break;
            }
        }
        let mut lo = known_left + 1;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if left_of(mid) {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    } else if old > 0 && !left_of(old - 1) {
        // cut moves left: find the last rank before `old` that stays left
        let mut known_right = old - 1;
        let mut step = 1;
        let mut lo = 0;
        while known_right >= step {
            let probe = known_right - step;
            if left_of(probe) {
                lo = probe + 1;
                break;
            }
            known_right = probe;
            step *= 2;
        }
        let mut hi = known_right;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if left_of(mid) {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    } else {
        old
    }
}

/// Incremental Lloyd after `delta` has been applied to `w`.
///
/// Equivalent to `lloyd_full(w, from_centers(w, prev.centers()), max_iters)`.
pub fn lloyd_incremental(
    w: &EventWindow,
    prev: &Clustering,
    delta: &WindowDelta,
    max_iters: usize,
) -> Result<LloydOutcome, ClusterError> {
    if max_iters == 0 {
        return Err(ClusterError::ZeroIterations);
    }
    if w.is_empty() {
        return Err(ClusterError::EmptyWindow);
    }
    let expected = prev.len + usize::from(delta.inserted.is_some());
    if expected < delta.evicted.len() || expected - delta.evicted.len() != w.len() {
        return Err(ClusterError::InconsistentDelta(format!(
            "previous size {} with delta does not give window size {}",
            prev.len,
            w.len()
        )));
    }
    if let Some(v) = delta.inserted {
        if !w.contains(v) {
            return Err(ClusterError::InconsistentDelta(format!(
                "inserted value {v} is not in the window"
            )));
        }
    }
    let shifted = shift_boundaries(prev, delta)?;
    let mut assignment = shifted.clone();
    let mut basis = prev.centers.clone();
    let mut touched = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let centers = update_centers(w, &assignment, &basis);
        let mut next = assignment.clone();
        for (i, cut) in next.iter_mut().enumerate() {
            if centers[i] != basis[i] || centers[i + 1] != basis[i + 1] {
                *cut = walk_cut(w, &centers, i, *cut, &mut touched);
            }
        }
        basis = centers;
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    let reassigned = reassigned(&shifted, &assignment);
    Ok(finish(
        w, basis, assignment, iterations, converged, touched, reassigned,
    ))
}

/// Within-cluster sum of squares from segment range statistics.
pub fn wcss(w: &EventWindow, c: &Clustering) -> f64 {
    c.segments()
        .zip(&c.centers)
        .map(|((lo, hi), &center)| {
            w.segment_stats(lo, hi)
                .map(|s| s.sse_about(center))
                .unwrap_or(0.0)
        })
        .sum()
}

/// Globally optimal contiguous clustering of sorted `values` into at most
/// `k` segments, by dynamic programming in O(n^2 k). Intended as a reference
/// for tests and diagnostics.
#[allow(clippy::needless_range_loop)]
pub fn optimal_1d(values: &[f64], k: usize) -> Result<Clustering, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if values.is_empty() {
        return Err(ClusterError::EmptyWindow);
    }
    if values.windows(2).any(|p| p[0] > p[1]) {
        return Err(ClusterError::Mismatch("values must be sorted".into()));
    }
    let n = values.len();
    // shifted prefix sums keep the cost formula well conditioned
    let shift = values[n / 2];
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, &v) in values.iter().enumerate() {
        let x = v - shift;
        s1[i + 1] = s1[i] + x;
        s2[i + 1] = s2[i] + x * x;
    }
    let cost = |j: usize, i: usize| -> f64 {
        let m = (i - j) as f64;
        let a = s1[i] - s1[j];
        (s2[i] - s2[j] - a * a / m).max(0.0)
    };
    let k = k.min(n);
    // best[m][i]: optimal cost of the first i values in m+1 segments
    let mut best = vec![vec![f64::INFINITY; n + 1]; k];
    let mut cut = vec![vec![0usize; n + 1]; k];
    for i in 1..=n {
        best[0][i] = cost(0, i);
    }
    for m in 1..k {
        for i in (m + 1)..=n {
            let mut b = f64::INFINITY;
            let mut arg = m;
            for j in m..i {
                let c = best[m - 1][j] + cost(j, i);
                if c < b {
                    b = c;
                    arg = j;
                }
            }
            best[m][i] = b;
            cut[m][i] = arg;
        }
    }
    let mut segs = 0;
    for m in 1..k {
        if best[m][n] < best[segs][n] {
            segs = m;
        }
    }
    let mut boundaries = vec![0usize; segs];
    let mut i = n;
    for m in (1..=segs).rev() {
        i = cut[m][i];
        boundaries[m - 1] = i;
    }
    let mut centers = Vec::with_capacity(segs + 1);
    let mut total = 0.0;
    for s in 0..=segs {
        let (lo, hi) = segment_of(&boundaries, n, s);
        let seg = &values[lo..hi];
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        total += seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        centers.push(mean);
    }
    Ok(Clustering {
        centers,
        boundaries,
        len: n,
        wcss: total,
    })
}
