//! Ordered multiset of `f64` with rank, select and range statistics.
//!
//! A treap keyed by value, one node per distinct value with a multiplicity.
//! Every node caches the count, mean and centered sum of squares (M2) of its
//! subtree. Aggregates are recombined from children on every structural
//! change with the pairwise (Chan) update, so churn never accumulates drift
//! the way a running sum with add/subtract would.

use std::cmp::Ordering;

type Link = Option<usize>;

/// Count, mean and centered sum of squares of a set of values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeStats {
    pub count: usize,
    pub mean: f64,
    pub m2: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for RangeStats {
    fn default() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl RangeStats {
    fn single(value: f64, mult: usize) -> Self {
        Self {
            count: mult,
            mean: value,
            m2: 0.0,
            min: value,
            max: value,
        }
    }

    /// Pairwise combination of two disjoint sets.
    pub fn combine(self, other: Self) -> Self {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let n = self.count + other.count;
        let (na, nb, nn) = (self.count as f64, other.count as f64, n as f64);
        let delta = other.mean - self.mean;
        let mean = if delta == 0.0 {
            self.mean
        } else {
            self.mean + delta * (nb / nn)
        };
        Self {
            count: n,
            mean,
            m2: self.m2 + other.m2 + delta * delta * (na * nb / nn),
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    pub fn sum(&self) -> f64 {
        self.mean * self.count as f64
    }

    /// Sum of squared distances of the set's values to `center`.
    pub fn sse_about(&self, center: f64) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let d = self.mean - center;
        self.m2 + self.count as f64 * d * d
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: f64,
    mult: usize,
    priority: u64,
    left: Link,
    right: Link,
    distinct: usize,
    agg: RangeStats,
}

/// Ordered multiset of finite `f64` values.
#[derive(Debug, Clone)]
pub struct OrderStatTree {
    nodes: Vec<Node>,
    free: Vec<usize>,
    root: Link,
    rng: u64,
}

impl Default for OrderStatTree {
    fn default() -> Self {
        Self::new()
    }
}

impl OrderStatTree {
    pub fn new() -> Self {
        Self::with_seed(0x9E37_79B9_7F4A_7C15)
    }

    /// Priorities come from a xorshift stream seeded here, so two trees fed
    /// the same history have the same shape.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            free: Vec::new(),
            root: None,
            rng: seed | 1,
        }
    }

    pub fn len(&self) -> usize {
        self.size(self.root)
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    /// Number of distinct values stored.
    pub fn distinct(&self) -> usize {
        self.root.map_or(0, |r| self.nodes[r].distinct)
    }

    pub fn stats(&self) -> RangeStats {
        self.agg(self.root)
    }

    pub fn insert(&mut self, value: f64) {
        debug_assert!(value.is_finite());
        let root = self.root;
        self.root = Some(self.insert_at(root, value));
    }

    /// Removes one copy of `value`. Returns false when absent.
    pub fn remove(&mut self, value: f64) -> bool {
        let mut removed = false;
        let root = self.root;
        self.root = self.remove_at(root, value, &mut removed);
        removed
    }

    /// Multiplicity of `value`.
    pub fn count_of(&self, value: f64) -> usize {
        let mut cur = self.root;
        while let Some(i) = cur {
            let n = &self.nodes[i];
            match value.total_cmp(&n.value) {
                Ordering::Less => cur = n.left,
                Ordering::Greater => cur = n.right,
                Ordering::Equal => return n.mult,
            }
        }
        0
    }

    /// Number of stored values strictly less than `value`.
    pub fn rank(&self, value: f64) -> usize {
        self.partition_point(|v| v < value)
    }

    /// Number of stored values less than or equal to `value`.
    pub fn rank_le(&self, value: f64) -> usize {
        self.partition_point(|v| v <= value)
    }

    /// Value at rank `r` (0-based) in ascending order.
    pub fn select(&self, mut r: usize) -> Option<f64> {
        let mut cur = self.root;
        while let Some(i) = cur {
            let n = &self.nodes[i];
            let ls = self.size(n.left);
            if r < ls {
                cur = n.left;
            } else if r < ls + n.mult {
                return Some(n.value);
            } else {
                r -= ls + n.mult;
                cur = n.right;
            }
        }
        None
    }

    /// Number of values satisfying `pred`, where `pred` holds on a prefix of
    /// the ascending order and fails on the rest.
    pub fn partition_point(&self, mut pred: impl FnMut(f64) -> bool) -> usize {
        let mut acc = 0;
        let mut cur = self.root;
        while let Some(i) = cur {
            let n = &self.nodes[i];
            if pred(n.value) {
                acc += self.size(n.left) + n.mult;
                cur = n.right;
            } else {
                cur = n.left;
            }
        }
        acc
    }

    /// Statistics of the values with rank in `[lo, hi)`. Caller guarantees
    /// `lo <= hi <= len`.
    pub fn range_stats(&self, lo: usize, hi: usize) -> RangeStats {
        debug_assert!(lo <= hi && hi <= self.len());
        if lo >= hi {
            return RangeStats::default();
        }
        self.range_at(self.root, lo, hi)
    }

    /// In-order values, duplicates repeated.
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = Vec::new();
        let mut cur = self.root;
        loop {
            while let Some(i) = cur {
                stack.push(i);
                cur = self.nodes[i].left;
            }
            match stack.pop() {
                None => break,
                Some(i) => {
                    let n = &self.nodes[i];
                    out.extend(std::iter::repeat_n(n.value, n.mult));
                    cur = n.right;
                }
            }
        }
        out
    }

    fn size(&self, link: Link) -> usize {
        link.map_or(0, |i| self.nodes[i].agg.count)
    }

    fn agg(&self, link: Link) -> RangeStats {
        link.map_or(RangeStats::default(), |i| self.nodes[i].agg)
    }

    fn next_priority(&mut self) -> u64 {
        let mut x = self.rng;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.rng = x;
        x
    }

    fn alloc(&mut self, value: f64) -> usize {
        let node = Node {
            value,
            mult: 1,
            priority: self.next_priority(),
            left: None,
            right: None,
            distinct: 1,
            agg: RangeStats::single(value, 1),
        };
        if let Some(i) = self.free.pop() {
            self.nodes[i] = node;
            i
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    fn pull(&mut self, i: usize) {
        let (left, right, value, mult) = {
            let n = &self.nodes[i];
            (n.left, n.right, n.value, n.mult)
        };
        let agg = self
            .agg(left)
            .combine(RangeStats::single(value, mult))
            .combine(self.agg(right));
        let distinct = 1
            + left.map_or(0, |l| self.nodes[l].distinct)
            + right.map_or(0, |r| self.nodes[r].distinct);
        let n = &mut self.nodes[i];
        n.agg = agg;
        n.distinct = distinct;
    }

    fn rotate_right(&mut self, i: usize) -> usize {
        let l = self.nodes[i].left.expect("rotate_right needs a left child");
        self.nodes[i].left = self.nodes[l].right;
        self.nodes[l].right = Some(i);
        self.pull(i);
        self.pull(l);
        l
    }

    fn rotate_left(&mut self, i: usize) -> usize {
        let r = self.nodes[i]
            .right
            .expect("rotate_left needs a right child");
        self.nodes[i].right = self.nodes[r].left;
        self.nodes[r].left = Some(i);
        self.pull(i);
        self.pull(r);
        r
    }

    fn insert_at(&mut self, link: Link, value: f64) -> usize {
        let Some(i) = link else {
            return self.alloc(value);
        };
        match value.total_cmp(&self.nodes[i].value) {
            Ordering::Equal => {
                self.nodes[i].mult += 1;
                self.pull(i);
                i
            }
            Ordering::Less => {
                let child = self.nodes[i].left;
                let l = self.insert_at(child, value);
                self.nodes[i].left = Some(l);
                if self.nodes[l].priority > self.nodes[i].priority {
                    self.rotate_right(i)
                } else {
                    self.pull(i);
                    i
                }
            }
            Ordering::Greater => {
                let child = self.nodes[i].right;
                let r = self.insert_at(child, value);
                self.nodes[i].right = Some(r);
                if self.nodes[r].priority > self.nodes[i].priority {
                    self.rotate_left(i)
                } else {
                    self.pull(i);
                    i
                }
            }
        }
    }

    fn remove_at(&mut self, link: Link, value: f64, removed: &mut bool) -> Link {
        let i = link?;
        match value.total_cmp(&self.nodes[i].value) {
            Ordering::Less => {
                let child = self.nodes[i].left;
                self.nodes[i].left = self.remove_at(child, value, removed);
                self.pull(i);
                Some(i)
            }
            Ordering::Greater => {
                let child = self.nodes[i].right;
                self.nodes[i].right = self.remove_at(child, value, removed);
                self.pull(i);
                Some(i)
            }
            Ordering::Equal => {
                *removed = true;
                if self.nodes[i].mult > 1 {
                    self.nodes[i].mult -= 1;
                    self.pull(i);
                    return Some(i);
                }
                let (l, r) = (self.nodes[i].left, self.nodes[i].right);
                self.free.push(i);
                self.merge(l, r)
            }
        }
    }

    fn merge(&mut self, a: Link, b: Link) -> Link {
        match (a, b) {
            (None, x) | (x, None) => x,
            (Some(x), Some(y)) => {
                if self.nodes[x].priority > self.nodes[y].priority {
                    let xr = self.nodes[x].right;
                    self.nodes[x].right = self.merge(xr, Some(y));
                    self.pull(x);
                    Some(x)
                } else {
                    let yl = self.nodes[y].left;
                    self.nodes[y].left = self.merge(Some(x), yl);
                    self.pull(y);
                    Some(y)
                }
            }
        }
    }

    fn range_at(&self, link: Link, lo: usize, hi: usize) -> RangeStats {
        let Some(i) = link else {
            return RangeStats::default();
        };
        let n = &self.nodes[i];
        if lo == 0 && hi >= n.agg.count {
            return n.agg;
        }
        let ls = self.size(n.left);
        let mut out = RangeStats::default();
        if lo < ls {
            out = out.combine(self.range_at(n.left, lo, hi.min(ls)));
        }
        let (own_lo, own_hi) = (ls, ls + n.mult);
        let take = hi.min(own_hi).saturating_sub(lo.max(own_lo));
        if take > 0 {
            out = out.combine(RangeStats::single(n.value, take));
        }
        if hi > own_hi {
            out = out.combine(self.range_at(n.right, lo.saturating_sub(own_hi), hi - own_hi));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_stats(v: &[f64]) -> (f64, f64) {
        let sum: f64 = v.iter().sum();
        let mean = sum / v.len() as f64;
        let m2 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
        (sum, m2)
    }

    #[test]
    fn duplicates_share_a_node() {
        let mut t = OrderStatTree::new();
        for _ in 0..3 {
            t.insert(2.0);
        }
        assert_eq!(t.len(), 3);
        assert_eq!(t.distinct(), 1);
        assert_eq!(t.rank(2.0), 0);
        assert_eq!(t.rank_le(2.0), 3);
        assert!((0..3).all(|r| t.select(r) == Some(2.0)));
        assert!(t.remove(2.0));
        assert_eq!(t.len(), 2);
        assert!(!t.remove(5.0));
    }

    #[test]
    fn range_of_equal_values_has_zero_m2() {
        let mut t = OrderStatTree::new();
        for _ in 0..7 {
            t.insert(0.1);
        }
        let s = t.range_stats(0, 7);
        assert_eq!(s.mean, 0.1);
        assert_eq!(s.m2, 0.0);
    }

    proptest! {
        #[test]
        fn matches_sorted_vec(ops in prop::collection::vec((any::<bool>(), -50i32..50), 1..300)) {
            let mut t = OrderStatTree::new();
            let mut reference: Vec<f64> = Vec::new();
            for (ins, x) in ops {
                let v = x as f64 * 0.5;
                if ins || reference.is_empty() {
                    t.insert(v);
                    reference.push(v);
                } else {
                    let victim = reference[(x.unsigned_abs() as usize) % reference.len()];
                    prop_assert!(t.remove(victim));
                    let pos = reference.iter().position(|&r| r == victim).unwrap();
                    reference.remove(pos);
                }
                reference.sort_by(f64::total_cmp);
                prop_assert_eq!(t.values(), reference.clone());
                let mut d = reference.clone();
                d.dedup();
                prop_assert_eq!(t.distinct(), d.len());
            }
            for (r, &v) in reference.iter().enumerate() {
                prop_assert_eq!(t.select(r), Some(v));
                prop_assert!(t.rank(v) <= r);
            }
        }

        #[test]
        fn range_stats_match_naive(values in prop::collection::vec(-1e3f64..1e3, 1..200), a in 0usize..200, b in 0usize..200) {
            let mut t = OrderStatTree::new();
            for &v in &values {
                t.insert(v);
            }
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let (lo, hi) = (a.min(b) % (n + 1), a.max(b) % (n + 1));
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            let s = t.range_stats(lo, hi);
            prop_assert_eq!(s.count, hi - lo);
            if hi > lo {
                let seg = &sorted[lo..hi];
                let (sum, m2) = naive_stats(seg);
                let scale: f64 = seg.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
                prop_assert!((s.sum() - sum).abs() <= 1e-9 * scale);
                prop_assert!((s.m2 - m2).abs() <= 1e-9 * m2.max(1.0));
            }
        }
    }
}
