//! Globally optimal 1-D k-means.
//!
//! Optimal clusters of sorted scalars are contiguous runs, so the minimum
//! within-cluster SSE follows from a dynamic program over split points of
//! the sorted distinct values. The split index of the optimal last cluster
//! is monotone in the prefix length, which lets each DP layer be solved by
//! divide and conquer in `O(m log m)`.

use crate::error::{Error, Result};

/// Partition of the input values.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Cluster index per input value, in input order.
    pub labels: Vec<usize>,
    /// Cluster means, strictly increasing.
    pub centroids: Vec<f64>,
    pub sse: f64,
}

/// Weighted prefix sums over sorted distinct values, shifted by the global
/// mean to limit cancellation in `s2 - s1^2 / w`.
struct Prefix {
    shift: f64,
    w: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Prefix {
    fn new(xs: &[f64], ws: &[f64]) -> Self {
        let total: f64 = ws.iter().sum();
        let shift = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / total;
        let mut p = Prefix {
            shift,
            w: vec![0.0; xs.len() + 1],
            s1: vec![0.0; xs.len() + 1],
            s2: vec![0.0; xs.len() + 1],
        };
        for (i, (&x, &w)) in xs.iter().zip(ws).enumerate() {
            let d = x - shift;
            p.w[i + 1] = p.w[i] + w;
            p.s1[i + 1] = p.s1[i] + w * d;
            p.s2[i + 1] = p.s2[i] + w * d * d;
        }
        p
    }

    /// SSE of distinct values `[i, j)` around their mean.
    fn cost(&self, i: usize, j: usize) -> f64 {
        let w = self.w[j] - self.w[i];
        let s1 = self.s1[j] - self.s1[i];
        (self.s2[j] - self.s2[i] - s1 * s1 / w).max(0.0)
    }

    fn mean(&self, i: usize, j: usize) -> f64 {
        self.shift + (self.s1[j] - self.s1[i]) / (self.w[j] - self.w[i])
    }
}

/// Fills `cur[j]` for `j` in `[lo, hi]`, knowing the optimal split lies in
/// `[opt_lo, opt_hi]`.
#[allow(clippy::too_many_arguments)]
fn solve_layer(
    p: &Prefix,
    prev: &[f64],
    cur: &mut [f64],
    split: &mut [usize],
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = (f64::INFINITY, opt_lo);
    for i in opt_lo..=opt_hi.min(mid - 1) {
        let c = prev[i] + p.cost(i, mid);
        if c < best.0 {
            best = (c, i);
        }
    }
    cur[mid] = best.0;
    split[mid] = best.1;
    if mid > lo {
        solve_layer(p, prev, cur, split, lo, mid - 1, opt_lo, best.1);
    }
    solve_layer(p, prev, cur, split, mid + 1, hi, best.1, opt_hi);
}

/// Exact k-means. With `d` distinct values and `d <= k` every distinct value
/// becomes its own centroid and the result has `d` clusters.
pub fn kmeans1d_exact(values: &[f64], k: usize) -> Result<Clustering> {
    if k < 1 {
        return Err(Error::usage("k-means needs k >= 1"));
    }
    if values.is_empty() {
        return Err(Error::usage("k-means needs at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("k-means input contains a non-finite value"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut xs: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    let mut distinct_of = vec![0usize; values.len()];
    for &i in &order {
        // -0.0 and 0.0 are one value
        if xs.last() != Some(&values[i]) {
            xs.push(values[i]);
            ws.push(0.0);
        }
        *ws.last_mut().unwrap() += 1.0;
        distinct_of[i] = xs.len() - 1;
    }
    let m = xs.len();
    let p = Prefix::new(&xs, &ws);

    // cluster_of[d] for distinct index d; bounds[c] = start of cluster c
    let mut bounds = Vec::new();
    if m <= k {
        bounds.extend(0..m);
    } else {
        let mut prev: Vec<f64> = (0..=m).map(|j| if j == 0 { 0.0 } else { p.cost(0, j) }).collect();
        let mut splits = Vec::with_capacity(k - 1);
        for c in 2..=k {
            let mut cur = vec![f64::INFINITY; m + 1];
            let mut split = vec![0usize; m + 1];
            solve_layer(&p, &prev, &mut cur, &mut split, c, m, c - 1, m - 1);
            splits.push(split);
            prev = cur;
        }
        let mut j = m;
        let mut starts = Vec::with_capacity(k);
        for split in splits.iter().rev() {
            j = split[j];
            starts.push(j);
        }
        starts.push(0);
        starts.reverse();
        bounds = starts;
    }
    let ends: Vec<usize> = bounds.iter().skip(1).copied().chain([m]).collect();
    let mut cluster_of = vec![0usize; m];
    let mut centroids = Vec::with_capacity(bounds.len());
    let mut sse = 0.0;
    for (c, (&s, &e)) in bounds.iter().zip(&ends).enumerate() {
        cluster_of[s..e].iter_mut().for_each(|v| *v = c);
        if e - s == 1 {
            centroids.push(xs[s]);
        } else {
            centroids.push(p.mean(s, e));
            sse += p.cost(s, e);
        }
    }
    Ok(Clustering {
        labels: distinct_of.iter().map(|&d| cluster_of[d]).collect(),
        centroids,
        sse,
    })
}

/// SSE of `values` around the means of the groups given by `labels`,
/// computed directly.
pub fn partition_sse(values: &[f64], labels: &[usize]) -> f64 {
    let groups = labels.iter().max().map_or(0, |&m| m + 1);
    let mut sum = vec![0.0; groups];
    let mut count = vec![0.0; groups];
    for (&v, &l) in values.iter().zip(labels) {
        sum[l] += v;
        count[l] += 1.0;
    }
    values
        .iter()
        .zip(labels)
        .map(|(&v, &l)| {
            let d = v - sum[l] / count[l];
            d * d
        })
        .sum()
}
