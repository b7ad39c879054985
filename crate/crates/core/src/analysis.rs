//! Offline trace analytics: coactivation statistics, the closest-friend
//! bundling experiment, and per-layer sparsity/cached-rows reports. All
//! functions are pure over their trace inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{windowed_union, ActivationTrace};

/// How many friends (by descending coactivation) each neuron keeps.
pub const FRIEND_RANKS: usize = 8;

/// Denominator used when turning joint counts into probabilities. Ranking
/// always uses raw symmetric counts; this affects only reported values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FriendNormalization {
    /// count(i, j) / activity(i) — probability j fires given i fired.
    Anchor,
    /// count(i, j) / |i fired or j fired| — symmetric overlap.
    Jaccard,
}

impl FromStr for FriendNormalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(Self::Anchor),
            "jaccard" => Ok(Self::Jaccard),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalization {other:?}; expected anchor or jaccard"
            ))),
        }
    }
}

impl fmt::Display for FriendNormalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Anchor => "anchor",
            Self::Jaccard => "jaccard",
        })
    }
}

/// Joint-activation counts for one layer: a symmetric pair-count matrix,
/// per-neuron firing counts, and the top coactivated friends per neuron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoactivationStats {
    pub d_ffn: usize,
    pub tokens: usize,
    /// Per-neuron firing counts over the trace.
    pub activity: Vec<u64>,
    /// Per neuron: up to FRIEND_RANKS (index, joint count) pairs sorted by
    /// descending count, ties broken by ascending index. Neurons that never
    /// co-fired have empty lists.
    pub friends: Vec<Vec<(u32, u64)>>,
    /// Upper triangle (i < j) of the pair-count matrix, row-major.
    pair_counts: Vec<u32>,
}

fn tri_index(d_ffn: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < d_ffn);
    // offset of row i = i*d_ffn - i(i+1)/2 - i counts entries left of col i+1
    i * d_ffn - i * (i + 1) / 2 + (j - i - 1)
}

impl CoactivationStats {
    /// Joint count of tokens where both i and j fired. Symmetric by
    /// construction; 0 on the diagonal.
    pub fn coactivation(&self, i: usize, j: usize) -> u64 {
        assert!(i < self.d_ffn && j < self.d_ffn, "neuron index out of range");
        if i == j {
            return 0;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.pair_counts[tri_index(self.d_ffn, a, b)] as u64
    }

    /// Highest-coactivation partner, lowest index on ties; None if the
    /// neuron never co-fired with anything.
    pub fn closest_friend(&self, i: usize) -> Option<u32> {
        self.friends[i].first().map(|&(j, _)| j)
    }

    /// count(i, j) under the chosen denominator; 0 when the denominator is 0.
    pub fn probability(&self, i: usize, j: usize, norm: FriendNormalization) -> f64 {
        let joint = self.coactivation(i, j) as f64;
        let denom = match norm {
            FriendNormalization::Anchor => self.activity[i] as f64,
            FriendNormalization::Jaccard => {
                (self.activity[i] + self.activity[j]) as f64 - joint
            }
        };
        if denom == 0.0 {
            0.0
        } else {
            joint / denom
        }
    }

    /// Firing-count histogram over `bins` equal-width buckets spanning
    /// [0, tokens]; returns (bucket upper edge, neuron count) rows.
    pub fn activity_histogram(&self, bins: usize) -> Vec<(u64, usize)> {
        assert!(bins >= 1);
        let width = (self.tokens as u64).div_ceil(bins as u64).max(1);
        let mut hist = vec![0usize; bins];
        for &a in &self.activity {
            let b = ((a / width) as usize).min(bins - 1);
            hist[b] += 1;
        }
        hist.iter().enumerate().map(|(b, &n)| ((b as u64 + 1) * width, n)).collect()
    }

    /// Normalized coactivation of `anchor` with every other neuron, sorted
    /// descending: the per-neuron curve whose shape the histogram/log-log
    /// slope reports summarize.
    pub fn coactivation_curve(&self, anchor: usize, norm: FriendNormalization) -> Vec<f64> {
        let mut curve: Vec<f64> = (0..self.d_ffn)
            .filter(|&j| j != anchor)
            .map(|j| self.probability(anchor, j, norm))
            .collect();
        curve.sort_by(|a, b| b.partial_cmp(a).unwrap());
        curve
    }
}

/// Least-squares slope of log(value) against log(rank) over the positive
/// prefix of a descending curve. A heavy-tailed coactivation distribution
/// shows up as a steep negative slope; reported, never asserted.
pub fn log_log_slope(curve: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(r, &v)| (((r + 1) as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in &pts {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// Count joint activations for one layer across all tokens.
pub fn coactivation_matrix(trace: &ActivationTrace, layer: usize) -> Result<CoactivationStats> {
    trace.validate()?;
    let sets = trace.layer_sets(layer)?;
    let d_ffn = trace.d_ffn as usize;
    let mut activity = vec![0u64; d_ffn];
    let mut pair_counts = vec![0u32; d_ffn * (d_ffn - 1) / 2];
    for set in &sets {
        for (a, &i) in set.iter().enumerate() {
            activity[i as usize] += 1;
            for &j in &set[a + 1..] {
                pair_counts[tri_index(d_ffn, i as usize, j as usize)] += 1;
            }
        }
    }
    let mut friends = Vec::with_capacity(d_ffn);
    for i in 0..d_ffn {
        let mut row: Vec<(u32, u64)> = (0..d_ffn)
            .filter(|&j| j != i)
            .map(|j| {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                (j as u32, pair_counts[tri_index(d_ffn, a, b)] as u64)
            })
            .filter(|&(_, c)| c > 0)
            .collect();
        row.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        row.truncate(FRIEND_RANKS);
        friends.push(row);
    }
    Ok(CoactivationStats { d_ffn, tokens: sets.len(), activity, friends, pair_counts })
}

/// Outcome of simulating closest-friend bundling over a trace layer.
/// Every load transfers two records (anchor plus companion), except for
/// neurons with no coactivation history, which load alone. The ledger is
/// exact: bundled = baseline + duplicate, duplicate = repeat + offtarget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundlingCost {
    /// Bytes needed with one record per active neuron (no bundling).
    pub baseline_bytes: u64,
    /// Bytes transferred when every load carries the closest friend too.
    pub bundled_bytes: u64,
    /// bundled - baseline.
    pub duplicate_bytes: u64,
    /// Companion was active but already loaded this token.
    pub repeat_bytes: u64,
    /// Companion was not active this token.
    pub offtarget_bytes: u64,
}

impl BundlingCost {
    /// bundled / baseline; 1.0 when nothing was loaded at all.
    pub fn redundancy_factor(&self) -> f64 {
        if self.baseline_bytes == 0 {
            1.0
        } else {
            self.bundled_bytes as f64 / self.baseline_bytes as f64
        }
    }
}

/// Simulate loading each active neuron's record together with its closest
/// friend's. Within a token, a neuron already brought in as a companion is
/// not loaded again; companions that are inactive or already present are
/// the waste the ledger itemizes.
pub fn closest_friend_bundling_cost(
    trace: &ActivationTrace,
    layer: usize,
    stats: &CoactivationStats,
    record_bytes: u64,
) -> Result<BundlingCost> {
    if stats.d_ffn != trace.d_ffn as usize {
        return Err(Error::DimensionMismatch(format!(
            "stats cover {} neurons, trace has {}",
            stats.d_ffn, trace.d_ffn
        )));
    }
    let sets = trace.layer_sets(layer)?;
    if stats.tokens != sets.len() {
        return Err(Error::DimensionMismatch(format!(
            "stats cover {} tokens, trace has {}",
            stats.tokens,
            sets.len()
        )));
    }
    let mut baseline = 0u64;
    let mut bundled = 0u64;
    let mut repeat = 0u64;
    let mut offtarget = 0u64;
    let mut covered = vec![false; stats.d_ffn];
    let mut active = vec![false; stats.d_ffn];
    for set in &sets {
        baseline += set.len() as u64;
        for &i in *set {
            active[i as usize] = true;
        }
        for &i in *set {
            if covered[i as usize] {
                continue;
            }
            covered[i as usize] = true;
            bundled += 1;
            if let Some(friend) = stats.closest_friend(i as usize) {
                let f = friend as usize;
                bundled += 1;
                if !active[f] {
                    offtarget += 1;
                } else if covered[f] {
                    repeat += 1;
                }
                covered[f] = true;
            }
        }
        for &i in *set {
            active[i as usize] = false;
        }
        covered.fill(false);
    }
    Ok(BundlingCost {
        baseline_bytes: baseline * record_bytes,
        bundled_bytes: bundled * record_bytes,
        duplicate_bytes: (bundled - baseline) * record_bytes,
        repeat_bytes: repeat * record_bytes,
        offtarget_bytes: offtarget * record_bytes,
    })
}

/// One layer's sparsity time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    /// Fraction of d_ffn active at each token.
    pub active_fraction: Vec<f64>,
    /// Fraction of d_ffn the predictor selected, when a predicted trace
    /// was supplied.
    pub predicted_fraction: Option<Vec<f64>>,
    /// Fraction of d_ffn resident under a window of the last `window_k`
    /// selections (predicted when available, otherwise active).
    pub cached_fraction: Vec<f64>,
    pub mean_active_fraction: f64,
    pub mean_predicted_fraction: Option<f64>,
    pub mean_cached_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub window_k: usize,
    pub d_ffn: u32,
    pub layers: Vec<LayerSparsity>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-layer active fraction, predicted fraction, and cached-rows series.
/// `predicted`, when given, must have the same shape as `active`; the
/// cache series then follows the predicted sets, since those are what an
/// engine run keeps resident.
pub fn sparsity_report(
    active: &ActivationTrace,
    predicted: Option<&ActivationTrace>,
    window_k: usize,
) -> Result<SparsityReport> {
    active.validate()?;
    if window_k == 0 || window_k > active.token_count() {
        return Err(Error::WindowTooLong { k: window_k, tokens: active.token_count() });
    }
    if let Some(p) = predicted {
        p.validate()?;
        if p.n_layers != active.n_layers
            || p.d_ffn != active.d_ffn
            || p.token_count() != active.token_count()
        {
            return Err(Error::DimensionMismatch(
                "predicted trace shape differs from active trace".into(),
            ));
        }
    }
    let d = active.d_ffn as f64;
    let mut layers = Vec::with_capacity(active.n_layers);
    for l in 0..active.n_layers {
        let active_sets = active.layer_sets(l)?;
        let active_fraction: Vec<f64> =
            active_sets.iter().map(|s| s.len() as f64 / d).collect();
        let predicted_sets = match predicted {
            Some(p) => Some(p.layer_sets(l)?),
            None => None,
        };
        let predicted_fraction: Option<Vec<f64>> = predicted_sets
            .as_ref()
            .map(|sets| sets.iter().map(|s| s.len() as f64 / d).collect());
        let cache_driver = predicted_sets.as_ref().unwrap_or(&active_sets);
        let cached_fraction: Vec<f64> = (0..cache_driver.len())
            .map(|t| windowed_union(cache_driver, t, window_k).len() as f64 / d)
            .collect();
        layers.push(LayerSparsity {
            layer: l,
            mean_active_fraction: mean(&active_fraction),
            mean_predicted_fraction: predicted_fraction.as_deref().map(mean),
            mean_cached_fraction: mean(&cached_fraction),
            active_fraction,
            predicted_fraction,
            cached_fraction,
        });
    }
    Ok(SparsityReport { window_k, d_ffn: active.d_ffn, layers })
}

pub fn sparsity_csv(report: &SparsityReport) -> String {
    let mut out = String::from("layer,token,active_fraction,predicted_fraction,cached_fraction\n");
    for layer in &report.layers {
        for t in 0..layer.active_fraction.len() {
            let predicted = layer
                .predicted_fraction
                .as_ref()
                .map_or(String::new(), |p| format!("{:.6}", p[t]));
            out.push_str(&format!(
                "{},{},{:.6},{},{:.6}\n",
                layer.layer, t, layer.active_fraction[t], predicted, layer.cached_fraction[t]
            ));
        }
    }
    out
}

pub fn friends_csv(stats: &CoactivationStats, norm: FriendNormalization) -> String {
    let mut out = String::from("neuron,activity,rank,friend,joint_count,probability\n");
    for i in 0..stats.d_ffn {
        for (rank, &(j, count)) in stats.friends[i].iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                i,
                stats.activity[i],
                rank + 1,
                j,
                count,
                stats.probability(i, j as usize, norm)
            ));
        }
    }
    out
}
