//! Sliding-window DRAM cache of bundled neuron rows.
//!
//! The cache keeps the union of the last `k` tokens' active sets resident in
//! one preallocated matrix (row = up_column ++ down_row). Advancing the
//! window deletes dropped-out neurons by overwriting their rows with the
//! current last rows (cost O(deleted x d_model) scalar copies, counted) and
//! appends newly needed neurons fetched from the store. The buffer never
//! reallocates.

use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::reader::{FetchStats, FlashReader};
use crate::scalar::Scalar;
use crate::store::{BundledRecord, LayerWeights};
use crate::trace::{windowed_union, ActivationTrace};

pub const DEFAULT_WINDOW_K: usize = 4;
pub const DEFAULT_REQ_HEADROOM: f64 = 0.10;

/// Where bundled records come from when the cache misses.
pub trait RecordSource<T: Scalar> {
    fn d_model(&self) -> usize;
    fn record_stride(&self) -> u64;
    /// Fetch the given records of `layer`, ascending by index.
    fn fetch_records(&self, layer: usize, indices: &[u32]) -> Result<(Vec<BundledRecord<T>>, FetchStats)>;
}

impl<T: Scalar> RecordSource<T> for FlashReader {
    fn d_model(&self) -> usize {
        self.manifest().d_model as usize
    }

    fn record_stride(&self) -> u64 {
        self.manifest().record_stride
    }

    fn fetch_records(&self, layer: usize, indices: &[u32]) -> Result<(Vec<BundledRecord<T>>, FetchStats)> {
        let plan = self.plan(layer, indices)?;
        self.fetch(&plan)
    }
}

/// In-memory source for tests and store-free simulation; charges one
/// record stride of I/O per fetched record.
pub struct TableSource<T> {
    pub layers: Vec<LayerWeights<T>>,
    pub record_stride: u64,
}

impl<T: Scalar> TableSource<T> {
    pub fn new(layers: Vec<LayerWeights<T>>, record_stride: u64) -> Self {
        Self { layers, record_stride }
    }
}

impl<T: Scalar> RecordSource<T> for TableSource<T> {
    fn d_model(&self) -> usize {
        self.layers[0].d_model()
    }

    fn record_stride(&self) -> u64 {
        self.record_stride
    }

    fn fetch_records(&self, layer: usize, indices: &[u32]) -> Result<(Vec<BundledRecord<T>>, FetchStats)> {
        let started = Instant::now();
        let weights = self
            .layers
            .get(layer)
            .ok_or(Error::LayerOutOfRange { layer, n_layers: self.layers.len() })?;
        let d_ffn = weights.d_ffn() as u32;
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= d_ffn {
                return Err(Error::IndexOutOfRange { index: i, d_ffn });
            }
            records.push(BundledRecord {
                neuron_index: i,
                up_column: weights.up.row(i as usize).to_vec(),
                down_row: weights.down.row(i as usize).to_vec(),
                bias: weights.bias[i as usize],
            });
        }
        let stats = FetchStats {
            bytes_read: indices.len() as u64 * self.record_stride,
            runs: indices.len(),
            records: indices.len(),
            io_seconds: started.elapsed().as_secs_f64(),
            bypass_active: false,
        };
        Ok((records, stats))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// Drop oldest window sets until the union fits the capacity.
    DynamicShrink,
    /// Fail the update, leaving the cache unchanged.
    Error,
}

/// Counters for one window update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CacheUpdateStats {
    pub deleted: u64,
    pub inserted: u64,
    /// Scalar copies performed while deleting rows.
    pub element_moves: u64,
    pub bytes_fetched: u64,
    pub io_seconds: f64,
    pub mem_seconds: f64,
    /// Window sets dropped by dynamic shrink beyond the normal advance.
    pub window_shrunk: u64,
}

impl CacheUpdateStats {
    pub fn absorb(&mut self, other: &CacheUpdateStats) {
        self.deleted += other.deleted;
        self.inserted += other.inserted;
        self.element_moves += other.element_moves;
        self.bytes_fetched += other.bytes_fetched;
        self.io_seconds += other.io_seconds;
        self.mem_seconds += other.mem_seconds;
        self.window_shrunk += other.window_shrunk;
    }
}

/// Borrowed views over the resident rows, no copies.
pub struct ResidentViews<'a, T> {
    matrix: &'a [T],
    d_model: usize,
    num_used: usize,
    pub bias: &'a [T],
    pub pointers: &'a [u32],
}

impl<'a, T> ResidentViews<'a, T> {
    pub fn num_used(&self) -> usize {
        self.num_used
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Up-projection weights of resident row `j` (first half of the row).
    pub fn up_row(&self, j: usize) -> &'a [T] {
        let w = 2 * self.d_model;
        &self.matrix[j * w..j * w + self.d_model]
    }

    /// Down-projection weights of resident row `j` (second half; the
    /// transpose interpretation of the matrix's right block).
    pub fn down_row(&self, j: usize) -> &'a [T] {
        let w = 2 * self.d_model;
        &self.matrix[j * w + self.d_model..(j + 1) * w]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheSnapshot {
    pub pointer: Vec<u32>,
    pub num_used: usize,
    pub last_k_active: Vec<Vec<u32>>,
    pub window_k: usize,
    pub capacity: usize,
}

pub struct NeuronCache<T> {
    /// capacity x 2 d_model; rows >= num_used are garbage, never read.
    matrix: Mat<T>,
    pointer: Vec<u32>,
    bias: Vec<T>,
    num_used: usize,
    last_k_active: VecDeque<Vec<u32>>,
    window_k: usize,
    capacity: usize,
    d_ffn: u32,
    overflow: OverflowPolicy,
}

impl<T: Scalar> NeuronCache<T> {
    pub fn new(
        d_model: usize,
        d_ffn: u32,
        capacity: usize,
        window_k: usize,
        overflow: OverflowPolicy,
    ) -> Result<Self> {
        if window_k == 0 || capacity == 0 || d_model == 0 {
            return Err(Error::InvalidArgument(
                "window_k, capacity and d_model must be >= 1".into(),
            ));
        }
        Ok(Self {
            matrix: Mat::zeros(capacity, 2 * d_model),
            pointer: vec![0; capacity],
            bias: vec![T::zero(); capacity],
            num_used: 0,
            last_k_active: VecDeque::with_capacity(window_k),
            window_k,
            capacity,
            d_ffn,
            overflow,
        })
    }

    pub fn num_used(&self) -> usize {
        self.num_used
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn window_k(&self) -> usize {
        self.window_k
    }

    pub fn d_model(&self) -> usize {
        self.matrix.cols() / 2
    }

    /// Buffer identity for no-reallocation checks.
    pub fn buffer_addr(&self) -> usize {
        self.matrix.as_slice().as_ptr() as usize
    }

    pub fn resident_set(&self) -> Vec<u32> {
        let mut set = self.pointer[..self.num_used].to_vec();
        set.sort_unstable();
        set
    }

    pub fn resident_views(&self) -> ResidentViews<'_, T> {
        ResidentViews {
            matrix: self.matrix.as_slice(),
            d_model: self.d_model(),
            num_used: self.num_used,
            bias: &self.bias[..self.num_used],
            pointers: &self.pointer[..self.num_used],
        }
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            pointer: self.pointer[..self.num_used].to_vec(),
            num_used: self.num_used,
            last_k_active: self.last_k_active.iter().cloned().collect(),
            window_k: self.window_k,
            capacity: self.capacity,
        }
    }

    /// Advance the window by one token: drop the oldest set, append
    /// `new_active`, delete dropped-out residents (swap-with-last, counted),
    /// fetch and append the missing ones.
    pub fn update_window<S: RecordSource<T>>(
        &mut self,
        new_active: &[u32],
        source: &S,
        layer: usize,
    ) -> Result<CacheUpdateStats> {
        let mut incoming = new_active.to_vec();
        incoming.sort_unstable();
        incoming.dedup();
        if let Some(&last) = incoming.last() {
            if last >= self.d_ffn {
                return Err(Error::IndexOutOfRange { index: last, d_ffn: self.d_ffn });
            }
        }

        // tentative window, committed only after the capacity check
        let mut window = self.last_k_active.clone();
        if window.len() == self.window_k {
            window.pop_front();
        }
        window.push_back(incoming);
        let mut shrunk = 0u64;
        let mut target = union_of(&window);
        while target.len() > self.capacity {
            match self.overflow {
                OverflowPolicy::Error => {
                    return Err(Error::CapacityOverflow {
                        needed: target.len(),
                        capacity: self.capacity,
                    });
                }
                OverflowPolicy::DynamicShrink => {
                    if window.len() == 1 {
                        return Err(Error::CapacityOverflow {
                            needed: target.len(),
                            capacity: self.capacity,
                        });
                    }
                    window.pop_front();
                    shrunk += 1;
                    target = union_of(&window);
                }
            }
        }
        self.last_k_active = window;

        let mut stats = CacheUpdateStats { window_shrunk: shrunk, ..Default::default() };
        let target_set: HashSet<u32> = target.iter().copied().collect();

        // delete phase: rows in descending order so swap sources are never
        // themselves pending deletion
        let mem_started = Instant::now();
        let mut delete_rows: Vec<usize> = (0..self.num_used)
            .filter(|&row| !target_set.contains(&self.pointer[row]))
            .collect();
        delete_rows.sort_unstable_by(|a, b| b.cmp(a));
        let w = 2 * self.d_model();
        for row in delete_rows {
            let last = self.num_used - 1;
            if row != last {
                let slice = self.matrix.as_mut_slice();
                let (lo, hi) = slice.split_at_mut(last * w);
                lo[row * w..row * w + w].copy_from_slice(&hi[..w]);
                self.pointer[row] = self.pointer[last];
                self.bias[row] = self.bias[last];
                stats.element_moves += w as u64;
            }
            self.num_used -= 1;
            stats.deleted += 1;
        }
        stats.mem_seconds += mem_started.elapsed().as_secs_f64();

        // fetch phase
        let resident: HashSet<u32> = self.pointer[..self.num_used].iter().copied().collect();
        let missing: Vec<u32> = target.iter().copied().filter(|i| !resident.contains(i)).collect();
        if !missing.is_empty() {
            let (records, fetch) = source.fetch_records(layer, &missing)?;
            if records.len() != missing.len() {
                return Err(Error::InvariantViolation(format!(
                    "source returned {} records for {} requested",
                    records.len(),
                    missing.len()
                )));
            }
            stats.bytes_fetched += fetch.bytes_read;
            stats.io_seconds += fetch.io_seconds;

            // insert phase: append after the last used row
            let insert_started = Instant::now();
            let d_model = self.d_model();
            for rec in records {
                let row = self.num_used;
                debug_assert!(row < self.capacity);
                let dst = self.matrix.row_mut(row);
                dst[..d_model].copy_from_slice(&rec.up_column);
                dst[d_model..].copy_from_slice(&rec.down_row);
                self.pointer[row] = rec.neuron_index;
                self.bias[row] = rec.bias;
                self.num_used += 1;
                stats.inserted += 1;
            }
            stats.mem_seconds += insert_started.elapsed().as_secs_f64();
        }

        debug_assert_eq!(self.resident_set(), target);
        Ok(stats)
    }

    /// Speculative-decoding variant: of the λ+1 draft-block sets, enter only
    /// the prefix ending at the anchor token round(α(λ+1)) (1-based), so the
    /// window ends where generation is expected to resume after verification.
    pub fn update_speculative<S: RecordSource<T>>(
        &mut self,
        draft_sets: &[Vec<u32>],
        acceptance_ratio: f64,
        source: &S,
        layer: usize,
    ) -> Result<CacheUpdateStats> {
        if draft_sets.len() < 2 {
            return Err(Error::InvalidArgument(
                "speculative update needs lambda >= 1, i.e. at least 2 draft sets".into(),
            ));
        }
        let lambda = draft_sets.len() - 1;
        let anchor = speculative_anchor(acceptance_ratio, lambda)?;
        let mut stats = CacheUpdateStats::default();
        for set in &draft_sets[..anchor] {
            stats.absorb(&self.update_window(set, source, layer)?);
        }
        Ok(stats)
    }

    /// Shuffle resident row order (pointers, biases and matrix rows move
    /// together). The resident set is unchanged; FFN output must not care.
    pub fn shuffle_rows(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 2 * self.d_model();
        for j in (1..self.num_used).rev() {
            let i = rng.random_range(0..=j);
            if i != j {
                self.pointer.swap(i, j);
                self.bias.swap(i, j);
                let slice = self.matrix.as_mut_slice();
                let (lo, hi) = slice.split_at_mut(j * w);
                lo[i * w..i * w + w].swap_with_slice(&mut hi[..w]);
            }
        }
    }

    #[cfg(test)]
    fn check_invariants(&self) {
        assert!(self.num_used <= self.capacity);
        let mut seen = HashSet::new();
        for &p in &self.pointer[..self.num_used] {
            assert!(seen.insert(p), "duplicate pointer {p}");
        }
        let expected = union_of(&self.last_k_active);
        assert_eq!(self.resident_set(), expected);
    }
}

fn union_of(window: &VecDeque<Vec<u32>>) -> Vec<u32> {
    let mut union: Vec<u32> = window.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    union
}

/// 1-based anchor token index round(α(λ+1)), clamped into the draft block.
pub fn speculative_anchor(alpha: f64, lambda: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    if lambda == 0 {
        return Err(Error::InvalidArgument("lambda must be >= 1".into()));
    }
    let anchor = (alpha * (lambda + 1) as f64).round() as usize;
    Ok(anchor.clamp(1, lambda + 1))
}

/// Capacity calibration: the largest windowed-union size seen on the trace,
/// plus headroom.
pub fn calibrate_capacity(trace: &ActivationTrace, layer: usize, k: usize, headroom: f64) -> Result<usize> {
    trace.validate()?;
    let sets = trace.layer_sets(layer)?;
    let max_union = (0..sets.len())
        .map(|t| windowed_union(&sets, t, k).len())
        .max()
        .unwrap_or(0);
    Ok(((max_union as f64) * (1.0 + headroom)).ceil() as usize)
}

/// Mean fraction of the next needed set already resident, per anchor
/// policy, under an accepted-draft simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnchorReuse {
    /// 1-based draft-block token the window ends at.
    pub anchor: usize,
    pub mean_reuse: f64,
}

/// Simulate speculative rounds on a trace with temporal locality and
/// measure, for every possible window anchor, how much of the post-
/// verification token's active set is already resident.
///
/// Each round drafts a block of λ+1 token positions. The verifier accepts
/// `m ~ Binomial(λ, α)` drafts; accepted drafts match the underlying trace,
/// rejected ones are replaced by uniform-random sets (the model went off
/// trajectory). The next needed set is the trace set right after the
/// accepted prefix. A window of `k` sets ending at block token `a` is
/// resident under anchor policy `a`; windows reach back into committed
/// (trace) sets before the block.
pub fn compare_anchor_policies(
    trace: &ActivationTrace,
    layer: usize,
    k: usize,
    lambda: usize,
    alpha: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<AnchorReuse>> {
    trace.validate()?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    if k == 0 || lambda == 0 || trials == 0 {
        return Err(Error::InvalidArgument("k, lambda and trials must be >= 1".into()));
    }
    let sets = trace.layer_sets(layer)?;
    let block = lambda + 1;
    // need: k committed tokens before the block, the block, and one token after
    if sets.len() < k + block + 2 {
        return Err(Error::WindowTooLong { k: k + block + 2, tokens: sets.len() });
    }
    let d_ffn = trace.d_ffn;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reuse_sum = vec![0.0f64; block];
    let mut counted = 0usize;

    for _ in 0..trials {
        let start = rng.random_range(k..sets.len() - block - 1);
        // accepted prefix length
        let mut m = 0usize;
        for _ in 0..lambda {
            if rng.random_bool(alpha) {
                m += 1;
            }
        }
        // block sets as the cache saw them while drafting
        let mean_size = sets[start].len().max(1);
        let block_sets: Vec<Vec<u32>> = (0..block)
            .map(|j| {
                if j < m {
                    sets[start + 1 + j].to_vec()
                } else {
                    // off-trajectory draft: no locality
                    rand::seq::index::sample(&mut rng, d_ffn as usize, mean_size.min(d_ffn as usize))
                        .into_iter()
                        .map(|i| i as u32)
                        .collect()
                }
            })
            .collect();
        let needed = sets[start + 1 + m];
        if needed.is_empty() {
            continue;
        }
        counted += 1;
        for anchor in 1..=block {
            // window of k sets ending at block token `anchor` (1-based)
            let mut resident: HashSet<u32> = HashSet::new();
            for back in 0..k {
                let pos = anchor as isize - 1 - back as isize;
                if pos >= 0 {
                    resident.extend(block_sets[pos as usize].iter().copied());
                } else {
                    // reaches into committed history before the block
                    let hist = (start as isize + 1 + pos) as usize;
                    resident.extend(sets[hist].iter().copied());
                }
            }
            let hit = needed.iter().filter(|i| resident.contains(i)).count();
            reuse_sum[anchor - 1] += hit as f64 / needed.len() as f64;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidArgument("all trials had empty needed sets".into()));
    }
    Ok((1..=block)
        .map(|anchor| AnchorReuse { anchor, mean_reuse: reuse_sum[anchor - 1] / counted as f64 })
        .collect())
}
