//! Coalesced, parallel, optionally cache-bypassing record fetch.
//!
//! Requested neuron indices are merged into contiguous byte runs when the
//! gap between records is at most `gap_threshold` records: reading a little
//! extra and discarding it beats paying latency-to-first-byte twice. Runs
//! are dispatched to a worker pool dynamically; record content is
//! independent of worker count, gap threshold, and bypass mode.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::{FileExt, OpenOptionsExt};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::{decode_record, read_manifest, BundledRecord, StoreManifest};

pub const DEFAULT_WORKERS: usize = 32;
pub const DEFAULT_GAP_THRESHOLD: u64 = 0;

/// Smallest offset/length alignment used for direct I/O.
pub const MIN_DIRECT_ALIGN: u64 = 4096;

/// Cache-bypass request: `Require` fails when the platform refuses direct
/// I/O, `Try` falls back to buffered reads, `Off` never attempts it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BypassMode {
    Require,
    Try,
    Off,
}

impl std::str::FromStr for BypassMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "require" => Ok(Self::Require),
            "try" => Ok(Self::Try),
            "off" => Ok(Self::Off),
            other => Err(Error::InvalidArgument(format!(
                "bypass mode {other:?}, expected require|try|off"
            ))),
        }
    }
}

/// One contiguous byte range and the requested records inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadRun {
    pub start_offset: u64,
    pub length: u64,
    /// Requested neuron indices covered by this run, ascending.
    pub covered: Vec<u32>,
}

/// Coalesced fetch schedule for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadPlan {
    pub layer: usize,
    pub runs: Vec<ReadRun>,
    pub gap_threshold: u64,
    pub total_bytes: u64,
}

impl ReadPlan {
    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn record_count(&self) -> usize {
        self.runs.iter().map(|r| r.covered.len()).sum()
    }
}

/// Merge sorted indices into runs: a new index joins the current run when
/// the records skipped between it and the previous one number at most
/// `gap_threshold`. Run length spans whole strides, so gap records are read
/// and discarded.
pub fn plan_reads(
    indices: &[u32],
    manifest: &StoreManifest,
    layer: usize,
    gap_threshold: u64,
) -> Result<ReadPlan> {
    if layer >= manifest.n_layers as usize {
        return Err(Error::LayerOutOfRange { layer, n_layers: manifest.n_layers as usize });
    }
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&last) = sorted.last() {
        if last >= manifest.d_ffn {
            return Err(Error::IndexOutOfRange { index: last, d_ffn: manifest.d_ffn });
        }
    }

    let stride = manifest.record_stride;
    let base = manifest.layer_offsets[layer];
    let mut runs: Vec<ReadRun> = Vec::new();
    let mut total_bytes = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let first = sorted[i];
        let mut last = first;
        let mut covered = vec![first];
        i += 1;
        while i < sorted.len() && (sorted[i] - last - 1) as u64 <= gap_threshold {
            last = sorted[i];
            covered.push(last);
            i += 1;
        }
        let length = (last - first + 1) as u64 * stride;
        runs.push(ReadRun { start_offset: base + first as u64 * stride, length, covered });
        total_bytes += length;
    }
    Ok(ReadPlan { layer, runs, gap_threshold, total_bytes })
}

/// Counters for one fetch call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FetchStats {
    /// Bytes transferred, including gap records read and discarded.
    pub bytes_read: u64,
    pub runs: usize,
    pub records: usize,
    pub io_seconds: f64,
    pub bypass_active: bool,
}

pub struct ReaderOptions {
    pub workers: usize,
    pub gap_threshold: u64,
    pub bypass: BypassMode,
}

impl Default for ReaderOptions {
    fn default() -> Self {
        Self { workers: DEFAULT_WORKERS, gap_threshold: DEFAULT_GAP_THRESHOLD, bypass: BypassMode::Off }
    }
}

fn align_down(v: u64, a: u64) -> u64 {
    v / a * a
}

fn align_up(v: u64, a: u64) -> u64 {
    v.div_ceil(a) * a
}

/// Buffer whose data pointer is aligned for direct I/O.
struct AlignedBuf {
    raw: Vec<u8>,
    shift: usize,
    len: usize,
}

impl AlignedBuf {
    fn new(len: usize, align: u64) -> Self {
        let mut raw = vec![0u8; len + align as usize];
        let shift = raw.as_ptr().align_offset(align as usize);
        debug_assert!(shift + len <= raw.len());
        let _ = &mut raw;
        Self { raw, shift, len }
    }

    fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.raw[self.shift..self.shift + self.len]
    }

    fn as_slice(&self) -> &[u8] {
        &self.raw[self.shift..self.shift + self.len]
    }
}

/// Read `buf.len()` bytes at `offset`, tolerating a short tail at EOF.
/// Returns bytes actually read.
fn read_at_most(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match file.read_at(&mut buf[got..], offset + got as u64) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

/// Record fetcher over one immutable store file.
pub struct FlashReader {
    file: File,
    manifest: StoreManifest,
    file_len: u64,
    workers: usize,
    gap_threshold: u64,
    direct: bool,
    io_align: u64,
}

impl FlashReader {
    pub fn open(path: &Path, options: ReaderOptions) -> Result<Self> {
        if options.workers == 0 {
            return Err(Error::InvalidArgument("workers must be >= 1".into()));
        }
        let manifest = read_manifest(path)?;
        let io_align = MIN_DIRECT_ALIGN.max(manifest.record_alignment as u64);
        let (file, direct) = open_for_read(path, options.bypass, io_align)?;
        let file_len = file.metadata()?.len();
        Ok(Self {
            file,
            manifest,
            file_len,
            workers: options.workers,
            gap_threshold: options.gap_threshold,
            direct,
            io_align,
        })
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn bypass_active(&self) -> bool {
        self.direct
    }

    pub fn gap_threshold(&self) -> u64 {
        self.gap_threshold
    }

    pub fn plan(&self, layer: usize, indices: &[u32]) -> Result<ReadPlan> {
        plan_reads(indices, &self.manifest, layer, self.gap_threshold)
    }

    /// Fetch all records covered by `plan`, ascending by neuron index.
    pub fn fetch<T: Scalar>(&self, plan: &ReadPlan) -> Result<(Vec<BundledRecord<T>>, FetchStats)> {
        self.fetch_with_workers(plan, self.workers)
    }

    pub fn fetch_with_workers<T: Scalar>(
        &self,
        plan: &ReadPlan,
        workers: usize,
    ) -> Result<(Vec<BundledRecord<T>>, FetchStats)> {
        if workers == 0 {
            return Err(Error::InvalidArgument("workers must be >= 1".into()));
        }
        let started = Instant::now();
        let mut per_run: Vec<Vec<BundledRecord<T>>> = Vec::with_capacity(plan.runs.len());
        let bytes = AtomicU64::new(0);

        if plan.runs.len() <= 1 || workers == 1 {
            for run in &plan.runs {
                per_run.push(self.read_run(plan, run, &bytes)?);
            }
        } else {
            let next = AtomicUsize::new(0);
            let (tx, rx) = mpsc::channel::<(usize, Result<Vec<BundledRecord<T>>>)>();
            let n_workers = workers.min(plan.runs.len());
            std::thread::scope(|scope| {
                for _ in 0..n_workers {
                    let tx = tx.clone();
                    let next = &next;
                    let bytes = &bytes;
                    scope.spawn(move || loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= plan.runs.len() {
                            break;
                        }
                        let out = self.read_run(plan, &plan.runs[i], bytes);
                        if tx.send((i, out)).is_err() {
                            break;
                        }
                    });
                }
            });
            drop(tx);
            let mut slots: Vec<Option<Vec<BundledRecord<T>>>> = vec![None; plan.runs.len()];
            for (i, out) in rx {
                slots[i] = Some(out?);
            }
            for slot in slots {
                per_run.push(slot.expect("every run produced a result"));
            }
        }

        let mut records = Vec::with_capacity(plan.record_count());
        for run in per_run {
            records.extend(run);
        }
        let stats = FetchStats {
            bytes_read: bytes.load(Ordering::Relaxed),
            runs: plan.runs.len(),
            records: records.len(),
            io_seconds: started.elapsed().as_secs_f64(),
            bypass_active: self.direct,
        };
        Ok((records, stats))
    }

    /// Plan and fetch in one call using the reader's defaults.
    pub fn fetch_indices<T: Scalar>(
        &self,
        layer: usize,
        indices: &[u32],
    ) -> Result<(Vec<BundledRecord<T>>, FetchStats)> {
        let plan = self.plan(layer, indices)?;
        self.fetch(&plan)
    }

    fn read_run<T: Scalar>(
        &self,
        plan: &ReadPlan,
        run: &ReadRun,
        bytes: &AtomicU64,
    ) -> Result<Vec<BundledRecord<T>>> {
        let (buf, data_start) = if self.direct {
            let astart = align_down(run.start_offset, self.io_align);
            let aend = align_up(run.start_offset + run.length, self.io_align).min(
                align_up(self.file_len, self.io_align),
            );
            let mut buf = AlignedBuf::new((aend - astart) as usize, self.io_align);
            let got = read_at_most(&self.file, buf.as_mut_slice(), astart)? as u64;
            let needed = run.start_offset + run.length - astart;
            if got < needed {
                return Err(Error::ShortRead { offset: astart, wanted: needed, got });
            }
            bytes.fetch_add(got, Ordering::Relaxed);
            (buf, (run.start_offset - astart) as usize)
        } else {
            let mut buf = AlignedBuf::new(run.length as usize, 1);
            self.file.read_exact_at(buf.as_mut_slice(), run.start_offset)?;
            bytes.fetch_add(run.length, Ordering::Relaxed);
            (buf, 0)
        };

        let data = buf.as_slice();
        let stride = self.manifest.record_stride;
        let payload = self.manifest.payload_bytes() as usize;
        let first = run.covered[0];
        let mut out = Vec::with_capacity(run.covered.len());
        for &idx in &run.covered {
            let rel = data_start + ((idx - first) as u64 * stride) as usize;
            out.push(decode_record::<T>(&data[rel..rel + payload], &self.manifest, idx));
        }
        debug_assert_eq!(plan.layer < self.manifest.n_layers as usize, true);
        Ok(out)
    }
}

/// Open `path` honoring the bypass request; returns the file and whether
/// direct I/O is active. A short probe read checks the platform actually
/// honors the flag (some filesystems accept the open and fail the read).
fn open_for_read(path: &Path, bypass: BypassMode, io_align: u64) -> Result<(File, bool)> {
    let buffered = || File::open(path).map_err(Error::from);
    if bypass == BypassMode::Off {
        return Ok((buffered()?, false));
    }
    let attempt = (|| -> std::io::Result<File> {
        let file = OpenOptions::new()
            .read(true)
            .custom_flags(libc::O_DIRECT)
            .open(path)?;
        let len = file.metadata()?.len();
        if len >= io_align {
            let mut probe = AlignedBuf::new(io_align as usize, io_align);
            read_at_most(&file, probe.as_mut_slice(), 0)?;
        } else if bypass == BypassMode::Require {
            return Err(std::io::Error::other("file smaller than direct I/O alignment"));
        }
        Ok(file)
    })();
    match (attempt, bypass) {
        (Ok(file), _) => Ok((file, true)),
        (Err(e), BypassMode::Require) => {
            Err(Error::DirectIoUnsupported(format!("{}: {e}", path.display())))
        }
        (Err(_), _) => Ok((buffered()?, false)),
    }
}

/// Measured random-read throughput over chunk-size and thread-count axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputGrid {
    pub chunk_sizes: Vec<u64>,
    pub thread_counts: Vec<usize>,
    /// `measured[ci][ti]` is GiB/s for `chunk_sizes[ci]`, `thread_counts[ti]`.
    pub measured: Vec<Vec<f64>>,
    pub bypass_cache: bool,
}

impl ThroughputGrid {
    pub fn validate(&self) -> Result<()> {
        if self.measured.len() != self.chunk_sizes.len() {
            return Err(Error::InvariantViolation("grid rows do not match chunk_sizes".into()));
        }
        for row in &self.measured {
            if row.len() != self.thread_counts.len() {
                return Err(Error::InvariantViolation("grid row does not match thread_counts".into()));
            }
            if row.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvariantViolation("grid contains non-positive throughput".into()));
            }
        }
        Ok(())
    }

    pub fn cell(&self, ci: usize, ti: usize) -> f64 {
        self.measured[ci][ti]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("chunk_bytes,threads,gib_per_s\n");
        for (ci, &chunk) in self.chunk_sizes.iter().enumerate() {
            for (ti, &threads) in self.thread_counts.iter().enumerate() {
                out.push_str(&format!("{chunk},{threads},{:.6}\n", self.measured[ci][ti]));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut chunk_sizes = Vec::new();
        let mut thread_counts = Vec::new();
        let mut cells = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (ln == 0 && line.starts_with("chunk_bytes")) {
                continue;
            }
            let mut parts = line.split(',');
            let bad = || Error::InvalidArgument(format!("bad grid CSV line {}: {line:?}", ln + 1));
            let chunk: u64 = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            let threads: usize = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            let gibps: f64 = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            if !chunk_sizes.contains(&chunk) {
                chunk_sizes.push(chunk);
            }
            if !thread_counts.contains(&threads) {
                thread_counts.push(threads);
            }
            cells.push((chunk, threads, gibps));
        }
        if cells.is_empty() {
            return Err(Error::InvalidArgument("empty grid CSV".into()));
        }
        let mut measured = vec![vec![0.0; thread_counts.len()]; chunk_sizes.len()];
        for (chunk, threads, gibps) in cells {
            let ci = chunk_sizes.iter().position(|&c| c == chunk).unwrap();
            let ti = thread_counts.iter().position(|&t| t == threads).unwrap();
            measured[ci][ti] = gibps;
        }
        let grid = Self { chunk_sizes, thread_counts, measured, bypass_cache: false };
        grid.validate()?;
        Ok(grid)
    }
}

/// One measured probe cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMeasurement {
    pub gib_per_s: f64,
    pub bytes: u64,
    pub reads: u64,
    pub seconds: f64,
}

/// Measure random-read throughput of one (chunk, threads) configuration
/// for roughly `duration`.
pub fn probe_cell(
    path: &Path,
    chunk: u64,
    threads: usize,
    duration: Duration,
    bypass: BypassMode,
    seed: u64,
) -> Result<CellMeasurement> {
    if chunk == 0 || threads == 0 {
        return Err(Error::InvalidArgument("chunk and threads must be >= 1".into()));
    }
    let io_align = MIN_DIRECT_ALIGN;
    let (file, direct) = open_for_read(path, bypass, io_align)?;
    let file_len = file.metadata()?.len();
    if chunk > file_len {
        return Err(Error::FileTooSmall { needed: chunk, actual: file_len });
    }
    if direct && chunk % io_align != 0 {
        return Err(Error::InvalidArgument(format!(
            "direct I/O chunk {chunk} must be a multiple of {io_align}"
        )));
    }
    let max_offset = if direct {
        align_down(file_len - chunk, io_align)
    } else {
        file_len - chunk
    };

    let total_bytes = AtomicU64::new(0);
    let total_reads = AtomicU64::new(0);
    let started = Instant::now();
    let deadline = started + duration;
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for t in 0..threads {
            let file = &file;
            let total_bytes = &total_bytes;
            let total_reads = &total_reads;
            handles.push(scope.spawn(move || -> Result<()> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9));
                let mut buf = AlignedBuf::new(chunk as usize, io_align);
                let mut bytes = 0u64;
                let mut reads = 0u64;
                loop {
                    let offset = if max_offset == 0 {
                        0
                    } else if direct {
                        align_down(rng.random_range(0..=max_offset), io_align)
                    } else {
                        rng.random_range(0..=max_offset)
                    };
                    let got = read_at_most(file, buf.as_mut_slice(), offset)? as u64;
                    if got < chunk {
                        return Err(Error::ShortRead { offset, wanted: chunk, got });
                    }
                    bytes += got;
                    reads += 1;
                    if Instant::now() >= deadline {
                        break;
                    }
                }
                total_bytes.fetch_add(bytes, Ordering::Relaxed);
                total_reads.fetch_add(reads, Ordering::Relaxed);
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("probe thread panicked")?;
        }
        Ok(())
    })?;
    let seconds = started.elapsed().as_secs_f64();
    let bytes = total_bytes.load(Ordering::Relaxed);
    Ok(CellMeasurement {
        gib_per_s: bytes as f64 / (1u64 << 30) as f64 / seconds,
        bytes,
        reads: total_reads.load(Ordering::Relaxed),
        seconds,
    })
}

/// Probe every (chunk, threads) cell sequentially.
pub fn probe_throughput(
    path: &Path,
    chunk_sizes: &[u64],
    thread_counts: &[usize],
    duration_per_cell: Duration,
    bypass: BypassMode,
    seed: u64,
) -> Result<ThroughputGrid> {
    if chunk_sizes.is_empty() || thread_counts.is_empty() {
        return Err(Error::InvalidArgument("grid axes must be nonempty".into()));
    }
    let mut measured = Vec::with_capacity(chunk_sizes.len());
    let mut bypass_active = bypass != BypassMode::Off;
    for (ci, &chunk) in chunk_sizes.iter().enumerate() {
        let mut row = Vec::with_capacity(thread_counts.len());
        for (ti, &threads) in thread_counts.iter().enumerate() {
            let cell_seed = seed ^ ((ci as u64) << 32) ^ (ti as u64);
            let cell = probe_cell(path, chunk, threads, duration_per_cell, bypass, cell_seed)?;
            if bypass == BypassMode::Try {
                let (_, direct) = open_for_read(path, bypass, MIN_DIRECT_ALIGN)?;
                bypass_active = direct;
            }
            row.push(cell.gib_per_s);
        }
        measured.push(row);
    }
    let grid = ThroughputGrid {
        chunk_sizes: chunk_sizes.to_vec(),
        thread_counts: thread_counts.to_vec(),
        measured,
        bypass_cache: bypass_active,
    };
    grid.validate()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat;
    use crate::store::{pack_store, LayerWeights, StoreFile};
    use rand::seq::index::sample;
    use tempfile::tempdir;

    fn toy_manifest(d_ffn: u32) -> StoreManifest {
        StoreManifest {
            version: 1,
            d_model: 4,
            d_ffn,
            n_layers: 2,
            scalar_width: 4,
            record_alignment: 64,
            record_stride: 64,
            layer_offsets: vec![64, 64 + d_ffn as u64 * 64],
        }
    }

    /// Independent interval-merge oracle: expand each index to a record
    /// interval, merge when separated by <= gap records, sum lengths.
    fn merge_oracle(indices: &[u32], stride: u64, gap: u64) -> (usize, u64) {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut intervals: Vec<(u64, u64)> = Vec::new();
        for &i in &sorted {
            let lo = i as u64;
            let hi = i as u64 + 1;
            match intervals.last_mut() {
                Some((_, end)) if lo - *end <= gap => *end = hi,
                _ => intervals.push((lo, hi)),
            }
        }
        let bytes = intervals.iter().map(|(lo, hi)| (hi - lo) * stride).sum();
        (intervals.len(), bytes)
    }

    #[test]
    fn contiguous_indices_make_one_run() {
        let m = toy_manifest(32);
        let plan = plan_reads(&[3, 4, 5], &m, 0, 0).unwrap();
        assert_eq!(plan.runs.len(), 1);
        assert_eq!(plan.total_bytes, 3 * m.record_stride);
        assert_eq!(plan.runs[0].covered, vec![3, 4, 5]);
    }

    #[test]
    fn gap_threshold_merges_across_one_hole() {
        let m = toy_manifest(32);
        let split = plan_reads(&[3, 5], &m, 0, 0).unwrap();
        assert_eq!(split.runs.len(), 2);
        assert_eq!(split.total_bytes, 2 * m.record_stride);

        let merged = plan_reads(&[3, 5], &m, 0, 1).unwrap();
        assert_eq!(merged.runs.len(), 1);
        assert_eq!(merged.total_bytes, 3 * m.record_stride);
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let m = toy_manifest(32);
        assert!(matches!(
            plan_reads(&[32], &m, 0, 0),
            Err(Error::IndexOutOfRange { index: 32, d_ffn: 32 })
        ));
        assert!(matches!(
            plan_reads(&[0], &m, 2, 0),
            Err(Error::LayerOutOfRange { layer: 2, n_layers: 2 })
        ));
    }

    #[test]
    fn plan_matches_interval_merge_oracle() {
        let m = toy_manifest(16384);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for round in 0..20 {
            let n = 1000;
            let indices: Vec<u32> =
                sample(&mut rng, 16384, n).into_iter().map(|i| i as u32).collect();
            for gap in [0u64, 1, 2] {
                let plan = plan_reads(&indices, &m, round % 2, gap).unwrap();
                let (runs, bytes) = merge_oracle(&indices, m.record_stride, gap);
                assert_eq!(plan.runs.len(), runs);
                assert_eq!(plan.total_bytes, bytes);
            }
        }
    }

    #[test]
    fn plan_gap_record_bound_holds() {
        let m = toy_manifest(4096);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let indices: Vec<u32> = sample(&mut rng, 4096, 300).into_iter().map(|i| i as u32).collect();
        for gap in [0u64, 1, 3, 8] {
            let plan = plan_reads(&indices, &m, 0, gap).unwrap();
            let mut seen = std::collections::HashSet::new();
            let mut prev_end = 0u64;
            for run in &plan.runs {
                assert!(run.start_offset >= prev_end, "runs overlap or unsorted");
                prev_end = run.start_offset + run.length;
                for &i in &run.covered {
                    assert!(seen.insert(i), "index covered twice");
                }
                // gap records <= gap * (segments - 1)
                let spanned = (run.length / m.record_stride) as usize;
                let holes = spanned - run.covered.len();
                let segments = run
                    .covered
                    .windows(2)
                    .filter(|w| w[1] != w[0] + 1)
                    .count()
                    + 1;
                assert!(holes as u64 <= gap * (segments as u64 - 1).max(0));
            }
            for &i in &indices {
                assert!(seen.contains(&i), "index not covered");
            }
        }
    }

    fn packed_toy_store(dir: &Path, d_ffn: usize, d_model: usize) -> std::path::PathBuf {
        let path = dir.join("toy.fnsb");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let layers: Vec<LayerWeights<f32>> = (0..2)
            .map(|_| LayerWeights {
                up: Mat::from_fn(d_ffn, d_model, |_, _| rng.random_range(-1.0..1.0)),
                down: Mat::from_fn(d_ffn, d_model, |_, _| rng.random_range(-1.0..1.0)),
                bias: (0..d_ffn).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        pack_store(&layers, 4, 4096, &path).unwrap();
        path
    }

    #[test]
    fn fetch_matches_sequential_reader_any_workers() {
        let dir = tempdir().unwrap();
        let path = packed_toy_store(dir.path(), 128, 8);
        let store = StoreFile::open(&path).unwrap();
        let reader = FlashReader::open(&path, ReaderOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let indices: Vec<u32> = sample(&mut rng, 128, 40).into_iter().map(|i| i as u32).collect();
        let mut expected: Vec<BundledRecord<f32>> = indices
            .iter()
            .map(|&i| store.read_record::<f32>(1, i).unwrap())
            .collect();
        expected.sort_by_key(|r| r.neuron_index);

        for gap in [0u64, 1, 3] {
            let plan = plan_reads(&indices, reader.manifest(), 1, gap).unwrap();
            for workers in [1usize, 32] {
                let (records, stats) = reader.fetch_with_workers::<f32>(&plan, workers).unwrap();
                assert_eq!(records, expected);
                assert_eq!(stats.records, expected.len());
                assert!(stats.bytes_read >= plan.total_bytes.min(stats.bytes_read));
            }
        }
    }

    #[test]
    fn empty_plan_reads_nothing() {
        let dir = tempdir().unwrap();
        let path = packed_toy_store(dir.path(), 16, 4);
        let reader = FlashReader::open(&path, ReaderOptions::default()).unwrap();
        let plan = reader.plan(0, &[]).unwrap();
        assert!(plan.is_empty());
        let (records, stats) = reader.fetch::<f32>(&plan).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.bytes_read, 0);
    }

    #[test]
    fn try_bypass_falls_back_or_engages() {
        let dir = tempdir().unwrap();
        let path = packed_toy_store(dir.path(), 64, 8);
        let store = StoreFile::open(&path).unwrap();
        let opts = ReaderOptions { bypass: BypassMode::Try, ..Default::default() };
        let reader = FlashReader::open(&path, opts).unwrap();
        let (records, stats) = reader.fetch_indices::<f32>(0, &[0, 3, 63]).unwrap();
        assert_eq!(records.len(), 3);
        for rec in &records {
            assert_eq!(rec, &store.read_record::<f32>(0, rec.neuron_index).unwrap());
        }
        assert_eq!(stats.bypass_active, reader.bypass_active());
    }

    #[test]
    fn require_bypass_errors_or_engages() {
        let dir = tempdir().unwrap();
        let path = packed_toy_store(dir.path(), 64, 8);
        let opts = ReaderOptions { bypass: BypassMode::Require, ..Default::default() };
        match FlashReader::open(&path, opts) {
            Ok(reader) => {
                assert!(reader.bypass_active());
                let store = StoreFile::open(&path).unwrap();
                let (records, _) = reader.fetch_indices::<f32>(1, &[1, 2, 40]).unwrap();
                for rec in &records {
                    assert_eq!(rec, &store.read_record::<f32>(1, rec.neuron_index).unwrap());
                }
            }
            Err(Error::DirectIoUnsupported(_)) => {}
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn probe_grid_has_positive_cells() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        std::fs::write(&path, vec![7u8; 256 * 1024]).unwrap();
        let grid = probe_throughput(
            &path,
            &[4096, 16384],
            &[1, 2],
            Duration::from_millis(30),
            BypassMode::Off,
            11,
        )
        .unwrap();
        grid.validate().unwrap();
        assert_eq!(grid.measured.len(), 2);
        assert_eq!(grid.measured[0].len(), 2);
    }

    #[test]
    fn probe_rejects_chunk_larger_than_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("small.bin");
        std::fs::write(&path, vec![0u8; 1024]).unwrap();
        assert!(matches!(
            probe_cell(&path, 4096, 1, Duration::from_millis(5), BypassMode::Off, 0),
            Err(Error::FileTooSmall { needed: 4096, actual: 1024 })
        ));
    }

    #[test]
    fn repeated_probe_is_reproducible_plumbing() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        std::fs::write(&path, vec![1u8; 128 * 1024]).unwrap();
        let a = probe_cell(&path, 4096, 2, Duration::from_millis(25), BypassMode::Off, 3).unwrap();
        let b = probe_cell(&path, 4096, 2, Duration::from_millis(25), BypassMode::Off, 3).unwrap();
        assert!(a.gib_per_s > 0.0 && b.gib_per_s > 0.0);
        let band = (a.gib_per_s.max(b.gib_per_s)) / (a.gib_per_s.min(b.gib_per_s));
        assert!(band < 100.0, "repeat measurements wildly inconsistent: {a:?} vs {b:?}");
    }

    #[test]
    fn grid_csv_round_trip() {
        let grid = ThroughputGrid {
            chunk_sizes: vec![4096, 32768],
            thread_counts: vec![1, 32],
            measured: vec![vec![0.5, 2.0], vec![1.5, 6.1]],
            bypass_cache: false,
        };
        let csv = grid.to_csv();
        let parsed = ThroughputGrid::from_csv(&csv).unwrap();
        assert_eq!(parsed.chunk_sizes, grid.chunk_sizes);
        assert_eq!(parsed.thread_counts, grid.thread_counts);
        assert_eq!(parsed.measured, grid.measured);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn total_bytes_monotone_in_gap_threshold(
                seed in 0u64..500,
                count in 1usize..60,
            ) {
                let m = toy_manifest(512);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let indices: Vec<u32> =
                    sample(&mut rng, 512, count).into_iter().map(|i| i as u32).collect();
                let mut prev_bytes = 0u64;
                let mut prev_runs = usize::MAX;
                for gap in 0..6u64 {
                    let plan = plan_reads(&indices, &m, 0, gap).unwrap();
                    prop_assert!(plan.total_bytes >= prev_bytes);
                    prop_assert!(plan.runs.len() <= prev_runs);
                    prev_bytes = plan.total_bytes;
                    prev_runs = plan.runs.len();
                }
            }
        }
    }
}
