//! Per-token active-neuron traces and synthetic trace generators.
//!
//! A trace records, for every token and layer, which FFN neurons fired (or
//! were predicted to). It is the common currency between the predictor, the
//! cache simulations, the cost model, and the trace analytics.
//!
//! On disk a trace is JSONL: a header line
//! `{"schema":"fn-trace-v1","n_layers":L,"d_ffn":N,"provenance":"..."}`
//! followed by one `{"token":t,"active":[[...],...]}` line per token, where
//! `active` holds one sorted index list per layer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_SCHEMA: &str = "fn-trace-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationTrace {
    pub n_layers: usize,
    pub d_ffn: u32,
    /// `tokens[t][l]` = sorted, deduplicated active indices of layer `l`.
    pub tokens: Vec<Vec<Vec<u32>>>,
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    schema: String,
    n_layers: usize,
    d_ffn: u32,
    provenance: String,
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    token: usize,
    active: Vec<Vec<u32>>,
}

impl ActivationTrace {
    pub fn new(n_layers: usize, d_ffn: u32, provenance: impl Into<String>) -> Self {
        Self { n_layers, d_ffn, tokens: Vec::new(), provenance: provenance.into() }
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Append one token's per-layer sets, normalizing to sorted unique.
    pub fn push_token(&mut self, mut active: Vec<Vec<u32>>) -> Result<()> {
        if active.len() != self.n_layers {
            return Err(Error::BadTrace(format!(
                "token has {} layers, trace has {}",
                active.len(),
                self.n_layers
            )));
        }
        for set in &mut active {
            set.sort_unstable();
            set.dedup();
            if let Some(&last) = set.last() {
                if last >= self.d_ffn {
                    return Err(Error::BadTrace(format!(
                        "index {last} out of range for d_ffn {}",
                        self.d_ffn
                    )));
                }
            }
        }
        self.tokens.push(active);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::EmptyTrace);
        }
        for (t, token) in self.tokens.iter().enumerate() {
            if token.len() != self.n_layers {
                return Err(Error::BadTrace(format!(
                    "token {t} has {} layers, trace has {}",
                    token.len(),
                    self.n_layers
                )));
            }
            for set in token {
                if set.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::BadTrace(format!("token {t} set not sorted unique")));
                }
                if set.last().is_some_and(|&i| i >= self.d_ffn) {
                    return Err(Error::BadTrace(format!("token {t} index out of range")));
                }
            }
        }
        Ok(())
    }

    /// One layer's per-token sets, in token order.
    pub fn layer_sets(&self, layer: usize) -> Result<Vec<&[u32]>> {
        if layer >= self.n_layers {
            return Err(Error::LayerOutOfRange { layer, n_layers: self.n_layers });
        }
        Ok(self.tokens.iter().map(|t| t[layer].as_slice()).collect())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        let header = TraceHeader {
            schema: TRACE_SCHEMA.into(),
            n_layers: self.n_layers,
            d_ffn: self.d_ffn,
            provenance: self.provenance.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).unwrap())?;
        for (t, token) in self.tokens.iter().enumerate() {
            let line = TraceLine { token: t, active: token.clone() };
            writeln!(w, "{}", serde_json::to_string(&line).unwrap())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let head_line = lines
            .next()
            .ok_or_else(|| Error::BadTrace("empty trace file".into()))??;
        let header: TraceHeader = serde_json::from_str(&head_line)
            .map_err(|e| Error::BadTrace(format!("bad header: {e}")))?;
        if header.schema != TRACE_SCHEMA {
            return Err(Error::BadTrace(format!(
                "schema {:?}, expected {TRACE_SCHEMA:?}",
                header.schema
            )));
        }
        let mut trace = Self::new(header.n_layers, header.d_ffn, header.provenance);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(&line)
                .map_err(|e| Error::BadTrace(format!("line {}: {e}", n + 2)))?;
            if parsed.token != trace.tokens.len() {
                return Err(Error::BadTrace(format!(
                    "line {}: token {} out of order",
                    n + 2,
                    parsed.token
                )));
            }
            trace.push_token(parsed.active)?;
        }
        trace.validate()?;
        Ok(trace)
    }
}

/// Union of the up-to-`k` sets ending at position `t` (window truncated at
/// the sequence start). Returned sorted.
pub fn windowed_union(sets: &[&[u32]], t: usize, k: usize) -> Vec<u32> {
    let lo = (t + 1).saturating_sub(k);
    let mut union: Vec<u32> = sets[lo..=t].iter().flat_map(|s| s.iter().copied()).collect();
    union.sort_unstable();
    union.dedup();
    union
}

/// Synthetic trace generators. All are deterministic in their seed.
pub mod generate {
    use super::*;

    /// Zipf-skewed activations with token-to-token drift: each token keeps
    /// every previously active neuron with probability `keep_prob` and
    /// refills up to `mean_active` from a Zipf-over-rank draw, so a few hot
    /// neurons recur while the tail churns.
    #[derive(Debug, Clone)]
    pub struct DriftConfig {
        pub n_layers: usize,
        pub d_ffn: u32,
        pub tokens: usize,
        pub mean_active: usize,
        pub keep_prob: f64,
        pub zipf_exponent: f64,
        pub seed: u64,
    }

    impl Default for DriftConfig {
        fn default() -> Self {
            Self {
                n_layers: 2,
                d_ffn: 512,
                tokens: 200,
                mean_active: 48,
                keep_prob: 0.8,
                zipf_exponent: 1.05,
                seed: 0,
            }
        }
    }

    fn zipf_index(rng: &mut ChaCha8Rng, d_ffn: u32, exponent: f64) -> u32 {
        let dist = rand_distr::Zipf::new(d_ffn as f64, exponent).expect("valid zipf");
        let v: f64 = rng.sample(dist);
        (v as u32 - 1).min(d_ffn - 1)
    }

    pub fn zipf_correlated(cfg: &DriftConfig) -> ActivationTrace {
        assert!(cfg.mean_active as u32 <= cfg.d_ffn);
        let mut trace = ActivationTrace::new(
            cfg.n_layers,
            cfg.d_ffn,
            format!("zipf-correlated:seed={}", cfg.seed),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut prev: Vec<Vec<u32>> = vec![Vec::new(); cfg.n_layers];
        for _ in 0..cfg.tokens {
            let mut token = Vec::with_capacity(cfg.n_layers);
            for layer_prev in &mut prev {
                let mut set: Vec<u32> = layer_prev
                    .iter()
                    .copied()
                    .filter(|_| rng.random_bool(cfg.keep_prob))
                    .collect();
                let mut guard = 0;
                while set.len() < cfg.mean_active && guard < cfg.mean_active * 64 {
                    let i = zipf_index(&mut rng, cfg.d_ffn, cfg.zipf_exponent);
                    if !set.contains(&i) {
                        set.push(i);
                    }
                    guard += 1;
                }
                set.sort_unstable();
                *layer_prev = set.clone();
                token.push(set);
            }
            trace.push_token(token).expect("generator stays in range");
        }
        trace
    }

    /// Independent uniform draws of `active_per_token` indices per token.
    pub fn uniform_random(
        seed: u64,
        n_layers: usize,
        d_ffn: u32,
        tokens: usize,
        active_per_token: usize,
    ) -> ActivationTrace {
        assert!(active_per_token as u32 <= d_ffn);
        let mut trace =
            ActivationTrace::new(n_layers, d_ffn, format!("uniform-random:seed={seed}"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..tokens {
            let token = (0..n_layers)
                .map(|_| {
                    sample(&mut rng, d_ffn as usize, active_per_token)
                        .into_iter()
                        .map(|i| i as u32)
                        .collect()
                })
                .collect();
            trace.push_token(token).expect("generator stays in range");
        }
        trace
    }

    /// One hyperactive hub (index 0) fires every token alongside a random
    /// crowd, so the hub becomes everyone's closest friend. Single layer.
    pub fn hub_structured(seed: u64, d_ffn: u32, tokens: usize, others_per_token: usize) -> ActivationTrace {
        assert!(others_per_token as u32 <= d_ffn - 1);
        let mut trace = ActivationTrace::new(1, d_ffn, format!("hub:seed={seed}"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..tokens {
            let mut set: Vec<u32> = sample(&mut rng, d_ffn as usize - 1, others_per_token)
                .into_iter()
                .map(|i| i as u32 + 1)
                .collect();
            set.push(0);
            trace.push_token(vec![set]).expect("generator stays in range");
        }
        trace
    }

    /// Neurons fire strictly in pairs (2j, 2j+1), so every neuron's closest
    /// friend is its partner and nobody else. Single layer, even d_ffn.
    pub fn paired_cliques(seed: u64, d_ffn: u32, tokens: usize, pairs_per_token: usize) -> ActivationTrace {
        assert!(d_ffn % 2 == 0 && pairs_per_token as u32 <= d_ffn / 2);
        let mut trace = ActivationTrace::new(1, d_ffn, format!("paired-cliques:seed={seed}"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..tokens {
            let set: Vec<u32> = sample(&mut rng, d_ffn as usize / 2, pairs_per_token)
                .into_iter()
                .flat_map(|p| [2 * p as u32, 2 * p as u32 + 1])
                .collect();
            trace.push_token(vec![set]).expect("generator stays in range");
        }
        trace
    }

    /// The same set every token: maximal reuse, zero incremental load.
    pub fn constant(n_layers: usize, d_ffn: u32, tokens: usize, set: &[u32]) -> ActivationTrace {
        let mut trace = ActivationTrace::new(n_layers, d_ffn, "constant".to_string());
        for _ in 0..tokens {
            trace
                .push_token(vec![set.to_vec(); n_layers])
                .expect("caller passes in-range indices");
        }
        trace
    }

    /// Disjoint blocks of `m` consecutive indices per token: zero reuse.
    pub fn disjoint_blocks(n_layers: usize, d_ffn: u32, tokens: usize, m: u32) -> ActivationTrace {
        assert!(tokens as u32 * m <= d_ffn, "d_ffn too small for disjoint blocks");
        let mut trace = ActivationTrace::new(n_layers, d_ffn, "disjoint-blocks".to_string());
        for t in 0..tokens as u32 {
            let set: Vec<u32> = (t * m..(t + 1) * m).collect();
            trace.push_token(vec![set; n_layers]).expect("asserted in range");
        }
        trace
    }
}
