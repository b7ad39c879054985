//! Token loop of a toy transformer-like model.
//!
//! Embeddings and the attention stand-in (a fixed random projection plus
//! tanh) stay resident in memory; FFN weights live on flash and stream
//! through the neuron cache, gated by the per-layer predictors. A dense
//! oracle computes the same FFN without sparsity for equivalence tests.
//!
//! Per token the engine reports the three latency buckets of the runtime:
//! I/O (flash reads), Mem (cache delete/insert copying), Compute
//! (attention, prediction, FFN, head). Total is their sum.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheUpdateStats, NeuronCache, OverflowPolicy, RecordSource};
use crate::error::{Error, Result};
use crate::math::{dot, relu, Mat};
use crate::predictor::PredictorParams;
use crate::scalar::Scalar;
use crate::store::LayerWeights;
use crate::trace::ActivationTrace;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub vocab: usize,
    /// Fraction of neurons meant to fire per token; biases are calibrated
    /// to hit it on average.
    pub target_density: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self { d_model: 64, d_ffn: 256, n_layers: 4, vocab: 128, target_density: 0.1, seed: 0 }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.vocab == 0 {
            return Err(Error::InvalidArgument("model dimensions must be >= 1".into()));
        }
        if self.d_ffn < self.d_model {
            return Err(Error::InvalidArgument(format!(
                "d_ffn {} must be >= d_model {}",
                self.d_ffn, self.d_model
            )));
        }
        if !(self.target_density > 0.0 && self.target_density < 1.0) {
            return Err(Error::InvalidArgument("target_density must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Fully materialized toy model: resident parts plus the FFN weights that
/// normally live in the store.
pub struct ToyModel<T> {
    pub config: ToyModelConfig,
    /// vocab x d_model; doubles as the output head.
    pub embed: Mat<T>,
    /// Per layer d_model x d_model attention stand-in.
    pub attn: Vec<Mat<T>>,
    pub layers: Vec<LayerWeights<T>>,
}

impl<T: Scalar> ToyModel<T> {
    /// Deterministic in `config.seed`. Up-projection biases are calibrated
    /// by empirical quantile so roughly `target_density` of neurons fire.
    pub fn generate(config: &ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (config.d_model as f64).sqrt();
        let draw = |rng: &mut ChaCha8Rng, s: f64| {
            let v: f64 = rng.sample(StandardNormal);
            T::from_f64(v * s).unwrap()
        };
        let embed = Mat::from_fn(config.vocab, config.d_model, |_, _| draw(&mut rng, 1.0));
        let attn: Vec<Mat<T>> = (0..config.n_layers)
            .map(|_| Mat::from_fn(config.d_model, config.d_model, |_, _| draw(&mut rng, scale)))
            .collect();

        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let up = Mat::from_fn(config.d_ffn, config.d_model, |_, _| draw(&mut rng, scale));
            let down = Mat::from_fn(config.d_ffn, config.d_model, |_, _| draw(&mut rng, scale));
            layers.push(LayerWeights { up, down, bias: vec![T::zero(); config.d_ffn] });
        }

        // bias calibration: sample attention outputs, set each neuron's bias
        // to the negated (1 - density) quantile of its pre-bias activation
        let calib_samples = 96usize.max((1.0 / config.target_density).ceil() as usize);
        let mut per_neuron: Vec<Vec<f64>> = vec![Vec::with_capacity(calib_samples); config.d_ffn];
        let mut xs: Vec<Vec<T>> = Vec::with_capacity(calib_samples);
        for _ in 0..calib_samples {
            let token = rng.random_range(0..config.vocab);
            let x0: Vec<T> = embed.row(token).to_vec();
            xs.push(x0);
        }
        for (l, layer) in layers.iter_mut().enumerate() {
            for x in &xs {
                let a = attention_forward(&attn[l], x);
                for i in 0..config.d_ffn {
                    per_neuron[i].push(dot(layer.up.row(i), &a).to_f64().unwrap());
                }
            }
            for (i, samples) in per_neuron.iter_mut().enumerate() {
                samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let q = ((samples.len() as f64) * (1.0 - config.target_density)) as usize;
                let cut = samples[q.min(samples.len() - 1)];
                layer.bias[i] = T::from_f64(-cut).unwrap();
                samples.clear();
            }
        }
        Ok(Self { config: config.clone(), embed, attn, layers })
    }

    /// Resident bytes: embeddings plus attention stand-ins at f32 width.
    pub fn resident_bytes(&self) -> u64 {
        let scalars = self.embed.rows() * self.embed.cols()
            + self.attn.iter().map(|m| m.rows() * m.cols()).sum::<usize>();
        scalars as u64 * 4
    }

    /// Ground-truth active set: neurons with positive ReLU pre-activation.
    pub fn true_active(&self, layer: usize, a: &[T]) -> Vec<u32> {
        let weights = &self.layers[layer];
        (0..self.config.d_ffn)
            .filter(|&i| dot(weights.up.row(i), a) + weights.bias[i] > T::zero())
            .map(|i| i as u32)
            .collect()
    }
}

pub fn attention_forward<T: Scalar>(proj: &Mat<T>, x: &[T]) -> Vec<T> {
    proj.matvec(x).into_iter().map(|v| v.tanh()).collect()
}

/// Textbook dense ReLU FFN: y = sum_i ReLU(up_i . x + bias_i) down_i.
pub fn dense_oracle_forward<T: Scalar>(x: &[T], weights: &LayerWeights<T>) -> Result<Vec<T>> {
    if x.len() != weights.d_model() {
        return Err(Error::DimensionMismatch(format!(
            "input {} vs d_model {}",
            x.len(),
            weights.d_model()
        )));
    }
    let mut y = vec![T::zero(); x.len()];
    for i in 0..weights.d_ffn() {
        let pre = relu(dot(weights.up.row(i), x) + weights.bias[i]);
        if pre != T::zero() {
            for (yd, &dv) in y.iter_mut().zip(weights.down.row(i)) {
                *yd += pre * dv;
            }
        }
    }
    Ok(y)
}

/// Dense FFN with pre-activations outside `mask` forced to zero: the exact
/// semantics of prediction-gated inference.
pub fn masked_dense_forward<T: Scalar>(
    x: &[T],
    weights: &LayerWeights<T>,
    mask: &[u32],
) -> Result<Vec<T>> {
    if x.len() != weights.d_model() {
        return Err(Error::DimensionMismatch(format!(
            "input {} vs d_model {}",
            x.len(),
            weights.d_model()
        )));
    }
    let mut y = vec![T::zero(); x.len()];
    for &i in mask {
        let i = i as usize;
        if i >= weights.d_ffn() {
            return Err(Error::IndexOutOfRange {
                index: i as u32,
                d_ffn: weights.d_ffn() as u32,
            });
        }
        let pre = relu(dot(weights.up.row(i), x) + weights.bias[i]);
        if pre != T::zero() {
            for (yd, &dv) in y.iter_mut().zip(weights.down.row(i)) {
                *yd += pre * dv;
            }
        }
    }
    Ok(y)
}

/// Sparse FFN over the cache's resident rows. Neurons absent from the
/// cache contribute zero.
pub fn sparse_ffn_forward<T: Scalar>(
    x: &[T],
    views: &crate::cache::ResidentViews<'_, T>,
) -> Result<Vec<T>> {
    if x.len() != views.d_model() {
        return Err(Error::DimensionMismatch(format!(
            "input {} vs cache d_model {}",
            x.len(),
            views.d_model()
        )));
    }
    let mut y = vec![T::zero(); x.len()];
    for j in 0..views.num_used() {
        let pre = relu(dot(views.up_row(j), x) + views.bias[j]);
        if pre != T::zero() {
            for (yd, &dv) in y.iter_mut().zip(views.down_row(j)) {
                *yd += pre * dv;
            }
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    Greedy,
    /// Seeded softmax sampling, the stand-in for nucleus-style decoding.
    Stochastic,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub n_tokens: usize,
    pub window_k: usize,
    pub req_headroom: f64,
    pub overflow: OverflowPolicy,
    pub sampling: SamplingMode,
    pub sampling_seed: u64,
    /// Tokens used to calibrate per-layer cache capacity before the run.
    pub calibration_tokens: usize,
    pub prompt: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_tokens: 64,
            window_k: crate::cache::DEFAULT_WINDOW_K,
            req_headroom: crate::cache::DEFAULT_REQ_HEADROOM,
            overflow: OverflowPolicy::DynamicShrink,
            sampling: SamplingMode::Greedy,
            sampling_seed: 0,
            calibration_tokens: 32,
            prompt: vec![0],
        }
    }
}

/// One generated token's accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenRecord {
    pub index: usize,
    pub token_id: usize,
    pub io_ms: f64,
    pub mem_ms: f64,
    pub compute_ms: f64,
    /// io + mem + compute; the wall clock including glue is reported
    /// separately.
    pub total_ms: f64,
    pub wall_ms: f64,
    pub bytes_fetched: u64,
    pub deleted: u64,
    pub inserted: u64,
    pub predicted_per_layer: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub tokens: usize,
    pub mean_io_ms: f64,
    pub mean_mem_ms: f64,
    pub mean_compute_ms: f64,
    pub mean_total_ms: f64,
    pub total_bytes_fetched: u64,
    pub window_k: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
}

pub struct GenerationReport {
    pub tokens: Vec<TokenRecord>,
    pub summary: RunSummary,
    pub generated: Vec<usize>,
    /// Predicted active sets per token and layer.
    pub predicted_trace: ActivationTrace,
    /// Ground-truth ReLU active sets per token and layer.
    pub true_trace: ActivationTrace,
}

/// Run the token loop: resident attention + predictor-gated sparse FFN
/// through per-layer caches backed by `source`.
pub fn run_generation<T: Scalar, S: RecordSource<T>>(
    model: &ToyModel<T>,
    predictors: &[PredictorParams<T>],
    source: &S,
    cfg: &RunConfig,
) -> Result<GenerationReport> {
    let mc = &model.config;
    if predictors.len() != mc.n_layers {
        return Err(Error::DimensionMismatch(format!(
            "{} predictors for {} layers",
            predictors.len(),
            mc.n_layers
        )));
    }
    if cfg.n_tokens == 0 {
        return Err(Error::InvalidArgument("n_tokens must be >= 1".into()));
    }
    if cfg.prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must hold at least one token".into()));
    }
    for &t in &cfg.prompt {
        if t >= mc.vocab {
            return Err(Error::InvalidArgument(format!("prompt token {t} outside vocab")));
        }
    }

    // capacity calibration: run the predictor over a short synthetic prefix
    // and take the max windowed-union size plus headroom
    let calib = calibration_trace(model, predictors, cfg.calibration_tokens.max(cfg.window_k))?;
    let mut caches: Vec<NeuronCache<T>> = Vec::with_capacity(mc.n_layers);
    for l in 0..mc.n_layers {
        let cap = crate::cache::calibrate_capacity(&calib, l, cfg.window_k, cfg.req_headroom)?
            .max(1)
            .min(mc.d_ffn);
        caches.push(NeuronCache::new(mc.d_model, mc.d_ffn as u32, cap, cfg.window_k, cfg.overflow)?);
    }

    let mut records = Vec::with_capacity(cfg.n_tokens);
    let mut predicted_trace = ActivationTrace::new(
        mc.n_layers,
        mc.d_ffn as u32,
        format!("engine-predicted:seed={}", mc.seed),
    );
    let mut true_trace = ActivationTrace::new(
        mc.n_layers,
        mc.d_ffn as u32,
        format!("engine-true:seed={}", mc.seed),
    );
    let mut generated = Vec::with_capacity(cfg.n_tokens);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.sampling_seed);
    let mut prompt_cursor = 0usize;
    let mut token_id = cfg.prompt[0];
    prompt_cursor += 1;

    for step in 0..cfg.n_tokens {
        let wall_started = Instant::now();
        let mut io_s = 0.0;
        let mut mem_s = 0.0;
        let mut compute_s = 0.0;
        let mut step_stats = CacheUpdateStats::default();
        let mut predicted_sizes = Vec::with_capacity(mc.n_layers);
        let mut predicted_token = Vec::with_capacity(mc.n_layers);
        let mut true_token = Vec::with_capacity(mc.n_layers);

        let compute_started = Instant::now();
        let mut x: Vec<T> = model.embed.row(token_id).to_vec();
        compute_s += compute_started.elapsed().as_secs_f64();

        for l in 0..mc.n_layers {
            let compute_started = Instant::now();
            let a = attention_forward(&model.attn[l], &x);
            let predicted = predictors[l].predict_active(&a)?;
            compute_s += compute_started.elapsed().as_secs_f64();

            let stats = caches[l]
                .update_window(&predicted, source, l)
                .map_err(|e| Error::InvariantViolation(format!("token {step} layer {l}: {e}")))?;
            io_s += stats.io_seconds;
            mem_s += stats.mem_seconds;
            step_stats.absorb(&stats);

            let compute_started = Instant::now();
            let y = sparse_ffn_forward(&a, &caches[l].resident_views())?;
            for d in 0..mc.d_model {
                x[d] = a[d] + y[d];
            }
            compute_s += compute_started.elapsed().as_secs_f64();

            true_token.push(model.true_active(l, &a));
            predicted_sizes.push(predicted.len());
            predicted_token.push(predicted);
        }

        let compute_started = Instant::now();
        let logits = model.embed.matvec(&x);
        let next = match cfg.sampling {
            SamplingMode::Greedy => argmax(&logits),
            SamplingMode::Stochastic => sample_softmax(&logits, &mut sampler),
        };
        compute_s += compute_started.elapsed().as_secs_f64();

        predicted_trace.push_token(predicted_token)?;
        true_trace.push_token(true_token)?;
        generated.push(token_id);
        records.push(TokenRecord {
            index: step,
            token_id,
            io_ms: io_s * 1e3,
            mem_ms: mem_s * 1e3,
            compute_ms: compute_s * 1e3,
            total_ms: (io_s + mem_s + compute_s) * 1e3,
            wall_ms: wall_started.elapsed().as_secs_f64() * 1e3,
            bytes_fetched: step_stats.bytes_fetched,
            deleted: step_stats.deleted,
            inserted: step_stats.inserted,
            predicted_per_layer: predicted_sizes,
        });

        token_id = if prompt_cursor < cfg.prompt.len() {
            let t = cfg.prompt[prompt_cursor];
            prompt_cursor += 1;
            t
        } else {
            next
        };
    }

    let n = records.len() as f64;
    let summary = RunSummary {
        tokens: records.len(),
        mean_io_ms: records.iter().map(|r| r.io_ms).sum::<f64>() / n,
        mean_mem_ms: records.iter().map(|r| r.mem_ms).sum::<f64>() / n,
        mean_compute_ms: records.iter().map(|r| r.compute_ms).sum::<f64>() / n,
        mean_total_ms: records.iter().map(|r| r.total_ms).sum::<f64>() / n,
        total_bytes_fetched: records.iter().map(|r| r.bytes_fetched).sum(),
        window_k: cfg.window_k,
        d_model: mc.d_model,
        d_ffn: mc.d_ffn,
        n_layers: mc.n_layers,
    };
    Ok(GenerationReport { tokens: records, summary, generated, predicted_trace, true_trace })
}

/// Predicted-set trace over a deterministic token walk, for capacity
/// calibration.
fn calibration_trace<T: Scalar>(
    model: &ToyModel<T>,
    predictors: &[PredictorParams<T>],
    tokens: usize,
) -> Result<ActivationTrace> {
    let mc = &model.config;
    let mut trace = ActivationTrace::new(mc.n_layers, mc.d_ffn as u32, "calibration");
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed ^ 0xCA11B);
    let mut token_id = 0usize;
    for _ in 0..tokens {
        let mut x: Vec<T> = model.embed.row(token_id).to_vec();
        let mut sets = Vec::with_capacity(mc.n_layers);
        for l in 0..mc.n_layers {
            let a = attention_forward(&model.attn[l], &x);
            let predicted = predictors[l].predict_active(&a)?;
            // calibration walks the dense model so it needs no cache
            let y = dense_oracle_forward(&a, &model.layers[l])?;
            for d in 0..mc.d_model {
                x[d] = a[d] + y[d];
            }
            sets.push(predicted);
        }
        trace.push_token(sets)?;
        token_id = rng.random_range(0..mc.vocab);
    }
    Ok(trace)
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax<T: Scalar>(logits: &[T], rng: &mut ChaCha8Rng) -> usize {
    let max = logits[argmax(logits)].to_f64().unwrap();
    let weights: Vec<f64> = logits.iter().map(|&z| (z.to_f64().unwrap() - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Train per-layer predictors against the toy model's own activations.
pub fn train_model_predictors<T: Scalar>(
    model: &ToyModel<T>,
    samples_per_layer: usize,
    cfg: &crate::predictor::TrainConfig,
) -> Result<Vec<PredictorParams<T>>> {
    let mc = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed ^ 0x7EA1);
    let mut predictors = Vec::with_capacity(mc.n_layers);
    for l in 0..mc.n_layers {
        let mut samples = Vec::with_capacity(samples_per_layer);
        for _ in 0..samples_per_layer {
            let token = rng.random_range(0..mc.vocab);
            let mut x: Vec<T> = model.embed.row(token).to_vec();
            for prev in 0..l {
                let a = attention_forward(&model.attn[prev], &x);
                let y = dense_oracle_forward(&a, &model.layers[prev])?;
                for d in 0..mc.d_model {
                    x[d] = a[d] + y[d];
                }
            }
            let a = attention_forward(&model.attn[l], &x);
            let active_set = model.true_active(l, &a);
            samples.push(crate::predictor::LabeledSample { attention_output: a, active_set });
        }
        let layer_cfg = crate::predictor::TrainConfig { layer: l as u32, seed: cfg.seed ^ l as u64, ..cfg.clone() };
        predictors.push(crate::predictor::train_predictor(&samples, mc.d_model, mc.d_ffn, &layer_cfg)?);
    }
    Ok(predictors)
}
