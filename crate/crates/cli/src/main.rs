//! Unified front end: pack stores, probe storage, train/evaluate
//! predictors, run flash-backed generation, model costs, analyze traces,
//! and reproduce the full release gate.
//!
//! Exit codes: 0 success, 1 criterion failure, 2 usage error, 3 I/O error.

mod reproduce;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use flashneuron::cache::OverflowPolicy;
use flashneuron::cost::{
    aggregated_usage, fit_throughput_model, increment_curve_csv, reference_scenarios,
    scenario_table_csv, tradeoff_csv, tradeoff_sweep, IoScenario,
};
use flashneuron::engine::{
    attention_forward, dense_oracle_forward, run_generation, train_model_predictors, RunConfig,
    SamplingMode, ToyModel, ToyModelConfig,
};
use flashneuron::predictor::{
    evaluate_predictor, load_predictors, save_predictors, LabeledSample, PredictorMetrics,
    TrainConfig,
};
use flashneuron::reader::{probe_throughput, BypassMode, ReaderOptions, ThroughputGrid};
use flashneuron::store::{pack_store, raw_dump, read_manifest};
use flashneuron::trace::{generate, ActivationTrace};
use flashneuron::{Error, FlashReader};

pub const SCHEMA_RUN_SUMMARY: &str = "fn-run-summary-v1";
pub const SCHEMA_RUN_TOKENS: &str = "fn-run-tokens-v1";
pub const SCHEMA_PREDICTOR_METRICS: &str = "fn-predictor-metrics-v1";
pub const SCHEMA_BUNDLING: &str = "fn-bundling-v1";
pub const SCHEMA_THROUGHPUT_FIT: &str = "fn-throughput-fit-v1";

/// A subcommand failure carrying its process exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn criterion(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Io(_)
            | Error::CorruptManifest(_)
            | Error::VersionMismatch { .. }
            | Error::ShortRead { .. }
            | Error::FileTooSmall { .. }
            | Error::DirectIoUnsupported(_)
            | Error::BadTrace(_)
            | Error::EmptyTrace => 3,
            Error::InvalidArgument(_)
            | Error::DimensionMismatch(_)
            | Error::LayerOutOfRange { .. }
            | Error::IndexOutOfRange { .. }
            | Error::WindowTooLong { .. } => 2,
            _ => 1,
        };
        Self { code, message: err.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Self::io(format!("i/o error: {err}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(err: serde_json::Error) -> Self {
        Self::io(format!("bad json: {err}"))
    }
}

type CliResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "flashneuron",
    version,
    about = "Flash-backed sparse feed-forward inference runtime",
    long_about = "Stores bundled neuron weights on flash, predicts per-token active \
neurons with low-rank predictors, keeps a sliding-window DRAM cache, and models the \
resulting I/O latency.\n\nExit codes: 0 success, 1 criterion failure, 2 usage error, \
3 I/O error."
)]
struct Cli {
    /// Directory for generated report files
    #[arg(
        long,
        global = true,
        env = "FLASHNEURON_REPORT_DIR",
        default_value = "reports"
    )]
    report_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BypassOpt {
    /// Fail unless the OS page cache can be bypassed
    Require,
    /// Bypass if supported, fall back to buffered reads
    Try,
    /// Always use buffered reads
    Off,
}

impl From<BypassOpt> for BypassMode {
    fn from(opt: BypassOpt) -> Self {
        match opt {
            BypassOpt::Require => BypassMode::Require,
            BypassOpt::Try => BypassMode::Try,
            BypassOpt::Off => BypassMode::Off,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SamplingOpt {
    /// Highest-logit token
    Greedy,
    /// Seeded softmax sampling
    Stochastic,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum NormalizeOpt {
    /// Joint count / anchor neuron activity
    Anchor,
    /// Joint count / size of the union of both activity sets
    Jaccard,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TraceKind {
    /// Zipf-weighted sets with token-to-token carryover
    Drift,
    /// Independent uniform sets per token
    Uniform,
    /// Neuron 0 fires every token alongside a random crowd
    Hub,
    /// Neurons fire strictly in (2j, 2j+1) pairs
    Cliques,
    /// The same set every token
    Constant,
}

/// Toy model shape and seed; the seed fully determines the weights.
#[derive(Args, Clone)]
struct ModelOpts {
    /// Model seed (weights, biases, calibration)
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Hidden width of the residual stream
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// FFN width (number of bundled neurons per layer)
    #[arg(long, default_value_t = 256)]
    d_ffn: usize,
    /// Number of transformer-analog layers
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Vocabulary size of the embedding table
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    /// Target ground-truth active fraction per layer
    #[arg(long, default_value_t = 0.15)]
    density: f64,
}

impl ModelOpts {
    fn config(&self) -> ToyModelConfig {
        ToyModelConfig {
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_layers: self.layers,
            vocab: self.vocab,
            target_density: self.density,
            seed: self.model_seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pack a raw weight dump directory into a bundled store file
    Pack {
        /// Directory with dims.json and layer_NNN.{up,down,bias}.f32 files
        #[arg(long)]
        input: PathBuf,
        /// Store file to write
        #[arg(long)]
        output: PathBuf,
        /// Record alignment in bytes (power of two)
        #[arg(long, default_value_t = 4096)]
        alignment: u32,
    },

    /// Generate synthetic inputs
    #[command(subcommand)]
    Gen(GenCommand),

    /// Measure random-read throughput over a chunk-size x thread grid
    Probe {
        /// File to read from (should exceed the largest chunk)
        #[arg(long)]
        file: PathBuf,
        /// Comma-separated chunk sizes in bytes
        #[arg(long, value_delimiter = ',', default_value = "4096,16384,65536")]
        chunks: Vec<u64>,
        /// Comma-separated thread counts
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        threads: Vec<usize>,
        /// Measurement duration per grid cell
        #[arg(long, default_value_t = 100)]
        millis: u64,
        /// OS page-cache bypass mode
        #[arg(long, value_enum, default_value_t = BypassOpt::Try)]
        bypass: BypassOpt,
        /// RNG seed for read offsets
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
    },

    /// Train per-layer low-rank predictors against a toy model
    TrainPredictor {
        #[command(flatten)]
        model: ModelOpts,
        /// Training samples per layer
        #[arg(long, default_value_t = 256)]
        samples: usize,
        /// Predictor rank r
        #[arg(long, default_value_t = 8)]
        rank: usize,
        /// Full-batch gradient-descent epochs
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        /// Gradient-descent step size
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        /// Sigmoid score threshold for predicting active
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Seed for predictor init and sample draws
        #[arg(long, default_value_t = 0)]
        train_seed: u64,
        /// Predictor parameter file to write
        #[arg(long)]
        output: PathBuf,
        /// Write held-out metrics JSON here instead of stdout
        #[arg(long)]
        metrics: Option<PathBuf>,
    },

    /// Evaluate a predictor file against fresh toy-model activations
    EvalPredictor {
        #[command(flatten)]
        model: ModelOpts,
        /// Predictor parameter file
        #[arg(long)]
        predictors: PathBuf,
        /// Evaluation samples per layer
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Seed for evaluation sample draws
        #[arg(long, default_value_t = 1)]
        eval_seed: u64,
        /// Write metrics JSON here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
    },

    /// Generate tokens with prediction-gated FFNs streamed from a store
    Run(Box<RunArgs>),

    /// Emit latency tables and window-size tradeoff curves
    Cost {
        /// Scenario JSON file ([{label, gigabytes, gb_per_s}, ...]);
        /// defaults to the five built-in reference configurations
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Activation trace for aggregated-usage curves
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Probe CSV (chunk_bytes,threads,gib_per_s) to fit a throughput model
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Largest window size in the sweep
        #[arg(long, default_value_t = 8)]
        k_max: usize,
        /// Bytes per bundled record
        #[arg(long, default_value_t = 4096)]
        record_bytes: u64,
        /// Always-resident bytes (embeddings, attention, predictors)
        #[arg(long, default_value_t = 0)]
        resident_bytes: u64,
        /// Fetch threads assumed by the tradeoff sweep
        #[arg(long, default_value_t = 32)]
        threads: usize,
        /// Write the scenario table here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
    },

    /// Coactivation, bundling, and sparsity analytics over a trace
    Analyze {
        /// Activation trace (JSONL)
        #[arg(long)]
        trace: PathBuf,
        /// Ground-truth trace; makes the sparsity report compare
        /// predicted vs true fractions
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Layer for coactivation/bundling analytics
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Window size for the cached-rows series
        #[arg(long, default_value_t = 4)]
        window_k: usize,
        /// Probability denominator for reported coactivations
        #[arg(long, value_enum, default_value_t = NormalizeOpt::Anchor)]
        normalize: NormalizeOpt,
        /// Bytes per bundled record for the bundling ledger
        #[arg(long, default_value_t = 4096)]
        record_bytes: u64,
        /// Anchor neuron for the coactivation curve (default: most active)
        #[arg(long)]
        anchor: Option<usize>,
    },

    /// Run the full release gate and write the report bundle
    Reproduce {
        /// Seed for every generated artifact
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Validate this store file instead of packing a fresh one
        #[arg(long)]
        store: Option<PathBuf>,
        /// Probe duration per grid cell
        #[arg(long, default_value_t = 40)]
        probe_millis: u64,
    },
}

#[derive(Subcommand)]
enum GenCommand {
    /// Generate a toy model and pack its FFN weights into a store
    Store {
        #[command(flatten)]
        model: ModelOpts,
        /// Store file to write
        #[arg(long)]
        output: PathBuf,
        /// Also write the raw per-layer dump here (pack's input format)
        #[arg(long)]
        raw_dir: Option<PathBuf>,
        /// Record alignment in bytes (power of two)
        #[arg(long, default_value_t = 4096)]
        alignment: u32,
    },
    /// Generate a synthetic activation trace
    Trace {
        #[arg(long, value_enum, default_value_t = TraceKind::Drift)]
        kind: TraceKind,
        /// Trace file to write (JSONL)
        #[arg(long)]
        output: PathBuf,
        /// Layers in the trace
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// FFN width the indices range over
        #[arg(long, default_value_t = 512)]
        d_ffn: u32,
        #[arg(long, default_value_t = 200)]
        tokens: usize,
        /// Mean active neurons per token
        #[arg(long, default_value_t = 48)]
        mean_active: usize,
        /// Drift only: probability a previously active neuron stays active
        #[arg(long, default_value_t = 0.8)]
        keep_prob: f64,
        /// Drift only: Zipf exponent of the refill distribution
        #[arg(long, default_value_t = 1.05)]
        zipf_exponent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// `run` flags; every field can also come from --config (JSON with the
/// same keys in snake_case), with explicit flags taking precedence.
#[derive(Args)]
struct RunArgs {
    /// JSON config file with the keys documented on the flags below
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundled weight store (required here or in --config)
    #[arg(long)]
    store: Option<PathBuf>,
    /// Predictor parameter file (required here or in --config)
    #[arg(long)]
    predictors: Option<PathBuf>,
    /// Model seed; must be the seed the store was generated from
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    vocab: Option<usize>,
    /// Target ground-truth active fraction used at model generation
    #[arg(long)]
    density: Option<f64>,
    /// Tokens to generate
    #[arg(long)]
    tokens: Option<usize>,
    /// Sliding-window length k
    #[arg(long)]
    window_k: Option<usize>,
    /// Parallel fetch workers
    #[arg(long)]
    workers: Option<usize>,
    /// Records: merge reads separated by gaps up to this many records
    #[arg(long)]
    gap_threshold: Option<u64>,
    /// OS page-cache bypass mode (require, try, off)
    #[arg(long, value_enum)]
    bypass: Option<BypassOpt>,
    /// Capacity headroom over the calibrated maximum window union
    #[arg(long)]
    headroom: Option<f64>,
    /// Token sampling mode (greedy, stochastic)
    #[arg(long, value_enum)]
    sampling: Option<SamplingOpt>,
    /// Seed for stochastic sampling
    #[arg(long)]
    sampling_seed: Option<u64>,
    /// Dense calibration tokens used to size per-layer caches
    #[arg(long)]
    calibration_tokens: Option<usize>,
    /// Comma-separated prompt token ids
    #[arg(long, value_delimiter = ',')]
    prompt: Option<Vec<usize>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunFileConfig {
    store: Option<PathBuf>,
    predictors: Option<PathBuf>,
    model_seed: Option<u64>,
    vocab: Option<usize>,
    density: Option<f64>,
    tokens: Option<usize>,
    window_k: Option<usize>,
    workers: Option<usize>,
    gap_threshold: Option<u64>,
    bypass: Option<String>,
    headroom: Option<f64>,
    sampling: Option<String>,
    sampling_seed: Option<u64>,
    calibration_tokens: Option<usize>,
    prompt: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Pack { input, output, alignment } => cmd_pack(&input, &output, alignment),
        Command::Gen(gen) => match gen {
            GenCommand::Store { model, output, raw_dir, alignment } => {
                cmd_gen_store(&model, &output, raw_dir.as_deref(), alignment)
            }
            GenCommand::Trace {
                kind,
                output,
                layers,
                d_ffn,
                tokens,
                mean_active,
                keep_prob,
                zipf_exponent,
                seed,
            } => cmd_gen_trace(
                kind,
                &output,
                layers,
                d_ffn,
                tokens,
                mean_active,
                keep_prob,
                zipf_exponent,
                seed,
            ),
        },
        Command::Probe { file, chunks, threads, millis, bypass, seed, output } => {
            cmd_probe(&file, &chunks, &threads, millis, bypass, seed, output.as_deref())
        }
        Command::TrainPredictor {
            model,
            samples,
            rank,
            epochs,
            learning_rate,
            threshold,
            train_seed,
            output,
            metrics,
        } => cmd_train_predictor(
            &model,
            samples,
            rank,
            epochs,
            learning_rate,
            threshold,
            train_seed,
            &output,
            metrics.as_deref(),
        ),
        Command::EvalPredictor { model, predictors, samples, eval_seed, output } => {
            cmd_eval_predictor(&model, &predictors, samples, eval_seed, output.as_deref())
        }
        Command::Run(args) => cmd_run(&args, &cli.report_dir),
        Command::Cost {
            scenarios,
            trace,
            grid,
            k_max,
            record_bytes,
            resident_bytes,
            threads,
            output,
        } => cmd_cost(
            scenarios.as_deref(),
            trace.as_deref(),
            grid.as_deref(),
            k_max,
            record_bytes,
            resident_bytes,
            threads,
            output.as_deref(),
            &cli.report_dir,
        ),
        Command::Analyze {
            trace,
            truth,
            layer,
            window_k,
            normalize,
            record_bytes,
            anchor,
        } => cmd_analyze(
            &trace,
            truth.as_deref(),
            layer,
            window_k,
            normalize,
            record_bytes,
            anchor,
            &cli.report_dir,
        ),
        Command::Reproduce { seed, store, probe_millis } => reproduce::run(&reproduce::Opts {
            seed,
            store,
            probe_millis,
            report_dir: cli.report_dir,
        }),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))
}

fn write_report(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents)
        .map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_pack(input: &Path, output: &Path, alignment: u32) -> CliResult {
    let layers = raw_dump::read(input)?;
    let manifest = pack_store(&layers, 4, alignment, output)?;
    println!(
        "packed {} layers x {} records ({} B payload, {} B stride) into {}",
        manifest.n_layers,
        manifest.d_ffn,
        manifest.payload_bytes(),
        manifest.record_stride,
        output.display()
    );
    Ok(())
}

fn cmd_gen_store(
    model_opts: &ModelOpts,
    output: &Path,
    raw_dir: Option<&Path>,
    alignment: u32,
) -> CliResult {
    let model = ToyModel::<f32>::generate(&model_opts.config())?;
    if let Some(dir) = raw_dir {
        raw_dump::write(dir, &model.layers)?;
        println!("wrote raw dump to {}", dir.display());
    }
    let manifest = pack_store(&model.layers, 4, alignment, output)?;
    println!(
        "generated seed-{} model: {} layers, d_model {}, d_ffn {}; store {} ({} B/record)",
        model_opts.model_seed,
        manifest.n_layers,
        manifest.d_model,
        manifest.d_ffn,
        output.display(),
        manifest.record_stride
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_trace(
    kind: TraceKind,
    output: &Path,
    layers: usize,
    d_ffn: u32,
    tokens: usize,
    mean_active: usize,
    keep_prob: f64,
    zipf_exponent: f64,
    seed: u64,
) -> CliResult {
    let trace = match kind {
        TraceKind::Drift => generate::zipf_correlated(&generate::DriftConfig {
            n_layers: layers,
            d_ffn,
            tokens,
            mean_active,
            keep_prob,
            zipf_exponent,
            seed,
        }),
        TraceKind::Uniform => generate::uniform_random(seed, layers, d_ffn, tokens, mean_active),
        TraceKind::Hub => generate::hub_structured(seed, d_ffn, tokens, mean_active.max(2) - 1),
        TraceKind::Cliques => {
            generate::paired_cliques(seed, d_ffn, tokens, (mean_active / 2).max(1))
        }
        TraceKind::Constant => {
            let set: Vec<u32> = (0..mean_active.min(d_ffn as usize) as u32).collect();
            generate::constant(layers, d_ffn, tokens, &set)
        }
    };
    trace.write_jsonl(output)?;
    println!(
        "wrote {} tokens x {} layers (d_ffn {}) to {}",
        trace.token_count(),
        trace.n_layers,
        trace.d_ffn,
        output.display()
    );
    Ok(())
}

fn cmd_probe(
    file: &Path,
    chunks: &[u64],
    threads: &[usize],
    millis: u64,
    bypass: BypassOpt,
    seed: u64,
    output: Option<&Path>,
) -> CliResult {
    let grid = probe_throughput(
        file,
        chunks,
        threads,
        Duration::from_millis(millis),
        bypass.into(),
        seed,
    )?;
    eprintln!(
        "page-cache bypass {}",
        if grid.bypass_cache { "active" } else { "inactive (buffered reads)" }
    );
    let csv = grid.to_csv();
    match output {
        Some(path) => write_report(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Dense-oracle walk collecting (attention output, true active set) pairs
/// for every layer; the shared data source for training and evaluation.
fn collect_samples(
    model: &ToyModel<f32>,
    count: usize,
    seed: u64,
) -> flashneuron::Result<Vec<Vec<LabeledSample<f32>>>> {
    use rand::{Rng, SeedableRng};
    let mc = &model.config;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut per_layer: Vec<Vec<LabeledSample<f32>>> =
        (0..mc.n_layers).map(|_| Vec::with_capacity(count)).collect();
    for _ in 0..count {
        let token = rng.random_range(0..mc.vocab);
        let mut x: Vec<f32> = model.embed.row(token).to_vec();
        for l in 0..mc.n_layers {
            let a = attention_forward(&model.attn[l], &x);
            per_layer[l].push(LabeledSample {
                attention_output: a.clone(),
                active_set: model.true_active(l, &a),
            });
            let y = dense_oracle_forward(&a, &model.layers[l])?;
            for d in 0..mc.d_model {
                x[d] = a[d] + y[d];
            }
        }
    }
    Ok(per_layer)
}

#[derive(Serialize)]
struct LayerMetricsOut {
    layer: usize,
    false_negative_rate: f64,
    false_positive_rate: f64,
    predicted_density: f64,
    true_density: f64,
    over_prediction_factor: f64,
}

#[derive(Serialize)]
struct MetricsReport {
    schema: &'static str,
    samples_per_layer: usize,
    layers: Vec<LayerMetricsOut>,
}

fn metrics_report(per_layer: &[PredictorMetrics], samples: usize) -> MetricsReport {
    MetricsReport {
        schema: SCHEMA_PREDICTOR_METRICS,
        samples_per_layer: samples,
        layers: per_layer
            .iter()
            .enumerate()
            .map(|(layer, m)| LayerMetricsOut {
                layer,
                false_negative_rate: m.false_negative_rate,
                false_positive_rate: m.false_positive_rate,
                predicted_density: m.predicted_density,
                true_density: m.true_density,
                over_prediction_factor: m.over_prediction_factor(),
            })
            .collect(),
    }
}

fn emit_json(value: &impl Serialize, output: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value)?;
    match output {
        Some(path) => write_report(path, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_predictor(
    model_opts: &ModelOpts,
    samples: usize,
    rank: usize,
    epochs: usize,
    learning_rate: f64,
    threshold: f64,
    train_seed: u64,
    output: &Path,
    metrics_path: Option<&Path>,
) -> CliResult {
    let model = ToyModel::<f32>::generate(&model_opts.config())?;
    let cfg = TrainConfig { rank, epochs, learning_rate, seed: train_seed, threshold, layer: 0 };
    let predictors = train_model_predictors(&model, samples, &cfg)?;
    save_predictors(output, &predictors)?;
    println!("wrote {} predictors (rank {rank}) to {}", predictors.len(), output.display());

    let held_out = collect_samples(&model, samples.max(64) / 2, train_seed ^ 0x5EED)?;
    let per_layer: Vec<PredictorMetrics> = predictors
        .iter()
        .zip(&held_out)
        .map(|(p, s)| evaluate_predictor(p, s))
        .collect::<flashneuron::Result<_>>()?;
    emit_json(&metrics_report(&per_layer, held_out[0].len()), metrics_path)
}

fn cmd_eval_predictor(
    model_opts: &ModelOpts,
    predictors_path: &Path,
    samples: usize,
    eval_seed: u64,
    output: Option<&Path>,
) -> CliResult {
    let model = ToyModel::<f32>::generate(&model_opts.config())?;
    let predictors = load_predictors(predictors_path)?;
    if predictors.len() != model.config.n_layers {
        return Err(Failure::usage(format!(
            "{} predictors in {} but the model has {} layers",
            predictors.len(),
            predictors_path.display(),
            model.config.n_layers
        )));
    }
    let eval = collect_samples(&model, samples, eval_seed)?;
    let per_layer: Vec<PredictorMetrics> = predictors
        .iter()
        .zip(&eval)
        .map(|(p, s)| evaluate_predictor(p, s))
        .collect::<flashneuron::Result<_>>()?;
    emit_json(&metrics_report(&per_layer, samples), output)
}

#[derive(Serialize)]
struct RunSummaryReport<'a> {
    schema: &'static str,
    summary: &'a flashneuron::engine::RunSummary,
    generated: &'a [usize],
}

fn cmd_run(args: &RunArgs, report_dir: &Path) -> CliResult {
    let file_cfg: RunFileConfig = match &args.config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))?,
        )
        .map_err(|e| Failure::usage(format!("bad config {}: {e}", path.display())))?,
        None => RunFileConfig::default(),
    };

    let store = args
        .store
        .clone()
        .or(file_cfg.store)
        .ok_or_else(|| Failure::usage("--store (or config key \"store\") is required"))?;
    let predictors_path = args.predictors.clone().or(file_cfg.predictors).ok_or_else(|| {
        Failure::usage("--predictors (or config key \"predictors\") is required")
    })?;

    let bypass = match args.bypass {
        Some(b) => BypassMode::from(b),
        None => match file_cfg.bypass.as_deref() {
            Some(s) => s.parse::<BypassMode>()?,
            None => BypassMode::Try,
        },
    };
    let sampling = match args.sampling {
        Some(SamplingOpt::Greedy) => SamplingMode::Greedy,
        Some(SamplingOpt::Stochastic) => SamplingMode::Stochastic,
        None => match file_cfg.sampling.as_deref() {
            Some("greedy") | None => SamplingMode::Greedy,
            Some("stochastic") => SamplingMode::Stochastic,
            Some(other) => {
                return Err(Failure::usage(format!("unknown sampling mode {other:?}")))
            }
        },
    };

    let manifest = read_manifest(&store)?;
    let model_cfg = ToyModelConfig {
        d_model: manifest.d_model as usize,
        d_ffn: manifest.d_ffn as usize,
        n_layers: manifest.n_layers as usize,
        vocab: args.vocab.or(file_cfg.vocab).unwrap_or(512),
        target_density: args.density.or(file_cfg.density).unwrap_or(0.15),
        seed: args.model_seed.or(file_cfg.model_seed).unwrap_or(0),
    };
    let model = ToyModel::<f32>::generate(&model_cfg)?;
    let predictors = load_predictors(&predictors_path)?;

    let reader = FlashReader::open(
        &store,
        ReaderOptions {
            workers: args.workers.or(file_cfg.workers).unwrap_or(32),
            gap_threshold: args.gap_threshold.or(file_cfg.gap_threshold).unwrap_or(0),
            bypass,
        },
    )?;

    let run_cfg = RunConfig {
        n_tokens: args.tokens.or(file_cfg.tokens).unwrap_or(64),
        window_k: args.window_k.or(file_cfg.window_k).unwrap_or(4),
        req_headroom: args.headroom.or(file_cfg.headroom).unwrap_or(0.10),
        overflow: OverflowPolicy::DynamicShrink,
        sampling,
        sampling_seed: args.sampling_seed.or(file_cfg.sampling_seed).unwrap_or(0),
        calibration_tokens: args.calibration_tokens.or(file_cfg.calibration_tokens).unwrap_or(32),
        prompt: args.prompt.clone().or(file_cfg.prompt).unwrap_or_else(|| vec![0]),
    };

    let report = run_generation(&model, &predictors, &reader, &run_cfg)?;

    ensure_dir(report_dir)?;
    let mut tokens_jsonl = format!("{{\"schema\":\"{SCHEMA_RUN_TOKENS}\"}}\n");
    for record in &report.tokens {
        tokens_jsonl.push_str(&serde_json::to_string(record)?);
        tokens_jsonl.push('\n');
    }
    write_report(&report_dir.join("run_tokens.jsonl"), &tokens_jsonl)?;
    let summary = RunSummaryReport {
        schema: SCHEMA_RUN_SUMMARY,
        summary: &report.summary,
        generated: &report.generated,
    };
    write_report(&report_dir.join("run_summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    report.predicted_trace.write_jsonl(&report_dir.join("predicted_trace.jsonl"))?;
    report.true_trace.write_jsonl(&report_dir.join("true_trace.jsonl"))?;
    println!("wrote {}", report_dir.join("predicted_trace.jsonl").display());
    println!("wrote {}", report_dir.join("true_trace.jsonl").display());

    let s = &report.summary;
    println!(
        "{} tokens: io {:.3} ms + mem {:.3} ms + compute {:.3} ms = {:.3} ms/token; {} B fetched",
        s.tokens, s.mean_io_ms, s.mean_mem_ms, s.mean_compute_ms, s.mean_total_ms,
        s.total_bytes_fetched
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_cost(
    scenarios_path: Option<&Path>,
    trace_path: Option<&Path>,
    grid_path: Option<&Path>,
    k_max: usize,
    record_bytes: u64,
    resident_bytes: u64,
    threads: usize,
    output: Option<&Path>,
    report_dir: &Path,
) -> CliResult {
    let scenarios: Vec<IoScenario> = match scenarios_path {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))?,
        )
        .map_err(|e| Failure::usage(format!("bad scenario file {}: {e}", path.display())))?,
        None => reference_scenarios(),
    };
    let table = scenario_table_csv(&scenarios);
    match output {
        Some(path) => write_report(path, &table)?,
        None => print!("{table}"),
    }

    let Some(trace_path) = trace_path else {
        return Ok(());
    };
    let trace = ActivationTrace::read_jsonl(trace_path)?;
    let k_cap = k_max.min(trace.token_count().saturating_sub(1)).max(1);
    let s_agg = aggregated_usage(&trace, None, k_cap + 1)?;
    ensure_dir(report_dir)?;
    write_report(&report_dir.join("s_agg_increments.csv"), &increment_curve_csv(&s_agg))?;

    if let Some(grid_path) = grid_path {
        let grid = ThroughputGrid::from_csv(
            &std::fs::read_to_string(grid_path)
                .map_err(|e| Failure::io(format!("cannot read {}: {e}", grid_path.display())))?,
        )?;
        let fit = fit_throughput_model(&grid)?;
        println!(
            "fitted throughput model: t0 {:.1} us, per-stream {:.2} GiB/s, ceiling {:.2} GiB/s, saturation {} threads (log-rmse {:.3})",
            fit.model.t0_s * 1e6,
            fit.model.b_bytes_per_s / (1u64 << 30) as f64,
            fit.model.b_max_bytes_per_s / (1u64 << 30) as f64,
            fit.model.p_sat,
            fit.log_rmse
        );
        let rows = tradeoff_sweep(&trace, &fit.model, k_cap, record_bytes, resident_bytes, threads)?;
        write_report(&report_dir.join("window_tradeoff.csv"), &tradeoff_csv(&rows))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    trace_path: &Path,
    truth_path: Option<&Path>,
    layer: usize,
    window_k: usize,
    normalize: NormalizeOpt,
    record_bytes: u64,
    anchor: Option<usize>,
    report_dir: &Path,
) -> CliResult {
    use flashneuron::analysis::{
        closest_friend_bundling_cost, coactivation_matrix, friends_csv, log_log_slope,
        sparsity_csv, sparsity_report, FriendNormalization,
    };
    let trace = ActivationTrace::read_jsonl(trace_path)?;
    let norm = match normalize {
        NormalizeOpt::Anchor => FriendNormalization::Anchor,
        NormalizeOpt::Jaccard => FriendNormalization::Jaccard,
    };
    let stats = coactivation_matrix(&trace, layer)?;
    ensure_dir(report_dir)?;
    write_report(&report_dir.join("friends.csv"), &friends_csv(&stats, norm))?;

    let cost = closest_friend_bundling_cost(&trace, layer, &stats, record_bytes)?;
    #[derive(Serialize)]
    struct BundlingReport {
        schema: &'static str,
        layer: usize,
        record_bytes: u64,
        baseline_bytes: u64,
        bundled_bytes: u64,
        duplicate_bytes: u64,
        repeat_bytes: u64,
        offtarget_bytes: u64,
        redundancy_factor: f64,
    }
    let bundling = BundlingReport {
        schema: SCHEMA_BUNDLING,
        layer,
        record_bytes,
        baseline_bytes: cost.baseline_bytes,
        bundled_bytes: cost.bundled_bytes,
        duplicate_bytes: cost.duplicate_bytes,
        repeat_bytes: cost.repeat_bytes,
        offtarget_bytes: cost.offtarget_bytes,
        redundancy_factor: cost.redundancy_factor(),
    };
    write_report(&report_dir.join("bundling.json"), &serde_json::to_string_pretty(&bundling)?)?;

    let truth = match truth_path {
        Some(p) => Some(ActivationTrace::read_jsonl(p)?),
        None => None,
    };
    let report = match &truth {
        Some(t) => sparsity_report(t, Some(&trace), window_k)?,
        None => sparsity_report(&trace, None, window_k)?,
    };
    write_report(&report_dir.join("sparsity.csv"), &sparsity_csv(&report))?;

    let anchor = anchor.unwrap_or_else(|| {
        (0..stats.d_ffn).max_by_key(|&i| stats.activity[i]).unwrap_or(0)
    });
    if anchor >= stats.d_ffn {
        return Err(Failure::usage(format!(
            "anchor {anchor} out of range (d_ffn = {})",
            stats.d_ffn
        )));
    }
    let curve = stats.coactivation_curve(anchor, norm);
    match log_log_slope(&curve) {
        Some(slope) => println!(
            "closest-friend bundling redundancy {:.3}; coactivation curve of neuron {anchor} has log-log slope {:.2} ({} normalization)",
            cost.redundancy_factor(),
            slope,
            norm
        ),
        None => println!(
            "closest-friend bundling redundancy {:.3}; neuron {anchor} has no coactivations to fit a slope",
            cost.redundancy_factor()
        ),
    }
    Ok(())
}
