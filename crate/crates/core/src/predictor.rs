//! Per-layer low-rank activation predictors.
//!
//! A predictor scores every FFN neuron from the attention output x as
//! `sigmoid((x'A)B)` and marks neurons with score strictly above the
//! threshold as active. Training minimizes a class-balanced binary
//! cross-entropy (positive and negative terms reweighted by inverse class
//! frequency) with full-batch gradient descent; everything is deterministic
//! given the seed.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{sigmoid, Mat};
use crate::scalar::Scalar;

pub const PREDICTOR_MAGIC: [u8; 4] = *b"FNPR";
pub const PREDICTOR_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams<T> {
    pub layer: u32,
    pub rank: u32,
    /// d_model x rank.
    pub factor_a: Mat<T>,
    /// rank x d_ffn.
    pub factor_b: Mat<T>,
    /// Scores strictly above this are predicted active.
    pub threshold: T,
}

/// One training sample: the attention output and which neurons actually
/// survived ReLU for it.
#[derive(Debug, Clone)]
pub struct LabeledSample<T> {
    pub attention_output: Vec<T>,
    pub active_set: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictorMetrics {
    pub false_negative_rate: f64,
    pub false_positive_rate: f64,
    pub predicted_density: f64,
    pub true_density: f64,
}

impl PredictorMetrics {
    /// Predicted positives per true positive; the over-prediction factor.
    pub fn over_prediction_factor(&self) -> f64 {
        if self.true_density == 0.0 {
            f64::NAN
        } else {
            self.predicted_density / self.true_density
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub rank: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub threshold: f64,
    pub layer: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            epochs: 200,
            learning_rate: 0.5,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            layer: 0,
        }
    }
}

impl<T: Scalar> PredictorParams<T> {
    pub fn d_model(&self) -> usize {
        self.factor_a.rows()
    }

    pub fn d_ffn(&self) -> usize {
        self.factor_b.cols()
    }

    /// Small uniform random factors, deterministic in the seed.
    pub fn init(layer: u32, d_model: usize, d_ffn: usize, rank: usize, threshold: T, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |_: usize, _: usize| T::from_f64(rng.random_range(-0.1..0.1)).unwrap();
        let factor_a = Mat::from_fn(d_model, rank, &mut draw);
        let factor_b = Mat::from_fn(rank, d_ffn, &mut draw);
        Self { layer, rank: rank as u32, factor_a, factor_b, threshold }
    }

    /// Pre-sigmoid logits `(x'A)B`, one per neuron.
    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d_model() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} elements, predictor expects {}",
                x.len(),
                self.d_model()
            )));
        }
        let h = self.factor_a.matvec_t(x);
        Ok(self.factor_b.matvec_t(&h))
    }

    pub fn scores(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Indices with score strictly above the threshold, ascending.
    pub fn predict_active(&self, x: &[T]) -> Result<Vec<u32>> {
        let scores = self.scores(x)?;
        Ok(scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > self.threshold)
            .map(|(i, _)| i as u32)
            .collect())
    }
}

fn class_counts<T: Scalar>(samples: &[LabeledSample<T>], d_ffn: usize) -> (u64, u64) {
    let mut positives = 0u64;
    for s in samples {
        positives += s.active_set.len() as u64;
    }
    let total = samples.len() as u64 * d_ffn as u64;
    (positives, total - positives)
}

/// Class-balanced BCE over all (sample, neuron) pairs: each term is
/// weighted by the inverse frequency of its class, so positives and
/// negatives contribute equally in aggregate regardless of sparsity.
pub fn balanced_loss<T: Scalar>(
    params: &PredictorParams<T>,
    samples: &[LabeledSample<T>],
) -> Result<f64> {
    let (loss, _, _) = loss_and_grad(params, samples, false)?;
    Ok(loss)
}

/// Loss plus analytic gradients with respect to both factors.
pub fn balanced_loss_grad<T: Scalar>(
    params: &PredictorParams<T>,
    samples: &[LabeledSample<T>],
) -> Result<(f64, Mat<f64>, Mat<f64>)> {
    let (loss, ga, gb) = loss_and_grad(params, samples, true)?;
    Ok((loss, ga.unwrap(), gb.unwrap()))
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn loss_and_grad<T: Scalar>(
    params: &PredictorParams<T>,
    samples: &[LabeledSample<T>],
    want_grad: bool,
) -> Result<(f64, Option<Mat<f64>>, Option<Mat<f64>>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let d_model = params.d_model();
    let d_ffn = params.d_ffn();
    let rank = params.rank as usize;
    let (pos, neg) = class_counts(samples, d_ffn);
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels {
            layer: params.layer as usize,
            detail: format!("{pos} positive and {neg} negative labels"),
        });
    }
    let total = (pos + neg) as f64;
    let w_pos = total / (2.0 * pos as f64);
    let w_neg = total / (2.0 * neg as f64);
    let norm = 1.0 / total;

    let mut loss = 0.0;
    let mut grad_a = want_grad.then(|| Mat::<f64>::zeros(d_model, rank));
    let mut grad_b = want_grad.then(|| Mat::<f64>::zeros(rank, d_ffn));
    let mut is_active = vec![false; d_ffn];

    for sample in samples {
        let x: Vec<f64> = sample
            .attention_output
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        if x.len() != d_model {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} elements, predictor expects {d_model}",
                x.len()
            )));
        }
        is_active.fill(false);
        for &i in &sample.active_set {
            is_active[i as usize] = true;
        }
        // h = x'A, z = hB, all in f64 for gradient fidelity
        let mut h = vec![0.0f64; rank];
        for (d, &xv) in x.iter().enumerate() {
            let row = params.factor_a.row(d);
            for (j, hj) in h.iter_mut().enumerate() {
                *hj += xv * row[j].to_f64().unwrap();
            }
        }
        let mut z = vec![0.0f64; d_ffn];
        for (j, &hj) in h.iter().enumerate() {
            let row = params.factor_b.row(j);
            for (i, zi) in z.iter_mut().enumerate() {
                *zi += hj * row[i].to_f64().unwrap();
            }
        }
        let mut dz = vec![0.0f64; d_ffn];
        for i in 0..d_ffn {
            let s = 1.0 / (1.0 + (-z[i]).exp());
            if is_active[i] {
                loss += w_pos * softplus(-z[i]);
                dz[i] = w_pos * (s - 1.0);
            } else {
                loss += w_neg * softplus(z[i]);
                dz[i] = w_neg * s;
            }
        }
        if let (Some(ga), Some(gb)) = (grad_a.as_mut(), grad_b.as_mut()) {
            // dB += h' dz; dh = B dz; dA += x dh'
            let mut dh = vec![0.0f64; rank];
            for (j, &hj) in h.iter().enumerate() {
                let brow = params.factor_b.row(j);
                let grow = gb.row_mut(j);
                let mut acc = 0.0;
                for i in 0..d_ffn {
                    grow[i] += hj * dz[i] * norm;
                    acc += brow[i].to_f64().unwrap() * dz[i];
                }
                dh[j] = acc;
            }
            for (d, &xv) in x.iter().enumerate() {
                let garow = ga.row_mut(d);
                for (j, &dhj) in dh.iter().enumerate() {
                    garow[j] += xv * dhj * norm;
                }
            }
        }
    }
    Ok((loss * norm, grad_a, grad_b))
}

/// Full-batch gradient descent on the balanced objective.
pub fn train_predictor<T: Scalar>(
    samples: &[LabeledSample<T>],
    d_model: usize,
    d_ffn: usize,
    cfg: &TrainConfig,
) -> Result<PredictorParams<T>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let (pos, neg) = class_counts(samples, d_ffn);
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels {
            layer: cfg.layer as usize,
            detail: format!("{pos} positive and {neg} negative labels"),
        });
    }
    let threshold = T::from_f64(cfg.threshold).unwrap();
    let mut params = PredictorParams::init(cfg.layer, d_model, d_ffn, cfg.rank, threshold, cfg.seed);
    for _ in 0..cfg.epochs {
        let (_, ga, gb) = balanced_loss_grad(&params, samples)?;
        let lr = cfg.learning_rate;
        for d in 0..d_model {
            let row = params.factor_a.row_mut(d);
            let grow = ga.row(d);
            for j in 0..cfg.rank {
                row[j] = row[j] - T::from_f64(lr * grow[j]).unwrap();
            }
        }
        for j in 0..cfg.rank {
            let row = params.factor_b.row_mut(j);
            let grow = gb.row(j);
            for i in 0..d_ffn {
                row[i] = row[i] - T::from_f64(lr * grow[i]).unwrap();
            }
        }
    }
    Ok(params)
}

/// Confusion rates of `params` against the samples' ground-truth sets.
pub fn evaluate_predictor<T: Scalar>(
    params: &PredictorParams<T>,
    samples: &[LabeledSample<T>],
) -> Result<PredictorMetrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation samples".into()));
    }
    let d_ffn = params.d_ffn();
    let (mut tp, mut fp, mut tn, mut fal_n) = (0u64, 0u64, 0u64, 0u64);
    let mut is_active = vec![false; d_ffn];
    for sample in samples {
        is_active.fill(false);
        for &i in &sample.active_set {
            if i as usize >= d_ffn {
                return Err(Error::IndexOutOfRange { index: i, d_ffn: d_ffn as u32 });
            }
            is_active[i as usize] = true;
        }
        let predicted = params.predict_active(&sample.attention_output)?;
        let mut is_predicted = vec![false; d_ffn];
        for &i in &predicted {
            is_predicted[i as usize] = true;
        }
        for i in 0..d_ffn {
            match (is_active[i], is_predicted[i]) {
                (true, true) => tp += 1,
                (true, false) => fal_n += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
    }
    let total = (tp + fp + tn + fal_n) as f64;
    let rate = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(PredictorMetrics {
        false_negative_rate: rate(fal_n, tp + fal_n),
        false_positive_rate: rate(fp, fp + tn),
        predicted_density: (tp + fp) as f64 / total,
        true_density: (tp + fal_n) as f64 / total,
    })
}

/// Write per-layer predictors: header (magic, version, d_model, d_ffn,
/// n_layers, scalar_width=4) then per layer (layer, rank, threshold f32,
/// A row-major, B row-major), all little-endian f32.
pub fn save_predictors(path: &Path, predictors: &[PredictorParams<f32>]) -> Result<()> {
    if predictors.is_empty() {
        return Err(Error::InvalidArgument("no predictors to save".into()));
    }
    let d_model = predictors[0].d_model() as u32;
    let d_ffn = predictors[0].d_ffn() as u32;
    for p in predictors {
        if p.d_model() as u32 != d_model || p.d_ffn() as u32 != d_ffn {
            return Err(Error::DimensionMismatch(format!(
                "layer {}: {}x{}, expected {}x{}",
                p.layer,
                p.d_model(),
                p.d_ffn(),
                d_model,
                d_ffn
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&PREDICTOR_MAGIC)?;
    for v in [PREDICTOR_VERSION, d_model, d_ffn, predictors.len() as u32, 4] {
        w.write_all(&v.to_le_bytes())?;
    }
    for p in predictors {
        w.write_all(&p.layer.to_le_bytes())?;
        w.write_all(&p.rank.to_le_bytes())?;
        w.write_all(&p.threshold.to_le_bytes())?;
        for &v in p.factor_a.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in p.factor_b.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptManifest("truncated predictor file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat<f32>> {
        let raw = self.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Mat::from_vec(data, rows, cols))
    }
}

pub fn load_predictors(path: &Path) -> Result<Vec<PredictorParams<f32>>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != PREDICTOR_MAGIC {
        return Err(Error::CorruptManifest("bad predictor magic".into()));
    }
    let version = cur.u32()?;
    if version != PREDICTOR_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: PREDICTOR_VERSION });
    }
    let d_model = cur.u32()? as usize;
    let d_ffn = cur.u32()? as usize;
    let n_layers = cur.u32()? as usize;
    let width = cur.u32()?;
    if width != 4 {
        return Err(Error::CorruptManifest(format!("predictor scalar_width {width}, expected 4")));
    }
    if n_layers == 0 || n_layers > 1 << 20 {
        return Err(Error::CorruptManifest(format!("implausible n_layers {n_layers}")));
    }
    let mut out = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer = cur.u32()?;
        let rank = cur.u32()? as usize;
        let threshold = cur.f32()?;
        let factor_a = cur.mat(d_model, rank)?;
        let factor_b = cur.mat(rank, d_ffn)?;
        out.push(PredictorParams { layer, rank: rank as u32, factor_a, factor_b, threshold });
    }
    if cur.pos != bytes.len() {
        return Err(Error::CorruptManifest("trailing bytes in predictor file".into()));
    }
    Ok(out)
}

/// Ground-truth generator for predictor tests: a hidden low-rank linear map
/// decides activations, so a predictor of at least that rank can learn it.
pub mod synthetic {
    use super::*;
    use rand_distr::StandardNormal;

    pub struct HiddenRankModel {
        pub factor_a: Mat<f64>,
        pub factor_b: Mat<f64>,
    }

    impl HiddenRankModel {
        pub fn new(d_model: usize, d_ffn: usize, rank: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |_: usize, _: usize| {
                let v: f64 = rng.sample(StandardNormal);
                v / (rank as f64).sqrt()
            };
            Self {
                factor_a: Mat::from_fn(d_model, rank, &mut draw),
                factor_b: Mat::from_fn(rank, d_ffn, &mut draw),
            }
        }

        pub fn active_set(&self, x: &[f64]) -> Vec<u32> {
            let h = self.factor_a.matvec_t(x);
            let z = self.factor_b.matvec_t(&h);
            z.iter()
                .enumerate()
                .filter(|(_, &zi)| zi > 0.0)
                .map(|(i, _)| i as u32)
                .collect()
        }
    }

    /// Samples with a margin: per-neuron scores near zero are nudged away
    /// so the classes are cleanly separable and recall targets are fair.
    pub fn separable_samples(
        model: &HiddenRankModel,
        count: usize,
        seed: u64,
    ) -> Vec<LabeledSample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_model = model.factor_a.rows();
        (0..count)
            .map(|_| {
                let x: Vec<f64> = (0..d_model).map(|_| rng.sample(StandardNormal)).collect();
                LabeledSample { active_set: model.active_set(&x), attention_output: x }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_params(threshold: f64) -> PredictorParams<f64> {
        PredictorParams::init(0, 6, 10, 3, threshold, 42)
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<LabeledSample<f64>> {
        let model = synthetic::HiddenRankModel::new(6, 10, 2, seed);
        synthetic::separable_samples(&model, n, seed ^ 1)
    }

    #[test]
    fn zero_factors_predict_nothing_at_half_threshold() {
        let params = PredictorParams::<f64> {
            layer: 0,
            rank: 2,
            factor_a: Mat::zeros(4, 2),
            factor_b: Mat::zeros(2, 8),
            threshold: 0.5,
        };
        // score is exactly 0.5 everywhere; strictly-greater keeps the set empty
        assert!(params.predict_active(&[1.0, -2.0, 3.0, 0.5]).unwrap().is_empty());
    }

    #[test]
    fn zero_threshold_predicts_everything() {
        let mut params = toy_params(0.0);
        params.threshold = 0.0;
        let set = params.predict_active(&[1.0; 6]).unwrap();
        assert_eq!(set, (0..10).collect::<Vec<u32>>());
    }

    #[test]
    fn predicted_set_matches_elementwise_recomputation() {
        let params = toy_params(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let set = params.predict_active(&x).unwrap();
            // brute force: recompute score per neuron from scratch
            let mut expected = Vec::new();
            for i in 0..10 {
                let mut z = 0.0;
                for j in 0..3 {
                    let mut h = 0.0;
                    for d in 0..6 {
                        h += x[d] * params.factor_a.at(d, j);
                    }
                    z += h * params.factor_b.at(j, i);
                }
                if 1.0 / (1.0 + (-z).exp()) > 0.5 {
                    expected.push(i as u32);
                }
            }
            assert_eq!(set, expected);
        }
    }

    #[test]
    fn threshold_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for round in 0..50 {
            let mut params = toy_params(0.0);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t1 = rng.random_range(0.05..0.5);
            let t2 = rng.random_range(t1..0.95);
            params.threshold = t1;
            let wide = params.predict_active(&x).unwrap();
            params.threshold = t2;
            let narrow = params.predict_active(&x).unwrap();
            assert!(
                narrow.iter().all(|i| wide.contains(i)),
                "round {round}: higher threshold added an index"
            );
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let params = toy_params(0.5);
        assert!(matches!(
            params.predict_active(&[0.0; 5]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn balanced_loss_is_symmetric_under_label_and_logit_flip() {
        // swapping labels and negating logits swaps the class weights too,
        // leaving the weighted loss unchanged
        let samples = toy_samples(20, 5);
        let params = toy_params(0.5);
        let loss = balanced_loss(&params, &samples).unwrap();

        let mut flipped_params = params.clone();
        for v in flipped_params.factor_b.as_mut_slice() {
            *v = -*v;
        }
        let flipped_samples: Vec<LabeledSample<f64>> = samples
            .iter()
            .map(|s| LabeledSample {
                attention_output: s.attention_output.clone(),
                active_set: (0..10u32).filter(|i| !s.active_set.contains(i)).collect(),
            })
            .collect();
        let flipped_loss = balanced_loss(&flipped_params, &flipped_samples).unwrap();
        assert!(
            (loss - flipped_loss).abs() < 1e-12,
            "loss {loss} vs flipped {flipped_loss}"
        );
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let samples = toy_samples(8, 11);
        let params = toy_params(0.5);
        let (_, ga, gb) = balanced_loss_grad(&params, &samples).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);

        let mut probe = params.clone();
        for d in 0..6 {
            for j in 0..3 {
                let orig = probe.factor_a.at(d, j);
                *probe.factor_a.at_mut(d, j) = orig + h;
                let up = balanced_loss(&probe, &samples).unwrap();
                *probe.factor_a.at_mut(d, j) = orig - h;
                let down = balanced_loss(&probe, &samples).unwrap();
                *probe.factor_a.at_mut(d, j) = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel(fd, ga.at(d, j)) < 1e-4,
                    "A[{d},{j}]: fd {fd} vs analytic {}",
                    ga.at(d, j)
                );
            }
        }
        for j in 0..3 {
            for i in 0..10 {
                let orig = probe.factor_b.at(j, i);
                *probe.factor_b.at_mut(j, i) = orig + h;
                let up = balanced_loss(&probe, &samples).unwrap();
                *probe.factor_b.at_mut(j, i) = orig - h;
                let down = balanced_loss(&probe, &samples).unwrap();
                *probe.factor_b.at_mut(j, i) = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel(fd, gb.at(j, i)) < 1e-4,
                    "B[{j},{i}]: fd {fd} vs analytic {}",
                    gb.at(j, i)
                );
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let samples = toy_samples(10, 2);
        let cfg = TrainConfig { epochs: 0, rank: 3, seed: 7, ..Default::default() };
        let trained = train_predictor(&samples, 6, 10, &cfg).unwrap();
        let init = PredictorParams::<f64>::init(0, 6, 10, 3, 0.5, 7);
        assert_eq!(trained, init);
    }

    #[test]
    fn degenerate_labels_name_the_layer() {
        let samples = vec![LabeledSample::<f64> {
            attention_output: vec![0.0; 6],
            active_set: vec![],
        }];
        let cfg = TrainConfig { layer: 3, ..Default::default() };
        match train_predictor(&samples, 6, 10, &cfg) {
            Err(Error::DegenerateLabels { layer: 3, .. }) => {}
            other => panic!("expected degenerate labels for layer 3, got {other:?}"),
        }
    }

    #[test]
    fn trained_predictor_recall_on_separable_data() {
        let model = synthetic::HiddenRankModel::new(16, 32, 2, 100);
        let train = synthetic::separable_samples(&model, 300, 101);
        let held_out = synthetic::separable_samples(&model, 100, 102);
        let cfg = TrainConfig { rank: 2, epochs: 300, learning_rate: 1.0, seed: 1, ..Default::default() };
        let params = train_predictor(&train, 16, 32, &cfg).unwrap();
        let metrics = evaluate_predictor(&params, &held_out).unwrap();
        let recall = 1.0 - metrics.false_negative_rate;
        assert!(recall >= 0.95, "recall {recall} below 0.95: {metrics:?}");
    }

    #[test]
    fn full_rank_is_at_least_as_good_as_rank_two() {
        let model = synthetic::HiddenRankModel::new(16, 32, 2, 200);
        let train = synthetic::separable_samples(&model, 300, 201);
        let held_out = synthetic::separable_samples(&model, 100, 202);
        let base = TrainConfig { epochs: 300, learning_rate: 1.0, seed: 1, ..Default::default() };
        let low = train_predictor(&train, 16, 32, &TrainConfig { rank: 2, ..base.clone() }).unwrap();
        let full = train_predictor(&train, 16, 32, &TrainConfig { rank: 16, ..base }).unwrap();
        let low_fnr = evaluate_predictor(&low, &held_out).unwrap().false_negative_rate;
        let full_fnr = evaluate_predictor(&full, &held_out).unwrap().false_negative_rate;
        assert!(
            full_fnr <= low_fnr + 1e-9,
            "full-rank FNR {full_fnr} worse than rank-2 {low_fnr}"
        );
    }

    #[test]
    fn metrics_match_independent_confusion_recount() {
        let samples = toy_samples(30, 21);
        let cfg = TrainConfig { rank: 2, epochs: 50, learning_rate: 0.7, ..Default::default() };
        let params = train_predictor(&samples, 6, 10, &cfg).unwrap();
        let metrics = evaluate_predictor(&params, &samples).unwrap();

        // independent recount straight from score definitions
        let (mut tp, mut fp, mut tn, mut fal_n) = (0u64, 0u64, 0u64, 0u64);
        for s in &samples {
            let scores = params.scores(&s.attention_output).unwrap();
            for (i, &score) in scores.iter().enumerate() {
                let truth = s.active_set.contains(&(i as u32));
                let pred = score > params.threshold;
                match (truth, pred) {
                    (true, true) => tp += 1,
                    (true, false) => fal_n += 1,
                    (false, true) => fp += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let total = (tp + fp + tn + fal_n) as f64;
        assert!((metrics.false_negative_rate - fal_n as f64 / (tp + fal_n) as f64).abs() < 1e-12);
        assert!((metrics.false_positive_rate - fp as f64 / (fp + tn) as f64).abs() < 1e-12);
        assert!((metrics.predicted_density - (tp + fp) as f64 / total).abs() < 1e-12);
        assert!((metrics.true_density - (tp + fal_n) as f64 / total).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_inverted_predictors_hit_the_corners() {
        // one sample, neuron 0 active; craft params so scores are extreme
        let sample = LabeledSample::<f64> {
            attention_output: vec![1.0],
            active_set: vec![0],
        };
        let perfect = PredictorParams {
            layer: 0,
            rank: 1,
            factor_a: Mat::from_vec(vec![1.0], 1, 1),
            factor_b: Mat::from_vec(vec![10.0, -10.0], 1, 2),
            threshold: 0.5,
        };
        let m = evaluate_predictor(&perfect, &[sample.clone()]).unwrap();
        assert_eq!(m.false_negative_rate, 0.0);
        assert_eq!(m.false_positive_rate, 0.0);

        let inverted = PredictorParams {
            factor_b: Mat::from_vec(vec![-10.0, 10.0], 1, 2),
            ..perfect
        };
        let m = evaluate_predictor(&inverted, &[sample]).unwrap();
        assert_eq!(m.false_negative_rate, 1.0);
        assert_eq!(m.false_positive_rate, 1.0);
    }

    #[test]
    fn predictor_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.fnpr");
        let predictors: Vec<PredictorParams<f32>> = (0..3)
            .map(|l| PredictorParams::init(l, 8, 16, if l == 2 { 6 } else { 2 }, 0.5, l as u64))
            .collect();
        save_predictors(&path, &predictors).unwrap();
        assert_eq!(load_predictors(&path).unwrap(), predictors);
    }

    #[test]
    fn truncated_predictor_file_is_corrupt() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.fnpr");
        let predictors = vec![PredictorParams::<f32>::init(0, 4, 8, 2, 0.5, 0)];
        save_predictors(&path, &predictors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_predictors(&path), Err(Error::CorruptManifest(_))));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn raising_threshold_never_adds_indices(
                seed in 0u64..300,
                t1 in 0.05f64..0.90,
                dt in 0.01f64..0.09,
            ) {
                let mut params = PredictorParams::<f64>::init(0, 5, 12, 3, t1, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
                let wide = params.predict_active(&x).unwrap();
                params.threshold = t1 + dt;
                let narrow = params.predict_active(&x).unwrap();
                prop_assert!(narrow.iter().all(|i| wide.contains(i)));
            }
        }
    }
}
