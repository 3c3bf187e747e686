//! LRCN keypress classifier: a time-distributed convolutional stack feeding
//! a single recurrent layer and a small fully connected head.
//!
//! The same convolution weights are applied to every frame of an 11-frame
//! keypress sample; the recurrent layer sees one flattened feature vector per
//! frame and its last hidden state goes through the head to a 10-way softmax.

pub mod layers;
mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{Activation, RecurrentKind};
use layers::{max_pool2, max_pool2_backward, softmax_rows, Conv2d, Dense, Param, Recurrent, RecurrentCache};
pub use train::{train, EpochRecord, Optimizer, TrainConfig, TrainOutcome};

use crate::video::{KeypressSample, SEQUENCE_LEN};

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sample shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("{split} split has no samples of digit {digit}")]
    MissingClass { split: &'static str, digit: u8 },
    #[error("sample without label in {0} split")]
    Unlabeled(&'static str),
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Categorical distribution over the ten digits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DigitDistribution([f64; NUM_CLASSES]);

impl DigitDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-5;

    pub fn new(p: [f64; NUM_CLASSES]) -> Result<Self, ModelError> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(ModelError::InvalidDistribution(format!("{p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(ModelError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self(p))
    }

    /// Normalizes non-negative weights to a distribution.
    pub fn from_weights(w: &[f64]) -> Result<Self, ModelError> {
        if w.len() != NUM_CLASSES {
            return Err(ModelError::InvalidDistribution(format!("{} entries", w.len())));
        }
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) || w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(ModelError::InvalidDistribution(format!("{w:?}")));
        }
        let mut p = [0.0; NUM_CLASSES];
        for (o, v) in p.iter_mut().zip(w) {
            *o = v / sum;
        }
        Ok(Self(p))
    }

    pub fn one_hot(digit: u8) -> Self {
        let mut p = [0.0; NUM_CLASSES];
        p[digit as usize] = 1.0;
        Self(p)
    }

    pub fn uniform() -> Self {
        Self([0.1; NUM_CLASSES])
    }

    pub fn p(&self, digit: u8) -> f64 {
        self.0[digit as usize]
    }

    pub fn probs(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    /// Most probable digit; ties go to the lowest digit.
    pub fn argmax(&self) -> u8 {
        let mut best = 0;
        for d in 1..NUM_CLASSES {
            if self.0[d] > self.0[best] {
                best = d;
            }
        }
        best as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square frame side `S`.
    pub input_size: usize,
    pub seq_len: usize,
    /// Each block: conv (same padding, ReLU) then 2×2 max-pool.
    pub conv: Vec<ConvSpec>,
    pub dropout: f32,
    pub recurrent: RecurrentKind,
    pub recurrent_units: usize,
    /// Hidden fully connected layers.
    pub dense: Vec<usize>,
    #[serde(default)]
    pub dense_activation: Activation,
    pub classes: usize,
}

impl ModelConfig {
    /// Architecture selected by the original random search.
    ///
    /// Search grid (documentation only, not re-run): kernels {3,6,9},
    /// 1-4 conv layers, dropout {0.01,0.05,0.1,0.2}, 1-3 recurrent layers of
    /// {32,64,128,256} units (LSTM or GRU), 1-4 dense layers of
    /// {16,32,64,128} units, flat or funnel.
    pub fn full() -> Self {
        Self {
            input_size: 250,
            seq_len: SEQUENCE_LEN,
            conv: vec![
                ConvSpec { filters: 32, kernel: 3 },
                ConvSpec { filters: 64, kernel: 9 },
                ConvSpec { filters: 128, kernel: 3 },
                ConvSpec { filters: 256, kernel: 3 },
            ],
            dropout: 0.1,
            recurrent: RecurrentKind::Lstm,
            recurrent_units: 128,
            dense: vec![64; 4],
            dense_activation: Activation::Relu,
            classes: NUM_CLASSES,
        }
    }

    /// CPU-sized variant: 64×64 input, quarter-width conv stack.
    pub fn small() -> Self {
        let mut cfg = Self::full();
        cfg.input_size = 64;
        for c in &mut cfg.conv {
            c.filters /= 4;
        }
        cfg
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    /// Spatial side after each pooling stage.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size;
        let mut out = vec![s];
        for _ in &self.conv {
            s /= 2;
            out.push(s);
        }
        out
    }

    pub fn feature_len(&self) -> usize {
        let side = *self.spatial_sizes().last().unwrap_or(&0);
        let channels = self.conv.last().map(|c| c.filters).unwrap_or(1);
        side * side * channels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.input_size == 0 || self.seq_len == 0 || self.classes < 2 {
            return bad("input_size, seq_len must be positive and classes >= 2".into());
        }
        if self.conv.is_empty() {
            return bad("at least one conv block is required".into());
        }
        if self.conv.iter().any(|c| c.filters == 0 || c.kernel == 0 || c.kernel % 2 == 0) {
            return bad("conv filters must be positive and kernels odd".into());
        }
        if self.spatial_sizes().contains(&0) {
            return bad(format!(
                "{} pooling stages reduce {}px input below 1px",
                self.conv.len(),
                self.input_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.recurrent_units == 0 || self.dense.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }
}

/// The classifier with its weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lrcn {
    config: ModelConfig,
    convs: Vec<Conv2d>,
    recurrent: Recurrent,
    dense: Vec<Dense>,
}

struct ConvCache {
    input: Vec<f32>,
    output: Vec<f32>,
    argmax: Vec<u32>,
}

/// Everything a backward pass needs from the forward pass.
pub(crate) struct ForwardCache {
    convs: Vec<ConvCache>,
    dropout_mask: Option<Vec<f32>>,
    features: Vec<f32>,
    recurrent: RecurrentCache,
    dense_io: Vec<(Vec<f32>, Vec<f32>)>,
    pub(crate) probs: Vec<f32>,
    batch: usize,
}

/// Builds a freshly initialized model.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Lrcn, ModelError> {
    Lrcn::new(config.clone(), seed)
}

impl Lrcn {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let convs = config
            .conv
            .iter()
            .map(|spec| {
                let c = Conv2d::new(cin, spec.filters, spec.kernel, &mut rng);
                cin = spec.filters;
                c
            })
            .collect();
        let recurrent = Recurrent::new(config.recurrent, config.feature_len(), config.recurrent_units, &mut rng);
        let mut width = config.recurrent_units;
        let mut dense: Vec<Dense> = config
            .dense
            .iter()
            .map(|&units| {
                let d = Dense::new(width, units, config.dense_activation, &mut rng);
                width = units;
                d
            })
            .collect();
        dense.push(Dense::new(width, config.classes, Activation::Linear, &mut rng));
        Ok(Self {
            config,
            convs,
            recurrent,
            dense,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum::<usize>()
            + self.recurrent.param_count()
            + self.dense.iter().map(Dense::param_count).sum::<usize>()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.recurrent.w_input);
        out.push(&mut self.recurrent.w_hidden);
        out.push(&mut self.recurrent.bias);
        out.push(&mut self.recurrent.bias_hidden);
        for d in &mut self.dense {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.recurrent.w_input);
        out.push(&self.recurrent.w_hidden);
        out.push(&self.recurrent.bias);
        out.push(&self.recurrent.bias_hidden);
        for d in &self.dense {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    fn check_sample(&self, s: &KeypressSample) -> Result<(), ModelError> {
        let side = self.config.input_size;
        if s.frames.len() != self.config.seq_len {
            return Err(ModelError::ShapeMismatch(format!(
                "{} frames, model expects {}",
                s.frames.len(),
                self.config.seq_len
            )));
        }
        if let Some(f) = s.frames.iter().find(|f| f.width != side || f.height != side) {
            return Err(ModelError::ShapeMismatch(format!(
                "frame {}x{}, model expects {side}x{side}",
                f.width, f.height
            )));
        }
        Ok(())
    }

    /// Stacks samples into `[batch·time, 1, S, S]`.
    pub(crate) fn pack(&self, samples: &[&KeypressSample]) -> Result<Vec<f32>, ModelError> {
        let side = self.config.input_size;
        let mut x = Vec::with_capacity(samples.len() * self.config.seq_len * side * side);
        for s in samples {
            self.check_sample(s)?;
            for f in &s.frames {
                x.extend_from_slice(&f.data);
            }
        }
        Ok(x)
    }

    /// Conv stack applied independently to `frames` images `[frames, 1, S, S]`,
    /// returning flattened features `[frames, feature_len]` (no dropout).
    pub fn frame_features(&self, images: &[f32], frames: usize) -> Vec<f32> {
        let mut x = images.to_vec();
        let sizes = self.config.spatial_sizes();
        for (i, conv) in self.convs.iter().enumerate() {
            let s = sizes[i];
            let a = conv.forward(&x, frames, s, s);
            x = max_pool2(&a, frames * conv.cout, s, s).values;
        }
        x
    }

    pub(crate) fn forward<R: Rng>(
        &self,
        x: Vec<f32>,
        batch: usize,
        dropout_rng: Option<&mut R>,
    ) -> ForwardCache {
        let time = self.config.seq_len;
        let frames = batch * time;
        let sizes = self.config.spatial_sizes();
        let mut cur = x;
        let mut convs = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            let s = sizes[i];
            let out = conv.forward(&cur, frames, s, s);
            let pooled = max_pool2(&out, frames * conv.cout, s, s);
            convs.push(ConvCache {
                input: cur,
                output: out,
                argmax: pooled.argmax,
            });
            cur = pooled.values;
        }
        let dropout_mask = match dropout_rng {
            Some(rng) if self.config.dropout > 0.0 => {
                let keep = 1.0 - self.config.dropout;
                let mask: Vec<f32> = (0..cur.len())
                    .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                cur.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                Some(mask)
            }
            _ => None,
        };
        let (h_last, rcache) = self.recurrent.forward(&cur, batch, time);
        let mut dense_io = Vec::with_capacity(self.dense.len());
        let mut act = h_last;
        for d in &self.dense {
            let y = d.forward(&act, batch);
            dense_io.push((act, y.clone()));
            act = y;
        }
        let probs = softmax_rows(&act, self.config.classes);
        ForwardCache {
            convs,
            dropout_mask,
            features: cur,
            recurrent: rcache,
            dense_io,
            probs,
            batch,
        }
    }

    /// Accumulates gradients of mean cross-entropy for `labels`.
    pub(crate) fn backward(&mut self, cache: ForwardCache, labels: &[u8]) {
        let classes = self.config.classes;
        let batch = cache.batch;
        let time = self.config.seq_len;
        let frames = batch * time;
        let mut grad = cache.probs.clone();
        for (b, &l) in labels.iter().enumerate() {
            grad[b * classes + l as usize] -= 1.0;
        }
        grad.iter_mut().for_each(|g| *g /= batch as f32);
        for (d, (x, y)) in self.dense.iter_mut().zip(&cache.dense_io).rev() {
            grad = d.backward(x, y, grad, batch);
        }
        let mut g_feat = self
            .recurrent
            .backward(&cache.features, &cache.recurrent, &grad, batch, time);
        if let Some(mask) = &cache.dropout_mask {
            g_feat.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        let sizes = self.config.spatial_sizes();
        let mut g = g_feat;
        for (i, (conv, cc)) in self.convs.iter_mut().zip(&cache.convs).enumerate().rev() {
            let s = sizes[i];
            let g_out = max_pool2_backward(&g, &cc.argmax, cc.output.len());
            match conv.backward(&cc.input, &cc.output, g_out, frames, s, s, i > 0) {
                Some(gi) => g = gi,
                None => break,
            }
        }
    }

    /// Eval-mode class probabilities, processed in chunks.
    pub fn predict_batch(&self, samples: &[&KeypressSample]) -> Result<Vec<DigitDistribution>, ModelError> {
        const CHUNK: usize = 16;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let x = self.pack(chunk)?;
            let cache = self.forward::<ChaCha8Rng>(x, chunk.len(), None);
            for row in cache.probs.chunks(self.config.classes) {
                out.push(to_distribution(row)?);
            }
        }
        Ok(out)
    }

    /// Train-mode (dropout active) probabilities; used to check dropout behavior.
    pub fn predict_train_mode(
        &self,
        samples: &[&KeypressSample],
        seed: u64,
    ) -> Result<Vec<DigitDistribution>, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = self.pack(samples)?;
        let cache = self.forward(x, samples.len(), Some(&mut rng));
        cache
            .probs
            .chunks(self.config.classes)
            .map(to_distribution)
            .collect()
    }

    pub fn save(&self, path: &Path, metadata: &serde_json::Value) -> Result<(), ModelError> {
        let params = self.params();
        let header = FileHeader {
            format: FORMAT_NAME.into(),
            config: self.config.clone(),
            tensors: params.iter().map(|p| p.len()).collect(),
            metadata: metadata.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for p in params {
            for v in &p.value {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a model and the metadata stored alongside it.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header_bytes)?;
        let header: FileHeader = serde_json::from_slice(&header_bytes)?;
        let mut model = Lrcn::new(header.config, 0)?;
        let params = model.params_mut();
        if params.len() != header.tensors.len() {
            return Err(ModelError::Format("tensor count mismatch".into()));
        }
        for (p, &n) in params.into_iter().zip(&header.tensors) {
            if p.len() != n {
                return Err(ModelError::Format(format!("tensor length {n}, expected {}", p.len())));
            }
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            for (v, b) in p.value.iter_mut().zip(buf.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        Ok((model, header.metadata))
    }
}

const MAGIC: &[u8; 8] = b"PSLRCN01";
const FORMAT_NAME: &str = "pinsight-lrcn";

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format: String,
    config: ModelConfig,
    tensors: Vec<usize>,
    metadata: serde_json::Value,
}

fn to_distribution(row: &[f32]) -> Result<DigitDistribution, ModelError> {
    let w: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    DigitDistribution::from_weights(&w)
}

/// Eval-mode prediction for one sample.
pub fn predict_digit(model: &Lrcn, sample: &KeypressSample) -> Result<DigitDistribution, ModelError> {
    Ok(model.predict_batch(&[sample])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::Image;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            seq_len: 2,
            conv: vec![ConvSpec { filters: 2, kernel: 3 }, ConvSpec { filters: 3, kernel: 3 }],
            dropout: 0.0,
            recurrent: RecurrentKind::Lstm,
            recurrent_units: 4,
            dense: vec![5],
            dense_activation: Activation::Relu,
            classes: NUM_CLASSES,
        }
    }

    fn random_sample(cfg: &ModelConfig, seed: u64, label: u8) -> KeypressSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.input_size;
        let frames = (0..cfg.seq_len)
            .map(|_| Image::from_data(s, s, (0..s * s).map(|_| rng.gen::<f32>()).collect()))
            .collect();
        KeypressSample::new_labeled(frames, label)
    }

    /// Central finite differences on a handful of weights of every tensor.
    fn gradient_check(kind: RecurrentKind) {
        let mut cfg = tiny_config();
        cfg.recurrent = kind;
        let mut model = Lrcn::new(cfg.clone(), 11).unwrap();
        let samples = [random_sample(&cfg, 1, 3), random_sample(&cfg, 2, 7)];
        let refs: Vec<&KeypressSample> = samples.iter().collect();
        let labels = [3u8, 7];
        let loss = |m: &Lrcn| -> f64 {
            let c = m.forward::<ChaCha8Rng>(m.pack(&refs).unwrap(), 2, None);
            labels
                .iter()
                .enumerate()
                .map(|(b, &l)| -(c.probs[b * 10 + l as usize] as f64).ln())
                .sum::<f64>()
                / 2.0
        };
        for p in model.params_mut() {
            p.zero_grad();
        }
        let cache = model.forward::<ChaCha8Rng>(model.pack(&refs).unwrap(), 2, None);
        model.backward(cache, &labels);
        let analytic: Vec<Vec<f32>> = model.params_mut().iter().map(|p| p.grad.clone()).collect();
        let n_tensors = analytic.len();
        let mut failures = Vec::new();
        for t in 0..n_tensors {
            let len = analytic[t].len();
            for &i in [0usize, len / 5, len / 3, len / 2, 2 * len / 3, len.saturating_sub(1)].iter().filter(|_| len > 0) {
                let eps = 1e-3f32;
                let orig = model.params_mut()[t].value[i];
                model.params_mut()[t].value[i] = orig + eps;
                let lp = loss(&model);
                model.params_mut()[t].value[i] = orig - eps;
                let lm = loss(&model);
                model.params_mut()[t].value[i] = orig;
                let numeric = (lp - lm) / (2.0 * eps as f64);
                let a = analytic[t][i] as f64;
                if (numeric - a).abs() >= 2e-3 + 0.05 * numeric.abs().max(a.abs()) {
                    failures.push(format!("tensor {t} index {i}: numeric {numeric} analytic {a}"));
                }
            }
        }
        assert!(failures.is_empty(), "{kind:?}: {failures:#?}");
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        gradient_check(RecurrentKind::Lstm);
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        gradient_check(RecurrentKind::Gru);
    }

    #[test]
    fn pooling_below_one_pixel_is_invalid() {
        let cfg = ModelConfig::full().with_input_size(8);
        assert!(matches!(Lrcn::new(cfg, 0), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = tiny_config();
        let model = Lrcn::new(cfg.clone(), 0).unwrap();
        let mut bad = random_sample(&cfg, 0, 1);
        bad.frames.pop();
        assert!(matches!(predict_digit(&model, &bad), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn distribution_validation() {
        assert!(DigitDistribution::new([0.2; 10]).is_err());
        assert!(DigitDistribution::from_weights(&[0.0; 10]).is_err());
        assert_eq!(DigitDistribution::uniform().argmax(), 0);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = tiny_config();
        let model = Lrcn::new(cfg.clone(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lrcn");
        model.save(&path, &serde_json::json!({"seed": 5})).unwrap();
        let (loaded, meta) = Lrcn::load(&path).unwrap();
        assert_eq!(meta["seed"], 5);
        let s = random_sample(&cfg, 9, 0);
        assert_eq!(
            predict_digit(&model, &s).unwrap(),
            predict_digit(&loaded, &s).unwrap()
        );
    }
}
