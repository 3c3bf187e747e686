use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Lrcn, ModelError, NUM_CLASSES};
use crate::video::{augment, AugmentParams, KeypressSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, epsilon: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Optimization settings. Loss is categorical cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` disables augmentation.
    pub augment: Option<AugmentParams>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            optimizer: Optimizer::Sgd { momentum: 0.0 },
            batch_size: 16,
            epochs: 70,
            augment: Some(AugmentParams::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for CPU runs on the synthetic corpus: a few hundred
    /// steps, so Adam instead of plain SGD.
    pub fn small(seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            epochs: 8,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights after the final epoch.
    pub model: Lrcn,
    /// Weights from the epoch with the highest validation accuracy
    /// (earliest on ties).
    pub best: Lrcn,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_acc\n");
        for r in &self.history {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.epoch, r.train_loss, r.train_acc, r.val_acc));
        }
        s
    }
}

fn labels_of(samples: &[KeypressSample], split: &'static str) -> Result<Vec<u8>, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptySplit { split });
    }
    let labels: Vec<u8> = samples
        .iter()
        .map(|s| s.label.ok_or(ModelError::Unlabeled(split)))
        .collect::<Result<_, _>>()?;
    for digit in 0..NUM_CLASSES as u8 {
        if !labels.contains(&digit) {
            return Err(ModelError::MissingClass { split, digit });
        }
    }
    Ok(labels)
}

pub fn accuracy(model: &Lrcn, samples: &[KeypressSample], labels: &[u8]) -> Result<f64, ModelError> {
    let refs: Vec<&KeypressSample> = samples.iter().collect();
    let preds = model.predict_batch(&refs)?;
    let correct = preds.iter().zip(labels).filter(|(p, &l)| p.argmax() == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Sets the SSE flush-to-zero and denormals-are-zero bits for the current
/// thread, restoring the previous state on drop. Tiny gradients and Adam
/// moments otherwise go subnormal late in training and slow every
/// arithmetic op that touches them.
struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[allow(deprecated)]
    fn enable() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: SSE is baseline on x86_64; only the FTZ (bit 15) and
            // DAZ (bit 6) mode bits are changed.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | 0x8040) };
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `enable`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

/// Trains `model` in place on `train_samples`, evaluating on `val_samples`
/// after each epoch.
///
/// When augmentation is enabled, each epoch adds
/// `round(synthetic_fraction · n)` freshly augmented copies of randomly
/// chosen training samples.
pub fn train(
    mut model: Lrcn,
    train_samples: &[KeypressSample],
    val_samples: &[KeypressSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(ModelError::InvalidConfig(format!(
            "epochs={}, batch_size={}, learning_rate={}",
            cfg.epochs, cfg.batch_size, cfg.learning_rate
        )));
    }
    labels_of(train_samples, "train")?;
    let val_labels = labels_of(val_samples, "validation")?;
    for s in train_samples.iter().chain(val_samples) {
        model.check_sample(s)?;
    }

    let _ftz = FlushDenormals::enable();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut first: Vec<Vec<f32>> = model.params_mut().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut second = first.clone();
    let mut step = 0i32;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let mut pool: Vec<KeypressSample> = Vec::new();
        if let Some(params) = &cfg.augment {
            let extra = (params.synthetic_fraction * train_samples.len() as f64).round() as usize;
            for _ in 0..extra {
                let src = &train_samples[rng.gen_range(0..train_samples.len())];
                pool.push(augment(src, params, rng.gen()));
            }
        }
        let mut order: Vec<usize> = (0..train_samples.len() + pool.len()).collect();
        order.shuffle(&mut rng);
        let fetch = |i: usize| -> &KeypressSample {
            if i < train_samples.len() {
                &train_samples[i]
            } else {
                &pool[i - train_samples.len()]
            }
        };

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&KeypressSample> = batch_idx.iter().map(|&i| fetch(i)).collect();
            let labels: Vec<u8> = batch.iter().map(|s| s.label.expect("checked")).collect();
            for p in model.params_mut() {
                p.zero_grad();
            }
            let x = model.pack(&batch)?;
            let cache = model.forward(x, batch.len(), Some(&mut rng));
            for (b, &l) in labels.iter().enumerate() {
                let row = &cache.probs[b * NUM_CLASSES..(b + 1) * NUM_CLASSES];
                loss_sum -= (row[l as usize].max(1e-12) as f64).ln();
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                if arg == l as usize {
                    correct += 1;
                }
            }
            model.backward(cache, &labels);
            step += 1;
            let lr = cfg.learning_rate;
            for ((p, m), v) in model.params_mut().into_iter().zip(first.iter_mut()).zip(second.iter_mut()) {
                match cfg.optimizer {
                    Optimizer::Sgd { momentum } => {
                        for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()) {
                            *vel = momentum * *vel - lr * g;
                            *w += *vel;
                        }
                    }
                    Optimizer::Adam { beta1, beta2, epsilon } => {
                        let c1 = 1.0 - beta1.powi(step);
                        let c2 = 1.0 - beta2.powi(step);
                        for (((w, g), m1), m2) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                            *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                            *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                            *w -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + epsilon);
                        }
                    }
                }
            }
        }
        let seen = order.len() as f64;
        let val_acc = accuracy(&model, val_samples, &val_labels)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen,
            train_acc: correct as f64 / seen,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.3} val_acc {:.3}",
            record.train_loss,
            record.train_acc,
            record.val_acc
        );
        if val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = epoch;
            best = model.clone();
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        history,
    })
}
