//! Keypress timing from the keypad's feedback tone.
//!
//! Every key produces the same short tone, so the tone is only used to find
//! *when* a key was pressed. The track is band-pass filtered around the tone
//! frequency (zero phase), rectified and smoothed, and peaks of that envelope
//! become keypress times.

use std::f64::consts::PI;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_SAMPLE_RATE: u32 = 8000;
/// Largest residual (ms) for a detected/keylog pair to count as matched.
pub const MATCH_WINDOW_MS: i64 = 100;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("no keypress peaks found")]
    NoPeaksFound,
    #[error("invalid audio track: {0}")]
    InvalidTrack(String),
    #[error("invalid detection config: {0}")]
    InvalidConfig(String),
    #[error("time {t_ms} ms with offset {offset_ms} ms falls before the start of the video")]
    NegativeFrame { t_ms: i64, offset_ms: i64 },
    #[error("alignment failed: {matched} of {total} events matched")]
    AlignmentFailed { matched: usize, total: usize },
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz < MIN_SAMPLE_RATE {
            return Err(AudioError::InvalidTrack(format!(
                "sample rate {sample_rate_hz} < {MIN_SAMPLE_RATE}"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::InvalidTrack("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate_hz as f64
    }

    /// Reads a mono (or first-channel) WAV file, integer or float PCM.
    pub fn read_wav(path: &Path) -> Result<Self, AudioError> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let all: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<Result<_, _>>()?
            }
        };
        let samples = all.into_iter().step_by(channels).collect();
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit mono PCM.
    pub fn write_wav(&self, path: &Path) -> Result<(), AudioError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Threshold is a fraction of the maximum envelope value.
    RelativeToMax,
    /// Threshold is an absolute envelope level.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub center_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub min_gap_ms: f64,
    pub threshold_mode: ThresholdMode,
    pub threshold_value: f64,
    /// Envelope smoothing window.
    pub smoothing_ms: f64,
    /// Peaks must also exceed this multiple of the median envelope level.
    pub noise_floor_ratio: f64,
}

impl DetectionConfig {
    pub fn for_frequency(center_freq_hz: f64) -> Self {
        Self {
            center_freq_hz,
            bandwidth_hz: 400.0,
            min_gap_ms: 150.0,
            threshold_mode: ThresholdMode::RelativeToMax,
            threshold_value: 0.3,
            smoothing_ms: 10.0,
            noise_floor_ratio: 4.0,
        }
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<(), AudioError> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let err = |m: String| Err(AudioError::InvalidConfig(m));
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz < self.center_freq_hz) {
            return err(format!(
                "need 0 < bandwidth ({}) < center ({})",
                self.bandwidth_hz, self.center_freq_hz
            ));
        }
        if self.center_freq_hz + self.bandwidth_hz / 2.0 >= nyquist {
            return err(format!("band exceeds Nyquist frequency {nyquist} Hz"));
        }
        if !(self.min_gap_ms > 0.0) || !(self.smoothing_ms > 0.0) {
            return err("min_gap_ms and smoothing_ms must be positive".into());
        }
        if !(self.threshold_value >= 0.0) {
            return err("threshold must be non-negative".into());
        }
        Ok(())
    }
}

/// Direct-form-I biquad (normalized so a0 = 1).
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Constant 0 dB peak-gain band-pass (RBJ cookbook).
    fn band_pass(center: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * center / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

/// 4th-order band-pass (two cascaded sections) run forward then backward.
pub fn band_pass_zero_phase(samples: &[f32], fs: f64, center: f64, bandwidth: f64) -> Vec<f64> {
    let q = center / bandwidth;
    let stage = Biquad::band_pass(center, q, fs);
    let mut x: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    stage.run(&mut x);
    stage.run(&mut x);
    x.reverse();
    stage.run(&mut x);
    stage.run(&mut x);
    x.reverse();
    x
}

/// Rectified signal smoothed by a centered moving average of `window` samples.
pub fn envelope(filtered: &[f64], window: usize) -> Vec<f64> {
    let n = filtered.len();
    let window = window.max(1);
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in filtered {
        acc += v.abs();
        prefix.push(acc);
    }
    let half = window / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Keypress times (ms from track start) at envelope peaks of the band-passed
/// feedback tone.
///
/// Candidate peaks are local maxima above the threshold (and above
/// `noise_floor_ratio` × median envelope); they are accepted greedily from
/// the strongest, dropping any within `min_gap_ms` of an accepted one.
pub fn detect_keypress_times(track: &AudioTrack, cfg: &DetectionConfig) -> Result<Vec<f64>, AudioError> {
    if track.samples.is_empty() {
        return Err(AudioError::InvalidTrack("empty track".into()));
    }
    cfg.validate(track.sample_rate_hz)?;
    let fs = track.sample_rate_hz as f64;
    let filtered = band_pass_zero_phase(&track.samples, fs, cfg.center_freq_hz, cfg.bandwidth_hz);
    let window = ((cfg.smoothing_ms / 1000.0) * fs).round() as usize;
    let env = envelope(&filtered, window);
    let max = env.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(AudioError::NoPeaksFound);
    }
    let threshold = match cfg.threshold_mode {
        ThresholdMode::RelativeToMax => cfg.threshold_value * max,
        ThresholdMode::Absolute => cfg.threshold_value,
    };
    let floor = cfg.noise_floor_ratio * median(&env);
    let level = threshold.max(floor);

    let mut candidates: Vec<usize> = (0..env.len())
        .filter(|&i| {
            let v = env[i];
            v > level
                && (i == 0 || v > env[i - 1])
                && (i + 1 == env.len() || v >= env[i + 1])
        })
        .collect();
    candidates.sort_by(|&a, &b| env[b].partial_cmp(&env[a]).unwrap().then(a.cmp(&b)));
    let gap = cfg.min_gap_ms / 1000.0 * fs;
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&a| (a as f64 - c as f64).abs() >= gap) {
            accepted.push(c);
        }
    }
    if accepted.is_empty() {
        return Err(AudioError::NoPeaksFound);
    }
    accepted.sort_unstable();
    let reach = (gap / 2.0) as usize;
    Ok(accepted
        .into_iter()
        .map(|i| half_max_centroid(&env, i, reach) * 1000.0 / fs)
        .collect())
}

/// Envelope-weighted centroid of the contiguous region around `peak` where
/// the envelope stays at or above half its peak value.
fn half_max_centroid(env: &[f64], peak: usize, reach: usize) -> f64 {
    let half = env[peak] / 2.0;
    let mut lo = peak;
    while lo > 0 && peak - lo < reach && env[lo - 1] >= half {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < env.len() && hi - peak < reach && env[hi + 1] >= half {
        hi += 1;
    }
    let (num, den) = (lo..=hi).fold((0.0, 0.0), |(n, d), i| (n + i as f64 * env[i], d + env[i]));
    num / den
}

/// `round((t + offset) · fps / 1000)` for each time.
pub fn times_to_frames(times_ms: &[f64], fps: f64, media_offset_ms: i64) -> Result<Vec<usize>, AudioError> {
    if !(fps > 0.0) {
        return Err(AudioError::InvalidConfig(format!("fps {fps} must be positive")));
    }
    times_ms
        .iter()
        .map(|&t| {
            let shifted = t + media_offset_ms as f64;
            let frame = (shifted * fps / 1000.0).round();
            if frame < 0.0 {
                Err(AudioError::NegativeFrame {
                    t_ms: t.round() as i64,
                    offset_ms: media_offset_ms,
                })
            } else {
                Ok(frame as usize)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Add to keylog times to obtain media times.
    pub offset_ms: i64,
    pub matched: usize,
    pub total_abs_error_ms: i64,
}

/// Greedy one-to-one matching of two sorted lists under `offset`; returns
/// the signed residuals of matched pairs.
fn match_under_offset(detected: &[f64], keylog: &[i64], offset: i64) -> Vec<f64> {
    let (mut i, mut j) = (0, 0);
    let mut residuals = Vec::new();
    while i < detected.len() && j < keylog.len() {
        let d = detected[i] - (keylog[j] + offset) as f64;
        if d.abs() <= MATCH_WINDOW_MS as f64 {
            residuals.push(d);
            i += 1;
            j += 1;
        } else if d < 0.0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    residuals
}

fn score(detected: &[f64], keylog: &[i64], offset: i64) -> Alignment {
    let r = match_under_offset(detected, keylog, offset);
    Alignment {
        offset_ms: offset,
        matched: r.len(),
        total_abs_error_ms: r.iter().map(|v| v.abs()).sum::<f64>().round() as i64,
    }
}

/// Offset (keylog → media time) that maximizes matched events, then
/// minimizes total absolute mismatch; ties prefer the smallest |offset|.
///
/// Every pairwise difference is a candidate, refined to the rounded median
/// residual of its matches. Fails unless a strict majority of the longer
/// list is matched.
pub fn estimate_media_offset(detected_ms: &[f64], keylog_downs_ms: &[i64]) -> Result<Alignment, AudioError> {
    let total = detected_ms.len().max(keylog_downs_ms.len());
    if detected_ms.is_empty() || keylog_downs_ms.is_empty() {
        return Err(AudioError::AlignmentFailed { matched: 0, total });
    }
    let mut det = detected_ms.to_vec();
    det.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut keys = keylog_downs_ms.to_vec();
    keys.sort_unstable();

    let candidates: BTreeSet<i64> = det
        .iter()
        .flat_map(|&d| keys.iter().map(move |&k| (d - k as f64).round() as i64))
        .collect();
    let mut best: Option<Alignment> = None;
    for offset in candidates {
        let mut residuals = match_under_offset(&det, &keys, offset);
        if residuals.is_empty() {
            continue;
        }
        residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let refined = offset + residuals[residuals.len() / 2].round() as i64;
        for cand in [score(&det, &keys, offset), score(&det, &keys, refined)] {
            let better = match best {
                None => true,
                Some(b) => {
                    (cand.matched, -cand.total_abs_error_ms, -cand.offset_ms.abs())
                        > (b.matched, -b.total_abs_error_ms, -b.offset_ms.abs())
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    let best = best.expect("non-empty inputs");
    if best.matched * 2 <= total {
        return Err(AudioError::AlignmentFailed {
            matched: best.matched,
            total,
        });
    }
    Ok(best)
}

/// One `t_ms` per line.
pub fn times_to_csv(times_ms: &[f64]) -> String {
    let mut s = String::from("t_ms\n");
    for t in times_ms {
        s.push_str(&format!("{}\n", t.round() as i64));
    }
    s
}

pub fn times_from_csv(text: &str) -> Result<Vec<f64>, AudioError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && *l != "t_ms")
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| AudioError::InvalidTrack(format!("bad timestamp line '{l}'")))
        })
        .collect()
}
