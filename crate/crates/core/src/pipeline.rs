//! Recording to keypress samples: timing, alignment, labeling, cropping and
//! segmentation, plus the test-time countermeasure knobs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{
    detect_keypress_times, estimate_media_offset, times_to_frames, AudioError, DetectionConfig, MATCH_WINDOW_MS,
};
use crate::ingest::{extract_pin_entries, KeyKind, LoadedRecording, Recording, DEFAULT_PIN_LEN};
use crate::video::{
    apply_shield, downscale, inject_frame_error, locate_fiducials, preprocess_frame, segment_keypress, CropRect,
    Image, KeypressSample, PreprocessConfig, RawFrame, VideoError,
};
use crate::{derive_seed, hash_str};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("recording '{0}' has no usable PIN entries")]
    NoEntries(String),
    #[error("recording '{0}' has no key-row region; shield simulation needs one")]
    MissingKeyRows(String),
    #[error("recording '{0}' has no video frames")]
    NoFrames(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Video(#[from] VideoError),
}

/// Where keypress times come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimingSource {
    /// Feedback-tone detection.
    #[default]
    Audio,
    /// Keylog key-down times shifted by the media offset.
    Keylog,
    /// Externally supplied media times in ms (all key-downs, enter included).
    External(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pin_len: usize,
    pub timing: TimingSource,
    /// Detector override; defaults to the recording's feedback frequency.
    pub detection: Option<DetectionConfig>,
    /// Estimate the keylog-to-media offset from audio instead of trusting
    /// the recording's stored offset.
    pub estimate_offset: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pin_len: DEFAULT_PIN_LEN,
            timing: TimingSource::Audio,
            detection: None,
            estimate_offset: true,
        }
    }
}

/// Test-time sample options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOptions {
    /// Side of the preprocessed crop.
    pub out_size: usize,
    /// Further area downscale after preprocessing, if smaller than `out_size`.
    pub resolution: Option<usize>,
    /// Shield coverage in percent, 0 = none.
    pub shield: u32,
    /// 99%-bound of the injected keypress-frame error, 0 = none.
    pub frame_error_k: u32,
    pub seed: u64,
}

impl SampleOptions {
    pub fn new(out_size: usize) -> Self {
        Self {
            out_size,
            resolution: None,
            shield: 0,
            frame_error_k: 0,
            seed: 0,
        }
    }

    pub fn model_input_size(&self) -> usize {
        self.resolution.filter(|&r| r < self.out_size).unwrap_or(self.out_size)
    }
}

/// One entered PIN with the frame index of each digit press.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedPin {
    /// `None` when no keylog labels are available.
    pub digits: Option<Vec<u8>>,
    pub tk: Vec<usize>,
}

/// A recording reduced to what segmentation needs.
#[derive(Debug, Clone)]
pub struct PreparedRecording {
    pub meta: Recording,
    pub frames: Vec<RawFrame>,
    pub crop_rect: CropRect,
    pub pins: Vec<PreparedPin>,
    pub offset_ms: i64,
    pub discarded: usize,
    pub warnings: Vec<String>,
}

/// Samples of one PIN entry, in digit order.
#[derive(Debug, Clone, PartialEq)]
pub struct PinSamples {
    pub recording_id: String,
    pub participant_id: String,
    pub digits: Option<Vec<u8>>,
    pub samples: Vec<KeypressSample>,
}

fn nearest_within(times: &[f64], t: f64, window: f64) -> Option<f64> {
    times
        .iter()
        .copied()
        .filter(|d| (d - t).abs() <= window)
        .min_by(|a, b| (a - t).abs().partial_cmp(&(b - t).abs()).unwrap())
}

/// Resolves keypress frames for every PIN entry of a recording.
pub fn prepare_recording(rec: LoadedRecording, cfg: &PipelineConfig) -> Result<PreparedRecording, PipelineError> {
    let meta = rec.meta;
    let first = rec.frames.first().ok_or_else(|| PipelineError::NoFrames(meta.id.clone()))?;
    let crop_rect = match meta.crop_rect {
        Some(r) => r,
        None => locate_fiducials(first)?,
    };
    let frame_count = rec.frames.len();
    let mut warnings = Vec::new();

    let media_times: Option<Vec<f64>> = match &cfg.timing {
        TimingSource::Audio => {
            let det = cfg
                .detection
                .unwrap_or_else(|| DetectionConfig::for_frequency(meta.feedback_freq_hz));
            Some(detect_keypress_times(&rec.audio, &det)?)
        }
        TimingSource::External(t) => Some(t.clone()),
        TimingSource::Keylog => None,
    };

    let (entries, discarded) = extract_pin_entries(&rec.events, cfg.pin_len);
    let mut pins = Vec::new();
    let mut offset_ms = meta.media_offset_ms;
    if rec.events.is_empty() {
        // Unlabeled: group detected presses into PIN + enter chunks.
        let times = media_times.ok_or_else(|| PipelineError::NoEntries(meta.id.clone()))?;
        let frames = times_to_frames(&times, meta.fps, 0)?;
        for chunk in frames.chunks(cfg.pin_len + 1) {
            if chunk.len() < cfg.pin_len {
                warnings.push(format!("trailing {} unpaired keypresses ignored", chunk.len()));
                continue;
            }
            let tk = chunk[..cfg.pin_len].to_vec();
            if tk.iter().all(|&f| f < frame_count) {
                pins.push(PreparedPin { digits: None, tk });
            }
        }
    } else {
        if cfg.estimate_offset {
            if let Some(times) = &media_times {
                let downs: Vec<i64> = rec
                    .events
                    .iter()
                    .filter(|e| e.kind == KeyKind::Down)
                    .map(|e| e.t_ms)
                    .collect();
                offset_ms = estimate_media_offset(times, &downs)?.offset_ms;
            }
        }
        'entries: for (ei, entry) in entries.iter().enumerate() {
            let mut times = Vec::with_capacity(entry.keydown_ms.len());
            for &t in &entry.keydown_ms {
                let expected = (t + offset_ms) as f64;
                match &media_times {
                    None => times.push(expected),
                    Some(det) => match nearest_within(det, expected, MATCH_WINDOW_MS as f64) {
                        Some(d) => times.push(d),
                        None => {
                            warnings.push(format!("entry {ei}: keypress at {t} ms not detected, entry skipped"));
                            continue 'entries;
                        }
                    },
                }
            }
            let tk = times_to_frames(&times, meta.fps, 0)?;
            let ordered = tk.windows(2).all(|w| w[0] < w[1]);
            if !ordered || tk.iter().any(|&f| f >= frame_count) {
                warnings.push(format!("entry {ei}: keypress frames {tk:?} unusable, entry skipped"));
                continue;
            }
            pins.push(PreparedPin {
                digits: Some(entry.digits.clone()),
                tk,
            });
        }
    }
    if pins.is_empty() {
        return Err(PipelineError::NoEntries(meta.id.clone()));
    }
    Ok(PreparedRecording {
        meta,
        frames: rec.frames,
        crop_rect,
        pins,
        offset_ms,
        discarded,
        warnings,
    })
}

impl PreparedRecording {
    /// Segments every PIN into 11-frame samples under `opts`.
    pub fn samples(&self, opts: &SampleOptions) -> Result<Vec<PinSamples>, PipelineError> {
        let key_rows = match (opts.shield, self.meta.key_rows) {
            (0, _) => None,
            (_, Some(r)) => Some(r),
            (_, None) => return Err(PipelineError::MissingKeyRows(self.meta.id.clone())),
        };
        let pre = PreprocessConfig {
            crop_rect: self.crop_rect,
            out_size: opts.out_size,
        };
        let frame_count = self.frames.len();
        let mut cache: HashMap<usize, Image> = HashMap::new();
        let rec_hash = hash_str(&self.meta.id);
        let mut out = Vec::with_capacity(self.pins.len());
        for (pi, pin) in self.pins.iter().enumerate() {
            let tk: Vec<usize> = pin
                .tk
                .iter()
                .enumerate()
                .map(|(pos, &t)| {
                    if opts.frame_error_k == 0 {
                        t
                    } else {
                        let seed = derive_seed(opts.seed, &[rec_hash, pi as u64, pos as u64]);
                        inject_frame_error(t, opts.frame_error_k, frame_count, seed)
                    }
                })
                .collect();
            let mut samples = Vec::with_capacity(tk.len());
            for (pos, &t) in tk.iter().enumerate() {
                // Perturbed neighbours may cross the target; they then only
                // limit the context on that side.
                let prev = if pos == 0 {
                    None
                } else if tk[pos - 1] < t {
                    Some(tk[pos - 1])
                } else {
                    t.checked_sub(1)
                };
                let next = tk.get(pos + 1).map(|&n| n.max(t + 1));
                let slots = segment_keypress(frame_count, t, prev, next)?;
                let mut err = None;
                let mut sample = KeypressSample::from_slots(&slots, opts.out_size, |f| {
                    cache
                        .entry(f)
                        .or_insert_with(|| match preprocess_frame(&self.frames[f], &pre) {
                            Ok(img) => img,
                            Err(e) => {
                                err = Some(e);
                                Image::black(opts.out_size, opts.out_size)
                            }
                        })
                        .clone()
                });
                if let Some(e) = err {
                    return Err(e.into());
                }
                if let Some(rows) = &key_rows {
                    sample = apply_shield(&sample, opts.shield, rows)?;
                }
                if let Some(r) = opts.resolution.filter(|&r| r < opts.out_size) {
                    sample = downscale(&sample, r)?;
                }
                sample.label = pin.digits.as_ref().map(|d| d[pos]);
                sample.recording_id = self.meta.id.clone();
                sample.position_in_pin = pos + 1;
                samples.push(sample);
            }
            out.push(PinSamples {
                recording_id: self.meta.id.clone(),
                participant_id: self.meta.participant_id.clone(),
                digits: pin.digits.clone(),
                samples,
            });
        }
        Ok(out)
    }
}

/// Flattens per-PIN samples into one list.
pub fn flatten(pins: &[PinSamples]) -> Vec<KeypressSample> {
    pins.iter().flat_map(|p| p.samples.iter().cloned()).collect()
}
