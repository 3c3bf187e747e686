//! Synthetic recordings: a procedurally drawn keypad, a typing hand whose
//! pose depends on the pressed key, a semi-transparent covering hand, the
//! feedback tone and the matching keylog.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioTrack;
use crate::derive_seed;
use crate::ingest::{
    build_manifest, keylog_to_csv, write_video, CameraPosition, CoveringStrategy, DatasetManifest, IngestError,
    Key, KeyEvent, KeyKind, KeypadModel, LoadedRecording, MetadataFile, Recording, RecordingMetadata,
    KEYLOG_SUFFIX, METADATA_FILE,
};
use crate::video::{CropRect, KeyRowsRect, RawFrame, FIDUCIAL_VALUE};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_participants: usize,
    pub pins_per_participant: usize,
    pub pin_len: usize,
    pub fps: f64,
    /// Square frame side in pixels.
    pub frame_size: usize,
    /// Side of the keypad crop inside the frame.
    pub keypad_size: usize,
    /// Output channels: 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Keypad models assigned to participants round-robin.
    pub keypad_models: Vec<KeypadModel>,
    /// Overrides the keypad models' own tone frequency.
    pub feedback_freq_hz: Option<f64>,
    pub sample_rate_hz: u32,
    pub burst_ms: f64,
    pub burst_amplitude: f64,
    pub snr_db: f64,
    pub inter_key_ms: (f64, f64),
    pub hold_ms: (f64, f64),
    pub lead_ms: f64,
    /// Occluder styles assigned to participants round-robin.
    pub occluder_styles: Vec<CoveringStrategy>,
    pub camera_positions: Vec<CameraPosition>,
    /// How far the typing hand moves toward the pressed key, 0 = not at all.
    pub signal_strength: f64,
    pub pixel_noise: f64,
    /// Participants (by index) flagged as blacklisted.
    pub blacklisted: Vec<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_participants: 6,
            pins_per_participant: 100,
            pin_len: 5,
            fps: 30.0,
            frame_size: 84,
            keypad_size: 64,
            channels: 1,
            keypad_models: vec![KeypadModel::D8201F],
            feedback_freq_hz: None,
            sample_rate_hz: 16_000,
            burst_ms: 50.0,
            burst_amplitude: 0.5,
            snr_db: 30.0,
            inter_key_ms: (450.0, 600.0),
            hold_ms: (60.0, 120.0),
            lead_ms: 600.0,
            occluder_styles: vec![CoveringStrategy::Side, CoveringStrategy::Over, CoveringStrategy::Top],
            camera_positions: vec![CameraPosition::Center, CameraPosition::Left, CameraPosition::Right],
            signal_strength: 1.0,
            pixel_noise: 0.02,
            blacklisted: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !(self.fps > 0.0) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad(format!("signal_strength {} outside [0, 1]", self.signal_strength));
        }
        if self.keypad_size < 16 || self.keypad_size + 2 * MAX_SHIFT_PX > self.frame_size {
            return bad(format!(
                "keypad {} does not fit frame {} with {MAX_SHIFT_PX}px shift margins",
                self.keypad_size, self.frame_size
            ));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.keypad_models.is_empty() || self.occluder_styles.is_empty() || self.camera_positions.is_empty() {
            return bad("keypad_models, occluder_styles and camera_positions must be non-empty".into());
        }
        if self.pin_len == 0 {
            return bad("pin_len must be positive".into());
        }
        let (lo, hi) = self.inter_key_ms;
        if !(lo > self.burst_ms && lo > 2.0 * DWELL_MS && hi >= lo) {
            return bad(format!("inter_key_ms ({lo}, {hi}) must exceed burst_ms and twice the dwell, and be ordered"));
        }
        let (hlo, hhi) = self.hold_ms;
        if !(hlo > 0.0 && hhi >= hlo && hhi < lo) {
            return bad(format!("hold_ms ({hlo}, {hhi}) must be positive and below inter_key_ms"));
        }
        for model in &self.keypad_models {
            if self.feedback_freq_hz.or(model.default_feedback_hz()).is_none() {
                return bad(format!("no feedback frequency for keypad '{model}'"));
            }
        }
        Ok(())
    }

    pub fn participant_id(&self, index: usize) -> String {
        format!("p{index:02}")
    }

    pub fn recording_id(&self, participant: usize, pin_index: usize) -> String {
        format!("p{participant:02}_r{pin_index:03}")
    }

    pub fn keypad_for(&self, participant: usize) -> &KeypadModel {
        &self.keypad_models[participant % self.keypad_models.len()]
    }

    pub fn feedback_hz_for(&self, participant: usize) -> f64 {
        self.feedback_freq_hz
            .or(self.keypad_for(participant).default_feedback_hz())
            .expect("validated")
    }
}

const MAX_SHIFT_PX: usize = 8;

/// Key-row region inside the keypad crop: rows 1-2-3, 4-5-6, 7-8-9 and
/// cancel-0-enter, below a display strip.
pub const KEY_ROWS: KeyRowsRect = KeyRowsRect {
    x0: 0.08,
    y0: 0.22,
    x1: 0.92,
    y1: 0.96,
};

/// Grid cell (row, column) of a key.
pub fn key_cell(key: Key) -> (usize, usize) {
    match key {
        Key::Digit(0) => (3, 1),
        Key::Digit(d) => (((d - 1) / 3) as usize, ((d - 1) % 3) as usize),
        Key::Cancel | Key::Clear => (3, 0),
        Key::Enter => (3, 2),
    }
}

/// Key center as fractions of the keypad crop.
pub fn key_center(key: Key) -> (f64, f64) {
    let (r, c) = key_cell(key);
    let w = (KEY_ROWS.x1 - KEY_ROWS.x0) / 3.0;
    let h = (KEY_ROWS.y1 - KEY_ROWS.y0) / 4.0;
    (KEY_ROWS.x0 + (c as f64 + 0.5) * w, KEY_ROWS.y0 + (r as f64 + 0.5) * h)
}

/// The hand rests on a key this long before and after its key-down.
const DWELL_MS: f64 = 200.0;

/// Rest pose of the typing hand, between the 5 and 8 keys.
const NEUTRAL: (f64, f64) = (0.5, 0.22 + 0.74 * 0.5);

/// Per-participant appearance, drawn once from the participant seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantStyle {
    pub participant_id: String,
    pub keypad_model: KeypadModel,
    pub feedback_freq_hz: f64,
    pub covering: CoveringStrategy,
    pub camera: CameraPosition,
    pub blacklisted: bool,
    /// Fingertip radius as a fraction of the crop.
    pub finger_radius: f64,
    pub hand_brightness: f64,
    pub background: f64,
    pub panel: f64,
    /// Covering-hand placement jitter, crop fractions.
    pub occluder_shift: (f64, f64),
    pub occluder_alpha: f64,
}

impl ParticipantStyle {
    pub fn new(cfg: &SynthConfig, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, index as u64]));
        Self {
            participant_id: cfg.participant_id(index),
            keypad_model: cfg.keypad_for(index).clone(),
            feedback_freq_hz: cfg.feedback_hz_for(index),
            covering: cfg.occluder_styles[index % cfg.occluder_styles.len()],
            camera: cfg.camera_positions[index % cfg.camera_positions.len()],
            blacklisted: cfg.blacklisted.contains(&index),
            finger_radius: rng.gen_range(0.075..0.095),
            hand_brightness: rng.gen_range(0.78..0.9),
            background: rng.gen_range(0.12..0.2),
            panel: rng.gen_range(0.32..0.4),
            occluder_shift: (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)),
            occluder_alpha: rng.gen_range(0.45..0.6),
        }
    }
}

/// A generated recording held in memory.
#[derive(Debug, Clone)]
pub struct SynthRecording {
    pub frames: Vec<RawFrame>,
    pub audio: AudioTrack,
    pub events: Vec<KeyEvent>,
    pub pins: Vec<Vec<u8>>,
    pub crop_rect: CropRect,
}

/// `n_pins` PINs whose digits are a shuffle of a balanced multiset, so each
/// digit occurs equally often (up to the remainder).
pub fn balanced_pins<R: Rng>(n_pins: usize, pin_len: usize, rng: &mut R) -> Vec<Vec<u8>> {
    let total = n_pins * pin_len;
    let mut digits: Vec<u8> = (0..total).map(|i| (i % 10) as u8).collect();
    // The remainder digits are a random subset rather than always 0, 1, ...
    let full = total - total % 10;
    let mut extra: Vec<u8> = (0..10).collect();
    extra.shuffle(rng);
    digits[full..].copy_from_slice(&extra[..total % 10]);
    digits.shuffle(rng);
    digits.chunks(pin_len).map(|c| c.to_vec()).collect()
}

struct Pose {
    t_ms: f64,
    pos: (f64, f64),
}

fn pose_at(track: &[Pose], t: f64) -> (f64, f64) {
    if t <= track[0].t_ms {
        return track[0].pos;
    }
    for w in track.windows(2) {
        if t <= w[1].t_ms {
            let a = (t - w[0].t_ms) / (w[1].t_ms - w[0].t_ms).max(1e-9);
            return (
                w[0].pos.0 + a * (w[1].pos.0 - w[0].pos.0),
                w[0].pos.1 + a * (w[1].pos.1 - w[0].pos.1),
            );
        }
    }
    track.last().expect("non-empty").pos
}

fn camera_shift(camera: CameraPosition) -> i64 {
    match camera {
        CameraPosition::Left => -5,
        CameraPosition::Center => 0,
        CameraPosition::Right => 5,
    }
}

/// Draws one frame into a float canvas (values in [0, 1]).
struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn blend_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, value: f64, alpha: f64) {
        let xa = x0.max(0.0).round() as usize;
        let ya = y0.max(0.0).round() as usize;
        let xb = (x1.round().max(0.0) as usize).min(self.size);
        let yb = (y1.round().max(0.0) as usize).min(self.size);
        for y in ya..yb {
            for x in xa..xb {
                let p = &mut self.data[y * self.size + x];
                *p = (1.0 - alpha) * *p + alpha * value;
            }
        }
    }
}

/// Renders a session of one or more PINs (each followed by enter).
pub fn generate_session(pins: &[Vec<u8>], style: &ParticipantStyle, cfg: &SynthConfig, seed: u64) -> SynthRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Keylog and hand trajectory.
    let mut events = Vec::new();
    let mut downs: Vec<f64> = Vec::new();
    let mut track = vec![Pose {
        t_ms: 0.0,
        pos: NEUTRAL,
    }];
    let mut t = cfg.lead_ms;
    let s = cfg.signal_strength;
    for (pin_idx, pin) in pins.iter().enumerate() {
        if pin_idx > 0 {
            t += 2.0 * cfg.inter_key_ms.1;
        }
        let keys: Vec<Key> = pin.iter().map(|&d| Key::Digit(d)).chain([Key::Enter]).collect();
        for (i, &key) in keys.iter().enumerate() {
            if i > 0 {
                t += rng.gen_range(cfg.inter_key_ms.0..=cfg.inter_key_ms.1);
            }
            let t_down = t.round();
            let hold = rng.gen_range(cfg.hold_ms.0..=cfg.hold_ms.1).round();
            events.push(KeyEvent::new(t_down as i64, key, KeyKind::Down));
            events.push(KeyEvent::new((t_down + hold) as i64, key, KeyKind::Up));
            downs.push(t_down);
            let (kx, ky) = key_center(key);
            let jitter = (rng.gen_range(-0.012..0.012), rng.gen_range(-0.012..0.012));
            let pos = (
                NEUTRAL.0 + s * (kx - NEUTRAL.0) + jitter.0,
                NEUTRAL.1 + s * (ky - NEUTRAL.1) + jitter.1,
            );
            track.push(Pose { t_ms: t_down - DWELL_MS, pos });
            track.push(Pose { t_ms: t_down + DWELL_MS, pos });
        }
        track.push(Pose {
            t_ms: t + cfg.inter_key_ms.1,
            pos: NEUTRAL,
        });
    }
    let duration_ms = t + cfg.lead_ms;
    // Up events of neighbouring keys can interleave; keep the log sorted.
    events.sort_by_key(|e| e.t_ms);

    // Geometry.
    let jx = rng.gen_range(-2i64..=2);
    let jy = rng.gen_range(-2i64..=2);
    let k = cfg.keypad_size;
    let margin = ((cfg.frame_size - k) / 2) as i64;
    let crop = CropRect {
        x: (margin + camera_shift(style.camera) + jx) as usize,
        y: (margin + jy) as usize,
        w: k,
        h: k,
    };
    let to_px = |fx: f64, fy: f64| (crop.x as f64 + fx * k as f64, crop.y as f64 + fy * k as f64);
    let (rx0, ry0) = to_px(KEY_ROWS.x0, KEY_ROWS.y0);
    let (rx1, ry1) = to_px(KEY_ROWS.x1, KEY_ROWS.y1);

    let mut base = Canvas {
        size: cfg.frame_size,
        data: vec![style.background; cfg.frame_size * cfg.frame_size],
    };
    base.blend_rect(crop.x as f64, crop.y as f64, (crop.x + k) as f64, (crop.y + k) as f64, style.panel, 1.0);
    // Display strip and key caps.
    let (dx0, dy0) = to_px(0.15, 0.05);
    let (dx1, dy1) = to_px(0.85, 0.16);
    base.blend_rect(dx0, dy0, dx1, dy1, 0.6, 1.0);
    let cw = (rx1 - rx0) / 3.0;
    let ch = (ry1 - ry0) / 4.0;
    for r in 0..4 {
        for c in 0..3 {
            let x = rx0 + c as f64 * cw;
            let y = ry0 + r as f64 * ch;
            base.blend_rect(x + 1.0, y + 1.0, x + cw - 1.0, y + ch - 1.0, 0.5, 1.0);
        }
    }

    let (ox, oy) = style.occluder_shift;
    let occluder = match style.covering {
        CoveringStrategy::Side => (0.0 + ox, 0.15 + oy, 0.45 + ox, 1.0),
        CoveringStrategy::Over => (0.05 + ox, 0.1 + oy, 0.95 + ox, 0.55 + oy),
        CoveringStrategy::Top | CoveringStrategy::Unknown => (0.0 + ox, 0.0, 1.0, 0.35 + oy),
    };
    let (ox0, oy0) = to_px(occluder.0, occluder.1);
    let (ox1, oy1) = to_px(occluder.2, occluder.3);

    let n_frames = (duration_ms * cfg.fps / 1000.0).ceil() as usize + 1;
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("finite sigma");
    let r_tip = style.finger_radius * k as f64;
    let mut frames = Vec::with_capacity(n_frames);
    for fi in 0..n_frames {
        let t_ms = fi as f64 * 1000.0 / cfg.fps;
        let mut canvas = Canvas {
            size: base.size,
            data: base.data.clone(),
        };
        // Typing hand: fingertip disc plus a wider palm below it, drawn
        // only inside the key rows.
        let (fx, fy) = pose_at(&track, t_ms);
        let (px, py) = to_px(fx, fy);
        let palm = (px + 0.35 * r_tip, py + 2.2 * r_tip, 1.9 * r_tip, 1.4 * r_tip);
        let y_lo = ry0.floor().max(0.0) as usize;
        let y_hi = (ry1.ceil() as usize).min(canvas.size);
        let x_lo = rx0.floor().max(0.0) as usize;
        let x_hi = (rx1.ceil() as usize).min(canvas.size);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                if cx < rx0 || cx >= rx1 || cy < ry0 || cy >= ry1 {
                    continue;
                }
                let d_tip = ((cx - px).powi(2) + (cy - py).powi(2)).sqrt() / r_tip;
                let d_palm = (((cx - palm.0) / palm.2).powi(2) + ((cy - palm.1) / palm.3).powi(2)).sqrt();
                let v = if d_tip <= 1.0 {
                    style.hand_brightness * (1.0 - 0.25 * d_tip * d_tip)
                } else if d_palm <= 1.0 {
                    0.85 * style.hand_brightness * (1.0 - 0.2 * d_palm * d_palm)
                } else {
                    continue;
                };
                canvas.data[y * canvas.size + x] = v;
            }
        }
        canvas.blend_rect(ox0, oy0, ox1, oy1, 0.08, style.occluder_alpha);
        if cfg.pixel_noise > 0.0 {
            for p in canvas.data.iter_mut() {
                *p += noise.sample(&mut rng);
            }
        }
        let mut gray: Vec<u8> = canvas
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 0.98) * 255.0).round() as u8)
            .collect();
        // 2x2 fiducials at the four crop corners.
        for (cx, cy) in [
            (crop.x, crop.y),
            (crop.x + k - 2, crop.y),
            (crop.x, crop.y + k - 2),
            (crop.x + k - 2, crop.y + k - 2),
        ] {
            for y in cy..cy + 2 {
                for x in cx..cx + 2 {
                    gray[y * cfg.frame_size + x] = FIDUCIAL_VALUE;
                }
            }
        }
        let data = if cfg.channels == 3 {
            gray.iter().flat_map(|&v| [v, v, v]).collect()
        } else {
            gray
        };
        frames.push(RawFrame {
            width: cfg.frame_size,
            height: cfg.frame_size,
            channels: cfg.channels,
            data,
        });
    }

    let audio = render_audio(&downs, duration_ms, style.feedback_freq_hz, cfg, &mut rng);
    SynthRecording {
        frames,
        audio,
        events,
        pins: pins.to_vec(),
        crop_rect: crop,
    }
}

/// White noise plus a Hann-windowed tone burst centered on each key-down.
fn render_audio(downs: &[f64], duration_ms: f64, freq: f64, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> AudioTrack {
    let fs = cfg.sample_rate_hz as f64;
    let n = (duration_ms / 1000.0 * fs).ceil() as usize;
    let signal_power = cfg.burst_amplitude * cfg.burst_amplitude / 2.0;
    let sigma = (signal_power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let mut samples: Vec<f64> = (0..n).map(|_| noise.sample(rng)).collect();
    let half = cfg.burst_ms / 2000.0 * fs;
    for &t in downs {
        let center = t / 1000.0 * fs;
        let start = (center - half).ceil().max(0.0) as usize;
        let end = ((center + half).floor() as usize).min(n.saturating_sub(1));
        for i in start..=end {
            let u = (i as f64 - center) / half;
            let w = 0.5 * (1.0 + (std::f64::consts::PI * u).cos());
            let phase = 2.0 * std::f64::consts::PI * freq * (i as f64 - center) / fs;
            samples[i] += cfg.burst_amplitude * w * phase.sin();
        }
    }
    let samples = samples.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect();
    AudioTrack::new(samples, cfg.sample_rate_hz).expect("rate and samples valid")
}

/// One recording holding a single PIN followed by enter.
pub fn generate_recording(pin: &[u8], style: &ParticipantStyle, cfg: &SynthConfig, seed: u64) -> SynthRecording {
    generate_session(&[pin.to_vec()], style, cfg, seed)
}

fn recording_meta(cfg: &SynthConfig, style: &ParticipantStyle, id: String, rec: &SynthRecording, dir: &Path) -> Recording {
    Recording {
        id: id.clone(),
        participant_id: style.participant_id.clone(),
        keypad_model: style.keypad_model.clone(),
        feedback_freq_hz: style.feedback_freq_hz,
        camera_position: style.camera,
        covering_strategy: style.covering,
        blacklisted: style.blacklisted,
        fps: cfg.fps,
        video_path: dir.join(format!("{id}.video")),
        audio_path: dir.join(format!("{id}.wav")),
        keylog_path: dir.join(format!("{id}{KEYLOG_SUFFIX}")),
        media_offset_ms: 0,
        crop_rect: Some(rec.crop_rect),
        key_rows: Some(KEY_ROWS),
    }
}

/// All recordings of the corpus, one per PIN, in memory.
///
/// Media paths in the returned metadata point at where `generate_corpus`
/// would write them relative to an empty root.
pub fn generate_corpus_in_memory(cfg: &SynthConfig) -> Result<Vec<LoadedRecording>, SynthError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_participants * cfg.pins_per_participant);
    for_each_recording(cfg, |meta, rec| {
        out.push(LoadedRecording {
            meta,
            frames: rec.frames,
            audio: rec.audio,
            events: rec.events,
        });
        Ok(())
    })?;
    Ok(out)
}

fn for_each_recording<F>(cfg: &SynthConfig, mut f: F) -> Result<(), SynthError>
where
    F: FnMut(Recording, SynthRecording) -> Result<(), SynthError>,
{
    for p in 0..cfg.n_participants {
        let style = ParticipantStyle::new(cfg, p);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, p as u64]));
        let pins = balanced_pins(cfg.pins_per_participant, cfg.pin_len, &mut rng);
        for (i, pin) in pins.iter().enumerate() {
            let rec = generate_recording(pin, &style, cfg, derive_seed(cfg.seed, &[3, p as u64, i as u64]));
            let meta = recording_meta(cfg, &style, cfg.recording_id(p, i), &rec, Path::new(""));
            f(meta, rec)?;
        }
    }
    Ok(())
}

/// Writes the corpus in the ingest layout under `out_dir` and returns the
/// manifest built from it.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut metadata = MetadataFile::default();
    for_each_recording(cfg, |meta, rec| {
        write_synth_recording(out_dir, &meta.id, &rec, cfg.fps)?;
        metadata.recordings.push(RecordingMetadata {
            id: meta.id,
            participant_id: meta.participant_id,
            keypad_model: meta.keypad_model,
            feedback_freq_hz: Some(meta.feedback_freq_hz),
            camera_position: meta.camera_position,
            covering_strategy: meta.covering_strategy,
            blacklisted: meta.blacklisted,
            media_offset_ms: 0,
            crop_rect: meta.crop_rect,
            key_rows: meta.key_rows,
        });
        Ok(())
    })?;
    let meta_path = out_dir.join(METADATA_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&metadata)?)?;
    Ok(build_manifest(out_dir, Some(&meta_path))?)
}

/// Writes `<id>.video`, `<id>.wav` and `<id>.keylog.csv`.
pub fn write_synth_recording(dir: &Path, id: &str, rec: &SynthRecording, fps: f64) -> Result<Vec<PathBuf>, SynthError> {
    let video = dir.join(format!("{id}.video"));
    let audio = dir.join(format!("{id}.wav"));
    let keylog = dir.join(format!("{id}{KEYLOG_SUFFIX}"));
    write_video(&video, fps, &rec.frames)?;
    rec.audio.write_wav(&audio).map_err(IngestError::from)?;
    fs::write(&keylog, keylog_to_csv(&rec.events))?;
    Ok(vec![video, audio, keylog])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::extract_pin_entries;
    use crate::video::locate_fiducials;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_participants: 2,
            pins_per_participant: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn recording_keylog_matches_pin() {
        let cfg = small_cfg();
        let style = ParticipantStyle::new(&cfg, 0);
        let rec = generate_recording(&[7, 3, 6, 3, 3], &style, &cfg, 5);
        let downs: Vec<_> = rec.events.iter().filter(|e| e.kind == KeyKind::Down).collect();
        assert_eq!(downs.len(), 6);
        assert_eq!(downs[5].key, Key::Enter);
        let (entries, discarded) = extract_pin_entries(&rec.events, 5);
        assert_eq!(discarded, 0);
        assert_eq!(entries[0].digits, vec![7, 3, 6, 3, 3]);
    }

    #[test]
    fn fiducials_mark_the_crop() {
        let cfg = small_cfg();
        let style = ParticipantStyle::new(&cfg, 1);
        let rec = generate_recording(&[1, 2, 3, 4, 5], &style, &cfg, 9);
        for f in [0, rec.frames.len() / 2] {
            assert_eq!(locate_fiducials(&rec.frames[f]).unwrap(), rec.crop_rect);
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = small_cfg();
        let style = ParticipantStyle::new(&cfg, 0);
        let a = generate_recording(&[0, 1, 2, 3, 4], &style, &cfg, 42);
        let b = generate_recording(&[0, 1, 2, 3, 4], &style, &cfg, 42);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.audio, b.audio);
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn balanced_pins_have_equal_digit_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pins = balanced_pins(20, 5, &mut rng);
        let mut counts = [0; 10];
        for d in pins.iter().flatten() {
            counts[*d as usize] += 1;
        }
        assert_eq!(counts, [10; 10]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg();
        cfg.fps = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.signal_strength = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.keypad_models = vec![KeypadModel::Other("X".into())];
        assert!(cfg.validate().is_err());
    }
}
