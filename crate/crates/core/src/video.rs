//! Frame pre-processing and per-keypress segmentation.
//!
//! Frames are converted to grayscale in `[0, 1]`, cropped around the keypad
//! and resized to a square side. Each keypress becomes an 11-frame sample
//! with the keypress frame at index 5; missing context is filled with
//! all-zero (black) frames.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frames per sample.
pub const SEQUENCE_LEN: usize = 11;
/// Index of the keypress frame within a sample.
pub const TARGET_INDEX: usize = 5;
/// Context frames kept on each side of the keypress.
pub const CONTEXT: usize = 5;
/// Two-sided 99% normal quantile used to turn a frame-error bound into σ.
pub const Z_99: f64 = 2.576;
pub const FRAME_ERROR_LEVELS: [u32; 5] = [3, 5, 10, 15, 20];
pub const SHIELD_LEVELS: [u32; 4] = [25, 50, 75, 100];

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("crop rect {rect:?} exceeds {width}x{height} frame")]
    CropOutOfBounds {
        rect: CropRect,
        width: usize,
        height: usize,
    },
    #[error("invalid keypress neighborhood: prev={prev:?} tk={tk} next={next:?} frames={frame_count}")]
    InvalidNeighborhood {
        tk: usize,
        prev: Option<usize>,
        next: Option<usize>,
        frame_count: usize,
    },
    #[error("unknown shield coverage {0}% (expected 25, 50, 75 or 100)")]
    UnknownCoverage(u32),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("no fiducial markers found")]
    NoFiducials,
    #[error("sample archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A decoded video frame, 8-bit, 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawFrame {
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Luma in `[0, 1]` (ITU-R BT.601 weights for RGB).
    pub fn to_gray(&self) -> Image {
        let data = match self.channels {
            1 => self.data.iter().map(|&v| v as f32 / 255.0).collect(),
            3 => self
                .data
                .chunks_exact(3)
                .map(|p| {
                    let y = 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32;
                    (y / 255.0).clamp(0.0, 1.0)
                })
                .collect(),
            c => panic!("unsupported channel count {c}"),
        };
        Image::from_data(self.width, self.height, data)
    }
}

/// Single-channel float image, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "image data length");
        Self { width, height, data }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len().max(1) as f32
    }

    pub fn is_black(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Bilinear sample at continuous pixel coordinates; zero outside.
    fn sample_zero(&self, x: f32, y: f32) -> f32 {
        if x <= -1.0 || y <= -1.0 || x >= self.width as f32 || y >= self.height as f32 {
            return 0.0;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let get = |xi: f32, yi: f32| -> f32 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f32 || yi >= self.height as f32 {
                0.0
            } else {
                self.data[yi as usize * self.width + xi as usize]
            }
        };
        let top = get(x0, y0) * (1.0 - fx) + get(x0 + 1.0, y0) * fx;
        let bottom = get(x0, y0 + 1.0) * (1.0 - fx) + get(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize (pixel-center aligned, edge clamped).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let top = self.at(x0, y0) * (1.0 - wx) + self.at(x1, y0) * wx;
                let bottom = self.at(x0, y1) * (1.0 - wx) + self.at(x1, y1) * wx;
                data.push(top * (1.0 - wy) + bottom * wy);
            }
        }
        Image::from_data(width, height, data)
    }

    /// Area-averaging resize: each output pixel is the mean of the source
    /// area it covers (fractional overlaps weighted).
    pub fn resize_area(&self, width: usize, height: usize) -> Image {
        let wx = area_weights(self.width, width);
        let wy = area_weights(self.height, height);
        let mut data = vec![0.0f32; width * height];
        for (oy, row_w) in wy.iter().enumerate() {
            for (ox, col_w) in wx.iter().enumerate() {
                let mut acc = 0.0f32;
                for &(sy, ay) in row_w {
                    for &(sx, ax) in col_w {
                        acc += self.at(sx, sy) * ay * ax;
                    }
                }
                data[oy * width + ox] = acc;
            }
        }
        Image::from_data(width, height, data)
    }

    fn crop(&self, rect: CropRect) -> Image {
        let mut data = Vec::with_capacity(rect.w * rect.h);
        for y in rect.y..rect.y + rect.h {
            data.extend_from_slice(&self.data[y * self.width + rect.x..y * self.width + rect.x + rect.w]);
        }
        Image::from_data(rect.w, rect.h, data)
    }
}

/// Per output index: (source index, normalized weight) pairs.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let start = o as f64 * scale;
            let end = start + scale;
            let mut out = Vec::new();
            let mut s = start.floor() as usize;
            while (s as f64) < end && s < src {
                let overlap = (end.min(s as f64 + 1.0) - start.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    out.push((s, (overlap / scale) as f32));
                }
                s += 1;
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Source-pixel rectangle centered on the keypad.
    pub crop_rect: CropRect,
    pub out_size: usize,
}

pub const DEFAULT_OUT_SIZE: usize = 250;
pub const MIN_OUT_SIZE: usize = 16;

/// Grayscale, normalize, crop, resize.
pub fn preprocess_frame(raw: &RawFrame, cfg: &PreprocessConfig) -> Result<Image, VideoError> {
    let r = cfg.crop_rect;
    if r.w == 0 || r.h == 0 || r.x + r.w > raw.width || r.y + r.h > raw.height {
        return Err(VideoError::CropOutOfBounds {
            rect: r,
            width: raw.width,
            height: raw.height,
        });
    }
    if cfg.out_size < MIN_OUT_SIZE {
        return Err(VideoError::InvalidSize(format!(
            "out_size {} < {MIN_OUT_SIZE}",
            cfg.out_size
        )));
    }
    let gray = raw.to_gray();
    Ok(gray.crop(r).resize_bilinear(cfg.out_size, cfg.out_size))
}

/// Value of pure-white fiducial pixels drawn by the synthetic renderer.
pub const FIDUCIAL_VALUE: u8 = 255;

/// Bounding box of all saturated pixels: the crop rectangle marked by the
/// four corner fiducials.
pub fn locate_fiducials(raw: &RawFrame) -> Result<CropRect, VideoError> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let mut found = false;
    for y in 0..raw.height {
        for x in 0..raw.width {
            let i = (y * raw.width + x) * raw.channels;
            if raw.data[i..i + raw.channels].iter().all(|&v| v == FIDUCIAL_VALUE) {
                found = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if !found || x1 <= x0 || y1 <= y0 {
        return Err(VideoError::NoFiducials);
    }
    Ok(CropRect {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// One position of a segmented sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Frame(usize),
    Black,
}

/// Frame slots for the keypress at frame `tk`.
///
/// Context frames lie strictly between the neighboring keypresses and at most
/// five frames away from `tk`. The first keypress of an entry (`prev`
/// absent) gets five black head frames, the last (`next` absent) five black
/// tail frames; short neighborhoods are black-padded on the outside so `tk`
/// stays at index 5.
pub fn segment_keypress(
    frame_count: usize,
    tk: usize,
    prev: Option<usize>,
    next: Option<usize>,
) -> Result<[Slot; SEQUENCE_LEN], VideoError> {
    let invalid = tk >= frame_count
        || prev.is_some_and(|p| p >= tk)
        || next.is_some_and(|n| n <= tk);
    if invalid {
        return Err(VideoError::InvalidNeighborhood {
            tk,
            prev,
            next,
            frame_count,
        });
    }
    let mut slots = [Slot::Black; SEQUENCE_LEN];
    slots[TARGET_INDEX] = Slot::Frame(tk);
    if let Some(p) = prev {
        for d in 1..=CONTEXT {
            match tk.checked_sub(d) {
                Some(f) if f > p => slots[TARGET_INDEX - d] = Slot::Frame(f),
                _ => break,
            }
        }
    }
    if let Some(n) = next {
        for d in 1..=CONTEXT {
            let f = tk + d;
            if f < n && f < frame_count {
                slots[TARGET_INDEX + d] = Slot::Frame(f);
            } else {
                break;
            }
        }
    }
    Ok(slots)
}

/// An 11-frame sample centered on one keypress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypressSample {
    pub frames: Vec<Image>,
    /// `true` where the frame is black padding.
    pub padding: Vec<bool>,
    pub label: Option<u8>,
    pub recording_id: String,
    /// 1-based position of the keypress in its PIN.
    pub position_in_pin: usize,
    pub tk_frame: usize,
}

impl KeypressSample {
    /// Builds a sample from slots and a per-frame lookup of processed images.
    pub fn from_slots<F>(slots: &[Slot; SEQUENCE_LEN], side: usize, mut frame: F) -> Self
    where
        F: FnMut(usize) -> Image,
    {
        let mut frames = Vec::with_capacity(SEQUENCE_LEN);
        let mut padding = Vec::with_capacity(SEQUENCE_LEN);
        let mut tk = 0;
        for (i, slot) in slots.iter().enumerate() {
            match *slot {
                Slot::Frame(f) => {
                    if i == TARGET_INDEX {
                        tk = f;
                    }
                    frames.push(frame(f));
                    padding.push(false);
                }
                Slot::Black => {
                    frames.push(Image::black(side, side));
                    padding.push(true);
                }
            }
        }
        Self {
            frames,
            padding,
            label: None,
            recording_id: String::new(),
            position_in_pin: 0,
            tk_frame: tk,
        }
    }

    /// Convenience constructor for tests and toy data: no padding.
    pub fn new_labeled(frames: Vec<Image>, label: u8) -> Self {
        let n = frames.len();
        Self {
            frames,
            padding: vec![false; n],
            label: Some(label),
            recording_id: String::new(),
            position_in_pin: 0,
            tk_frame: 0,
        }
    }

    pub fn side(&self) -> usize {
        self.frames.first().map(|f| f.width).unwrap_or(0)
    }

    fn map_real_frames<F: FnMut(&Image) -> Image>(&self, mut f: F) -> Self {
        let frames = self
            .frames
            .iter()
            .zip(&self.padding)
            .map(|(img, &pad)| if pad { img.clone() } else { f(img) })
            .collect();
        Self {
            frames,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub max_rotation_deg: f64,
    /// Maximum shift per axis as a fraction of that axis' size.
    pub max_shift_frac: f64,
    pub zoom_range: (f64, f64),
    /// Augmented copies added per epoch, as a fraction of the training set.
    pub synthetic_fraction: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            max_rotation_deg: 7.0,
            max_shift_frac: 0.10,
            zoom_range: (0.9, 1.1),
            synthetic_fraction: 0.20,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_shift_frac: 0.0,
            zoom_range: (1.0, 1.0),
            synthetic_fraction: 0.0,
        }
    }
}

/// A concrete geometric transform: rotate by `rotation_deg`
/// (counter-clockwise as displayed) and zoom about the image center, then
/// shift by `(shift_x, shift_y)` fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDraw {
    pub rotation_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub zoom: f64,
}

impl AffineDraw {
    pub fn draw<R: Rng>(params: &AugmentParams, rng: &mut R) -> Self {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let (zlo, zhi) = params.zoom_range;
        Self {
            rotation_deg: sym(rng, params.max_rotation_deg),
            shift_x: sym(rng, params.max_shift_frac),
            shift_y: sym(rng, params.max_shift_frac),
            zoom: if zhi > zlo { rng.gen_range(zlo..=zhi) } else { zlo },
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.shift_x == 0.0 && self.shift_y == 0.0 && self.zoom == 1.0
    }

    /// Resamples `img` under the transform (bilinear, zero fill).
    pub fn apply(&self, img: &Image) -> Image {
        if self.is_identity() {
            return img.clone();
        }
        let (w, h) = (img.width as f64, img.height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (tx, ty) = (self.shift_x * w, self.shift_y * h);
        let mut data = Vec::with_capacity(img.data.len());
        for y in 0..img.height {
            for x in 0..img.width {
                // Inverse map: undo shift, zoom, then rotate by -θ.
                let dx = (x as f64 - cx - tx) / self.zoom;
                let dy = (y as f64 - cy - ty) / self.zoom;
                let sx = cx + c * dx - s * dy;
                let sy = cy + s * dx + c * dy;
                data.push(img.sample_zero(sx as f32, sy as f32));
            }
        }
        Image::from_data(img.width, img.height, data)
    }
}

/// One random rotation/shift/zoom applied identically to all real frames.
pub fn augment(sample: &KeypressSample, params: &AugmentParams, seed: u64) -> KeypressSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = AffineDraw::draw(params, &mut rng);
    sample.map_real_frames(|img| draw.apply(img))
}

/// Keypad key-row region as fractions of the cropped image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRowsRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl KeyRowsRect {
    fn contains(&self, img: &Image, x: usize, y: usize, coverage: u32) -> bool {
        let fx = (x as f64 + 0.5) / img.width as f64;
        let fy = (y as f64 + 0.5) / img.height as f64;
        let y_end = self.y0 + (self.y1 - self.y0) * coverage as f64 / 100.0;
        fx >= self.x0 && fx < self.x1 && fy >= self.y0 && fy < y_end
    }
}

fn check_coverage(coverage: u32) -> Result<(), VideoError> {
    if SHIELD_LEVELS.contains(&coverage) {
        Ok(())
    } else {
        Err(VideoError::UnknownCoverage(coverage))
    }
}

/// Blacks out the top `coverage`% of the key rows (25% = first row).
pub fn apply_shield_frame(img: &Image, coverage: u32, rows: &KeyRowsRect) -> Result<Image, VideoError> {
    check_coverage(coverage)?;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            if rows.contains(img, x, y, coverage) {
                out.data[y * img.width + x] = 0.0;
            }
        }
    }
    Ok(out)
}

pub fn apply_shield(
    sample: &KeypressSample,
    coverage: u32,
    rows: &KeyRowsRect,
) -> Result<KeypressSample, VideoError> {
    check_coverage(coverage)?;
    Ok(sample.map_real_frames(|img| apply_shield_frame(img, coverage, rows).expect("checked")))
}

/// Area-averaged resolution reduction of every frame.
pub fn downscale(sample: &KeypressSample, size: usize) -> Result<KeypressSample, VideoError> {
    let side = sample.side();
    if size == 0 || size >= side {
        return Err(VideoError::InvalidSize(format!("cannot downscale {side} to {size}")));
    }
    let frames = sample.frames.iter().map(|f| f.resize_area(size, size)).collect();
    Ok(KeypressSample {
        frames,
        ..sample.clone()
    })
}

/// σ of the keypress-time error for a 99% confidence bound of `k` frames.
pub fn frame_error_sigma(k: u32) -> f64 {
    k as f64 / Z_99
}

/// `tk + round(ε)`, `ε ~ N(0, σ²)`, `σ = k / 2.576`, clamped to the video.
///
/// The standard-normal draw depends only on `seed`, so one seed gives
/// errors that scale with `k`.
pub fn inject_frame_error(tk: usize, k: u32, frame_count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: f64 = StandardNormal.sample(&mut rng);
    let shifted = tk as f64 + (z * frame_error_sigma(k)).round();
    shifted.clamp(0.0, frame_count.saturating_sub(1) as f64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIndexEntry {
    pub recording_id: String,
    pub position_in_pin: usize,
    pub label: Option<u8>,
    pub tk_frame: usize,
    pub padding: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub side: usize,
    pub seq_len: usize,
    pub samples: Vec<SampleIndexEntry>,
}

pub fn archive_paths(dir: &Path, recording_id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{recording_id}.samples.f32")),
        dir.join(format!("{recording_id}.samples.json")),
    )
}

/// Writes samples as little-endian f32 arrays (`n × 11 × S × S`) plus a JSON
/// index.
pub fn write_sample_archive(
    dir: &Path,
    recording_id: &str,
    samples: &[KeypressSample],
) -> Result<(), VideoError> {
    let side = samples.first().map(|s| s.side()).unwrap_or(0);
    let (bin, idx) = archive_paths(dir, recording_id);
    let mut bytes = Vec::with_capacity(samples.len() * SEQUENCE_LEN * side * side * 4);
    for s in samples {
        if s.frames.len() != SEQUENCE_LEN || s.side() != side {
            return Err(VideoError::Archive("inconsistent sample shapes".into()));
        }
        for f in &s.frames {
            for v in &f.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::File::create(bin)?.write_all(&bytes)?;
    let index = SampleIndex {
        side,
        seq_len: SEQUENCE_LEN,
        samples: samples
            .iter()
            .map(|s| SampleIndexEntry {
                recording_id: s.recording_id.clone(),
                position_in_pin: s.position_in_pin,
                label: s.label,
                tk_frame: s.tk_frame,
                padding: s.padding.clone(),
            })
            .collect(),
    };
    fs::write(idx, serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn read_sample_archive(dir: &Path, recording_id: &str) -> Result<Vec<KeypressSample>, VideoError> {
    let (bin, idx) = archive_paths(dir, recording_id);
    let index: SampleIndex = serde_json::from_slice(&fs::read(idx)?)?;
    let mut bytes = Vec::new();
    fs::File::open(bin)?.read_to_end(&mut bytes)?;
    let per_frame = index.side * index.side;
    let expected = index.samples.len() * index.seq_len * per_frame * 4;
    if bytes.len() != expected {
        return Err(VideoError::Archive(format!(
            "{} bytes, index implies {expected}",
            bytes.len()
        )));
    }
    let mut floats = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    Ok(index
        .samples
        .into_iter()
        .map(|e| {
            let frames = (0..index.seq_len)
                .map(|_| Image::from_data(index.side, index.side, floats.by_ref().take(per_frame).collect()))
                .collect();
            KeypressSample {
                frames,
                padding: e.padding,
                label: e.label,
                recording_id: e.recording_id,
                position_in_pin: e.position_in_pin,
                tk_frame: e.tk_frame,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots_str(slots: &[Slot]) -> Vec<String> {
        slots
            .iter()
            .map(|s| match s {
                Slot::Frame(f) => format!("f{f}"),
                Slot::Black => "black".into(),
            })
            .collect()
    }

    #[test]
    fn wide_neighborhood_needs_no_padding() {
        let s = segment_keypress(100, 40, Some(25), Some(55)).unwrap();
        assert_eq!(s.to_vec(), (35..=45).map(Slot::Frame).collect::<Vec<_>>());
    }

    #[test]
    fn first_digit_gets_black_head() {
        let s = segment_keypress(100, 10, None, Some(25)).unwrap();
        let expect: Vec<String> = ["black"; 5]
            .iter()
            .map(|s| s.to_string())
            .chain((10..=15).map(|f| format!("f{f}")))
            .collect();
        assert_eq!(slots_str(&s), expect);
    }

    #[test]
    fn short_neighborhood_pads_both_sides() {
        let s = segment_keypress(100, 20, Some(18), Some(22)).unwrap();
        let expect = [
            "black", "black", "black", "black", "f19", "f20", "f21", "black", "black", "black", "black",
        ];
        assert_eq!(slots_str(&s), expect);
    }

    #[test]
    fn last_digit_gets_black_tail() {
        let s = segment_keypress(100, 50, Some(40), None).unwrap();
        assert_eq!(s[..6].to_vec(), (45..=50).map(Slot::Frame).collect::<Vec<_>>());
        assert!(s[6..].iter().all(|&x| x == Slot::Black));
    }

    #[test]
    fn context_is_truncated_at_video_edges() {
        let s = segment_keypress(12, 10, Some(0), Some(30)).unwrap();
        assert_eq!(s[6], Slot::Frame(11));
        assert_eq!(s[7], Slot::Black);
    }

    #[test]
    fn ordering_violations_are_rejected() {
        assert!(segment_keypress(100, 20, Some(20), None).is_err());
        assert!(segment_keypress(100, 20, None, Some(19)).is_err());
        assert!(segment_keypress(20, 20, None, None).is_err());
    }

    #[test]
    fn white_and_black_frames_normalize() {
        let cfg = PreprocessConfig {
            crop_rect: CropRect { x: 2, y: 2, w: 20, h: 20 },
            out_size: 16,
        };
        let white = preprocess_frame(&RawFrame::filled(30, 30, 3, 255), &cfg).unwrap();
        assert!(white.data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let black = preprocess_frame(&RawFrame::filled(30, 30, 3, 0), &cfg).unwrap();
        assert!(black.data.iter().all(|&v| v == 0.0));
        assert_eq!((white.width, white.height), (16, 16));
    }

    #[test]
    fn crop_outside_frame_is_rejected() {
        let cfg = PreprocessConfig {
            crop_rect: CropRect { x: 20, y: 0, w: 20, h: 20 },
            out_size: 16,
        };
        assert!(matches!(
            preprocess_frame(&RawFrame::filled(30, 30, 1, 0), &cfg),
            Err(VideoError::CropOutOfBounds { .. })
        ));
    }

    #[test]
    fn unknown_coverage_is_rejected() {
        let rows = KeyRowsRect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };
        assert!(matches!(
            apply_shield_frame(&Image::black(4, 4), 30, &rows),
            Err(VideoError::UnknownCoverage(30))
        ));
    }

    #[test]
    fn constant_image_downscales_to_constant() {
        let img = Image::from_data(250, 250, vec![0.37; 250 * 250]);
        let s = KeypressSample::new_labeled(vec![img; SEQUENCE_LEN], 1);
        for size in [125, 64] {
            let d = downscale(&s, size).unwrap();
            assert_eq!(d.side(), size);
            for f in &d.frames {
                assert!(f.data.iter().all(|&v| (v - 0.37).abs() < 1e-5));
            }
        }
        assert!(downscale(&s, 250).is_err());
    }

    #[test]
    fn frame_error_sigma_for_k20() {
        assert!((frame_error_sigma(20) - 7.7640).abs() < 1e-3);
    }

    #[test]
    fn frame_error_is_clamped() {
        for seed in 0..200 {
            let f = inject_frame_error(0, 20, 10, seed);
            assert!(f < 10);
        }
    }
}
