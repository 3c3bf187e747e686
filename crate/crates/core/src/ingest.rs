//! Recording ingest: keylogs, PIN entries, media files and the dataset
//! manifest.
//!
//! On disk a dataset is a directory holding, for each recording id, a
//! `<id>.video` raw-frame file, a `<id>.wav` audio track and a
//! `<id>.keylog.csv` key log, plus a `metadata.json` describing
//! participants and devices.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioError, AudioTrack};
use crate::video::{CropRect, KeyRowsRect, RawFrame};

pub const SCHEMA_VERSION: &str = "1";
pub const DEFAULT_FPS: f64 = 30.0;
pub const DEFAULT_PIN_LEN: usize = 5;
pub const METADATA_FILE: &str = "metadata.json";
pub const VIDEO_EXT: &str = "video";
pub const AUDIO_EXT: &str = "wav";
pub const KEYLOG_SUFFIX: &str = ".keylog.csv";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed keylog at line {line}: {reason}")]
    MalformedKeylog { line: usize, reason: String },
    #[error("keylog is empty")]
    EmptyFile,
    #[error("recording '{id}' is missing its {missing} file")]
    MissingCompanionFile { id: String, missing: &'static str },
    #[error("duplicate recording id '{0}'")]
    DuplicateRecordingId(String),
    #[error("no metadata for recording '{0}'")]
    MissingMetadata(String),
    #[error("invalid recording '{id}': {reason}")]
    InvalidRecording { id: String, reason: String },
    #[error("participant '{0}' has inconsistent metadata across recordings")]
    InconsistentParticipant(String),
    #[error("video file: {0}")]
    VideoFormat(String),
    #[error("unsupported schema version '{0}'")]
    SchemaVersion(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    Digit(u8),
    Enter,
    Cancel,
    Clear,
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Key::Digit(d) => write!(f, "{d}"),
            Key::Enter => f.write_str("enter"),
            Key::Cancel => f.write_str("cancel"),
            Key::Clear => f.write_str("clear"),
        }
    }
}

impl FromStr for Key {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "enter" => Ok(Key::Enter),
            "cancel" => Ok(Key::Cancel),
            "clear" => Ok(Key::Clear),
            d if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() => Ok(Key::Digit(d.as_bytes()[0] - b'0')),
            other => Err(format!("unknown key '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyKind {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyEvent {
    pub t_ms: i64,
    pub key: Key,
    pub kind: KeyKind,
}

impl KeyEvent {
    pub fn new(t_ms: i64, key: Key, kind: KeyKind) -> Self {
        Self { t_ms, key, kind }
    }
}

pub fn keylog_to_csv(events: &[KeyEvent]) -> String {
    let mut s = String::from("t_ms,key,kind\n");
    for e in events {
        let kind = match e.kind {
            KeyKind::Down => "down",
            KeyKind::Up => "up",
        };
        s.push_str(&format!("{},{},{}\n", e.t_ms, e.key, kind));
    }
    s
}

/// Parses `t_ms,key,kind` lines (optional header, blank lines ignored).
pub fn parse_keylog_str(text: &str) -> Result<Vec<KeyEvent>, IngestError> {
    let mut events = Vec::new();
    let mut open: HashMap<Key, usize> = HashMap::new();
    let mut last_t = i64::MIN;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || (events.is_empty() && line.replace(' ', "") == "t_ms,key,kind") {
            continue;
        }
        let bad = |reason: String| IngestError::MalformedKeylog { line: line_no, reason };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", fields.len())));
        }
        let t_ms: i64 = fields[0].parse().map_err(|_| bad(format!("bad time '{}'", fields[0])))?;
        if t_ms < 0 {
            return Err(bad("negative time".into()));
        }
        if t_ms < last_t {
            return Err(bad(format!("time {t_ms} decreases from {last_t}")));
        }
        last_t = t_ms;
        let key: Key = fields[1].parse().map_err(bad)?;
        let kind = match fields[2] {
            "down" => KeyKind::Down,
            "up" => KeyKind::Up,
            other => return Err(bad(format!("unknown kind '{other}'"))),
        };
        match kind {
            KeyKind::Down => {
                if open.insert(key, line_no).is_some() {
                    return Err(bad(format!("key {key} pressed twice without release")));
                }
            }
            KeyKind::Up => {
                if open.remove(&key).is_none() {
                    return Err(bad(format!("key {key} released without press")));
                }
            }
        }
        events.push(KeyEvent { t_ms, key, kind });
    }
    if let Some((key, line)) = open.into_iter().min_by_key(|&(_, l)| l) {
        return Err(IngestError::MalformedKeylog {
            line,
            reason: format!("key {key} never released"),
        });
    }
    if events.is_empty() {
        return Err(IngestError::EmptyFile);
    }
    Ok(events)
}

pub fn parse_keylog(path: &Path) -> Result<Vec<KeyEvent>, IngestError> {
    parse_keylog_str(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinEntry {
    pub digits: Vec<u8>,
    /// Key-down time of each digit.
    pub keydown_ms: Vec<i64>,
    pub enter_ms: i64,
}

/// Splits key-downs into enter-terminated digit sequences.
///
/// Sequences whose length differs from `expected_len`, or that are aborted
/// by cancel/clear, are counted in the returned `discarded`.
pub fn extract_pin_entries(events: &[KeyEvent], expected_len: usize) -> (Vec<PinEntry>, usize) {
    let mut entries = Vec::new();
    let mut discarded = 0;
    let mut digits = Vec::new();
    let mut times: Vec<i64> = Vec::new();
    for e in events.iter().filter(|e| e.kind == KeyKind::Down) {
        match e.key {
            Key::Digit(d) => {
                digits.push(d);
                times.push(e.t_ms);
            }
            Key::Enter if !digits.is_empty() => {
                let increasing = times.windows(2).all(|w| w[0] < w[1]);
                if digits.len() == expected_len && increasing {
                    entries.push(PinEntry {
                        digits: std::mem::take(&mut digits),
                        keydown_ms: std::mem::take(&mut times),
                        enter_ms: e.t_ms,
                    });
                } else {
                    discarded += 1;
                }
                digits.clear();
                times.clear();
            }
            Key::Cancel | Key::Clear if !digits.is_empty() => {
                discarded += 1;
                digits.clear();
                times.clear();
            }
            _ => {}
        }
    }
    (entries, discarded)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeypadModel {
    D8201F,
    D8203B,
    Other(String),
}

impl KeypadModel {
    /// Feedback tone of the named pads.
    pub fn default_feedback_hz(&self) -> Option<f64> {
        match self {
            KeypadModel::D8201F => Some(2900.0),
            KeypadModel::D8203B => Some(2500.0),
            KeypadModel::Other(_) => None,
        }
    }
}

impl fmt::Display for KeypadModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeypadModel::D8201F => f.write_str("D-8201F"),
            KeypadModel::D8203B => f.write_str("D-8203B"),
            KeypadModel::Other(s) => f.write_str(s),
        }
    }
}

impl From<String> for KeypadModel {
    fn from(s: String) -> Self {
        match s.as_str() {
            "D-8201F" => KeypadModel::D8201F,
            "D-8203B" => KeypadModel::D8203B,
            _ => KeypadModel::Other(s),
        }
    }
}

impl Serialize for KeypadModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KeypadModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(String::deserialize(d)?.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CameraPosition {
    Left,
    #[default]
    Center,
    Right,
}

impl FromStr for CameraPosition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(Self::Left),
            "center" => Ok(Self::Center),
            "right" => Ok(Self::Right),
            o => Err(format!("unknown camera position '{o}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoveringStrategy {
    Side,
    Over,
    Top,
    #[default]
    Unknown,
}

impl FromStr for CoveringStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "side" => Ok(Self::Side),
            "over" => Ok(Self::Over),
            "top" => Ok(Self::Top),
            "unknown" => Ok(Self::Unknown),
            o => Err(format!("unknown covering strategy '{o}'")),
        }
    }
}

/// One typing session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub id: String,
    pub participant_id: String,
    pub keypad_model: KeypadModel,
    pub feedback_freq_hz: f64,
    pub camera_position: CameraPosition,
    pub covering_strategy: CoveringStrategy,
    pub blacklisted: bool,
    pub fps: f64,
    pub video_path: PathBuf,
    pub audio_path: PathBuf,
    pub keylog_path: PathBuf,
    /// Added to keylog times to obtain media times.
    pub media_offset_ms: i64,
    /// Keypad crop; derived from fiducials when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_rect: Option<CropRect>,
    /// Key-row region inside the crop, for shield simulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_rows: Option<KeyRowsRect>,
}

impl Recording {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |reason: String| IngestError::InvalidRecording {
            id: self.id.clone(),
            reason,
        };
        if !(self.fps > 0.0) {
            return Err(bad(format!("fps {} must be positive", self.fps)));
        }
        if !(self.feedback_freq_hz > 0.0) {
            return Err(bad(format!("feedback frequency {} must be positive", self.feedback_freq_hz)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub participants: usize,
    pub entries: usize,
    pub discarded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub records: Vec<Recording>,
    pub summary: ManifestSummary,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            records: Vec::new(),
            summary: ManifestSummary::default(),
            warnings: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn participants(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.participant_id.as_str()).collect()
    }

    pub fn to_json(&self) -> Result<String, IngestError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let m: Self = serde_json::from_str(text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(IngestError::SchemaVersion(m.schema_version));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks unique ids and per-participant consistency (same
    /// blacklist flag and keypad model on every recording).
    pub fn validate(&self) -> Result<(), IngestError> {
        let mut ids = HashSet::new();
        let mut participants: HashMap<&str, (bool, &KeypadModel)> = HashMap::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(IngestError::DuplicateRecordingId(r.id.clone()));
            }
            r.validate()?;
            let entry = participants
                .entry(r.participant_id.as_str())
                .or_insert((r.blacklisted, &r.keypad_model));
            if *entry != (r.blacklisted, &r.keypad_model) {
                return Err(IngestError::InconsistentParticipant(r.participant_id.clone()));
            }
        }
        Ok(())
    }

    pub(crate) fn recount(&mut self) {
        self.summary.participants = self.participants().len();
    }
}

/// Per-recording metadata supplied alongside the media files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMetadata {
    pub id: String,
    pub participant_id: String,
    pub keypad_model: KeypadModel,
    #[serde(default)]
    pub feedback_freq_hz: Option<f64>,
    #[serde(default)]
    pub camera_position: CameraPosition,
    #[serde(default)]
    pub covering_strategy: CoveringStrategy,
    #[serde(default)]
    pub blacklisted: bool,
    #[serde(default)]
    pub media_offset_ms: i64,
    #[serde(default)]
    pub crop_rect: Option<CropRect>,
    #[serde(default)]
    pub key_rows: Option<KeyRowsRect>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataFile {
    pub recordings: Vec<RecordingMetadata>,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), IngestError> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Scans `root_dir` for recording triples and joins them with metadata.
///
/// `metadata_file` defaults to `root_dir/metadata.json`; it may be absent
/// only when the directory holds no recordings.
pub fn build_manifest(root_dir: &Path, metadata_file: Option<&Path>) -> Result<DatasetManifest, IngestError> {
    let mut files = Vec::new();
    collect_files(root_dir, &mut files)?;

    #[derive(Default)]
    struct Triple {
        video: Option<PathBuf>,
        audio: Option<PathBuf>,
        keylog: Option<PathBuf>,
    }
    let mut triples: std::collections::BTreeMap<String, Triple> = Default::default();
    let mut seen_video: HashSet<String> = HashSet::new();
    for p in files {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(id) = name.strip_suffix(KEYLOG_SUFFIX) {
            triples.entry(id.to_string()).or_default().keylog = Some(p);
        } else if let Some(id) = name.strip_suffix(&format!(".{VIDEO_EXT}")) {
            if !seen_video.insert(id.to_string()) {
                return Err(IngestError::DuplicateRecordingId(id.to_string()));
            }
            triples.entry(id.to_string()).or_default().video = Some(p);
        } else if let Some(id) = name.strip_suffix(&format!(".{AUDIO_EXT}")) {
            triples.entry(id.to_string()).or_default().audio = Some(p);
        }
    }

    let mut manifest = DatasetManifest::default();
    if triples.is_empty() {
        return Ok(manifest);
    }
    for (id, t) in &triples {
        for (present, what) in [(&t.video, "video"), (&t.audio, "audio"), (&t.keylog, "keylog")] {
            if present.is_none() {
                return Err(IngestError::MissingCompanionFile {
                    id: id.clone(),
                    missing: what,
                });
            }
        }
    }
    let meta_path = metadata_file
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root_dir.join(METADATA_FILE));
    let meta: MetadataFile = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let mut by_id: HashMap<&str, &RecordingMetadata> = HashMap::new();
    for m in &meta.recordings {
        if by_id.insert(m.id.as_str(), m).is_some() {
            return Err(IngestError::DuplicateRecordingId(m.id.clone()));
        }
    }

    for (id, t) in &triples {
        let (Some(video), Some(audio), Some(keylog)) = (t.video.clone(), t.audio.clone(), t.keylog.clone()) else {
            unreachable!("companions checked above")
        };
        let m = by_id.get(id.as_str()).ok_or_else(|| IngestError::MissingMetadata(id.clone()))?;
        let header = read_video_header(&video)?;
        let feedback = m
            .feedback_freq_hz
            .or_else(|| m.keypad_model.default_feedback_hz())
            .ok_or_else(|| IngestError::InvalidRecording {
                id: id.clone(),
                reason: "feedback_freq_hz required for unnamed keypad models".into(),
            })?;
        let events = parse_keylog(&keylog)?;
        let (entries, discarded) = extract_pin_entries(&events, DEFAULT_PIN_LEN);
        if entries.is_empty() {
            manifest.warnings.push(format!("{id}: no valid {DEFAULT_PIN_LEN}-digit entries"));
        }
        manifest.summary.entries += entries.len();
        manifest.summary.discarded += discarded;
        manifest.records.push(Recording {
            id: id.clone(),
            participant_id: m.participant_id.clone(),
            keypad_model: m.keypad_model.clone(),
            feedback_freq_hz: feedback,
            camera_position: m.camera_position,
            covering_strategy: m.covering_strategy,
            blacklisted: m.blacklisted,
            fps: header.fps,
            video_path: video,
            audio_path: audio,
            keylog_path: keylog,
            media_offset_ms: m.media_offset_ms,
            crop_rect: m.crop_rect,
            key_rows: m.key_rows,
        });
    }
    for m in &meta.recordings {
        if !triples.contains_key(&m.id) {
            manifest.warnings.push(format!("{}: metadata without media files", m.id));
        }
    }
    manifest.recount();
    manifest.validate()?;
    Ok(manifest)
}

const VIDEO_MAGIC: &[u8; 8] = b"PSVIDEO1";

/// Header of the raw-frame video container.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoHeader {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub fps: f64,
    pub frame_count: u32,
}

fn read_header<R: Read>(r: &mut R) -> Result<VideoHeader, IngestError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != VIDEO_MAGIC {
        return Err(IngestError::VideoFormat("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<u32, IngestError> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let width = next_u32(r)?;
    let height = next_u32(r)?;
    let channels = next_u32(r)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let fps = f64::from_le_bytes(b8);
    let frame_count = next_u32(r)?;
    if !(channels == 1 || channels == 3) || !(fps > 0.0) {
        return Err(IngestError::VideoFormat(format!("channels={channels} fps={fps}")));
    }
    Ok(VideoHeader {
        width,
        height,
        channels,
        fps,
        frame_count,
    })
}

pub fn read_video_header(path: &Path) -> Result<VideoHeader, IngestError> {
    read_header(&mut BufReader::new(File::open(path)?))
}

/// Raw container: magic, `u32` width/height/channels, `f64` fps, `u32`
/// frame count (all little-endian), then interleaved 8-bit frames.
pub fn write_video(path: &Path, fps: f64, frames: &[RawFrame]) -> Result<(), IngestError> {
    let first = frames
        .first()
        .ok_or_else(|| IngestError::VideoFormat("no frames".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VIDEO_MAGIC)?;
    w.write_all(&(first.width as u32).to_le_bytes())?;
    w.write_all(&(first.height as u32).to_le_bytes())?;
    w.write_all(&(first.channels as u32).to_le_bytes())?;
    w.write_all(&fps.to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    for f in frames {
        if (f.width, f.height, f.channels) != (first.width, first.height, first.channels) {
            return Err(IngestError::VideoFormat("frame size changes mid-stream".into()));
        }
        w.write_all(&f.data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<(VideoHeader, Vec<RawFrame>), IngestError> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    let size = (h.width * h.height * h.channels) as usize;
    let frames = (0..h.frame_count)
        .map(|_| {
            let mut data = vec![0u8; size];
            r.read_exact(&mut data)?;
            Ok(RawFrame {
                width: h.width as usize,
                height: h.height as usize,
                channels: h.channels as usize,
                data,
            })
        })
        .collect::<Result<_, IngestError>>()?;
    Ok((h, frames))
}

/// A recording with its media decoded into memory.
#[derive(Debug, Clone)]
pub struct LoadedRecording {
    pub meta: Recording,
    pub frames: Vec<RawFrame>,
    pub audio: AudioTrack,
    pub events: Vec<KeyEvent>,
}

pub fn load_recording(meta: &Recording) -> Result<LoadedRecording, IngestError> {
    let (_, frames) = read_video(&meta.video_path)?;
    Ok(LoadedRecording {
        meta: meta.clone(),
        frames,
        audio: AudioTrack::read_wav(&meta.audio_path)?,
        events: parse_keylog(&meta.keylog_path)?,
    })
}
