//! Layered run settings: config file < environment < flags.
//!
//! Every knob is optional at each layer. Clap already folds environment
//! variables into flag values, so merging is `flag.or(file)` followed by a
//! per-command default.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pinsight::eval::Scenario;
use pinsight::ingest::{CameraPosition, CoveringStrategy};
use pinsight::rank::Strategy;
use pinsight::video::{FRAME_ERROR_LEVELS, SHIELD_LEVELS};
use serde::{Deserialize, Serialize};

pub const RESOLUTION_LEVELS: [usize; 3] = [250, 125, 64];

/// Bad flag value or combination; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metadata: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shield: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_error_k: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covering: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blacklist_in_train: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback_freq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<String>,
}

impl Layer {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        match serde_json::from_str(&text) {
            Ok(l) => Ok(l),
            Err(e) => usage(format!("config {}: {e}", path.display())),
        }
    }

    /// Fields set in `top` win over fields set in `self`.
    pub fn overlay(self, top: Layer) -> Layer {
        Layer {
            data: top.data.or(self.data),
            metadata: top.metadata.or(self.metadata),
            out: top.out.or(self.out),
            seed: top.seed.or(self.seed),
            jobs: top.jobs.or(self.jobs),
            scenario: top.scenario.or(self.scenario),
            ratios: top.ratios.or(self.ratios),
            strategy: top.strategy.or(self.strategy),
            shield: top.shield.or(self.shield),
            resolution: top.resolution.or(self.resolution),
            frame_error_k: top.frame_error_k.or(self.frame_error_k),
            camera: top.camera.or(self.camera),
            covering: top.covering.or(self.covering),
            blacklist_in_train: top.blacklist_in_train.or(self.blacklist_in_train),
            feedback_freq: top.feedback_freq.or(self.feedback_freq),
            model: top.model.or(self.model),
            size: top.size.or(self.size),
            epochs: top.epochs.or(self.epochs),
            timing: top.timing.or(self.timing),
        }
    }

    pub fn data(&self) -> anyhow::Result<&Path> {
        match &self.data {
            Some(p) => Ok(p),
            None => usage("no dataset root: pass --data or set PINSIGHT_DATA"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn jobs(&self) -> anyhow::Result<usize> {
        match self.jobs {
            Some(0) => usage("--jobs must be at least 1"),
            Some(n) => Ok(n),
            None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }

    pub fn scenario(&self) -> anyhow::Result<Scenario> {
        parse_or(&self.scenario, Scenario::Single)
    }

    /// Train/val/test fractions, given as `a,b,c` and normalized.
    pub fn ratios(&self) -> anyhow::Result<(f64, f64, f64)> {
        let Some(text) = &self.ratios else {
            return Ok((0.8, 0.1, 0.1));
        };
        let parts: Vec<f64> = match text.split(',').map(|p| p.trim().parse::<f64>()).collect() {
            Ok(v) => v,
            Err(_) => return usage(format!("--ratios expects three numbers, got '{text}'")),
        };
        let sum: f64 = parts.iter().sum();
        if parts.len() != 3 || parts.iter().any(|v| !(*v >= 0.0)) || !(sum > 0.0) {
            return usage(format!("--ratios expects three non-negative numbers, got '{text}'"));
        }
        Ok((parts[0] / sum, parts[1] / sum, parts[2] / sum))
    }

    pub fn strategy(&self) -> anyhow::Result<Strategy> {
        parse_or(&self.strategy, Strategy::Product)
    }

    pub fn shield(&self) -> anyhow::Result<u32> {
        match self.shield {
            None | Some(0) => Ok(0),
            Some(v) if SHIELD_LEVELS.contains(&v) => Ok(v),
            Some(v) => usage(format!("--shield must be one of 0, 25, 50, 75, 100; got {v}")),
        }
    }

    pub fn frame_error_k(&self) -> anyhow::Result<u32> {
        match self.frame_error_k {
            None | Some(0) => Ok(0),
            Some(v) if FRAME_ERROR_LEVELS.contains(&v) => Ok(v),
            Some(v) => usage(format!("--frame-error-k must be one of 0, 3, 5, 10, 15, 20; got {v}")),
        }
    }

    /// Resolution knob relative to the preprocessing size; equal sizes mean
    /// no downscaling.
    pub fn resolution(&self, size: usize) -> anyhow::Result<Option<usize>> {
        match self.resolution {
            None => Ok(None),
            Some(r) if !RESOLUTION_LEVELS.contains(&r) => {
                usage(format!("--resolution must be one of 250, 125, 64; got {r}"))
            }
            Some(r) if r == size => Ok(None),
            Some(r) if r > size => usage(format!("--resolution {r} exceeds the preprocessing size {size}")),
            Some(r) => Ok(Some(r)),
        }
    }

    pub fn camera(&self) -> anyhow::Result<Option<CameraPosition>> {
        match &self.camera {
            None => Ok(None),
            Some(s) => match s.parse() {
                Ok(c) => Ok(Some(c)),
                Err(e) => usage(e),
            },
        }
    }

    /// `all` (or unset) disables the filter.
    pub fn covering(&self) -> anyhow::Result<Option<CoveringStrategy>> {
        match self.covering.as_deref() {
            None | Some("all") => Ok(None),
            Some(s @ ("side" | "over" | "top")) => Ok(Some(s.parse().expect("listed"))),
            Some(s) => usage(format!("--covering must be side, over, top or all; got '{s}'")),
        }
    }

    pub fn blacklist_in_train(&self) -> bool {
        self.blacklist_in_train.unwrap_or(true)
    }

    pub fn model_kind(&self) -> anyhow::Result<ModelKind> {
        match self.model.as_deref() {
            None | Some("small") => Ok(ModelKind::Small),
            Some("full") => Ok(ModelKind::Full),
            Some(o) => usage(format!("--model must be small or full; got '{o}'")),
        }
    }

    pub fn size(&self, kind: ModelKind) -> anyhow::Result<usize> {
        match self.size {
            Some(s) if s < pinsight::video::MIN_OUT_SIZE => {
                usage(format!("--size must be at least {}", pinsight::video::MIN_OUT_SIZE))
            }
            Some(s) => Ok(s),
            None => Ok(match kind {
                ModelKind::Small => 64,
                ModelKind::Full => pinsight::video::DEFAULT_OUT_SIZE,
            }),
        }
    }

    pub fn timing(&self) -> anyhow::Result<pinsight::pipeline::TimingSource> {
        use pinsight::pipeline::TimingSource;
        match self.timing.as_deref() {
            None | Some("audio") => Ok(TimingSource::Audio),
            Some("keylog") => Ok(TimingSource::Keylog),
            Some(o) => usage(format!("--timing must be audio or keylog; got '{o}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Quarter-width network for CPU runs.
    Small,
    /// Full-size network and schedule.
    Full,
}

fn parse_or<T: std::str::FromStr<Err = String>>(v: &Option<String>, default: T) -> anyhow::Result<T> {
    match v {
        None => Ok(default),
        Some(s) => match s.parse() {
            Ok(t) => Ok(t),
            Err(e) => usage(e),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_layer_wins_and_gaps_fall_through() {
        let file = Layer {
            seed: Some(1),
            shield: Some(50),
            ..Default::default()
        };
        let flags = Layer {
            seed: Some(7),
            ..Default::default()
        };
        let l = file.overlay(flags);
        assert_eq!(l.seed, Some(7));
        assert_eq!(l.shield, Some(50));
    }

    #[test]
    fn rejects_off_grid_knobs() {
        let l = Layer {
            shield: Some(30),
            ..Default::default()
        };
        assert!(l.shield().unwrap_err().downcast_ref::<UsageError>().is_some());
        let l = Layer {
            resolution: Some(100),
            ..Default::default()
        };
        assert!(l.resolution(250).is_err());
    }

    #[test]
    fn resolution_equal_to_size_is_a_no_op() {
        let l = Layer {
            resolution: Some(64),
            ..Default::default()
        };
        assert_eq!(l.resolution(64).unwrap(), None);
        let l = Layer {
            resolution: Some(125),
            ..Default::default()
        };
        assert_eq!(l.resolution(250).unwrap(), Some(125));
    }

    #[test]
    fn ratios_are_normalized() {
        let l = Layer {
            ratios: Some("4,1,1".into()),
            ..Default::default()
        };
        let (a, b, c) = l.ratios().unwrap();
        assert!((a - 4.0 / 6.0).abs() < 1e-12 && (b - 1.0 / 6.0).abs() < 1e-12 && (c - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_config_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sheild": 25}"#).unwrap();
        assert!(Layer::load(&p).unwrap_err().downcast_ref::<UsageError>().is_some());
    }
}
