//! Scenario splits, Top-N metrics, confusion matrices, keypad heat maps and
//! the experiment runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CameraPosition, CoveringStrategy, DatasetManifest, KeypadModel};
use crate::model::{train, DigitDistribution, Lrcn, ModelConfig, ModelError, TrainConfig, TrainOutcome};
use crate::pipeline::{flatten, PipelineError, PreparedRecording, SampleOptions};
use crate::rank::{guesses, sorted_choices, truncate_for_4digit, Strategy};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("not enough participants: {0}")]
    InsufficientParticipants(String),
    #[error("length mismatch: {preds} predictions vs {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("n must be in 1..=10, got {0}")]
    InvalidN(usize),
    #[error("no predictions to evaluate")]
    Empty,
    #[error("no recordings match {0}")]
    EmptySubset(String),
    #[error("invalid ratios: {0}")]
    InvalidRatios(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Same keypad for training and test.
    Single,
    /// Train on one keypad, test on another.
    Independent,
    /// Both keypads everywhere.
    Mixed,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Single => "single",
            Scenario::Independent => "independent",
            Scenario::Mixed => "mixed",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Self::Single),
            "independent" => Ok(Self::Independent),
            "mixed" => Ok(Self::Mixed),
            o => Err(format!("unknown scenario '{o}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Train/val/test fractions of the scenario's participant pool.
    pub ratios: (f64, f64, f64),
    /// Validation fraction of the training keypad's participants in the
    /// independent scenario (its test set is the whole other keypad).
    pub independent_val_fraction: f64,
    /// Keep blacklisted participants in the training set.
    pub blacklist_in_train: bool,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            ratios: (0.8, 0.1, 0.1),
            independent_val_fraction: 0.125,
            blacklist_in_train: true,
            seed: 0,
        }
    }
}

/// Participant ids per role; user-independent by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSplit {
    pub scenario: Scenario,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub blacklist: BTreeSet<String>,
    pub seed: u64,
}

impl ScenarioSplit {
    pub fn role_of(&self, participant: &str) -> Option<&'static str> {
        if self.train.contains(participant) {
            Some("train")
        } else if self.val.contains(participant) {
            Some("val")
        } else if self.test.contains(participant) {
            Some("test")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
struct Participant {
    id: String,
    keypad: KeypadModel,
    blacklisted: bool,
}

fn participants(manifest: &DatasetManifest) -> Vec<Participant> {
    let mut seen = BTreeMap::new();
    for r in &manifest.records {
        seen.entry(r.participant_id.clone()).or_insert_with(|| Participant {
            id: r.participant_id.clone(),
            keypad: r.keypad_model.clone(),
            blacklisted: r.blacklisted,
        });
    }
    seen.into_values().collect()
}

/// Keypad collections ordered: named models first in catalogue order,
/// then other labels alphabetically.
fn collections(parts: &[Participant]) -> Vec<KeypadModel> {
    parts.iter().map(|p| p.keypad.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

fn shuffled(mut ids: Vec<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    ids.sort();
    ids.shuffle(rng);
    ids
}

/// Deterministic participant split for `scenario`.
///
/// Counts are `round(ratio · n)` for train and val, test takes the rest.
/// Validation and test are drawn only from non-blacklisted participants;
/// everyone else trains (blacklisted ones only if `blacklist_in_train`).
pub fn make_split(
    manifest: &DatasetManifest,
    scenario: Scenario,
    opts: &SplitOptions,
) -> Result<ScenarioSplit, EvalError> {
    let (rt, rv, rs) = opts.ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-6 {
        return Err(EvalError::InvalidRatios(format!("{:?}", opts.ratios)));
    }
    let parts = participants(manifest);
    let cols = collections(&parts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let in_col = |k: &KeypadModel| -> Vec<&Participant> { parts.iter().filter(|p| &p.keypad == k).collect() };

    let (pool, test_pool): (Vec<&Participant>, Option<Vec<&Participant>>) = match scenario {
        Scenario::Single => {
            let first = cols
                .first()
                .ok_or_else(|| EvalError::InsufficientParticipants("empty manifest".into()))?;
            (in_col(first), None)
        }
        Scenario::Mixed => (parts.iter().collect(), None),
        Scenario::Independent => {
            if cols.len() < 2 {
                return Err(EvalError::InsufficientParticipants(
                    "independent scenario needs two keypad models".into(),
                ));
            }
            (in_col(&cols[0]), Some(in_col(&cols[1])))
        }
    };
    let n = pool.len();
    let blacklist: BTreeSet<String> = pool
        .iter()
        .chain(test_pool.iter().flatten())
        .filter(|p| p.blacklisted)
        .map(|p| p.id.clone())
        .collect();
    let clean = shuffled(
        pool.iter().filter(|p| !p.blacklisted).map(|p| p.id.clone()).collect(),
        &mut rng,
    );

    let (n_val, n_test) = match &test_pool {
        Some(_) => ((opts.independent_val_fraction * n as f64).round() as usize, 0),
        None => {
            let n_train = (rt * n as f64).round() as usize;
            let n_val = (rv * n as f64).round() as usize;
            (n_val, n.saturating_sub(n_train + n_val))
        }
    };
    if clean.len() < n_val + n_test {
        return Err(EvalError::InsufficientParticipants(format!(
            "{} non-blacklisted participants for {n_val} val + {n_test} test",
            clean.len()
        )));
    }
    let val: BTreeSet<String> = clean[..n_val].iter().cloned().collect();
    let mut test: BTreeSet<String> = clean[n_val..n_val + n_test].iter().cloned().collect();
    if let Some(tp) = &test_pool {
        test = tp.iter().filter(|p| !p.blacklisted).map(|p| p.id.clone()).collect();
    }
    let train: BTreeSet<String> = pool
        .iter()
        .filter(|p| !val.contains(&p.id) && !test.contains(&p.id))
        .filter(|p| opts.blacklist_in_train || !p.blacklisted)
        .map(|p| p.id.clone())
        .collect();
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(EvalError::InsufficientParticipants(format!(
            "split {}/{}/{} has an empty role",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok(ScenarioSplit {
        scenario,
        train,
        val,
        test,
        blacklist,
        seed: opts.seed,
    })
}

fn check_n(n: usize) -> Result<(), EvalError> {
    if (1..=10).contains(&n) {
        Ok(())
    } else {
        Err(EvalError::InvalidN(n))
    }
}

/// Fraction of samples whose label is among the `n` most probable digits
/// (ties broken toward the lower digit).
pub fn key_top_n_accuracy(preds: &[DigitDistribution], labels: &[u8], n: usize) -> Result<f64, EvalError> {
    check_n(n)?;
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| sorted_choices(p)[..n].contains(l))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of PINs found within the first `n` guesses of `strategy`.
pub fn pin_top_n_accuracy(
    per_pin_dists: &[Vec<DigitDistribution>],
    true_pins: &[Vec<u8>],
    n: usize,
    strategy: Strategy,
) -> Result<f64, EvalError> {
    if per_pin_dists.len() != true_pins.len() {
        return Err(EvalError::LengthMismatch {
            preds: per_pin_dists.len(),
            labels: true_pins.len(),
        });
    }
    if per_pin_dists.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = per_pin_dists
        .iter()
        .zip(true_pins)
        .filter(|(d, pin)| guesses(d, n, strategy).iter().any(|g| g == *pin))
        .count();
    Ok(hits as f64 / true_pins.len() as f64)
}

/// Keypad layout `123 / 456 / 789 / _0_` as (row, col).
pub fn keypad_cell(digit: u8) -> (usize, usize) {
    match digit {
        0 => (3, 1),
        d => (((d - 1) / 3) as usize, ((d - 1) % 3) as usize),
    }
}

/// Digits sharing an edge on the keypad.
pub fn keypad_adjacent(a: u8, b: u8) -> bool {
    let (ra, ca) = keypad_cell(a);
    let (rb, cb) = keypad_cell(b);
    ra.abs_diff(rb) + ca.abs_diff(cb) == 1
}

/// Mean predicted distribution for one true digit, laid out on the keypad;
/// the two blank cells of the bottom row are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub digit: u8,
    pub samples: usize,
    pub grid: [[Option<f64>; 3]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// `matrix[i][j]`: fraction of true-`i` samples predicted `j`. Rows of
    /// digits without samples are all zero.
    pub matrix: Vec<Vec<f64>>,
    pub support: Vec<usize>,
    pub heatmaps: Vec<Heatmap>,
}

impl Confusion {
    /// Share of off-diagonal mass that lands on keypad neighbours.
    pub fn adjacency_mass_ratio(&self) -> Option<f64> {
        let (mut adj, mut off) = (0.0, 0.0);
        for i in 0..10u8 {
            for j in 0..10u8 {
                if i != j {
                    let m = self.matrix[i as usize][j as usize] * self.support[i as usize] as f64;
                    off += m;
                    if keypad_adjacent(i, j) {
                        adj += m;
                    }
                }
            }
        }
        (off > 0.0).then(|| adj / off)
    }
}

pub fn confusion_and_heatmaps(preds: &[DigitDistribution], labels: &[u8]) -> Result<Confusion, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = vec![vec![0usize; 10]; 10];
    let mut sums = vec![[0.0f64; 10]; 10];
    let mut support = vec![0usize; 10];
    for (p, &l) in preds.iter().zip(labels) {
        let l = l as usize;
        support[l] += 1;
        counts[l][p.argmax() as usize] += 1;
        for (s, v) in sums[l].iter_mut().zip(p.probs()) {
            *s += v;
        }
    }
    let matrix = counts
        .iter()
        .zip(&support)
        .map(|(row, &s)| row.iter().map(|&c| if s > 0 { c as f64 / s as f64 } else { 0.0 }).collect())
        .collect();
    let heatmaps = (0..10u8)
        .map(|d| {
            let s = support[d as usize];
            let mut grid = [[None; 3]; 4];
            for j in 0..10u8 {
                let (r, c) = keypad_cell(j);
                grid[r][c] = Some(if s > 0 { sums[d as usize][j as usize] / s as f64 } else { 0.0 });
            }
            Heatmap {
                digit: d,
                samples: s,
                grid,
            }
        })
        .collect();
    Ok(Confusion {
        matrix,
        support,
        heatmaps,
    })
}

/// Settings an experiment ran under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub scenario: Option<Scenario>,
    pub strategy: Strategy,
    pub shield: u32,
    pub resolution: usize,
    pub frame_error_k: u32,
    pub camera: Option<CameraPosition>,
    pub covering: Option<CoveringStrategy>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub key_top_n: BTreeMap<usize, f64>,
    pub pin5_top_n: BTreeMap<usize, f64>,
    pub pin4_top_n: BTreeMap<usize, f64>,
    pub confusion: Confusion,
    pub n_keys: usize,
    pub n_pins: usize,
    pub metadata: ExperimentMeta,
}

pub const TOP_N: [usize; 3] = [1, 2, 3];

impl EvalReport {
    /// Builds the report from per-PIN predictions and true PINs.
    pub fn from_predictions(
        per_pin: &[Vec<DigitDistribution>],
        true_pins: &[Vec<u8>],
        metadata: ExperimentMeta,
    ) -> Result<Self, EvalError> {
        let flat: Vec<DigitDistribution> = per_pin.iter().flatten().cloned().collect();
        let labels: Vec<u8> = true_pins.iter().flatten().copied().collect();
        let strategy = metadata.strategy;
        let d4: Vec<Vec<DigitDistribution>> = per_pin.iter().map(|d| truncate_for_4digit(d)).collect();
        let p4: Vec<Vec<u8>> = true_pins.iter().map(|p| p[..p.len().min(4)].to_vec()).collect();
        let mut key_top_n = BTreeMap::new();
        let mut pin5_top_n = BTreeMap::new();
        let mut pin4_top_n = BTreeMap::new();
        for n in TOP_N {
            key_top_n.insert(n, key_top_n_accuracy(&flat, &labels, n)?);
            pin5_top_n.insert(n, pin_top_n_accuracy(per_pin, true_pins, n, strategy)?);
            pin4_top_n.insert(n, pin_top_n_accuracy(&d4, &p4, n, strategy)?);
        }
        Ok(Self {
            key_top_n,
            pin5_top_n,
            pin4_top_n,
            confusion: confusion_and_heatmaps(&flat, &labels)?,
            n_keys: labels.len(),
            n_pins: true_pins.len(),
            metadata,
        })
    }

    pub fn key_top1(&self) -> f64 {
        self.key_top_n[&1]
    }

    pub fn pin_top3(&self) -> f64 {
        self.pin5_top_n[&3]
    }

    /// Accuracies within [0, 1] and non-decreasing in n.
    pub fn is_consistent(&self) -> bool {
        [&self.key_top_n, &self.pin5_top_n, &self.pin4_top_n].iter().all(|m| {
            let v: Vec<f64> = m.values().copied().collect();
            v.iter().all(|a| (0.0..=1.0).contains(a)) && v.windows(2).all(|w| w[0] <= w[1])
        })
    }

    /// Writes `report.json`, `accuracy.svg`, `heatmaps.svg` and
    /// `confusion.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("accuracy.svg"), accuracy_svg(self))?;
        fs::write(dir.join("heatmaps.svg"), heatmaps_svg(&self.confusion))?;
        fs::write(dir.join("confusion.svg"), confusion_svg(&self.confusion))?;
        Ok(())
    }
}

fn gray_fill(v: f64) -> String {
    let c = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
    format!("rgb({c},{c},255)")
}

/// Grouped bars for key, 4-digit and 5-digit Top-1/2/3.
pub fn accuracy_svg(r: &EvalReport) -> String {
    let groups = [("key", &r.key_top_n), ("pin4", &r.pin4_top_n), ("pin5", &r.pin5_top_n)];
    let (w, h, base) = (360.0, 220.0, 190.0);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#);
    s.push_str(&format!(r#"<line x1="30" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, w - 10.0));
    for (gi, (name, m)) in groups.iter().enumerate() {
        let gx = 40.0 + gi as f64 * 105.0;
        for (bi, (n, acc)) in m.iter().enumerate() {
            let bh = acc * 160.0;
            let x = gx + bi as f64 * 30.0;
            s.push_str(&format!(
                r#"<rect x="{x}" y="{:.1}" width="24" height="{bh:.1}" fill="{}"/><text x="{}" y="{:.1}" text-anchor="middle">{acc:.2}</text><text x="{}" y="{}" text-anchor="middle">top{n}</text>"#,
                base - bh,
                gray_fill(0.35 + 0.2 * bi as f64),
                x + 12.0,
                base - bh - 2.0,
                x + 12.0,
                base + 12.0
            ));
        }
        s.push_str(&format!(r#"<text x="{}" y="{}" text-anchor="middle">{name}</text>"#, gx + 42.0, base + 25.0));
    }
    s.push_str("</svg>\n");
    s
}

/// One 3x4 keypad panel per true digit.
pub fn heatmaps_svg(c: &Confusion) -> String {
    let cell = 22.0;
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="9">"#,
        5.0 * (3.0 * cell + 16.0),
        2.0 * (4.0 * cell + 24.0)
    );
    for hm in &c.heatmaps {
        let ox = (hm.digit as usize % 5) as f64 * (3.0 * cell + 16.0) + 8.0;
        let oy = (hm.digit as usize / 5) as f64 * (4.0 * cell + 24.0) + 16.0;
        s.push_str(&format!(r#"<text x="{ox}" y="{}">digit {} (n={})</text>"#, oy - 4.0, hm.digit, hm.samples));
        for (r, row) in hm.grid.iter().enumerate() {
            for (col, v) in row.iter().enumerate() {
                let Some(v) = v else { continue };
                let x = ox + col as f64 * cell;
                let y = oy + r as f64 * cell;
                s.push_str(&format!(
                    r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="gray"/><text x="{}" y="{}" text-anchor="middle">{v:.2}</text>"#,
                    gray_fill(*v),
                    x + cell / 2.0,
                    y + cell / 2.0 + 3.0
                ));
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn confusion_svg(c: &Confusion) -> String {
    let cell = 26.0;
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="9">"#,
        11.0 * cell + 10.0,
        11.0 * cell + 10.0
    );
    for d in 0..10 {
        let p = cell * (d as f64 + 1.5);
        s.push_str(&format!(r#"<text x="{p}" y="{}" text-anchor="middle">{d}</text>"#, cell * 0.7));
        s.push_str(&format!(r#"<text x="{}" y="{}" text-anchor="middle">{d}</text>"#, cell * 0.5, p + 3.0));
    }
    for (i, row) in c.matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let x = cell * (j as f64 + 1.0);
            let y = cell * (i as f64 + 1.0);
            s.push_str(&format!(
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="gray"/><text x="{}" y="{}" text-anchor="middle">{v:.2}</text>"#,
                gray_fill(*v),
                x + cell / 2.0,
                y + cell / 2.0 + 3.0
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Recordings restricted to one covering strategy.
pub fn filter_by_covering_strategy(
    manifest: &DatasetManifest,
    strategy: CoveringStrategy,
) -> Result<DatasetManifest, EvalError> {
    filter_manifest(manifest, |r| r.covering_strategy == strategy, &format!("covering strategy {strategy:?}"))
}

pub fn filter_by_camera(manifest: &DatasetManifest, camera: CameraPosition) -> Result<DatasetManifest, EvalError> {
    filter_manifest(manifest, |r| r.camera_position == camera, &format!("camera {camera:?}"))
}

fn filter_manifest<F>(manifest: &DatasetManifest, keep: F, what: &str) -> Result<DatasetManifest, EvalError>
where
    F: Fn(&crate::ingest::Recording) -> bool,
{
    let records: Vec<_> = manifest.records.iter().filter(|r| keep(r)).cloned().collect();
    if records.is_empty() {
        return Err(EvalError::EmptySubset(what.to_string()));
    }
    let mut out = DatasetManifest {
        records,
        ..manifest.clone()
    };
    out.summary.participants = out.participants().len();
    Ok(out)
}

/// Test-time knob setting of one report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knobs {
    pub shield: u32,
    pub frame_error_k: u32,
    pub resolution: Option<usize>,
}

impl Knobs {
    pub const NONE: Knobs = Knobs {
        shield: 0,
        frame_error_k: 0,
        resolution: None,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Side of the preprocessed crop before any resolution knob.
    pub out_size: usize,
    pub strategy: Strategy,
    pub knobs: Vec<Knobs>,
    pub camera: Option<CameraPosition>,
    pub covering: Option<CoveringStrategy>,
    pub seed: u64,
}

pub struct ExperimentOutcome {
    pub reports: Vec<(Knobs, EvalReport)>,
    /// Training runs, one per distinct model input size.
    pub trained: Vec<(usize, TrainOutcome)>,
}

fn select<'a>(recordings: &'a [PreparedRecording], ids: &BTreeSet<String>, cfg: &ExperimentConfig) -> Vec<&'a PreparedRecording> {
    recordings
        .iter()
        .filter(|r| ids.contains(&r.meta.participant_id))
        .filter(|r| cfg.camera.is_none_or(|c| r.meta.camera_position == c))
        .filter(|r| cfg.covering.is_none_or(|c| r.meta.covering_strategy == c))
        .collect()
}

fn collect_samples(
    recs: &[&PreparedRecording],
    opts: &SampleOptions,
) -> Result<Vec<crate::pipeline::PinSamples>, EvalError> {
    let mut out = Vec::new();
    for r in recs {
        out.extend(r.samples(opts)?);
    }
    Ok(out)
}

/// Evaluates `model` on `recordings` under `opts`.
pub fn evaluate_model(
    model: &Lrcn,
    recordings: &[&PreparedRecording],
    opts: &SampleOptions,
    metadata: ExperimentMeta,
) -> Result<EvalReport, EvalError> {
    let pins = collect_samples(recordings, opts)?;
    let mut per_pin = Vec::with_capacity(pins.len());
    let mut truth = Vec::with_capacity(pins.len());
    for p in &pins {
        let Some(digits) = &p.digits else { continue };
        let refs: Vec<_> = p.samples.iter().collect();
        per_pin.push(model.predict_batch(&refs)?);
        truth.push(digits.clone());
    }
    EvalReport::from_predictions(&per_pin, &truth, metadata)
}

fn train_selected(
    train_recs: &[&PreparedRecording],
    val_recs: &[&PreparedRecording],
    cfg: &ExperimentConfig,
    resolution: Option<usize>,
) -> Result<TrainOutcome, EvalError> {
    let opts = SampleOptions {
        seed: cfg.seed,
        resolution,
        ..SampleOptions::new(cfg.out_size)
    };
    let tr = flatten(&collect_samples(train_recs, &opts)?);
    let va = flatten(&collect_samples(val_recs, &opts)?);
    let fresh = Lrcn::new(cfg.model.clone().with_input_size(opts.model_input_size()), cfg.seed)?;
    Ok(train(fresh, &tr, &va, &cfg.train)?)
}

/// Trains a fresh model on the split's train participants, validating on
/// its val participants, without any test-time knobs.
pub fn train_on_split(
    split: &ScenarioSplit,
    recordings: &[PreparedRecording],
    cfg: &ExperimentConfig,
    resolution: Option<usize>,
) -> Result<TrainOutcome, EvalError> {
    let train_recs = select(recordings, &split.train, cfg);
    let val_recs = select(recordings, &split.val, cfg);
    train_selected(&train_recs, &val_recs, cfg, resolution)
}

/// Trains (unless `model` is given) and evaluates one report per knob
/// setting on the split's test participants. Knobs with a resolution
/// different from the model input get their own trained model.
pub fn run_experiment(
    split: &ScenarioSplit,
    recordings: &[PreparedRecording],
    cfg: &ExperimentConfig,
    model: Option<&Lrcn>,
) -> Result<ExperimentOutcome, EvalError> {
    let train_recs = select(recordings, &split.train, cfg);
    let val_recs = select(recordings, &split.val, cfg);
    let test_recs = select(recordings, &split.test, cfg);
    if test_recs.is_empty() {
        return Err(EvalError::EmptySubset("test recordings after filters".into()));
    }
    let base = SampleOptions {
        seed: cfg.seed,
        ..SampleOptions::new(cfg.out_size)
    };
    let mut models: BTreeMap<usize, Lrcn> = BTreeMap::new();
    let mut trained = Vec::new();
    if let Some(m) = model {
        models.insert(m.config().input_size, m.clone());
    }
    let mut reports = Vec::with_capacity(cfg.knobs.len());
    for knobs in &cfg.knobs {
        let opts = SampleOptions {
            shield: knobs.shield,
            frame_error_k: knobs.frame_error_k,
            resolution: knobs.resolution,
            ..base
        };
        let size = opts.model_input_size();
        if let std::collections::btree_map::Entry::Vacant(e) = models.entry(size) {
            if let Some(m) = model {
                return Err(ModelError::ShapeMismatch(format!(
                    "model input {} but knobs need {size}",
                    m.config().input_size
                ))
                .into());
            }
            let outcome = train_selected(&train_recs, &val_recs, cfg, knobs.resolution)?;
            e.insert(outcome.best.clone());
            trained.push((size, outcome));
        }
        let meta = ExperimentMeta {
            scenario: Some(split.scenario),
            strategy: cfg.strategy,
            shield: knobs.shield,
            resolution: size,
            frame_error_k: knobs.frame_error_k,
            camera: cfg.camera,
            covering: cfg.covering,
            seed: cfg.seed,
        };
        let report = evaluate_model(&models[&size], &test_recs, &opts, meta)?;
        reports.push((*knobs, report));
    }
    Ok(ExperimentOutcome { reports, trained })
}
