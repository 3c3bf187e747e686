//! Acceptance gate: one PASS/FAIL line per criterion.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
//!
//! The criteria run sequentially inside a single test so that each measured
//! runtime is not shared with concurrently running tests. Criteria 7 and 8
//! share one trained model; its training time is charged to criterion 7.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use pinsight::audio::{detect_keypress_times, AudioError, AudioTrack, DetectionConfig};
use pinsight::eval::{
    make_split, run_experiment, EvalReport, ExperimentConfig, ExperimentMeta, Knobs, Scenario, SplitOptions,
};
use pinsight::ingest::{CameraPosition, CoveringStrategy, DatasetManifest, KeypadModel, Recording};
use pinsight::model::layers::softmax_rows;
use pinsight::model::{DigitDistribution, Lrcn, ModelConfig, TrainConfig};
use pinsight::pipeline::{prepare_recording, PipelineConfig, PreparedRecording};
use pinsight::rank::{rank_pins, rank_pins_exhaustive, swap_heuristic_guesses, sorted_choices, Strategy};
use pinsight::synth::{generate_corpus_in_memory, SynthConfig};
use pinsight::video::{segment_keypress, Image, KeypressSample, Slot, CONTEXT, SEQUENCE_LEN, TARGET_INDEX};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Per-position probabilities; unlisted digits share the remaining mass.
fn sparse(listed: &[(u8, f64)]) -> DigitDistribution {
    let rest = 1.0 - listed.iter().map(|(_, p)| p).sum::<f64>();
    let share = rest / (10 - listed.len()) as f64;
    let mut p = [share; 10];
    for &(d, v) in listed {
        p[d as usize] = v;
    }
    DigitDistribution::new(p).unwrap()
}

fn worked_example() -> Vec<DigitDistribution> {
    vec![
        sparse(&[(7, 0.999)]),
        sparse(&[(3, 0.979), (2, 0.012), (6, 0.005)]),
        sparse(&[(6, 0.819), (9, 0.170), (8, 0.009)]),
        sparse(&[(3, 0.809), (2, 0.092), (5, 0.069)]),
        sparse(&[(2, 0.329), (3, 0.315), (6, 0.185)]),
    ]
}

fn digits(s: &str) -> Vec<u8> {
    s.bytes().map(|b| b - b'0').collect()
}

fn criterion_1() -> Outcome {
    let top = rank_pins(&worked_example(), 3);
    let pins: Vec<String> = top.iter().map(|c| c.pin_string()).collect();
    ensure!(pins == ["73632", "73633", "73636"], "top-3 {pins:?}");
    let want = [0.2132, 0.2043, 0.1196];
    for (c, w) in top.iter().zip(want) {
        ensure!((c.prob() - w).abs() <= 0.002, "{} has p={:.4}, want {w}", c.pin_string(), c.prob());
    }
    Ok(format!(
        "{} ({:.4}), {} ({:.4}), {} ({:.4})",
        pins[0],
        top[0].prob(),
        pins[1],
        top[1].prob(),
        pins[2],
        top[2].prob()
    ))
}

fn random_dist(rng: &mut ChaCha8Rng) -> DigitDistribution {
    // Every third distribution uses coarse weights so ties are exercised.
    let coarse = rng.gen_ratio(1, 3);
    let w: Vec<f64> = (0..10)
        .map(|_| if coarse { rng.gen_range(1..4) as f64 } else { rng.gen::<f64>() + 1e-9 })
        .collect();
    DigitDistribution::from_weights(&w).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for n in [2usize, 3, 4] {
        for set in 0..100 {
            let dists: Vec<_> = (0..n).map(|_| random_dist(&mut rng)).collect();
            let fast = rank_pins(&dists, 10);
            let brute = rank_pins_exhaustive(&dists, 10).unwrap();
            ensure!(fast.len() == 10, "N={n} set {set}: {} candidates", fast.len());
            for (a, b) in fast.iter().zip(&brute) {
                ensure!(
                    a.digits == b.digits && a.log_prob == b.log_prob && a.rank == b.rank,
                    "N={n} set {set}: rank {} is {} vs enumeration {}",
                    a.rank,
                    a.pin_string(),
                    b.pin_string()
                );
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} sets, top-10 identical to full enumeration"))
}

fn criterion_3() -> Outcome {
    let dists = worked_example();
    let guesses = swap_heuristic_guesses(&dists, 2);
    ensure!(guesses[0] == digits("73632"), "attempt 1 {:?}", guesses[0]);
    ensure!(guesses[1] == digits("73633"), "attempt 2 {:?}", guesses[1]);
    let gaps: Vec<f64> = dists
        .iter()
        .map(|d| {
            let c = sorted_choices(d);
            d.p(c[0]) - d.p(c[1])
        })
        .collect();
    let min_pos = (0..gaps.len()).min_by(|&a, &b| gaps[a].partial_cmp(&gaps[b]).unwrap()).unwrap();
    ensure!(min_pos == 4 && (gaps[4] - 0.014).abs() < 1e-9, "minimal gap {} at position {}", gaps[min_pos], min_pos + 1);

    // Constructed inputs: position i gets gap g_i; swaps must follow ascending
    // gap, equal gaps broken toward the earlier position.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    for n in 2..=8usize {
        for _ in 0..25 {
            let mut levels: Vec<u32> = (0..n as u32).collect();
            if rng.gen_bool(0.3) {
                // Introduce a tie.
                let i = rng.gen_range(1..n);
                levels[i] = levels[i - 1];
            }
            levels.shuffle(&mut rng);
            let mut top = Vec::with_capacity(n);
            let mut second = Vec::with_capacity(n);
            let dists: Vec<DigitDistribution> = levels
                .iter()
                .map(|&lvl| {
                    let a = rng.gen_range(0..10u8);
                    let b = (a + rng.gen_range(1..10u8)) % 10;
                    top.push(a);
                    second.push(b);
                    let gap = 0.02 + 0.05 * lvl as f64;
                    let p2 = 0.3;
                    let rest = (1.0 - 2.0 * p2 - gap) / 8.0;
                    let mut p = [rest; 10];
                    p[a as usize] = p2 + gap;
                    p[b as usize] = p2;
                    DigitDistribution::new(p).unwrap()
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (levels[i], i));
            let got = swap_heuristic_guesses(&dists, n + 1);
            ensure!(got.len() == n + 1 && got[0] == top, "guess 1 {:?} vs argmax {top:?}", got[0]);
            for (j, &pos) in order.iter().enumerate() {
                let mut want = top.clone();
                want[pos] = second[pos];
                ensure!(got[j + 1] == want, "levels {levels:?}: attempt {} {:?}, want {want:?}", j + 2, got[j + 1]);
            }
            cases += 1;
        }
    }
    Ok(format!("attempt 2 = 73633 (gap {:.3} at position 5); {cases} gap-ordered cases", gaps[4]))
}

/// White noise plus Hann-windowed tone bursts centered on `centers_ms`.
/// SNR is tone power (A²/2) over noise variance.
fn burst_track(freq: f64, fs: u32, centers_ms: &[f64], snr_db: f64, len_ms: f64, seed: u64) -> AudioTrack {
    let fs_f = fs as f64;
    let n = (len_ms / 1000.0 * fs_f) as usize;
    let amp = 0.5;
    let sigma = (amp * amp / 2.0 / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut x: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
    let half = 0.025 * fs_f;
    for &c in centers_ms {
        let mid = c / 1000.0 * fs_f;
        let lo = (mid - half).ceil().max(0.0) as usize;
        let hi = ((mid + half).floor() as usize).min(n - 1);
        for (i, v) in x.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let u = (i as f64 - mid) / half;
            let w = 0.5 * (1.0 + (std::f64::consts::PI * u).cos());
            *v += amp * w * (2.0 * std::f64::consts::PI * freq * i as f64 / fs_f).sin();
        }
    }
    AudioTrack::new(x.into_iter().map(|v| v as f32).collect(), fs).unwrap()
}

fn criterion_4() -> Outcome {
    let frame_ms = 1000.0 / 30.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut tracks = 0;
    for &(freq, fs) in &[(2900.0, 16_000u32), (2500.0, 16_000), (2900.0, 44_100), (1000.0, 8_000)] {
        for snr in [20.0, 30.0] {
            for _ in 0..3 {
                let bursts = rng.gen_range(5..=12);
                let mut t = 300.0;
                let mut centers = Vec::with_capacity(bursts);
                for _ in 0..bursts {
                    t += rng.gen_range(250.0..700.0);
                    centers.push(t);
                }
                let track = burst_track(freq, fs, &centers, snr, t + 500.0, rng.gen());
                let det = detect_keypress_times(&track, &DetectionConfig::for_frequency(freq))
                    .map_err(|e| format!("{freq} Hz @ {fs}, {snr} dB: {e}"))?;
                // Greedy one-to-one matching within one frame.
                let mut used = vec![false; det.len()];
                let mut matched = 0;
                for &c in &centers {
                    let best = det
                        .iter()
                        .enumerate()
                        .filter(|(i, d)| !used[*i] && (*d - c).abs() <= frame_ms)
                        .min_by(|a, b| (a.1 - c).abs().partial_cmp(&(b.1 - c).abs()).unwrap());
                    if let Some((i, d)) = best {
                        used[i] = true;
                        matched += 1;
                        worst = worst.max((d - c).abs());
                    }
                }
                let precision = matched as f64 / det.len() as f64;
                let recall = matched as f64 / centers.len() as f64;
                ensure!(
                    precision == 1.0 && recall == 1.0,
                    "{freq} Hz @ {fs}, {snr} dB: precision {precision:.3}, recall {recall:.3}"
                );
                tracks += 1;
            }
        }
    }
    let silence = AudioTrack::new(vec![0.0; 16_000], 16_000).unwrap();
    match detect_keypress_times(&silence, &DetectionConfig::for_frequency(2900.0)) {
        Err(AudioError::NoPeaksFound) => {}
        other => return Err(format!("silence gave {other:?}")),
    }
    Ok(format!("{tracks} tracks, P = R = 1, worst error {worst:.2} ms; silence -> NoPeaksFound"))
}

/// Frame `f` of a fake video: a constant image encoding its index.
fn frame_image(f: usize) -> Image {
    Image::from_data(2, 2, vec![(f + 1) as f32; 4])
}

/// Independent statement of the segmentation rule for one keypress.
fn expected_slots(frame_count: usize, tk: usize, prev: Option<usize>, next: Option<usize>) -> [Slot; SEQUENCE_LEN] {
    let mut s = [Slot::Black; SEQUENCE_LEN];
    for (i, slot) in s.iter_mut().enumerate() {
        let f = tk as isize + i as isize - TARGET_INDEX as isize;
        let before_ok = i >= TARGET_INDEX || prev.is_some_and(|p| f > p as isize);
        let after_ok = i <= TARGET_INDEX || next.is_some_and(|n| f < n as isize);
        if f >= 0 && (f as usize) < frame_count && before_ok && after_ok {
            *slot = Slot::Frame(f as usize);
        }
    }
    s
}

fn check_sample(frame_count: usize, tk: usize, prev: Option<usize>, next: Option<usize>) -> Result<(), String> {
    let slots = segment_keypress(frame_count, tk, prev, next).map_err(|e| e.to_string())?;
    let want = expected_slots(frame_count, tk, prev, next);
    ensure!(slots == want, "tk {tk} prev {prev:?} next {next:?}: {slots:?}, want {want:?}");
    let sample = KeypressSample::from_slots(&slots, 2, frame_image);
    ensure!(sample.frames.len() == SEQUENCE_LEN && sample.padding.len() == SEQUENCE_LEN, "sample length");
    ensure!(!sample.padding[TARGET_INDEX], "target padded");
    ensure!(sample.frames[TARGET_INDEX] == frame_image(tk) && sample.tk_frame == tk, "target not centered");
    for (i, (img, &pad)) in sample.frames.iter().zip(&sample.padding).enumerate() {
        match want[i] {
            Slot::Black => ensure!(pad && img.is_black(), "slot {i} should be black"),
            Slot::Frame(f) => ensure!(!pad && *img == frame_image(f), "slot {i} should show frame {f}"),
        }
    }
    Ok(())
}

fn criterion_5() -> Outcome {
    // Named cases: first key, last key, short neighborhood on one side,
    // both sides padded by close neighbors, and a single-key entry.
    type Case = (&'static str, usize, usize, Option<usize>, Option<usize>, [bool; SEQUENCE_LEN]);
    let named: [Case; 6] = [
        ("first", 100, 20, None, Some(40), pad_mask(0, 5)),
        ("last", 100, 20, Some(5), None, pad_mask(5, 0)),
        ("short before", 100, 20, Some(17), Some(40), pad_mask(2, 5)),
        ("both sides short", 100, 20, Some(18), Some(22), pad_mask(1, 1)),
        ("single key", 100, 20, None, None, pad_mask(0, 0)),
        ("video end", 23, 20, Some(10), None, pad_mask(5, 0)),
    ];
    for (name, fc, tk, prev, next, real) in named {
        check_sample(fc, tk, prev, next).map_err(|e| format!("{name}: {e}"))?;
        let slots = segment_keypress(fc, tk, prev, next).unwrap();
        let got: Vec<bool> = slots.iter().map(|s| matches!(s, Slot::Frame(_))).collect();
        ensure!(got == real, "{name}: real-frame mask {got:?}, want {real:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut samples = 0;
    for _ in 0..2000 {
        let keys = rng.gen_range(1..=8);
        let mut tks = Vec::with_capacity(keys);
        let mut t = rng.gen_range(0..12);
        for _ in 0..keys {
            tks.push(t);
            t += rng.gen_range(1..=14);
        }
        let frame_count = tks[keys - 1] + rng.gen_range(1..=12);
        for i in 0..keys {
            let prev = i.checked_sub(1).map(|j| tks[j]);
            let next = tks.get(i + 1).copied();
            check_sample(frame_count, tks[i], prev, next)?;
            samples += 1;
        }
    }
    Ok(format!("6 named cases, {samples} randomized samples"))
}

/// Real-frame mask for `before` real frames ahead of the target and `after`
/// behind it.
fn pad_mask(before: usize, after: usize) -> [bool; SEQUENCE_LEN] {
    let mut m = [false; SEQUENCE_LEN];
    for (i, v) in m.iter_mut().enumerate() {
        *v = i == TARGET_INDEX
            || (i < TARGET_INDEX && TARGET_INDEX - i <= before.min(CONTEXT))
            || (i > TARGET_INDEX && i - TARGET_INDEX <= after.min(CONTEXT));
    }
    m
}

fn participant(id: &str, keypad: KeypadModel, blacklisted: bool) -> Recording {
    let rid = format!("{id}_r000");
    Recording {
        id: rid.clone(),
        participant_id: id.into(),
        feedback_freq_hz: keypad.default_feedback_hz().unwrap(),
        keypad_model: keypad,
        camera_position: CameraPosition::Center,
        covering_strategy: CoveringStrategy::Unknown,
        blacklisted,
        fps: 30.0,
        video_path: PathBuf::from(format!("{rid}.video")),
        audio_path: PathBuf::from(format!("{rid}.wav")),
        keylog_path: PathBuf::from(format!("{rid}.keylog.csv")),
        media_offset_ms: 0,
        crop_rect: None,
        key_rows: None,
    }
}

fn criterion_6() -> Outcome {
    // First collection: 40 participants on one keypad. Second: 18 on the
    // other, two of them blacklisted.
    let mut m = DatasetManifest::default();
    for i in 0..40 {
        m.records.push(participant(&format!("a{i:02}"), KeypadModel::D8201F, false));
    }
    for i in 0..18 {
        m.records.push(participant(&format!("b{i:02}"), KeypadModel::D8203B, i < 2));
    }
    let opts = SplitOptions::default();
    let count = |s: Scenario| -> Result<(usize, usize, usize), String> {
        let split = make_split(&m, s, &opts).map_err(|e| format!("{s}: {e}"))?;
        Ok((split.train.len(), split.val.len(), split.test.len()))
    };
    let single = count(Scenario::Single)?;
    let independent = count(Scenario::Independent)?;
    let mixed = count(Scenario::Mixed)?;
    ensure!(single.0 == 32, "single train {}", single.0);
    ensure!(independent == (35, 5, 16), "independent {independent:?}");
    ensure!(mixed.0 == 46, "mixed train {}", mixed.0);
    Ok(format!("single {single:?}, independent {independent:?}, mixed {mixed:?}"))
}

const E2E_PARTICIPANTS: usize = 6;
const E2E_PINS: usize = 20;
const E2E_EPOCHS: usize = 10;
const E2E_SIZE: usize = 64;

fn corpus(signal_strength: f64) -> Vec<PreparedRecording> {
    let cfg = SynthConfig {
        n_participants: E2E_PARTICIPANTS,
        pins_per_participant: E2E_PINS,
        signal_strength,
        ..SynthConfig::default()
    };
    let pipeline = PipelineConfig::default();
    generate_corpus_in_memory(&cfg)
        .unwrap()
        .into_iter()
        .map(|r| prepare_recording(r, &pipeline).unwrap())
        .collect()
}

fn e2e_config(knobs: Vec<Knobs>) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::small(),
        train: TrainConfig {
            epochs: E2E_EPOCHS,
            ..TrainConfig::small(0)
        },
        out_size: E2E_SIZE,
        strategy: Strategy::Product,
        knobs,
        camera: None,
        covering: None,
        seed: 0,
    }
}

fn e2e_split(recs: &[PreparedRecording]) -> pinsight::eval::ScenarioSplit {
    let m = DatasetManifest {
        records: recs.iter().map(|r| r.meta.clone()).collect(),
        ..DatasetManifest::default()
    };
    let opts = SplitOptions {
        ratios: (4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0),
        ..SplitOptions::default()
    };
    make_split(&m, Scenario::Single, &opts).unwrap()
}

/// Trained model and data shared by criteria 7 and 8.
struct Trained {
    model: Lrcn,
    recordings: Vec<PreparedRecording>,
    split: pinsight::eval::ScenarioSplit,
}

fn criterion_7(shared: &mut Option<Trained>, reports: &mut Vec<EvalReport>) -> Outcome {
    let recordings = corpus(1.0);
    let split = e2e_split(&recordings);
    ensure!(
        split.train.is_disjoint(&split.test) && split.val.is_disjoint(&split.test),
        "split is not user-independent"
    );
    let out = run_experiment(&split, &recordings, &e2e_config(vec![Knobs::NONE]), None).map_err(|e| e.to_string())?;
    let (_, trained) = out.trained.into_iter().next().ok_or("no model trained")?;
    let report = out.reports[0].1.clone();
    let (key, pin) = (report.key_top1(), report.pin_top3());
    reports.push(report);
    *shared = Some(Trained {
        model: trained.best,
        recordings,
        split,
    });

    let control = corpus(0.0);
    let csplit = e2e_split(&control);
    let cout = run_experiment(&csplit, &control, &e2e_config(vec![Knobs::NONE]), None).map_err(|e| e.to_string())?;
    let chance = cout.reports[0].1.key_top1();
    reports.push(cout.reports[0].1.clone());

    let detail = format!("key top-1 {key:.3}, PIN top-3 {pin:.3}, chance control key top-1 {chance:.3}");
    ensure!(key >= 0.90 && pin >= 0.60 && (0.05..=0.15).contains(&chance), "{detail}");
    Ok(detail)
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn criterion_8(shared: &Option<Trained>, reports: &mut Vec<EvalReport>) -> Outcome {
    let t = shared.as_ref().ok_or("no trained model from the end-to-end run")?;
    let shield: Vec<Knobs> = [0, 25, 50, 75, 100]
        .iter()
        .map(|&s| Knobs { shield: s, ..Knobs::NONE })
        .collect();
    let frame: Vec<Knobs> = [0, 3, 5, 10, 15, 20]
        .iter()
        .map(|&k| Knobs { frame_error_k: k, ..Knobs::NONE })
        .collect();
    let run = |knobs: Vec<Knobs>| {
        run_experiment(&t.split, &t.recordings, &e2e_config(knobs), Some(&t.model)).map_err(|e| e.to_string())
    };
    let s = run(shield)?;
    let f = run(frame)?;
    let shield_key: Vec<f64> = s.reports.iter().map(|(_, r)| r.key_top1()).collect();
    let frame_key: Vec<f64> = f.reports.iter().map(|(_, r)| r.key_top1()).collect();
    let full_shield_pin = s.reports.last().unwrap().1.pin_top3();
    reports.extend(s.reports.into_iter().chain(f.reports).map(|(_, r)| r));

    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" ");
    let detail = format!(
        "shield 0..100 key [{}], 100% PIN top-3 {full_shield_pin:.3}; frame error 0..20 key [{}]",
        fmt(&shield_key),
        fmt(&frame_key)
    );
    // Sweeps start at the first non-zero level.
    ensure!(non_increasing(&shield_key[1..]), "shield sweep rises: {detail}");
    ensure!(non_increasing(&frame_key[1..]), "frame-error sweep rises: {detail}");
    ensure!(full_shield_pin <= 0.10, "{detail}");
    Ok(detail)
}

fn random_sample(side: usize, rng: &mut ChaCha8Rng) -> KeypressSample {
    let frames = (0..SEQUENCE_LEN)
        .map(|_| Image::from_data(side, side, (0..side * side).map(|_| rng.gen::<f32>()).collect()))
        .collect();
    KeypressSample::new_labeled(frames, rng.gen_range(0..10))
}

fn criterion_9(reports: &[EvalReport]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let logits: Vec<f32> = (0..10 * 200).map(|i| rng.gen_range(-30.0..30.0) * if i % 7 == 0 { 3.0 } else { 1.0 }).collect();
    let worst = softmax_rows(&logits, 10)
        .chunks(10)
        .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= 1e-5, "softmax row sum off by {worst:e}");

    let cfg = ModelConfig::small().with_input_size(32);
    let model = Lrcn::new(cfg.clone(), 1).map_err(|e| e.to_string())?;
    let samples: Vec<KeypressSample> = (0..6).map(|_| random_sample(32, &mut rng)).collect();
    let refs: Vec<&KeypressSample> = samples.iter().collect();
    let a = model.predict_batch(&refs).map_err(|e| e.to_string())?;
    let b = model.predict_batch(&refs).map_err(|e| e.to_string())?;
    ensure!(a == b, "eval-mode inference is not deterministic");
    for d in &a {
        ensure!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-5, "prediction does not sum to 1");
    }
    let rebuilt = Lrcn::new(cfg.clone(), 1).map_err(|e| e.to_string())?;
    ensure!(rebuilt.predict_batch(&refs).unwrap() == a, "same seed gives a different model");

    let t1 = model.predict_train_mode(&refs, 7).unwrap();
    let t2 = model.predict_train_mode(&refs, 7).unwrap();
    let t3 = model.predict_train_mode(&refs, 8).unwrap();
    ensure!(t1 == t2, "train mode is not reproducible for a fixed seed");
    ensure!(t1 != a && t1 != t3, "dropout has no effect in train mode");
    let mut no_drop = cfg;
    no_drop.dropout = 0.0;
    let nd = Lrcn::new(no_drop, 1).unwrap();
    let (e, t) = (nd.predict_batch(&refs).unwrap(), nd.predict_train_mode(&refs, 7).unwrap());
    for (x, y) in e.iter().zip(&t) {
        for (p, q) in x.probs().iter().zip(y.probs()) {
            ensure!((p - q).abs() < 1e-6, "zero dropout changes train-mode output");
        }
    }

    // Layer-by-layer count for the full configuration at 250×250:
    // conv k×k×cin×cout + cout: 3·3·1·32+32, 9·9·32·64+64, 3·3·64·128+128,
    // 3·3·128·256+256; four 2×2 pools leave 15×15×256 = 57600 features;
    // LSTM 4·128·(57600+128+1); dense 128→64, three 64→64, 64→10.
    let conv = 320 + 165_952 + 73_856 + 295_168;
    let lstm = 29_557_248;
    let dense = 8_256 + 3 * 4_160 + 650;
    const FULL_PARAMS: usize = 30_113_930;
    ensure!(conv + lstm + dense == FULL_PARAMS, "hand count does not add up");
    let full = Lrcn::new(ModelConfig::full(), 0).map_err(|e| e.to_string())?;
    ensure!(full.param_count() == FULL_PARAMS, "full model has {} parameters", full.param_count());

    // Reports from random predictions under both strategies, plus every
    // report produced by the end-to-end criteria.
    let mut checked = 0;
    for strategy in [Strategy::Product, Strategy::Swap] {
        for _ in 0..50 {
            let n_pins = rng.gen_range(1..15);
            let per_pin: Vec<Vec<DigitDistribution>> =
                (0..n_pins).map(|_| (0..5).map(|_| random_dist(&mut rng)).collect()).collect();
            let truth: Vec<Vec<u8>> = (0..n_pins).map(|_| (0..5).map(|_| rng.gen_range(0..10)).collect()).collect();
            let meta = ExperimentMeta {
                scenario: None,
                strategy,
                shield: 0,
                resolution: 64,
                frame_error_k: 0,
                camera: None,
                covering: None,
                seed: 0,
            };
            let r = EvalReport::from_predictions(&per_pin, &truth, meta).map_err(|e| e.to_string())?;
            ensure!(r.is_consistent(), "random report not monotone in n");
            checked += 1;
        }
    }
    for r in reports {
        ensure!(r.is_consistent(), "experiment report not monotone in n: {:?}", r.key_top_n);
        checked += 1;
    }
    Ok(format!("param count {FULL_PARAMS}, {checked} reports monotone in n"))
}

fn run<F: FnOnce() -> Outcome>(id: usize, limit: Duration, f: F) -> (usize, bool, String) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let took = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; took {took:.1?}, limit {limit:?}")),
        Err(e) => (false, e),
    };
    let line = format!(
        "[criterion {id}] {} ({:.2}s) {detail}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    // Written to the stdout handle directly so the line shows even when the
    // harness captures output.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    (id, ok, line)
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut results = vec![
        run(1, secs(1), criterion_1),
        run(2, secs(30), criterion_2),
        run(3, secs(1), criterion_3),
        run(4, secs(10), criterion_4),
        run(5, secs(10), criterion_5),
        run(6, secs(1), criterion_6),
    ];

    let mut shared = None;
    let mut reports = Vec::new();
    results.push(run(7, secs(15 * 60), || criterion_7(&mut shared, &mut reports)));
    results.push(run(8, secs(30 * 60), || criterion_8(&shared, &mut reports)));
    results.push(run(9, secs(120), || criterion_9(&reports)));

    let failed: BTreeMap<usize, String> = results.into_iter().filter(|r| !r.1).map(|r| (r.0, r.2)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.into_values().collect::<Vec<_>>().join("\n"));
}
