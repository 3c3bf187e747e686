//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, bail, Context};
use pinsight::audio::{detect_keypress_times, estimate_media_offset, times_to_csv, AudioTrack, DetectionConfig};
use pinsight::eval::{
    make_split, run_experiment, train_on_split, EvalReport, ExperimentConfig, Knobs, ScenarioSplit, SplitOptions,
};
use pinsight::ingest::{
    build_manifest, load_recording, parse_keylog, DatasetManifest, KeyKind, KeypadModel, Recording,
};
use pinsight::model::{DigitDistribution, Lrcn, ModelConfig, TrainConfig, NUM_CLASSES};
use pinsight::pipeline::{flatten, prepare_recording, PipelineConfig, PreparedRecording, SampleOptions};
use pinsight::rank::{pin_probability, pin_to_string, rank_pins, swap_heuristic_guesses, Strategy};
use pinsight::synth::{generate_corpus, SynthConfig};
use pinsight::video::{read_sample_archive, write_sample_archive, KeypressSample, FRAME_ERROR_LEVELS, SHIELD_LEVELS};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::settings::{usage, Layer, ModelKind, RESOLUTION_LEVELS};
use crate::{Cli, Command};

struct Ctx {
    layer: Layer,
    out: PathBuf,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    subcommand: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    seed: u64,
    config_file: Option<&'a Path>,
    settings: &'a Layer,
    effective: &'a Value,
    versions: BTreeMap<&'static str, &'static str>,
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let name = cli.command.name();
    let file = match &cli.global.config {
        Some(p) => Layer::load(p)?,
        None => Layer::default(),
    };
    let mut top = cli.command.layer();
    top.out = cli.global.out.clone();
    top.seed = cli.global.seed;
    top.jobs = cli.global.jobs;
    let layer = file.overlay(top);
    let out = layer.out.clone().unwrap_or_else(|| Path::new("pinsight-out").join(name));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx { layer, out };

    let result = match &cli.command {
        Command::SynthGen(a) => synth_gen(&ctx, a),
        Command::Ingest(_) => ingest(&ctx),
        Command::Detect(_) => detect(&ctx),
        Command::Segment(_) => segment(&ctx),
        Command::Train(_) => train_cmd(&ctx),
        Command::Predict(a) => predict(&ctx, a),
        Command::Rank(a) => rank(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    };

    let (status, error, effective) = match &result {
        Ok(v) => ("ok", None, v.clone()),
        Err(e) => ("error", Some(format!("{e:#}")), Value::Null),
    };
    let record = RunRecord {
        subcommand: name,
        status,
        error,
        seed: ctx.layer.seed(),
        config_file: cli.global.config.as_deref(),
        settings: &ctx.layer,
        effective: &effective,
        versions: BTreeMap::from([("pinsight", env!("CARGO_PKG_VERSION")), ("pinsight-core", pinsight::VERSION)]),
    };
    fs::write(ctx.out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    result.map(|_| ())
}

/// Order-preserving map over `items` with up to `jobs` scoped threads.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut indexed: Vec<(usize, R)> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..jobs)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break local;
                        }
                        local.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        workers.into_iter().flat_map(|w| w.join().expect("worker panicked")).collect()
    });
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, r)| r).collect()
}

fn load_manifest(layer: &Layer) -> anyhow::Result<DatasetManifest> {
    let root = layer.data()?;
    let manifest = build_manifest(root, layer.metadata.as_deref())
        .with_context(|| format!("building manifest for {}", root.display()))?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    Ok(manifest)
}

fn pipeline_config(layer: &Layer) -> anyhow::Result<PipelineConfig> {
    Ok(PipelineConfig {
        timing: layer.timing()?,
        detection: layer.feedback_freq.map(DetectionConfig::for_frequency),
        ..PipelineConfig::default()
    })
}

fn prepare_one(rec: &Recording, cfg: &PipelineConfig) -> anyhow::Result<PreparedRecording> {
    let loaded = load_recording(rec).with_context(|| format!("loading {}", rec.id))?;
    prepare_recording(loaded, cfg).with_context(|| format!("preparing {}", rec.id))
}

/// Loads and prepares the recordings of `participants` (all when `None`).
/// Recordings that fail are skipped with a warning and listed in the
/// returned ids.
fn prepare_all(
    manifest: &DatasetManifest,
    participants: Option<&BTreeSet<String>>,
    cfg: &PipelineConfig,
    jobs: usize,
) -> anyhow::Result<(Vec<PreparedRecording>, Vec<String>)> {
    let records: Vec<&Recording> = manifest
        .records
        .iter()
        .filter(|r| participants.is_none_or(|p| p.contains(&r.participant_id)))
        .collect();
    let results = par_map(&records, jobs, |r| prepare_one(r, cfg));
    let mut prepared = Vec::new();
    let mut skipped = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(p) => {
                for w in &p.warnings {
                    log::warn!("{}: {w}", r.id);
                }
                prepared.push(p);
            }
            Err(e) => {
                log::warn!("skipping {}: {e:#}", r.id);
                skipped.push(r.id.clone());
            }
        }
    }
    if prepared.is_empty() {
        bail!("no recording could be prepared ({} skipped)", skipped.len());
    }
    Ok((prepared, skipped))
}

fn synth_gen(ctx: &Ctx, a: &crate::SynthGenArgs) -> anyhow::Result<Value> {
    if a.container == "encoded" {
        return usage("encoded video output needs an external encoder, which this build does not include; use --container raw");
    }
    let keypad_models = a
        .keypads
        .iter()
        .map(|k| match k.as_str() {
            "d8203b" => KeypadModel::D8203B,
            _ => KeypadModel::D8201F,
        })
        .collect();
    let cfg = SynthConfig {
        n_participants: a.participants,
        pins_per_participant: a.pins,
        pin_len: a.pin_len,
        keypad_models,
        feedback_freq_hz: ctx.layer.feedback_freq,
        signal_strength: a.signal,
        blacklisted: a.blacklist.clone(),
        seed: ctx.layer.seed(),
        ..SynthConfig::default()
    };
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let manifest = generate_corpus(&cfg, &ctx.out)?;
    manifest.save(&ctx.out.join("manifest.json"))?;
    println!(
        "wrote {} recordings ({} participants) to {}",
        manifest.records.len(),
        manifest.summary.participants,
        ctx.out.display()
    );
    Ok(json!({ "synth": cfg, "container": a.container }))
}

fn ingest(ctx: &Ctx) -> anyhow::Result<Value> {
    let manifest = load_manifest(&ctx.layer)?;
    manifest.save(&ctx.out.join("manifest.json"))?;
    let s = &manifest.summary;
    println!(
        "{} recordings, {} participants, {} PIN entries, {} discarded",
        manifest.records.len(),
        s.participants,
        s.entries,
        s.discarded
    );
    Ok(json!({ "summary": s, "warnings": manifest.warnings }))
}

#[derive(Serialize)]
struct DetectEntry {
    id: String,
    detected: usize,
    keylog_downs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    offset_ms: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matched: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn detect_one(rec: &Recording, freq_override: Option<f64>, out: &Path) -> DetectEntry {
    let mut entry = DetectEntry {
        id: rec.id.clone(),
        detected: 0,
        keylog_downs: 0,
        offset_ms: None,
        matched: None,
        error: None,
    };
    let run = |entry: &mut DetectEntry| -> anyhow::Result<()> {
        let audio = AudioTrack::read_wav(&rec.audio_path)?;
        let cfg = DetectionConfig::for_frequency(freq_override.unwrap_or(rec.feedback_freq_hz));
        let times = detect_keypress_times(&audio, &cfg)?;
        entry.detected = times.len();
        fs::write(out.join(format!("{}.times.csv", rec.id)), times_to_csv(&times))?;
        let downs: Vec<i64> = parse_keylog(&rec.keylog_path)?
            .iter()
            .filter(|e| e.kind == KeyKind::Down)
            .map(|e| e.t_ms)
            .collect();
        entry.keylog_downs = downs.len();
        if !downs.is_empty() {
            let a = estimate_media_offset(&times, &downs)?;
            entry.offset_ms = Some(a.offset_ms);
            entry.matched = Some(a.matched);
        }
        Ok(())
    };
    if let Err(e) = run(&mut entry) {
        entry.error = Some(format!("{e:#}"));
    }
    entry
}

fn detect(ctx: &Ctx) -> anyhow::Result<Value> {
    let manifest = load_manifest(&ctx.layer)?;
    let freq = ctx.layer.feedback_freq;
    let entries = par_map(&manifest.records, ctx.layer.jobs()?, |r| detect_one(r, freq, &ctx.out));
    fs::write(ctx.out.join("detect.json"), serde_json::to_string_pretty(&entries)?)?;
    let failed: Vec<&DetectEntry> = entries.iter().filter(|e| e.error.is_some()).collect();
    for e in &entries {
        match (&e.error, e.offset_ms) {
            (Some(err), _) => println!("{}\tfailed: {err}", e.id),
            (None, Some(off)) => println!("{}\t{} keypresses\toffset {off} ms", e.id, e.detected),
            (None, None) => println!("{}\t{} keypresses", e.id, e.detected),
        }
    }
    if !failed.is_empty() {
        bail!("detection failed for {} of {} recordings", failed.len(), entries.len());
    }
    Ok(json!({ "recordings": entries.len(), "feedback_freq_override": freq }))
}

fn sample_options(layer: &Layer, size: usize) -> anyhow::Result<SampleOptions> {
    Ok(SampleOptions {
        shield: layer.shield()?,
        frame_error_k: layer.frame_error_k()?,
        resolution: layer.resolution(size)?,
        seed: layer.seed(),
        ..SampleOptions::new(size)
    })
}

#[derive(Serialize)]
struct SegmentEntry {
    id: String,
    pins: usize,
    samples: usize,
    offset_ms: i64,
    discarded: usize,
    warnings: Vec<String>,
}

fn segment(ctx: &Ctx) -> anyhow::Result<Value> {
    let size = ctx.layer.size(ModelKind::Small)?;
    let opts = sample_options(&ctx.layer, size)?;
    let pcfg = pipeline_config(&ctx.layer)?;
    let manifest = load_manifest(&ctx.layer)?;
    let results = par_map(&manifest.records, ctx.layer.jobs()?, |r| -> anyhow::Result<SegmentEntry> {
        let p = prepare_one(r, &pcfg)?;
        let pins = p.samples(&opts)?;
        let samples = flatten(&pins);
        write_sample_archive(&ctx.out, &r.id, &samples)?;
        Ok(SegmentEntry {
            id: r.id.clone(),
            pins: pins.len(),
            samples: samples.len(),
            offset_ms: p.offset_ms,
            discarded: p.discarded,
            warnings: p.warnings,
        })
    });
    let mut entries = Vec::new();
    for res in results {
        entries.push(res?);
    }
    fs::write(ctx.out.join("segment.json"), serde_json::to_string_pretty(&entries)?)?;
    let total: usize = entries.iter().map(|e| e.samples).sum();
    println!("{total} samples from {} recordings", entries.len());
    Ok(json!({ "sample_options": opts, "pipeline": pcfg }))
}

/// Model, schedule and preprocessing size for the chosen network.
fn model_setup(layer: &Layer) -> anyhow::Result<(ModelConfig, TrainConfig, usize)> {
    let kind = layer.model_kind()?;
    let seed = layer.seed();
    let (model, mut train) = match kind {
        ModelKind::Small => (ModelConfig::small(), TrainConfig::small(seed)),
        ModelKind::Full => (ModelConfig::full(), TrainConfig { seed, ..TrainConfig::default() }),
    };
    match layer.epochs {
        Some(0) => return usage("--epochs must be at least 1"),
        Some(e) => train.epochs = e,
        None => {}
    }
    let size = layer.size(kind)?;
    Ok((model.with_input_size(size), train, size))
}

fn split_for(layer: &Layer, manifest: &DatasetManifest) -> anyhow::Result<ScenarioSplit> {
    let opts = SplitOptions {
        ratios: layer.ratios()?,
        blacklist_in_train: layer.blacklist_in_train(),
        seed: layer.seed(),
        ..SplitOptions::default()
    };
    Ok(make_split(manifest, layer.scenario()?, &opts)?)
}

fn experiment_config(layer: &Layer, knobs: Vec<Knobs>) -> anyhow::Result<ExperimentConfig> {
    let (model, train, size) = model_setup(layer)?;
    Ok(ExperimentConfig {
        model,
        train,
        out_size: size,
        strategy: layer.strategy()?,
        knobs,
        camera: layer.camera()?,
        covering: layer.covering()?,
        seed: layer.seed(),
    })
}

fn train_cmd(ctx: &Ctx) -> anyhow::Result<Value> {
    let exp = experiment_config(&ctx.layer, Vec::new())?;
    let resolution = ctx.layer.resolution(exp.out_size)?;
    let pcfg = pipeline_config(&ctx.layer)?;
    let jobs = ctx.layer.jobs()?;
    let manifest = load_manifest(&ctx.layer)?;
    let split = split_for(&ctx.layer, &manifest)?;
    let pool: BTreeSet<String> = split.train.union(&split.val).cloned().collect();
    let (prepared, skipped) = prepare_all(&manifest, Some(&pool), &pcfg, jobs)?;
    let outcome = train_on_split(&split, &prepared, &exp, resolution)?;
    let best_val = outcome.history[outcome.best_epoch - 1].val_acc;
    outcome.best.save(
        &ctx.out.join("model.lrcn"),
        &json!({ "split": split, "best_epoch": outcome.best_epoch, "seed": exp.seed }),
    )?;
    fs::write(ctx.out.join("history.csv"), outcome.history_csv())?;
    fs::write(ctx.out.join("split.json"), serde_json::to_string_pretty(&split)?)?;
    println!(
        "best epoch {} of {} (val key accuracy {best_val:.3}); model written to {}",
        outcome.best_epoch,
        outcome.history.len(),
        ctx.out.join("model.lrcn").display()
    );
    Ok(json!({ "experiment": exp, "resolution": resolution, "split": split, "skipped": skipped }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PinPrediction {
    recording_id: String,
    pin_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<String>,
    dists: Vec<DigitDistribution>,
    top3: Vec<String>,
}

fn predict_group(model: &Lrcn, recording_id: &str, pin_index: usize, samples: &[KeypressSample]) -> anyhow::Result<PinPrediction> {
    let refs: Vec<&KeypressSample> = samples.iter().collect();
    let dists = model.predict_batch(&refs)?;
    let truth: Option<Vec<u8>> = samples.iter().map(|s| s.label).collect();
    Ok(PinPrediction {
        recording_id: recording_id.to_string(),
        pin_index,
        truth: truth.map(|t| pin_to_string(&t)),
        top3: rank_pins(&dists, 3).iter().map(|c| c.pin_string()).collect(),
        dists,
    })
}

/// Splits one recording's samples into PIN entries wherever the position
/// in the PIN stops increasing.
fn group_by_pin(samples: Vec<KeypressSample>) -> Vec<Vec<KeypressSample>> {
    let mut groups: Vec<Vec<KeypressSample>> = Vec::new();
    for s in samples {
        let continues = groups
            .last()
            .and_then(|g| g.last())
            .is_some_and(|prev| s.position_in_pin > prev.position_in_pin);
        if !continues {
            groups.push(Vec::new());
        }
        groups.last_mut().expect("pushed").push(s);
    }
    groups
}

fn predict(ctx: &Ctx, a: &crate::PredictArgs) -> anyhow::Result<Value> {
    let (model, _) = Lrcn::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let input = model.config().input_size;
    let mut preds = Vec::new();
    let source;
    if let Some(dir) = &a.samples {
        source = json!({ "samples": dir });
        let mut ids: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".samples.json")).map(String::from))
            .collect();
        ids.sort();
        if ids.is_empty() {
            bail!("no sample archives in {}", dir.display());
        }
        for id in ids {
            let samples = read_sample_archive(dir, &id)?;
            for (i, g) in group_by_pin(samples).into_iter().enumerate() {
                preds.push(predict_group(&model, &id, i, &g)?);
            }
        }
    } else {
        let size = ctx.layer.size.unwrap_or(input);
        let opts = sample_options(&ctx.layer, size)?;
        if opts.model_input_size() != input {
            return usage(format!(
                "model expects {input}×{input} input but --size/--resolution give {}",
                opts.model_input_size()
            ));
        }
        let pcfg = pipeline_config(&ctx.layer)?;
        let manifest = load_manifest(&ctx.layer)?;
        source = json!({ "data": ctx.layer.data()?, "sample_options": opts });
        let (prepared, _) = prepare_all(&manifest, None, &pcfg, ctx.layer.jobs()?)?;
        for p in &prepared {
            for (i, pin) in p.samples(&opts)?.iter().enumerate() {
                preds.push(predict_group(&model, &pin.recording_id, i, &pin.samples)?);
            }
        }
    }
    fs::write(ctx.out.join("predictions.json"), serde_json::to_string_pretty(&preds)?)?;
    for p in &preds {
        println!(
            "{}#{}\t{}\t{}",
            p.recording_id,
            p.pin_index,
            p.top3.join(","),
            p.truth.as_deref().unwrap_or("-")
        );
    }
    Ok(json!({ "model": a.model, "source": source, "pins": preds.len() }))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PositionSpec {
    Full(Vec<f64>),
    Sparse(BTreeMap<String, f64>),
}

fn position_dist(spec: PositionSpec) -> anyhow::Result<DigitDistribution> {
    match spec {
        PositionSpec::Full(p) => {
            let arr: [f64; NUM_CLASSES] = p
                .try_into()
                .map_err(|v: Vec<f64>| anyhow!("expected {NUM_CLASSES} probabilities, got {}", v.len()))?;
            Ok(DigitDistribution::new(arr)?)
        }
        PositionSpec::Sparse(m) => {
            let mut p = [f64::NAN; NUM_CLASSES];
            for (k, v) in m {
                let d: usize = k.parse().ok().filter(|d| *d < NUM_CLASSES).ok_or_else(|| anyhow!("bad digit key '{k}'"))?;
                p[d] = v;
            }
            let listed: f64 = p.iter().filter(|v| !v.is_nan()).sum();
            let missing = p.iter().filter(|v| v.is_nan()).count();
            let rest = 1.0 - listed;
            if rest < -DigitDistribution::SUM_TOLERANCE {
                bail!("listed probabilities sum to {listed}");
            }
            for v in p.iter_mut().filter(|v| v.is_nan()) {
                *v = rest.max(0.0) / missing as f64;
            }
            Ok(DigitDistribution::new(p)?)
        }
    }
}

pub fn read_dists(path: &Path) -> anyhow::Result<Vec<DigitDistribution>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let specs: Vec<PositionSpec> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if specs.is_empty() {
        bail!("{} lists no positions", path.display());
    }
    specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| position_dist(s).with_context(|| format!("position {}", i + 1)))
        .collect()
}

fn rank(ctx: &Ctx, a: &crate::RankArgs) -> anyhow::Result<Value> {
    if a.k == 0 {
        return usage("--k must be at least 1");
    }
    let strategy = ctx.layer.strategy()?;
    let dists = read_dists(&a.dists)?;
    let ranked: Vec<(String, f64)> = match strategy {
        Strategy::Product => rank_pins(&dists, a.k).iter().map(|c| (c.pin_string(), c.prob())).collect(),
        Strategy::Swap => swap_heuristic_guesses(&dists, a.k)
            .iter()
            .map(|g| Ok((pin_to_string(g), pin_probability(&dists, g)?)))
            .collect::<anyhow::Result<_>>()?,
    };
    for (pin, p) in &ranked {
        println!("{pin}\t{p:.4}");
    }
    let rows: Vec<Value> = ranked.iter().map(|(pin, p)| json!({ "pin": pin, "probability": p })).collect();
    fs::write(ctx.out.join("ranked.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(json!({ "dists": a.dists, "k": a.k, "strategy": strategy }))
}

fn knob_label(k: &Knobs, size: usize) -> String {
    format!("shield{}_fe{}_res{}", k.shield, k.frame_error_k, k.resolution.unwrap_or(size))
}

fn summary_row(label: &str, r: &EvalReport) -> String {
    let f = |m: &BTreeMap<usize, f64>| m.values().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/");
    format!(
        "{label:<28} key {}  pin5 {}  pin4 {}  (keys {}, pins {})",
        f(&r.key_top_n),
        f(&r.pin5_top_n),
        f(&r.pin4_top_n),
        r.n_keys,
        r.n_pins
    )
}

fn evaluate(ctx: &Ctx, a: &crate::EvaluateArgs) -> anyhow::Result<Value> {
    let mut exp = experiment_config(&ctx.layer, Vec::new())?;
    let model = match &a.model_file {
        Some(p) => {
            let (m, _) = Lrcn::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ctx.layer.size.is_none() {
                exp.out_size = m.config().input_size;
            }
            Some(m)
        }
        None => None,
    };
    let size = exp.out_size;
    let base = Knobs {
        shield: ctx.layer.shield()?,
        frame_error_k: ctx.layer.frame_error_k()?,
        resolution: ctx.layer.resolution(size)?,
    };
    exp.knobs = match a.sweep.as_str() {
        "shield" => std::iter::once(0)
            .chain(SHIELD_LEVELS)
            .map(|shield| Knobs { shield, ..base })
            .collect(),
        "frame-error" => std::iter::once(0)
            .chain(FRAME_ERROR_LEVELS)
            .map(|frame_error_k| Knobs { frame_error_k, ..base })
            .collect(),
        "resolution" => std::iter::once(None)
            .chain(RESOLUTION_LEVELS.iter().filter(|&&r| r < size).map(|&r| Some(r)))
            .map(|resolution| Knobs { resolution, ..base })
            .collect(),
        _ => vec![base],
    };

    let pcfg = pipeline_config(&ctx.layer)?;
    let jobs = ctx.layer.jobs()?;
    let manifest = load_manifest(&ctx.layer)?;
    let split = split_for(&ctx.layer, &manifest)?;
    let pool: BTreeSet<String> = if model.is_some() {
        split.test.clone()
    } else {
        split.train.iter().chain(&split.val).chain(&split.test).cloned().collect()
    };
    let (prepared, skipped) = prepare_all(&manifest, Some(&pool), &pcfg, jobs)?;
    let outcome = run_experiment(&split, &prepared, &exp, model.as_ref())?;

    let mut summary = Vec::new();
    for (knobs, report) in &outcome.reports {
        let label = knob_label(knobs, size);
        report.write(&ctx.out.join(&label))?;
        println!("{}", summary_row(&label, report));
        summary.push(json!({
            "label": label,
            "knobs": knobs,
            "key_top_n": report.key_top_n,
            "pin5_top_n": report.pin5_top_n,
            "pin4_top_n": report.pin4_top_n,
        }));
    }
    for (input, t) in &outcome.trained {
        t.best.save(
            &ctx.out.join(format!("model_{input}.lrcn")),
            &json!({ "split": split, "best_epoch": t.best_epoch, "seed": exp.seed }),
        )?;
        fs::write(ctx.out.join(format!("history_{input}.csv")), t.history_csv())?;
    }
    fs::write(ctx.out.join("split.json"), serde_json::to_string_pretty(&split)?)?;
    fs::write(ctx.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(json!({ "experiment": exp, "split": split, "model_file": a.model_file, "skipped": skipped }))
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn report(ctx: &Ctx, a: &crate::ReportArgs) -> anyhow::Result<Value> {
    let mut paths = Vec::new();
    if a.input.is_dir() {
        find_reports(&a.input, &mut paths)?;
    } else {
        paths.push(a.input.clone());
    }
    if paths.is_empty() {
        bail!("no report.json under {}", a.input.display());
    }
    let mut lines = Vec::new();
    for p in &paths {
        let r: EvalReport = serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?;
        let label = p
            .parent()
            .and_then(|d| d.file_name())
            .and_then(|n| n.to_str())
            .unwrap_or("report")
            .to_string();
        r.write(&ctx.out.join(&label))?;
        lines.push(summary_row(&label, &r));
    }
    for l in &lines {
        println!("{l}");
    }
    fs::write(ctx.out.join("summary.txt"), lines.join("\n") + "\n")?;
    Ok(json!({ "reports": paths }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_positions_spread_the_remainder() {
        let d = position_dist(PositionSpec::Sparse(BTreeMap::from([("7".into(), 0.91)]))).unwrap();
        assert!((d.p(7) - 0.91).abs() < 1e-12);
        assert!((d.p(0) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn overfull_sparse_position_is_rejected() {
        let m = BTreeMap::from([("1".into(), 0.7), ("2".into(), 0.6)]);
        assert!(position_dist(PositionSpec::Sparse(m)).is_err());
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<u32> = (0..50).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn groups_restart_when_position_drops() {
        let mk = |pos| KeypressSample {
            position_in_pin: pos,
            ..KeypressSample::new_labeled(vec![pinsight::video::Image::black(2, 2); 11], 1)
        };
        let g = group_by_pin(vec![mk(1), mk(2), mk(1), mk(2), mk(3)]);
        assert_eq!(g.iter().map(|g| g.len()).collect::<Vec<_>>(), vec![2, 3]);
    }
}
