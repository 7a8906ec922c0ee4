use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hazard_core::autoencoder::{self, AutoencoderModel};
use hazard_core::dataset::{self, DatasetManifest, ManifestEntry, Split};
use hazard_core::detector::{self, Aggregation, DetectorConfig, StreamConfig, DEFAULT_PATCH_COUNT};
use hazard_core::evaluation::{EvaluationReport, LabeledScore};
use hazard_core::par;
use hazard_core::preprocessing::{Frame, Label, Scale};
use hazard_core::training::{self, PreparedFrame};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Failure, Result};
use crate::{Command, DetectorFlags, EvalArgs, GenArgs, ScoreArgs, StreamArgs, SweepArgs, TrainArgs, TrainingFlags};

pub fn dispatch(command: Command, config: RunConfig) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a, config),
        Command::Train(a) => train(a, config),
        Command::Score(a) => score(a, config),
        Command::Eval(a) => eval(a, config),
        Command::Sweep(a) => sweep(a, config),
        Command::Stream(a) => stream(a, config),
    }
}

fn scale(s: u32) -> Result<Scale> {
    Scale::try_from(s).map_err(|e| Failure::Config(e.to_string()))
}

fn split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| Failure::Config(format!("unknown split {s:?} (train, val, test or qual)")))
}

fn apply_training(flags: &TrainingFlags, c: &mut RunConfig) {
    let t = &mut c.training;
    if let Some(v) = flags.budget {
        t.total_samples = v;
    }
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.samples_per_epoch {
        t.samples_per_epoch = v;
    }
    if let Some(v) = flags.lr {
        t.initial_lr = v;
    }
    if let Some(v) = flags.seed {
        t.seed = v;
        c.model.seed = v;
    }
}

/// Merge detector flags. A scale change without an explicit patch count
/// resets the count to the default for the new scale.
fn apply_detector(flags: &DetectorFlags, c: &mut RunConfig) -> Result<()> {
    let d = &mut c.detector;
    if let Some(s) = flags.scale {
        let s = scale(s)?;
        if s != d.scale && flags.patch_count.is_none() {
            d.patch_count = DetectorConfig::for_scale(s).patch_count;
        }
        d.scale = s;
    }
    if let Some(n) = flags.patch_count {
        d.patch_count = n;
    }
    if let Some(a) = &flags.aggregation {
        d.aggregation = a.parse::<Aggregation>().map_err(Failure::Config)?;
    }
    if let Some(s) = flags.detector_seed {
        d.rng_seed = s;
    }
    Ok(d.validate()?)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    dataset::load_manifest(path).map_err(|e| Failure::from(e).context(path.display()))
}

fn load_model(path: &Path) -> Result<AutoencoderModel> {
    autoencoder::load(path).map_err(|e| Failure::from(e).context(path.display()))
}

/// Decode and prepare the frames of a split one at a time, so only the
/// downsampled images stay in memory.
fn prepared_split(manifest: &DatasetManifest, split: Split, scale: Scale) -> Result<Vec<PreparedFrame>> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    par::map(&entries, |e| {
        dataset::load_frame(manifest, e).map(|f| PreparedFrame::new(&f, scale))
    })
    .into_iter()
    .map(|r| r.map_err(Failure::from))
    .collect()
}

fn load_entries(manifest: &DatasetManifest, entries: &[&ManifestEntry]) -> Result<Vec<Frame>> {
    Ok(dataset::load_frames(manifest, entries)?)
}

fn check_scale(model: &AutoencoderModel, detector: &DetectorConfig) {
    let trained = serde_json::from_str::<serde_json::Value>(&model.provenance)
        .ok()
        .and_then(|v| v["training"]["scale"].as_u64());
    if let Some(s) = trained {
        if s != u64::from(u32::from(detector.scale)) {
            eprintln!(
                "warning: model was trained at scale {s} but frames are scored at scale {}",
                detector.scale
            );
        }
    }
}

fn gen(a: GenArgs, mut c: RunConfig) -> Result<()> {
    let s = &mut c.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.train_frames {
        s.train_frames = v;
    }
    if let Some(v) = a.val_frames {
        s.validation_frames = v;
    }
    if let Some(v) = a.test_frames {
        s.test_frames = v;
    }
    if let Some(v) = a.sequences {
        s.qualitative_sequences = v;
    }
    if let Some(v) = a.sequence_length {
        s.sequence_length = v;
    }
    if let Some(v) = a.channels {
        s.channels = v;
    }
    s.validate().map_err(Failure::Config)?;
    c.write_resolved(&a.out)?;
    let m = dataset::generate_synthetic(&c.synth, &a.out)?;
    eprintln!("wrote {} frames to {}", m.entries.len(), a.out.display());
    Ok(())
}

/// Train one model on the prepared train split.
fn train_model(
    c: &RunConfig,
    train: &[PreparedFrame],
    val: &[PreparedFrame],
    label: &str,
) -> Result<(AutoencoderModel, training::TrainingHistory)> {
    c.training.validate()?;
    let model = AutoencoderModel::build(c.model).map_err(|e| Failure::Config(e.to_string()))?;
    let patches = training::validation_patches(val, c.training.validation_patches, c.training.seed);
    let (mut model, history) = training::train_prepared(&c.training, model, train, &patches, |r| {
        eprintln!(
            "{label} epoch {:>3}: train {:.5} val {:.5} lr {:.0e} ({:.1}s)",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
        )
    })?;
    model.provenance = serde_json::json!({
        "training": c.training,
        "model": c.model,
        "best_epoch": history.best_epoch,
    })
    .to_string();
    Ok((model, history))
}

fn train(a: TrainArgs, mut c: RunConfig) -> Result<()> {
    if let Some(s) = a.scale {
        c.training.scale = scale(s)?;
    }
    if let Some(f) = a.model.first_layer_size {
        c.model.first_layer_size = f;
    }
    if let Some(b) = a.model.bottleneck_size {
        c.model.bottleneck_size = b;
    }
    apply_training(&a.training, &mut c);
    if c.detector.scale != c.training.scale {
        c.detector = DetectorConfig {
            rng_seed: c.detector.rng_seed,
            aggregation: c.detector.aggregation,
            ..DetectorConfig::for_scale(c.training.scale)
        };
    }
    let manifest = load_manifest(&a.data)?;
    c.model.input_channels = manifest.channels;
    c.training.validate()?;
    c.model.validate().map_err(|e| Failure::Config(e.to_string()))?;
    c.write_resolved(&a.out)?;
    let s = c.training.scale;
    let train = prepared_split(&manifest, Split::Train, s)?;
    let val = prepared_split(&manifest, Split::Validation, s)?;
    let (model, history) = train_model(&c, &train, &val, &format!("{s}"))?;
    autoencoder::save(&model, a.out.join("model.ckpt"))?;
    history.save_csv(a.out.join("history.csv"))?;
    eprintln!(
        "best epoch {:?}, validation loss {:.6}",
        history.best_epoch, model.metadata.final_validation_loss
    );
    Ok(())
}

/// Score CSV: `path,label,score` and optionally `patch_scores` joined by `;`.
fn write_scores(path: &Path, rows: &[(String, Label, f64, Option<Vec<f64>>)], with_patches: bool) -> Result<()> {
    let mut out = String::from(if with_patches {
        "path,label,score,patch_scores\n"
    } else {
        "path,label,score\n"
    });
    for (p, label, score, patches) in rows {
        write!(out, "{p},{label},{score}").unwrap();
        if with_patches {
            let joined: Vec<String> = patches.iter().flatten().map(f64::to_string).collect();
            write!(out, ",{}", joined.join(";")).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<LabeledScore>> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("path,label,score") {
        return Err(Failure::Data(format!("{}: not a score file", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let mut f = line.split(',');
            let (Some(p), Some(label), Some(score)) = (f.next(), f.next(), f.next()) else {
                return Err(Failure::Data(format!("{}:{}: expected path,label,score", path.display(), i + 2)));
            };
            let score: f64 = score
                .parse()
                .map_err(|_| Failure::Data(format!("{}:{}: bad score {score:?}", path.display(), i + 2)))?;
            Ok(LabeledScore {
                frame_id: p.to_string(),
                score,
                label: Label::from(label),
            })
        })
        .collect()
}

fn score(a: ScoreArgs, mut c: RunConfig) -> Result<()> {
    apply_detector(&a.detector, &mut c)?;
    let split = split(&a.split)?;
    let manifest = load_manifest(&a.data)?;
    let model = load_model(&a.model)?;
    check_scale(&model, &c.detector);
    c.write_resolved(&a.out)?;
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    let d = c.detector;
    let rows = par::map(&entries, |e| -> Result<_> {
        let frame = dataset::load_frame(&manifest, e)?;
        let patches = detector::frame_patch_scores(&model, &frame, &d)?;
        let score = detector::aggregate(&patches, d.aggregation)?;
        Ok((e.path.clone(), e.label.clone(), score, Some(patches)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_scores(&a.out.join("scores.csv"), &rows, a.patch_scores)?;
    eprintln!("scored {} frames", rows.len());
    Ok(())
}

fn report_config(c: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({ "detector": c.detector, "source": extra })
}

fn score_entries(
    model: &AutoencoderModel,
    manifest: &DatasetManifest,
    entries: &[&ManifestEntry],
    d: &DetectorConfig,
) -> Result<Vec<LabeledScore>> {
    par::map(entries, |e| -> Result<_> {
        let frame = dataset::load_frame(manifest, e)?;
        Ok(LabeledScore {
            frame_id: e.path.clone(),
            score: detector::frame_score(model, &frame, d)?,
            label: e.label.clone(),
        })
    })
    .into_iter()
    .collect()
}

fn eval(a: EvalArgs, mut c: RunConfig) -> Result<()> {
    apply_detector(&a.detector, &mut c)?;
    let (scores, source) = match (&a.scores, &a.data, &a.model) {
        (Some(path), _, _) => (read_scores(path)?, serde_json::json!({ "scores": path })),
        (None, Some(data), Some(model_path)) => {
            let manifest = load_manifest(data)?;
            let model = load_model(model_path)?;
            check_scale(&model, &c.detector);
            let entries: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
            let scores = score_entries(&model, &manifest, &entries, &c.detector)?;
            (scores, serde_json::json!({ "data": data, "model": model_path }))
        }
        _ => return Err(Failure::Config("eval needs --scores or both --data and --model".into())),
    };
    c.write_resolved(&a.out)?;
    let mut report = EvaluationReport::from_scores(&scores, report_config(&c, source))?;
    report.write(a.out.join("report.json"))?;
    println!("overall AUC {:.4}", report.overall_auc);
    for (class, auc) in &report.per_class {
        println!("  {class}: {auc:.4}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    dataset: String,
    scale: u32,
    first_layer_size: usize,
    bottleneck_size: usize,
    patch_count: usize,
    aggregation: String,
    overall_auc: f64,
    per_class: BTreeMap<String, f64>,
}

fn sweep(a: SweepArgs, mut c: RunConfig) -> Result<()> {
    apply_training(&a.training, &mut c);
    let g = &mut c.sweep;
    if let Some(v) = a.scales {
        g.scales = v;
    }
    if let Some(v) = a.first_layer_sizes {
        g.first_layer_sizes = v;
    }
    if let Some(v) = a.bottleneck_sizes {
        g.bottleneck_sizes = v;
    }
    if let Some(v) = a.patch_counts {
        g.patch_counts = v;
    }
    if let Some(v) = a.aggregations {
        g.aggregations = v;
    }
    let scales = g.scales.iter().map(|&s| scale(s)).collect::<Result<Vec<_>>>()?;
    let aggregations = g
        .aggregations
        .iter()
        .map(|s| s.parse::<Aggregation>().map_err(Failure::Config))
        .collect::<Result<Vec<_>>>()?;
    if g.first_layer_sizes.is_empty() || g.bottleneck_sizes.is_empty() || g.patch_counts.is_empty() || scales.is_empty() {
        return Err(Failure::Config("every sweep axis needs at least one value".into()));
    }
    c.training.validate()?;
    c.write_resolved(&a.out)?;
    let grid = c.sweep.clone();
    let mut rows = Vec::new();
    for (di, data) in a.data.iter().enumerate() {
        let manifest = load_manifest(data)?;
        let dataset_id = format!("d{di}");
        let test_entries: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
        for &s in &scales {
            let train = prepared_split(&manifest, Split::Train, s)?;
            let val = prepared_split(&manifest, Split::Validation, s)?;
            let test = prepared_split(&manifest, Split::Test, s)?;
            for &f in &grid.first_layer_sizes {
                for &b in &grid.bottleneck_sizes {
                    let mut run = c.clone();
                    run.training.scale = s;
                    run.model.first_layer_size = f;
                    run.model.bottleneck_size = b;
                    run.model.input_channels = manifest.channels;
                    let dir = a.out.join(&dataset_id).join(format!("s{s}_f{f}_b{b}", s = u32::from(s)));
                    std::fs::create_dir_all(&dir)?;
                    let (model, history) = train_model(&run, &train, &val, &format!("{dataset_id} {s} F={f} B={b}"))?;
                    autoencoder::save(&model, dir.join("model.ckpt"))?;
                    history.save_csv(dir.join("history.csv"))?;
                    let counts: Vec<usize> = if s.is_whole_frame() {
                        vec![1]
                    } else {
                        grid.patch_counts.clone()
                    };
                    let max_np = counts.iter().copied().max().unwrap_or(DEFAULT_PATCH_COUNT);
                    let base = DetectorConfig {
                        scale: s,
                        patch_count: max_np,
                        aggregation: Aggregation::Mean,
                        rng_seed: c.detector.rng_seed,
                    };
                    // patch draws are prefix-stable, so one pass serves every count
                    let patch_scores = par::map(&test, |p| detector::prepared_patch_scores(&model, &p.image, &base))
                        .into_iter()
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    for &n in &counts {
                        for &agg in &aggregations {
                            let det = DetectorConfig {
                                patch_count: n,
                                aggregation: agg,
                                ..base
                            };
                            det.validate()?;
                            let scores = test_entries
                                .iter()
                                .zip(&patch_scores)
                                .map(|(e, ps)| {
                                    Ok(LabeledScore {
                                        frame_id: e.path.clone(),
                                        score: detector::aggregate(&ps[..n], agg)?,
                                        label: e.label.clone(),
                                    })
                                })
                                .collect::<Result<Vec<_>>>()?;
                            let mut report = EvaluationReport::from_scores(
                                &scores,
                                serde_json::json!({ "detector": det, "model": run.model, "training": run.training, "data": data }),
                            )?;
                            report.write(dir.join(format!("report_np{n}_{agg}.json")))?;
                            eprintln!("{dataset_id} {s} F={f} B={b} N_p={n} {agg}: AUC {:.4}", report.overall_auc);
                            rows.push(SweepRow {
                                dataset: data.display().to_string(),
                                scale: u32::from(s),
                                first_layer_size: f,
                                bottleneck_size: b,
                                patch_count: n,
                                aggregation: agg.to_string(),
                                overall_auc: report.overall_auc,
                                per_class: report.per_class.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    write_sweep_tables(&a.out, &a.data, &rows)?;
    Ok(())
}

/// `summary.csv` has one row per evaluated configuration. `table.csv` is
/// the dataset-by-configuration matrix of overall AUC with a simple
/// (unweighted) mean over datasets in the last column.
fn write_sweep_tables(out: &Path, datasets: &[PathBuf], rows: &[SweepRow]) -> Result<()> {
    let classes: Vec<String> = rows
        .iter()
        .flat_map(|r| r.per_class.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut s = String::from("dataset,scale,first_layer_size,bottleneck_size,patch_count,aggregation,overall_auc");
    for c in &classes {
        write!(s, ",{c}").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(
            s,
            "{},{},{},{},{},{},{:.6}",
            r.dataset, r.scale, r.first_layer_size, r.bottleneck_size, r.patch_count, r.aggregation, r.overall_auc
        )
        .unwrap();
        for c in &classes {
            match r.per_class.get(c) {
                Some(v) => write!(s, ",{v:.6}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    std::fs::write(out.join("summary.csv"), s)?;

    let names: Vec<String> = datasets.iter().map(|d| d.display().to_string()).collect();
    let mut keys: Vec<(u32, usize, usize, usize, String)> = Vec::new();
    for r in rows {
        let k = (r.scale, r.first_layer_size, r.bottleneck_size, r.patch_count, r.aggregation.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut t = String::from("scale,first_layer_size,bottleneck_size,patch_count,aggregation");
    for n in &names {
        write!(t, ",{n}").unwrap();
    }
    t.push_str(",mean_over_datasets\n");
    for k in &keys {
        write!(t, "{},{},{},{},{}", k.0, k.1, k.2, k.3, k.4).unwrap();
        let mut vals = Vec::new();
        for n in &names {
            let v = rows
                .iter()
                .find(|r| &r.dataset == n && (r.scale, r.first_layer_size, r.bottleneck_size, r.patch_count, &r.aggregation) == (k.0, k.1, k.2, k.3, &k.4))
                .map(|r| r.overall_auc);
            match v {
                Some(v) => {
                    write!(t, ",{v:.6}").unwrap();
                    vals.push(v);
                }
                None => t.push(','),
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        writeln!(t, ",{mean:.6}").unwrap();
    }
    std::fs::write(out.join("table.csv"), t)?;
    print!("{}", std::fs::read_to_string(out.join("table.csv"))?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct StreamSummary {
    sequence: String,
    threshold: f64,
    frames: usize,
    alarms: usize,
    alarm_intervals: Vec<(usize, usize)>,
    labeled_intervals: Vec<(usize, usize)>,
    iou: f64,
    false_alarm_rate: f64,
}

fn stream(a: StreamArgs, mut c: RunConfig) -> Result<()> {
    apply_detector(&a.detector, &mut c)?;
    if let Some(t) = a.threshold {
        c.stream.threshold = Some(t);
    }
    if let Some(p) = a.percentile {
        c.stream.percentile = p;
        c.stream.threshold = None;
    }
    let manifest = load_manifest(&a.data)?;
    let model = load_model(&a.model)?;
    check_scale(&model, &c.detector);
    let threshold = match c.stream.threshold {
        Some(t) => t,
        None => {
            let val: Vec<&ManifestEntry> = manifest.split(Split::Validation).collect();
            let frames = load_entries(&manifest, &val)?;
            detector::calibrate_threshold(&model, &frames, &c.detector, c.stream.percentile)?
        }
    };
    c.stream.threshold = Some(threshold);
    c.write_resolved(&a.out)?;
    let sequences = match &a.sequence {
        Some(s) => vec![s.clone()],
        None => manifest.sequences(),
    };
    if sequences.is_empty() {
        return Err(Failure::Data("dataset has no qualitative sequences".into()));
    }
    let mut summaries = Vec::new();
    for seq in sequences {
        let entries = manifest.sequence(&seq);
        if entries.is_empty() {
            return Err(Failure::Data(format!("no frames in sequence {seq:?}")));
        }
        let frames = load_entries(&manifest, &entries)?;
        let config = StreamConfig {
            threshold,
            detector: c.detector,
        };
        let records = detector::stream_detect(&model, &frames, &config)?;
        let mut buf = Vec::new();
        detector::write_stream_records(&mut buf, &records)?;
        std::fs::write(a.out.join(format!("stream_{seq}.csv")), &buf)?;
        let alarms: Vec<bool> = records.iter().map(|r| r.alarm).collect();
        let truth: Vec<bool> = entries.iter().map(|e| !e.label.is_normal()).collect();
        let s = StreamSummary {
            sequence: seq.clone(),
            threshold,
            frames: records.len(),
            alarms: alarms.iter().filter(|a| **a).count(),
            alarm_intervals: detector::intervals(&alarms),
            labeled_intervals: detector::intervals(&truth),
            iou: detector::alarm_iou(&alarms, &truth),
            false_alarm_rate: detector::false_alarm_rate(&alarms, &truth),
        };
        eprintln!(
            "{seq}: threshold {threshold:.6}, {} alarms, IoU {:.3}, false-alarm rate {:.3}",
            s.alarms, s.iou, s.false_alarm_rate
        );
        summaries.push(s);
    }
    let json = serde_json::to_string_pretty(&summaries).map_err(|e| Failure::Io(e.to_string()))?;
    std::fs::write(a.out.join("stream_summary.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        let rows = vec![
            ("a.pgm".to_string(), Label::Normal, 0.25, Some(vec![0.2, 0.3])),
            ("b.pgm".to_string(), Label::from("spot-small"), 0.5, Some(vec![0.5])),
        ];
        write_scores(&p, &rows, true).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "path,label,score,patch_scores\na.pgm,normal,0.25,0.2;0.3\nb.pgm,spot-small,0.5,0.5\n");
        let back = read_scores(&p).unwrap();
        assert_eq!(back[1].score, 0.5);
        assert_eq!(back[1].label, Label::from("spot-small"));
    }

    #[test]
    fn scale_change_resets_patch_count() {
        let mut c = RunConfig::default();
        let flags = DetectorFlags {
            scale: Some(2),
            ..Default::default()
        };
        apply_detector(&flags, &mut c).unwrap();
        assert_eq!(c.detector.patch_count, DEFAULT_PATCH_COUNT);
        let flags = DetectorFlags {
            scale: Some(8),
            patch_count: Some(5),
            ..Default::default()
        };
        assert!(matches!(apply_detector(&flags, &mut RunConfig::default()), Err(Failure::Config(_))));
    }
}
