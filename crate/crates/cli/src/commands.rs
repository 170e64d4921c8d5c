use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use ndarray::Array2;
use slicewise::adapt::{
    run_orientation_pipeline, AdaptConfig, ClassifierModel, EncodedSet, MmdMode, OrientationData,
    Phase,
};
use slicewise::backbone::{Backbone, BackboneWeights};
use slicewise::data::{
    generate_synthetic_dataset, load_manifest, DatasetManifest, Domain, Orientation, Split,
    SynthConfig,
};
use slicewise::kv::KeyValues;
use slicewise::metrics::{aggregate_orientation_reports, export_embedding_2d, MetricsReport};
use slicewise::separator::{
    build_separator, orientation_accuracy, partition_by_orientation, predict_orientation,
    predictions_to_csv, train_separator, SeparatorConfig, SeparatorModel,
};

use crate::record::RunRecord;

/// A request the user can fix (exit status 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_config(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read config {}: {e}", p.display()))),
        None => Ok(String::new()),
    }
}

fn partition_path(dir: &Path, o: Orientation) -> PathBuf {
    dir.join(format!("{o}.csv"))
}

fn load_backbone(weights: Option<&Path>) -> Result<Arc<Backbone>> {
    let net = match weights {
        Some(p) => Backbone::load(p)?,
        None => Backbone::from_weights(&BackboneWeights::stand_in(0))?,
    };
    Ok(Arc::new(net))
}

pub fn synth(config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let text = read_config(config)?;
    let cfg = SynthConfig::from_kv(&KeyValues::parse(&text)?)?;
    let mut record = RunRecord::start("synth", seed, text);
    create_dir(out)?;
    let manifest = generate_synthetic_dataset(&cfg, seed, out)?;
    record.output(out.join("manifest.csv"));
    if !manifest.is_empty() {
        record.output(out.join("images"));
    }
    println!(
        "wrote {} slices ({} source, {} target) to {}",
        manifest.len(),
        manifest.source_counts.total(),
        manifest.target_counts.total(),
        out.display()
    );
    record.finish(out)
}

pub fn separate(
    manifest_path: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(usage(format!("{} has no entries", manifest_path.display())));
    }
    let text = read_config(config)?;
    let mut cfg = SeparatorConfig::from_kv(&KeyValues::parse(&text)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut record = RunRecord::start("separate", cfg.seed, text);
    create_dir(out)?;

    let slices = manifest.load_slices()?;
    let is_train = |id: &str| {
        manifest
            .entries
            .iter()
            .any(|e| e.id == id && e.domain == Domain::Source && e.split == Split::Train)
    };
    let (model, trained_ids): (SeparatorModel, Vec<String>) = match checkpoint {
        Some(p) => (SeparatorModel::load(p)?, Vec::new()),
        None => {
            let train: Vec<_> = slices.iter().filter(|s| is_train(&s.id)).cloned().collect();
            if train.is_empty() {
                return Err(usage("no source TRAIN entries to train the separator on"));
            }
            let ids = train.iter().map(|s| s.id.clone()).collect();
            let model = train_separator(build_separator(cfg.seed), &train, &cfg)?;
            let ckpt = out.join("separator.ckpt");
            model.save(&ckpt)?;
            record.output(&ckpt);
            if let (Some(first), Some(last)) =
                (model.loss_history.first(), model.loss_history.last())
            {
                println!(
                    "trained on {} slices; loss {first:.4} -> {last:.4}",
                    train.len()
                );
            }
            (model, ids)
        }
    };

    let predictions = predict_orientation(&model, &slices);
    let pred_path = out.join("predictions.csv");
    write(&pred_path, &predictions_to_csv(&predictions))?;
    record.output(&pred_path);

    let parts_dir = out.join("partitions");
    create_dir(&parts_dir)?;
    for (o, part) in partition_by_orientation(&manifest, &predictions)? {
        let path = partition_path(&parts_dir, o);
        part.save(&path)?;
        record.output(&path);
        println!("{o}: {} entries", part.len());
    }

    if let Some(acc) = orientation_accuracy(&slices, &predictions) {
        println!(
            "orientation accuracy (all labeled entries): {:.2}%",
            100.0 * acc
        );
    }
    if !trained_ids.is_empty() {
        let held: Vec<usize> = (0..slices.len())
            .filter(|&i| !trained_ids.contains(&slices[i].id))
            .collect();
        let held_slices: Vec<_> = held.iter().map(|&i| slices[i].clone()).collect();
        let held_preds: Vec<_> = held.iter().map(|&i| predictions[i].clone()).collect();
        if let Some(acc) = orientation_accuracy(&held_slices, &held_preds) {
            println!("orientation accuracy (held out): {:.2}%", 100.0 * acc);
        }
    }
    record.finish(out)
}

pub struct AdaptArgs<'a> {
    pub partitions: &'a Path,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub mmd_mode: Option<MmdMode>,
    pub lambda: Option<f64>,
    pub weights: Option<&'a Path>,
}

/// Target entries with class labels removed; adaptation never sees them.
fn unlabeled_target(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    let entries = manifest
        .entries
        .iter()
        .filter(|e| e.domain == Domain::Target)
        .map(|e| {
            let mut e = e.clone();
            e.class_label = None;
            e
        })
        .collect();
    Ok(DatasetManifest::new(
        entries,
        manifest.seed,
        manifest.root.clone(),
    )?)
}

pub fn adapt(args: AdaptArgs<'_>) -> Result<()> {
    let text = read_config(args.config)?;
    let mut cfg = AdaptConfig::from_kv(&KeyValues::parse(&text)?)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.mmd_mode {
        cfg.mmd_mode = m;
    }
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    cfg.validate()?;
    let mut record = RunRecord::start("adapt", cfg.seed, cfg.to_kv_text());
    create_dir(args.out)?;
    let snapshot = args.out.join("config.txt");
    write(&snapshot, &cfg.to_kv_text())?;
    record.output(&snapshot);

    let backbone = load_backbone(args.weights)?;
    let mut done = 0;
    for o in Orientation::ALL {
        let manifest = load_manifest(&partition_path(args.partitions, o))?;
        let train = manifest.select(Domain::Source, Some(Split::Train));
        let val = manifest.select(Domain::Source, Some(Split::Val));
        let target = unlabeled_target(&manifest)?;
        if train.is_empty() || target.is_empty() {
            eprintln!(
                "warning: skipping {o}: {} source TRAIN and {} target entries",
                train.len(),
                target.len()
            );
            continue;
        }
        let data = OrientationData {
            source_train: EncodedSet::from_manifest(&backbone, &train, Domain::Source)?,
            source_val: EncodedSet::from_manifest(&backbone, &val, Domain::Source)?,
            target: EncodedSet::from_manifest(&backbone, &target, Domain::Target)?,
        };
        let outcome = run_orientation_pipeline(o, &data, backbone.clone(), &cfg)?;

        let dir = args.out.join(o.as_str());
        create_dir(&dir)?;
        let files = [
            (dir.join("phase1_log.csv"), outcome.phase1_log.to_csv()),
            (dir.join("phase2_log.csv"), outcome.phase2_log.to_csv()),
            (
                dir.join("pseudo_labels.csv"),
                outcome.pseudo_labels.to_csv(),
            ),
        ];
        for (path, body) in &files {
            write(path, body)?;
            record.output(path);
        }
        for (model, phase) in [
            (&outcome.phase1_model, Phase::Phase1),
            (&outcome.model, Phase::Phase2),
        ] {
            let path = dir.join(format!("{phase}.ckpt"));
            model.save(&path, phase)?;
            record.output(&path);
        }
        let last = outcome
            .phase2_log
            .last()
            .map(|r| r.losses)
            .unwrap_or_default();
        println!(
            "{o}: {} source / {} target slices; final ce_src {:.4} ce_tgt {:.4} mmd {:.4}",
            data.source_train.len(),
            data.target.len(),
            last.ce_src,
            last.ce_tgt,
            last.mmd
        );
        done += 1;
    }
    if done == 0 {
        return Err(usage("every orientation partition is empty"));
    }
    record.finish(args.out)
}

pub fn eval(
    checkpoints: &Path,
    partitions: &Path,
    config: Option<&Path>,
    out: &Path,
    phase: Option<Phase>,
    weights: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    // Keys `phase` and `seed`; flags win over the file.
    let kv = KeyValues::parse(&read_config(config)?)?;
    kv.reject_unknown(|k| matches!(k, "phase" | "seed"))?;
    let phase = match phase {
        Some(p) => p,
        None => kv.get::<Phase>("phase")?.unwrap_or(Phase::Phase2),
    };
    let seed = match seed {
        Some(s) => s,
        None => kv.get::<u64>("seed")?.unwrap_or(0),
    };
    let mut record = RunRecord::start("eval", seed, format!("phase = {phase}\nseed = {seed}\n"));
    create_dir(out)?;
    let backbone = load_backbone(weights)?;
    let mut reports = BTreeMap::new();
    for o in Orientation::ALL {
        let ckpt = checkpoints.join(o.as_str()).join(format!("{phase}.ckpt"));
        if !ckpt.exists() {
            eprintln!("warning: no {phase} checkpoint for {o}");
            continue;
        }
        let (model, _) = ClassifierModel::load(&ckpt, backbone.clone())?;
        let manifest = load_manifest(&partition_path(partitions, o))?;
        let target_manifest = manifest.select(Domain::Target, Some(Split::Test));
        if target_manifest.is_empty() {
            eprintln!("warning: no target TEST entries for {o}");
            continue;
        }
        let target = EncodedSet::from_manifest(&backbone, &target_manifest, Domain::Target)?;
        target.require_labels()?;
        let report = slicewise::adapt::evaluate_target(&model, &target, phase)?
            .context("labeled target set produced no report")?;
        save_report(&report, out, o.as_str(), &mut record)?;
        println!(
            "{o}: accuracy {:.4}, macro F1 {:.4} on {} target slices",
            report.accuracy, report.macro_f1, report.n
        );

        let source = EncodedSet::from_manifest(
            &backbone,
            &manifest.select(Domain::Source, None),
            Domain::Source,
        )?;
        let n = source.len() + target.len();
        if n >= 5 {
            let mut feats = Array2::<f64>::zeros((n, slicewise::adapt::ALIGNMENT_DIM));
            let mut ids = Vec::with_capacity(n);
            let mut domains = Vec::with_capacity(n);
            let mut row = 0;
            for set in [&source, &target] {
                if set.is_empty() {
                    continue;
                }
                let f = model.alignment_features(set.features.view());
                for r in f.rows() {
                    feats.row_mut(row).assign(&r.mapv(f64::from));
                    row += 1;
                }
                ids.extend(set.ids.iter().cloned());
                domains.extend(std::iter::repeat_n(set.domain, set.len()));
            }
            let path = out.join(format!("{o}_embedding.csv"));
            export_embedding_2d(feats.view(), &ids, &domains, &path, seed)?;
            record.output(&path);
        } else {
            eprintln!("warning: {o} has {n} slices, too few for an embedding");
        }
        reports.insert(o, report);
    }
    if reports.is_empty() {
        return Err(usage("nothing to evaluate"));
    }
    if reports.len() == Orientation::ALL.len() {
        let agg = aggregate_orientation_reports(&reports)?;
        save_report(&agg, out, "aggregate", &mut record)?;
        println!(
            "aggregate: accuracy {:.4}, pooled macro F1 {:.4}, mean orientation macro F1 {:.4}",
            agg.accuracy,
            agg.macro_f1,
            agg.mean_orientation_macro_f1.unwrap_or(f64::NAN)
        );
    } else {
        eprintln!("warning: aggregate report needs all three orientations");
    }
    record.finish(out)
}

fn save_report(
    report: &MetricsReport,
    out: &Path,
    stem: &str,
    record: &mut RunRecord,
) -> Result<()> {
    let json = out.join(format!("{stem}_report.json"));
    let csv = out.join(format!("{stem}_confusion.csv"));
    report.save(&json, &csv)?;
    record.output(json);
    record.output(csv);
    Ok(())
}

pub fn init_backbone(out: &Path, seed: u64) -> Result<()> {
    let mut record = RunRecord::start("init-backbone", seed, String::new());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let weights = BackboneWeights::stand_in(seed);
    weights.save(out)?;
    record.output(out);
    let net = Backbone::from_weights(&weights)?;
    println!(
        "wrote {} ({} parameters, checksum {})",
        out.display(),
        net.parameter_count(),
        net.checksum()
    );
    record.finish(
        out.parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new(".")),
    )
}
