use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clisa::contrastive::train_contrastive;
use clisa::eval::accuracy;
use clisa::eval::{
    integrated_gradients, make_splits, run_protocol, subject_ablation, synth::synthetic_positions,
    EvalConfig, EvalReport, SplitPlan,
};
use clisa::io::{
    ablation_csv, config_hash, embeddings_csv, features_from_csv, features_to_csv, load_dataset,
    read_json, report_csvs, write_atomic, write_dataset, write_json, DatasetManifest,
    MANIFEST_FILE,
};
use clisa::network::{load_checkpoint, save_checkpoint};
use clisa::predict::{
    class_count, extract_features, inner_validation_mask, matrix, normalize_test,
    normalize_training, train_classifier, ClassifierParams, ClassifierReport, Extractor,
    FeatureRow, FeatureStats,
};
use clisa::preprocess::{montage, preprocess_recording, Reference};
use clisa::{derive_seed, seeded_rng, Recording, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::{Cli, Command};

const TAG_TRAIN: u64 = 0x7261;
const TAG_SPLIT: u64 = 0x5350;
const TAG_CLASSIFY: u64 = 0xC1A5;

/// Exit code of `evaluate` and `ablate` when some fold failed.
const INCOMPLETE: u8 = 3;

/// Everything `explain` needs from `classify`.
#[derive(Serialize, Deserialize)]
struct ClassifierArtifact {
    params: ClassifierParams,
    stats: FeatureStats,
    eta: f64,
    n_classes: usize,
    train_subjects: Vec<String>,
    test_subjects: Vec<String>,
    report: ClassifierReport,
    test_accuracy: f64,
}

fn require(stage: &str, path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("{stage}: missing upstream artifact {}", path.display());
    }
    Ok(())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_data(stage: &str, cfg: &RunConfig) -> Result<(DatasetManifest, Vec<Recording>)> {
    let path = manifest_path(cfg.dataset()?);
    require(stage, &path)?;
    load_dataset(&path).with_context(|| format!("{stage}: cannot load dataset {}", path.display()))
}

fn subset(recs: Vec<Recording>, subjects: &[String]) -> Result<Vec<Recording>> {
    if subjects.is_empty() {
        return Ok(recs);
    }
    for s in subjects {
        if !recs.iter().any(|r| &r.subject_id == s) {
            bail!("subject {s} not in the dataset");
        }
    }
    Ok(recs
        .into_iter()
        .filter(|r| subjects.contains(&r.subject_id))
        .collect())
}

fn write_run(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&out.join("run.json"), cfg)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    let out = cli.out.clone().context("--out is required")?;
    let set_data = |cfg: &mut RunConfig, data: Option<PathBuf>| {
        if data.is_some() {
            cfg.dataset = data;
        }
    };
    match cli.command {
        Command::Synth {
            subjects,
            trials,
            classes,
            channels,
            snr,
            trial_len_s,
            fs,
        } => {
            let s = &mut cfg.synth;
            s.seed = cfg.seed;
            s.n_subjects = subjects.unwrap_or(s.n_subjects);
            s.n_trials = trials.unwrap_or(s.n_trials);
            s.n_classes = classes.unwrap_or(s.n_classes);
            s.channels = channels.unwrap_or(s.channels);
            s.snr = snr.unwrap_or(s.snr);
            s.trial_len_s = trial_len_s.unwrap_or(s.trial_len_s);
            s.fs = fs.unwrap_or(s.fs);
            synth(&out, cfg)
        }
        Command::Preprocess {
            data,
            band_low,
            band_high,
            reref,
            coords,
            keep_last_seconds,
        } => {
            set_data(&mut cfg, data.data);
            let p = &mut cfg.preprocess;
            p.band_low_hz = band_low.unwrap_or(p.band_low_hz);
            p.band_high_hz = band_high.unwrap_or(p.band_high_hz);
            if let Some(r) = reref {
                p.reference = Some(parse_reference(&r)?);
            }
            if keep_last_seconds.is_some() {
                p.keep_last_seconds = keep_last_seconds;
            }
            preprocess(&out, cfg, coords.as_deref())
        }
        Command::Train {
            data,
            subjects,
            epochs,
        } => {
            set_data(&mut cfg, data.data);
            if let Some(e) = epochs {
                cfg.hyperparams.epochs = e;
            }
            train(&out, cfg, &subjects)
        }
        Command::Features {
            data,
            checkpoint,
            raw_de,
            dump_embeddings,
        } => {
            set_data(&mut cfg, data.data);
            features(
                &out,
                cfg,
                if raw_de { None } else { checkpoint },
                dump_embeddings,
            )
        }
        Command::Classify {
            features,
            test_subjects,
        } => classify(&out, cfg, &features, &test_subjects),
        Command::Evaluate {
            data,
            protocol,
            methods,
        } => {
            set_data(&mut cfg, data.data);
            if let Some(p) = protocol {
                cfg.protocol = p;
            }
            if !methods.is_empty() {
                cfg.methods = methods;
            }
            evaluate(&out, cfg, cli.jobs)
        }
        Command::Ablate {
            data,
            protocol,
            counts,
        } => {
            set_data(&mut cfg, data.data);
            if let Some(p) = protocol {
                cfg.protocol = p;
            }
            if !counts.is_empty() {
                cfg.ablation_counts = counts;
            }
            ablate(&out, cfg, cli.jobs)
        }
        Command::Explain {
            features,
            classifier,
            class,
            steps,
            subjects,
        } => explain(&out, cfg, &features, &classifier, class, steps, &subjects),
    }
}

fn parse_reference(s: &str) -> Result<Reference> {
    if s == "average" {
        return Ok(Reference::Average);
    }
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => {
            Ok(Reference::Mastoids(a.to_string(), b.to_string()))
        }
        _ => bail!("--reref must be `average` or two channel names `A,B`"),
    }
}

fn synth(out: &Path, mut cfg: RunConfig) -> Result<ExitCode> {
    cfg.synth.validate()?;
    let recs = clisa::eval::gen_synthetic(&cfg.synth)?;
    let positions = synthetic_positions(cfg.synth.channels);
    let m = write_dataset(out, "synthetic", &recs, Some(&positions))?;
    cfg.dataset = Some(out.join(MANIFEST_FILE));
    write_run(out, &cfg)?;
    println!(
        "wrote {} subjects x {} trials to {}",
        m.subjects.len(),
        cfg.synth.n_trials,
        out.join(MANIFEST_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn preprocess(out: &Path, cfg: RunConfig, coords: Option<&Path>) -> Result<ExitCode> {
    let (manifest, recs) = load_data("preprocess", &cfg)?;
    let names = manifest.channel_names();
    let positions = match coords {
        Some(p) => {
            require("preprocess", p)?;
            Some(montage::positions_for(
                &montage::read_coordinates(p)?,
                &names,
            )?)
        }
        None => manifest.positions(),
    };
    let mut processed = Vec::with_capacity(recs.len());
    let mut reports = Vec::new();
    for r in &recs {
        let (p, rep) = preprocess_recording(r, &cfg.preprocess, positions.as_deref())?;
        processed.push(p);
        reports.extend(rep);
    }
    write_dataset(out, &manifest.name, &processed, positions.as_deref())?;
    write_json(&out.join("repairs.json"), &reports)?;
    write_run(out, &cfg)?;
    let repaired = reports
        .iter()
        .filter(|r| !r.repair.interpolated.is_empty() || r.repair.total_jump_repairs() > 0)
        .count();
    println!(
        "band {}-{} Hz applied to {} trials; {repaired} trials had repaired channels (see repairs.json)",
        cfg.preprocess.band_low_hz,
        cfg.preprocess.band_high_hz,
        reports.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(out: &Path, cfg: RunConfig, subjects: &[String]) -> Result<ExitCode> {
    let (manifest, recs) = load_data("train", &cfg)?;
    let recs = subset(recs, subjects)?;
    fs::create_dir_all(out)?;
    let hash = config_hash(&(
        &cfg.hyperparams,
        cfg.seed,
        cfg.precision,
        &manifest,
        subjects,
    ))?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, &[TAG_TRAIN]));
    let ckpt = out.join(format!("checkpoint-{hash}.clsa"));
    let report = match cfg.precision {
        Precision::F32 => {
            let (p, r) = train_contrastive::<f32, _>(&recs, &cfg.hyperparams, &mut rng)?;
            save_checkpoint(&p, &ckpt)?;
            r
        }
        Precision::F64 => {
            let (p, r) = train_contrastive::<f64, _>(&recs, &cfg.hyperparams, &mut rng)?;
            save_checkpoint(&p, &ckpt)?;
            r
        }
    };
    write_atomic(
        &out.join(format!("train-{hash}.csv")),
        report.to_csv().as_bytes(),
    )?;
    write_json(&out.join(format!("train-{hash}.json")), &report)?;
    write_run(out, &cfg)?;
    println!("checkpoint {}", ckpt.display());
    println!(
        "best epoch {} of {}: validation retrieval {:.3} (chance {:.3})",
        report.best_epoch,
        report.epochs.len(),
        report.best_val_retrieval_acc,
        report.chance
    );
    Ok(ExitCode::SUCCESS)
}

fn extract_all<T: Scalar>(
    recs: &[Recording],
    ex: Extractor<'_, T>,
    cfg: &RunConfig,
) -> Result<Vec<Vec<FeatureRow>>> {
    recs.iter()
        .map(|r| Ok(extract_features(r, ex, &cfg.features)?))
        .collect()
}

fn features(
    out: &Path,
    cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    dump: bool,
) -> Result<ExitCode> {
    let (manifest, recs) = load_data("features", &cfg)?;
    let (source, rows) = match &checkpoint {
        None => (
            "raw_de".to_string(),
            extract_all::<f32>(&recs, Extractor::RawDe, &cfg)?,
        ),
        Some(p) => {
            require("features", p)?;
            let bytes = fs::read(p)?;
            let params = load_checkpoint(p)
                .with_context(|| format!("features: bad checkpoint {}", p.display()))?;
            let rows = match cfg.precision {
                Precision::F32 => extract_all(&recs, Extractor::Encoder(&params.encoder), &cfg)?,
                Precision::F64 => {
                    let p64 = params.cast::<f64>();
                    extract_all(&recs, Extractor::Encoder(&p64.encoder), &cfg)?
                }
            };
            (config_hash(&bytes)?, rows)
        }
    };
    let hash = config_hash(&(&source, &cfg.features, cfg.precision, &manifest))?;
    let dir = out.join(format!("features-{hash}"));
    fs::create_dir_all(&dir)?;
    for (r, rows) in recs.iter().zip(&rows) {
        write_atomic(
            &dir.join(format!("{}.csv", r.subject_id)),
            features_to_csv(rows).as_bytes(),
        )?;
    }
    if dump {
        let all: Vec<FeatureRow> = rows.iter().flatten().cloned().collect();
        write_atomic(
            &out.join(format!("embeddings-{hash}.csv")),
            embeddings_csv(&all).as_bytes(),
        )?;
    }
    write_run(out, &cfg)?;
    println!("features {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

/// Feature rows of every `<subject>.csv` in `dir`, by subject.
fn read_feature_dir(stage: &str, dir: &Path) -> Result<BTreeMap<String, Vec<FeatureRow>>> {
    require(stage, dir)?;
    let mut by_subject = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let subject = path
            .file_stem()
            .and_then(|s| s.to_str())
            .context("feature file name is not valid UTF-8")?
            .to_string();
        let text = fs::read_to_string(&path)?;
        let rows = features_from_csv(&text, &subject)
            .with_context(|| format!("{stage}: {}", path.display()))?;
        by_subject.insert(subject, rows);
    }
    if by_subject.is_empty() {
        bail!("{stage}: no feature CSVs in {}", dir.display());
    }
    Ok(by_subject)
}

fn classify(out: &Path, cfg: RunConfig, dir: &Path, test_subjects: &[String]) -> Result<ExitCode> {
    let by_subject = read_feature_dir("classify", dir)?;
    for s in test_subjects {
        if !by_subject.contains_key(s) {
            bail!("classify: no features for test subject {s}");
        }
    }
    let (mut train_rows, mut test_rows) = (Vec::new(), Vec::new());
    let mut train_subjects = Vec::new();
    for (s, rows) in &by_subject {
        if test_subjects.contains(s) {
            test_rows.extend(rows.iter().cloned());
        } else {
            train_subjects.push(s.clone());
            train_rows.extend(rows.iter().cloned());
        }
    }
    if train_rows.is_empty() {
        bail!("classify: every subject is a test subject");
    }
    let all: Vec<FeatureRow> = by_subject.values().flatten().cloned().collect();
    let n_classes = class_count(&all)?;
    let stats = normalize_training(&mut train_rows)?;
    normalize_test(&mut test_rows, &stats, cfg.features.eta)?;
    let mask = inner_validation_mask(&train_rows, cfg.classifier.inner_val_frac);
    let (x, y) = matrix(&train_rows);
    let mut rng = seeded_rng(derive_seed(cfg.seed, &[TAG_CLASSIFY]));
    let (params, report) = train_classifier(&x, &y, &mask, n_classes, &cfg.classifier, &mut rng)?;
    let (tx, ty) = matrix(&test_rows);
    let (pred, post) = params.predict(&tx)?;
    let acc = accuracy(&ty, &pred);

    let dir_name = dir.file_name().map(|n| n.to_string_lossy().into_owned());
    let hash = config_hash(&(
        dir_name,
        &cfg.classifier,
        cfg.features.eta,
        cfg.seed,
        test_subjects,
    ))?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("subject_id,trial_id,sample_idx,label,predicted,posterior\n");
    for ((r, p), q) in test_rows.iter().zip(&pred).zip(&post) {
        let q: Vec<String> = q.iter().map(f64::to_string).collect();
        let _ = writeln!(
            csv,
            "{},{},{},{},{p},{}",
            r.subject_id,
            r.trial_id,
            r.sample_idx,
            r.label,
            q.join(";")
        );
    }
    write_atomic(&out.join(format!("predictions-{hash}.csv")), csv.as_bytes())?;
    let clf_path = out.join(format!("classifier-{hash}.json"));
    write_json(
        &clf_path,
        &ClassifierArtifact {
            params,
            stats,
            eta: cfg.features.eta,
            n_classes,
            train_subjects,
            test_subjects: test_subjects.to_vec(),
            report,
            test_accuracy: acc,
        },
    )?;
    write_run(out, &cfg)?;
    println!("classifier {}", clf_path.display());
    println!("test accuracy {:.2}% on {} samples", 100.0 * acc, ty.len());
    Ok(ExitCode::SUCCESS)
}

fn plan_for(cfg: &RunConfig, recs: &[Recording]) -> Result<SplitPlan> {
    let ids: Vec<String> = recs.iter().map(|r| r.subject_id.clone()).collect();
    let stimuli: Vec<(String, usize)> = recs
        .first()
        .map(|r| {
            r.trials
                .iter()
                .map(|t| (t.stimulus_id.clone(), t.label))
                .collect()
        })
        .unwrap_or_default();
    let mut rng = seeded_rng(derive_seed(cfg.seed, &[TAG_SPLIT]));
    Ok(make_splits(&ids, &stimuli, &cfg.protocol, &mut rng)?)
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        hyperparams: cfg.hyperparams.clone(),
        features: cfg.features.clone(),
        classifier: cfg.classifier.clone(),
        trial_vote: cfg.trial_vote,
    }
}

fn print_report(r: &EvalReport) {
    println!("protocol {} ({} folds)", r.protocol, r.plan.folds.len());
    if let Some(p) = &r.plan.trial_partition {
        println!(
            "trial partition: train stimuli [{}], test stimuli [{}]",
            p.train_stimuli.join(","),
            p.test_stimuli.join(",")
        );
    }
    for m in &r.methods {
        let auc = m
            .roc
            .as_ref()
            .map_or(String::new(), |roc| format!(", AUC {:.3}", roc.auc));
        println!(
            "{:?}: {:.1} +/- {:.1}% ({}/{} folds{auc}; chance {:.1}%, +3 sigma {:.1}%)",
            m.method,
            m.mean_accuracy_pct,
            m.std_accuracy_pct,
            m.completed_folds,
            m.folds.len(),
            m.chance_pct,
            m.chance_3sigma_pct
        );
    }
}

fn evaluate(out: &Path, cfg: RunConfig, jobs: usize) -> Result<ExitCode> {
    let (manifest, recs) = load_data("evaluate", &cfg)?;
    let plan = plan_for(&cfg, &recs)?;
    let ecfg = eval_config(&cfg);
    let report = match cfg.precision {
        Precision::F32 => run_protocol::<f32>(&recs, &ecfg, &plan, &cfg.methods, cfg.seed, jobs)?,
        Precision::F64 => run_protocol::<f64>(&recs, &ecfg, &plan, &cfg.methods, cfg.seed, jobs)?,
    };
    let hash = config_hash(&(&cfg, &manifest))?;
    let dir = out.join(format!("eval-{hash}"));
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    for (name, text) in report_csvs(&report) {
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    write_run(out, &cfg)?;
    print_report(&report);
    println!("report {}", dir.join("report.json").display());
    if !report.all_folds_completed() {
        for m in &report.methods {
            for f in m.folds.iter().filter(|f| f.error.is_some()) {
                eprintln!(
                    "{:?} fold {} failed: {}",
                    m.method,
                    f.fold,
                    f.error.as_deref().unwrap_or("")
                );
            }
        }
        return Ok(ExitCode::from(INCOMPLETE));
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(out: &Path, cfg: RunConfig, jobs: usize) -> Result<ExitCode> {
    let (manifest, recs) = load_data("ablate", &cfg)?;
    let plan = plan_for(&cfg, &recs)?;
    let ecfg = eval_config(&cfg);
    let counts = &cfg.ablation_counts;
    let report = match cfg.precision {
        Precision::F32 => subject_ablation::<f32>(&recs, &ecfg, &plan, counts, cfg.seed, jobs)?,
        Precision::F64 => subject_ablation::<f64>(&recs, &ecfg, &plan, counts, cfg.seed, jobs)?,
    };
    let hash = config_hash(&(&cfg, &manifest))?;
    fs::create_dir_all(out)?;
    write_json(&out.join(format!("ablation-{hash}.json")), &report)?;
    write_atomic(
        &out.join(format!("ablation-{hash}.csv")),
        ablation_csv(&report).as_bytes(),
    )?;
    write_run(out, &cfg)?;
    for p in &report.points {
        println!(
            "{:>3} subjects: {:.1} +/- {:.1}%",
            p.count, p.mean_accuracy_pct, p.std_accuracy_pct
        );
    }
    let trained: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    println!(
        "spearman rho over {:?}: {:.3}",
        trained,
        report.trend(&trained)
    );
    if report.points.iter().any(|p| !p.errors.is_empty()) {
        return Ok(ExitCode::from(INCOMPLETE));
    }
    Ok(ExitCode::SUCCESS)
}

fn explain(
    out: &Path,
    cfg: RunConfig,
    dir: &Path,
    classifier: &Path,
    class: usize,
    steps: usize,
    subjects: &[String],
) -> Result<ExitCode> {
    require("explain", classifier)?;
    let art: ClassifierArtifact = read_json(classifier)?;
    if class >= art.n_classes {
        bail!(
            "explain: class {class} outside the classifier's {} classes",
            art.n_classes
        );
    }
    let by_subject = read_feature_dir("explain", dir)?;
    let wanted = if subjects.is_empty() {
        &art.test_subjects
    } else {
        subjects
    };
    let mut rows = Vec::new();
    for s in wanted {
        let r = by_subject
            .get(s)
            .with_context(|| format!("explain: no features for subject {s}"))?;
        rows.extend(r.iter().cloned());
    }
    normalize_test(&mut rows, &art.stats, art.eta)?;
    let inputs: Vec<&FeatureRow> = rows.iter().filter(|r| r.label == class).collect();
    if inputs.is_empty() {
        bail!("explain: no rows of class {class} for the chosen subjects");
    }
    let d = art.params.input_dim();
    let mut mean = vec![0.0; d];
    let (mut worst, mut total, mut checked) = (0.0f64, 0.0, 0usize);
    for r in &inputs {
        let a = integrated_gradients(&art.params, &r.values, None, class, steps)?;
        for (m, v) in mean.iter_mut().zip(&a.values) {
            *m += v / inputs.len() as f64;
        }
        if (a.output - a.baseline_output).abs() > 1e-9 {
            let e = a.completeness_error();
            worst = worst.max(e);
            total += e;
            checked += 1;
        }
    }
    let hash = config_hash(&(
        classifier
            .file_name()
            .map(|n| n.to_string_lossy().into_owned()),
        class,
        steps,
        wanted,
    ))?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("feature,mean_attribution\n");
    for (i, v) in mean.iter().enumerate() {
        let _ = writeln!(csv, "{i},{v}");
    }
    let path = out.join(format!("attribution-{hash}.csv"));
    write_atomic(&path, csv.as_bytes())?;
    write_run(out, &cfg)?;
    println!(
        "attribution {} ({} inputs of class {class})",
        path.display(),
        inputs.len()
    );
    println!(
        "completeness error: max {worst:.2e}, mean {:.2e} over {checked} inputs",
        if checked > 0 {
            total / checked as f64
        } else {
            0.0
        }
    );
    Ok(ExitCode::SUCCESS)
}
