//! File formats: dataset manifests with raw signal files, feature CSVs,
//! report CSVs and JSON artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{AblationReport, EvalReport};
use crate::kernel::Tensor;
use crate::predict::FeatureRow;
use crate::recording::{Recording, Trial};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Short content hash of a serializable config, for artifact names.
pub fn config_hash<V: Serialize>(value: &V) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..6]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelInfo {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    pub trial_id: String,
    pub stimulus_id: String,
    pub label: usize,
    /// Relative to the manifest's directory.
    pub file: String,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub trials: Vec<TrialEntry>,
}

/// `manifest.json` of a dataset directory. Each trial is a file of
/// little-endian `f32`, channel-major (`M` rows of `samples` values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub sampling_rate: f64,
    pub channels: Vec<ChannelInfo>,
    pub subjects: Vec<SubjectEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    /// Electrode positions, if every channel has one.
    pub fn positions(&self) -> Option<Vec<[f64; 3]>> {
        self.channels.iter().map(|c| c.position).collect()
    }
}

pub fn encode_signal(signal: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(signal.len() * 4);
    for &v in signal.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_signal(bytes: &[u8], channels: usize, samples: usize) -> Result<Tensor<f64>> {
    let want = channels * samples * 4;
    if bytes.len() != want {
        return Err(Error::Data(format!(
            "signal has {} bytes, expected {want} ({channels} channels x {samples} samples x 4)",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(vec![channels, samples], data)
}

fn signal_file(subject: &str, trial: &str) -> String {
    format!("signals/{subject}/{trial}.f32")
}

/// Reads a manifest and every signal file it references.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Recording>)> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let names = manifest.channel_names();
    let mut recordings = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        let mut trials = Vec::with_capacity(s.trials.len());
        for t in &s.trials {
            let path = root.join(&t.file);
            let bytes = fs::read(&path).map_err(|e| {
                Error::Data(format!("signal file {} unreadable: {e}", path.display()))
            })?;
            let signal = decode_signal(&bytes, names.len(), t.samples)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            trials.push(Trial {
                trial_id: t.trial_id.clone(),
                stimulus_id: t.stimulus_id.clone(),
                label: t.label,
                signal,
            });
        }
        recordings.push(Recording::new(
            s.subject_id.clone(),
            manifest.sampling_rate,
            names.clone(),
            trials,
        )?);
    }
    Ok((manifest, recordings))
}

/// Writes `recordings` as a dataset directory at `dir`. The directory is
/// assembled next to `dir` and renamed into place, so a failure leaves
/// nothing behind. `dir` must not exist or be empty.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    recordings: &[Recording],
    positions: Option<&[[f64; 3]]>,
) -> Result<DatasetManifest> {
    let first = recordings
        .first()
        .ok_or_else(|| Error::Data("no recordings to write".into()))?;
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::Usage(format!(
            "output directory {} is not empty",
            dir.display()
        )));
    }
    let channels: Vec<ChannelInfo> = first
        .channel_names
        .iter()
        .enumerate()
        .map(|(i, n)| ChannelInfo {
            name: n.clone(),
            position: positions.and_then(|p| p.get(i).copied()),
        })
        .collect();
    let mut staging = dir.as_os_str().to_owned();
    staging.push(".partial");
    let staging = PathBuf::from(staging);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let build = || -> Result<DatasetManifest> {
        let mut subjects = Vec::with_capacity(recordings.len());
        for r in recordings {
            if r.channel_names != first.channel_names || r.sampling_rate != first.sampling_rate {
                return Err(Error::Data(format!(
                    "subject {} differs from {} in channels or sampling rate",
                    r.subject_id, first.subject_id
                )));
            }
            fs::create_dir_all(staging.join("signals").join(&r.subject_id))?;
            let mut trials = Vec::with_capacity(r.trials.len());
            for t in &r.trials {
                let file = signal_file(&r.subject_id, &t.trial_id);
                fs::write(staging.join(&file), encode_signal(&t.signal))?;
                trials.push(TrialEntry {
                    trial_id: t.trial_id.clone(),
                    stimulus_id: t.stimulus_id.clone(),
                    label: t.label,
                    file,
                    samples: t.n_samples(),
                });
            }
            subjects.push(SubjectEntry {
                subject_id: r.subject_id.clone(),
                trials,
            });
        }
        let manifest = DatasetManifest {
            name: name.to_string(),
            sampling_rate: first.sampling_rate,
            channels,
            subjects,
        };
        write_json(&staging.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    };
    match build() {
        Ok(m) => {
            if dir.exists() {
                fs::remove_dir(dir)?;
            }
            fs::rename(&staging, dir)?;
            Ok(m)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

/// Feature CSV of one subject: `trial_id,sample_idx,label,f0..f{D-1}`.
pub fn features_to_csv(rows: &[FeatureRow]) -> String {
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut s = String::from("trial_id,sample_idx,label");
    for i in 0..d {
        let _ = write!(s, ",f{i}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.trial_id, r.sample_idx, r.label);
        for v in &r.values {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Parses a feature CSV; the subject comes from the caller (one file per
/// subject) and the stimulus id is left empty.
pub fn features_from_csv(text: &str, subject_id: &str) -> Result<Vec<FeatureRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty feature file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[..3] != ["trial_id", "sample_idx", "label"] {
        return Err(Error::Format(format!(
            "unexpected feature header: {header}"
        )));
    }
    let d = cols.len() - 3;
    for (i, c) in cols[3..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Format(format!(
                "feature column {} is named {c}",
                i + 3
            )));
        }
    }
    let bad = |n: usize, what: &str| Error::Format(format!("feature line {n}: {what}"));
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().map(|(i, l)| (i + 2, l)) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != d + 3 {
            return Err(bad(n, &format!("{} fields, expected {}", f.len(), d + 3)));
        }
        let values = f[3..]
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| bad(n, &format!("bad value {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow {
            subject_id: subject_id.to_string(),
            trial_id: f[0].to_string(),
            stimulus_id: String::new(),
            sample_idx: f[1].parse().map_err(|_| bad(n, "bad sample index"))?,
            label: f[2].parse().map_err(|_| bad(n, "bad label"))?,
            values,
        });
    }
    Ok(rows)
}

/// Flat CSVs of an evaluation report, as `(file name, contents)`.
pub fn report_csvs(report: &EvalReport) -> Vec<(&'static str, String)> {
    let mut folds = String::from("method,fold,accuracy,best_val_retrieval_acc,error\n");
    let mut preds =
        String::from("method,fold,subject_id,trial_id,sample_idx,label,predicted,posterior\n");
    let mut conf = String::from("method,true_label,predicted,percent\n");
    let mut roc = String::from("method,fpr,tpr\n");
    let mut summary = String::from("method,mean_accuracy_pct,std_accuracy_pct,auc,chance_pct,chance_3sigma_pct,completed_folds,folds\n");
    for m in &report.methods {
        let name = serde_json::to_value(m.method)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        for f in &m.folds {
            let _ = writeln!(
                folds,
                "{name},{},{},{},{}",
                f.fold,
                f.accuracy.map_or(String::new(), |a| a.to_string()),
                f.contrastive
                    .as_ref()
                    .map_or(String::new(), |c| c.best_val_retrieval_acc.to_string()),
                f.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
            for p in &f.predictions {
                let post: Vec<String> = p.posterior.iter().map(f64::to_string).collect();
                let _ = writeln!(
                    preds,
                    "{name},{},{},{},{},{},{},{}",
                    f.fold,
                    p.subject_id,
                    p.trial_id,
                    p.sample_idx,
                    p.label,
                    p.predicted,
                    post.join(";")
                );
            }
        }
        for (t, row) in m.confusion_pct.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                let _ = writeln!(conf, "{name},{t},{p},{v}");
            }
        }
        if let Some(r) = &m.roc {
            for (x, y) in &r.points {
                let _ = writeln!(roc, "{name},{x},{y}");
            }
        }
        let _ = writeln!(
            summary,
            "{name},{},{},{},{},{},{},{}",
            m.mean_accuracy_pct,
            m.std_accuracy_pct,
            m.roc.as_ref().map_or(String::new(), |r| r.auc.to_string()),
            m.chance_pct,
            m.chance_3sigma_pct,
            m.completed_folds,
            m.folds.len()
        );
    }
    vec![
        ("summary.csv", summary),
        ("folds.csv", folds),
        ("predictions.csv", preds),
        ("confusion.csv", conf),
        ("roc.csv", roc),
    ]
}

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut s = String::from("count,fold,accuracy\n");
    for p in &report.points {
        for (i, a) in p.fold_accuracies.iter().enumerate() {
            let _ = writeln!(s, "{},{i},{a}", p.count);
        }
    }
    s
}

/// One row per embedded sample: `subject_id,trial_id,sample_idx,label,e0..`.
pub fn embeddings_csv(rows: &[FeatureRow]) -> String {
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut s = String::from("subject_id,trial_id,sample_idx,label");
    for i in 0..d {
        let _ = write!(s, ",e{i}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{}",
            r.subject_id, r.trial_id, r.sample_idx, r.label
        );
        for v in &r.values {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{gen_synthetic, SynthSpec};

    fn small() -> Vec<Recording> {
        gen_synthetic(&SynthSpec {
            n_subjects: 2,
            n_trials: 3,
            channels: 4,
            trial_len_s: 2.0,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn signal_bytes_are_le_f32_channel_major() {
        let t = Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let b = encode_signal(&t);
        assert_eq!(b.len(), 24);
        assert_eq!(&b[..4], &1.0f32.to_le_bytes());
        assert_eq!(&b[12..16], &(-1.0f32).to_le_bytes());
        assert_eq!(decode_signal(&b, 2, 3).unwrap(), t);
        assert!(matches!(decode_signal(&b, 2, 4), Err(Error::Data(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let recs = small();
        let m = write_dataset(&out, "tiny", &recs, None).unwrap();
        assert_eq!(m.subjects.len(), 2);
        let (m2, back) = load_dataset(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m, m2);
        for (a, b) in recs.iter().zip(&back) {
            for (ta, tb) in a.trials.iter().zip(&b.trials) {
                assert_eq!(ta.trial_id, tb.trial_id);
                for (x, y) in ta.signal.data().iter().zip(tb.signal.data()) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
        assert!(!dir.path().join("ds.partial").exists());
        // non-empty target refused
        assert!(matches!(
            write_dataset(&out, "tiny", &recs, None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn missing_or_short_signal_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        write_dataset(&out, "tiny", &small(), None).unwrap();
        let f = out.join("signals/sub01/sub01-t00.f32");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
        let e = load_dataset(&out.join(MANIFEST_FILE))
            .unwrap_err()
            .to_string();
        assert!(e.contains("sub01-t00.f32"), "{e}");
        fs::remove_file(&f).unwrap();
        let e = load_dataset(&out.join(MANIFEST_FILE))
            .unwrap_err()
            .to_string();
        assert!(e.contains("sub01-t00.f32"), "{e}");
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let text = r#"{"name":"x","sampling_rate":100.0,"channels":[],"subjects":[],"extra":1}"#;
        assert!(serde_json::from_str::<DatasetManifest>(text).is_err());
    }

    #[test]
    fn feature_csv_round_trip_is_exact() {
        let rows = vec![
            FeatureRow {
                subject_id: "s".into(),
                trial_id: "t0".into(),
                stimulus_id: String::new(),
                sample_idx: 0,
                label: 1,
                values: vec![0.1, -1e-300, std::f64::consts::PI],
            },
            FeatureRow {
                subject_id: "s".into(),
                trial_id: "t0".into(),
                stimulus_id: String::new(),
                sample_idx: 1,
                label: 1,
                values: vec![1.0 / 3.0, 2.5e10, -0.0],
            },
        ];
        let csv = features_to_csv(&rows);
        assert!(csv.starts_with("trial_id,sample_idx,label,f0,f1,f2\n"));
        assert_eq!(features_from_csv(&csv, "s").unwrap(), rows);
        assert!(features_from_csv("a,b\n", "s").is_err());
        assert!(features_from_csv("trial_id,sample_idx,label,f0\nt,0,1\n", "s").is_err());
    }

    #[test]
    fn hash_depends_on_content() {
        let a = config_hash(&vec![1, 2]).unwrap();
        assert_eq!(a, config_hash(&vec![1, 2]).unwrap());
        assert_ne!(a, config_hash(&vec![2, 1]).unwrap());
        assert_eq!(a.len(), 12);
    }
}
