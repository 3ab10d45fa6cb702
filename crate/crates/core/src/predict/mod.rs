//! Prediction phase: DE features (trained or raw), LDS smoothing,
//! normalization and the MLP classifier.

mod classifier;
mod de;
mod lds;

pub use classifier::{
    argmax, predict_labels, train_classifier, ClassifierConfig, ClassifierParams, ClassifierReport,
    DenseLayer, GridPoint, WEIGHT_DECAY_GRID,
};
pub use de::{
    differential_entropy, raw_de, raw_de_windows, trained_de, Band, DE_BANDS, DE_VAR_FLOOR,
};
pub use lds::lds_smooth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Scalar;
use crate::network::EncoderParams;
use crate::preprocess::{feature_stats, seconds_to_samples, segment, zscore, AdaptiveNormState};
use crate::recording::Recording;

/// One prediction sample's feature vector and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub subject_id: String,
    pub trial_id: String,
    pub stimulus_id: String,
    pub sample_idx: usize,
    pub label: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Prediction sample length; samples do not overlap.
    pub sample_len_s: f64,
    /// Process-to-observation variance ratio of the smoother; `None` skips
    /// smoothing.
    pub lds_q: Option<f64>,
    /// Decay of the test-time adaptive normalization.
    pub eta: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_len_s: 1.0,
            lds_q: Some(0.1),
            eta: 0.99,
        }
    }
}

/// Source of the per-sample DE vector.
#[derive(Clone, Copy, Debug)]
pub enum Extractor<'a, T> {
    /// Frozen base encoder: `K2 * K1` features.
    Encoder(&'a EncoderParams<T>),
    /// Four classic bands per channel: `4 * M` features.
    RawDe,
}

/// DE features of every sample of every trial, smoothed within each trial.
pub fn extract_features<T: Scalar>(
    rec: &Recording,
    extractor: Extractor<'_, T>,
    cfg: &FeatureConfig,
) -> Result<Vec<FeatureRow>> {
    let fs = rec.sampling_rate;
    let len = seconds_to_samples(cfg.sample_len_s, fs);
    let mut rows = Vec::new();
    for trial in &rec.trials {
        let seq = match extractor {
            Extractor::Encoder(enc) => segment(trial, fs, cfg.sample_len_s, cfg.sample_len_s)?
                .iter()
                .map(|x| trained_de(x, enc))
                .collect::<Result<Vec<_>>>()?,
            Extractor::RawDe => raw_de_windows(&trial.signal, fs, len)?,
        };
        let seq = match cfg.lds_q {
            Some(q) => lds_smooth(&seq, q)?,
            None => seq,
        };
        rows.extend(seq.into_iter().enumerate().map(|(i, values)| FeatureRow {
            subject_id: rec.subject_id.clone(),
            trial_id: trial.trial_id.clone(),
            stimulus_id: trial.stimulus_id.clone(),
            sample_idx: i,
            label: trial.label,
            values,
        }));
    }
    Ok(rows)
}

/// Training statistics of the static z-score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Z-scores `rows` in place with their own statistics and returns them.
pub fn normalize_training(rows: &mut [FeatureRow]) -> Result<FeatureStats> {
    let values: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
    let (mean, variance) = feature_stats(&values)?;
    for r in rows.iter_mut() {
        r.values = zscore(&r.values, &mean, &variance);
    }
    Ok(FeatureStats { mean, variance })
}

/// Adaptive normalization of test rows. Every subject is its own stream,
/// started from the training statistics and fed in row order.
pub fn normalize_test(rows: &mut [FeatureRow], stats: &FeatureStats, eta: f64) -> Result<()> {
    let mut states: HashMap<String, AdaptiveNormState> = HashMap::new();
    for r in rows.iter_mut() {
        if !states.contains_key(&r.subject_id) {
            let s = AdaptiveNormState::new(stats.mean.clone(), stats.variance.clone(), eta)?;
            states.insert(r.subject_id.clone(), s);
        }
        let state = states.get_mut(&r.subject_id).expect("inserted above");
        r.values = state.normalize(&r.values)?;
    }
    Ok(())
}

/// Flags the rows of the last `frac` of every subject's trials (at least
/// one trial, never all of them when a subject has two or more).
pub fn inner_validation_mask(rows: &[FeatureRow], frac: f64) -> Vec<bool> {
    let mut trials: HashMap<&str, Vec<&str>> = HashMap::new();
    for r in rows {
        let t = trials.entry(&r.subject_id).or_default();
        if !t.contains(&r.trial_id.as_str()) {
            t.push(&r.trial_id);
        }
    }
    let held: HashMap<&str, Vec<&str>> = trials
        .iter()
        .map(|(s, t)| {
            let k = if t.len() < 2 || frac <= 0.0 {
                0
            } else {
                ((t.len() as f64 * frac).round() as usize).clamp(1, t.len() - 1)
            };
            (*s, t[t.len() - k..].to_vec())
        })
        .collect();
    rows.iter()
        .map(|r| held[r.subject_id.as_str()].contains(&r.trial_id.as_str()))
        .collect()
}

/// Feature matrix and labels of `rows`.
pub fn matrix(rows: &[FeatureRow]) -> (Vec<Vec<f64>>, Vec<usize>) {
    rows.iter().map(|r| (r.values.clone(), r.label)).unzip()
}

/// Number of classes implied by the labels of `rows`.
pub fn class_count(rows: &[FeatureRow]) -> Result<usize> {
    rows.iter()
        .map(|r| r.label + 1)
        .max()
        .map(|k| k.max(2))
        .ok_or_else(|| Error::Data("no feature rows".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Tensor;
    use crate::network::{Hyperparams, ModelParams};
    use crate::recording::Trial;
    use crate::seeded_rng;

    fn rec() -> Recording {
        let trials = (0..5)
            .map(|i| Trial {
                trial_id: format!("t{i}"),
                stimulus_id: format!("s{i}"),
                label: i % 2,
                signal: Tensor::from_f64(
                    &[3, 400],
                    &(0..1200)
                        .map(|k| ((k * (i + 3)) as f64 * 0.37).sin())
                        .collect::<Vec<_>>(),
                )
                .unwrap(),
            })
            .collect();
        Recording::new("A", 100.0, vec!["a".into(), "b".into(), "c".into()], trials).unwrap()
    }

    #[test]
    fn features_per_sample() {
        let hp = Hyperparams {
            k1: 4,
            k2: 3,
            p1: 11,
            ..Hyperparams::default()
        };
        let p = ModelParams::<f32>::init(hp.architecture(3), &mut seeded_rng(0)).unwrap();
        let cfg = FeatureConfig::default();
        let rows = extract_features(&rec(), Extractor::Encoder(&p.encoder), &cfg).unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(rows[0].values.len(), 12);
        assert_eq!(rows[5].trial_id, "t1");
        assert_eq!(rows[5].sample_idx, 1);
        let raw = extract_features::<f32>(&rec(), Extractor::RawDe, &cfg).unwrap();
        assert_eq!(raw[0].values.len(), 12);
    }

    #[test]
    fn eta_one_adaptive_equals_static() {
        let cfg = FeatureConfig::default();
        let mut train = extract_features::<f64>(&rec(), Extractor::RawDe, &cfg).unwrap();
        let raw_train = train.clone();
        let stats = normalize_training(&mut train).unwrap();
        let mut test = raw_train.clone();
        normalize_test(&mut test, &stats, 1.0).unwrap();
        for (a, b) in train.iter().zip(&test) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn inner_mask_takes_last_trials() {
        let cfg = FeatureConfig::default();
        let rows = extract_features::<f64>(&rec(), Extractor::RawDe, &cfg).unwrap();
        let m = inner_validation_mask(&rows, 0.2);
        let held: Vec<&str> = rows
            .iter()
            .zip(&m)
            .filter(|(_, &f)| f)
            .map(|(r, _)| r.trial_id.as_str())
            .collect();
        assert_eq!(held, vec!["t4"; 4]);
        assert!(inner_validation_mask(&rows, 0.0).iter().all(|&f| !f));
    }
}
