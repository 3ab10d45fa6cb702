//! Deterministic signal conditioning and the normalization schemes.

mod filter;
pub mod montage;
mod normalize;
mod reference;
mod repair;
mod segment;

pub use filter::{bandpass, BandPass};
pub use normalize::{feature_stats, stratified_normalize, zscore, AdaptiveNormState, NORM_EPS};
pub use reference::{rereference, Reference};
pub use repair::{noisy_channels, repair_outliers, RepairReport, JUMP_THRESHOLD};
pub use segment::{seconds_to_samples, segment, slice_time, window_offsets};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::recording::Recording;

/// Settings of the full conditioning chain applied to a recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub reference: Option<Reference>,
    pub jump_threshold: f64,
    /// Keep only the final seconds of each trial.
    pub keep_last_seconds: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_low_hz: 4.0,
            band_high_hz: 47.0,
            reference: None,
            jump_threshold: JUMP_THRESHOLD,
            keep_last_seconds: None,
        }
    }
}

/// Per-trial repair outcome of [`preprocess_recording`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialReport {
    pub subject_id: String,
    pub trial_id: String,
    pub repair: RepairReport,
}

/// Re-reference, repair, band-pass and optionally truncate every trial.
pub fn preprocess_recording(
    rec: &Recording,
    cfg: &PreprocessConfig,
    positions: Option<&[[f64; 3]]>,
) -> Result<(Recording, Vec<TrialReport>)> {
    let filter = BandPass::new(cfg.band_low_hz, cfg.band_high_hz, rec.sampling_rate)?;
    let mut out = rec.clone();
    let mut reports = Vec::with_capacity(rec.trials.len());
    for trial in &mut out.trials {
        let mut sig = trial.signal.clone();
        if let Some(r) = &cfg.reference {
            sig = rereference(&sig, &rec.channel_names, r)?;
        }
        let (repaired, repair) = repair_outliers(&sig, positions, cfg.jump_threshold)?;
        sig = filter.apply(&repaired)?;
        if let Some(secs) = cfg.keep_last_seconds {
            let keep = seconds_to_samples(secs, rec.sampling_rate).min(sig.shape()[1]);
            sig = slice_time(&sig, sig.shape()[1] - keep, keep)?;
        }
        trial.signal = sig;
        reports.push(TrialReport {
            subject_id: rec.subject_id.clone(),
            trial_id: trial.trial_id.clone(),
            repair,
        });
    }
    Ok((out, reports))
}
