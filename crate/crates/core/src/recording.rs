use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// One stimulus presentation: a `[M, T]` signal with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub trial_id: String,
    pub stimulus_id: String,
    pub label: usize,
    pub signal: Tensor<f64>,
}

impl Trial {
    pub fn n_samples(&self) -> usize {
        self.signal.shape()[1]
    }
}

/// One subject's session.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub sampling_rate: f64,
    pub channel_names: Vec<String>,
    pub trials: Vec<Trial>,
}

impl Recording {
    /// Validates channel names and trial shapes.
    pub fn new(
        subject_id: impl Into<String>,
        sampling_rate: f64,
        channel_names: Vec<String>,
        trials: Vec<Trial>,
    ) -> Result<Self> {
        let rec = Self {
            subject_id: subject_id.into(),
            sampling_rate,
            channel_names,
            trials,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_rate > 0.0) {
            return Err(Error::Data(format!(
                "subject {}: sampling rate {} must be positive",
                self.subject_id, self.sampling_rate
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.channel_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Data(format!(
                    "subject {}: duplicate channel name {name}",
                    self.subject_id
                )));
            }
        }
        let m = self.channel_names.len();
        for tr in &self.trials {
            let s = tr.signal.shape();
            if s.len() != 2 || s[0] != m {
                return Err(Error::Data(format!(
                    "subject {} trial {}: signal shape {s:?} does not have {m} channel rows",
                    self.subject_id, tr.trial_id
                )));
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn trial_for_stimulus(&self, stimulus_id: &str) -> Option<&Trial> {
        self.trials.iter().find(|t| t.stimulus_id == stimulus_id)
    }

    /// Same subject restricted to the trials whose stimulus is in `keep`.
    pub fn with_stimuli(&self, keep: &HashSet<String>) -> Recording {
        Recording {
            subject_id: self.subject_id.clone(),
            sampling_rate: self.sampling_rate,
            channel_names: self.channel_names.clone(),
            trials: self
                .trials
                .iter()
                .filter(|t| keep.contains(&t.stimulus_id))
                .cloned()
                .collect(),
        }
    }
}
