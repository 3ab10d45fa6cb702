//! Inter-subject contrastive minibatches.
//!
//! A minibatch pairs two subjects. For every trial (stimulus) one window is
//! drawn, and the same window position is cut from both subjects, so
//! `samples[i]` and `samples[n + i]` saw the identical stretch of stimulus.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::{Scalar, Tensor};
use crate::preprocess::{slice_time, window_offsets};
use crate::recording::Recording;

#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub subjects: (String, String),
    /// `2N` samples of shape `[M, T]`: subject A in trial order, then B.
    pub samples: Vec<Tensor<f64>>,
    /// Window start per trial, shared by both subjects.
    pub offsets: Vec<usize>,
    pub stimulus_ids: Vec<String>,
}

impl Minibatch {
    /// Number of trials `N`.
    pub fn n(&self) -> usize {
        self.offsets.len()
    }

    /// Subject group per sample: `0` for A, `1` for B.
    pub fn groups(&self) -> Vec<usize> {
        let n = self.n();
        (0..2 * n).map(|i| usize::from(i >= n)).collect()
    }

    /// Samples stacked into a `[2N, M, T]` tensor.
    pub fn stacked<T: Scalar>(&self) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<f64>> = self.samples.iter().collect();
        Ok(Tensor::stack(&refs)?.cast())
    }
}

/// All unordered subject pairs, as index pairs `(i, j)` with `i < j`, in a
/// seeded random order.
pub fn enumerate_subject_pairs<R: Rng + ?Sized>(
    n_subjects: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if n_subjects < 2 {
        return Err(Error::Config(format!(
            "need at least 2 subjects to form pairs, got {n_subjects}"
        )));
    }
    let mut pairs: Vec<(usize, usize)> = (0..n_subjects)
        .flat_map(|i| (i + 1..n_subjects).map(move |j| (i, j)))
        .collect();
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Draws one minibatch from two subjects.
///
/// Trials are matched by stimulus id in the order of `a`'s trials. Window
/// starts lie on a grid of half the sample length.
pub fn draw_minibatch<R: Rng + ?Sized>(
    a: &Recording,
    b: &Recording,
    sample_len: usize,
    rng: &mut R,
) -> Result<Minibatch> {
    if a.trials.len() != b.trials.len() {
        return Err(Error::Data(format!(
            "subjects {} and {} have {} and {} trials",
            a.subject_id,
            b.subject_id,
            a.trials.len(),
            b.trials.len()
        )));
    }
    if a.n_channels() != b.n_channels() {
        return Err(Error::Data(format!(
            "subjects {} and {} have {} and {} channels",
            a.subject_id,
            b.subject_id,
            a.n_channels(),
            b.n_channels()
        )));
    }
    let step = (sample_len / 2).max(1);
    let n = a.trials.len();
    let mut samples_a = Vec::with_capacity(n);
    let mut samples_b = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    let mut stimulus_ids = Vec::with_capacity(n);
    for ta in &a.trials {
        let tb = b.trial_for_stimulus(&ta.stimulus_id).ok_or_else(|| {
            Error::Data(format!(
                "stimulus {} of subject {} missing for subject {}",
                ta.stimulus_id, a.subject_id, b.subject_id
            ))
        })?;
        let len = ta.n_samples().min(tb.n_samples());
        let grid = window_offsets(len, sample_len, step).map_err(|_| {
            Error::Data(format!(
                "stimulus {}: trial of {len} points shorter than sample of {sample_len}",
                ta.stimulus_id
            ))
        })?;
        let off = grid[rng.random_range(0..grid.len())];
        samples_a.push(slice_time(&ta.signal, off, sample_len)?);
        samples_b.push(slice_time(&tb.signal, off, sample_len)?);
        offsets.push(off);
        stimulus_ids.push(ta.stimulus_id.clone());
    }
    samples_a.extend(samples_b);
    Ok(Minibatch {
        subjects: (a.subject_id.clone(), b.subject_id.clone()),
        samples: samples_a,
        offsets,
        stimulus_ids,
    })
}

/// One epoch: a minibatch for every subject pair, in seeded order.
pub fn epoch<R: Rng + ?Sized>(
    recordings: &[Recording],
    sample_len: usize,
    rng: &mut R,
) -> Result<Vec<Minibatch>> {
    let pairs = enumerate_subject_pairs(recordings.len(), rng)?;
    pairs
        .into_iter()
        .map(|(i, j)| draw_minibatch(&recordings[i], &recordings[j], sample_len, rng))
        .collect()
}

/// `C(n, 2)`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}
