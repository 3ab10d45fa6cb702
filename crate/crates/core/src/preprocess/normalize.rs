use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ops, Tensor};
use crate::sampler::Minibatch;

/// Variance guard used by every z-score in the pipeline.
pub const NORM_EPS: f64 = 1e-8;

/// Z-scores each channel over the concatenation of one subject's samples
/// in the minibatch. Zero-variance groups come out as zeros.
pub fn stratified_normalize(batch: &Minibatch) -> Result<Minibatch> {
    let x = batch.stacked::<f64>()?;
    let (y, _) = ops::stratified_norm(&x, &batch.groups(), NORM_EPS)?;
    let per = y.len() / batch.samples.len().max(1);
    let shape = batch.samples[0].shape().to_vec();
    let samples = y
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::new(shape.clone(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Minibatch {
        samples,
        ..batch.clone()
    })
}

/// Per-feature mean and population variance of `rows`.
pub fn feature_stats(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = rows.first() else {
        return Err(Error::Data("cannot compute statistics of zero rows".into()));
    };
    let d = first.len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        if r.len() != d {
            return Err(Error::Parameter(format!(
                "feature row of length {} among rows of length {d}",
                r.len()
            )));
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    for s in &mut var {
        *s /= n;
    }
    Ok((mean, var))
}

/// Static z-score under fixed statistics.
pub fn zscore(x: &[f64], mean: &[f64], var: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((v, m), s)| (v - m) / (s + NORM_EPS).sqrt())
        .collect()
}

/// Test-time normalizer whose statistics drift from the training values
/// toward the incoming stream with decay `eta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveNormState {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub eta: f64,
    pub samples_seen: usize,
}

impl AdaptiveNormState {
    pub const DEFAULT_ETA: f64 = 0.99;

    pub fn new(mean: Vec<f64>, variance: Vec<f64>, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::Parameter(format!("decay {eta} outside (0, 1]")));
        }
        if mean.len() != variance.len() {
            return Err(Error::Parameter(format!(
                "{} means but {} variances",
                mean.len(),
                variance.len()
            )));
        }
        if let Some(v) = variance.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Parameter(format!("negative variance {v}")));
        }
        Ok(Self {
            mean,
            variance,
            eta,
            samples_seen: 0,
        })
    }

    pub fn from_training(rows: &[Vec<f64>], eta: f64) -> Result<Self> {
        let (mean, var) = feature_stats(rows)?;
        Self::new(mean, var, eta)
    }

    /// Normalizes `x` with the current state, then folds `x` into it:
    /// `m <- eta m + (1 - eta) x`, `s2 <- eta s2 + (1 - eta) (x - m_prev)^2`.
    pub fn normalize(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Parameter(format!(
                "feature vector of length {} for a normalizer of dimension {}",
                x.len(),
                self.mean.len()
            )));
        }
        let out = zscore(x, &self.mean, &self.variance);
        let (a, b) = (self.eta, 1.0 - self.eta);
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.variance).zip(x) {
            let d = v - *m;
            *m = a * *m + b * v;
            *s = a * *s + b * d * d;
        }
        self.samples_seen += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Minibatch;

    fn batch(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Minibatch {
        let t = a[0].len();
        let mk = |v: Vec<f64>| Tensor::from_f64(&[1, t], &v).unwrap();
        let n = a.len();
        let mut samples: Vec<Tensor<f64>> = a.into_iter().map(mk).collect();
        samples.extend(b.into_iter().map(mk));
        Minibatch {
            subjects: ("a".into(), "b".into()),
            samples,
            offsets: vec![0; n],
            stimulus_ids: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    #[test]
    fn stratified_hand_example() {
        let mb = batch(
            vec![vec![1., 2.], vec![3., 4.]],
            vec![vec![0., 0.], vec![0., 0.]],
        );
        let y = stratified_normalize(&mb).unwrap();
        let got: Vec<f64> = y.samples[..2]
            .iter()
            .flat_map(|s| s.data().to_vec())
            .collect();
        for (g, w) in got.iter().zip([-1.342, -0.447, 0.447, 1.342]) {
            assert!((g - w).abs() < 1e-3, "{got:?}");
        }
        // constant group maps to zeros
        assert!(y.samples[2..]
            .iter()
            .all(|s| s.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn adaptive_first_output_is_training_zscore() {
        let mut st = AdaptiveNormState::new(vec![1.0, -2.0], vec![4.0, 0.25], 0.99).unwrap();
        let y = st.normalize(&[3.0, -1.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-8 && (y[1] - 2.0).abs() < 1e-7);
        assert_eq!(st.samples_seen, 1);
    }

    #[test]
    fn adaptive_mean_tracks_constant_stream() {
        let mut st = AdaptiveNormState::new(vec![0.0], vec![1.0], 0.99).unwrap();
        for _ in 0..1000 {
            st.normalize(&[5.0]).unwrap();
        }
        // geometric decay: 5 * 0.99^1000
        assert!((st.mean[0] - 5.0).abs() < 1e-3);
        assert!((st.mean[0] - 5.0 * (1.0 - 0.99f64.powi(1000))).abs() < 1e-9);
    }

    #[test]
    fn adaptive_eta_one_is_frozen() {
        let mut st = AdaptiveNormState::new(vec![0.5], vec![2.0], 1.0).unwrap();
        let before = st.clone();
        for v in [3.0, -7.0, 11.0] {
            let y = st.normalize(&[v]).unwrap();
            assert_eq!(y, zscore(&[v], &before.mean, &before.variance));
        }
        assert_eq!(st.mean, before.mean);
        assert_eq!(st.variance, before.variance);
    }

    #[test]
    fn adaptive_rejects_bad_input() {
        assert!(AdaptiveNormState::new(vec![0.0], vec![1.0], 0.0).is_err());
        assert!(AdaptiveNormState::new(vec![0.0], vec![1.0], 1.5).is_err());
        let mut st = AdaptiveNormState::new(vec![0.0], vec![1.0], 0.9).unwrap();
        assert!(matches!(
            st.normalize(&[1.0, 2.0]),
            Err(Error::Parameter(_))
        ));
    }
}
