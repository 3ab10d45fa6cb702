use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::recording::Trial;

/// Start offsets of every `len`-point window stepping by `step` that fits
/// inside `total` points.
pub fn window_offsets(total: usize, len: usize, step: usize) -> Result<Vec<usize>> {
    if len == 0 || step == 0 {
        return Err(Error::Parameter(format!(
            "window length {len} and step {step} must be positive"
        )));
    }
    if len > total {
        return Err(Error::Parameter(format!(
            "window of {len} points longer than trial of {total}"
        )));
    }
    Ok((0..=(total - len) / step).map(|k| k * step).collect())
}

/// Copies columns `offset..offset + len` of a `[M, T]` signal.
pub fn slice_time(signal: &Tensor<f64>, offset: usize, len: usize) -> Result<Tensor<f64>> {
    let (m, t) = (signal.shape()[0], signal.shape()[1]);
    if offset + len > t {
        return Err(Error::dim(
            "slice_time",
            format!(
                "window {offset}..{} beyond length {t} (axis 1)",
                offset + len
            ),
        ));
    }
    let mut out = Vec::with_capacity(m * len);
    for row in signal.data().chunks_exact(t) {
        out.extend_from_slice(&row[offset..offset + len]);
    }
    Tensor::new(vec![m, len], out)
}

/// Converts seconds to a whole number of samples.
pub fn seconds_to_samples(seconds: f64, fs: f64) -> usize {
    (seconds * fs).round() as usize
}

/// Cuts a trial into windows of `sample_len_s` seconds every `step_s`.
pub fn segment(trial: &Trial, fs: f64, sample_len_s: f64, step_s: f64) -> Result<Vec<Tensor<f64>>> {
    let len = seconds_to_samples(sample_len_s, fs);
    let step = seconds_to_samples(step_s, fs);
    window_offsets(trial.n_samples(), len, step)?
        .into_iter()
        .map(|o| slice_time(&trial.signal, o, len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(t: usize) -> Trial {
        Trial {
            trial_id: "t".into(),
            stimulus_id: "s".into(),
            label: 0,
            signal: Tensor::zeros(&[2, t]),
        }
    }

    #[test]
    fn thirty_second_trial_gives_eleven_windows() {
        let w = segment(&trial(7500), 250.0, 5.0, 2.5).unwrap();
        assert_eq!(w.len(), 11);
        assert_eq!(w[0].shape(), &[2, 1250]);
    }

    #[test]
    fn offsets_formula() {
        let o = window_offsets(7500, 1250, 625).unwrap();
        assert_eq!(o.len(), (7500 - 1250) / 625 + 1);
        assert_eq!(o.first(), Some(&0));
        assert_eq!(o.last(), Some(&6250));
    }

    #[test]
    fn full_length_sample_is_single_window() {
        assert_eq!(segment(&trial(500), 100.0, 5.0, 2.5).unwrap().len(), 1);
    }

    #[test]
    fn sample_longer_than_trial_rejected() {
        assert!(matches!(
            segment(&trial(400), 100.0, 5.0, 2.5),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn slice_copies_columns() {
        let s = Tensor::from_f64(&[2, 4], &[0., 1., 2., 3., 10., 11., 12., 13.]).unwrap();
        assert_eq!(slice_time(&s, 1, 2).unwrap().data(), &[1., 2., 11., 12.]);
    }
}
