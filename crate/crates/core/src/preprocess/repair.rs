//! Automatic denoising: noisy-channel interpolation and jump repair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// Points beyond this multiple of the trial's median absolute value are
/// outliers.
pub const OUTLIER_FACTOR: f64 = 3.0;
/// A channel with more than this fraction of outlier points is noisy.
pub const NOISY_FRACTION: f64 = 0.30;
/// Default jump threshold (signal units, typically microvolts).
pub const JUMP_THRESHOLD: f64 = 100.0;
const NEIGHBOURS: usize = 3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    /// Channels replaced by the mean of their nearest clean neighbours.
    pub interpolated: Vec<usize>,
    /// Number of jump-repaired points per channel.
    pub jump_repairs: Vec<usize>,
}

impl RepairReport {
    pub fn total_jump_repairs(&self) -> usize {
        self.jump_repairs.iter().sum()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Indices of channels whose outlier fraction exceeds [`NOISY_FRACTION`].
pub fn noisy_channels(signal: &Tensor<f64>) -> Vec<usize> {
    let t = signal.shape()[1];
    if t == 0 {
        return Vec::new();
    }
    let limit = OUTLIER_FACTOR * median(signal.data().iter().map(|v| v.abs()).collect());
    signal
        .data()
        .chunks_exact(t)
        .enumerate()
        .filter(|(_, row)| {
            let n = row.iter().filter(|v| v.abs() > limit).count();
            n as f64 / t as f64 > NOISY_FRACTION
        })
        .map(|(i, _)| i)
        .collect()
}

/// Interpolates noisy channels from their three nearest clean channels,
/// then, per channel and left to right, replaces any point whose absolute
/// value exceeds the (already repaired) previous point's by more than
/// `jump_threshold` with that previous value.
pub fn repair_outliers(
    signal: &Tensor<f64>,
    positions: Option<&[[f64; 3]]>,
    jump_threshold: f64,
) -> Result<(Tensor<f64>, RepairReport)> {
    if signal.rank() != 2 {
        return Err(Error::dim(
            "repair_outliers",
            format!("signal must be [M, T], got {:?}", signal.shape()),
        ));
    }
    let (m, t) = (signal.shape()[0], signal.shape()[1]);
    let mut out = signal.clone();
    let noisy = noisy_channels(signal);

    if !noisy.is_empty() {
        let clean: Vec<usize> = (0..m).filter(|c| !noisy.contains(c)).collect();
        if m < NEIGHBOURS + 1 || clean.len() < NEIGHBOURS {
            return Err(Error::Config(format!(
                "channels {noisy:?} need interpolation but only {} clean channels of {m} remain",
                clean.len()
            )));
        }
        let pos = positions.ok_or_else(|| {
            Error::Config("noisy channels found but no electrode positions were given".into())
        })?;
        if pos.len() != m {
            return Err(Error::Config(format!(
                "{} electrode positions for {m} channels",
                pos.len()
            )));
        }
        let src = signal.data();
        for &c in &noisy {
            let mut near = clean.clone();
            near.sort_by(|&a, &b| dist2(&pos[c], &pos[a]).total_cmp(&dist2(&pos[c], &pos[b])));
            near.truncate(NEIGHBOURS);
            let row = &mut out.data_mut()[c * t..(c + 1) * t];
            for (i, v) in row.iter_mut().enumerate() {
                *v = near.iter().map(|&n| src[n * t + i]).sum::<f64>() / NEIGHBOURS as f64;
            }
        }
    }

    let mut jump_repairs = vec![0usize; m];
    if t > 0 {
        for (c, row) in out.data_mut().chunks_exact_mut(t).enumerate() {
            for i in 1..t {
                if row[i].abs() - row[i - 1].abs() > jump_threshold {
                    row[i] = row[i - 1];
                    jump_repairs[c] += 1;
                }
            }
        }
    }
    Ok((
        out,
        RepairReport {
            interpolated: noisy,
            jump_repairs,
        },
    ))
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn jump_rule_uses_repaired_predecessor() {
        let x = Tensor::from_f64(&[1, 4], &[0., 50., 200., 60.]).unwrap();
        let (y, rep) = repair_outliers(&x, None, JUMP_THRESHOLD).unwrap();
        assert_eq!(y.data(), &[0., 50., 50., 60.]);
        assert_eq!(rep.jump_repairs, vec![1]);
    }

    #[test]
    fn clean_channel_unchanged() {
        let x = Tensor::from_f64(&[2, 5], &[1., -2., 3., -1., 2., 0.5, 1., -1., 2., 1.]).unwrap();
        let (y, rep) = repair_outliers(&x, None, JUMP_THRESHOLD).unwrap();
        assert_eq!(y, x);
        assert!(rep.interpolated.is_empty());
        assert_eq!(rep.total_jump_repairs(), 0);
    }

    #[test]
    fn noisy_channel_replaced_by_neighbour_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = 200;
        let mut v = vec![0.0; 4 * t];
        for c in 1..4 {
            for i in 0..t {
                v[c * t + i] = rng.random_range(-10.0..10.0);
            }
        }
        for (i, x) in v.iter_mut().take(t).enumerate() {
            // 90% of points far above the trial median, no large jumps
            *x = if i % 10 == 0 { 1.0 } else { 80.0 };
        }
        let x = Tensor::from_f64(&[4, t], &v).unwrap();
        let pos = [[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [0., 0., 1.]];
        let (y, rep) = repair_outliers(&x, Some(&pos), JUMP_THRESHOLD).unwrap();
        assert_eq!(rep.interpolated, vec![0]);
        for i in 0..t {
            let want = (v[t + i] + v[2 * t + i] + v[3 * t + i]) / 3.0;
            assert!((y.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_needs_enough_channels_and_positions() {
        let mut v = vec![0.5; 3 * 10];
        for x in v.iter_mut().take(10) {
            *x = 90.0;
        }
        let x = Tensor::from_f64(&[3, 10], &v).unwrap();
        let pos = [[0., 0., 0.]; 3];
        assert!(matches!(
            repair_outliers(&x, Some(&pos), 100.0),
            Err(Error::Config(_))
        ));

        let mut v = vec![0.5; 5 * 10];
        for x in v.iter_mut().take(10) {
            *x = 90.0;
        }
        let x = Tensor::from_f64(&[5, 10], &v).unwrap();
        assert!(matches!(
            repair_outliers(&x, None, 100.0),
            Err(Error::Config(_))
        ));
    }
}
