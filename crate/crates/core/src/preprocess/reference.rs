use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// Re-referencing scheme.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Subtract the per-time-point mean over all channels.
    Average,
    /// Subtract the mean of two named channels (usually the mastoids).
    Mastoids(String, String),
}

pub fn rereference(
    signal: &Tensor<f64>,
    channels: &[String],
    mode: &Reference,
) -> Result<Tensor<f64>> {
    if signal.rank() != 2 || signal.shape()[0] != channels.len() {
        return Err(Error::dim(
            "rereference",
            format!(
                "signal {:?} does not have {} channel rows",
                signal.shape(),
                channels.len()
            ),
        ));
    }
    let (m, t) = (signal.shape()[0], signal.shape()[1]);
    let x = signal.data();
    let reference: Vec<f64> = match mode {
        Reference::Average => (0..t)
            .map(|i| (0..m).map(|c| x[c * t + i]).sum::<f64>() / m as f64)
            .collect(),
        Reference::Mastoids(a, b) => {
            let find = |name: &str| {
                channels
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Parameter(format!("reference channel {name} not found")))
            };
            let (ia, ib) = (find(a)?, find(b)?);
            (0..t)
                .map(|i| 0.5 * (x[ia * t + i] + x[ib * t + i]))
                .collect()
        }
    };
    let mut out = signal.clone();
    for row in out.data_mut().chunks_exact_mut(t.max(1)) {
        for (v, r) in row.iter_mut().zip(&reference) {
            *v -= r;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("C{i}")).collect()
    }

    #[test]
    fn average_two_channels() {
        let x = Tensor::from_f64(&[2, 3], &[1., 1., 1., 3., 3., 3.]).unwrap();
        let y = rereference(&x, &names(2), &Reference::Average).unwrap();
        assert_eq!(y.data(), &[-1., -1., -1., 1., 1., 1.]);
    }

    #[test]
    fn average_random_has_zero_column_sums() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f64> = (0..400).map(|_| rng.random_range(-50.0..50.0)).collect();
        let y = rereference(
            &Tensor::from_f64(&[4, 100], &v).unwrap(),
            &names(4),
            &Reference::Average,
        )
        .unwrap();
        for i in 0..100 {
            let s: f64 = (0..4).map(|c| y.data()[c * 100 + i]).sum();
            assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn mastoids_equal_to_signal_cancel_it() {
        let x = Tensor::from_f64(&[3, 2], &[5., 6., 5., 6., 1., 2.]).unwrap();
        let mode = Reference::Mastoids("C0".into(), "C1".into());
        let y = rereference(&x, &names(3), &mode).unwrap();
        assert_eq!(&y.data()[..4], &[0., 0., 0., 0.]);
        assert_eq!(&y.data()[4..], &[-4., -4.]);
    }

    #[test]
    fn missing_reference_channel() {
        let mode = Reference::Mastoids("A1".into(), "A2".into());
        let err = rereference(&Tensor::zeros(&[2, 4]), &names(2), &mode);
        assert!(matches!(err, Err(Error::Parameter(_))));
    }
}
