//! Differential-entropy features, through the frozen encoder or from
//! band-passed raw channels.

use crate::error::{Error, Result};
use crate::kernel::{Scalar, Tensor};
use crate::network::EncoderParams;
use crate::preprocess::{window_offsets, BandPass};

/// Variance floor inside the logarithm.
pub const DE_VAR_FLOOR: f64 = 1e-12;

/// `½ ln(2πe σ²)` in nats.
pub fn differential_entropy(variance: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * variance.max(DE_VAR_FLOOR)).ln()
}

/// Population variance of every `len`-long row of `data`, as DE.
fn row_de<T: Scalar>(data: &[T], len: usize) -> Vec<f64> {
    data.chunks_exact(len)
        .map(|row| {
            let n = len as f64;
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            differential_entropy(var)
        })
        .collect()
}

/// DE of every latent map of the frozen encoder for one `[M, T']` sample,
/// flattened k2-major: index `k2 * K1 + k1`.
pub fn trained_de<T: Scalar>(x: &Tensor<f64>, encoder: &EncoderParams<T>) -> Result<Vec<f64>> {
    let p1 = encoder.temporal.shape()[1];
    let t = x.shape().last().copied().unwrap_or(0);
    if x.rank() != 2 || t < p1.max(2) {
        return Err(Error::dim(
            "trained_de",
            format!(
                "sample {:?} shorter than temporal filter {p1} (axis 1)",
                x.shape()
            ),
        ));
    }
    let h = encoder.forward(&x.cast::<T>())?;
    Ok(row_de(h.data(), t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub name: &'static str,
    pub low_hz: f64,
    pub high_hz: f64,
}

/// Theta, alpha, beta and gamma.
pub const DE_BANDS: [Band; 4] = [
    Band {
        name: "theta",
        low_hz: 4.0,
        high_hz: 8.0,
    },
    Band {
        name: "alpha",
        low_hz: 8.0,
        high_hz: 13.0,
    },
    Band {
        name: "beta",
        low_hz: 13.0,
        high_hz: 30.0,
    },
    Band {
        name: "gamma",
        low_hz: 30.0,
        high_hz: 47.0,
    },
];

fn band_filters(fs: f64) -> Result<Vec<BandPass>> {
    DE_BANDS
        .iter()
        .map(|b| BandPass::new(b.low_hz, b.high_hz, fs))
        .collect()
}

/// Band DE of one `[M, T']` sample: `4 x M` values, band-major.
pub fn raw_de(x: &Tensor<f64>, fs: f64) -> Result<Vec<f64>> {
    let t = x.shape()[1];
    let mut out = Vec::with_capacity(DE_BANDS.len() * x.shape()[0]);
    for f in band_filters(fs)? {
        out.extend(row_de(f.apply(x)?.data(), t));
    }
    Ok(out)
}

/// Band DE for consecutive `len`-point windows of a whole trial. Filtering
/// runs over the full trial so short windows keep their low frequencies.
pub fn raw_de_windows(signal: &Tensor<f64>, fs: f64, len: usize) -> Result<Vec<Vec<f64>>> {
    let (m, t) = (signal.shape()[0], signal.shape()[1]);
    let offsets = window_offsets(t, len, len)?;
    let mut out = vec![Vec::with_capacity(DE_BANDS.len() * m); offsets.len()];
    for f in band_filters(fs)? {
        let y = f.apply(signal)?;
        for (row, &o) in out.iter_mut().zip(&offsets) {
            for c in 0..m {
                row.extend(row_de(&y.data()[c * t + o..][..len], len));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Hyperparams, ModelParams};
    use crate::seeded_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(seed: u64, m: usize, t: usize, scale: f64) -> Tensor<f64> {
        let mut rng = seeded_rng(seed);
        let v: Vec<f64> = (0..m * t)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                scale * e
            })
            .collect();
        Tensor::from_f64(&[m, t], &v).unwrap()
    }

    #[test]
    fn unit_variance_gives_half_log_two_pi_e() {
        assert!((differential_entropy(1.0) - 1.418_938_533).abs() < 1e-9);
        assert_eq!(
            differential_entropy(0.0),
            differential_entropy(DE_VAR_FLOOR)
        );
    }

    #[test]
    fn identity_encoder_de_of_unit_noise() {
        let enc = EncoderParams {
            spatial: Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap(),
            temporal: Tensor::from_f64(&[1, 1], &[1.0]).unwrap(),
        };
        let de = trained_de(&noise(1, 1, 250, 1.0), &enc).unwrap();
        assert!((de[0] - 1.41894).abs() < 0.1);
    }

    #[test]
    fn scaling_input_by_e_adds_one_nat() {
        let p =
            ModelParams::<f64>::init(Hyperparams::default().architecture(32), &mut seeded_rng(2))
                .unwrap();
        let x = noise(3, 32, 250, 1.0);
        let a = trained_de(&x, &p.encoder).unwrap();
        let b = trained_de(&x.map(|v| v * std::f64::consts::E), &p.encoder).unwrap();
        assert_eq!(a.len(), 256);
        for (u, v) in a.iter().zip(&b) {
            assert!((v - u - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_sample_rejected() {
        let p =
            ModelParams::<f64>::init(Hyperparams::default().architecture(4), &mut seeded_rng(2))
                .unwrap();
        assert!(matches!(
            trained_de(&noise(1, 4, 30, 1.0), &p.encoder),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn raw_de_dimensions_and_alpha_sine() {
        let fs = 200.0;
        assert_eq!(raw_de(&noise(1, 32, 200, 1.0), fs).unwrap().len(), 128);
        let v: Vec<f64> = (0..400)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / fs).sin())
            .collect();
        let de = raw_de(&Tensor::from_f64(&[1, 400], &v).unwrap(), fs).unwrap();
        assert!(de[1] > de[0] && de[1] > de[2] && de[1] > de[3], "{de:?}");
    }

    #[test]
    fn raw_de_of_zero_is_floor() {
        let de = raw_de(&Tensor::zeros(&[2, 100]), 100.0).unwrap();
        assert!(de.iter().all(|&d| d == differential_entropy(DE_VAR_FLOOR)));
    }

    #[test]
    fn raw_de_band_past_nyquist_rejected() {
        assert!(matches!(
            raw_de(&Tensor::zeros(&[2, 100]), 80.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn windowed_raw_de_shape() {
        let w = raw_de_windows(&noise(4, 3, 1000, 1.0), 100.0, 100).unwrap();
        assert_eq!(w.len(), 10);
        assert!(w.iter().all(|r| r.len() == 12));
    }
}
