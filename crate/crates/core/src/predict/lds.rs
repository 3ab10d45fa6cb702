use crate::error::{Error, Result};

/// Random-walk state-space smoother applied to every feature dimension of
/// a sequence (one trial): forward Kalman filter, then RTS backward pass.
///
/// Observation variance is 1 and process variance is `q`; the state starts
/// at the first observation with unit variance.
pub fn lds_smooth(sequence: &[Vec<f64>], q: f64) -> Result<Vec<Vec<f64>>> {
    if !(q > 0.0) {
        return Err(Error::Parameter(format!(
            "LDS noise ratio must be positive, got {q}"
        )));
    }
    let Some(first) = sequence.first() else {
        return Ok(Vec::new());
    };
    let d = first.len();
    if sequence.iter().any(|r| r.len() != d) {
        return Err(Error::Parameter(
            "LDS sequence rows differ in length".into(),
        ));
    }
    let n = sequence.len();
    let mut out = vec![vec![0.0; d]; n];
    let mut xf = vec![0.0; n];
    let mut pf = vec![0.0; n];
    for k in 0..d {
        let (mut x, mut p) = (sequence[0][k], 1.0);
        for t in 0..n {
            if t > 0 {
                p += q;
            }
            let gain = p / (p + 1.0);
            x += gain * (sequence[t][k] - x);
            p *= 1.0 - gain;
            xf[t] = x;
            pf[t] = p;
        }
        let mut xs = xf[n - 1];
        out[n - 1][k] = xs;
        for t in (0..n - 1).rev() {
            let c = pf[t] / (pf[t] + q);
            xs = xf[t] + c * (xs - xf[t]);
            out[t][k] = xs;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn col(s: &[Vec<f64>]) -> Vec<f64> {
        s.iter().map(|r| r[0]).collect()
    }

    fn var(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn constant_is_fixed_point() {
        let seq = vec![vec![2.5, -1.0]; 20];
        assert_eq!(lds_smooth(&seq, 0.1).unwrap(), seq);
    }

    #[test]
    fn impulse_is_spread_and_mass_kept() {
        let mut seq = vec![vec![0.0]; 41];
        seq[20][0] = 1.0;
        let out = col(&lds_smooth(&seq, 0.1).unwrap());
        let max = out.iter().cloned().fold(f64::MIN, f64::max);
        let sum: f64 = out.iter().sum();
        assert!(max < 1.0);
        assert!((sum - 1.0).abs() < 0.02, "sum {sum}");
    }

    #[test]
    fn huge_ratio_trusts_observations() {
        let seq: Vec<Vec<f64>> = (0..10).map(|i| vec![(i * i) as f64]).collect();
        let out = lds_smooth(&seq, 1e9).unwrap();
        for (a, b) in out.iter().zip(&seq) {
            assert!((a[0] - b[0]).abs() < 1e-6);
        }
    }

    /// Posterior mean of the same model from its dense precision matrix:
    /// prior N(y0, 1) on x0, random-walk steps of variance q, unit-variance
    /// observations.
    fn posterior_mean(y: &[f64], q: f64) -> Vec<f64> {
        let n = y.len();
        let mut prec = nalgebra::DMatrix::<f64>::identity(n, n);
        prec[(0, 0)] += 1.0;
        for t in 1..n {
            prec[(t, t)] += 1.0 / q;
            prec[(t - 1, t - 1)] += 1.0 / q;
            prec[(t, t - 1)] -= 1.0 / q;
            prec[(t - 1, t)] -= 1.0 / q;
        }
        let mut rhs = nalgebra::DVector::from_column_slice(y);
        rhs[0] += y[0];
        prec.cholesky()
            .unwrap()
            .solve(&rhs)
            .iter()
            .copied()
            .collect()
    }

    #[test]
    fn matches_dense_gaussian_posterior() {
        let mut rng = seeded_rng(3);
        for (n, q) in [(1, 0.5), (2, 0.1), (37, 0.1), (60, 0.01), (25, 3.0)] {
            let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let seq: Vec<Vec<f64>> = y.iter().map(|&v| vec![v]).collect();
            let got = col(&lds_smooth(&seq, q).unwrap());
            for (a, b) in got.iter().zip(posterior_mean(&y, q)) {
                assert!((a - b).abs() < 1e-10, "n {n} q {q}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_and_invalid() {
        assert!(lds_smooth(&[], 0.1).unwrap().is_empty());
        assert!(matches!(
            lds_smooth(&[vec![1.0]], 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn smoothing_reduces_noise_variance() {
        let mut rng = seeded_rng(8);
        for q in [0.01, 0.1, 1.0] {
            let seq: Vec<Vec<f64>> = (0..500)
                .map(|_| vec![StandardNormal.sample(&mut rng)])
                .collect();
            let out = col(&lds_smooth(&seq, q).unwrap());
            assert!(var(&out) <= var(&col(&seq)));
        }
    }
}
