use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Graph, Tensor, Var};
use crate::predict::ClassifierParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub target_class: usize,
    pub steps: usize,
    pub values: Vec<f64>,
    /// `F(h)` and `F(h0)` for the target logit.
    pub output: f64,
    pub baseline_output: f64,
}

impl Attribution {
    /// `|sum(IG) - (F(h) - F(h0))| / |F(h) - F(h0)|`.
    pub fn completeness_error(&self) -> f64 {
        let diff = self.output - self.baseline_output;
        (self.values.iter().sum::<f64>() - diff).abs() / diff.abs()
    }
}

/// Integrated gradients of logit `target` of any graph model `f` mapping
/// `[B, D]` inputs to `[B, K]` logits. Right Riemann sum over `steps`
/// points of the straight path from `baseline` (zeros when `None`) to `h`.
pub fn integrated_gradients_with<F>(
    f: F,
    h: &[f64],
    baseline: Option<&[f64]>,
    target: usize,
    steps: usize,
) -> Result<Attribution>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if steps == 0 {
        return Err(Error::Parameter(
            "integrated gradients need at least one step".into(),
        ));
    }
    let d = h.len();
    let zeros = vec![0.0; d];
    let h0 = baseline.unwrap_or(&zeros);
    if h0.len() != d {
        return Err(Error::Parameter(format!(
            "baseline length {} != input length {d}",
            h0.len()
        )));
    }
    // rows: the m path points, then h0 itself (row m) for F(h0)
    let mut data = Vec::with_capacity((steps + 1) * d);
    for k in 1..=steps {
        let a = k as f64 / steps as f64;
        data.extend(h.iter().zip(h0).map(|(x, b)| b + a * (x - b)));
    }
    data.extend_from_slice(h0);
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![steps + 1, d], data)?);
    let logits = f(&mut g, x)?;
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != steps + 1 || target >= shape[1] {
        return Err(Error::Parameter(format!(
            "model output {shape:?} has no logit {target} per row"
        )));
    }
    let k = shape[1];
    let out = g.value(logits).data().to_vec();
    let mut mask = vec![0.0; (steps + 1) * k];
    for r in 0..steps {
        mask[r * k + target] = 1.0;
    }
    let mask = g.constant(Tensor::new(shape, mask)?);
    let picked = g.mul(logits, mask)?;
    let total = g.sum(picked);
    let grads = g.backward(total)?;
    let gx = grads.get(x).expect("input gradient");
    let mut values = vec![0.0; d];
    for row in gx.data().chunks_exact(d).take(steps) {
        for (v, gv) in values.iter_mut().zip(row) {
            *v += gv;
        }
    }
    for ((v, x), b) in values.iter_mut().zip(h).zip(h0) {
        *v *= (x - b) / steps as f64;
    }
    Ok(Attribution {
        target_class: target,
        steps,
        values,
        output: out[(steps - 1) * k + target],
        baseline_output: out[steps * k + target],
    })
}

/// Integrated gradients of a trained classifier's logit for `target`.
pub fn integrated_gradients(
    clf: &ClassifierParams,
    h: &[f64],
    baseline: Option<&[f64]>,
    target: usize,
    steps: usize,
) -> Result<Attribution> {
    if h.len() != clf.input_dim() {
        return Err(Error::Parameter(format!(
            "input length {} != classifier input {}",
            h.len(),
            clf.input_dim()
        )));
    }
    integrated_gradients_with(
        |g, x| {
            let vars = clf.record(g)?;
            ClassifierParams::forward_graph(g, &vars, x)
        },
        h,
        baseline,
        target,
        steps,
    )
}

/// Mean attribution over many inputs (all for the same class).
pub fn mean_attribution(
    clf: &ClassifierParams,
    inputs: &[Vec<f64>],
    target: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; clf.input_dim()];
    for h in inputs {
        let a = integrated_gradients(clf, h, None, target, steps)?;
        for (s, v) in acc.iter_mut().zip(&a.values) {
            *s += v;
        }
    }
    let n = inputs.len().max(1) as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn linear_model_recovers_w_times_x_for_any_step_count() {
        let w = [0.5, -2.0, 3.0];
        let h = [1.5, 0.25, -1.0];
        for steps in [1, 7, 256] {
            let a = integrated_gradients_with(
                |g, x| {
                    let wv = g.constant(Tensor::from_f64(&[1, 3], &w)?);
                    let bv = g.constant(Tensor::from_f64(&[1], &[0.7])?);
                    g.linear(x, wv, bv)
                },
                &h,
                None,
                0,
                steps,
            )
            .unwrap();
            for i in 0..3 {
                assert!((a.values[i] - w[i] * h[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_displacement_gives_zero() {
        let clf = ClassifierParams::init(4, 30, 2, &mut seeded_rng(1)).unwrap();
        let h = [0.3, -0.2, 1.0, 0.5];
        let a = integrated_gradients(&clf, &h, Some(&h), 1, 16).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn completeness_on_mlp() {
        let clf = ClassifierParams::init(6, 30, 3, &mut seeded_rng(2)).unwrap();
        let h = [1.0, -0.5, 2.0, 0.3, -1.2, 0.8];
        let a = integrated_gradients(&clf, &h, None, 2, 256).unwrap();
        assert!(a.completeness_error() < 0.01, "{}", a.completeness_error());
    }

    #[test]
    fn bad_requests() {
        let clf = ClassifierParams::init(4, 30, 2, &mut seeded_rng(1)).unwrap();
        assert!(matches!(
            integrated_gradients(&clf, &[1.0; 3], None, 0, 8),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            integrated_gradients(&clf, &[1.0; 4], None, 0, 0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            integrated_gradients(&clf, &[1.0; 4], None, 2, 8),
            Err(Error::Parameter(_))
        ));
    }
}
