use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor of the relative error.
pub const GRADCHECK_EPS: f64 = 1e-8;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares autodiff gradients of the scalar built by `f` against central
/// differences with step `h`, on up to `samples` coordinates drawn uniformly
/// over all parameter entries (all of them when there are fewer).
///
/// `f` receives a fresh graph and one [`Var`] per tensor in `params`, in
/// order, and must return the scalar root.
pub fn gradcheck<F, R>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let total: usize = params.iter().map(Tensor::len).sum();
    let picks: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for &flat in &picks {
        let (pi, off) = locate(params, flat);
        let analytic = grads.get(vars[pi]).map_or(0.0, |t| t.data()[off]);
        let orig = work[pi].data()[off];
        work[pi].data_mut()[off] = orig + h;
        let up = eval(&work)?;
        work[pi].data_mut()[off] = orig - h;
        let down = eval(&work)?;
        work[pi].data_mut()[off] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs() + GRADCHECK_EPS);
        worst = worst.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates: picks.len(),
    })
}

fn locate(params: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.len() {
            return (i, flat);
        }
        flat -= p.len();
    }
    unreachable!("coordinate sampled inside the parameter range")
}
