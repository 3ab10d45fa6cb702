//! Contrastive phase: similarity, retrieval accuracy, Adam with decoupled
//! weight decay, the warm-restart learning-rate schedule, and the training
//! loop over subject pairs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ops::{denominator_indices, positive_of, NORM_FLOOR};
use crate::kernel::{Graph, Scalar, Tensor};
use crate::network::{embed_graph, Hyperparams, ModelParams};
use crate::preprocess::{seconds_to_samples, stratified_normalize};
use crate::recording::Recording;
use crate::sampler::{draw_minibatch, enumerate_subject_pairs, Minibatch};

pub use crate::kernel::ops::nt_xent;

/// Cosine similarity. Either vector with norm below `1e-12` is an error.
pub fn cosine_sim<T: Scalar>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(
            "cosine_sim",
            format!("vectors of length {} and {}", u.len(), v.len()),
        ));
    }
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.as_f64(), b.as_f64());
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if !(nu > NORM_FLOOR && nv > NORM_FLOOR) {
        return Err(Error::numeric(
            "cosine_sim",
            format!("zero vector (norms {nu}, {nv})"),
        ));
    }
    Ok((uv / (nu * nv)).clamp(-1.0, 1.0))
}

/// Fraction of anchors whose positive is strictly the most similar of all
/// `2N - 1` candidates. `z` is `[2N, D]`, subject A rows first.
pub fn retrieval_accuracy<T: Scalar>(z: &Tensor<T>) -> Result<f64> {
    let rows = z.shape().first().copied().unwrap_or(0);
    if z.rank() != 2 || rows % 2 != 0 || rows < 4 {
        return Err(Error::Config(format!(
            "retrieval needs a [2N, D] batch with N >= 2, got {:?}",
            z.shape()
        )));
    }
    let n = rows / 2;
    let mut sim = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in i + 1..rows {
            let s = cosine_sim(z.row(i), z.row(j))?;
            sim[i * rows + j] = s;
            sim[j * rows + i] = s;
        }
    }
    let hits = (0..rows)
        .filter(|&a| {
            let p = positive_of(a, n);
            let sp = sim[a * rows + p];
            denominator_indices(a, n)
                .into_iter()
                .all(|j| j == p || sim[a * rows + j] < sp)
        })
        .count();
    Ok(hits as f64 / rows as f64)
}

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[&[usize]], weight_decay: f64) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Bias-corrected Adam update followed by `p *= 1 - lr * weight_decay`.
    /// Non-finite gradients abort the step with nothing modified.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Parameter(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::numeric(
                    "adam_step",
                    format!("non-finite gradient in tensor {i}"),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (eps, lr_t) = (T::lit(self.eps), T::lit(lr));
        let decay = T::lit(1.0 - lr * self.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= lr_t * mh / (vh.sqrt() + eps);
                *pv *= decay;
            }
        }
        Ok(())
    }
}

/// Cosine annealing inside one cycle of length `period`, `t` in `[0, period]`.
pub fn cycle_lr(t: f64, period: f64, lr_max: f64, lr_min: f64) -> f64 {
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t / period).cos())
}

/// Cosine annealing with warm restarts over cycles measured in epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmRestartSchedule {
    pub cycles: Vec<usize>,
    pub lr_max: f64,
    pub lr_min: f64,
}

/// Cycle lengths of the 100-epoch budget: three restarts.
pub const DEFAULT_CYCLES: [usize; 4] = [12, 12, 25, 51];

impl WarmRestartSchedule {
    /// The default cycles rescaled to `epochs` (largest remainder rounding).
    pub fn scaled(epochs: usize, lr_max: f64) -> Self {
        let k = DEFAULT_CYCLES.len().min(epochs.max(1));
        let base = &DEFAULT_CYCLES[DEFAULT_CYCLES.len() - k..];
        let base_total: usize = base.iter().sum();
        let exact: Vec<f64> = base
            .iter()
            .map(|&c| c as f64 * epochs as f64 / base_total as f64)
            .collect();
        let mut cycles: Vec<usize> = exact.iter().map(|e| (e.floor() as usize).max(1)).collect();
        while cycles.iter().sum::<usize>() < epochs {
            let i = (0..k)
                .max_by(|&a, &b| {
                    let ra = exact[a] - cycles[a] as f64;
                    let rb = exact[b] - cycles[b] as f64;
                    ra.total_cmp(&rb).then(b.cmp(&a))
                })
                .expect("non-empty");
            cycles[i] += 1;
        }
        while cycles.iter().sum::<usize>() > epochs {
            let i = (0..k)
                .rev()
                .find(|&i| cycles[i] > 1)
                .expect("epochs >= cycles");
            cycles[i] -= 1;
        }
        Self {
            cycles,
            lr_max,
            lr_min: 0.0,
        }
    }

    pub fn from_hyperparams(hp: &Hyperparams) -> Self {
        if hp.restart_cycles.is_empty() {
            Self::scaled(hp.epochs, hp.lr)
        } else {
            Self {
                cycles: hp.restart_cycles.clone(),
                lr_max: hp.lr,
                lr_min: 0.0,
            }
        }
    }

    /// Learning rate at fractional epoch `t`. Past the final cycle the
    /// last cycle repeats.
    pub fn lr(&self, t: f64) -> f64 {
        let mut start = 0.0;
        for &c in &self.cycles {
            let c = c as f64;
            if t < start + c {
                return cycle_lr(t - start, c, self.lr_max, self.lr_min);
            }
            start += c;
        }
        let last = *self.cycles.last().unwrap_or(&1) as f64;
        cycle_lr((t - start).rem_euclid(last), last, self.lr_max, self.lr_min)
    }
}

/// Free-function form of [`WarmRestartSchedule::lr`].
pub fn cosine_warm_restart_lr(t: f64, schedule: &WarmRestartSchedule) -> f64 {
    schedule.lr(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Patience,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_retrieval_acc: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_retrieval_acc: f64,
    pub stop_reason: StopReason,
    /// Chance level of the validation retrieval accuracy, `1 / (2N - 1)`.
    pub chance: f64,
    pub train_pairs: Vec<(String, String)>,
    pub val_pairs: Vec<(String, String)>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,val_retrieval_acc,lr\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.epoch, e.mean_loss, e.val_retrieval_acc, e.lr
            );
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }
}

/// Number of validation minibatches drawn per held-out pair.
pub const VAL_DRAWS: usize = 4;

/// Embeds a normalized minibatch; returns the graph, the loss node and `z`.
fn forward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Minibatch,
    tau: f64,
) -> Result<(
    Graph<T>,
    crate::kernel::Var,
    crate::kernel::Var,
    crate::network::ModelVars,
)> {
    let norm = stratified_normalize(batch)?;
    let groups = norm.groups();
    let mut g = Graph::new();
    let vars = params.record(&mut g);
    let x = g.constant(norm.stacked::<T>()?);
    let z = embed_graph(&mut g, &vars, &params.arch, x, Some(&groups))?;
    let loss = g.nt_xent(z, T::lit(tau))?;
    Ok((g, loss, z, vars))
}

/// Validation loss and retrieval accuracy of `params` on fixed minibatches.
pub fn evaluate_batches<T: Scalar>(
    params: &ModelParams<T>,
    batches: &[Minibatch],
    tau: f64,
) -> Result<(f64, f64)> {
    let (mut loss, mut acc) = (0.0, 0.0);
    for b in batches {
        let (g, l, z, _) = forward(params, b, tau)?;
        loss += g.value(l).item().as_f64();
        acc += retrieval_accuracy(g.value(z))?;
    }
    let k = batches.len().max(1) as f64;
    Ok((loss / k, acc / k))
}

type SubjectPair = (usize, usize);

/// Splits the subject pairs of `n` recordings into training and validation
/// pairs. With too few pairs to hold any out, both lists are the same.
fn split_pairs<R: Rng + ?Sized>(
    n: usize,
    val_pairs: usize,
    rng: &mut R,
) -> Result<(Vec<SubjectPair>, Vec<SubjectPair>)> {
    let pairs = enumerate_subject_pairs(n, rng)?;
    if val_pairs == 0 || pairs.len() <= val_pairs {
        return Ok((pairs.clone(), pairs));
    }
    let (val, train) = pairs.split_at(val_pairs);
    Ok((train.to_vec(), val.to_vec()))
}

/// Trains encoder and projector on every pair of `recordings`.
///
/// One minibatch (subject pair) is one optimizer step. Parameters from the
/// epoch with the best validation retrieval accuracy (ties broken by lower
/// validation loss) are returned.
pub fn train_contrastive<T: Scalar, R: Rng + ?Sized>(
    recordings: &[Recording],
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<(ModelParams<T>, TrainReport)> {
    hp.validate()?;
    let first = recordings
        .first()
        .ok_or_else(|| Error::Config("no recordings to train on".into()))?;
    let fs = first.sampling_rate;
    if recordings.iter().any(|r| r.sampling_rate != fs) {
        return Err(Error::Data(
            "recordings have different sampling rates".into(),
        ));
    }
    let sample_len = seconds_to_samples(hp.sample_len_s, fs);
    let arch = hp.architecture(first.n_channels());
    arch.embedding_len(sample_len)?;

    let mut params = ModelParams::<T>::init(arch, rng)?;
    let (train_pairs, val_pairs) = split_pairs(recordings.len(), hp.val_pairs, rng)?;
    let mut val_batches = Vec::with_capacity(val_pairs.len() * VAL_DRAWS);
    for &(i, j) in &val_pairs {
        for _ in 0..VAL_DRAWS {
            val_batches.push(draw_minibatch(
                &recordings[i],
                &recordings[j],
                sample_len,
                rng,
            )?);
        }
    }
    let n_trials = first.trials.len();
    let names = |p: &[(usize, usize)]| -> Vec<(String, String)> {
        p.iter()
            .map(|&(i, j)| {
                (
                    recordings[i].subject_id.clone(),
                    recordings[j].subject_id.clone(),
                )
            })
            .collect()
    };

    let schedule = WarmRestartSchedule::from_hyperparams(hp);
    let shapes: Vec<Vec<usize>> = params
        .tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::<T>::new(&shape_refs, hp.weight_decay);

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_retrieval_acc: f64::NEG_INFINITY,
        stop_reason: StopReason::Budget,
        chance: 1.0 / (2 * n_trials).saturating_sub(1).max(1) as f64,
        train_pairs: names(&train_pairs),
        val_pairs: names(&val_pairs),
    };
    let mut best = params.clone();
    let mut best_val_loss = f64::INFINITY;
    let mut since_best = 0usize;
    let mut order = train_pairs.clone();
    let steps = order.len() as f64;

    for epoch in 0..hp.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut lr = hp.lr;
        for (k, &(i, j)) in order.iter().enumerate() {
            let batch = draw_minibatch(&recordings[i], &recordings[j], sample_len, rng)?;
            let (g, loss, _, vars) = forward(&params, &batch, hp.tau)?;
            let l = g.value(loss).item().as_f64();
            if !l.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    detail: format!("loss {l} on pair {i}-{j}"),
                });
            }
            loss_sum += l;
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor<T>> = vars
                .as_array()
                .iter()
                .map(|&v| grads.take(v).expect("parameter gradient"))
                .collect();
            let grefs: Vec<&Tensor<T>> = gs.iter().collect();
            lr = schedule.lr(epoch as f64 + k as f64 / steps);
            adam.step(&mut params.tensors_mut(), &grefs, lr)
                .map_err(|e| Error::Divergence {
                    epoch: epoch + 1,
                    detail: e.to_string(),
                })?;
        }
        let (val_loss, val_acc) = evaluate_batches(&params, &val_batches, hp.tau)?;
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / steps,
            val_retrieval_acc: val_acc,
            val_loss,
            lr,
        });
        let improved = val_acc > report.best_val_retrieval_acc
            || (val_acc == report.best_val_retrieval_acc && val_loss < best_val_loss);
        if improved {
            report.best_val_retrieval_acc = val_acc;
            report.best_epoch = epoch + 1;
            best_val_loss = val_loss;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hp.patience.max(1) {
                report.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recording::Trial;
    use crate::seeded_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut crate::Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!((cosine_sim(&[-2.0, -4.0], &[6.0, 3.0]).unwrap() + 0.8).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn identical_embeddings_give_uniform_loss() {
        let z = Tensor::<f64>::full(&[56, 5], 0.3);
        let l = nt_xent(&z, 0.5).unwrap();
        assert!((l - 56.0 * 55f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn two_pair_hand_case() {
        // positives similar (1), everything else orthogonal (0), tau = 1
        let z = Tensor::<f64>::from_f64(&[4, 2], &[1., 0., 0., 1., 1., 0., 0., 1.]).unwrap();
        let l = crate::kernel::ops::nt_xent_per_anchor(&z, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l[0] - ((e + 2.0) / e).ln()).abs() < 1e-9);
        assert!((l[0] - 0.5514).abs() < 1e-4);
        assert_eq!(retrieval_accuracy(&z).unwrap(), 1.0);
    }

    #[test]
    fn loss_vanishes_for_perfect_separation_at_low_temperature() {
        let z = Tensor::<f64>::from_f64(&[4, 2], &[1., 0., -1., 0., 1., 0., -1., 0.]).unwrap();
        let l = nt_xent(&z, 0.01).unwrap();
        assert!(l < 1e-50);
    }

    #[test]
    fn loss_scale_invariant_and_symmetric() {
        let mut rng = seeded_rng(3);
        let z = randn(&mut rng, &[10, 7]);
        let l = nt_xent(&z, 0.5).unwrap();
        let mut scaled = z.clone();
        for (i, row) in scaled.data_mut().chunks_exact_mut(7).enumerate() {
            row.iter_mut().for_each(|v| *v *= 0.1 + i as f64);
        }
        assert!((nt_xent(&scaled, 0.5).unwrap() - l).abs() < 1e-6);
        let mut swapped = z.data()[35..].to_vec();
        swapped.extend_from_slice(&z.data()[..35]);
        let sw = Tensor::from_f64(&[10, 7], &swapped).unwrap();
        assert!((nt_xent(&sw, 0.5).unwrap() - l).abs() < 1e-9);
    }

    #[test]
    fn single_pair_batch_is_config_error() {
        let z = Tensor::<f64>::full(&[2, 3], 1.0);
        assert!(matches!(nt_xent(&z, 0.5), Err(Error::Config(_))));
        assert!(matches!(retrieval_accuracy(&z), Err(Error::Config(_))));
    }

    #[test]
    fn retrieval_copies_and_chance() {
        let mut rng = seeded_rng(11);
        let a = randn(&mut rng, &[28, 16]);
        let mut d = a.data().to_vec();
        d.extend_from_slice(a.data());
        let z = Tensor::<f64>::from_f64(&[56, 16], &d).unwrap();
        assert_eq!(retrieval_accuracy(&z).unwrap(), 1.0);

        let trials = 400;
        let mean: f64 = (0..trials)
            .map(|_| retrieval_accuracy(&randn(&mut rng, &[56, 16])).unwrap())
            .sum::<f64>()
            / trials as f64;
        // binomial-ish spread over 400 x 56 anchors
        assert!((mean - 1.0 / 55.0).abs() < 0.004, "mean {mean}");
    }

    #[test]
    fn adam_first_step_and_decay() {
        let mut p = Tensor::scalar(0.0f64);
        let g = Tensor::scalar(1.0f64);
        let mut adam = AdamState::<f64>::new(&[&[]], 0.0);
        adam.step(&mut [&mut p], &[&g], 1e-3).unwrap();
        assert!((p.item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut p = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let z = Tensor::zeros(&[3]);
        let mut adam = AdamState::<f64>::new(&[&[3]], 0.0);
        adam.step(&mut [&mut p], &[&z], 7e-4).unwrap();
        assert_eq!(p, orig);

        let mut adam = AdamState::<f64>::new(&[&[3]], 0.015);
        adam.step(&mut [&mut p], &[&z], 7e-4).unwrap();
        for (a, b) in p.data().iter().zip(orig.data()) {
            assert!((a - b * (1.0 - 1.05e-5)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients_untouched() {
        let mut p = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let g = Tensor::from_f64(&[2], &[f64::NAN, 0.0]).unwrap();
        let mut adam = AdamState::<f64>::new(&[&[2]], 0.0);
        assert!(matches!(
            adam.step(&mut [&mut p], &[&g], 1e-3),
            Err(Error::Numeric { .. })
        ));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn schedule_points() {
        let s = WarmRestartSchedule::scaled(100, 7e-4);
        assert_eq!(s.cycles, DEFAULT_CYCLES);
        assert_eq!(s.lr(0.0), 7e-4);
        assert_eq!(s.lr(12.0), 7e-4);
        assert_eq!(s.lr(24.0), 7e-4);
        assert_eq!(s.lr(49.0), 7e-4);
        assert!((s.lr(6.0) - 3.5e-4).abs() < 1e-15);
        assert!((s.lr(24.0 + 12.5) - 3.5e-4).abs() < 1e-15);
        assert!(cycle_lr(51.0, 51.0, 7e-4, 0.0).abs() < 1e-18);
        assert!(s.lr(11.999) < 1e-9);
        assert!((cosine_warm_restart_lr(49.0 + 25.5, &s) - 3.5e-4).abs() < 1e-15);
    }

    #[test]
    fn scaled_schedules_cover_budget() {
        for e in 1..=120 {
            let s = WarmRestartSchedule::scaled(e, 1e-3);
            assert_eq!(s.cycles.iter().sum::<usize>(), e, "epochs {e}");
            assert!(s.cycles.iter().all(|&c| c >= 1));
            assert!(s.cycles.len() <= 4);
        }
        assert_eq!(
            WarmRestartSchedule::scaled(25, 1.0).cycles,
            vec![3, 3, 6, 13]
        );
    }

    /// Two subjects observing one shared random source through different
    /// gains, plus independent noise.
    fn toy_corpus(n_subjects: usize, n_trials: usize, seed: u64) -> Vec<Recording> {
        let mut rng = seeded_rng(seed);
        let (m, t) = (3, 240);
        let sources: Vec<Tensor<f64>> = (0..n_trials).map(|_| randn(&mut rng, &[1, t])).collect();
        (0..n_subjects)
            .map(|s| {
                let gains: Vec<f64> = (0..m).map(|_| 1.0 + rng.random::<f64>()).collect();
                let trials = sources
                    .iter()
                    .enumerate()
                    .map(|(i, src)| {
                        let noise = randn(&mut rng, &[m, t]);
                        let mut v = Vec::with_capacity(m * t);
                        for (c, g) in gains.iter().enumerate().take(m) {
                            for k in 0..t {
                                v.push(g * src.data()[k] + 0.3 * noise.data()[c * t + k]);
                            }
                        }
                        Trial {
                            trial_id: format!("s{s}t{i}"),
                            stimulus_id: format!("stim{i}"),
                            label: i % 2,
                            signal: Tensor::from_f64(&[m, t], &v).unwrap(),
                        }
                    })
                    .collect();
                Recording::new(
                    format!("s{s}"),
                    40.0,
                    (0..m).map(|c| format!("c{c}")).collect(),
                    trials,
                )
                .unwrap()
            })
            .collect()
    }

    fn tiny_hp() -> Hyperparams {
        Hyperparams {
            k1: 3,
            k2: 3,
            p1: 5,
            pool: 4,
            p2: 3,
            c: 1,
            sample_len_s: 2.0,
            lr: 1e-2,
            weight_decay: 0.0,
            epochs: 5,
            patience: 10,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn single_pair_training_loss_decreases() {
        let recs = toy_corpus(2, 6, 1);
        let (_, report) =
            train_contrastive::<f64, _>(&recs, &tiny_hp(), &mut seeded_rng(0)).unwrap();
        assert_eq!(report.epochs.len(), 5);
        assert_eq!(report.val_pairs, report.train_pairs);
        let first = report.epochs[0].mean_loss;
        let last = report.epochs[4].mean_loss;
        assert!(last < first, "loss {first} -> {last}");
        assert!(report
            .to_csv()
            .starts_with("epoch,mean_loss,val_retrieval_acc,lr\n1,"));
    }

    #[test]
    fn patience_zero_stops_after_first_non_improving_epoch() {
        let recs = toy_corpus(3, 4, 2);
        let hp = Hyperparams {
            patience: 0,
            epochs: 50,
            // updates far below f32 resolution: parameters stay frozen
            lr: 1e-12,
            ..tiny_hp()
        };
        let (_, report) = train_contrastive::<f32, _>(&recs, &hp, &mut seeded_rng(0)).unwrap();
        assert_eq!(report.stop_reason, StopReason::Patience);
        assert_eq!(report.epochs.len(), 2);
        assert_eq!(report.best_epoch, 1);
        assert_eq!(report.val_pairs.len(), 1);
        assert_eq!(report.train_pairs.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let recs = toy_corpus(3, 4, 5);
        let hp = Hyperparams {
            epochs: 2,
            ..tiny_hp()
        };
        let (a, ra) = train_contrastive::<f64, _>(&recs, &hp, &mut seeded_rng(9)).unwrap();
        let (b, rb) = train_contrastive::<f64, _>(&recs, &hp, &mut seeded_rng(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}
