//! Three-layer perceptron on DE features.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::AdamState;
use crate::error::{Error, Result};
use crate::kernel::{ops, Graph, Tensor, Var};

/// Weight-decay candidates searched by inner validation.
pub const WEIGHT_DECAY_GRID: [f64; 5] = [0.005, 0.011, 0.025, 0.056, 0.125];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without inner-validation improvement before stopping.
    pub patience: usize,
    pub weight_decays: Vec<f64>,
    /// Share of each training subject's trials (the last ones) held out to
    /// pick the weight decay and the epoch count.
    pub inner_val_frac: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 30,
            lr: 5e-4,
            batch_size: 256,
            epochs: 100,
            patience: 10,
            weight_decays: WEIGHT_DECAY_GRID.to_vec(),
            inner_val_frac: 0.2,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "invalid classifier settings: {self:?}"
            )));
        }
        if self.weight_decays.is_empty() || self.weight_decays.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(
                "weight-decay grid must be non-empty and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.inner_val_frac) {
            return Err(Error::Config(format!(
                "inner validation share {} outside [0, 1)",
                self.inner_val_frac
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs, inputs]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn tensors(&self) -> Result<(Tensor<f64>, Tensor<f64>)> {
        Ok((
            Tensor::new(vec![self.outputs, self.inputs], self.weight.clone())?,
            Tensor::new(vec![self.outputs], self.bias.clone())?,
        ))
    }
}

/// `D -> hidden -> hidden -> K` with ReLU between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub layers: Vec<DenseLayer>,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_classes < 2 || input_dim == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "classifier needs >= 2 classes and positive widths, got {input_dim}/{hidden}/{n_classes}"
            )));
        }
        Ok(Self {
            layers: vec![
                DenseLayer::init(input_dim, hidden, rng),
                DenseLayer::init(hidden, hidden, rng),
                DenseLayer::init(hidden, n_classes, rng),
            ],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Checks shapes chain and weights are finite (for loaded files).
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 3 {
            return Err(Error::Format(format!(
                "expected 3 layers, got {}",
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Format(format!("layer {i} sizes inconsistent")));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::Format(format!("layer {i} input width mismatch")));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("layer {i} has non-finite weights")));
            }
        }
        if self.n_classes() < 2 {
            return Err(Error::Format("classifier has fewer than 2 classes".into()));
        }
        Ok(())
    }

    /// Records the weights as trainable leaves.
    pub fn record(&self, g: &mut Graph<f64>) -> Result<Vec<(Var, Var)>> {
        self.layers
            .iter()
            .map(|l| {
                let (w, b) = l.tensors()?;
                Ok((g.param(w), g.param(b)))
            })
            .collect()
    }

    /// Logits on the graph for `x: [B, D]`.
    pub fn forward_graph(g: &mut Graph<f64>, vars: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in vars.iter().enumerate() {
            h = g.linear(h, w, b)?;
            if i + 1 < vars.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    fn batch(&self, features: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let d = self.input_dim();
        if let Some(r) = features.iter().find(|r| r.len() != d) {
            return Err(Error::Parameter(format!(
                "feature length {} does not match classifier input {d}",
                r.len()
            )));
        }
        Tensor::new(vec![features.len(), d], features.concat())
    }

    /// `[B, K]` logits.
    pub fn logits(&self, features: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let mut h = self.batch(features)?;
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = l.tensors()?;
            h = ops::linear(&h, &w, &b)?;
            if i + 1 < self.layers.len() {
                h = ops::relu(&h);
            }
        }
        Ok(h)
    }

    /// Labels (argmax, ties to the lower index) and posterior rows.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        if features.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let p = ops::softmax(&self.logits(features)?)?;
        let k = self.n_classes();
        let post: Vec<Vec<f64>> = p.data().chunks_exact(k).map(<[f64]>::to_vec).collect();
        Ok((post.iter().map(|r| argmax(r)).collect(), post))
    }
}

/// Index of the largest value; the first wins a tie.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_labels(
    features: &[Vec<f64>],
    clf: &ClassifierParams,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    clf.predict(features)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub weight_decay: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub weight_decay: f64,
    pub epochs: usize,
    pub grid: Vec<GridPoint>,
    pub train_accuracy: f64,
}

fn accuracy_and_loss(p: &ClassifierParams, x: &[Vec<f64>], y: &[usize]) -> Result<(f64, f64)> {
    let logits = p.logits(x)?;
    let loss = ops::softmax_cross_entropy(&logits, y)?;
    let k = p.n_classes();
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(y)
        .filter(|(r, &l)| argmax(r) == l)
        .count();
    Ok((hits as f64 / y.len() as f64, loss))
}

struct Fit {
    params: ClassifierParams,
    best_epoch: usize,
    val_accuracy: f64,
}

/// Mini-batch Adam with an L2 penalty `wd * p` added to every gradient.
/// With `val`, keeps the best epoch and stops after `patience` misses.
#[allow(clippy::too_many_arguments)]
fn fit<R: Rng + ?Sized>(
    x: &[Vec<f64>],
    y: &[usize],
    val: Option<(&[Vec<f64>], &[usize])>,
    n_classes: usize,
    cfg: &ClassifierConfig,
    weight_decay: f64,
    epochs: usize,
    rng: &mut R,
) -> Result<Fit> {
    let d = x[0].len();
    let mut params = ClassifierParams::init(d, cfg.hidden, n_classes, rng)?;
    let shapes: Vec<[usize; 2]> = params
        .layers
        .iter()
        .map(|l| [l.outputs, l.inputs])
        .collect();
    let mut shape_refs: Vec<&[usize]> = Vec::new();
    for (s, l) in shapes.iter().zip(&params.layers) {
        shape_refs.push(s);
        shape_refs.push(std::slice::from_ref(&l.outputs));
    }
    let mut adam = AdamState::<f64>::new(&shape_refs, 0.0);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut best = Fit {
        params: params.clone(),
        best_epoch: 0,
        val_accuracy: f64::NEG_INFINITY,
    };
    let mut best_loss = f64::INFINITY;
    let mut since = 0;
    for epoch in 1..=epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                data.extend_from_slice(&x[i]);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let vars = params.record(&mut g)?;
            let xv = g.constant(Tensor::new(vec![chunk.len(), d], data)?);
            let logits = ClassifierParams::forward_graph(&mut g, &vars, xv)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let mut grads = g.backward(loss)?;
            let mut gs = Vec::with_capacity(6);
            for (&(wv, bv), l) in vars.iter().zip(&params.layers) {
                let mut gw = grads.take(wv).expect("weight gradient");
                let mut gb = grads.take(bv).expect("bias gradient");
                for (gv, pv) in gw.data_mut().iter_mut().zip(&l.weight) {
                    *gv += weight_decay * pv;
                }
                for (gv, pv) in gb.data_mut().iter_mut().zip(&l.bias) {
                    *gv += weight_decay * pv;
                }
                gs.push(gw);
                gs.push(gb);
            }
            let mut ts: Vec<Tensor<f64>> = Vec::with_capacity(6);
            for l in &params.layers {
                let (w, b) = l.tensors()?;
                ts.push(w);
                ts.push(b);
            }
            {
                let mut refs: Vec<&mut Tensor<f64>> = ts.iter_mut().collect();
                let grefs: Vec<&Tensor<f64>> = gs.iter().collect();
                adam.step(&mut refs, &grefs, cfg.lr)?;
            }
            let mut it = ts.into_iter();
            for l in &mut params.layers {
                l.weight = it.next().expect("weight").into_data();
                l.bias = it.next().expect("bias").into_data();
            }
        }
        let Some((vx, vy)) = val else {
            continue;
        };
        let (acc, loss) = accuracy_and_loss(&params, vx, vy)?;
        if acc > best.val_accuracy || (acc == best.val_accuracy && loss < best_loss) {
            best = Fit {
                params: params.clone(),
                best_epoch: epoch,
                val_accuracy: acc,
            };
            best_loss = loss;
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience.max(1) {
                break;
            }
        }
    }
    if val.is_none() {
        return Ok(Fit {
            params,
            best_epoch: epochs,
            val_accuracy: f64::NAN,
        });
    }
    Ok(best)
}

/// Picks the weight decay (and epoch count) on the rows flagged by
/// `inner_val`, then retrains on every row with that setting.
pub fn train_classifier<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    labels: &[usize],
    inner_val: &[bool],
    n_classes: usize,
    cfg: &ClassifierConfig,
    rng: &mut R,
) -> Result<(ClassifierParams, ClassifierReport)> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() || inner_val.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} feature rows, {} labels, {} validation flags",
            features.len(),
            labels.len(),
            inner_val.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Data(format!(
            "label {bad} outside {n_classes} classes"
        )));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::Config(format!(
            "training labels hold a single class ({first})"
        )));
    }
    let pick = |flag: bool| -> (Vec<Vec<f64>>, Vec<usize>) {
        features
            .iter()
            .zip(labels)
            .zip(inner_val)
            .filter(|(_, &v)| v == flag)
            .map(|((f, &l), _)| (f.clone(), l))
            .unzip()
    };
    let (tx, ty) = pick(false);
    let (vx, vy) = pick(true);

    let mut grid = Vec::new();
    let (mut wd, mut epochs) = (cfg.weight_decays[0], cfg.epochs);
    if !tx.is_empty() && !vx.is_empty() {
        let mut best_acc = f64::NEG_INFINITY;
        for &w in &cfg.weight_decays {
            let f = fit(
                &tx,
                &ty,
                Some((&vx, &vy)),
                n_classes,
                cfg,
                w,
                cfg.epochs,
                rng,
            )?;
            grid.push(GridPoint {
                weight_decay: w,
                val_accuracy: f.val_accuracy,
                best_epoch: f.best_epoch,
            });
            if f.val_accuracy > best_acc {
                best_acc = f.val_accuracy;
                wd = w;
                epochs = f.best_epoch.max(1);
            }
        }
    }
    let f = fit(features, labels, None, n_classes, cfg, wd, epochs, rng)?;
    let (train_accuracy, _) = accuracy_and_loss(&f.params, features, labels)?;
    Ok((
        f.params,
        ClassifierReport {
            weight_decay: wd,
            epochs,
            grid,
            train_accuracy,
        },
    ))
}
