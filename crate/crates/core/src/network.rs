//! Base encoder (spatial then temporal convolution), projector (pooling and
//! depthwise convolutions), parameter initialization and checkpoints.
//!
//! Shapes, for a `[M, T]` input:
//!
//! ```text
//! encoder    spatial  [K1, M]          -> H1 [K1, T]
//!            temporal [K2, P1] (same)  -> H  [K2, K1, T]
//! projector  mean(elu(.)) over S       -> Ĥ  [K2, K1, T/S]
//!            depthwise spatial [C*K2, K1], elu -> G [C*K2, T/S]
//!            depthwise temporal [C*C*K2, P2], elu -> Z [C*C*K2, T/S - P2 + 1]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ops, Graph, Padding, Scalar, Tensor, Var};
use crate::preprocess::NORM_EPS;

/// Network extents. Everything a checkpoint needs to rebuild the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: usize,
    pub k1: usize,
    pub k2: usize,
    pub p1: usize,
    pub pool: usize,
    pub p2: usize,
    pub c: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let a = self;
        if [a.channels, a.k1, a.k2, a.p1, a.pool, a.p2, a.c].contains(&0) {
            return Err(Error::Config(format!(
                "architecture extents must be positive: {a:?}"
            )));
        }
        Ok(())
    }

    /// Length of the flattened projector output for `t` input points.
    pub fn embedding_len(&self, t: usize) -> Result<usize> {
        if t < self.pool * self.p2 {
            return Err(Error::dim(
                "projector",
                format!(
                    "input length {t} shorter than pool {} x temporal width {}",
                    self.pool, self.p2
                ),
            ));
        }
        Ok(self.c * self.c * self.k2 * (t / self.pool - self.p2 + 1))
    }

    /// Length of the flattened differential-entropy feature.
    pub fn feature_len(&self) -> usize {
        self.k1 * self.k2
    }
}

/// Contrastive-phase hyperparameters. Defaults are the published settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Spatial filters of the encoder.
    pub k1: usize,
    /// Temporal filters of the encoder.
    pub k2: usize,
    /// Temporal filter length of the encoder.
    pub p1: usize,
    /// Average-pooling kernel and stride of the projector.
    pub pool: usize,
    /// Temporal filter length of the projector.
    pub p2: usize,
    /// Depthwise multiplier of the projector.
    pub c: usize,
    /// Loss temperature; not published, SimCLR-family default.
    pub tau: f64,
    /// Contrastive sample length in seconds.
    pub sample_len_s: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Early-stopping tolerance in epochs.
    pub patience: usize,
    /// Warm-restart cycle lengths in epochs; empty means the default split
    /// of `epochs` into four cycles.
    pub restart_cycles: Vec<usize>,
    /// Subject pairs held out for the early-stopping signal.
    pub val_pairs: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            k1: 16,
            k2: 16,
            p1: 60,
            pool: 30,
            p2: 6,
            c: 2,
            tau: 0.5,
            sample_len_s: 5.0,
            lr: 7e-4,
            weight_decay: 0.015,
            epochs: 100,
            patience: 30,
            restart_cycles: Vec::new(),
            val_pairs: 1,
        }
    }
}

impl Hyperparams {
    pub fn architecture(&self, channels: usize) -> Architecture {
        Architecture {
            channels,
            k1: self.k1,
            k2: self.k2,
            p1: self.p1,
            pool: self.pool,
            p2: self.p2,
            c: self.c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture(1).validate()?;
        if !(self.tau > 0.0 && self.sample_len_s > 0.0 && self.lr > 0.0 && self.weight_decay >= 0.0)
        {
            return Err(Error::Config(format!(
                "tau, sample length and learning rate must be positive: {self:?}"
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !self.restart_cycles.is_empty() && self.restart_cycles.contains(&0) {
            return Err(Error::Config("restart cycles must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    /// `[K1, M]`
    pub spatial: Tensor<T>,
    /// `[K2, P1]`
    pub temporal: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams<T> {
    /// `[C * K2, K1]`
    pub spatial: Tensor<T>,
    /// `[C * C * K2, P2]`
    pub temporal: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub encoder: EncoderParams<T>,
    pub projector: ProjectorParams<T>,
}

fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * fan_in)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(vec![rows, fan_in], data).expect("shape matches")
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform `±1/sqrt(fan_in)` initialization, filter by filter.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let a = arch;
        Ok(Self {
            arch,
            encoder: EncoderParams {
                spatial: uniform_fan_in(a.k1, a.channels, rng),
                temporal: uniform_fan_in(a.k2, a.p1, rng),
            },
            projector: ProjectorParams {
                spatial: uniform_fan_in(a.c * a.k2, a.k1, rng),
                temporal: uniform_fan_in(a.c * a.c * a.k2, a.p2, rng),
            },
        })
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [
            &self.encoder.spatial,
            &self.encoder.temporal,
            &self.projector.spatial,
            &self.projector.temporal,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [
            &mut self.encoder.spatial,
            &mut self.encoder.temporal,
            &mut self.projector.spatial,
            &mut self.projector.temporal,
        ]
    }

    pub fn from_tensors(arch: Architecture, t: [Tensor<T>; 4]) -> Result<Self> {
        let [es, et, ps, pt] = t;
        let a = arch;
        let want = [
            [a.k1, a.channels],
            [a.k2, a.p1],
            [a.c * a.k2, a.k1],
            [a.c * a.c * a.k2, a.p2],
        ];
        for (got, w) in [&es, &et, &ps, &pt].iter().zip(want) {
            if got.shape() != w {
                return Err(Error::dim(
                    "model_params",
                    format!("tensor shape {:?} != expected {w:?}", got.shape()),
                ));
            }
        }
        Ok(Self {
            arch,
            encoder: EncoderParams {
                spatial: es,
                temporal: et,
            },
            projector: ProjectorParams {
                spatial: ps,
                temporal: pt,
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            encoder: EncoderParams {
                spatial: self.encoder.spatial.cast(),
                temporal: self.encoder.temporal.cast(),
            },
            projector: ProjectorParams {
                spatial: self.projector.spatial.cast(),
                temporal: self.projector.temporal.cast(),
            },
        }
    }

    /// Records the parameters on `g` as trainable leaves.
    pub fn record(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            enc_spatial: g.param(self.encoder.spatial.clone()),
            enc_temporal: g.param(self.encoder.temporal.clone()),
            proj_spatial: g.param(self.projector.spatial.clone()),
            proj_temporal: g.param(self.projector.temporal.clone()),
        }
    }
}

/// Graph handles of the four parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub enc_spatial: Var,
    pub enc_temporal: Var,
    pub proj_spatial: Var,
    pub proj_temporal: Var,
}

impl ModelVars {
    pub fn as_array(&self) -> [Var; 4] {
        [
            self.enc_spatial,
            self.enc_temporal,
            self.proj_spatial,
            self.proj_temporal,
        ]
    }
}

/// Encoder on the graph: `[.., M, T] -> [.., K2, K1, T]`.
pub fn encoder_graph<T: Scalar>(g: &mut Graph<T>, vars: &ModelVars, x: Var) -> Result<Var> {
    let h1 = g.spatial_conv(x, vars.enc_spatial)?;
    g.conv1d(h1, vars.enc_temporal, Padding::Same)
}

/// Projector on the graph: `[B, K2, K1, T] -> [B, C*C*K2*(T/S - P2 + 1)]`.
///
/// With `groups`, stratified normalization is applied to the pooled maps
/// and to the projector's temporal-convolution output (before its ELU).
pub fn projector_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    arch: &Architecture,
    h: Var,
    groups: Option<&[usize]>,
) -> Result<Var> {
    let b = g.value(h).shape()[0];
    let t = g.value(h).shape()[g.value(h).rank() - 1];
    let d = arch.embedding_len(t)?;
    let mut pooled = g.avg_pool_elu(h, arch.pool)?;
    if let Some(gr) = groups {
        pooled = g.stratified_norm(pooled, gr, NORM_EPS)?;
    }
    let spat = g.depthwise_spatial(pooled, vars.proj_spatial)?;
    let spat = g.elu(spat);
    let mut temp = g.depthwise_temporal(spat, vars.proj_temporal)?;
    if let Some(gr) = groups {
        temp = g.stratified_norm(temp, gr, NORM_EPS)?;
    }
    let z = g.elu(temp);
    g.reshape(z, &[b, d])
}

/// Encoder followed by projector for a `[B, M, T]` batch.
pub fn embed_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    arch: &Architecture,
    x: Var,
    groups: Option<&[usize]>,
) -> Result<Var> {
    check_channels(arch, g.value(x).shape())?;
    let h = encoder_graph(g, vars, x)?;
    projector_graph(g, vars, arch, h, groups)
}

fn check_channels(arch: &Architecture, shape: &[usize]) -> Result<()> {
    let m = shape.get(shape.len().wrapping_sub(2)).copied();
    if shape.len() < 2 || m != Some(arch.channels) {
        return Err(Error::dim(
            "encoder",
            format!(
                "input {shape:?} has {} channels (axis -2), model expects {}",
                m.unwrap_or(0),
                arch.channels
            ),
        ));
    }
    Ok(())
}

impl<T: Scalar> EncoderParams<T> {
    /// Tape-free encoder: `[.., M, T] -> [.., K2, K1, T]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() < 2 || x.shape()[x.rank() - 2] != self.spatial.shape()[1] {
            return Err(Error::dim(
                "encoder",
                format!(
                    "input {:?} does not have {} channels on axis -2",
                    x.shape(),
                    self.spatial.shape()[1]
                ),
            ));
        }
        let h1 = ops::spatial_conv(x, &self.spatial)?;
        ops::conv1d(&h1, &self.temporal, Padding::Same)
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Tape-free embedding of a single `[M, T]` sample.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_channels(&self.arch, x.shape())?;
        let mut g = Graph::new();
        let vars = self.record(&mut g);
        let xv = g.constant(x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?);
        let z = embed_graph(&mut g, &vars, &self.arch, xv, None)?;
        let v = g.value(z).clone();
        let n = v.len();
        v.reshape(&[n])
    }
}

// ---------------------------------------------------------------------------
// checkpoint: "CLSA", u16 version, 7 x u32 extents, f32 tensors (all LE)

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLSA";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(params: &ModelParams<T>, w: &mut W) -> Result<()> {
    let a = params.arch;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [a.channels, a.k1, a.k2, a.p1, a.pool, a.p2, a.c] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("extent {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for t in params.tensors() {
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ModelParams<f32>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = buf.as_slice();
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Format(format!("checkpoint truncated in {what}")));
        }
        let (h, t) = cur.split_at(n);
        cur = t;
        Ok(h)
    };
    if take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut ext = [0usize; 7];
    for e in &mut ext {
        *e = u32::from_le_bytes(take(4, "header")?.try_into().expect("4 bytes")) as usize;
    }
    let arch = Architecture {
        channels: ext[0],
        k1: ext[1],
        k2: ext[2],
        p1: ext[3],
        pool: ext[4],
        p2: ext[5],
        c: ext[6],
    };
    arch.validate().map_err(|e| Error::Format(e.to_string()))?;
    let shapes = [
        [arch.k1, arch.channels],
        [arch.k2, arch.p1],
        [arch.c * arch.k2, arch.k1],
        [arch.c * arch.c * arch.k2, arch.p2],
    ];
    let mut tensors = Vec::with_capacity(4);
    for s in shapes {
        let n = s[0] * s[1];
        let bytes = take(n * 4, "parameters")?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(s.to_vec(), data)?);
    }
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            cur.len()
        )));
    }
    let t: [Tensor<f32>; 4] = tensors.try_into().expect("four tensors");
    if t.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format("checkpoint holds non-finite weights".into()));
    }
    ModelParams::from_tensors(arch, t)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    crate::io::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let mut f = std::fs::File::open(path)?;
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn arch(m: usize) -> Architecture {
        Hyperparams::default().architecture(m)
    }

    #[test]
    fn default_shapes() {
        let p = ModelParams::<f32>::init(arch(32), &mut seeded_rng(0)).unwrap();
        let h = p.encoder.forward(&Tensor::zeros(&[32, 1250])).unwrap();
        assert_eq!(h.shape(), &[16, 16, 1250]);
        assert_eq!(arch(32).embedding_len(1250).unwrap(), 2304);
        assert_eq!(arch(62).embedding_len(6000).unwrap(), 12480);
        assert!(arch(32).embedding_len(179).is_err());
    }

    #[test]
    fn identity_encoder_replicates_channels() {
        let a = Architecture {
            channels: 3,
            k1: 3,
            k2: 1,
            p1: 5,
            pool: 2,
            p2: 2,
            c: 1,
        };
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let enc = EncoderParams {
            spatial: Tensor::<f64>::from_f64(&[3, 3], &eye).unwrap(),
            temporal: Tensor::from_f64(&[1, 5], &[0., 0., 1., 0., 0.]).unwrap(),
        };
        let x = Tensor::from_f64(&[3, 4], &(0..12).map(f64::from).collect::<Vec<_>>()).unwrap();
        let h = enc.forward(&x).unwrap();
        assert_eq!(h.shape(), &[1, 3, 4]);
        assert_eq!(h.data(), x.data());
        let _ = a;
    }

    #[test]
    fn zero_latent_gives_zero_embedding() {
        let mut g = Graph::<f64>::new();
        let p = ModelParams::<f64>::init(arch(4), &mut seeded_rng(1)).unwrap();
        let vars = p.record(&mut g);
        let h = g.constant(Tensor::zeros(&[1, 16, 16, 1250]));
        let z = projector_graph(&mut g, &vars, &p.arch, h, None).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 2304]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::<f32>::init(arch(32), &mut seeded_rng(5)).unwrap();
        let b = ModelParams::<f32>::init(arch(32), &mut seeded_rng(5)).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 32f32.sqrt();
        assert!(a.encoder.spatial.data().iter().all(|v| v.abs() <= bound));
        assert!((bound - 0.1768).abs() < 1e-4);
    }

    #[test]
    fn initialized_net_gives_finite_nonzero_embedding() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seeded_rng(9);
        let p = ModelParams::<f32>::init(arch(8), &mut rng).unwrap();
        let v: Vec<f64> = (0..8 * 400)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let z = p
            .embed(&Tensor::<f32>::from_f64(&[8, 400], &v).unwrap())
            .unwrap();
        assert!(z.is_finite());
        assert!(z.norm() > 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::<f32>::init(arch(6), &mut seeded_rng(2)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CLSA");
        let q = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_or_foreign_checkpoint_rejected() {
        let p = ModelParams::<f32>::init(arch(6), &mut seeded_rng(2)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        for cut in [0, 3, 5, 20, buf.len() - 1] {
            let r = read_checkpoint(&mut &buf[..cut]);
            assert!(matches!(r, Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn checkpoint_channel_count_enforced_at_forward() {
        let p = ModelParams::<f32>::init(arch(32), &mut seeded_rng(3)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q = read_checkpoint(&mut buf.as_slice()).unwrap();
        let err = q.encoder.forward(&Tensor::zeros(&[62, 300])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(matches!(
            q.embed(&Tensor::zeros(&[62, 300])),
            Err(Error::Dimension { .. })
        ));
    }
}
