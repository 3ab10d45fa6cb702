//! Forward and backward kernels for the closed operator set.
//!
//! Every kernel treats the axes in front of the ones it names as a flat
//! batch, so `conv1d` accepts `[C, T]` as well as `[B, C, T]`.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Zero padding mode for [`conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input length; `ceil((w - 1) / 2)` zeros on the
    /// left, the rest on the right.
    Same,
    /// No padding; output length is `t - w + 1`.
    Valid,
}

impl Padding {
    fn left(self, width: usize) -> usize {
        match self {
            Padding::Same => width / 2,
            Padding::Valid => 0,
        }
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // fixed lane split so the compiler can vectorize; order is deterministic
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut acc = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    lanes.iter().fold(acc, |s, &l| s + l)
}

#[inline]
pub fn elu_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

/// Splits `shape` into (flattened leading extent, trailing `n` axes).
fn split_tail<'a>(op: &'static str, shape: &'a [usize], n: usize) -> Result<(usize, &'a [usize])> {
    if shape.len() < n {
        return Err(Error::dim(
            op,
            format!("need rank >= {n}, got shape {shape:?}"),
        ));
    }
    let cut = shape.len() - n;
    Ok((shape[..cut].iter().product(), &shape[cut..]))
}

fn out_shape(shape: &[usize], n_tail: usize, tail: &[usize]) -> Vec<usize> {
    let mut s = shape[..shape.len() - n_tail].to_vec();
    s.extend_from_slice(tail);
    s
}

fn filters<'a, T: Scalar>(op: &'static str, w: &'a Tensor<T>) -> Result<(usize, usize, &'a [T])> {
    if w.rank() != 2 {
        return Err(Error::dim(
            op,
            format!("filters must be rank 2, got shape {:?}", w.shape()),
        ));
    }
    Ok((w.shape()[0], w.shape()[1], w.data()))
}

// ---------------------------------------------------------------------------
// spatial convolution: [.., M, T] x [K, M] -> [.., K, T]

pub fn spatial_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "spatial_conv";
    let (b, tail) = split_tail(OP, x.shape(), 2)?;
    let (m, t) = (tail[0], tail[1]);
    let (k, wm, wd) = filters(OP, w)?;
    if wm != m {
        return Err(Error::dim(
            OP,
            format!("filter width {wm} (axis 1) != input channels {m} (axis -2)"),
        ));
    }
    let xd = x.data();
    let mut y = vec![T::zero(); b * k * t];
    for bi in 0..b {
        for ki in 0..k {
            let yrow = &mut y[(bi * k + ki) * t..][..t];
            for mi in 0..m {
                axpy(yrow, wd[ki * m + mi], &xd[(bi * m + mi) * t..][..t]);
            }
        }
    }
    Tensor::new(out_shape(x.shape(), 2, &[k, t]), y)
}

pub(crate) fn spatial_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let m = x.shape()[x.rank() - 2];
    let t = x.shape()[x.rank() - 1];
    let b = x.len() / (m * t).max(1);
    let k = w.shape()[0];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dw = vec![T::zero(); k * m];
    for bi in 0..b {
        for ki in 0..k {
            let g = &dyd[(bi * k + ki) * t..][..t];
            for mi in 0..m {
                dw[ki * m + mi] += dot(g, &xd[(bi * m + mi) * t..][..t]);
            }
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        for bi in 0..b {
            for mi in 0..m {
                let row = &mut dx[(bi * m + mi) * t..][..t];
                for ki in 0..k {
                    axpy(row, wd[ki * m + mi], &dyd[(bi * k + ki) * t..][..t]);
                }
            }
        }
        Tensor::new(x.shape().to_vec(), dx).expect("shape preserved")
    });
    (dx, Tensor::new(vec![k, m], dw).expect("shape preserved"))
}

// ---------------------------------------------------------------------------
// temporal convolution: [.., C, T] x [F, W] -> [.., F, C, T']

/// One-dimensional cross-correlation of every channel with every filter.
///
/// `y[.., f, c, t] = sum_j w[f, j] * x[.., c, t + j - left]`, zero outside
/// the signal.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    const OP: &str = "conv1d";
    let (b, tail) = split_tail(OP, x.shape(), 2)?;
    let (c, t) = (tail[0], tail[1]);
    let (f, width, wd) = filters(OP, w)?;
    if width == 0 {
        return Err(Error::dim(OP, "filter width (axis 1) is zero"));
    }
    let t_out = match padding {
        Padding::Same => t,
        Padding::Valid => {
            if width > t {
                return Err(Error::dim(
                    OP,
                    format!("filter width {width} (axis 1) exceeds input length {t} (axis -1)"),
                ));
            }
            t - width + 1
        }
    };
    let left = padding.left(width);
    let xd = x.data();
    let mut y = vec![T::zero(); b * f * c * t_out];
    for bi in 0..b {
        for ci in 0..c {
            let xrow = &xd[(bi * c + ci) * t..][..t];
            for fi in 0..f {
                let yrow = &mut y[((bi * f + fi) * c + ci) * t_out..][..t_out];
                for j in 0..width {
                    let (lo, hi) = tap_range(t, t_out, left, j);
                    if lo < hi {
                        let src = lo + j - left;
                        axpy(
                            &mut yrow[lo..hi],
                            wd[fi * width + j],
                            &xrow[src..src + hi - lo],
                        );
                    }
                }
            }
        }
    }
    Tensor::new(out_shape(x.shape(), 2, &[f, c, t_out]), y)
}

/// Output positions `lo..hi` for which tap `j` reads inside the input.
#[inline]
fn tap_range(t: usize, t_out: usize, left: usize, j: usize) -> (usize, usize) {
    let lo = left.saturating_sub(j);
    let hi = (t + left).saturating_sub(j).min(t_out);
    (lo, hi.max(lo))
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    padding: Padding,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let c = x.shape()[x.rank() - 2];
    let t = x.shape()[x.rank() - 1];
    let b = x.len() / (c * t).max(1);
    let (f, width) = (w.shape()[0], w.shape()[1]);
    let t_out = dy.shape()[dy.rank() - 1];
    let left = padding.left(width);
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dw = vec![T::zero(); f * width];
    let mut dx = if need_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    for bi in 0..b {
        for ci in 0..c {
            let xoff = (bi * c + ci) * t;
            for fi in 0..f {
                let g = &dyd[((bi * f + fi) * c + ci) * t_out..][..t_out];
                for j in 0..width {
                    let (lo, hi) = tap_range(t, t_out, left, j);
                    if lo >= hi {
                        continue;
                    }
                    let src = xoff + lo + j - left;
                    dw[fi * width + j] += dot(&g[lo..hi], &xd[src..src + hi - lo]);
                    if need_dx {
                        axpy(&mut dx[src..src + hi - lo], wd[fi * width + j], &g[lo..hi]);
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"));
    (
        dx,
        Tensor::new(vec![f, width], dw).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// average pooling of ELU-activated values: [.., T] -> [.., T / S]

/// Non-overlapping mean pooling with the ELU applied inside the mean.
pub fn avg_pool_elu<T: Scalar>(x: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    avg_pool_elu_slope(x, kernel).map(|(y, _)| y)
}

/// Pooled output plus the ELU slope at every input (zero past the last
/// full window), kept for the backward pass.
pub(crate) fn avg_pool_elu_slope<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    const OP: &str = "avg_pool";
    let (b, tail) = split_tail(OP, x.shape(), 1)?;
    let t = tail[0];
    if kernel == 0 || kernel > t {
        return Err(Error::dim(
            OP,
            format!("kernel {kernel} must lie in 1..={t} (axis -1)"),
        ));
    }
    let t_out = t / kernel;
    let scale = T::one() / T::lit(kernel as f64);
    let xd = x.data();
    let mut y = Vec::with_capacity(b * t_out);
    let mut slope = vec![T::zero(); x.len()];
    for bi in 0..b {
        let row = &xd[bi * t..][..t];
        let srow = &mut slope[bi * t..][..t];
        for (win, sw) in row.chunks_exact(kernel).zip(srow.chunks_exact_mut(kernel)) {
            let mut s = T::zero();
            for (&v, d) in win.iter().zip(sw.iter_mut()) {
                let e = elu_scalar(v);
                // ELU'(x) = ELU(x) + 1 for x <= 0
                *d = if v > T::zero() {
                    T::one()
                } else {
                    e + T::one()
                };
                s += e;
            }
            y.push(s * scale);
        }
    }
    Ok((Tensor::new(out_shape(x.shape(), 1, &[t_out]), y)?, slope))
}

pub(crate) fn avg_pool_elu_backward<T: Scalar>(
    shape: &[usize],
    slope: &[T],
    kernel: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let t = shape[shape.len() - 1];
    let t_out = t / kernel;
    let b = slope.len() / t.max(1);
    let scale = T::one() / T::lit(kernel as f64);
    let dyd = dy.data();
    let mut dx = vec![T::zero(); slope.len()];
    for bi in 0..b {
        for i in 0..t_out {
            let g = dyd[bi * t_out + i] * scale;
            let r = bi * t + i * kernel..bi * t + (i + 1) * kernel;
            for (d, &s) in dx[r.clone()].iter_mut().zip(&slope[r]) {
                *d = g * s;
            }
        }
    }
    Tensor::new(shape.to_vec(), dx).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// depthwise spatial: [.., G, K, T] x [G*C, K] -> [.., G*C, T]

/// Each of the `G` maps is contracted over its `K` rows by its own `C`
/// filters; output map `g * C + c`.
pub fn depthwise_spatial<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "depthwise_spatial";
    let (b, tail) = split_tail(OP, x.shape(), 3)?;
    let (g, k, t) = (tail[0], tail[1], tail[2]);
    let (gc, wk, wd) = filters(OP, w)?;
    if wk != k || g == 0 || gc % g != 0 || gc == 0 {
        return Err(Error::dim(
            OP,
            format!(
                "filters {:?} incompatible with {g} maps of {k} rows (axes -3, -2)",
                w.shape()
            ),
        ));
    }
    let xd = x.data();
    let mut y = vec![T::zero(); b * gc * t];
    let mult = gc / g;
    for bi in 0..b {
        for gi in 0..g {
            for ci in 0..mult {
                let o = gi * mult + ci;
                let yrow = &mut y[(bi * gc + o) * t..][..t];
                for ki in 0..k {
                    axpy(
                        yrow,
                        wd[o * k + ki],
                        &xd[((bi * g + gi) * k + ki) * t..][..t],
                    );
                }
            }
        }
    }
    Tensor::new(out_shape(x.shape(), 3, &[gc, t]), y)
}

pub(crate) fn depthwise_spatial_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let r = x.rank();
    let (g, k, t) = (x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]);
    let b = x.len() / (g * k * t).max(1);
    let gc = w.shape()[0];
    let mult = gc / g;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dw = vec![T::zero(); gc * k];
    let mut dx = if need_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    for bi in 0..b {
        for gi in 0..g {
            for ci in 0..mult {
                let o = gi * mult + ci;
                let gr = &dyd[(bi * gc + o) * t..][..t];
                for ki in 0..k {
                    let xo = ((bi * g + gi) * k + ki) * t;
                    dw[o * k + ki] += dot(gr, &xd[xo..xo + t]);
                    if need_dx {
                        axpy(&mut dx[xo..xo + t], wd[o * k + ki], gr);
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"));
    (dx, Tensor::new(vec![gc, k], dw).expect("shape preserved"))
}

// ---------------------------------------------------------------------------
// depthwise temporal: [.., G, T] x [G*C, W] -> [.., G*C, T - W + 1]

pub fn depthwise_temporal<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "depthwise_temporal";
    let (b, tail) = split_tail(OP, x.shape(), 2)?;
    let (g, t) = (tail[0], tail[1]);
    let (gc, width, wd) = filters(OP, w)?;
    if g == 0 || gc == 0 || gc % g != 0 {
        return Err(Error::dim(
            OP,
            format!("{gc} filters (axis 0) not a multiple of {g} maps (axis -2)"),
        ));
    }
    if width == 0 || width > t {
        return Err(Error::dim(
            OP,
            format!("filter width {width} (axis 1) must lie in 1..={t} (axis -1)"),
        ));
    }
    let t_out = t - width + 1;
    let mult = gc / g;
    let xd = x.data();
    let mut y = vec![T::zero(); b * gc * t_out];
    for bi in 0..b {
        for gi in 0..g {
            let xrow = &xd[(bi * g + gi) * t..][..t];
            for ci in 0..mult {
                let o = gi * mult + ci;
                let yrow = &mut y[(bi * gc + o) * t_out..][..t_out];
                for j in 0..width {
                    axpy(yrow, wd[o * width + j], &xrow[j..j + t_out]);
                }
            }
        }
    }
    Tensor::new(out_shape(x.shape(), 2, &[gc, t_out]), y)
}

pub(crate) fn depthwise_temporal_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let r = x.rank();
    let (g, t) = (x.shape()[r - 2], x.shape()[r - 1]);
    let b = x.len() / (g * t).max(1);
    let (gc, width) = (w.shape()[0], w.shape()[1]);
    let t_out = t - width + 1;
    let mult = gc / g;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dw = vec![T::zero(); gc * width];
    let mut dx = if need_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    for bi in 0..b {
        for gi in 0..g {
            let xo = (bi * g + gi) * t;
            for ci in 0..mult {
                let o = gi * mult + ci;
                let gr = &dyd[(bi * gc + o) * t_out..][..t_out];
                for j in 0..width {
                    dw[o * width + j] += dot(gr, &xd[xo + j..xo + j + t_out]);
                    if need_dx {
                        axpy(&mut dx[xo + j..xo + j + t_out], wd[o * width + j], gr);
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"));
    (
        dx,
        Tensor::new(vec![gc, width], dw).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// pointwise activations

pub fn elu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(elu_scalar)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub(crate) fn elu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * elu_grad(v))
        .collect();
    Tensor::new(x.shape().to_vec(), d).expect("shape preserved")
}

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), d).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// dense layer and classification loss

/// `y = x W^T + b` for `x: [B, D]`, `W: [O, D]`, `b: [O]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    if x.rank() != 2 {
        return Err(Error::dim(
            OP,
            format!("input must be [B, D], got {:?}", x.shape()),
        ));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (o, wd_in, wd) = filters(OP, w)?;
    if wd_in != d {
        return Err(Error::dim(
            OP,
            format!("weight width {wd_in} (axis 1) != input features {d} (axis 1)"),
        ));
    }
    if b.shape() != [o] {
        return Err(Error::dim(
            OP,
            format!("bias shape {:?} != [{o}]", b.shape()),
        ));
    }
    let xd = x.data();
    let mut y = Vec::with_capacity(n * o);
    for i in 0..n {
        let xr = &xd[i * d..][..d];
        for oi in 0..o {
            y.push(dot(xr, &wd[oi * d..][..d]) + b.data()[oi]);
        }
    }
    Tensor::new(vec![n, o], y)
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dw = vec![T::zero(); o * d];
    let mut db = vec![T::zero(); o];
    for i in 0..n {
        let xr = &xd[i * d..][..d];
        for oi in 0..o {
            let g = dyd[i * o + oi];
            db[oi] += g;
            axpy(&mut dw[oi * d..][..d], g, xr);
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &mut dx[i * d..][..d];
            for oi in 0..o {
                axpy(row, dyd[i * o + oi], &wd[oi * d..][..d]);
            }
        }
        Tensor::new(vec![n, d], dx).expect("shape preserved")
    });
    (
        dx,
        Tensor::new(vec![o, d], dw).expect("shape preserved"),
        Tensor::new(vec![o], db).expect("shape preserved"),
    )
}

/// Row-wise softmax of `[B, K]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::dim(
            "softmax",
            format!("logits must be [B, K], got {:?}", logits.shape()),
        ));
    }
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    const OP: &str = "softmax_cross_entropy";
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim(
            OP,
            format!(
                "logits {:?} do not match {} labels (axis 0)",
                logits.shape(),
                labels.len()
            ),
        ));
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Parameter(format!("label {bad} outside {k} classes")));
    }
    logits.check_finite(OP)?;
    let mut total = T::zero();
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        // argmax term contributes exactly 1 inside the log; ln_1p keeps
        // precision for confident predictions
        let (imax, &m) =
            row.iter().enumerate().fold(
                (0, &row[0]),
                |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc },
            );
        let rest: T = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != imax)
            .map(|(_, &v)| (v - m).exp())
            .sum();
        total += (m - row[y]) + rest.ln_1p();
    }
    Ok(total / T::lit(labels.len() as f64))
}

pub(crate) fn softmax_cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    dloss: T,
) -> Tensor<T> {
    let mut p = softmax(logits).expect("validated in forward");
    let k = logits.shape()[1];
    let scale = dloss / T::lit(labels.len() as f64);
    for (row, &y) in p.data_mut().chunks_exact_mut(k).zip(labels) {
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    p
}

// ---------------------------------------------------------------------------
// stratified normalization: [B, ..channels.., T], z-scored per (group, channel)

/// Output of [`stratified_norm`], kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StratNormStats<T> {
    /// `1 / sqrt(var + eps)` indexed by `group * channels + channel`.
    pub inv_std: Vec<T>,
    pub channels: usize,
}

/// Z-scores the concatenation over time and over all samples sharing a
/// group id, separately for every channel.
pub fn stratified_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: &[usize],
    eps: f64,
) -> Result<(Tensor<T>, StratNormStats<T>)> {
    const OP: &str = "stratified_norm";
    if x.rank() < 2 || x.shape()[0] != groups.len() {
        return Err(Error::dim(
            OP,
            format!(
                "input {:?} needs rank >= 2 and {} samples on axis 0",
                x.shape(),
                groups.len()
            ),
        ));
    }
    let b = x.shape()[0];
    let t = x.shape()[x.rank() - 1];
    let ch = x.len().checked_div(b * t).unwrap_or(0);
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut sum = vec![0.0f64; n_groups * ch];
    let mut count = vec![0usize; n_groups];
    let xd = x.data();
    for (bi, &g) in groups.iter().enumerate() {
        count[g] += t;
        for c in 0..ch {
            sum[g * ch + c] += xd[(bi * ch + c) * t..][..t]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .enumerate()
        .map(|(i, s)| s / count[i / ch.max(1)].max(1) as f64)
        .collect();
    let mut ss = vec![0.0f64; n_groups * ch];
    for (bi, &g) in groups.iter().enumerate() {
        for c in 0..ch {
            let mu = mean[g * ch + c];
            ss[g * ch + c] += xd[(bi * ch + c) * t..][..t]
                .iter()
                .map(|v| (v.as_f64() - mu).powi(2))
                .sum::<f64>();
        }
    }
    let inv_std: Vec<T> = ss
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let var = s / count[i / ch.max(1)].max(1) as f64;
            T::lit(1.0 / (var + eps).sqrt())
        })
        .collect();
    let mut y = vec![T::zero(); x.len()];
    for (bi, &g) in groups.iter().enumerate() {
        for c in 0..ch {
            let mu = T::lit(mean[g * ch + c]);
            let s = inv_std[g * ch + c];
            let off = (bi * ch + c) * t;
            for (o, &v) in y[off..off + t].iter_mut().zip(&xd[off..off + t]) {
                *o = (v - mu) * s;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        StratNormStats {
            inv_std,
            channels: ch,
        },
    ))
}

pub(crate) fn stratified_norm_backward<T: Scalar>(
    y: &Tensor<T>,
    groups: &[usize],
    stats: &StratNormStats<T>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let ch = stats.channels;
    let t = y.shape()[y.rank() - 1];
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut count = vec![0usize; n_groups];
    for &g in groups {
        count[g] += t;
    }
    let (yd, dyd) = (y.data(), dy.data());
    let mut mean_dy = vec![T::zero(); n_groups * ch];
    let mut mean_dyy = vec![T::zero(); n_groups * ch];
    for (bi, &g) in groups.iter().enumerate() {
        for c in 0..ch {
            let off = (bi * ch + c) * t;
            let gr = &dyd[off..off + t];
            mean_dy[g * ch + c] += gr.iter().copied().sum::<T>();
            mean_dyy[g * ch + c] += dot(gr, &yd[off..off + t]);
        }
    }
    for (i, (a, b)) in mean_dy.iter_mut().zip(mean_dyy.iter_mut()).enumerate() {
        let n = T::lit(count[i / ch.max(1)].max(1) as f64);
        *a /= n;
        *b /= n;
    }
    let mut dx = vec![T::zero(); y.len()];
    for (bi, &g) in groups.iter().enumerate() {
        for c in 0..ch {
            let k = g * ch + c;
            let off = (bi * ch + c) * t;
            for i in off..off + t {
                dx[i] = stats.inv_std[k] * (dyd[i] - mean_dy[k] - yd[i] * mean_dyy[k]);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// NT-Xent contrastive loss over z: [2N, ..] (rows 0..N subject A, N..2N subject B)

/// Indices of the candidates in the denominator for `anchor` in a batch of
/// `2n` embeddings: every other embedding, positive included.
pub fn denominator_indices(anchor: usize, n: usize) -> Vec<usize> {
    (0..2 * n).filter(|&j| j != anchor).collect()
}

/// Index of the positive partner of `anchor`.
#[inline]
pub fn positive_of(anchor: usize, n: usize) -> usize {
    if anchor < n {
        anchor + n
    } else {
        anchor - n
    }
}

pub(crate) const NORM_FLOOR: f64 = 1e-12;

/// Unit-normalized rows plus their original norms.
fn unit_rows<T: Scalar>(z: &Tensor<T>) -> Result<(usize, usize, Vec<T>, Vec<T>)> {
    const OP: &str = "nt_xent";
    if z.rank() < 2 {
        return Err(Error::dim(
            OP,
            format!("embeddings must be [2N, D], got {:?}", z.shape()),
        ));
    }
    let rows = z.shape()[0];
    let d = z.len() / rows.max(1);
    let mut u = z.data().to_vec();
    let mut norms = Vec::with_capacity(rows);
    for (i, row) in u.chunks_exact_mut(d).enumerate() {
        let nrm = dot(row, row).sqrt();
        if !(nrm.as_f64() > NORM_FLOOR) {
            return Err(Error::numeric(OP, format!("embedding {i} has norm {nrm}")));
        }
        for v in row.iter_mut() {
            *v /= nrm;
        }
        norms.push(nrm);
    }
    Ok((rows, d, u, norms))
}

fn similarity_matrix<T: Scalar>(u: &[T], rows: usize, d: usize) -> Vec<T> {
    let mut s = vec![T::zero(); rows * rows];
    for i in 0..rows {
        for j in i..rows {
            let v = dot(&u[i * d..][..d], &u[j * d..][..d]);
            s[i * rows + j] = v;
            s[j * rows + i] = v;
        }
    }
    s
}

/// Per-anchor softmax over the denominator candidates, and the loss terms.
fn nt_xent_terms<T: Scalar>(sim: &[T], rows: usize, tau: T) -> (Vec<T>, Vec<T>) {
    let n = rows / 2;
    let mut probs = vec![T::zero(); rows * rows];
    let mut losses = Vec::with_capacity(rows);
    for a in 0..rows {
        let cand = denominator_indices(a, n);
        let m = cand
            .iter()
            .map(|&j| sim[a * rows + j] / tau)
            .fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for &j in &cand {
            let e = (sim[a * rows + j] / tau - m).exp();
            probs[a * rows + j] = e;
            s += e;
        }
        for &j in &cand {
            probs[a * rows + j] /= s;
        }
        let p = positive_of(a, n);
        losses.push(m + s.ln() - sim[a * rows + p] / tau);
    }
    (probs, losses)
}

/// Total NT-Xent loss `sum_i l_i^A + sum_i l_i^B`.
pub fn nt_xent<T: Scalar>(z: &Tensor<T>, tau: T) -> Result<T> {
    let (rows, d, u, _) = unit_rows(z)?;
    check_pairs(rows)?;
    let sim = similarity_matrix(&u, rows, d);
    let (_, losses) = nt_xent_terms(&sim, rows, tau);
    Ok(losses.into_iter().sum())
}

/// Individual loss terms in the order `l_1^A..l_N^A, l_1^B..l_N^B`.
pub fn nt_xent_per_anchor<T: Scalar>(z: &Tensor<T>, tau: T) -> Result<Vec<T>> {
    let (rows, d, u, _) = unit_rows(z)?;
    check_pairs(rows)?;
    let sim = similarity_matrix(&u, rows, d);
    Ok(nt_xent_terms(&sim, rows, tau).1)
}

fn check_pairs(rows: usize) -> Result<()> {
    if !rows.is_multiple_of(2) || rows < 4 {
        return Err(Error::Config(format!(
            "contrastive batch needs 2N rows with N >= 2, got {rows}"
        )));
    }
    Ok(())
}

pub(crate) fn nt_xent_backward<T: Scalar>(z: &Tensor<T>, tau: T, dloss: T) -> Result<Tensor<T>> {
    let (rows, d, u, norms) = unit_rows(z)?;
    let n = rows / 2;
    let sim = similarity_matrix(&u, rows, d);
    let (mut g, _) = nt_xent_terms(&sim, rows, tau);
    // g[a, b] = dL/dS_ab
    for a in 0..rows {
        g[a * rows + positive_of(a, n)] -= T::one();
    }
    let inv_tau = dloss / tau;
    let mut du = vec![T::zero(); rows * d];
    for a in 0..rows {
        let row = &mut du[a * d..][..d];
        for b in 0..rows {
            if a == b {
                continue;
            }
            let coef = (g[a * rows + b] + g[b * rows + a]) * inv_tau;
            axpy(row, coef, &u[b * d..][..d]);
        }
    }
    let mut dz = vec![T::zero(); rows * d];
    for a in 0..rows {
        let ua = &u[a * d..][..d];
        let dua = &du[a * d..][..d];
        let proj = dot(ua, dua);
        for ((o, &gu), &uv) in dz[a * d..][..d].iter_mut().zip(dua).zip(ua) {
            *o = (gu - uv * proj) / norms[a];
        }
    }
    Tensor::new(z.shape().to_vec(), dz)
}
