//! Zero-phase Butterworth band-pass.
//!
//! Each cutoff is an order-4 Butterworth section (two biquads) obtained by
//! the bilinear transform; the high-pass and low-pass cascade is run
//! forward and then backward over an odd-reflected extension of the signal.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// Q factors of the two biquads of an order-4 Butterworth filter.
const BUTTER4_Q: [f64; 2] = [1.306_562_964_876_376_6, 0.541_196_100_146_197];

#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn lowpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    fn highpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 + c) / 2.0 / a0, -(1.0 + c) / a0, (1.0 + c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    /// Direct form II transposed, zero initial state.
    fn run(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let inp = *v;
            let out = self.b[0] * inp + z1;
            z1 = self.b[1] * inp - self.a[0] * out + z2;
            z2 = self.b[2] * inp - self.a[1] * out;
            *v = out;
        }
    }
}

/// Order-4 zero-phase band-pass filter design.
#[derive(Clone, Debug)]
pub struct BandPass {
    sections: Vec<Biquad>,
    pad: usize,
}

impl BandPass {
    pub fn new(low_hz: f64, high_hz: f64, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
            return Err(Error::Parameter(format!(
                "band {low_hz}-{high_hz} Hz must satisfy 0 < low < high < fs/2 = {}",
                fs / 2.0
            )));
        }
        let mut sections = Vec::with_capacity(4);
        for q in BUTTER4_Q {
            sections.push(Biquad::highpass(low_hz, fs, q));
        }
        for q in BUTTER4_Q {
            sections.push(Biquad::lowpass(high_hz, fs, q));
        }
        let pad = ((3.0 * fs / low_hz).ceil() as usize).max(12);
        Ok(Self { sections, pad })
    }

    /// Filters one channel in place.
    pub fn apply_channel(&self, x: &mut [f64]) {
        let n = x.len();
        if n < 2 {
            return;
        }
        let pad = self.pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
        for s in &self.sections {
            s.run(&mut ext);
        }
        ext.reverse();
        for s in &self.sections {
            s.run(&mut ext);
        }
        ext.reverse();
        x.copy_from_slice(&ext[pad..pad + n]);
    }

    /// Filters every row of a `[M, T]` signal.
    pub fn apply(&self, signal: &Tensor<f64>) -> Result<Tensor<f64>> {
        if signal.rank() != 2 {
            return Err(Error::dim(
                "bandpass",
                format!("signal must be [M, T], got {:?}", signal.shape()),
            ));
        }
        let t = signal.shape()[1];
        let mut out = signal.clone();
        if t > 0 {
            for row in out.data_mut().chunks_exact_mut(t) {
                self.apply_channel(row);
            }
        }
        Ok(out)
    }
}

/// Zero-phase band-pass of a `[M, T]` signal sampled at `fs` Hz.
pub fn bandpass(signal: &Tensor<f64>, low_hz: f64, high_hz: f64, fs: f64) -> Result<Tensor<f64>> {
    BandPass::new(low_hz, high_hz, fs)?.apply(signal)
}
