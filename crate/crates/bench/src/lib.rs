//! Fixtures shared by the benchmarks.

use clisa::eval::{gen_synthetic, SynthSpec};
use clisa::{Hyperparams, Recording};

/// Eight subjects, twelve channels at 100 Hz.
pub fn corpus() -> Vec<Recording> {
    gen_synthetic(&SynthSpec {
        snr: 0.1,
        ..SynthSpec::default()
    })
    .expect("valid spec")
}

/// The reduced architecture used on the synthetic corpus.
pub fn small_hyperparams() -> Hyperparams {
    Hyperparams {
        k1: 8,
        k2: 8,
        p1: 15,
        pool: 25,
        p2: 4,
        sample_len_s: 2.0,
        lr: 3e-3,
        epochs: 1,
        patience: 1,
        ..Hyperparams::default()
    }
}
