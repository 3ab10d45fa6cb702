//! Contrastive learning of subject-invariant EEG representations.
//!
//! The pipeline has two phases. A spatiotemporal convolutional encoder and
//! a pooling/depthwise projector are trained with a normalized
//! temperature-scaled cross-entropy loss on time-aligned sample pairs drawn
//! from two subjects who watched the same stimulus. The frozen encoder then
//! feeds differential-entropy features to a small MLP emotion classifier.
//!
//! Modules, bottom-up:
//!
//! - [`kernel`]: tensors and reverse-mode differentiation
//! - [`preprocess`]: filtering, re-referencing, artifact repair, normalization
//! - [`sampler`]: inter-subject minibatches
//! - [`network`]: encoder, projector, initialization, checkpoints
//! - [`contrastive`]: similarity, loss, optimizer, training loop
//! - [`predict`]: differential entropy, smoothing, classifier
//! - [`eval`]: cross-subject protocols, metrics, attribution, synthetic data
//! - [`io`]: dataset manifests and artifact files

// `!(x > 0.0)` is the NaN-rejecting form used by every validator
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrastive;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernel;
pub mod network;
pub mod predict;
pub mod preprocess;
pub mod recording;
pub mod sampler;

pub use error::{Error, Result};
pub use kernel::{Graph, Scalar, Tensor, Var};
pub use network::{Architecture, EncoderParams, Hyperparams, ModelParams, ProjectorParams};
pub use recording::{Recording, Trial};

/// Seeded generator used everywhere randomness is drawn.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Convenience constructor for [`Rng`].
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Mixes `parts` into `base` (SplitMix64 steps), giving independent seeds
/// for folds, methods and stages that do not shift when others are added.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
