//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a seed
//! derived from a tuple of integers, so results do not depend on the order in
//! which parallel work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each element of `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(base: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, parts))
}

// Stream tags keep training, evaluation and perturbation draws disjoint.
pub(crate) const TAG_STEP: u64 = 0x5354_4550;
pub(crate) const TAG_TASK: u64 = 0x5441_534B;
pub(crate) const TAG_ROLLOUT: u64 = 0x524F_4C4C;
pub(crate) const TAG_EVAL: u64 = 0x4556_414C;
pub(crate) const TAG_PERTURB: u64 = 0x5045_5254;
pub(crate) const TAG_INIT: u64 = 0x494E_4954;
