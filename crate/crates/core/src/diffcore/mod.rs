//! Minimal differentiable-computation engine.
//!
//! A [`Tape`] records tensor operations during the forward pass and replays
//! them in reverse to accumulate exact chain-rule gradients into every
//! parameter reachable from a scalar loss. Parameters live outside the tape
//! in a [`ParamSet`] and are updated by [`AdamState`] between tapes.
//!
//! Everything is 64-bit; broadcasting is restricted to the leading-batch
//! rule documented on [`Tape::add`].

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{glorot_uniform, ParamBinding, ParamSet};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

/// Derive an independent seed for a named sub-stream of `base`.
///
/// Uses splitmix64 so that stream indices as close as 0 and 1 still yield
/// unrelated generators. Stable across platforms and releases.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
