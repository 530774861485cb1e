//! A synthetic zoom-in visual search lab: scenes, protocol, shaped rewards,
//! a linear softmax policy, group-relative policy optimization and a
//! trajectory data pipeline.

pub mod commands;
pub mod config;
pub mod geometry;
pub mod grpo;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod protocol;
pub mod rewards;
pub mod scenes;

/// Derive an independent stream seed from a root seed and a path of labels.
///
/// Each label is folded in with a SplitMix64 finalizer, so nearby roots and
/// labels give unrelated streams.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(root), |acc, &p| mix(acc ^ mix(p)))
}
