pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod interpolation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};

/// Mixes `base` with a path of stream identifiers into an independent seed
/// (SplitMix64 finalizer applied per component).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
