//! Deterministic seed derivation.
//!
//! Every random decision in a run flows from the experiment's root seed
//! through a fixed splitmix64 chain keyed by purpose tags, so reruns and
//! resumed runs see identical randomness regardless of execution order.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Chain the root seed through a sequence of tags.
pub fn derive(root: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(root ^ 0xA076_1D64_78BD_642F);
    for t in tags {
        s = splitmix64(s ^ splitmix64(*t));
    }
    s
}

pub mod tag {
    pub const INPUT_SIGNAL: u64 = 1;
    pub const INITIAL_POINTS: u64 = 2;
    pub const ENSEMBLE: u64 = 3;
    pub const ACQUIRE: u64 = 4;
    pub const FINAL_TRAIN: u64 = 5;
    pub const TEST_CLIP: u64 = 6;
    pub const TEST_SETTINGS: u64 = 7;
    pub const BASELINE: u64 = 8;
    pub const TOPUP: u64 = 9;
}

pub fn input_signal_seed(root: u64) -> u64 {
    derive(root, &[tag::INPUT_SIGNAL])
}

pub fn initial_points_seed(root: u64) -> u64 {
    derive(root, &[tag::INITIAL_POINTS])
}

/// Base seed for round `r`'s ensemble; member i trains with base + i.
pub fn ensemble_seed(root: u64, round: u32) -> u64 {
    derive(root, &[tag::ENSEMBLE, round as u64])
}

pub fn acquire_seed(root: u64, round: u32, attempt: u32) -> u64 {
    derive(root, &[tag::ACQUIRE, round as u64, attempt as u64])
}

pub fn final_train_seed(root: u64, round: u32) -> u64 {
    derive(root, &[tag::FINAL_TRAIN, round as u64])
}

pub fn test_clip_seed(root: u64, clip: u32) -> u64 {
    derive(root, &[tag::TEST_CLIP, clip as u64])
}

pub fn test_settings_seed(root: u64) -> u64 {
    derive(root, &[tag::TEST_SETTINGS])
}

/// Baselines draw their settings per (strategy, seed index).
pub fn baseline_seed(root: u64, strategy: u64, seed_index: u32) -> u64 {
    derive(root, &[tag::BASELINE, strategy, seed_index as u64])
}
