#![allow(dead_code, unused_imports)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use msgfield::synth::{avoid_grazing, camera_pair, random_quat, random_scene};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
