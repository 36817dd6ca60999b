//! Deterministic RNG streams keyed by `(seed, tags...)`.
//!
//! Every random draw in a run comes from a stream derived from the run seed
//! and the position that needs it (step, batch slot, phase, epoch), so
//! parallel and serial execution and resumed runs see identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 0x494e_4954;
pub const TAG_PARTITION: u64 = 0x5041_5254;
pub const TAG_EPOCH: u64 = 0x4550_4f43;
pub const TAG_AUGMENT: u64 = 0x4155_474d;
pub const TAG_SUBSET: u64 = 0x5355_4253;
pub const TAG_SYNTH: u64 = 0x5359_4e54;
pub const TAG_PROBE: u64 = 0x5052_4f42;
pub const TAG_DISTILL: u64 = 0x4449_5354;
pub const TAG_VAL_LOSS: u64 = 0x5641_4c4c;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &t in tags {
        h = splitmix(h ^ splitmix(t));
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
