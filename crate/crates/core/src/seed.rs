//! Master-seed expansion.
//!
//! Every random stream in a run is derived from one master seed and a text
//! label: `splitmix64(master ^ fnv1a64(label))`. Labels are stable strings
//! such as `"road"`, `"step1/rollout"` or `"mild/step2/fit"`, so adding a new
//! stream never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a64(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for `label` under `master`.
pub fn derive(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a64(label))
}

pub fn rng(master: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive(master, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_give_distinct_streams() {
        assert_ne!(derive(7, "road"), derive(7, "step1"));
        assert_ne!(derive(7, "road"), derive(8, "road"));
        assert_eq!(derive(7, "road"), derive(7, "road"));
    }
}
