//! Seed derivation. Every random stream in the crate is derived from the
//! run seed plus structural coordinates (user id, episode id, iteration,
//! fold, ...) so results do not depend on scheduling or evaluation order.

/// splitmix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine seed components into one stream seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3; // arbitrary non-zero start
    for &p in parts {
        acc = splitmix(acc ^ p);
    }
    acc
}
