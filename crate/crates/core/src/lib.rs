//! Cost models, activation compression, wireless delay evaluation, resource
//! planning and a round-level simulator for split fine-tuning of transformer
//! models across edge devices and a server.

pub mod compression;
pub mod model_profile;
pub mod wireless;

/// Mixes a session seed with stream identifiers (device, round, purpose) so
/// every random stream is independent of scheduling order.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
pub mod planner;
pub mod simulator;
