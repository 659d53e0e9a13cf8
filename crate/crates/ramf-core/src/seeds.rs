//! Deterministic derivation of named RNG substreams from one master seed.

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Child seed for a tagged substream of `base`.
pub(crate) fn mix(base: u64, tag: u64) -> u64 {
    splitmix(base ^ splitmix(tag))
}

/// Child seed keyed by two indices (e.g. stage and epoch).
pub(crate) fn mix3(base: u64, a: u64, b: u64) -> u64 {
    mix(mix(base, a), b)
}
