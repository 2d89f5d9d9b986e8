use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, stream, index)`; order of use does not matter.
pub fn derive(seed: u64, stream: u64, index: u64) -> Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
    Rng::seed_from_u64(s)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
