use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator handed to every stochastic operation.
pub type Rng = ChaCha8Rng;

/// Splittable deterministic seed source.
///
/// A `SeedTree` never produces random numbers itself; it derives child seeds
/// by hashing `(parent, tag)`, so any stream can be reconstructed from the
/// root seed and the path of tags that led to it. Training uses this to make
/// batch `i` of step `s` independent of how many threads ran the previous steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree(seed)
    }

    pub fn seed(&self) -> u64 {
        self.0
    }

    pub fn child(&self, tag: u64) -> SeedTree {
        SeedTree(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    /// Child keyed by a string label.
    pub fn named(&self, label: &str) -> SeedTree {
        // FNV-1a, stable across platforms and releases
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.child(h)
    }

    pub fn rng(&self) -> Rng {
        Rng::seed_from_u64(self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
