//! Deterministic random-number streams.
//!
//! Every stochastic component draws from a ChaCha8 stream keyed by a
//! (root seed, purpose, index) triple. Streams are independent of worker
//! count and of the order in which they are opened, so any aggregate that
//! reduces per-stream results in index order is bitwise reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain-separation tags for the different consumers of randomness.
#[derive(Debug, Clone, Copy)]
pub enum StreamKind {
    Path,
    NoiseChunk,
    Walk,
    Probe,
    Generic,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Path => 0x7061_7468,
            StreamKind::NoiseChunk => 0x6e6f_6973,
            StreamKind::Walk => 0x776f_7300,
            StreamKind::Probe => 0x7072_6f62,
            StreamKind::Generic => 0x6765_6e00,
        }
    }
}

/// splitmix64 finalizer; good avalanche, cheap.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn key_bytes(seed: u64, kind: StreamKind, index: u64, sub: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut acc = mix(seed ^ kind.tag());
    acc = mix(acc ^ index);
    acc = mix(acc ^ sub.rotate_left(17));
    for (i, chunk) in out.chunks_exact_mut(8).enumerate() {
        acc = mix(acc.wrapping_add(i as u64 + 1));
        chunk.copy_from_slice(&acc.to_le_bytes());
    }
    out
}

/// A counter-mode generator for the given (seed, kind, index) stream.
pub fn stream(seed: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(key_bytes(seed, kind, index, 0))
}

/// Stream with a secondary index (e.g. chunk coordinates packed per axis).
pub fn stream2(seed: u64, kind: StreamKind, index: u64, sub: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(key_bytes(seed, kind, index, sub))
}

/// Packs small signed lattice coordinates into one key.
pub fn pack_coords(c: [i32; 3]) -> u64 {
    let u = |v: i32| (v as u32 as u64) & 0x1f_ffff;
    (u(c[0]) << 42) | (u(c[1]) << 21) | u(c[2])
}
