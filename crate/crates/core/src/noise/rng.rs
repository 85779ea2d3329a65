//! Counter-keyed random streams.
//!
//! Every `(seed, path, cell)` triple maps to its own ChaCha stream, so the
//! draws for one cell never depend on how many paths or cells were simulated
//! before it, nor on which worker thread simulated them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for one cell of one path.
pub fn cell_stream(seed: u64, path: u64, cell: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ path) ^ cell.rotate_left(32));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(path);
    rng
}
