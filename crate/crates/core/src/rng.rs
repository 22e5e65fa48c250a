//! Seeded random streams.
//!
//! All randomness flows through [`ChaCha20Rng`] seeded from a `u64`. Child
//! seeds are derived from a master seed and a path of stream indices with a
//! SplitMix64 finalizer, so replicate `k` of cell `(i, j)` gets the same stream
//! no matter which thread runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{Matrix, Vector};

/// Generator identification written into every report.
pub const RNG_ALGORITHM: &str = "chacha20 (rand_chacha 0.9) + ziggurat normals (rand_distr 0.5)";

pub type Rng = ChaCha20Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from `master` and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &idx| splitmix64(acc ^ splitmix64(idx.wrapping_add(1))))
}

/// Stream tags keep the different consumers of one master seed apart.
pub(crate) mod stream {
    pub const SKETCH: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const DESIGN: u64 = 3;
    pub const SWEEP: u64 = 4;
}

pub fn normal_vector(rng: &mut Rng, len: usize, std_dev: f64) -> Vector {
    Vector::from_iterator(
        len,
        (0..len).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std_dev * z
        }),
    )
}

/// `rows x cols` standard normal matrix, filled row by row.
pub fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect();
    Matrix::from_row_slice(rows, cols, &data)
}
