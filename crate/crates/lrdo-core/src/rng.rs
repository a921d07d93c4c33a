// SPDX-License-Identifier: Apache-2.0

//! Counter-based random streams and order-fixed reductions.
//!
//! A stream is identified by a 64-bit seed plus a 64-bit stream index; the
//! generator is ChaCha8 keyed by the seed with the index as its stream
//! selector. Streams never depend on the order in which they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;

/// Labels that separate the seed spaces of different generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Basis = 1,
    Coefficients = 2,
    TrainNoise = 3,
    TestNoise = 4,
    TestData = 5,
    Perturbation = 6,
    Labels = 7,
    Target = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `(master, purpose, index)`.
pub fn derive_seed(master: u64, purpose: Purpose, index: u64) -> u64 {
    let a = splitmix64(master ^ splitmix64(purpose as u64));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Matrix of IID standard normals drawn column by column from one stream.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    let mut rng = stream_rng(seed, 0);
    let mut m = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            let z: f64 = StandardNormal.sample(&mut rng);
            m[(i, j)] = scale * z;
        }
    }
    m
}

/// Matrix whose column `j` is drawn from stream `keys[j]` of `seed`.
pub fn column_keyed_gaussian(rows: usize, keys: &[u64], seed: u64, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, keys.len());
    for (j, &key) in keys.iter().enumerate() {
        let mut rng = stream_rng(seed, key);
        for i in 0..rows {
            let z: f64 = StandardNormal.sample(&mut rng);
            m[(i, j)] = scale * z;
        }
    }
    m
}

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if xs.len() <= BLOCK {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error of the mean; the error is `None` for one sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, None);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n as f64 - 1.0);
    (mean, Some((var / n as f64).sqrt()))
}
