//! Keyed, counter-based random streams.
//!
//! Every stream is a ChaCha generator whose 256-bit key is the packed tuple
//! `(base_seed, repetition, cycle, role, unit)`. Distinct tuples give distinct
//! keys, so streams never collide, and a stream never depends on how many
//! draws another stream made or on which thread ran first.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

pub fn seed_stream(base_seed: u64, repetition: u64, cycle: u64, role: u32, unit: u32) -> Stream {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&base_seed.to_le_bytes());
    key[8..16].copy_from_slice(&repetition.to_le_bytes());
    key[16..24].copy_from_slice(&cycle.to_le_bytes());
    key[24..28].copy_from_slice(&role.to_le_bytes());
    key[28..32].copy_from_slice(&unit.to_le_bytes());
    Stream::from_seed(key)
}

/// Child streams of a parent: the parent contributes one 64-bit draw, each
/// child is then keyed by a stable id.
#[derive(Debug, Clone, Copy)]
pub struct StreamFamily {
    root: u64,
}

impl StreamFamily {
    pub fn draw<R: Rng + ?Sized>(parent: &mut R) -> Self {
        Self {
            root: parent.random(),
        }
    }

    pub fn child(&self, id: u64) -> Stream {
        seed_stream(self.root, id, u64::MAX, u32::MAX, u32::MAX)
    }
}

/// `rows x cols` standard normals, filled row by row.
pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}
