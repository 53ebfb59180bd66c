//! Common random numbers: one master seed, one counter-based ChaCha stream
//! per particle. A particle's increments depend only on `(seed, particle
//! index)`, never on the particle count or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::paths::PathArray;
use crate::scalar::Real;

/// Brownian increments for a block of particles, `steps x particles x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank<T> {
    pub seed: u64,
    /// Stream id of particle 0 of this bank.
    pub first_stream: u64,
    pub increments: PathArray<T>,
}

impl<T: Real> NoiseBank<T> {
    pub fn generate(
        seed: u64,
        first_stream: u64,
        particles: usize,
        steps: usize,
        m: usize,
        dt: T,
    ) -> Self {
        let sqrt_dt = dt.sqrt();
        let mut increments = PathArray::zeros(steps, particles, m);
        let mut buf = vec![0.0f64; steps * m];
        for i in 0..particles {
            fill_standard_normals(seed, first_stream + i as u64, &mut buf);
            for n in 0..steps {
                let dst = increments.at_mut(n, i);
                for (c, d) in dst.iter_mut().enumerate() {
                    *d = T::lit(buf[n * m + c]) * sqrt_dt;
                }
            }
        }
        Self {
            seed,
            first_stream,
            increments,
        }
    }

    pub fn particles(&self) -> usize {
        self.increments.particles()
    }

    pub fn steps(&self) -> usize {
        self.increments.steps()
    }
}

/// Fills `out` with the first `out.len()` standard normals of stream
/// `stream` under `seed`.
pub fn fill_standard_normals(seed: u64, stream: u64, out: &mut [f64]) {
    let mut rng = stream_rng(seed, stream);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_do_not_depend_on_bank_size() {
        let small = NoiseBank::<f64>::generate(9, 0, 3, 5, 2, 0.1);
        let large = NoiseBank::<f64>::generate(9, 0, 10, 5, 2, 0.1);
        for n in 0..5 {
            for i in 0..3 {
                assert_eq!(small.increments.at(n, i), large.increments.at(n, i));
            }
        }
        let shifted = NoiseBank::<f64>::generate(9, 2, 2, 5, 2, 0.1);
        assert_eq!(shifted.increments.at(4, 0), large.increments.at(4, 2));
    }

    #[test]
    fn increments_have_variance_dt() {
        let dt = 0.01;
        let bank = NoiseBank::<f64>::generate(1, 0, 4000, 10, 1, dt);
        let data = bank.increments.as_slice();
        let var = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
        assert!((var / dt - 1.0).abs() < 0.05, "var/dt = {}", var / dt);
    }
}
