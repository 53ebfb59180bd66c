//! Time-major storage for per-particle paths.

use crate::measure::ParticleCloud;
use crate::scalar::Real;

/// `steps x particles x width` array laid out time-major, so that the slice of
/// all particles at one step is contiguous (the empirical measure at that
/// time).
#[derive(Debug, Clone, PartialEq)]
pub struct PathArray<T> {
    steps: usize,
    particles: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> PathArray<T> {
    pub fn zeros(steps: usize, particles: usize, width: usize) -> Self {
        Self {
            steps,
            particles,
            width,
            data: vec![T::zero(); steps * particles * width],
        }
    }

    pub fn filled(steps: usize, particles: usize, width: usize, value: &[T]) -> Self {
        assert_eq!(value.len(), width);
        let mut data = Vec::with_capacity(steps * particles * width);
        for _ in 0..steps * particles {
            data.extend_from_slice(value);
        }
        Self {
            steps,
            particles,
            width,
            data,
        }
    }

    pub fn from_vec(steps: usize, particles: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            steps * particles * width,
            "path buffer has wrong length"
        );
        Self {
            steps,
            particles,
            width,
            data,
        }
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn particles(&self) -> usize {
        self.particles
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// All particles at step `n`, `particles x width`.
    #[inline]
    pub fn step(&self, n: usize) -> &[T] {
        let len = self.particles * self.width;
        &self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn step_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.particles * self.width;
        &mut self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize) -> &[T] {
        let start = (n * self.particles + i) * self.width;
        &self.data[start..start + self.width]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, i: usize) -> &mut [T] {
        let start = (n * self.particles + i) * self.width;
        &mut self.data[start..start + self.width]
    }

    /// Empirical measure of the particles at step `n` (only meaningful for
    /// state-valued arrays).
    pub fn cloud(&self, n: usize) -> ParticleCloud<T> {
        ParticleCloud::from_flat(self.width, self.step(n).to_vec())
            .expect("state paths hold finite points")
    }

    /// Cross-particle mean at step `n`.
    pub fn step_mean(&self, n: usize) -> Vec<T> {
        let mut acc = vec![T::zero(); self.width];
        for row in self.step(n).chunks_exact(self.width) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        let m = T::from_usize_lossy(self.particles);
        acc.iter_mut().for_each(|a| *a = *a / m);
        acc
    }

    /// Keeps particles `first..first + count`.
    pub fn select_particles(&self, first: usize, count: usize) -> Self {
        assert!(first + count <= self.particles);
        let mut out = Self::zeros(self.steps, count, self.width);
        for n in 0..self.steps {
            let src = &self.step(n)[first * self.width..(first + count) * self.width];
            out.step_mut(n).copy_from_slice(src);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self <- (1 - w) self + w other`.
    pub fn relax_towards(&mut self, other: &Self, w: T) {
        assert_eq!(self.data.len(), other.data.len());
        let keep = T::one() - w;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = keep * *a + w * b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}
