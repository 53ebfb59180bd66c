//! Empirical probability measures on `R^d` and the 2-Wasserstein distance
//! between them.

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::stream_rng;
use crate::scalar::Real;

/// Uniform empirical measure `(1/M) sum_j delta_{x_j}` on `R^d`.
///
/// Immutable after construction; the mean is cached because almost every
/// mean-field coefficient reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud<T> {
    dim: usize,
    points: Vec<T>,
    mean: Vec<T>,
}

impl<T: Real> ParticleCloud<T> {
    pub fn new(points: &[Vec<T>]) -> Result<Self> {
        let dim = points
            .first()
            .map(|p| p.len())
            .ok_or_else(|| Error::InvalidParameter("empty cloud".into()))?;
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::Dimension(format!(
                    "point of length {} in a {dim}-d cloud",
                    p.len()
                )));
            }
            flat.extend_from_slice(p);
        }
        Self::from_flat(dim, flat)
    }

    /// Builds a cloud from `M * dim` packed coordinates.
    pub fn from_flat(dim: usize, points: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("dimension must be positive".into()));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "{} coordinates do not form whole {dim}-d points",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "cloud has non-finite coordinates".into(),
            ));
        }
        let m = T::from_usize_lossy(points.len() / dim);
        let mut mean = vec![T::zero(); dim];
        for p in points.chunks_exact(dim) {
            for (a, &v) in mean.iter_mut().zip(p) {
                *a = *a + v;
            }
        }
        mean.iter_mut().for_each(|a| *a = *a / m);
        Ok(Self { dim, points, mean })
    }

    /// One-dimensional cloud from scalars.
    pub fn from_scalars(values: &[T]) -> Result<Self> {
        Self::from_flat(1, values.to_vec())
    }

    /// `count` copies of a single point.
    pub fn dirac(point: &[T], count: usize) -> Self {
        let mut flat = Vec::with_capacity(point.len() * count);
        for _ in 0..count {
            flat.extend_from_slice(point);
        }
        Self::from_flat(point.len(), flat).expect("finite dirac location")
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn point(&self, j: usize) -> &[T] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[T]> {
        self.points.chunks_exact(self.dim)
    }

    #[inline]
    pub fn as_flat(&self) -> &[T] {
        &self.points
    }

    /// Barycentre `(1/M) sum_j x_j`.
    #[inline]
    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Second-moment norm `(int |x|^2 dmu)^{1/2}`.
    pub fn norm2(&self) -> T {
        let s: T = self.points.iter().map(|&v| v * v).sum();
        (s / T::from_usize_lossy(self.len())).sqrt()
    }

    /// Same cloud with every point shifted by `delta`.
    pub fn shifted(&self, delta: &[T]) -> Self {
        let mut pts = self.points.clone();
        for p in pts.chunks_exact_mut(self.dim) {
            for (a, &d) in p.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        Self::from_flat(self.dim, pts).expect("shift keeps points finite")
    }

    /// Same cloud with particle `j` replaced.
    pub fn with_point(&self, j: usize, point: &[T]) -> Self {
        let mut pts = self.points.clone();
        pts[j * self.dim..(j + 1) * self.dim].copy_from_slice(point);
        Self::from_flat(self.dim, pts).expect("finite replacement point")
    }
}

/// Free-function form of [`ParticleCloud::mean`].
pub fn mean<T: Real>(cloud: &ParticleCloud<T>) -> Vec<T> {
    cloud.mean().to_vec()
}

/// Free-function form of [`ParticleCloud::norm2`].
pub fn norm2<T: Real>(cloud: &ParticleCloud<T>) -> T {
    cloud.norm2()
}

/// How a W2 value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMethod {
    /// Monotone rearrangement on the line (exact).
    SortedCoupling,
    /// Optimal assignment on the squared-distance matrix (exact).
    Assignment,
    /// Average over random 1-d projections (approximate).
    Sliced { directions: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wasserstein<T> {
    pub distance: T,
    pub method: TransportMethod,
}

impl<T> Wasserstein<T> {
    pub fn is_exact(&self) -> bool {
        !matches!(self.method, TransportMethod::Sliced { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportConfig {
    /// Largest cloud solved by exact assignment when `d > 1`.
    pub assignment_cutoff: usize,
    pub sliced_directions: usize,
    pub sliced_seed: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            assignment_cutoff: 512,
            sliced_directions: 64,
            sliced_seed: 0x51_1ced,
        }
    }
}

/// 2-Wasserstein distance with the default [`TransportConfig`].
pub fn wasserstein2<T: Real>(a: &ParticleCloud<T>, b: &ParticleCloud<T>) -> Result<Wasserstein<T>> {
    wasserstein2_with(a, b, &TransportConfig::default())
}

pub fn wasserstein2_with<T: Real>(
    a: &ParticleCloud<T>,
    b: &ParticleCloud<T>,
    cfg: &TransportConfig,
) -> Result<Wasserstein<T>> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "clouds in R^{} and R^{}",
            a.dim(),
            b.dim()
        )));
    }
    let equal = a.len() == b.len();
    if a.dim() == 1 {
        let sq = if equal {
            sorted_w2_sq(a.as_flat(), b.as_flat())
        } else {
            quantile_w2_sq(a.as_flat(), b.as_flat())
        };
        return Ok(Wasserstein {
            distance: sq.max(T::zero()).sqrt(),
            method: TransportMethod::SortedCoupling,
        });
    }
    if equal && a.len() <= cfg.assignment_cutoff {
        let n = a.len();
        let mut cost = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                cost[i * n + j] = sq_dist(a.point(i), b.point(j));
            }
        }
        let perm = min_cost_assignment(&cost, n);
        let total: T = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        return Ok(Wasserstein {
            distance: (total / T::from_usize_lossy(n)).max(T::zero()).sqrt(),
            method: TransportMethod::Assignment,
        });
    }
    Ok(Wasserstein {
        distance: sliced_w2_sq(a, b, cfg.sliced_directions, cfg.sliced_seed).sqrt(),
        method: TransportMethod::Sliced {
            directions: cfg.sliced_directions,
        },
    })
}

/// Exact transport between equal-size clouds, refusing to fall back to the
/// sliced approximation.
pub fn wasserstein2_exact<T: Real>(a: &ParticleCloud<T>, b: &ParticleCloud<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::UnequalCounts {
            left: a.len(),
            right: b.len(),
        });
    }
    let cfg = TransportConfig {
        assignment_cutoff: usize::MAX,
        ..TransportConfig::default()
    };
    Ok(wasserstein2_with(a, b, &cfg)?.distance)
}

fn sq_dist<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter()
        .zip(y)
        .fold(T::zero(), |acc, (&p, &q)| acc + (p - q) * (p - q))
}

fn sorted<T: Real>(v: &[T]) -> Vec<T> {
    let mut s = v.to_vec();
    s.sort_by(|x, y| x.partial_cmp(y).expect("finite coordinates"));
    s
}

/// Mean squared difference of the sorted samples.
fn sorted_w2_sq<T: Real>(a: &[T], b: &[T]) -> T {
    let (sa, sb) = (sorted(a), sorted(b));
    let s: T = sa.iter().zip(&sb).map(|(&x, &y)| (x - y) * (x - y)).sum();
    s / T::from_usize_lossy(sa.len())
}

/// `int_0^1 |F_a^{-1}(u) - F_b^{-1}(u)|^2 du` for empirical measures of any
/// sizes, by merging the two quantile step functions.
fn quantile_w2_sq<T: Real>(a: &[T], b: &[T]) -> T {
    let (sa, sb) = (sorted(a), sorted(b));
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    let mut total = T::zero();
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        let diff = sa[i] - sb[j];
        total = total + T::lit(next - u) * diff * diff;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

fn sliced_w2_sq<T: Real>(
    a: &ParticleCloud<T>,
    b: &ParticleCloud<T>,
    directions: usize,
    seed: u64,
) -> T {
    let d = a.dim();
    let mut rng = stream_rng(seed, 0);
    let mut acc = T::zero();
    let mut pa = vec![T::zero(); a.len()];
    let mut pb = vec![T::zero(); b.len()];
    for _ in 0..directions {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= nrm);
        let dir: Vec<T> = dir.into_iter().map(T::lit).collect();
        for (p, x) in pa.iter_mut().zip(a.points()) {
            *p = crate::scalar::dot(x, &dir);
        }
        for (p, x) in pb.iter_mut().zip(b.points()) {
            *p = crate::scalar::dot(x, &dir);
        }
        acc = acc + quantile_w2_sq(&pa, &pb);
    }
    acc / T::from_usize_lossy(directions.max(1))
}

/// Minimum-cost perfect assignment on an `n x n` cost matrix (Hungarian
/// method with row/column potentials, `O(n^3)`). Returns `perm` with row `i`
/// assigned to column `perm[i]`.
pub fn min_cost_assignment<T: Real>(cost: &[T], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays with a virtual column 0.
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    perm
}

/// Per-atom gradients of the empirical projection `(x_1..x_M) -> u(mu^M)`:
/// `g_i = (1/M) du(mu^M)(x_i)`, where `du(cloud, x')` is the measure
/// derivative of `u` evaluated at the query point `x'`.
pub fn empirical_projection_gradient<T, F>(du: F, cloud: &ParticleCloud<T>) -> Vec<Vec<T>>
where
    T: Real,
    F: Fn(&ParticleCloud<T>, &[T]) -> Vec<T>,
{
    let m = T::from_usize_lossy(cloud.len());
    cloud
        .points()
        .map(|x| du(cloud, x).into_iter().map(|v| v / m).collect())
        .collect()
}

/// Root-scale propagation-of-chaos rate `N^{-1/(d+4)}`.
pub fn chaos_rate<T: Real>(n: usize, d: usize) -> T {
    assert!(n >= 1 && d >= 1, "chaos_rate needs N >= 1 and d >= 1");
    T::from_usize_lossy(n).powf(-T::one() / T::from_usize_lossy(d + 4))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud1(v: &[f64]) -> ParticleCloud<f64> {
        ParticleCloud::from_scalars(v).unwrap()
    }

    #[test]
    fn mean_and_norm_of_small_clouds() {
        assert_eq!(cloud1(&[0.0, 2.0]).mean(), &[1.0]);
        assert_eq!(cloud1(&[-3.5]).mean(), &[-3.5]);
        assert_eq!(cloud1(&[0.0]).norm2(), 0.0);
        assert!((cloud1(&[3.0, 4.0]).norm2() - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn invalid_clouds_are_rejected() {
        assert!(ParticleCloud::<f64>::from_flat(2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(ParticleCloud::<f64>::from_flat(1, vec![]).is_err());
        assert!(ParticleCloud::from_flat(1, vec![f64::NAN]).is_err());
        assert!(ParticleCloud::new(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn one_dimensional_examples() {
        let w = wasserstein2(&cloud1(&[0.0]), &cloud1(&[1.0])).unwrap();
        assert_eq!(w.distance, 1.0);
        assert_eq!(w.method, TransportMethod::SortedCoupling);
        let w = wasserstein2(&cloud1(&[0.0, 2.0]), &cloud1(&[1.0, 3.0])).unwrap();
        assert!((w.distance - 1.0).abs() < 1e-15);
        let c = cloud1(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein2(&c, &c).unwrap().distance, 0.0);
    }

    #[test]
    fn unequal_counts_on_the_line_use_quantiles() {
        // {0,0,1,1} and {0,1} are the same measure.
        let w = wasserstein2(&cloud1(&[0.0, 1.0, 0.0, 1.0]), &cloud1(&[0.0, 1.0])).unwrap();
        assert!(w.distance.abs() < 1e-15);
        let w = wasserstein2(&cloud1(&[0.0]), &cloud1(&[1.0, 3.0])).unwrap();
        assert!((w.distance - 5.0f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn exact_mode_rejects_unequal_counts() {
        let a = ParticleCloud::new(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let b = ParticleCloud::new(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(
            wasserstein2_exact(&a, &b),
            Err(Error::UnequalCounts { left: 2, right: 1 })
        );
        let sliced = wasserstein2(&a, &b).unwrap();
        assert!(!sliced.is_exact());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = ParticleCloud::new(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            wasserstein2(&a, &cloud1(&[0.0])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn large_multivariate_clouds_go_sliced() {
        let pts: Vec<Vec<f64>> = (0..600)
            .map(|i| vec![(i as f64).sin(), (i as f64).cos()])
            .collect();
        let a = ParticleCloud::new(&pts).unwrap();
        let w = wasserstein2(&a, &a.shifted(&[0.5, 0.0])).unwrap();
        assert_eq!(w.method, TransportMethod::Sliced { directions: 64 });
        // a translation by v has sliced W2^2 = E[(theta.v)^2] = |v|^2 / 2 in 2-d
        assert!((w.distance - (0.125f64).sqrt()).abs() < 0.05);
    }

    #[test]
    fn hungarian_on_a_known_matrix() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let perm = min_cost_assignment(&cost, 3);
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn projection_gradient_examples() {
        let c = cloud1(&[1.0, 3.0]);
        let g = empirical_projection_gradient(|_, x: &[f64]| vec![2.0 * x[0]], &c);
        assert_eq!(g, vec![vec![1.0], vec![3.0]]);
        let g = empirical_projection_gradient(|_, _: &[f64]| vec![0.0], &c);
        assert_eq!(g, vec![vec![0.0], vec![0.0]]);
    }

    #[test]
    fn chaos_rate_examples() {
        assert_eq!(chaos_rate::<f64>(1, 3), 1.0);
        assert!((chaos_rate::<f64>(32, 1) - 0.5).abs() < 1e-15);
        assert!(chaos_rate::<f64>(33, 2) < chaos_rate::<f64>(32, 2));
    }
}
